"""Pure numpy implementations of the hot kernels (fallback backend)."""

import numpy as np


def window_similarity(windows):
    """Mean pairwise window similarity over K snapshots.

    ``windows`` is (K, N, h); returns the symmetric (N, N) matrix with unit
    diagonal. Similarity is 0.5/(1+euclid) + 0.25*(cos+1), with cos = 1 when
    both windows are zero and 0 when exactly one is.
    """
    w = np.ascontiguousarray(windows, dtype=np.float64)
    k_count, n, _ = w.shape
    acc = np.zeros((n, n))
    iu = np.triu_indices(n, 1)
    for k in range(k_count):
        x = w[k]
        diff = x[:, None, :] - x[None, :, :]
        dist = np.sqrt(np.einsum("ijh,ijh->ij", diff, diff))
        sq = np.einsum("ih,ih->i", x, x)
        dot = x @ x.T
        norm = np.sqrt(sq[:, None] * sq[None, :])
        zero_i = sq[:, None] == 0.0
        zero_j = sq[None, :] == 0.0
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where(norm > 0.0, dot / np.where(norm > 0.0, norm, 1.0), 0.0)
        cos = np.where(zero_i & zero_j, 1.0, np.where(zero_i ^ zero_j, 0.0, cos))
        cos = np.clip(cos, -1.0, 1.0)
        sim = 0.5 / (1.0 + dist) + 0.25 * (cos + 1.0)
        acc[iu] += sim[iu]
    acc /= max(k_count, 1)
    out = np.eye(n)
    out[iu] = acc[iu]
    out.T[iu] = acc[iu]
    return out


def variation_stats(values, mask, cal_dow, cal_slot, weather, cell_t, cell_dow, cell_slot,
                    cell_weather, limit, pi_q):
    """Context-similar sets, scanned backward from each cell.

    For region i and target cell m, members are observed ``values[i, tq]``
    with ``tq < min(cell_t[m], limit[m])`` whose (dow, slot, weather) equals
    the cell's triple; the scan stops at ``pi_q`` members. Returns
    (population std, member count), each (N, M).
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n = values.shape[0]
    m_count = len(cell_t)
    std = np.zeros((n, m_count))
    count = np.zeros((n, m_count), dtype=np.int64)
    for m in range(m_count):
        stop = min(int(cell_t[m]), int(limit[m]))
        if stop <= 0 or pi_q <= 0:
            continue
        tq = np.arange(stop - 1, -1, -1)
        cal_ok = (cal_dow[:stop][::-1] == cell_dow[m]) & (cal_slot[:stop][::-1] == cell_slot[m])
        tq = tq[cal_ok]
        if tq.size == 0:
            continue
        for i in range(n):
            ok = mask[i, tq] & (weather[i, tq] == cell_weather[i, m])
            members = values[i, tq[ok][:pi_q]]
            count[i, m] = members.size
            if members.size > 1:
                std[i, m] = members.std()
    return std, count
