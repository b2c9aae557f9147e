"""NumPy fallback for the histogram split search."""

import numpy as np


def best_split(codes, y, rows, cols, n_bins, min_rows):
    """Best variance-reduction split of ``rows`` over candidate ``cols``.

    Returns ``(feature, bin, gain)``; rows with ``code <= bin`` go left.
    ``feature`` is -1 when no admissible split exists.
    """
    n = len(rows)
    if n < 2 * min_rows or len(cols) == 0 or int(np.max(n_bins[cols])) < 2:
        return -1, -1, 0.0
    yr = y[rows]
    total = float(np.sum(yr))
    parent = total * total / n
    sub = codes[rows]
    best_f, best_b, best_gain = -1, -1, 0.0
    for f in cols:
        nb = int(n_bins[f])
        if nb < 2:
            continue
        code = sub[:, f]
        s_left = np.cumsum(np.bincount(code, weights=yr, minlength=nb))[:-1]
        c_left = np.cumsum(np.bincount(code, minlength=nb))[:-1]
        c_right = n - c_left
        ok = (c_left >= min_rows) & (c_right >= min_rows)
        if not ok.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = s_left * s_left / c_left + (total - s_left) ** 2 / c_right - parent
        gain = np.where(ok, gain, -np.inf)
        b = int(np.argmax(gain))
        if gain[b] > best_gain:
            best_f, best_b, best_gain = int(f), b, float(gain[b])
    return best_f, best_b, best_gain
