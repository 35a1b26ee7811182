"""Loop-bound numeric kernels: numba-jitted with pure-numpy fallbacks.

Set MLADAPT_DISABLE_NUMBA=1 to force the numpy implementations (same
algorithms, vectorized). `benchmarks/bench_kernels.py` compares the two.
"""

import os

import numpy as np

if os.environ.get("MLADAPT_DISABLE_NUMBA"):
    njit = None
else:
    try:
        from numba import njit
    except ImportError:
        njit = None

HAVE_NUMBA = njit is not None

_CHUNK = 1 << 16


def _edit_distance_py(a, b):
    # two-row Levenshtein DP over integer token ids
    n, m = a.shape[0], b.shape[0]
    prev = np.arange(m + 1, dtype=np.int64)
    cur = np.empty(m + 1, dtype=np.int64)
    for i in range(n):
        cur[0] = i + 1
        for j in range(m):
            cost = 0 if a[i] == b[j] else 1
            best = prev[j] + cost
            if prev[j + 1] + 1 < best:
                best = prev[j + 1] + 1
            if cur[j] + 1 < best:
                best = cur[j] + 1
            cur[j + 1] = best
        prev, cur = cur, prev
    return prev[m]


def _edit_distance_numpy(a, b):
    # row-at-a-time DP; the insertion relaxation min_k(row[k] + (j-k)) is a
    # running minimum of row[k]-k plus j
    n, m = a.shape[0], b.shape[0]
    offsets = np.arange(m + 1, dtype=np.int64)
    prev = offsets.copy()
    for i in range(n):
        cur = np.empty(m + 1, dtype=np.int64)
        cur[0] = i + 1
        sub = prev[:-1] + (b != a[i])
        dele = prev[1:] + 1
        cur[1:] = np.minimum(sub, dele)
        cur = np.minimum.accumulate(cur - offsets) + offsets
        prev = cur
    return int(prev[m])


def _ctc_path_sum_py(probs, target, blank):
    # enumerate every frame labelling; sum products of those whose collapse
    # (merge repeats, drop blanks) equals the target
    t_len, vocab = probs.shape
    s_len = target.shape[0]
    path = np.zeros(t_len, dtype=np.int64)
    total = 0.0
    n_paths = vocab ** t_len
    for _ in range(n_paths):
        p = 1.0
        pos = 0
        prev = -1
        ok = True
        for t in range(t_len):
            tok = path[t]
            p *= probs[t, tok]
            if tok != prev and tok != blank:
                if pos >= s_len or target[pos] != tok:
                    ok = False
                    break
                pos += 1
            prev = tok
        if ok and pos == s_len:
            total += p
        for t in range(t_len - 1, -1, -1):
            path[t] += 1
            if path[t] < vocab:
                break
            path[t] = 0
    return total


def _ctc_path_sum_numpy(probs, target, blank):
    # same enumeration, vectorized over chunks of base-V path indices
    t_len, vocab = probs.shape
    s_len = target.shape[0]
    if s_len > t_len:
        return 0.0
    n_paths = vocab ** t_len
    tpos = np.arange(t_len)
    place = vocab ** (t_len - 1 - tpos)
    total = 0.0
    for start in range(0, n_paths, _CHUNK):
        idx = np.arange(start, min(n_paths, start + _CHUNK), dtype=np.int64)
        paths = (idx[:, None] // place) % vocab
        path_probs = probs[tpos, paths].prod(axis=1)
        new_seg = np.ones(paths.shape, dtype=bool)
        new_seg[:, 1:] = paths[:, 1:] != paths[:, :-1]
        emitted = new_seg & (paths != blank)
        match = emitted.sum(axis=1) == s_len
        if s_len > 0:
            compact = np.full(paths.shape, -1, dtype=np.int64)
            rows, cols = np.nonzero(emitted)
            compact[rows, np.cumsum(emitted, axis=1)[rows, cols] - 1] = paths[
                rows, cols
            ]
            match &= (compact[:, :s_len] == target).all(axis=1)
        total += path_probs[match].sum()
    return total


if HAVE_NUMBA:
    _edit_distance_numba = njit(cache=True)(_edit_distance_py)
    _ctc_path_sum_numba = njit(cache=True)(_ctc_path_sum_py)
    _edit_distance_impl = _edit_distance_numba
    _ctc_path_sum_impl = _ctc_path_sum_numba
else:
    _edit_distance_numba = None
    _ctc_path_sum_numba = None
    _edit_distance_impl = _edit_distance_numpy
    _ctc_path_sum_impl = _ctc_path_sum_numpy


def edit_distance(a, b):
    """Levenshtein distance between two integer id sequences (unit costs)."""
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    return int(_edit_distance_impl(a, b))


def ctc_path_sum(probs, target, blank=0):
    """Total probability over all alignments collapsing to `target`."""
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    target = np.ascontiguousarray(target, dtype=np.int64)
    return float(_ctc_path_sum_impl(probs, target, blank))
