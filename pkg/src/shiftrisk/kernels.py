"""Hot numeric kernels: gradient-boosted regression trees and kNN distances.

Two interchangeable implementations live here.  The loop-style versions are
compiled with numba; the vectorised NumPy versions serve as the fallback
selected via ``SHIFTRISK_BACKEND=numpy``.  Both are written so that sums are
accumulated in the same order (running prefix sums, stable sorts, stable
partitions), which makes the two backends produce identical fitted models.

Trees are stored in heap layout: node ``j`` has children ``2j+1``/``2j+2``,
``feat[j] == -1`` marks a leaf whose prediction is ``val[j]``.
"""

import numpy as np

from ._backend import USE_NUMBA, jit

# Fixed minimum leaf size of the booster; not exposed as a tuning knob.
MIN_LEAF = 3


# ---------------------------------------------------------------------------
# Pure-NumPy implementations
# ---------------------------------------------------------------------------

def _np_best_split(X, resid, seg, min_leaf):
    """Best (feature, threshold) for one node; returns (score, f, thr) with f=-1 if none."""
    m = seg.size
    best_score = -np.inf
    best_f = -1
    best_thr = 0.0
    if m < 2 * min_leaf:
        return best_score, best_f, best_thr
    r_seg = resid[seg]
    p = np.arange(min_leaf, m - min_leaf + 1)
    for f in range(X.shape[1]):
        xs = X[seg, f]
        order = np.argsort(xs, kind="mergesort")
        xv = xs[order]
        pr = np.cumsum(r_seg[order])
        total = pr[-1]
        valid = xv[p - 1] < xv[p]
        if not valid.any():
            continue
        suml = pr[p - 1]
        score = suml * suml / p + (total - suml) * (total - suml) / (m - p)
        score = np.where(valid, score, -np.inf)
        i = int(np.argmax(score))
        if score[i] > best_score:
            best_score = float(score[i])
            best_f = f
            best_thr = (xv[p[i] - 1] + xv[p[i]]) / 2.0
    return best_score, best_f, best_thr


def _np_build_tree(X, resid, max_depth, min_leaf, feat, thr, val):
    stack = [(0, np.arange(X.shape[0]), 0)]
    while stack:
        j, seg, depth = stack.pop()
        if depth < max_depth:
            _, f, t = _np_best_split(X, resid, seg, min_leaf)
        else:
            f = -1
        if f < 0:
            # leaf: sequential mean via cumsum to match the loop backend
            val[j] = np.cumsum(resid[seg])[-1] / seg.size
            continue
        feat[j] = f
        thr[j] = t
        mask = X[seg, f] <= t
        stack.append((2 * j + 2, seg[~mask], depth + 1))
        stack.append((2 * j + 1, seg[mask], depth + 1))


def _np_walk_tree(feat, thr, val, X, max_depth):
    n = X.shape[0]
    j = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)
    for _ in range(max_depth):
        f = feat[j]
        active = f >= 0
        if not active.any():
            break
        fa = np.where(active, f, 0)
        left = X[rows, fa] <= thr[j]
        j = np.where(active, np.where(left, 2 * j + 1, 2 * j + 2), j)
    return val[j]


def _np_fit_boost(X, y, rounds, lr, max_depth, min_leaf):
    n = X.shape[0]
    nn = (1 << (max_depth + 1)) - 1
    feat = np.full((rounds, nn), -1, dtype=np.int64)
    thr = np.zeros((rounds, nn))
    val = np.zeros((rounds, nn))
    base = float(np.cumsum(y)[-1] / n)
    pred = np.full(n, base)
    for t in range(rounds):
        resid = y - pred
        _np_build_tree(X, resid, max_depth, min_leaf, feat[t], thr[t], val[t])
        pred = pred + lr * _np_walk_tree(feat[t], thr[t], val[t], X, max_depth)
    return base, feat, thr, val


def _np_predict_boost(base, feat, thr, val, lr, X, max_depth):
    pred = np.full(X.shape[0], base)
    for t in range(feat.shape[0]):
        pred = pred + lr * _np_walk_tree(feat[t], thr[t], val[t], X, max_depth)
    return pred


def _np_sq_dists(Q, F):
    out = np.zeros((Q.shape[0], F.shape[0]))
    for c in range(Q.shape[1]):
        diff = Q[:, c][:, None] - F[:, c][None, :]
        out += diff * diff
    return out


# ---------------------------------------------------------------------------
# Loop implementations (numba targets)
# ---------------------------------------------------------------------------

def _loop_fit_boost(X, y, rounds, lr, max_depth, min_leaf):  # pragma: no cover - numba
    n, d = X.shape
    nn = (1 << (max_depth + 1)) - 1
    feat = np.full((rounds, nn), -1, dtype=np.int64)
    thr = np.zeros((rounds, nn))
    val = np.zeros((rounds, nn))

    s = 0.0
    for i in range(n):
        s += y[i]
    base = s / n

    pred = np.full(n, base)
    resid = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    tmp = np.empty(n, dtype=np.int64)
    stk_node = np.empty(nn + 1, dtype=np.int64)
    stk_lo = np.empty(nn + 1, dtype=np.int64)
    stk_hi = np.empty(nn + 1, dtype=np.int64)
    stk_dep = np.empty(nn + 1, dtype=np.int64)

    for t in range(rounds):
        for i in range(n):
            resid[i] = y[i] - pred[i]
            idx[i] = i
        top = 0
        stk_node[top] = 0
        stk_lo[top] = 0
        stk_hi[top] = n
        stk_dep[top] = 0
        top = 1
        while top > 0:
            top -= 1
            j = stk_node[top]
            lo = stk_lo[top]
            hi = stk_hi[top]
            depth = stk_dep[top]
            m = hi - lo

            best_score = -np.inf
            best_f = -1
            best_thr = 0.0
            if depth < max_depth and m >= 2 * min_leaf:
                xs = np.empty(m)
                rs = np.empty(m)
                for f in range(d):
                    for i in range(m):
                        xs[i] = X[idx[lo + i], f]
                    order = np.argsort(xs, kind="mergesort")
                    acc = 0.0
                    for i in range(m):
                        acc += resid[idx[lo + order[i]]]
                        rs[i] = acc
                    total = rs[m - 1]
                    for p in range(min_leaf, m - min_leaf + 1):
                        if xs[order[p - 1]] < xs[order[p]]:
                            suml = rs[p - 1]
                            sumr = total - suml
                            score = suml * suml / p + sumr * sumr / (m - p)
                            if score > best_score:
                                best_score = score
                                best_f = f
                                best_thr = (xs[order[p - 1]] + xs[order[p]]) / 2.0
            if best_f < 0:
                acc = 0.0
                for i in range(lo, hi):
                    acc += resid[idx[i]]
                val[t, j] = acc / m
                continue
            feat[t, j] = best_f
            thr[t, j] = best_thr
            # stable partition of idx[lo:hi] by the chosen split, via scratch copy
            nl = 0
            for i in range(lo, hi):
                tmp[i - lo] = idx[i]
                if X[idx[i], best_f] <= best_thr:
                    nl += 1
            li = 0
            ri = 0
            for i in range(m):
                row = tmp[i]
                if X[row, best_f] <= best_thr:
                    idx[lo + li] = row
                    li += 1
                else:
                    idx[lo + nl + ri] = row
                    ri += 1
            stk_node[top] = 2 * j + 2
            stk_lo[top] = lo + nl
            stk_hi[top] = hi
            stk_dep[top] = depth + 1
            top += 1
            stk_node[top] = 2 * j + 1
            stk_lo[top] = lo
            stk_hi[top] = lo + nl
            stk_dep[top] = depth + 1
            top += 1
        for i in range(n):
            jj = 0
            while feat[t, jj] >= 0:
                if X[i, feat[t, jj]] <= thr[t, jj]:
                    jj = 2 * jj + 1
                else:
                    jj = 2 * jj + 2
            pred[i] += lr * val[t, jj]
    return base, feat, thr, val


def _loop_predict_boost(base, feat, thr, val, lr, X, max_depth):  # pragma: no cover - numba
    n = X.shape[0]
    rounds = feat.shape[0]
    pred = np.full(n, base)
    for t in range(rounds):
        for i in range(n):
            jj = 0
            while feat[t, jj] >= 0:
                if X[i, feat[t, jj]] <= thr[t, jj]:
                    jj = 2 * jj + 1
                else:
                    jj = 2 * jj + 2
            pred[i] += lr * val[t, jj]
    return pred


def _loop_sq_dists(Q, F):  # pragma: no cover - numba
    nq, d = Q.shape
    nf = F.shape[0]
    out = np.empty((nq, nf))
    for i in range(nq):
        for j in range(nf):
            acc = 0.0
            for c in range(d):
                diff = Q[i, c] - F[j, c]
                acc += diff * diff
            out[i, j] = acc
    return out


if USE_NUMBA:
    fit_boost = jit(_loop_fit_boost)
    predict_boost = jit(_loop_predict_boost)
    sq_dists = jit(_loop_sq_dists)
else:
    fit_boost = _np_fit_boost
    predict_boost = _np_predict_boost
    sq_dists = _np_sq_dists
