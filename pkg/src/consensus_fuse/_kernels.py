"""Compiled tree-growing kernel.

One routine grows a whole tree so that no Python runs per node. Three split
objectives share the same search:

* SUPERVISED  information gain of the labeled rows
* SSL         1-D differential-entropy gain over all rows + alpha * labeled gain
* PROBE       weighted mean over experts of per-expert gain; each split node
              also records every expert's mean gain over the candidate set

A row goes left when ``x[feature] <= threshold``. Thresholds are interior
uniform quantiles (linear interpolation) of the node's values.
"""
import numpy as np
from numba import njit

SUPERVISED = 0
SSL = 1
PROBE = 2

RIDGE = 1e-6
EPS_GAIN = 1e-12

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def mix64(z):
    """splitmix64 finaliser."""
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def node_state(seed, tree, heap):
    s = mix64(np.uint64(seed))
    s = mix64(s ^ np.uint64(tree))
    return mix64(s ^ np.uint64(heap))


@njit(cache=True)
def candidate_features(d, n_cand, seed, tree, heap):
    """Sorted sample of ``n_cand`` distinct feature indices (partial Fisher-Yates)."""
    perm = np.arange(d)
    state = node_state(seed, tree, heap)
    for k in range(n_cand):
        state = mix64(state)
        j = k + np.int64(state % np.uint64(d - k))
        tmp = perm[k]
        perm[k] = perm[j]
        perm[j] = tmp
    return np.sort(perm[:n_cand].copy())


@njit(cache=True)
def _h2(n1, n):
    if n <= 0.0:
        return 0.0
    if n1 <= 0.0 or n1 >= n:
        return 0.0
    # sorted terms keep H(n1, n) == H(n - n1, n) bit for bit
    a = min(n1, n - n1) / n
    b = max(n1, n - n1) / n
    return -(a * np.log2(a) + b * np.log2(b))


@njit(cache=True)
def gain(n, n1, nl, nl1):
    if n <= 0.0:
        return 0.0
    nr = n - nl
    g = _h2(n1, n) - nl / n * _h2(nl1, nl) - nr / n * _h2(n1 - nl1, nr)
    return g if g > 0.0 else 0.0


@njit(cache=True)
def _log_var(s1, s2, c):
    if c < 2.0:
        return np.log(RIDGE)
    m = s1 / c
    v = s2 / c - m * m
    if v < 0.0:
        v = 0.0
    return np.log(v + RIDGE)


@njit(cache=True, nogil=True)
def grow_tree(X, index, rows, labels, weights, mode, alpha, max_depth, min_samples,
              n_cand, n_thr, seed, tree):
    m = rows.shape[0]
    d = X.shape[1]
    R = labels.shape[1]
    cap = 2 * m + 1

    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    parent = np.full(cap, -1, np.int64)
    depth = np.zeros(cap, np.int64)
    n_samples = np.zeros(cap, np.int64)
    hist = np.zeros((cap, 2))
    gains = np.full((cap, R), np.nan)

    work = rows.copy()
    tmp = np.empty(m, np.int64)
    vals = np.empty(m)
    thr = np.empty(n_thr)
    lab_tot = np.zeros(R)
    pos_tot = np.zeros(R)
    lab_run = np.zeros(R)
    pos_run = np.zeros(R)
    gsum = np.zeros(R)

    # stack entries: start, end, parent id, side (0 left / 1 right), depth, heap position
    sdepth = 2 * (max_depth + 2)
    stack = np.zeros((sdepth, 6), np.int64)
    sp = 0
    stack[0, 0] = 0
    stack[0, 1] = m
    stack[0, 2] = -1
    stack[0, 3] = 0
    stack[0, 4] = 0
    stack[0, 5] = 1
    sp = 1
    n_nodes = 0

    while sp > 0:
        sp -= 1
        start = stack[sp, 0]
        end = stack[sp, 1]
        par = stack[sp, 2]
        side = stack[sp, 3]
        dep = stack[sp, 4]
        heap = stack[sp, 5]
        n = end - start

        i = n_nodes
        n_nodes += 1
        parent[i] = par
        depth[i] = dep
        n_samples[i] = n
        if par >= 0:
            if side == 0:
                left[par] = i
            else:
                right[par] = i

        for r in range(R):
            lab_tot[r] = 0.0
            pos_tot[r] = 0.0
        for k in range(start, end):
            row = work[k]
            for r in range(R):
                y = labels[row, r]
                if y >= 0:
                    lab_tot[r] += 1.0
                    if y == 1:
                        pos_tot[r] += 1.0
        h0 = 0.0
        h1 = 0.0
        for r in range(R):
            h1 += pos_tot[r]
            h0 += lab_tot[r] - pos_tot[r]
        if h0 + h1 == 0.0 and par >= 0:
            h0 = hist[par, 0]
            h1 = hist[par, 1]
        hist[i, 0] = h0
        hist[i, 1] = h1

        if dep >= max_depth or n < min_samples or n < 2:
            continue
        if mode != SSL:
            pure = True
            for r in range(R):
                if pos_tot[r] > 0.0 and pos_tot[r] < lab_tot[r]:
                    pure = False
            if pure:
                continue

        feats = candidate_features(d, n_cand, seed, tree, heap)
        best = -np.inf
        best_f = -1
        best_t = 0.0
        for r in range(R):
            gsum[r] = 0.0

        for fi in range(n_cand):
            f = feats[fi]
            for k in range(n):
                vals[k] = X[index[work[start + k]], f]
            order = np.argsort(vals[:n])
            tot1 = 0.0
            tot2 = 0.0
            if mode == SSL:
                for k in range(n):
                    v = vals[k]
                    tot1 += v
                    tot2 += v * v
            for t in range(n_thr):
                p = (t + 1.0) / (n_thr + 1.0) * (n - 1)
                lo = int(np.floor(p))
                hi = min(lo + 1, n - 1)
                fr = p - lo
                thr[t] = vals[order[lo]] * (1.0 - fr) + vals[order[hi]] * fr

            for r in range(R):
                lab_run[r] = 0.0
                pos_run[r] = 0.0
            s1 = 0.0
            s2 = 0.0
            k = 0
            for t in range(n_thr):
                while k < n and vals[order[k]] <= thr[t]:
                    row = work[start + order[k]]
                    for r in range(R):
                        y = labels[row, r]
                        if y >= 0:
                            lab_run[r] += 1.0
                            if y == 1:
                                pos_run[r] += 1.0
                    if mode == SSL:
                        v = vals[order[k]]
                        s1 += v
                        s2 += v * v
                    k += 1
                cl = float(k)
                cr = n - cl
                valid = k > 0 and k < n

                if mode == PROBE:
                    obj = 0.0
                    for r in range(R):
                        g = 0.0
                        if lab_tot[r] >= 2.0:
                            g = gain(lab_tot[r], pos_tot[r], lab_run[r], pos_run[r])
                        gsum[r] += g
                        obj += weights[r] * g
                elif mode == SSL:
                    obj = 0.0
                    if valid:
                        obj = (_log_var(tot1, tot2, float(n))
                               - cl / n * _log_var(s1, s2, cl)
                               - cr / n * _log_var(tot1 - s1, tot2 - s2, cr))
                    if alpha != 0.0:
                        obj += alpha * gain(lab_tot[0], pos_tot[0], lab_run[0], pos_run[0])
                else:
                    obj = gain(lab_tot[0], pos_tot[0], lab_run[0], pos_run[0])

                if valid and obj > best:
                    best = obj
                    best_f = f
                    best_t = thr[t]

        if best_f < 0 or not best > EPS_GAIN:
            continue

        feature[i] = best_f
        threshold[i] = best_t
        if mode == PROBE:
            for r in range(R):
                gains[i, r] = gsum[r] / (n_cand * n_thr)

        # stable partition: left rows first
        nl = 0
        nr = 0
        for k in range(start, end):
            row = work[k]
            if X[index[row], best_f] <= best_t:
                work[start + nl] = row
                nl += 1
            else:
                tmp[nr] = row
                nr += 1
        for k in range(nr):
            work[start + nl + k] = tmp[k]

        # right pushed first so the left subtree is numbered first
        stack[sp, 0] = start + nl
        stack[sp, 1] = end
        stack[sp, 2] = i
        stack[sp, 3] = 1
        stack[sp, 4] = dep + 1
        stack[sp, 5] = 2 * heap + 1
        sp += 1
        stack[sp, 0] = start
        stack[sp, 1] = start + nl
        stack[sp, 2] = i
        stack[sp, 3] = 0
        stack[sp, 4] = dep + 1
        stack[sp, 5] = 2 * heap
        sp += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), parent[:n_nodes].copy(), depth[:n_nodes].copy(),
            n_samples[:n_nodes].copy(), hist[:n_nodes].copy(), gains[:n_nodes].copy())
