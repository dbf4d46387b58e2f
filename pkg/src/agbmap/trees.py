"""Array-based CART regression trees with numba kernels.

One builder serves both the bagged forest (bootstrap rows, per-split feature
subsampling, unlimited depth) and the boosted model (row subsampling without
replacement, depth limit, all features). Trees are stored as flat node
arrays so fitting and prediction stay allocation-light and parallelize over
trees/rows with deterministic per-tree seeds.
"""

from __future__ import annotations

import numba
import numpy as np

LEAF = -1


@numba.njit(cache=True, inline="always")
def _next_u64(state):
    # xorshift64*
    x = state[0]
    x ^= x >> np.uint64(12)
    x ^= (x << np.uint64(25)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x ^= x >> np.uint64(27)
    state[0] = x
    return (x * np.uint64(0x2545F4914F6CDD1D)) & np.uint64(0xFFFFFFFFFFFFFFFF)


@numba.njit(cache=True, inline="always")
def _rand_below(state, n):
    return np.int64(_next_u64(state) % np.uint64(n))


@numba.njit(cache=True)
def _build_tree(X, y, idx, min_leaf, mtry, max_depth, seed,
                feature, threshold, left, right, value):
    """Grow one SSE-minimizing tree on rows ``idx``; returns the node count.

    Split ties resolve to the lowest feature index, then lowest threshold,
    because candidate features are scanned in ascending order and only strict
    gain improvements replace the incumbent.
    """
    n, p = X.shape
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed if seed != 0 else 0x9E3779B97F4A7C15)

    m_total = idx.size
    perm = np.arange(p)
    vals = np.empty(m_total, dtype=np.float64)
    ys = np.empty(m_total, dtype=np.float64)
    buf = np.empty(m_total, dtype=np.int64)

    max_nodes = feature.size
    stack_node = np.empty(max_nodes, dtype=np.int64)
    stack_start = np.empty(max_nodes, dtype=np.int64)
    stack_end = np.empty(max_nodes, dtype=np.int64)
    stack_depth = np.empty(max_nodes, dtype=np.int64)

    n_nodes = 1
    sp = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = m_total
    stack_depth[0] = 0
    sp = 1

    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        s = stack_start[sp]
        e = stack_end[sp]
        depth = stack_depth[sp]
        m = e - s

        total = 0.0
        for i in range(s, e):
            total += y[idx[i]]
        mean = total / m
        value[node] = mean
        feature[node] = LEAF

        if m < 2 * min_leaf:
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue
        const_y = True
        y0 = y[idx[s]]
        for i in range(s + 1, e):
            if y[idx[i]] != y0:
                const_y = False
                break
        if const_y:
            continue

        # sample mtry features without replacement, then scan ascending
        k_feats = mtry if mtry < p else p
        for j in range(k_feats):
            r = j + _rand_below(state, p - j)
            tmp = perm[j]
            perm[j] = perm[r]
            perm[r] = tmp
        chosen = np.sort(perm[:k_feats])

        best_gain = 0.0
        best_feat = -1
        best_thr = 0.0
        base = total * total / m
        for jf in range(k_feats):
            f = chosen[jf]
            for i in range(m):
                vals[i] = X[idx[s + i], f]
            order = np.argsort(vals[:m])
            acc = 0.0
            for i in range(m):
                ys[i] = y[idx[s + order[i]]]
            # reorder vals too
            sorted_vals = np.empty(m, dtype=np.float64)
            for i in range(m):
                sorted_vals[i] = vals[order[i]]
            for k in range(1, m):
                acc += ys[k - 1]
                if k < min_leaf or m - k < min_leaf:
                    continue
                if sorted_vals[k - 1] >= sorted_vals[k]:
                    continue
                right_sum = total - acc
                gain = acc * acc / k + right_sum * right_sum / (m - k) - base
                if gain > best_gain:
                    best_gain = gain
                    best_feat = f
                    best_thr = (sorted_vals[k - 1] + sorted_vals[k]) / 2.0

        if best_feat < 0:
            continue

        # stable partition of idx[s:e] around the split
        n_left = 0
        for i in range(s, e):
            if X[idx[i], best_feat] <= best_thr:
                buf[n_left] = idx[i]
                n_left += 1
        n_right = 0
        for i in range(s, e):
            if X[idx[i], best_feat] > best_thr:
                buf[n_left + n_right] = idx[i]
                n_right += 1
        for i in range(m):
            idx[s + i] = buf[i]

        left_id = n_nodes
        right_id = n_nodes + 1
        n_nodes += 2
        feature[node] = best_feat
        threshold[node] = best_thr
        left[node] = left_id
        right[node] = right_id

        stack_node[sp] = right_id
        stack_start[sp] = s + n_left
        stack_end[sp] = e
        stack_depth[sp] = depth + 1
        sp += 1
        stack_node[sp] = left_id
        stack_start[sp] = s
        stack_end[sp] = s + n_left
        stack_depth[sp] = depth + 1
        sp += 1

    return n_nodes


@numba.njit(cache=True, inline="always")
def _predict_one(feature, threshold, left, right, value, x):
    node = 0
    while feature[node] != LEAF:
        if x[feature[node]] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return value[node]


@numba.njit(cache=True, parallel=True)
def forest_fit(X, y, n_trees, mtry, min_leaf, seeds,
               features, thresholds, lefts, rights, values):
    """Fit ``n_trees`` bootstrap trees in parallel; outputs are per-tree rows."""
    n = X.shape[0]
    for t in numba.prange(n_trees):
        state = np.empty(1, dtype=np.uint64)
        state[0] = seeds[t]
        idx = np.empty(n, dtype=np.int64)
        for i in range(n):
            idx[i] = _rand_below(state, n)
        tree_seed = _next_u64(state)
        _build_tree(X, y, idx, min_leaf, mtry, -1, tree_seed,
                    features[t], thresholds[t], lefts[t], rights[t], values[t])


@numba.njit(cache=True, parallel=True)
def forest_predict(features, thresholds, lefts, rights, values, X, out):
    n = X.shape[0]
    n_trees = features.shape[0]
    for i in numba.prange(n):
        acc = 0.0
        for t in range(n_trees):
            acc += _predict_one(features[t], thresholds[t], lefts[t], rights[t], values[t], X[i])
        out[i] = acc / n_trees


@numba.njit(cache=True)
def _predict_tree_rows(feature, threshold, left, right, value, X, out):
    for i in range(X.shape[0]):
        out[i] = _predict_one(feature, threshold, left, right, value, X[i])


@numba.njit(cache=True)
def boost_fit(X, y, n_rounds, learning_rate, max_depth, subsample, seeds,
              features, thresholds, lefts, rights, values):
    """Sequential squared-error boosting from the mean; returns f0."""
    n, p = X.shape
    f0 = 0.0
    for i in range(n):
        f0 += y[i]
    f0 /= n
    current = np.full(n, f0)
    residual = np.empty(n, dtype=np.float64)
    pred = np.empty(n, dtype=np.float64)
    pool = np.arange(n)
    k_sub = max(1, int(round(subsample * n)))
    for t in range(n_rounds):
        state = np.empty(1, dtype=np.uint64)
        state[0] = seeds[t]
        for i in range(n):
            residual[i] = y[i] - current[i]
        # row subsample without replacement (partial Fisher-Yates)
        for j in range(k_sub):
            r = j + _rand_below(state, n - j)
            tmp = pool[j]
            pool[j] = pool[r]
            pool[r] = tmp
        idx = np.sort(pool[:k_sub])
        tree_seed = _next_u64(state)
        _build_tree(X, residual, idx, 1, p, max_depth, tree_seed,
                    features[t], thresholds[t], lefts[t], rights[t], values[t])
        _predict_tree_rows(features[t], thresholds[t], lefts[t], rights[t], values[t], X, pred)
        for i in range(n):
            current[i] += learning_rate * pred[i]
    return f0


@numba.njit(cache=True, parallel=True)
def boost_predict(f0, learning_rate, features, thresholds, lefts, rights, values, X, out):
    n = X.shape[0]
    n_rounds = features.shape[0]
    for i in numba.prange(n):
        acc = f0
        for t in range(n_rounds):
            acc += learning_rate * _predict_one(
                features[t], thresholds[t], lefts[t], rights[t], values[t], X[i])
        out[i] = acc


def alloc_tree_arrays(n_trees: int, max_nodes: int):
    return (
        np.full((n_trees, max_nodes), LEAF, dtype=np.int64),
        np.zeros((n_trees, max_nodes), dtype=np.float64),
        np.zeros((n_trees, max_nodes), dtype=np.int64),
        np.zeros((n_trees, max_nodes), dtype=np.int64),
        np.zeros((n_trees, max_nodes), dtype=np.float64),
    )
