"""Compiled inner loops for graph construction, greedy search and shuffling.

Vectors are float32 rows; metric code 0 is squared L2, 1 is negated inner
product.  Adjacency is a dense ``(n, cap)`` int32 matrix with a per-row
degree vector.
"""

import numpy as np
from numba import njit

L2 = 0
IP = 1


@njit(cache=True, inline="always")
def _dist(data, i, q, metric):
    s = 0.0
    if metric == L2:
        for j in range(q.shape[0]):
            t = data[i, j] - q[j]
            s += t * t
    else:
        for j in range(q.shape[0]):
            s -= data[i, j] * q[j]
    return s


@njit(cache=True)
def _insert_sorted(ids, ds, vis, size, cap, node, d):
    """Insert (d, node) into the first ``size`` slots ordered by (d, id).

    Returns the new size, or -1 when the entry falls past a full list.
    """
    if size == cap:
        last_d = ds[size - 1]
        if d > last_d or (d == last_d and node > ids[size - 1]):
            return -1
    p = size if size < cap else cap - 1
    while p > 0 and (ds[p - 1] > d or (ds[p - 1] == d and ids[p - 1] > node)):
        if p < cap:
            ids[p] = ids[p - 1]
            ds[p] = ds[p - 1]
            vis[p] = vis[p - 1]
        p -= 1
    ids[p] = node
    ds[p] = d
    vis[p] = False
    return size + 1 if size < cap else size


@njit(cache=True)
def greedy_search(adj, deg, data, q, entry, list_size, metric, stamp, gen):
    """Best-first search from ``entry`` keeping ``list_size`` candidates.

    ``stamp`` is a caller-owned int32 array of length n; entries equal to
    ``gen`` mark vertices already seen in this search.
    Returns (candidate ids, candidate distances, expanded ids, expanded distances).
    """
    cid = np.empty(list_size, np.int32)
    cd = np.empty(list_size, np.float64)
    cvis = np.zeros(list_size, np.bool_)
    vcap = 4 * list_size + 16
    vid = np.empty(vcap, np.int32)
    vd = np.empty(vcap, np.float64)
    nv = 0

    stamp[entry] = gen
    cid[0] = entry
    cd[0] = _dist(data, entry, q, metric)
    cvis[0] = False
    size = 1
    k = 0
    while True:
        while k < size and cvis[k]:
            k += 1
        if k >= size:
            break
        node = cid[k]
        cvis[k] = True
        if nv == vcap:
            vcap *= 2
            vid2 = np.empty(vcap, np.int32)
            vd2 = np.empty(vcap, np.float64)
            vid2[:nv] = vid[:nv]
            vd2[:nv] = vd[:nv]
            vid = vid2
            vd = vd2
        vid[nv] = node
        vd[nv] = cd[k]
        nv += 1
        low = size
        for t in range(deg[node]):
            nb = adj[node, t]
            if stamp[nb] == gen:
                continue
            stamp[nb] = gen
            d = _dist(data, nb, q, metric)
            new_size = _insert_sorted(cid, cd, cvis, size, list_size, nb, d)
            if new_size < 0:
                continue
            size = new_size
            # locate where it landed to rewind the unvisited cursor
            p = 0
            while cid[p] != nb:
                p += 1
            if p < low:
                low = p
        if low < k:
            k = low
    return cid[:size].copy(), cd[:size].copy(), vid[:nv].copy(), vd[:nv].copy()


@njit(cache=True)
def robust_prune(p, cand, cand_d, data, alpha, max_degree, metric, out):
    """Alpha-pruning over candidates pre-sorted by distance to ``p``.

    Writes kept ids into ``out`` and returns how many were kept.
    """
    m = cand.shape[0]
    alive = np.ones(m, np.bool_)
    no_prune = np.isinf(alpha)
    cnt = 0
    for i in range(m):
        if not alive[i]:
            continue
        c = cand[i]
        if c == p:
            continue
        out[cnt] = c
        cnt += 1
        if cnt == max_degree:
            break
        if no_prune:
            continue
        for j in range(i + 1, m):
            if not alive[j]:
                continue
            dcd = _dist(data, cand[j], data[c], metric)
            if metric == L2:
                if alpha * dcd <= cand_d[j]:
                    alive[j] = False
            elif dcd <= cand_d[j]:
                alive[j] = False
    return cnt


@njit(cache=True)
def _sorted_pool(ids, ds):
    # order by (distance, id)
    o1 = np.argsort(ids, kind="mergesort")
    ids = ids[o1]
    ds = ds[o1]
    o2 = np.argsort(ds, kind="mergesort")
    return ids[o2], ds[o2]


@njit(cache=True)
def _prune_into(p, pool, pool_d, adj, deg, data, alpha, max_degree, metric, out):
    pool, pool_d = _sorted_pool(pool, pool_d)
    cnt = robust_prune(p, pool, pool_d, data, alpha, max_degree, metric, out)
    adj[p, :cnt] = out[:cnt]
    deg[p] = cnt


@njit(cache=True)
def vamana_pass(adj, deg, data, entry, order, list_size, max_degree, alpha, metric):
    n = data.shape[0]
    stamp = np.zeros(n, np.int32)
    mark = np.zeros(n, np.int32)
    out = np.empty(max_degree, np.int32)
    gen = 0
    for p in order:
        gen += 1
        _, _, vid, vd = greedy_search(adj, deg, data, data[p], entry, list_size, metric, stamp, gen)
        m = vid.shape[0] + deg[p]
        pool = np.empty(m, np.int32)
        pool_d = np.empty(m, np.float64)
        cnt = 0
        for i in range(vid.shape[0]):
            v = vid[i]
            if v != p and mark[v] != gen:
                mark[v] = gen
                pool[cnt] = v
                pool_d[cnt] = vd[i]
                cnt += 1
        for t in range(deg[p]):
            v = adj[p, t]
            if v != p and mark[v] != gen:
                mark[v] = gen
                pool[cnt] = v
                pool_d[cnt] = _dist(data, v, data[p], metric)
                cnt += 1
        _prune_into(p, pool[:cnt], pool_d[:cnt], adj, deg, data, alpha, max_degree, metric, out)

        for t in range(deg[p]):
            j = adj[p, t]
            present = False
            for s in range(deg[j]):
                if adj[j, s] == p:
                    present = True
                    break
            if present:
                continue
            if deg[j] < max_degree:
                adj[j, deg[j]] = p
                deg[j] += 1
                continue
            rpool = np.empty(deg[j] + 1, np.int32)
            rpool_d = np.empty(deg[j] + 1, np.float64)
            for s in range(deg[j]):
                rpool[s] = adj[j, s]
                rpool_d[s] = _dist(data, adj[j, s], data[j], metric)
            rpool[deg[j]] = p
            rpool_d[deg[j]] = _dist(data, p, data[j], metric)
            out2 = np.empty(max_degree, np.int32)
            _prune_into(j, rpool, rpool_d, adj, deg, data, alpha, max_degree, metric, out2)


# ---------------------------------------------------------------------------
# block layout kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def overlap_counts(adj, deg, block_of):
    """Per vertex: how many of its out-neighbours share its block."""
    n = block_of.shape[0]
    c = np.zeros(n, np.int64)
    for u in range(n):
        b = block_of[u]
        k = 0
        for t in range(deg[u]):
            w = adj[u, t]
            if w != u and block_of[w] == b:
                k += 1
        c[u] = k
    return c


@njit(cache=True)
def bnp(adj, deg, n, eps, blocks, fill):
    assigned = np.zeros(n, np.bool_)
    cur = 0
    for u in range(n):
        if assigned[u]:
            continue
        if fill[cur] == eps:
            cur += 1
        blocks[cur, fill[cur]] = u
        fill[cur] += 1
        assigned[u] = True
        for t in range(deg[u]):
            v = adj[u, t]
            if assigned[v]:
                continue
            if fill[cur] == eps:
                cur += 1
            blocks[cur, fill[cur]] = v
            fill[cur] += 1
            assigned[v] = True


@njit(cache=True)
def bnf_iteration(adj, deg, prev_block_of, order, eps, blocks, fill):
    """One BNF sweep: reassign every vertex (visited in ``order``) given the previous vertex->block map."""
    n = prev_block_of.shape[0]
    rho = fill.shape[0]
    fill[:] = 0
    blocks[:, :] = -1
    cnt = np.zeros(rho, np.int64)
    touched = np.empty(adj.shape[1], np.int64)
    cursor = 0
    empty = 0
    for i_u in range(n):
        u = order[i_u]
        k = 0
        for t in range(deg[u]):
            b = prev_block_of[adj[u, t]]
            if cnt[b] == 0:
                touched[k] = b
                k += 1
            cnt[b] += 1
        best = -1
        for i in range(k):
            b = touched[i]
            if fill[b] >= eps:
                continue
            if best == -1 or cnt[b] > cnt[best] or (cnt[b] == cnt[best] and b < best):
                best = b
        for i in range(k):
            cnt[touched[i]] = 0
        if best == -1:
            # prefer a still-empty block; fall back to the lowest non-full one
            while empty < rho and fill[empty] > 0:
                empty += 1
            if empty < rho:
                best = empty
            else:
                while fill[cursor] >= eps:
                    cursor += 1
                best = cursor
        blocks[best, fill[best]] = u
        fill[best] += 1


@njit(cache=True)
def _argmin_block(blocks, fill, c, b):
    best = -1
    for s in range(fill[b]):
        w = blocks[b, s]
        if best == -1 or c[w] < c[best] or (c[w] == c[best] and w < best):
            best = w
    return best


@njit(cache=True)
def _count_in_block(ids, lo, hi, block_of, b, exclude):
    k = 0
    for i in range(lo, hi):
        w = ids[i]
        if w != exclude and block_of[w] == b:
            k += 1
    return k


@njit(cache=True)
def _refresh_counts(adj, deg, block_of, blocks, fill, c, b):
    for s in range(fill[b]):
        u = blocks[b, s]
        k = 0
        for t in range(deg[u]):
            w = adj[u, t]
            if w != u and block_of[w] == b:
                k += 1
        c[u] = k


@njit(cache=True)
def swap_gain(adj, deg, in_ptr, in_ids, block_of, fill, c, x, y):
    """Change in (sum of vertex OR over both blocks), as an exact fraction.

    Returns (numerator, denominator) with a positive denominator.
    """
    a = block_of[x]
    e = block_of[y]
    fa = fill[a]
    fe = fill[e]
    # block a loses x, gains y
    sa_loss = c[x] + _count_in_block(in_ids, in_ptr[x], in_ptr[x + 1], block_of, a, x)
    sa_gain = _count_in_block(adj[y], 0, deg[y], block_of, a, x) + _count_in_block(
        in_ids, in_ptr[y], in_ptr[y + 1], block_of, a, x
    )
    se_loss = c[y] + _count_in_block(in_ids, in_ptr[y], in_ptr[y + 1], block_of, e, y)
    se_gain = _count_in_block(adj[x], 0, deg[x], block_of, e, y) + _count_in_block(
        in_ids, in_ptr[x], in_ptr[x + 1], block_of, e, y
    )
    da = sa_gain - sa_loss
    de = se_gain - se_loss
    if fa > 1 and fe > 1:
        return da * (fe - 1) + de * (fa - 1), (fa - 1) * (fe - 1)
    if fa > 1:
        return da, fa - 1
    if fe > 1:
        return de, fe - 1
    return 0, 1


@njit(cache=True)
def _do_swap(adj, deg, block_of, slot_of, blocks, fill, c, x, y):
    a = block_of[x]
    e = block_of[y]
    sx = slot_of[x]
    sy = slot_of[y]
    blocks[a, sx] = y
    blocks[e, sy] = x
    block_of[x] = e
    block_of[y] = a
    slot_of[x] = sy
    slot_of[y] = sx
    _refresh_counts(adj, deg, block_of, blocks, fill, c, a)
    _refresh_counts(adj, deg, block_of, blocks, fill, c, e)


@njit(cache=True)
def try_swap_pair(adj, deg, in_ptr, in_ids, block_of, slot_of, blocks, fill, c, a_vertex, e_vertex):
    """BNS step for one neighbour pair; returns True when a swap happened."""
    ba = block_of[a_vertex]
    be = block_of[e_vertex]
    if ba == be:
        return False
    x = _argmin_block(blocks, fill, c, ba)
    y = _argmin_block(blocks, fill, c, be)
    num, _ = swap_gain(adj, deg, in_ptr, in_ids, block_of, fill, c, x, y)
    if num > 0:
        _do_swap(adj, deg, block_of, slot_of, blocks, fill, c, x, y)
        return True
    return False


@njit(cache=True)
def bns_iteration(adj, deg, in_ptr, in_ids, block_of, slot_of, blocks, fill, c):
    n = block_of.shape[0]
    swaps = 0
    for u in range(n):
        d = deg[u]
        for i in range(d):
            a = adj[u, i]
            for j in range(i + 1, d):
                e = adj[u, j]
                if try_swap_pair(adj, deg, in_ptr, in_ids, block_of, slot_of, blocks, fill, c, a, e):
                    swaps += 1
    return swaps
