"""Pure numpy implementations of the hot-loop kernels.

Reference semantics for the compiled backend; everything here is plain
numpy so it runs anywhere the package installs.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"

_I64 = np.int64


def walk_visit_sets(indptr, indices, starts, steps, uniforms):
    """Run one uniform-neighbor random walk per start node.

    ``uniforms`` has shape (len(starts), steps); entry t drives transition t
    of the corresponding walk (neighbor index = floor(u * degree)). A node
    with no neighbors keeps the walk in place. Returns the concatenated
    sorted unique visited vertices and an offsets array of length B+1.
    """
    starts = np.asarray(starts, dtype=_I64)
    n_walks = starts.shape[0]
    verts_out = []
    offsets = np.zeros(n_walks + 1, dtype=_I64)
    buf = np.empty(steps + 1, dtype=_I64)
    for w in range(n_walks):
        cur = starts[w]
        buf[0] = cur
        row = uniforms[w]
        for t in range(steps):
            lo, hi = indptr[cur], indptr[cur + 1]
            deg = hi - lo
            if deg > 0:
                cur = indices[lo + int(row[t] * deg)]
            buf[t + 1] = cur
        uniq = np.unique(buf)
        verts_out.append(uniq)
        offsets[w + 1] = offsets[w] + uniq.shape[0]
    return np.concatenate(verts_out), offsets


def bfs_within(indptr, indices, start, radius):
    """Vertices within shortest-path distance ``radius`` of ``start``, sorted."""
    seen = {int(start)}
    frontier = [int(start)]
    for _ in range(radius):
        nxt = []
        for u in frontier:
            for v in indices[indptr[u]:indptr[u + 1]]:
                v = int(v)
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        if not nxt:
            break
        frontier = nxt
    return np.array(sorted(seen), dtype=_I64)


def induced_block_coo(indptr, indices, verts, offsets):
    """Symmetrically normalized adjacency of each induced block, as COO.

    ``verts[offsets[b]:offsets[b+1]]`` is the sorted vertex list of block b.
    Self-loops are added before normalization (degree matrix of A+I). Row and
    column indices are local to each block; ``coo_ptr`` delimits the entries
    of each block, which are emitted in row-major order.
    """
    n_blocks = offsets.shape[0] - 1
    rows_all, cols_all, vals_all = [], [], []
    coo_ptr = np.zeros(n_blocks + 1, dtype=_I64)
    for b in range(n_blocks):
        vb = verts[offsets[b]:offsets[b + 1]]
        n = vb.shape[0]
        # local neighbor pairs: walk each vertex's global adjacency and keep
        # the neighbors that fall inside the block
        ri, ci = [], []
        for i in range(n):
            g = vb[i]
            nbrs = indices[indptr[g]:indptr[g + 1]]
            pos = np.searchsorted(vb, nbrs)
            ok = (pos < n)
            ok[ok] = vb[pos[ok]] == nbrs[ok]
            js = pos[ok]
            ri.append(np.full(js.shape[0] + 1, i, dtype=_I64))
            ci.append(np.sort(np.append(js, i)).astype(_I64))
        ri = np.concatenate(ri)
        ci = np.concatenate(ci)
        deg = np.bincount(ri, minlength=n).astype(np.float64)
        inv_sqrt = 1.0 / np.sqrt(deg)
        vals = inv_sqrt[ri] * inv_sqrt[ci]
        rows_all.append(ri)
        cols_all.append(ci)
        vals_all.append(vals)
        coo_ptr[b + 1] = coo_ptr[b] + ri.shape[0]
    return (
        np.concatenate(rows_all),
        np.concatenate(cols_all),
        np.concatenate(vals_all),
        coo_ptr,
    )


def greedy_map_select(L, m, eps=1e-12):
    """Greedy log-det maximization (incremental Cholesky).

    Deterministic; ties broken by lowest index. Stops early and returns a
    shorter selection if the next pivot is not positive.
    """
    M = L.shape[0]
    m = min(m, M)
    di2 = np.array(np.diag(L), dtype=np.float64, copy=True)
    cis = np.zeros((m, M))
    sel = np.empty(m, dtype=_I64)
    k = 0
    while k < m:
        j = int(np.argmax(di2))
        if not di2[j] > eps:
            break
        sel[k] = j
        eis = (L[j] - cis[:k, j] @ cis[:k]) / np.sqrt(di2[j])
        cis[k] = eis
        di2 -= eis * eis
        di2[j] = -np.inf
        k += 1
    return sel[:k]


def greedy_map_gaussian(sq_dists, inv_two_sigma_sq, m, eps=1e-12):
    """Greedy MAP for a Gaussian kernel given squared distances.

    Kernel rows L[j] = exp(-sq_dists[j] * inv_two_sigma_sq) are materialized
    lazily, one per selection, so only m of the M rows are exponentiated.
    """
    M = sq_dists.shape[0]
    m = min(m, M)
    di2 = np.ones(M)
    cis = np.zeros((m, M))
    sel = np.empty(m, dtype=_I64)
    k = 0
    while k < m:
        j = int(np.argmax(di2))
        if not di2[j] > eps:
            break
        sel[k] = j
        lj = np.exp(-inv_two_sigma_sq * sq_dists[j])
        eis = (lj - cis[:k, j] @ cis[:k]) / np.sqrt(di2[j])
        cis[k] = eis
        di2 -= eis * eis
        di2[j] = -np.inf
        k += 1
    return sel[:k]


def projection_dpp_draw(V, uniforms, tol=1e-12):
    """One draw from the projection DPP spanned by orthonormal columns V.

    Sequential conditional selection: pick an item with probability
    proportional to its squared row norm, eliminate one basis column, project
    the rest onto the complement of the picked item's coordinate and
    re-orthonormalize. Consumes one uniform per selected item.
    """
    V = np.array(V, dtype=np.float64, copy=True)
    k = V.shape[1]
    out = np.empty(k, dtype=_I64)
    for t in range(k):
        p = np.einsum("ij,ij->i", V, V)
        total = p.sum()
        if not total > tol:
            raise RuntimeError("projection DPP sampler broke down (zero mass)")
        c = np.cumsum(p / total)
        i = int(np.searchsorted(c, uniforms[t]))
        if i >= p.shape[0]:
            i = p.shape[0] - 1
        out[t] = i
        if t == k - 1:
            break
        j = int(np.argmax(np.abs(V[i])))
        if abs(V[i, j]) <= tol:
            raise RuntimeError("projection DPP sampler broke down (zero pivot)")
        V = V - np.outer(V[:, j] / V[i, j], V[i])
        V = np.delete(V, j, axis=1)
        V, _ = np.linalg.qr(V)
    return np.sort(out)


def _kdpp_select_eigvecs(eigvals, esp, m, urow):
    """Backward recursion over the elementary symmetric polynomial table."""
    M = eigvals.shape[0]
    sel = np.empty(m, dtype=_I64)
    r = m
    for n in range(M, 0, -1):
        if r == 0:
            break
        u = urow[M - n]
        if n == r:
            marg = 1.0
        else:
            denom = esp[r, n]
            marg = eigvals[n - 1] * esp[r - 1, n - 1] / denom if denom > 0 else 1.0
        if u < marg:
            r -= 1
            sel[r] = n - 1
    if r != 0:
        raise RuntimeError("k-DPP eigenvector selection failed (rank deficit)")
    return sel


def kdpp_draw_many(eigvals, eigvecs, esp, m, sel_uniforms, proj_uniforms):
    """Draw ``n`` size-m subsets; uniforms are (n, M) and (n, m) arrays."""
    n_draws = sel_uniforms.shape[0]
    out = np.empty((n_draws, m), dtype=_I64)
    for d in range(n_draws):
        chosen = _kdpp_select_eigvecs(eigvals, esp, m, sel_uniforms[d])
        out[d] = projection_dpp_draw(eigvecs[:, chosen], proj_uniforms[d])
    return out


def dpp_draw_many(eigvals, eigvecs, bern_uniforms, proj_uniforms):
    """Unconstrained-size L-ensemble draws.

    Eigenvector i joins the elementary DPP with probability λ_i/(1+λ_i).
    Returns (samples padded with -1, counts).
    """
    n_draws = bern_uniforms.shape[0]
    M = eigvals.shape[0]
    probs = eigvals / (1.0 + eigvals)
    out = np.full((n_draws, M), -1, dtype=_I64)
    counts = np.zeros(n_draws, dtype=_I64)
    for d in range(n_draws):
        chosen = np.nonzero(bern_uniforms[d] < probs)[0]
        k = chosen.shape[0]
        counts[d] = k
        if k:
            out[d, :k] = projection_dpp_draw(eigvecs[:, chosen], proj_uniforms[d, :k])
    return out, counts
