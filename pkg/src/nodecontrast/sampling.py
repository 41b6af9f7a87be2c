"""View augmentation, contrast-set construction, and collision filtering.

Each anchor gets two random-walk views (its positive pair), a seed positive
set from its K-hop neighborhood, optional mixup-augmented positives, and a
pair of logistic filter heads that estimate how likely a candidate negative
is to actually belong with the positives. Candidates whose probability
ratio clears the soft margin are transferred out of the negative set.

`train_heads_shared_pool` / `transfer_candidates` are the batched paths the
training loop uses; they are verified against the per-anchor contract ops
in the tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .encoder import sigmoid
from .graphs import Graph, SubgraphView, induced_subgraph

logger = logging.getLogger(__name__)

TAG_SELF = "self-view"
TAG_KHOP = "k-hop"
TAG_MIXUP = "mixup"
TAG_TRANSFERRED = "transferred"

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ContrastSets:
    """Per-anchor positive embeddings (with provenance) and negative ids.

    ``positive_ids`` holds the source node for self/k-hop/transferred
    entries and -1 for synthetic mixup entries.
    """

    anchor: int
    positive_embeddings: np.ndarray
    positive_tags: tuple[str, ...]
    positive_ids: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        if self.positive_embeddings.shape[0] == 0:
            raise ValueError("positives must contain at least the anchor's view")
        if len(self.positive_tags) != self.positive_embeddings.shape[0]:
            raise ValueError("one tag per positive required")
        if np.any(self.negatives == self.anchor):
            raise ValueError("anchor may not appear among negatives")
        sourced = self.positive_ids[self.positive_ids >= 0]
        if np.intersect1d(sourced, self.negatives).size:
            raise ValueError("a node appears as both positive source and negative")


@dataclass(frozen=True)
class FilterHeads:
    """Two logistic heads over embeddings: positive-fit and negative-fit."""

    anchor: int
    w_plus: np.ndarray
    b_plus: float
    w_minus: np.ndarray
    b_minus: float
    trained_steps: int

    def prob_plus(self, x: np.ndarray) -> np.ndarray:
        return sigmoid(np.atleast_2d(x) @ self.w_plus + self.b_plus)

    def prob_minus(self, x: np.ndarray) -> np.ndarray:
        return sigmoid(np.atleast_2d(x) @ self.w_minus + self.b_minus)


def random_walk(graph: Graph, v: int, steps: int, rng) -> np.ndarray:
    """Visited-vertex set of one uniform-neighbor walk from v (sorted)."""
    if not 0 <= v < graph.num_nodes:
        raise ValueError(f"node id {v} out of range")
    if steps < 1:
        raise ValueError("walk length must be >= 1")
    uniforms = rng.random((1, steps))
    verts, _ = _kernels.walk_visit_sets(
        graph.indptr, graph.indices, np.array([v], dtype=np.int64), steps,
        uniforms)
    return verts


def make_views(graph: Graph, v: int, steps: int, rng) -> tuple[SubgraphView, SubgraphView]:
    """Two independent walk-induced views of the same anchor."""
    view_q = induced_subgraph(graph, random_walk(graph, v, steps, rng), v)
    view_k = induced_subgraph(graph, random_walk(graph, v, steps, rng), v)
    return view_q, view_k


def init_contrast_sets(anchor: int, num_nodes: int, khop: np.ndarray,
                       kview_table: np.ndarray) -> ContrastSets:
    """Seed sets: K-hop views are positives, everything else is negative."""
    khop = np.asarray(khop, dtype=np.int64)
    tags = tuple(TAG_SELF if j == anchor else TAG_KHOP for j in khop)
    negatives = np.setdiff1d(np.arange(num_nodes, dtype=np.int64), khop,
                             assume_unique=False)
    return ContrastSets(
        anchor=anchor,
        positive_embeddings=np.array(kview_table[khop]),
        positive_tags=tags,
        positive_ids=khop.copy(),
        negatives=negatives)


def mixup_augment(positives, count: int, beta: float, rng):
    """Append ``count`` convex combinations of uniformly chosen input pairs.

    Mixing coefficients are Beta(beta, beta); pairs are drawn from the input
    list only, so every new vector lies on a segment between two inputs.
    """
    pos = [np.asarray(p, dtype=np.float64) for p in positives]
    if not pos:
        raise ValueError("mixup needs at least one positive")
    if count < 0:
        raise ValueError("mixup count must be >= 0")
    out = list(pos)
    n = len(pos)
    for _ in range(count):
        a = int(rng.integers(n))
        b = int(rng.integers(n))
        lam = float(rng.beta(beta, beta))
        out.append(lam * pos[a] + (1.0 - lam) * pos[b])
    return out


def mixup_sets(sets: ContrastSets, count: int, beta: float, rng) -> ContrastSets:
    """ContrastSets variant of `mixup_augment` (new entries tagged mixup)."""
    if count == 0:
        return sets
    augmented = mixup_augment(list(sets.positive_embeddings), count, beta, rng)
    new = np.asarray(augmented[len(sets.positive_embeddings):])
    return replace(
        sets,
        positive_embeddings=np.concatenate([sets.positive_embeddings, new]),
        positive_tags=sets.positive_tags + (TAG_MIXUP,) * count,
        positive_ids=np.concatenate(
            [sets.positive_ids, np.full(count, -1, dtype=np.int64)]))


def train_filter_heads(anchor: int, positives: np.ndarray,
                       negative_embeddings: np.ndarray, steps: int,
                       lr: float = 0.5, l2: float = 1e-4) -> FilterHeads:
    """Fit the two logistic heads by full-batch gradient descent.

    Zero initialization (step-0 heads output 0.5 everywhere). Inputs are
    centered by the combined sample mean for conditioning; the shift is
    folded back into the bias so the returned heads act on raw embeddings.
    """
    pos = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(negative_embeddings, dtype=np.float64))
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise ValueError("both sample sets must be nonempty")
    x = np.concatenate([pos, neg], axis=0)
    mu = x.mean(axis=0)
    xc = x - mu
    n = x.shape[0]

    def fit(y):
        w = np.zeros(x.shape[1])
        b = 0.0
        for _ in range(steps):
            r = (sigmoid(xc @ w + b) - y) / n
            gw = xc.T @ r + 2.0 * l2 * w
            gb = r.sum()
            w = w - lr * gw
            b = b - lr * gb
        return w, b - w @ mu

    y_plus = np.concatenate([np.ones(pos.shape[0]), np.zeros(neg.shape[0])])
    w_plus, b_plus = fit(y_plus)
    w_minus, b_minus = fit(1.0 - y_plus)
    return FilterHeads(
        anchor=anchor, w_plus=w_plus, b_plus=float(b_plus),
        w_minus=w_minus, b_minus=float(b_minus), trained_steps=steps)


def filter_transfer(heads: FilterHeads, sets: ContrastSets,
                    kview_table: np.ndarray, margin: float,
                    khop: np.ndarray, log_rows=None) -> ContrastSets:
    """Move in-doubt negatives into the positives via the soft-margin test.

    A candidate j (never a K-hop member) transfers when
    prob_plus(h_j) / prob_minus(h_j) > margin, with prob_minus floored at
    1e-12; an exactly-zero prob_minus counts as an infinite ratio.
    """
    if sets.negatives.size == 0:
        return sets
    khop = np.asarray(khop, dtype=np.int64)
    cand = sets.negatives[~np.isin(sets.negatives, khop)]
    if cand.size == 0:
        return sets
    emb = kview_table[cand]
    p_plus = heads.prob_plus(emb).reshape(-1)
    p_minus = heads.prob_minus(emb).reshape(-1)
    zero_minus = p_minus == 0.0
    if np.any(zero_minus):
        logger.warning("p_minus=0 for %d candidates of anchor %d; transferring",
                       int(zero_minus.sum()), sets.anchor)
    ratio = p_plus / np.maximum(p_minus, PROB_FLOOR)
    ratio[zero_minus] = np.inf
    move = ratio > margin
    if log_rows is not None:
        for j, pp, pm, rr in zip(cand, p_plus, p_minus, ratio):
            log_rows.append((sets.anchor, int(j), float(pp), float(pm), float(rr)))
    if not np.any(move):
        return sets
    moved = cand[move]
    keep = sets.negatives[~np.isin(sets.negatives, moved)]
    return replace(
        sets,
        positive_embeddings=np.concatenate(
            [sets.positive_embeddings, kview_table[moved]]),
        positive_tags=sets.positive_tags + (TAG_TRANSFERRED,) * moved.size,
        positive_ids=np.concatenate([sets.positive_ids, moved]),
        negatives=keep)


# ---------------------------------------------------------------------------
# batched fast paths (shared negative pool across anchors)

def train_heads_shared_pool(pos_list, pool, excluded_idx, steps: int,
                            lr: float = 0.5, l2: float = 1e-4,
                            chunk: int = 256):
    """Train all anchors' plus heads at once against one shared pool.

    ``pos_list[a]`` holds anchor a's positive embeddings; ``excluded_idx[a]``
    are pool rows (khop members of a) masked out of a's negatives. With zero
    init and complementary labels the minus head is the exact mirror of the
    plus head, so only the plus heads are fit. Returns (W_plus, b_plus) with
    the centering shift already folded into the bias.
    """
    n_anchors = len(pos_list)
    dim = pool.shape[1]
    pool_size = pool.shape[0]
    pool_sum = pool.sum(axis=0)
    w_out = np.zeros((n_anchors, dim))
    b_out = np.zeros(n_anchors)

    order = np.argsort([p.shape[0] for p in pos_list], kind="stable")
    for start in range(0, n_anchors, chunk):
        sel = order[start:start + chunk]
        a = sel.shape[0]
        p_max = max(pos_list[i].shape[0] for i in sel)
        pos = np.zeros((a, p_max, dim))
        pmask = np.zeros((a, p_max))
        negmask = np.ones((pool_size, a))
        for row, i in enumerate(sel):
            k = pos_list[i].shape[0]
            pos[row, :k] = pos_list[i]
            pmask[row, :k] = 1.0
            negmask[excluded_idx[i], row] = 0.0
        n_samples = pmask.sum(axis=1) + negmask.sum(axis=0)
        excl_sum = np.zeros((a, dim))
        for row, i in enumerate(sel):
            if excluded_idx[i].size:
                excl_sum[row] = pool[excluded_idx[i]].sum(axis=0)
        mu = (pos.sum(axis=1) + pool_sum[None, :] - excl_sum) / n_samples[:, None]

        w = np.zeros((a, dim))
        b = np.zeros(a)
        for _ in range(steps):
            shift = b - np.einsum("ad,ad->a", mu, w)
            z_pos = np.einsum("apd,ad->ap", pos, w) + shift[:, None]
            r_pos = (sigmoid(z_pos) - 1.0) * pmask / n_samples[:, None]
            z_neg = pool @ w.T + shift[None, :]
            r_neg = sigmoid(z_neg) * negmask / n_samples[None, :]
            gb = r_pos.sum(axis=1) + r_neg.sum(axis=0)
            gx = np.einsum("ap,apd->ad", r_pos, pos) + r_neg.T @ pool
            gw = gx - gb[:, None] * mu + 2.0 * l2 * w
            w = w - lr * gw
            b = b - lr * gb
        w_out[sel] = w
        b_out[sel] = b - np.einsum("ad,ad->a", mu, w)
    return w_out, b_out


def transfer_candidates(w_plus, b_plus, kview_table, margin: float,
                        allowed_mask, chunk: int = 512):
    """Soft-margin test for every (node, anchor) pair, batched.

    ``allowed_mask[a, j]`` flags j as a live negative candidate of anchor a
    (K-hop members and the anchor itself excluded). Minus heads are the
    mirrors of the plus heads. Returns a boolean (A, N) transfer matrix.
    """
    n_anchors = w_plus.shape[0]
    num_nodes = kview_table.shape[0]
    out = np.zeros((n_anchors, num_nodes), dtype=bool)
    for start in range(0, n_anchors, chunk):
        end = min(start + chunk, n_anchors)
        z = kview_table @ w_plus[start:end].T + b_plus[None, start:end]
        p_plus = sigmoid(z)
        p_minus = 1.0 - p_plus
        ratio = p_plus / np.maximum(p_minus, PROB_FLOOR)
        ratio[p_minus == 0.0] = np.inf
        out[start:end] = (ratio > margin).T & allowed_mask[start:end]
    return out
