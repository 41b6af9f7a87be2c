"""Two-layer graph convolutional encoder with exact hand-written gradients.

The per-view functions (`gcn_forward`, `readout`, `encoder_backward`) are
the reference path. `encode_batch` / `encode_batch_backward` run the same
computation over a padded stack of views with batched matrix products, and
`eval_readouts` is the dropout-free inference path over a block-diagonal
sparse stack; both are verified against the reference path in the tests.

Layer form: H = ReLU(A_norm @ Drop(X) @ W), two layers, no biases.
Readout: sigmoid(column mean + column max) over a view's node embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class EncoderParams:
    W1: np.ndarray
    W2: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.W1.shape[0], self.W1.shape[1], self.W2.shape[1])


@dataclass(frozen=True)
class EncoderGrads:
    W1: np.ndarray
    W2: np.ndarray


@dataclass
class AdamState:
    """First/second moment accumulators plus hyperparameters."""

    m_W1: np.ndarray
    v_W1: np.ndarray
    m_W2: np.ndarray
    v_W2: np.ndarray
    t: int
    lr: float
    beta1: float
    beta2: float
    eps: float

    @classmethod
    def fresh(cls, params: EncoderParams, lr=0.001, beta1=0.9, beta2=0.999,
              eps=1e-8) -> "AdamState":
        return cls(
            m_W1=np.zeros_like(params.W1), v_W1=np.zeros_like(params.W1),
            m_W2=np.zeros_like(params.W2), v_W2=np.zeros_like(params.W2),
            t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


@dataclass
class ForwardCache:
    """Intermediates of one view's forward pass, consumed by the backward."""

    adj: np.ndarray
    dropped_input: np.ndarray
    pre1: np.ndarray
    dropped_hidden: np.ndarray
    pre2: np.ndarray
    node_embeddings: np.ndarray
    input_mask: np.ndarray | None
    hidden_mask: np.ndarray | None
    keep_scale: float


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def xavier_init(dims, seed: int) -> EncoderParams:
    """Uniform Xavier/Glorot initialization, deterministic in the seed."""
    d_in, d_h, d_out = dims
    if min(d_in, d_h, d_out) < 1:
        raise ValueError("all encoder dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (d_in + d_h))
    lim2 = np.sqrt(6.0 / (d_h + d_out))
    return EncoderParams(
        W1=rng.uniform(-lim1, lim1, size=(d_in, d_h)),
        W2=rng.uniform(-lim2, lim2, size=(d_h, d_out)))


def gcn_forward(params: EncoderParams, view, dropout_p=0.0, training=False,
                rng=None):
    """Forward pass over one SubgraphView; returns (H, cache).

    Inverted dropout is applied to both layer inputs only when training.
    """
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError("dropout_p must lie in [0, 1)")
    x = view.features
    adj = view.norm_adj.values
    if x.shape[1] != params.W1.shape[0]:
        raise ValueError("feature width does not match encoder input dim")
    if adj.shape[0] != x.shape[0]:
        raise ValueError("adjacency and feature row counts differ")

    use_drop = training and dropout_p > 0.0
    keep_scale = 1.0 / (1.0 - dropout_p) if use_drop else 1.0
    if use_drop:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        mask1 = rng.random(x.shape) >= dropout_p
        d1 = x * mask1 * keep_scale
    else:
        mask1 = None
        d1 = x
    z1 = adj @ (d1 @ params.W1)
    h1 = np.maximum(z1, 0.0)
    if use_drop:
        mask2 = rng.random(h1.shape) >= dropout_p
        d2 = h1 * mask2 * keep_scale
    else:
        mask2 = None
        d2 = h1
    z2 = adj @ (d2 @ params.W2)
    h_nodes = np.maximum(z2, 0.0)
    cache = ForwardCache(
        adj=adj, dropped_input=d1, pre1=z1, dropped_hidden=d2, pre2=z2,
        node_embeddings=h_nodes, input_mask=mask1, hidden_mask=mask2,
        keep_scale=keep_scale)
    return h_nodes, cache


def readout(h_nodes: np.ndarray) -> np.ndarray:
    """sigmoid(column mean + column max) over the rows of H."""
    if h_nodes.ndim != 2 or h_nodes.shape[0] == 0:
        raise ValueError("readout needs a nonempty 2-D embedding matrix")
    return sigmoid(h_nodes.mean(axis=0) + h_nodes.max(axis=0))


def encoder_backward(cache: ForwardCache, params: EncoderParams,
                     grad_out: np.ndarray) -> EncoderGrads:
    """Gradients of readout(gcn_forward(...)) w.r.t. W1 and W2.

    The max path routes through the first (lowest-index) argmax row of each
    column. ReLU and sigmoid derivatives use the cached pre-activations.
    """
    h = cache.node_embeddings
    n = h.shape[0]
    if grad_out.shape != (h.shape[1],):
        raise ValueError("grad_out does not match the cached embedding width")
    pre = h.mean(axis=0) + h.max(axis=0)
    out = sigmoid(pre)
    s = grad_out * out * (1.0 - out)

    d_h = np.tile(s / n, (n, 1))
    d_h[np.argmax(h, axis=0), np.arange(h.shape[1])] += s

    d_z2 = d_h * (cache.pre2 > 0)
    ad2 = cache.adj @ cache.dropped_hidden
    d_w2 = ad2.T @ d_z2
    d_d2 = (cache.adj @ d_z2) @ params.W2.T
    if cache.hidden_mask is not None:
        d_h1 = d_d2 * cache.hidden_mask * cache.keep_scale
    else:
        d_h1 = d_d2
    d_z1 = d_h1 * (cache.pre1 > 0)
    d_w1 = cache.dropped_input.T @ (cache.adj @ d_z1)
    return EncoderGrads(W1=d_w1, W2=d_w2)


def encode_view(params, view, dropout_p=0.0, training=False, rng=None):
    """Convenience: forward + readout, returning (h, cache)."""
    h_nodes, cache = gcn_forward(params, view, dropout_p, training, rng)
    return readout(h_nodes), cache


def adam_step(params: EncoderParams, grads: EncoderGrads,
              state: AdamState) -> tuple[EncoderParams, AdamState]:
    """One bias-corrected Adam update; functional (inputs untouched)."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2

    def upd(p, g, m, v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        return p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), m, v

    w1, m1, v1 = upd(params.W1, grads.W1, state.m_W1, state.v_W1)
    w2, m2, v2 = upd(params.W2, grads.W2, state.m_W2, state.v_W2)
    new_state = AdamState(m_W1=m1, v_W1=v1, m_W2=m2, v_W2=v2, t=t,
                          lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                          eps=state.eps)
    return EncoderParams(W1=w1, W2=w2), new_state


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: EncoderParams, state: AdamState,
                    config_hash: str) -> None:
    """Write a versioned .npz checkpoint (layout documented in the README)."""
    np.savez(
        path,
        version=np.int64(CHECKPOINT_VERSION),
        W1=params.W1, W2=params.W2,
        m_W1=state.m_W1, v_W1=state.v_W1,
        m_W2=state.m_W2, v_W2=state.v_W2,
        t=np.int64(state.t),
        hyper=np.array([state.lr, state.beta1, state.beta2, state.eps]),
        config_hash=np.array(config_hash))


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        if int(data["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(data['version'])}")
        params = EncoderParams(W1=data["W1"], W2=data["W2"])
        lr, beta1, beta2, eps = data["hyper"]
        state = AdamState(
            m_W1=data["m_W1"], v_W1=data["v_W1"],
            m_W2=data["m_W2"], v_W2=data["v_W2"],
            t=int(data["t"]), lr=float(lr), beta1=float(beta1),
            beta2=float(beta2), eps=float(eps))
        config_hash = str(data["config_hash"])
    return params, state, config_hash


# ---------------------------------------------------------------------------
# batched fast paths

@dataclass
class ViewBatch:
    """A stack of views padded to a common node count.

    ``node_ids[b, :counts[b]]`` are the (sorted) global ids of view b; pad
    slots hold id 0 and are masked out everywhere via ``row_mask``.
    """

    node_ids: np.ndarray
    adj: np.ndarray
    counts: np.ndarray
    row_mask: np.ndarray

    @classmethod
    def from_blocks(cls, verts, offsets, rows, cols, vals, coo_ptr):
        counts = np.diff(offsets)
        n_views = counts.shape[0]
        n_max = int(counts.max())
        node_ids = np.zeros((n_views, n_max), dtype=np.int64)
        within = np.arange(verts.shape[0]) - np.repeat(offsets[:-1], counts)
        block_of_vert = np.repeat(np.arange(n_views), counts)
        node_ids[block_of_vert, within] = verts
        adj = np.zeros((n_views, n_max, n_max))
        block_of_entry = np.repeat(np.arange(n_views), np.diff(coo_ptr))
        adj[block_of_entry, rows, cols] = vals
        row_mask = np.arange(n_max)[None, :] < counts[:, None]
        return cls(node_ids=node_ids, adj=adj, counts=counts, row_mask=row_mask)

    def __len__(self) -> int:
        return self.counts.shape[0]


@dataclass
class BatchCache:
    batch: ViewBatch
    features: np.ndarray
    input_mask: np.ndarray | None
    hidden_mask: np.ndarray | None
    keep_scale: float
    pre1_pos: np.ndarray
    dropped_hidden: np.ndarray
    pre2_pos: np.ndarray
    node_embeddings: np.ndarray
    argmax_rows: np.ndarray
    out: np.ndarray


def encode_batch(params: EncoderParams, batch: ViewBatch, features,
                 dropout_p=0.0, training=False, rng=None):
    """Forward + readout for every view in the batch; returns (H, cache)."""
    n_views, n_max = batch.node_ids.shape
    d_in, d_h, d_out = params.dims
    x = features[batch.node_ids] * batch.row_mask[:, :, None]
    use_drop = training and dropout_p > 0.0
    keep_scale = 1.0 / (1.0 - dropout_p) if use_drop else 1.0
    if use_drop:
        mask1 = rng.random(x.shape) >= dropout_p
        d1 = x * mask1 * keep_scale
    else:
        mask1 = None
        d1 = x
    z1 = batch.adj @ (d1.reshape(-1, d_in) @ params.W1).reshape(n_views, n_max, d_h)
    h1 = np.maximum(z1, 0.0)
    if use_drop:
        mask2 = rng.random(h1.shape) >= dropout_p
        d2 = h1 * mask2 * keep_scale
    else:
        mask2 = None
        d2 = h1
    z2 = batch.adj @ (d2.reshape(-1, d_h) @ params.W2).reshape(n_views, n_max, d_out)
    h_nodes = np.maximum(z2, 0.0)

    mean = h_nodes.sum(axis=1) / batch.counts[:, None]
    masked = np.where(batch.row_mask[:, :, None], h_nodes, -np.inf)
    argmax_rows = np.argmax(masked, axis=1)
    mx = np.take_along_axis(h_nodes, argmax_rows[:, None, :], axis=1)[:, 0, :]
    out = sigmoid(mean + mx)
    cache = BatchCache(
        batch=batch, features=features, input_mask=mask1, hidden_mask=mask2,
        keep_scale=keep_scale, pre1_pos=z1 > 0, dropped_hidden=d2,
        pre2_pos=z2 > 0, node_embeddings=h_nodes, argmax_rows=argmax_rows,
        out=out)
    return out, cache


def encode_batch_backward(cache: BatchCache, params: EncoderParams,
                          grad_out: np.ndarray) -> EncoderGrads:
    """Accumulated W1/W2 gradients for the whole batch."""
    batch = cache.batch
    n_views, n_max = batch.node_ids.shape
    d_in, d_h, d_out = params.dims
    s = grad_out * cache.out * (1.0 - cache.out)

    d_h2 = (s / batch.counts[:, None])[:, None, :] * batch.row_mask[:, :, None]
    np.add.at(
        d_h2,
        (np.arange(n_views)[:, None], cache.argmax_rows,
         np.arange(d_out)[None, :]),
        s)
    d_z2 = d_h2 * cache.pre2_pos
    ad2 = batch.adj @ cache.dropped_hidden
    d_w2 = ad2.reshape(-1, d_h).T @ d_z2.reshape(-1, d_out)
    d_d2 = (batch.adj @ d_z2).reshape(-1, d_out) @ params.W2.T
    d_d2 = d_d2.reshape(n_views, n_max, d_h)
    if cache.hidden_mask is not None:
        d_h1 = d_d2 * cache.hidden_mask * cache.keep_scale
    else:
        d_h1 = d_d2
    d_z1 = d_h1 * cache.pre1_pos
    adz1 = batch.adj @ d_z1
    d1 = cache.features[batch.node_ids] * batch.row_mask[:, :, None]
    if cache.input_mask is not None:
        d1 = d1 * cache.input_mask * cache.keep_scale
    d_w1 = d1.reshape(-1, d_in).T @ adz1.reshape(-1, d_h)
    return EncoderGrads(W1=d_w1, W2=d_w2)


def eval_readouts(params: EncoderParams, features, verts, offsets,
                  rows, cols, vals, coo_ptr, first_layer_product=None):
    """Dropout-free readouts for many views via one block-diagonal stack.

    ``first_layer_product`` may carry a precomputed ``features @ W1`` so the
    dominant dense product is shared across calls within one refresh.
    """
    counts = np.diff(offsets)
    total = int(verts.shape[0])
    grows = rows + np.repeat(offsets[:-1], np.diff(coo_ptr))
    gcols = cols + np.repeat(offsets[:-1], np.diff(coo_ptr))
    adj = sp.csr_matrix((vals, (grows, gcols)), shape=(total, total))

    if first_layer_product is None:
        first_layer_product = features @ params.W1
    z1 = adj @ first_layer_product[verts]
    np.maximum(z1, 0.0, out=z1)
    z2 = adj @ (z1 @ params.W2)
    np.maximum(z2, 0.0, out=z2)

    starts = offsets[:-1]
    mean = np.add.reduceat(z2, starts, axis=0) / counts[:, None]
    mx = np.maximum.reduceat(z2, starts, axis=0)
    return sigmoid(mean + mx)
