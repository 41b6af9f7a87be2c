"""Training orchestration: epoch loop, probes, exports.

Per epoch: refresh the dropout-free embedding table (fresh walks for every
node); every ``rebuild_interval`` epochs rebuild the per-anchor contrast
sets (K-hop seeds, mixup, filter heads, soft-margin transfer, negative
subsampling by DPP/greedy/uniform); run one minibatch of anchors with live
two-view encodings against table negatives; probe validation accuracy and
early-stop on patience. All randomness flows from one root seed through
named SeedSequence streams, so a (graph, config, seed) triple reproduces
the run exactly.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import _kernels, dpp, objective, sampling
from .encoder import (AdamState, EncoderParams, ViewBatch, adam_step,
                      encode_batch, encode_batch_backward, eval_readouts,
                      xavier_init)
from .graphs import Graph, k_hop_neighbors

logger = logging.getLogger(__name__)

DPP_MODES = ("exact", "greedy", "off")

# seed-stream phase tags
_INIT, _REFRESH, _SETS, _BATCH, _TRAIN_WALK, _DROPOUT, _PROBE, _EVAL, \
    _FINAL_PROBE = range(9)

GRAM_NODE_LIMIT = 8192


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of the training pipeline (defaults are the paper-scale
    profile; `desk_scale` shrinks the run for commodity-CPU budgets)."""

    walk_steps: int = 25
    hop_radius: int = 1
    transfer_margin: float = 0.9
    tau: float = 1.0
    tau_w: float = 1.0
    num_negatives: int = 64
    pool_size: int = 256
    mixup_count: int | None = None
    mixup_beta: float = 1.0
    dropout: float = 0.7
    hidden_dim: int = 512
    embed_dim: int = 512
    learning_rate: float = 0.001
    epochs: int = 2000
    batch_size: int = 256
    patience: int = 20
    rebuild_interval: int = 5
    dpp_mode: str = "greedy"
    filter_on: bool = True
    weights_on: bool = True
    seed: int = 0
    head_pool_size: int = 512
    head_steps: int = 30
    head_lr: float = 0.5
    head_l2: float = 1e-4
    eval_walks: int = 4
    probe_runs: int = 50
    probe_steps: int = 300
    probe_lr: float = 1.0
    probe_l2: float = 1e-4
    positives_in_loss: bool = False

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=300, probe_runs=10)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    def __post_init__(self):
        if self.walk_steps < 1:
            raise ValueError("walk_steps must be >= 1")
        if self.hop_radius < 0:
            raise ValueError("hop_radius must be >= 0")
        if self.transfer_margin <= 0:
            raise ValueError("transfer_margin must be > 0")
        if self.tau <= 0 or self.tau_w <= 0:
            raise ValueError("temperatures must be > 0")
        if self.num_negatives < 1 or self.pool_size < 1:
            raise ValueError("num_negatives and pool_size must be >= 1")
        if self.mixup_count is not None and self.mixup_count < 0:
            raise ValueError("mixup_count must be >= 0")
        if self.mixup_beta <= 0:
            raise ValueError("mixup_beta must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if min(self.hidden_dim, self.embed_dim) < 1:
            raise ValueError("encoder widths must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.rebuild_interval < 1:
            raise ValueError("rebuild_interval must be >= 1")
        if self.dpp_mode not in DPP_MODES:
            raise ValueError(f"dpp_mode must be one of {DPP_MODES}")
        if self.head_pool_size < 1 or self.head_steps < 1:
            raise ValueError("bad filter-head settings")
        if self.eval_walks < 1:
            raise ValueError("eval_walks must be >= 1")
        if self.probe_runs < 1 or self.probe_steps < 1:
            raise ValueError("bad probe settings")

    def validate_for(self, graph: Graph) -> None:
        if self.batch_size > graph.num_nodes:
            raise ValueError(
                f"batch_size {self.batch_size} exceeds node count "
                f"{graph.num_nodes}; shrink it to at most the graph size")
        for name in ("train", "val"):
            if graph.splits[name].size == 0:
                raise ValueError(f"probe-based stopping needs a nonempty {name} split")

    def config_hash(self) -> str:
        parts = []
        for f in fields(self):
            parts.append(f"{f.name}={getattr(self, f.name)!r}")
        return hashlib.sha256(";".join(parts).encode()).hexdigest()[:16]


@dataclass
class EmbeddingTable:
    """Dropout-free readouts of one fresh walk pair per node."""

    h_q: np.ndarray
    h_k: np.ndarray
    epoch: int


@dataclass
class Checkpoint:
    params: EncoderParams
    adam: AdamState
    config_hash: str


@dataclass
class RunReport:
    """Loss/accuracy traces plus the final probe estimate.

    ``losses[t]`` is the mean per-anchor loss of epoch t+1; the metrics TSV
    serialization excludes wall-clock so reruns are byte-identical.
    """

    losses: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)
    test_mean: float = float("nan")
    test_std: float = float("nan")
    wall_clock_sec: float = 0.0
    config_hash: str = ""
    best_epoch: int = 0
    stopped_epoch: int = 0
    transferred_counts: list = field(default_factory=list)
    kernel_backend: str = _kernels.BACKEND


@dataclass
class RebuildResult:
    """Contrast-set rebuild output (kept inspectable for tests/audits)."""

    negatives: list
    transferred: list
    positive_embeddings: list | None = None


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key)))


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(
        entropy=seed, spawn_key=tuple(int(k) for k in key)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# embedding table

def _walk_blocks(graph: Graph, starts: np.ndarray, steps: int, rng):
    uniforms = rng.random((starts.shape[0], steps))
    verts, offsets = _kernels.walk_visit_sets(
        graph.indptr, graph.indices, starts, steps, uniforms)
    rows, cols, vals, coo_ptr = _kernels.induced_block_coo(
        graph.indptr, graph.indices, verts, offsets)
    return verts, offsets, rows, cols, vals, coo_ptr


def refresh_embeddings(params: EncoderParams, graph: Graph,
                       config: TrainConfig, rng, epoch: int = 0) -> EmbeddingTable:
    """Fresh q/k walk views for every node, encoded without dropout."""
    n = graph.num_nodes
    starts = np.concatenate([np.arange(n), np.arange(n)]).astype(np.int64)
    verts, offsets, rows, cols, vals, coo_ptr = _walk_blocks(
        graph, starts, config.walk_steps, rng)
    first = graph.features @ params.W1
    h = eval_readouts(params, graph.features, verts, offsets, rows, cols,
                      vals, coo_ptr, first_layer_product=first)
    return EmbeddingTable(h_q=h[:n], h_k=h[n:], epoch=epoch)


# ---------------------------------------------------------------------------
# contrast-set rebuild

def _squared_distance_block(h_k, gram, sq_norms, pool_ids):
    if gram is not None:
        block = gram[np.ix_(pool_ids, pool_ids)]
        d2 = sq_norms[pool_ids, None] + sq_norms[None, pool_ids] - 2.0 * block
    else:
        rows = h_k[pool_ids]
        sq = np.einsum("ij,ij->i", rows, rows)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (rows @ rows.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def _pool_bandwidth(d2: np.ndarray) -> float:
    iu = np.triu_indices(d2.shape[0], k=1)
    vals = d2[iu]
    vals = vals[vals > 0.0]
    if vals.size == 0:
        return 1.0
    return float(np.sqrt(np.median(vals)))


def rebuild_contrast_sets(graph: Graph, table: EmbeddingTable, khop_list,
                          config: TrainConfig, rng, allowed_static,
                          transfer_log=None,
                          keep_positive_embeddings=False) -> RebuildResult:
    """Algorithmic core of the per-anchor set construction, batched.

    Returns the final (subsampled) negative ids per anchor plus the ids
    transferred from negative to positive by the soft-margin filter.
    """
    n = graph.num_nodes
    allowed = allowed_static.copy()
    transferred = [np.empty(0, dtype=np.int64) for _ in range(n)]
    pos_keep = [None] * n

    if config.filter_on:
        pool_ids = np.sort(rng.choice(n, size=min(config.head_pool_size, n),
                                      replace=False))
        pool = table.h_k[pool_ids]
        pos_list, excluded_idx = [], []
        for a in range(n):
            khop = khop_list[a]
            pos = table.h_k[khop]
            m_mix = khop.shape[0] if config.mixup_count is None else config.mixup_count
            if m_mix:
                mixed = sampling.mixup_augment(list(pos), m_mix,
                                               config.mixup_beta, rng)
                pos = np.asarray(mixed)
            pos_list.append(pos)
            excluded_idx.append(np.flatnonzero(np.isin(pool_ids, khop)))
        w_plus, b_plus = sampling.train_heads_shared_pool(
            pos_list, pool, excluded_idx, config.head_steps,
            lr=config.head_lr, l2=config.head_l2)
        trans_mask = sampling.transfer_candidates(
            w_plus, b_plus, table.h_k, config.transfer_margin, allowed)
        for a in range(n):
            ids = np.flatnonzero(trans_mask[a]).astype(np.int64)
            transferred[a] = ids
            if transfer_log is not None and ids.size:
                z = table.h_k[ids] @ w_plus[a] + b_plus[a]
                p_plus = 1.0 / (1.0 + np.exp(-z))
                p_minus = 1.0 - p_plus
                ratio = p_plus / np.maximum(p_minus, sampling.PROB_FLOOR)
                for j, pp, pm, rr in zip(ids, p_plus, p_minus, ratio):
                    transfer_log.append((a, int(j), float(pp), float(pm), float(rr)))
        allowed &= ~trans_mask
        if keep_positive_embeddings:
            for a in range(n):
                extra = table.h_k[transferred[a]]
                pos_keep[a] = np.concatenate([pos_list[a], extra]) \
                    if extra.size else pos_list[a]
    elif keep_positive_embeddings:
        for a in range(n):
            pos_keep[a] = table.h_k[khop_list[a]]

    gram = None
    sq_norms = None
    if config.dpp_mode in ("greedy", "exact") and n <= GRAM_NODE_LIMIT:
        gram = table.h_k @ table.h_k.T
        sq_norms = np.diag(gram).copy()

    m = config.num_negatives
    negatives = []
    for a in range(n):
        cand = np.flatnonzero(allowed[a]).astype(np.int64)
        if cand.size <= m or config.dpp_mode == "off":
            if cand.size <= m:
                negatives.append(cand)
            else:
                negatives.append(np.sort(rng.choice(cand, size=m, replace=False)))
            continue
        pool_ids = cand if cand.size <= config.pool_size else \
            np.sort(rng.choice(cand, size=config.pool_size, replace=False))
        d2 = _squared_distance_block(table.h_k, gram, sq_norms, pool_ids)
        sigma = _pool_bandwidth(d2)
        if config.dpp_mode == "greedy":
            local = _kernels.greedy_map_gaussian(d2, 1.0 / (2.0 * sigma * sigma), m)
            if local.shape[0] < m:
                rest = np.setdiff1d(np.arange(pool_ids.shape[0]), local)
                extra = rng.choice(rest, size=m - local.shape[0], replace=False)
                local = np.concatenate([local, extra])
        else:
            lmat = np.exp(-d2 / (2.0 * sigma * sigma))
            np.fill_diagonal(lmat, 1.0)
            kernel = dpp.KernelMatrix(size=pool_ids.shape[0], L=lmat,
                                      item_ids=pool_ids)
            try:
                local = dpp.sample_kdpp(kernel, m, rng)
            except ValueError:
                logger.warning("k-DPP rank deficit at anchor %d; greedy fallback", a)
                local = _kernels.greedy_map_select(lmat, m)
        negatives.append(np.sort(pool_ids[local]))

    return RebuildResult(negatives=negatives, transferred=transferred,
                         positive_embeddings=pos_keep if keep_positive_embeddings
                         else None)


# ---------------------------------------------------------------------------
# linear probe

def _standardize(train_rows):
    mu = train_rows.mean(axis=0)
    sd = train_rows.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return mu, sd


def _probe_once(embeddings, labels, splits, rng, steps, lr, l2):
    """Softmax regression by gradient descent; returns (best val, test) acc."""
    n_classes = int(labels.max()) + 1
    tr, va, te = splits["train"], splits["val"], splits["test"]
    mu, sd = _standardize(embeddings[tr])
    x_tr = (embeddings[tr] - mu) / sd
    x_va = (embeddings[va] - mu) / sd
    x_te = (embeddings[te] - mu) / sd if te.size else None
    y = np.zeros((tr.shape[0], n_classes))
    y[np.arange(tr.shape[0]), labels[tr]] = 1.0

    w = 0.01 * rng.standard_normal((embeddings.shape[1], n_classes))
    b = np.zeros(n_classes)

    def accuracy(x, idx):
        pred = np.argmax(x @ w + b, axis=1)
        return float(np.mean(pred == labels[idx]))

    best_val, best = -1.0, (w.copy(), b.copy())
    for step in range(1, steps + 1):
        z = x_tr @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - y) / tr.shape[0]
        w = w - lr * (x_tr.T @ g + 2.0 * l2 * w)
        b = b - lr * g.sum(axis=0)
        if step % 10 == 0 or step == steps:
            acc = accuracy(x_va, va)
            if acc > best_val:
                best_val, best = acc, (w.copy(), b.copy())
    w, b = best
    test_acc = accuracy(x_te, te) if te is not None and te.size else float("nan")
    return best_val, test_acc


def linear_evaluate(embeddings, labels, splits, runs: int, rng,
                    steps: int = 300, lr: float = 1.0, l2: float = 1e-4):
    """Mean and std of test accuracy over ``runs`` probe initializations."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    for name in ("train", "val", "test"):
        if splits[name].size == 0:
            raise ValueError(f"linear evaluation needs a nonempty {name} split")
    accs = []
    for r in range(runs):
        sub = np.random.default_rng(rng.integers(2 ** 63))
        _, test_acc = _probe_once(embeddings, labels, splits, sub, steps, lr, l2)
        accs.append(test_acc)
    accs = np.asarray(accs)
    return float(accs.mean()), float(accs.std())


# ---------------------------------------------------------------------------
# training loop

def _anchor_batches(n: int, batch_size: int, rng):
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


def compute_eval_embeddings(params: EncoderParams, graph: Graph,
                            config: TrainConfig, rng) -> np.ndarray:
    """Per-node query-view readouts averaged over ``eval_walks`` fresh walks."""
    n = graph.num_nodes
    acc = np.zeros((n, params.dims[2]))
    first = graph.features @ params.W1
    for _ in range(config.eval_walks):
        verts, offsets, rows, cols, vals, coo_ptr = _walk_blocks(
            graph, np.arange(n, dtype=np.int64), config.walk_steps, rng)
        acc += eval_readouts(params, graph.features, verts, offsets, rows,
                             cols, vals, coo_ptr, first_layer_product=first)
    return acc / config.eval_walks


def train(graph: Graph, config: TrainConfig, seed: int | None = None,
          transfer_log=None):
    """Run the full training pipeline; returns (Checkpoint, RunReport)."""
    config.validate_for(graph)
    root = config.seed if seed is None else seed
    t_start = time.perf_counter()
    n = graph.num_nodes
    cfg_hash = config.config_hash()

    khop_list = [k_hop_neighbors(graph, v, config.hop_radius) for v in range(n)]
    allowed_static = np.ones((n, n), dtype=bool)
    for a in range(n):
        allowed_static[a, khop_list[a]] = False

    params = xavier_init((graph.num_features, config.hidden_dim,
                          config.embed_dim), _derived_seed(root, _INIT))
    adam = AdamState.fresh(params, lr=config.learning_rate)
    batches = _anchor_batches(n, config.batch_size, _stream(root, _BATCH))

    report = RunReport(config_hash=cfg_hash)
    best_val, best_params, best_adam, best_epoch = -np.inf, params, adam, 0
    evals_since_best = 0
    sets: RebuildResult | None = None

    for epoch in range(1, config.epochs + 1):
        table = refresh_embeddings(params, graph, config,
                                   _stream(root, _REFRESH, epoch), epoch)
        if sets is None or (epoch - 1) % config.rebuild_interval == 0:
            sets = rebuild_contrast_sets(
                graph, table, khop_list, config, _stream(root, _SETS, epoch),
                allowed_static, transfer_log=transfer_log,
                keep_positive_embeddings=config.positives_in_loss)
            report.transferred_counts.append(
                int(sum(t.size for t in sets.transferred)))

        anchors = next(batches)
        params, adam, loss_mean = _train_step(graph, config, params, adam,
                                              table, sets, anchors, root, epoch)
        if not np.isfinite(loss_mean):
            raise RuntimeError(
                f"non-finite loss at epoch {epoch} "
                f"(|W1|={np.abs(params.W1).max():.3g}, "
                f"|W2|={np.abs(params.W2).max():.3g}); aborting")
        report.losses.append(loss_mean)

        val_acc, _ = _probe_once(table.h_q, graph.labels, graph.splits,
                                 _stream(root, _PROBE, epoch),
                                 config.probe_steps, config.probe_lr,
                                 config.probe_l2)
        report.val_trace.append(val_acc)
        if val_acc > best_val:
            best_val = val_acc
            best_params = EncoderParams(W1=params.W1.copy(), W2=params.W2.copy())
            best_adam = replace(adam, m_W1=adam.m_W1.copy(), v_W1=adam.v_W1.copy(),
                                m_W2=adam.m_W2.copy(), v_W2=adam.v_W2.copy())
            best_epoch = epoch
            evals_since_best = 0
        else:
            evals_since_best += 1
        if evals_since_best >= config.patience:
            logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    report.best_epoch = best_epoch
    report.stopped_epoch = len(report.losses)

    final = compute_eval_embeddings(best_params, graph, config,
                                    _stream(root, _EVAL))
    if graph.splits["test"].size:
        report.test_mean, report.test_std = linear_evaluate(
            final, graph.labels, graph.splits, config.probe_runs,
            _stream(root, _FINAL_PROBE), steps=config.probe_steps,
            lr=config.probe_lr, l2=config.probe_l2)
    report.wall_clock_sec = time.perf_counter() - t_start
    checkpoint = Checkpoint(params=best_params, adam=best_adam,
                            config_hash=cfg_hash)
    return checkpoint, report


def _train_step(graph, config, params, adam, table, sets, anchors, root, epoch):
    """One minibatch: live two-view encodings against table negatives."""
    b = anchors.shape[0]
    starts = np.concatenate([anchors, anchors]).astype(np.int64)
    verts, offsets, rows, cols, vals, coo_ptr = _walk_blocks(
        graph, starts, config.walk_steps, _stream(root, _TRAIN_WALK, epoch))
    batch = ViewBatch.from_blocks(verts, offsets, rows, cols, vals, coo_ptr)
    h_all, cache = encode_batch(params, batch, graph.features,
                                dropout_p=config.dropout, training=True,
                                rng=_stream(root, _DROPOUT, epoch))
    h_q, h_k = h_all[:b], h_all[b:]

    m_max = max(1, max(sets.negatives[a].shape[0] for a in anchors))
    negs = np.zeros((b, m_max, config.embed_dim))
    mask = np.zeros((b, m_max))
    for i, a in enumerate(anchors):
        ids = sets.negatives[a]
        if ids.size:
            negs[i, :ids.size] = table.h_k[ids]
            mask[i, :ids.size] = 1.0

    if config.positives_in_loss:
        total = 0.0
        grad_q = np.zeros_like(h_q)
        grad_k = np.zeros_like(h_k)
        for i, a in enumerate(anchors):
            ids = sets.negatives[a]
            neg_emb = table.h_k[ids]
            if config.weights_on and ids.size:
                weights = objective.negative_weights(h_q[i], neg_emb, config.tau_w)
            else:
                weights = np.ones(ids.size)
            extra = sets.positive_embeddings[a]
            loss, gq, gk = objective.contrastive_loss_multi(
                h_q[i], h_k[i], extra, neg_emb, weights, config.tau)
            total += loss
            grad_q[i] = gq
            grad_k[i] = gk
        losses_mean = total / b
    else:
        losses, grad_q, grad_k = objective.batch_loss_dense(
            h_q, h_k, negs, mask, config.tau, config.tau_w,
            use_weights=config.weights_on)
        losses_mean = float(losses.mean())

    grads = encode_batch_backward(cache, params,
                                  np.concatenate([grad_q, grad_k], axis=0))
    new_params, new_adam = adam_step(params, grads, adam)
    return new_params, new_adam, losses_mean


# ---------------------------------------------------------------------------
# reports and exports

def write_metrics(report: RunReport, path) -> None:
    """Line-oriented TSV trace; deterministic bytes for a given run."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tloss\tval_acc\n")
        for i, (loss, acc) in enumerate(zip(report.losses, report.val_trace),
                                        start=1):
            fh.write(f"{i}\t{loss:.12g}\t{acc:.12g}\n")


def write_summary(report: RunReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"config_hash\t{report.config_hash}\n")
        fh.write(f"kernel_backend\t{report.kernel_backend}\n")
        fh.write(f"epochs_run\t{report.stopped_epoch}\n")
        fh.write(f"best_epoch\t{report.best_epoch}\n")
        fh.write(f"test_acc_mean\t{report.test_mean:.6f}\n")
        fh.write(f"test_acc_std\t{report.test_std:.6f}\n")
        fh.write(f"wall_clock_sec\t{report.wall_clock_sec:.3f}\n")
        fh.write(f"transferred_per_rebuild\t"
                 f"{','.join(str(c) for c in report.transferred_counts)}\n")


def export_embeddings(embeddings, labels, path) -> str:
    """TSV export (id, label, embedding) plus a 2-D PCA companion file.

    Values carry 12 significant digits so a re-read reproduces the table to
    1e-9. Returns the companion path.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(embeddings.shape[0]):
            row = "\t".join(f"{x:.12g}" for x in embeddings[i])
            fh.write(f"{i}\t{labels[i]}\t{row}\n")

    centered = embeddings - embeddings.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2] if vt.shape[0] >= 2 else np.vstack([vt, np.zeros_like(vt)])
    # stable sign: make each component's largest-magnitude entry positive
    for r in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[r]))
        if comps[r, j] < 0:
            comps[r] = -comps[r]
    proj = centered @ comps.T
    path = str(path)
    stem, dot, ext = path.rpartition(".")
    pca_path = f"{stem}.pca2.{ext}" if dot else f"{path}.pca2"
    with open(pca_path, "w", encoding="utf-8") as fh:
        for i in range(proj.shape[0]):
            fh.write(f"{i}\t{labels[i]}\t{proj[i, 0]:.12g}\t{proj[i, 1]:.12g}\n")
    return pca_path
