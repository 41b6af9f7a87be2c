"""Determinantal point process machinery over embedding pools.

An L-ensemble is built from a Gaussian kernel on pairwise Euclidean
distances (unit diagonal: every item is its own best match, which encodes a
constant relevance term). Subset law: P(Y = A) = det(L_A) / det(L + I);
inclusion marginals come from B = L (L + I)^{-1} with P(S ⊆ Y) = det(B_S).

`dpp_brute_probabilities` enumerates the exact law for small pools and is
the oracle every sampler is validated against.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels

logger = logging.getLogger(__name__)

EIG_FLOOR = 1e-10
BRUTE_LIMIT = 12


@dataclass(frozen=True)
class KernelMatrix:
    """Symmetric PSD similarity matrix over a candidate pool."""

    size: int
    L: np.ndarray
    item_ids: np.ndarray

    def __post_init__(self):
        if self.L.shape != (self.size, self.size):
            raise ValueError("kernel shape does not match size")
        if self.item_ids.shape != (self.size,):
            raise ValueError("item_ids must map every pool index")


def pairwise_distance(h_a: np.ndarray, h_b: np.ndarray) -> float:
    """Euclidean distance between two embedding vectors."""
    h_a = np.asarray(h_a, dtype=np.float64)
    h_b = np.asarray(h_b, dtype=np.float64)
    if h_a.shape != h_b.shape:
        raise ValueError("vectors must have equal dimensions")
    diff = h_a - h_b
    return float(np.sqrt(diff @ diff))


def squared_distances(pool: np.ndarray) -> np.ndarray:
    """Dense matrix of squared Euclidean distances, clipped at 0."""
    sq = np.einsum("ij,ij->i", pool, pool)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pool @ pool.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def median_bandwidth(d2: np.ndarray) -> float:
    """Median of the nonzero pairwise distances; 1.0 (with a warning) if none."""
    iu = np.triu_indices(d2.shape[0], k=1)
    vals = d2[iu]
    vals = vals[vals > 0.0]
    if vals.size == 0:
        logger.warning("all pairwise distances are zero; falling back to sigma=1")
        return 1.0
    return float(np.sqrt(np.median(vals)))


def build_kernel(pool, bandwidth=None, item_ids=None) -> KernelMatrix:
    """Gaussian kernel L_jl = exp(-d(j,l)^2 / (2 sigma^2)) over a pool.

    ``bandwidth=None`` selects the median heuristic; pass a positive float
    for a fixed sigma. The diagonal is exactly 1.
    """
    pool = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    m = pool.shape[0]
    if m < 1:
        raise ValueError("pool must contain at least one item")
    d2 = squared_distances(pool)
    if bandwidth is None:
        sigma = median_bandwidth(d2)
    else:
        sigma = float(bandwidth)
        if sigma <= 0:
            raise ValueError("bandwidth must be positive")
    lmat = np.exp(-d2 / (2.0 * sigma * sigma))
    np.fill_diagonal(lmat, 1.0)
    if item_ids is None:
        item_ids = np.arange(m, dtype=np.int64)
    return KernelMatrix(size=m, L=lmat, item_ids=np.asarray(item_ids, dtype=np.int64))


@dataclass(frozen=True)
class BruteForceLaw:
    """Exact subset probabilities plus the marginal kernel."""

    subset_probs: dict
    marginal_kernel: np.ndarray

    def conditioned_on_size(self, k: int) -> dict:
        sized = {a: p for a, p in self.subset_probs.items() if len(a) == k}
        total = sum(sized.values())
        return {a: p / total for a, p in sized.items()}

    def inclusion_probability(self, subset) -> float:
        idx = np.fromiter(subset, dtype=np.int64)
        return float(np.linalg.det(self.marginal_kernel[np.ix_(idx, idx)]))


def dpp_brute_probabilities(kernel: KernelMatrix) -> BruteForceLaw:
    """Enumerate P(Y = A) = det(L_A)/det(L + I) for every subset A.

    Also returns B = L (L + I)^{-1}, whose minors give inclusion
    probabilities P(S ⊆ Y) = det(B_S). Refuses pools above 12 items.
    """
    m = kernel.size
    if m > BRUTE_LIMIT:
        raise ValueError(f"brute-force enumeration limited to {BRUTE_LIMIT} items")
    lmat = kernel.L
    denom = np.linalg.det(lmat + np.eye(m))
    probs = {}
    for k in range(m + 1):
        for subset in itertools.combinations(range(m), k):
            if k == 0:
                det = 1.0
            else:
                idx = np.array(subset, dtype=np.int64)
                det = np.linalg.det(lmat[np.ix_(idx, idx)])
            probs[frozenset(subset)] = float(det / denom)
    marginal = lmat @ np.linalg.inv(lmat + np.eye(m))
    return BruteForceLaw(subset_probs=probs, marginal_kernel=marginal)


def elementary_symmetric(eigenvalues, k: int) -> np.ndarray:
    """Values e_0..e_k of the elementary symmetric polynomials."""
    table = _esp_table(np.asarray(eigenvalues, dtype=np.float64), k)
    return table[:, -1].copy()


def _esp_table(eigenvalues: np.ndarray, k: int) -> np.ndarray:
    """DP table E[j, n] = e_j(lambda_1..lambda_n), shape (k+1, M+1)."""
    m = eigenvalues.shape[0]
    if k > m:
        raise ValueError("k cannot exceed the number of eigenvalues")
    table = np.zeros((k + 1, m + 1))
    table[0, :] = 1.0
    for j in range(1, k + 1):
        for n in range(1, m + 1):
            table[j, n] = table[j, n - 1] + eigenvalues[n - 1] * table[j - 1, n - 1]
    return table


def _decompose(kernel: KernelMatrix):
    lmat = kernel.L + EIG_FLOOR * np.eye(kernel.size)
    vals, vecs = np.linalg.eigh(lmat)
    vals = np.maximum(vals, 0.0)
    return vals, vecs


class KdppSampler:
    """Exact fixed-size DPP sampler; eigendecomposes once, draws many."""

    def __init__(self, kernel: KernelMatrix, m: int):
        if m < 1:
            raise ValueError("subset size must be >= 1")
        if m > kernel.size:
            raise ValueError("subset size exceeds pool size")
        vals, vecs = _decompose(kernel)
        rank = int(np.sum(vals > EIG_FLOOR))
        if m > rank:
            raise ValueError(
                f"requested size {m} exceeds numerical kernel rank {rank}; "
                "use greedy_map or a smaller m")
        self.kernel = kernel
        self.m = m
        self.eigvals = vals
        self.eigvecs = vecs
        self.esp = _esp_table(vals, m)

    def draw(self, rng) -> np.ndarray:
        return self.draw_many(1, rng)[0]

    def draw_many(self, n_draws: int, rng) -> np.ndarray:
        size = self.kernel.size
        sel_u = rng.random((n_draws, size))
        proj_u = rng.random((n_draws, self.m))
        return _kernels.kdpp_draw_many(
            self.eigvals, self.eigvecs, self.esp, self.m, sel_u, proj_u)


def sample_kdpp(kernel: KernelMatrix, m: int, rng) -> np.ndarray:
    """One exact k-DPP sample of m distinct pool indices."""
    return KdppSampler(kernel, m).draw(rng)


class DppSampler:
    """Unconstrained-size L-ensemble sampler (for marginal validation)."""

    def __init__(self, kernel: KernelMatrix):
        self.kernel = kernel
        self.eigvals, self.eigvecs = _decompose(kernel)

    def draw_many(self, n_draws: int, rng):
        size = self.kernel.size
        bern_u = rng.random((n_draws, size))
        proj_u = rng.random((n_draws, size))
        samples, counts = _kernels.dpp_draw_many(
            self.eigvals, self.eigvecs, bern_u, proj_u)
        return samples, counts


def sample_dpp(kernel: KernelMatrix, rng) -> np.ndarray:
    """One unconstrained L-ensemble sample (possibly empty)."""
    samples, counts = DppSampler(kernel).draw_many(1, rng)
    return samples[0, :counts[0]]


def greedy_map(kernel: KernelMatrix, m: int) -> np.ndarray:
    """Greedy maximization of log det(L_A); deterministic, lowest-index ties.

    Stops early (with a warning) on numerical breakdown of the incremental
    Cholesky pivot and returns the subset selected so far.
    """
    if m > kernel.size:
        raise ValueError("subset size exceeds pool size")
    sel = _kernels.greedy_map_select(kernel.L, m)
    if sel.shape[0] < m:
        logger.warning(
            "greedy_map stopped early at %d of %d items (non-positive pivot)",
            sel.shape[0], m)
    return sel
