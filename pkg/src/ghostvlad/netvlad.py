"""Trainable VLAD aggregation with k-means init and PCA whitening.

The layer turns an (N, D, h, w) local-descriptor map into one unit
vector per image: each descriptor is L2-normalized, soft-assigned to K
cluster centers by a learned softmax(w_k . x + b_k), residuals against
the centers are accumulated per cluster, each cluster column is
L2-normalized (intra-normalization), and the column-major flattening is
L2-normalized once more.

The assignment uses decoupled (w_k, b_k) parameters. Initializing them
as w_k = 2*alpha*c_k and b_k = -alpha*||c_k||^2 makes the softmax equal
the distance-based assignment exp(-alpha*||x - c_k||^2) normalized over
k (the ||x||^2 term is constant across k and cancels), after which all
three parameter sets train freely by back-propagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, l2_normalize, matmul, no_grad, reshape, softmax_rows, transpose

__all__ = [
    "VladParams",
    "PcaWhitening",
    "kmeans_init",
    "estimate_alpha",
    "init_vlad_params",
    "soft_assign",
    "vlad_aggregate",
    "fit_pca_whitening",
    "apply_descriptor_reduction",
    "descriptor_graph",
    "global_descriptor",
]


@dataclass
class VladParams:
    """K cluster centers plus soft-assignment weights and biases."""

    centers: Tensor  # (K, D)
    w: Tensor  # (K, D)
    b: Tensor  # (K,)

    def __post_init__(self):
        if self.centers.ndim != 2 or self.w.shape != self.centers.shape:
            raise ValueError("centers and w must both be (K, D)")
        if self.b.shape != (self.centers.shape[0],):
            raise ValueError("b must be (K,)")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    def named_parameters(self):
        yield "vlad.centers", self.centers
        yield "vlad.w", self.w
        yield "vlad.b", self.b

    def state_arrays(self) -> dict:
        return {name: tensor.data for name, tensor in self.named_parameters()}

    @classmethod
    def from_state_arrays(cls, arrays: dict, dtype=np.float32) -> "VladParams":
        return cls(
            centers=Tensor(np.asarray(arrays["vlad.centers"], dtype=dtype).copy(), requires_grad=True),
            w=Tensor(np.asarray(arrays["vlad.w"], dtype=dtype).copy(), requires_grad=True),
            b=Tensor(np.asarray(arrays["vlad.b"], dtype=dtype).copy(), requires_grad=True),
        )


def kmeans_init(points: np.ndarray, k: int, seed, max_iters: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding, deterministic per seed.

    ``points`` is (M, D) with M >= k. Empty clusters are reseeded from
    the point farthest from its current center. Returns (k, D) centers.
    """
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    if m < k:
        raise ValueError(f"need at least k={k} points, got {m}")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(m)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = points[rng.integers(m)]
        else:
            centers[i] = points[_weighted_choice(rng, d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))

    for _ in range(max_iters):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        moved = 0.0
        nearest = dists[np.arange(m), labels]
        for i in range(k):
            mask = labels == i
            if mask.any():
                new = points[mask].mean(axis=0)
            else:
                new = points[int(np.argmax(nearest))]
            moved = max(moved, float(np.linalg.norm(new - centers[i])))
            centers[i] = new
        if moved < tol:
            break
    return centers


def _weighted_choice(rng, probabilities: np.ndarray) -> int:
    cum = np.cumsum(probabilities)
    cum[-1] = 1.0
    return int(np.searchsorted(cum, rng.random(), side="right"))


def estimate_alpha(centers: np.ndarray, sample: np.ndarray) -> float:
    """Assignment sharpness from a descriptor sample.

    alpha = ln(100) / mean(m2 - m1) over the sample, where m1 and m2
    are squared distances to the nearest and second-nearest centers:
    at the typical nearest/second-nearest gap the initial assignment
    puts about 100x more weight on the nearest center.
    """
    centers = np.asarray(centers, dtype=np.float64)
    sample = np.asarray(sample, dtype=np.float64)
    if centers.shape[0] < 2:
        return 1.0
    d2 = ((sample[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    d2.sort(axis=1)
    gap = float(np.mean(d2[:, 1] - d2[:, 0]))
    return float(np.log(100.0) / max(gap, 1e-12))


def init_vlad_params(centers: np.ndarray, sample: np.ndarray = None, alpha: float = None, dtype=np.float32) -> VladParams:
    """Build trainable VLAD parameters from cluster centers.

    ``alpha`` defaults to ``estimate_alpha(centers, sample)``; the init
    w_k = 2*alpha*c_k, b_k = -alpha*||c_k||^2 reproduces the distance
    softmax exactly at the start of training.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if alpha is None:
        if sample is None:
            raise ValueError("provide a descriptor sample or an explicit alpha")
        alpha = estimate_alpha(centers, sample)
    w = 2.0 * alpha * centers
    b = -alpha * (centers**2).sum(axis=1)
    return VladParams(
        centers=Tensor(centers.astype(dtype), requires_grad=True),
        w=Tensor(w.astype(dtype), requires_grad=True),
        b=Tensor(b.astype(dtype), requires_grad=True),
    )


def soft_assign(x: Tensor, params: VladParams) -> Tensor:
    """Softmax over clusters of w_k . x + b_k for each row of ``x``.

    ``x`` is (R, D) or a single (D,) descriptor; rows sum to 1.
    """
    single = x.ndim == 1
    if single:
        x = reshape(x, (1, x.shape[0]))
    logits = matmul(x, transpose(params.w)) + params.b
    out = softmax_rows(logits)
    return reshape(out, (out.shape[-1],)) if single else out


def vlad_aggregate(fmap: Tensor, params: VladParams, eps: float = 1e-12) -> Tensor:
    """Aggregate an (N, D, h, w) descriptor map to (N, K*D) unit vectors.

    Steps: per-descriptor L2 normalization, soft assignment, per-cluster
    residual sums V(j,k) = sum_i a_k(x_i) (x_i(j) - c_k(j)), intra
    normalization of each cluster column, column-major flatten, global
    L2 normalization. Differentiable end to end; a 3-D (D, h, w) input
    is treated as a single image and returns (K*D,).
    """
    single = fmap.ndim == 3
    if single:
        fmap = reshape(fmap, (1,) + tuple(fmap.shape))
    if fmap.ndim != 4:
        raise ValueError(f"expected (N, D, h, w) feature map, got {fmap.shape}")
    n, d, h, w = fmap.shape
    if d != params.d:
        raise ValueError(f"feature map has D={d}, params expect D={params.d}")

    x = transpose(reshape(fmap, (n, d, h * w)), (0, 2, 1))  # (N, L, D)
    xhat = l2_normalize(x, axis=2, eps=eps)
    logits = matmul(xhat, transpose(params.w)) + params.b
    assign = softmax_rows(logits)  # (N, L, K)

    v = matmul(transpose(xhat, (0, 2, 1)), assign)  # (N, D, K)
    colsum = reshape(assign.sum(axis=1), (n, 1, params.k))
    v = v - transpose(params.centers) * colsum
    v = l2_normalize(v, axis=1, eps=eps)  # intra-normalize each column
    flat = reshape(transpose(v, (0, 2, 1)), (n, params.k * d))  # column-major
    out = l2_normalize(flat, axis=1, eps=eps)
    return reshape(out, (params.k * d,)) if single else out


@dataclass
class PcaWhitening:
    """Mean, whitened projection rows, and the retained eigenvalues."""

    mean: np.ndarray  # (F,)
    projection: np.ndarray  # (out_dim, F): eigenvectors / sqrt(eigenvalue + eps)
    eigenvalues: np.ndarray  # (out_dim,), descending
    eps: float = 1e-8

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]

    def state_arrays(self) -> dict:
        return {
            "pca.mean": self.mean,
            "pca.proj": self.projection,
            "pca.eigenvalues": self.eigenvalues,
        }

    @classmethod
    def from_state_arrays(cls, arrays: dict) -> "PcaWhitening":
        return cls(
            mean=np.asarray(arrays["pca.mean"], dtype=np.float64),
            projection=np.asarray(arrays["pca.proj"], dtype=np.float64),
            eigenvalues=np.asarray(arrays["pca.eigenvalues"], dtype=np.float64),
        )


def fit_pca_whitening(samples: np.ndarray, out_dim: int, eps: float = 1e-8) -> PcaWhitening:
    """PCA whitening fit on (M, F) training descriptors.

    Directions come from the SVD of the centered data (equivalently the
    covariance eigendecomposition with divisor M-1), ordered by
    descending eigenvalue, each sign-fixed so its largest-magnitude
    component is positive, and scaled by 1/sqrt(eigenvalue + eps).
    """
    samples = np.asarray(samples, dtype=np.float64)
    m, f = samples.shape
    if out_dim < 1:
        raise ValueError("out_dim must be >= 1")
    if m <= out_dim:
        raise ValueError(f"need more than out_dim={out_dim} samples, got {m}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(singular > max(m, f) * np.finfo(np.float64).eps * (singular[0] if singular.size else 0)))
    if out_dim > rank:
        raise ValueError(f"out_dim={out_dim} exceeds data rank {rank}")
    eigenvalues = (singular[:out_dim] ** 2) / (m - 1)
    rows = vt[:out_dim].copy()
    for row in rows:
        pivot = int(np.argmax(np.abs(row)))
        if row[pivot] < 0:
            row *= -1.0
    projection = rows / np.sqrt(eigenvalues + eps)[:, None]
    return PcaWhitening(mean=mean, projection=projection, eigenvalues=eigenvalues, eps=eps)


def apply_descriptor_reduction(v: np.ndarray, pw: PcaWhitening) -> np.ndarray:
    """Project (v - mean), then L2-normalize. Accepts (F,) or (M, F)."""
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    if single:
        v = v[None, :]
    if v.shape[1] != pw.mean.shape[0]:
        raise ValueError(f"descriptor dim {v.shape[1]} != fitted dim {pw.mean.shape[0]}")
    out = (v - pw.mean) @ pw.projection.T
    norms = np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)
    out = out / norms
    return out[0] if single else out


def descriptor_graph(images: Tensor, model, params: VladParams, training: bool = False, eps: float = 1e-12) -> Tensor:
    """Backbone + VLAD as one differentiable map to (N, K*D)."""
    return vlad_aggregate(model(images, training), params, eps=eps)


def global_descriptor(images: np.ndarray, model, params: VladParams, pca: PcaWhitening = None) -> np.ndarray:
    """Inference-mode global descriptors for a (N, 3, H, W) batch.

    Returns float32 (N, out_dim) rows, unit-norm, deterministic for
    fixed weights; applies the optional PCA whitening reduction.
    """
    with no_grad():
        desc = descriptor_graph(Tensor(np.asarray(images, dtype=np.float32)), model, params, training=False).data
    if pca is not None:
        desc = apply_descriptor_reduction(desc, pca)
    return np.ascontiguousarray(desc, dtype=np.float32)
