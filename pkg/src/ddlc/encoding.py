"""Entity encoding against the global dictionary.

Two routes: locality-constrained linear coding with max pooling (image-style
descriptors) and Fisher vectors over a diagonal-covariance Gaussian mixture
(video-style descriptors).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from . import core

GMM_MAGIC = b"DGMM"
GMM_VERSION = 1

DEFAULT_LLC_K = 100
DEFAULT_LLC_LAMBDA = 1e-4
DEFAULT_GMM_K = 100
GMM_MAX_ITER = 200
GMM_TOL_PER_POINT = 1e-6
VARIANCE_FLOOR_REL = 1e-6
KMEANS_INIT_ITERS = 10
KMEANS_MAX_POINTS = 10000


@dataclass(frozen=True)
class LlcParams:
    """Locality-constrained coding setup: neighborhood size and ridge term."""

    dictionary: object
    k_neighbors: int = DEFAULT_LLC_K
    lambda_reg: float = DEFAULT_LLC_LAMBDA

    def __post_init__(self):
        if not 1 <= self.k_neighbors <= len(self.dictionary):
            raise core.ParameterError(
                f"k_neighbors={self.k_neighbors} outside [1, {len(self.dictionary)}]"
            )
        if self.lambda_reg <= 0:
            raise core.ParameterError(f"lambda_reg must be positive, got {self.lambda_reg}")


@dataclass(frozen=True)
class GmmModel:
    """Diagonal-covariance Gaussian mixture with per-iteration fit history."""

    weights: np.ndarray    # (K,) simplex
    means: np.ndarray      # (K, d)
    variances: np.ndarray  # (K, d)
    log_likelihoods: tuple = ()

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        means = core.as_matrix(self.means)
        variances = core.as_matrix(self.variances)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)
        if abs(weights.sum() - 1.0) > 1e-10 or (weights <= 0).any():
            raise core.ValidationError("mixture weights must be positive and sum to 1")
        if means.shape != variances.shape or means.shape[0] != weights.shape[0]:
            raise core.ValidationError("inconsistent mixture shapes")
        if (variances <= 0).any():
            raise core.ValidationError("variances must be positive")

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def log_responsibilities(self, x):
        """Per-sample (log p(x), log responsibilities) under the mixture."""
        x = core.as_matrix(x, self.dim)
        log_det = np.log(self.variances).sum(axis=1)
        # Mahalanobis term kept explicit for diagonal covariances.
        diff = x[:, None, :] - self.means[None, :, :]
        maha = (diff * diff / self.variances[None, :, :]).sum(axis=2)
        log_prob = -0.5 * (self.dim * np.log(2.0 * np.pi) + log_det[None, :] + maha)
        weighted = log_prob + np.log(self.weights)[None, :]
        norm = logsumexp(weighted, axis=1)
        return norm, weighted - norm[:, None]

    def responsibilities(self, x):
        _, log_r = self.log_responsibilities(x)
        return np.exp(log_r)


@dataclass(frozen=True)
class EncodedSample:
    """Fixed-length entity representation plus its label and provenance."""

    features: np.ndarray
    label: int
    entity_id: str
    kind: str  # "llc" | "fisher"

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "features", features)
        if self.kind not in ("llc", "fisher"):
            raise core.ValidationError(f"unknown encoding kind {self.kind!r}")
        if not np.isfinite(features).all():
            raise core.ValidationError(f"entity {self.entity_id!r}: non-finite features")


def llc_encode(x, params):
    """Code x as an affine combination of its k nearest codewords.

    Solves min ||x - B^T c||^2 + lambda ||c||^2 subject to sum(c) = 1 over the
    selected neighbors via the shifted-covariance closed form; all other
    dictionary entries stay zero.
    """
    dmat = params.dictionary.matrix()
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != dmat.shape[1]:
        raise core.ValidationError(
            f"descriptor dimension {x.shape[0]} != dictionary dimension {dmat.shape[1]}"
        )
    idx = core.knn(x, dmat, params.k_neighbors)
    shifted = dmat[idx] - x[None, :]
    gram = shifted @ shifted.T
    gram[np.diag_indices_from(gram)] += params.lambda_reg
    try:
        w = np.linalg.solve(gram, np.ones(len(idx)))
    except np.linalg.LinAlgError as exc:
        raise core.NumericError(
            f"local Gram matrix is singular even with lambda={params.lambda_reg}"
        ) from exc
    total = w.sum()
    if not np.isfinite(total) or total == 0.0:
        raise core.NumericError(
            f"degenerate LLC solve (sum of weights {total}); check lambda"
        )
    code = np.zeros(dmat.shape[0])
    code[idx] = w / total
    return code


def llc_pool(codes):
    """Component-wise max of absolute code values, L2-normalized."""
    if len(codes) == 0:
        raise core.InsufficientDataError("cannot pool an empty code list")
    pooled = np.abs(np.vstack(codes)).max(axis=0)
    norm = np.linalg.norm(pooled)
    if norm > 0:
        pooled = pooled / norm
    return pooled


def _kmeans(x, k, rng, iters=KMEANS_INIT_ITERS):
    """Plain Lloyd iterations; empty clusters grab the farthest point."""
    centers = x[rng.choice(x.shape[0], size=k, replace=False)].copy()
    assign = None
    for _ in range(iters):
        dist = cdist(x, centers, "sqeuclidean")
        assign = dist.argmin(axis=1)
        for j in range(k):
            mask = assign == j
            if mask.any():
                centers[j] = x[mask].mean(axis=0)
            else:
                worst = int(np.argmax(dist[np.arange(x.shape[0]), assign]))
                centers[j] = x[worst]
                assign[worst] = j
    return centers, assign


def fit_gmm(descriptors, k=DEFAULT_GMM_K, seed=0, max_iter=GMM_MAX_ITER,
            tol=GMM_TOL_PER_POINT):
    """Fit a diagonal-covariance mixture by EM.

    Initialization is k-means on a seeded subsample; iteration stops when the
    per-point log-likelihood gain falls below tol. A variance floor relative
    to the global per-dimension variance keeps components from collapsing.
    """
    x = core.as_matrix(descriptors)
    n, d = x.shape
    if n < k:
        raise core.ParameterError(f"need at least {k} descriptors to fit {k} components, got {n}")

    global_var = x.var(axis=0)
    floor = VARIANCE_FLOOR_REL * global_var + 1e-12

    rng = np.random.default_rng(seed)
    init = x if n <= KMEANS_MAX_POINTS else x[rng.choice(n, KMEANS_MAX_POINTS, replace=False)]
    centers, assign = _kmeans(init, k, rng)

    weights = np.bincount(assign, minlength=k).astype(np.float64)
    weights = np.maximum(weights, 1.0)
    weights /= weights.sum()
    means = centers
    variances = np.empty((k, d))
    for j in range(k):
        mask = assign == j
        variances[j] = init[mask].var(axis=0) if mask.any() else global_var
    variances = np.maximum(variances, floor)

    model = GmmModel(weights, means, variances)
    history = []
    prev = -np.inf
    for _ in range(max_iter):
        norm, log_r = model.log_responsibilities(x)
        total_ll = float(norm.sum())
        history.append(total_ll)
        if total_ll - prev < tol * n and np.isfinite(prev):
            break
        prev = total_ll

        resp = np.exp(log_r)
        counts = resp.sum(axis=0)
        counts = np.maximum(counts, 1e-300)
        weights = counts / n
        weights = weights / weights.sum()
        means = (resp.T @ x) / counts[:, None]
        second = (resp.T @ (x * x)) / counts[:, None]
        variances = np.maximum(second - means * means, floor)
        model = GmmModel(weights, means, variances)

    return GmmModel(model.weights, model.means, model.variances, tuple(history))


def fisher_statistics(descriptors, gmm):
    """Unnormalized per-component gradient accumulators.

    Returns (responsibility sums, mean-gradient sums, variance-gradient sums);
    all three are additive over concatenated descriptor sets.
    """
    x = core.as_matrix(descriptors, gmm.dim)
    resp = gmm.responsibilities(x)
    sigma = np.sqrt(gmm.variances)
    s0 = resp.sum(axis=0)
    diff = (x[:, None, :] - gmm.means[None, :, :]) / sigma[None, :, :]
    s_mean = (resp[:, :, None] * diff).sum(axis=0)
    s_var = (resp[:, :, None] * (diff * diff - 1.0)).sum(axis=0)
    return s0, s_mean, s_var


def fisher_vector(descriptors, gmm):
    """Improved Fisher vector: mean and variance gradients, signed-sqrt, L2.

    Output length is 2 * dim * n_components.
    """
    x = core.as_matrix(descriptors, gmm.dim)
    n = x.shape[0]
    _, s_mean, s_var = fisher_statistics(x, gmm)
    g_mean = s_mean / (n * np.sqrt(gmm.weights)[:, None])
    g_var = s_var / (n * np.sqrt(2.0 * gmm.weights)[:, None])
    v = np.concatenate([g_mean.ravel(), g_var.ravel()])
    v = np.sign(v) * np.sqrt(np.abs(v))
    norm = np.linalg.norm(v)
    if norm > 0:
        v = v / norm
    return v


def encode_dataset(dataset, method, llc_params=None, gmm=None, threads=1):
    """Encode every entity, preserving order and labels."""
    if method == "llc":
        if llc_params is None:
            raise core.ParameterError("LLC encoding requires dictionary parameters")

        def worker(entity):
            codes = [llc_encode(x, llc_params) for x in entity.descriptors]
            return EncodedSample(llc_pool(codes), entity.label, entity.id, "llc")

    elif method == "fisher":
        if gmm is None:
            raise core.ParameterError("Fisher encoding requires a fitted mixture model")

        def worker(entity):
            return EncodedSample(fisher_vector(entity.descriptors, gmm),
                                 entity.label, entity.id, "fisher")

    else:
        raise core.ParameterError(f"unknown encoding method {method!r}")

    return core.parallel_map(worker, dataset.entities, threads=threads)


def save_gmm(gmm, path):
    """Serialize the mixture as a little-endian float64 blob."""
    header = struct.pack("<4sIII", GMM_MAGIC, GMM_VERSION, gmm.n_components, gmm.dim)
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (gmm.weights, gmm.means, gmm.variances)
    )
    Path(path).write_bytes(header + body)


def load_gmm(path):
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise core.ValidationError(f"{path}: truncated mixture file")
    magic, version, k, d = struct.unpack_from("<4sIII", data)
    if magic != GMM_MAGIC:
        raise core.ValidationError(f"{path}: bad magic {magic!r}")
    if version != GMM_VERSION:
        raise core.ValidationError(f"{path}: unsupported version {version}")
    expected = 16 + 8 * (k + 2 * k * d)
    if len(data) != expected:
        raise core.ValidationError(f"{path}: size {len(data)} != expected {expected}")
    flat = np.frombuffer(data, dtype="<f8", offset=16)
    weights = flat[:k].astype(np.float64)
    means = flat[k:k + k * d].astype(np.float64).reshape(k, d)
    variances = flat[k + k * d:].astype(np.float64).reshape(k, d)
    return GmmModel(weights, means, variances)


def save_encoded(samples, bin_path, manifest_path, num_classes):
    """Persist encoded samples: one binary row per entity plus a manifest."""
    if not samples:
        raise core.InsufficientDataError("no samples to save")
    bin_path, manifest_path = Path(bin_path), Path(manifest_path)
    matrix = np.vstack([s.features for s in samples])
    core.write_descriptor_file(bin_path, matrix)
    rel = bin_path.name if bin_path.parent == manifest_path.parent else str(bin_path)
    lines = [f"#dim={matrix.shape[1]} classes={num_classes}"]
    for s in samples:
        lines.append(f"{s.entity_id}\t{s.label}\t{rel}")
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_encoded(manifest_path, kind):
    """Load encoded samples; manifest lines map rows of one shared binary."""
    manifest_path = Path(manifest_path)
    dim, num_classes, entries = core.parse_manifest(manifest_path)
    if not entries:
        raise core.ValidationError(f"{manifest_path}: no samples listed")
    paths = {p for _, _, p in entries}
    if len(paths) != 1:
        raise core.ValidationError(
            f"{manifest_path}: encoded manifests must reference a single binary"
        )
    matrix = core.read_descriptor_file(manifest_path.parent / paths.pop())
    if matrix.shape != (len(entries), dim):
        raise core.ValidationError(
            f"{manifest_path}: binary shape {matrix.shape} != ({len(entries)}, {dim})"
        )
    samples = [
        EncodedSample(matrix[i], label, entity_id, kind)
        for i, (entity_id, label, _) in enumerate(entries)
    ]
    return samples, num_classes
