"""Mode-seeking clustering over a Gaussian kernel density estimate.

Applied twice during dictionary construction: once per entity to collapse
repetitive descriptors, then per category over the pooled reduced bags to
mint the temporary codewords. The kernel sum is left unnormalized: the
update only needs relative weights, and the 1/(n h^d) factor of the usual
density estimate under/overflows for the descriptor dimensions this ingests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import core, dictionary

DEFAULT_M = 5.0
DEFAULT_MAX_ITER = 300
TOL_FACTOR = 1e-4  # convergence tolerance as a fraction of the bandwidth


@dataclass(frozen=True)
class Bandwidth:
    """Kernel width h = D/m, with D the mean pairwise distance of the data."""

    m: float
    h: float

    def __post_init__(self):
        if not 1.0 <= self.m <= 10.0:
            raise core.ParameterError(f"bandwidth divisor m={self.m} outside [1, 10]")
        if self.h <= 0:
            raise core.ParameterError(f"resolved bandwidth must be positive, got {self.h}")

    @classmethod
    def from_descriptors(cls, descriptors, m=DEFAULT_M):
        return cls(m, core.mean_pairwise_distance(descriptors) / m)


@dataclass(frozen=True)
class ModeSet:
    """Cluster modes plus the mode index of every input sample."""

    modes: np.ndarray       # (k, d)
    assignment: np.ndarray  # (n,) int

    def __len__(self):
        return self.modes.shape[0]


def kde_at(x, samples, h):
    """Unnormalized Gaussian kernel sum at x over the sample set."""
    samples = core.as_matrix(samples)
    if samples.shape[0] < 1:
        raise core.InsufficientDataError("kernel density needs at least one sample")
    if h <= 0:
        raise core.ParameterError(f"bandwidth must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    d2 = cdist(x, samples, "sqeuclidean")[0]
    return float(np.exp(-d2 / (2.0 * h * h)).sum())


def _shift_batch(points, samples, h):
    """One Gaussian-weighted mean update for each row of points."""
    d2 = cdist(points, samples, "sqeuclidean")
    w = np.exp(-d2 / (2.0 * h * h))
    totals = w.sum(axis=1)
    dead = totals == 0.0  # all weights underflowed: stay put
    totals[dead] = 1.0
    shifted = (w @ samples) / totals[:, None]
    if dead.any():
        shifted[dead] = points[dead]
    return shifted


def mean_shift_step(x, samples, h):
    """Shift x to the Gaussian-weighted mean of the samples around it."""
    samples = core.as_matrix(samples)
    if samples.shape[0] < 1:
        raise core.InsufficientDataError("mean shift needs at least one sample")
    if h <= 0:
        raise core.ParameterError(f"bandwidth must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return _shift_batch(x, samples, h)[0]


def _merge_converged(converged, radius):
    """Greedy first-fit agglomeration of converged points, in input order.

    Follow-up passes fuse any running means that drifted within the radius,
    so returned modes are pairwise farther apart than the radius.
    """
    centers = []
    members = []
    for i in range(converged.shape[0]):
        p = converged[i]
        for j, c in enumerate(centers):
            if np.linalg.norm(p - c) <= radius:
                members[j].append(i)
                centers[j] = converged[members[j]].mean(axis=0)
                break
        else:
            centers.append(p.copy())
            members.append([i])

    merged = True
    while merged and len(centers) > 1:
        merged = False
        for a in range(len(centers)):
            for b in range(a + 1, len(centers)):
                if np.linalg.norm(centers[a] - centers[b]) <= radius:
                    members[a].extend(members[b])
                    centers[a] = converged[members[a]].mean(axis=0)
                    del centers[b], members[b]
                    merged = True
                    break
            if merged:
                break

    assignment = np.empty(converged.shape[0], dtype=np.int64)
    for j, group in enumerate(members):
        assignment[group] = j
    return np.vstack(centers), assignment


def cluster(samples, h, tol=None, max_iter=DEFAULT_MAX_ITER, merge_radius=None):
    """Run every sample uphill to its density mode and merge coincident ones.

    Each point is shifted until the step length drops below tol (default
    1e-4*h) or max_iter passes; converged points within merge_radius
    (default h/2) collapse into a single mode whose center is their mean.
    """
    samples = core.as_matrix(samples)
    if samples.shape[0] < 1:
        raise core.InsufficientDataError("clustering needs at least one sample")
    if h <= 0:
        raise core.ParameterError(f"bandwidth must be positive, got {h}")
    if tol is None:
        tol = TOL_FACTOR * h
    if merge_radius is None:
        merge_radius = h / 2.0

    current = samples.copy()
    active = np.ones(samples.shape[0], dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        moved = _shift_batch(current[active], samples, h)
        step = np.linalg.norm(moved - current[active], axis=1)
        current[active] = moved
        active[np.flatnonzero(active)[step < tol]] = False

    modes, assignment = _merge_converged(current, merge_radius)
    return ModeSet(modes, assignment)


def reduce_entity(entity, m=DEFAULT_M):
    """Replace an entity's descriptor bag with its cluster modes.

    Single-descriptor entities pass through unchanged (no bandwidth is
    resolvable), as do bags of identical descriptors, which collapse to one.
    """
    descriptors = entity.descriptors
    if descriptors.shape[0] < 2:
        return entity
    spread = core.mean_pairwise_distance(descriptors)
    if spread == 0.0:
        return core.Entity(entity.id, entity.label, descriptors[:1])
    bw = Bandwidth(m, spread / m)
    modes = cluster(descriptors, bw.h).modes
    return core.Entity(entity.id, entity.label, modes)


def build_category_codebook(entities, m=DEFAULT_M, label=None):
    """Pool one category's (reduced) descriptors and cluster them into codewords."""
    if not entities:
        raise core.InsufficientDataError(
            f"no entities for class {label}" if label is not None else "no entities"
        )
    labels = {e.label for e in entities}
    if len(labels) != 1:
        raise core.ValidationError(f"entities span multiple classes: {sorted(labels)}")
    the_label = labels.pop()
    if label is not None and label != the_label:
        raise core.ValidationError(f"expected class {label}, entities carry {the_label}")

    pool = np.vstack([e.descriptors for e in entities])
    if pool.shape[0] < 2 or core.mean_pairwise_distance(pool) == 0.0:
        modes = pool[:1]
    else:
        bw = Bandwidth.from_descriptors(pool, m)
        modes = cluster(pool, bw.h).modes
    codewords = [dictionary.Codeword(v, the_label) for v in modes]
    return dictionary.CategoryCodebook(the_label, codewords)
