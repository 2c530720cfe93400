"""Codeword ranking and adaptive per-category selection.

Temporary per-category codewords are scored by how class-pure their
neighborhood is (conditional entropy over neighbor labels, plus the
fraction of neighbors sharing the codeword's own label), combined into a
single rank. The ranked list is cut into keep/discard halves with a
dominant-set bipartition of its chain graph, and the surviving per-class
codebooks are concatenated into the global dictionary.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core

DEFAULT_T = 10
DEFAULT_W1 = 0.5
DEFAULT_H_FLOOR = 0.1
DEFAULT_SUPPORT_THETA = 1e-4
REPLICATOR_TOL = 1e-8
REPLICATOR_MAX_ITER = 10000


@dataclass(frozen=True)
class Codeword:
    """A descriptor-space vector carrying its category label and rank stats."""

    vector: np.ndarray
    label: int
    entropy_h: float | None = None
    tfidf: float | None = None
    rank: float | None = None

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class CategoryCodebook:
    """Codewords mined from one category."""

    label: int
    codewords: list

    def __post_init__(self):
        for c in self.codewords:
            if c.label != self.label:
                raise core.ValidationError(
                    f"codeword labeled {c.label} in codebook for class {self.label}"
                )

    def __len__(self):
        return len(self.codewords)

    def vectors(self):
        return np.vstack([c.vector for c in self.codewords])


@dataclass(frozen=True)
class ChainGraph:
    """Rank-ordered codewords joined sequentially; weights are Euclidean gaps."""

    nodes: list
    edge_weights: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.edge_weights, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "edge_weights", weights)
        if len(weights) != max(len(self.nodes) - 1, 0):
            raise core.ValidationError(
                f"{len(self.nodes)} nodes need {len(self.nodes) - 1} edges, "
                f"got {len(weights)}"
            )
        if len(weights) and (weights < 0).any():
            raise core.ValidationError("edge weights must be nonnegative")


@dataclass
class GlobalDictionary:
    """Selected per-class codebooks concatenated in ascending class order."""

    codewords: list
    per_class_counts: list
    dim: int

    def __len__(self):
        return len(self.codewords)

    def matrix(self):
        if not hasattr(self, "_matrix"):
            self._matrix = np.vstack([c.vector for c in self.codewords])
        return self._matrix

    def label_array(self):
        return np.array([c.label for c in self.codewords], dtype=np.int64)


def _sorted_books(all_codebooks):
    books = sorted(all_codebooks, key=lambda cb: cb.label)
    labels = [cb.label for cb in books]
    if len(set(labels)) != len(labels):
        raise core.ValidationError("duplicate category labels across codebooks")
    return books


def _union(all_codebooks):
    """Stack every codeword (ascending class label, original order within)."""
    books = _sorted_books(all_codebooks)
    vectors = np.vstack([cb.vectors() for cb in books])
    labels = np.concatenate(
        [np.full(len(cb), cb.label, dtype=np.int64) for cb in books]
    )
    return books, vectors, labels


def _locate(codeword, books):
    pos = 0
    for cb in books:
        for c in cb.codewords:
            if c is codeword:
                return pos
            pos += 1
    raise core.ParameterError("codeword is not a member of the supplied codebooks")


def _neighbor_labels(codeword, all_codebooks, t):
    books, vectors, labels = _union(all_codebooks)
    pos = _locate(codeword, books)
    idx = core.knn(codeword.vector, vectors, t, exclude_index=pos)
    return labels[idx]


def entropy_from_labels(neighbor_labels):
    """Shannon entropy (bits) of the empirical label distribution."""
    _, counts = np.unique(np.asarray(neighbor_labels), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def conditional_entropy(codeword, all_codebooks, t=DEFAULT_T):
    """Entropy of the label distribution among the t nearest codewords.

    Retrieval runs over the union of all codebooks excluding the codeword's
    own slot. Zero means a class-pure neighborhood.
    """
    return entropy_from_labels(_neighbor_labels(codeword, all_codebooks, t))


def tfidf_score(codeword, all_codebooks, t=DEFAULT_T):
    """Fraction of the t retrieved neighbors sharing the codeword's label."""
    neighbor = _neighbor_labels(codeword, all_codebooks, t)
    return float(np.mean(neighbor == codeword.label))


def rank_score(h, ti, w1=DEFAULT_W1, h_floor=DEFAULT_H_FLOOR):
    """Convex mix of inverse entropy and neighborhood purity.

    The entropy is clamped below by h_floor so class-pure neighborhoods get
    a large finite rank instead of dividing by zero.
    """
    if h < 0:
        raise core.ParameterError(f"entropy must be nonnegative, got {h}")
    if not 0 <= ti <= 1:
        raise core.ParameterError(f"tf-idf score must be in [0, 1], got {ti}")
    if not 0 <= w1 <= 1:
        raise core.ParameterError(f"w1 must be in [0, 1], got {w1}")
    if h_floor <= 0:
        raise core.ParameterError(f"h_floor must be positive, got {h_floor}")
    return w1 / max(h, h_floor) + (1.0 - w1) * ti


def rank_codebook(codebook, all_codebooks, t=DEFAULT_T, w1=DEFAULT_W1,
                  h_floor=DEFAULT_H_FLOOR):
    """Score every codeword and return the codebook sorted by descending rank.

    Entropy and tf-idf come from a single retrieval per codeword. Ties in
    rank keep the original codebook order.
    """
    books, vectors, labels = _union(all_codebooks)
    offset = None
    pos = 0
    for cb in books:
        if cb is codebook:
            offset = pos
            break
        pos += len(cb)
    if offset is None:
        raise core.ParameterError("codebook is not among the supplied codebooks")

    scored = []
    for i, c in enumerate(codebook.codewords):
        idx = core.knn(c.vector, vectors, t, exclude_index=offset + i)
        neighbor = labels[idx]
        h = entropy_from_labels(neighbor)
        ti = float(np.mean(neighbor == c.label))
        scored.append(dataclasses.replace(
            c, entropy_h=h, tfidf=ti, rank=rank_score(h, ti, w1, h_floor)
        ))
    order = np.argsort([-c.rank for c in scored], kind="stable")
    return CategoryCodebook(codebook.label, [scored[i] for i in order])


def build_chain_graph(ranked_codebook):
    """Connect the ranked codewords sequentially; edges are feature distances."""
    ranks = [c.rank for c in ranked_codebook.codewords]
    if any(r is None for r in ranks):
        raise core.ValidationError("codebook must be ranked before chaining")
    if any(ranks[i] < ranks[i + 1] for i in range(len(ranks) - 1)):
        raise core.ValidationError("codebook must be sorted by descending rank")
    vectors = ranked_codebook.vectors()
    weights = np.linalg.norm(np.diff(vectors, axis=0), axis=1)
    return ChainGraph(list(ranked_codebook.codewords), weights)


def mean_edge_weight(graph):
    """Default affinity scale: the mean chain edge weight."""
    if len(graph.edge_weights) == 0:
        raise core.InsufficientDataError("chain graph has no edges")
    return float(graph.edge_weights.mean())


def _largest_edge_split(graph):
    cut = int(np.argmax(graph.edge_weights))
    n = len(graph.nodes)
    return np.arange(cut + 1), np.arange(cut + 1, n)


def dominant_set_bipartition(graph, sigma_g, theta=DEFAULT_SUPPORT_THETA,
                             tol=REPLICATOR_TOL, max_iter=REPLICATOR_MAX_ITER):
    """Split chain nodes into (support, complement) via replicator dynamics.

    The affinity matrix holds exp(-edge/sigma_g) on consecutive chain pairs
    and zero elsewhere. Replicator dynamics run from the uniform barycenter;
    the support is every node whose converged weight exceeds theta times the
    maximum. If either side comes out empty the chain is cut at its largest
    edge weight instead.
    """
    n = len(graph.nodes)
    if n < 2:
        raise core.ParameterError("bipartition needs at least 2 nodes")
    if sigma_g <= 0:
        raise core.ParameterError(f"sigma_g must be positive, got {sigma_g}")

    affinity = np.zeros((n, n))
    pair = np.exp(-graph.edge_weights / sigma_g)
    idx = np.arange(n - 1)
    affinity[idx, idx + 1] = pair
    affinity[idx + 1, idx] = pair

    x = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        grown = x * (affinity @ x)
        total = grown.sum()
        if total <= 0:
            return _largest_edge_split(graph)
        grown /= total
        if np.abs(grown - x).sum() < tol:
            x = grown
            break
        x = grown

    support = np.flatnonzero(x > theta * x.max())
    complement = np.setdiff1d(np.arange(n), support)
    if len(support) == 0 or len(complement) == 0:
        return _largest_edge_split(graph)
    return support, complement


def select_codewords(ranked_codebook, partition):
    """Keep the partition side with the larger mean rank.

    The result preserves descending-rank order. On an exact tie the side
    containing the top-ranked codeword wins.
    """
    side_a, side_b = (np.asarray(p, dtype=np.int64) for p in partition)
    n = len(ranked_codebook)
    covered = np.sort(np.concatenate([side_a, side_b]))
    if len(covered) != n or (covered != np.arange(n)).any():
        raise core.ValidationError("partition must cover the codebook exactly once")
    ranks = np.array([c.rank for c in ranked_codebook.codewords])
    mean_a, mean_b = ranks[side_a].mean(), ranks[side_b].mean()
    if mean_a > mean_b:
        chosen = side_a
    elif mean_b > mean_a:
        chosen = side_b
    else:
        chosen = side_a if 0 in side_a else side_b
    chosen = np.sort(chosen)
    return CategoryCodebook(
        ranked_codebook.label, [ranked_codebook.codewords[i] for i in chosen]
    )


def build_global_dictionary(selected_codebooks, num_classes=None):
    """Concatenate per-class codebooks in ascending class order."""
    books = _sorted_books(selected_codebooks)
    if num_classes is None:
        num_classes = max(cb.label for cb in books) + 1
    present = {cb.label for cb in books}
    for l in range(num_classes):
        if l not in present:
            raise core.ValidationError(f"no selected codebook for class {l}")
    dims = set()
    codewords = []
    counts = []
    for cb in books:
        if len(cb) == 0:
            raise core.ValidationError(f"selected codebook for class {cb.label} is empty")
        dims.add(cb.vectors().shape[1])
        codewords.extend(cb.codewords)
        counts.append(len(cb))
    if len(dims) != 1:
        raise core.ValidationError(f"inconsistent codeword dimensions: {sorted(dims)}")
    return GlobalDictionary(codewords, counts, dims.pop())


def _stat_text(value):
    return repr(float(value)) if value is not None else "nan"


def _stat_value(text):
    value = float(text)
    return None if np.isnan(value) else value


def save_dictionary(dictionary, bin_path, meta_path=None):
    """Write the dictionary vectors (binary) plus a per-codeword stats sidecar."""
    bin_path = Path(bin_path)
    if meta_path is None:
        meta_path = bin_path.with_suffix(".meta")
    core.write_descriptor_file(bin_path, dictionary.matrix())
    lines = []
    for i, c in enumerate(dictionary.codewords):
        lines.append(
            f"{i}\t{c.label}\t{_stat_text(c.rank)}\t{_stat_text(c.entropy_h)}"
            f"\t{_stat_text(c.tfidf)}"
        )
    Path(meta_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return bin_path, Path(meta_path)


def load_dictionary(bin_path, meta_path=None):
    bin_path = Path(bin_path)
    if meta_path is None:
        meta_path = bin_path.with_suffix(".meta")
    vectors = core.read_descriptor_file(bin_path)
    lines = [l for l in Path(meta_path).read_text(encoding="utf-8").splitlines() if l.strip()]
    if len(lines) != vectors.shape[0]:
        raise core.ValidationError(
            f"sidecar has {len(lines)} rows, binary has {vectors.shape[0]}"
        )
    codewords = []
    labels = []
    for i, line in enumerate(lines):
        parts = line.split("\t")
        if len(parts) != 5:
            raise core.ValidationError(f"sidecar line {i + 1}: expected 5 fields")
        index, label = int(parts[0]), int(parts[1])
        if index != i:
            raise core.ValidationError(f"sidecar line {i + 1}: index {index} out of order")
        codewords.append(Codeword(
            vectors[i], label,
            entropy_h=_stat_value(parts[3]),
            tfidf=_stat_value(parts[4]),
            rank=_stat_value(parts[2]),
        ))
        labels.append(label)
    labels = np.array(labels)
    if (np.diff(labels) < 0).any():
        raise core.ValidationError("sidecar labels are not grouped in ascending order")
    counts = [int(n) for n in np.bincount(labels)]
    if any(n == 0 for n in counts):
        missing = [l for l, n in enumerate(counts) if n == 0]
        raise core.ValidationError(f"no codewords for classes {missing}")
    return GlobalDictionary(codewords, counts, vectors.shape[1])
