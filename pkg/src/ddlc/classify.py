"""Random forest over encoded samples.

Axis-aligned trees grown on bootstrap resamples with information-gain
splits over ceil(sqrt(dim)) randomly drawn candidate features. Everything
is deterministic for a fixed seed: per-tree generators derive from
seed XOR tree index, thresholds are midpoints between consecutive distinct
values, and every tie (feature, threshold, class) breaks toward the
smallest index.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core

FOREST_MAGIC = b"DFOR"
FOREST_VERSION = 1

DEFAULT_N_TREES = 1000
GAIN_EPS = 1e-12


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = DEFAULT_N_TREES
    min_leaf: int = 1
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise core.ParameterError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.min_leaf < 1:
            raise core.ParameterError(f"min_leaf must be >= 1, got {self.min_leaf}")
        if self.max_depth is not None and self.max_depth < 1:
            raise core.ParameterError(f"max_depth must be >= 1, got {self.max_depth}")


@dataclass(frozen=True)
class Tree:
    """Flat preorder node arrays; feature == -1 marks a leaf."""

    feature: np.ndarray    # (n_nodes,) int32
    threshold: np.ndarray  # (n_nodes,) float64
    left: np.ndarray       # (n_nodes,) int32
    right: np.ndarray      # (n_nodes,) int32
    counts: np.ndarray     # (n_nodes, L) uint32, populated on leaves

    def __len__(self):
        return self.feature.shape[0]

    def leaf_index(self, x):
        node = 0
        while self.feature[node] >= 0:
            if x[self.feature[node]] <= self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return node

    def vote(self, x):
        return int(np.argmax(self.counts[self.leaf_index(x)]))


@dataclass(frozen=True)
class ForestModel:
    trees: list
    n_classes: int
    dim: int
    oob_error: float | None = None


@dataclass(frozen=True)
class Prediction:
    """Forest decision with the vote histogram behind it."""

    label: int
    votes: np.ndarray | None
    confidence: float


def _row_entropy(counts, totals):
    """Shannon entropy of each count row (rows sum to the matching total)."""
    p = counts / totals[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(p), 0.0)
    return -terms.sum(axis=1)


def _best_split_on_feature(values, labels_onehot, parent_entropy, min_leaf):
    """Best (gain, threshold) over midpoints of consecutive distinct values."""
    n = values.shape[0]
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    cum = np.cumsum(labels_onehot[order], axis=0)
    cuts = np.flatnonzero(sorted_vals[:-1] < sorted_vals[1:])
    if min_leaf > 1:
        sizes = cuts + 1
        cuts = cuts[(sizes >= min_leaf) & (n - sizes >= min_leaf)]
    if len(cuts) == 0:
        return None
    left_counts = cum[cuts]
    n_left = (cuts + 1).astype(np.float64)
    n_right = n - n_left
    right_counts = cum[-1][None, :] - left_counts
    child = (n_left * _row_entropy(left_counts, n_left)
             + n_right * _row_entropy(right_counts, n_right)) / n
    gains = parent_entropy - child
    best = int(np.argmax(gains))  # first max: smallest threshold wins ties
    threshold = 0.5 * (sorted_vals[cuts[best]] + sorted_vals[cuts[best] + 1])
    return float(gains[best]), float(threshold)


def _build_tree(x, y, n_classes, params, rng):
    """Grow one tree on a bootstrap resample; returns (Tree, bootstrap indices)."""
    n, dim = x.shape
    boot = rng.integers(0, n, size=n)
    xb, yb = x[boot], y[boot]
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), yb] = 1.0
    mtry = math.ceil(math.sqrt(dim))

    features, thresholds, lefts, rights, counts = [], [], [], [], []
    # Stack entries: (row indices, depth, parent node, parent's left child?).
    stack = [(np.arange(n), 0, -1, False)]
    while stack:
        rows, depth, parent, is_left = stack.pop()
        node = len(features)
        if parent >= 0:
            if is_left:
                lefts[parent] = node
            else:
                rights[parent] = node

        hist = np.bincount(yb[rows], minlength=n_classes)
        pure = np.count_nonzero(hist) <= 1
        depth_capped = params.max_depth is not None and depth >= params.max_depth
        split = None
        if not pure and not depth_capped and len(rows) > params.min_leaf:
            parent_entropy = _row_entropy(
                hist[None, :].astype(np.float64), np.array([float(len(rows))])
            )[0]
            candidates = np.sort(rng.choice(dim, size=min(mtry, dim), replace=False))
            best_gain = GAIN_EPS
            for f in candidates:  # ascending order: smallest feature wins ties
                found = _best_split_on_feature(
                    xb[rows, f], onehot[rows], parent_entropy, params.min_leaf
                )
                if found is not None and found[0] > best_gain:
                    best_gain, best_thr = found
                    split = (int(f), best_thr)

        if split is None:
            features.append(-1)
            thresholds.append(0.0)
            lefts.append(-1)
            rights.append(-1)
            counts.append(hist)
        else:
            f, thr = split
            features.append(f)
            thresholds.append(thr)
            lefts.append(-1)
            rights.append(-1)
            counts.append(np.zeros(n_classes, dtype=np.int64))
            go_left = xb[rows, f] <= thr
            # Right pushed first so the left subtree lays out in preorder.
            stack.append((rows[~go_left], depth + 1, node, False))
            stack.append((rows[go_left], depth + 1, node, True))

    tree = Tree(
        np.array(features, dtype=np.int32),
        np.array(thresholds, dtype=np.float64),
        np.array(lefts, dtype=np.int32),
        np.array(rights, dtype=np.int32),
        np.array(np.vstack(counts), dtype=np.uint32),
    )
    return tree, boot


def train_forest(samples, params, num_classes=None, threads=1):
    """Bag params.n_trees trees; also estimates the out-of-bag error rate."""
    if not samples:
        raise core.InsufficientDataError("no training samples")
    x = np.vstack([s.features for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1
    if len(np.unique(y)) < 2:
        raise core.ValidationError("training data contains a single class")

    def worker(tree_index):
        rng = np.random.default_rng(params.seed ^ tree_index)
        return _build_tree(x, y, num_classes, params, rng)

    built = core.parallel_map(worker, range(params.n_trees), threads=threads)

    oob_votes = np.zeros((x.shape[0], num_classes), dtype=np.int64)
    for tree, boot in built:
        out = np.ones(x.shape[0], dtype=bool)
        out[boot] = False
        for i in np.flatnonzero(out):
            oob_votes[i, tree.vote(x[i])] += 1
    covered = oob_votes.sum(axis=1) > 0
    oob_error = None
    if covered.any():
        oob_pred = oob_votes[covered].argmax(axis=1)
        oob_error = float(np.mean(oob_pred != y[covered]))

    return ForestModel([t for t, _ in built], num_classes, x.shape[1], oob_error)


def predict(model, x):
    """Majority vote across trees; confidence is the agreeing fraction."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != model.dim:
        raise core.ValidationError(
            f"feature length {x.shape[0]} != model dimension {model.dim}"
        )
    votes = np.zeros(model.n_classes, dtype=np.int64)
    for tree in model.trees:
        votes[tree.vote(x)] += 1
    label = int(np.argmax(votes))
    return Prediction(label, votes, float(votes[label] / len(model.trees)))


def predict_dataset(model, samples, threads=1):
    return core.parallel_map(lambda s: predict(model, s.features), samples,
                             threads=threads)


def save_forest(model, path):
    """Versioned binary: preorder nodes per tree, leaf histograms inline."""
    out = [struct.pack("<4sIIII", FOREST_MAGIC, FOREST_VERSION,
                       len(model.trees), model.n_classes, model.dim)]
    for tree in model.trees:
        out.append(struct.pack("<I", len(tree)))
        for i in range(len(tree)):
            if tree.feature[i] < 0:
                out.append(struct.pack("<B", 1))
                out.append(struct.pack(f"<{model.n_classes}I", *tree.counts[i]))
            else:
                out.append(struct.pack("<BIdII", 0, tree.feature[i],
                                       tree.threshold[i], tree.left[i],
                                       tree.right[i]))
    Path(path).write_bytes(b"".join(out))


def load_forest(path):
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise core.ValidationError(f"{path}: truncated forest file")
    magic, version, n_trees, n_classes, dim = struct.unpack_from("<4sIIII", data)
    if magic != FOREST_MAGIC:
        raise core.ValidationError(f"{path}: bad magic {magic!r}")
    if version != FOREST_VERSION:
        raise core.ValidationError(f"{path}: unsupported version {version}")
    offset = 20
    trees = []
    for _ in range(n_trees):
        (n_nodes,) = struct.unpack_from("<I", data, offset)
        offset += 4
        feature = np.empty(n_nodes, dtype=np.int32)
        threshold = np.zeros(n_nodes, dtype=np.float64)
        left = np.full(n_nodes, -1, dtype=np.int32)
        right = np.full(n_nodes, -1, dtype=np.int32)
        counts = np.zeros((n_nodes, n_classes), dtype=np.uint32)
        for i in range(n_nodes):
            (flag,) = struct.unpack_from("<B", data, offset)
            offset += 1
            if flag == 1:
                counts[i] = struct.unpack_from(f"<{n_classes}I", data, offset)
                offset += 4 * n_classes
                feature[i] = -1
            else:
                f, thr, l, r = struct.unpack_from("<IdII", data, offset)
                offset += 20
                feature[i], threshold[i], left[i], right[i] = f, thr, l, r
        trees.append(Tree(feature, threshold, left, right, counts))
    if offset != len(data):
        raise core.ValidationError(f"{path}: trailing bytes after last tree")
    return ForestModel(trees, n_classes, dim)
