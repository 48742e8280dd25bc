"""Random Forest over the 76-slot feature vectors, built from scratch.

Seeded bootstrap per tree, per-node feature subsampling without replacement,
greedy weighted-Gini splits with midpoint thresholds, and fully specified
tie-breaking (lower Gini, then lower feature index, then lower threshold) so
identical inputs produce byte-identical serialized models on any platform.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PipelineError
from .features import DIM, LAYOUT_VERSION, EmbeddingConfig

LABEL_TO_CLASS = {"non_exfiltrator": 0, "exfiltrator": 1}
CLASS_TO_LABEL = {0: "non_exfiltrator", 1: "exfiltrator"}

MODEL_FORMAT = "forest"
MODEL_FORMAT_VERSION = 1


class ClassTooSmall(PipelineError):
    """A class has fewer than 2 rows; a stratified split is impossible."""


class SingleClass(PipelineError):
    """Training data contains only one class."""


class DimensionMismatch(PipelineError):
    """Input vector length differs from the model's feature dimension."""


class VersionMismatch(PipelineError):
    """Persisted model was built for a different feature layout or format."""


class CorruptModel(PipelineError):
    """Persisted model cannot be decoded."""


@dataclass(frozen=True)
class Dataset:
    ids: tuple[str, ...]
    x: np.ndarray
    y: np.ndarray

    @classmethod
    def from_rows(cls, rows) -> "Dataset":
        ids = tuple(r[0] for r in rows)
        if ids:
            x = np.asarray([list(r[1]) for r in rows], dtype=np.float64)
            y = np.asarray([int(r[2]) for r in rows], dtype=np.int64)
        else:
            x = np.empty((0, DIM), dtype=np.float64)
            y = np.empty((0,), dtype=np.int64)
        if x.shape[1] != DIM:
            raise DimensionMismatch(f"rows have {x.shape[1]} features, expected {DIM}")
        if not np.isfinite(x).all():
            raise ValueError("feature matrix contains non-finite values")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        return cls(ids=ids, x=x, y=y)

    def __len__(self) -> int:
        return len(self.ids)

    def class_counts(self) -> tuple[int, int]:
        return int((self.y == 0).sum()), int((self.y == 1).sum())

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(ids=tuple(self.ids[i] for i in idx), x=self.x[idx], y=self.y[idx])


def _default_max_features() -> int:
    return math.ceil(math.sqrt(DIM))


@dataclass(frozen=True)
class Hyperparams:
    n_trees: int = 100
    max_features: int = field(default_factory=_default_max_features)
    min_samples_split: int = 2
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 1 <= self.max_features <= DIM:
            raise ValueError(f"max_features must be in [1, {DIM}]")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")


@dataclass(frozen=True)
class _Tree:
    """Array-encoded binary tree; feature == -1 marks a leaf."""

    feature: tuple[int, ...]
    threshold: tuple[float, ...]
    left: tuple[int, ...]
    right: tuple[int, ...]
    count0: tuple[int, ...]
    count1: tuple[int, ...]

    def predict_vote(self, x) -> int:
        i = 0
        while self.feature[i] != -1:
            i = self.left[i] if x[self.feature[i]] <= self.threshold[i] else self.right[i]
        return 1 if self.count1[i] > self.count0[i] else 0


@dataclass
class ForestModel:
    trees: list[_Tree]
    hyperparams: Hyperparams
    layout_version: str
    n_samples: int
    class_counts: tuple[int, int]
    embedding: EmbeddingConfig | None = None
    trained_at: float | None = None  # in-memory only; never serialized


def gini(c0: int, c1: int) -> float:
    """Binary Gini impurity 1 - p0^2 - p1^2 over class counts."""
    n = c0 + c1
    if n == 0:
        return 0.0
    p0 = c0 / n
    p1 = c1 / n
    return 1.0 - p0 * p0 - p1 * p1


def split_dataset(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split: per class, seeded shuffle then cut at
    floor(train_fraction * class size). Classes processed in label order."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for cls in (0, 1):
        members = np.nonzero(ds.y == cls)[0]
        if len(members) < 2:
            raise ClassTooSmall(f"class {cls} has {len(members)} rows; need >= 2")
        perm = rng.permutation(members)
        k = math.floor(train_fraction * len(members))
        train_idx.extend(int(i) for i in perm[:k])
        test_idx.extend(int(i) for i in perm[k:])
    return ds.subset(sorted(train_idx)), ds.subset(sorted(test_idx))


def _grow_tree(x: np.ndarray, y: np.ndarray, hp: Hyperparams,
               rng: np.random.Generator) -> _Tree:
    n = len(y)
    boot = rng.integers(0, n, size=n)
    xb = x[boot]
    yb = y[boot]

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    count0: list[int] = []
    count1: list[int] = []

    def new_node(c0: int, c1: int) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        count0.append(c0)
        count1.append(c1)
        return len(feature) - 1

    # LIFO with the left child pushed last: preorder, left-first, so the
    # per-node feature sampling consumes the stream in a fixed order
    stack: list[tuple[np.ndarray, int, int, bool]] = [(np.arange(n), 0, -1, False)]
    while stack:
        rows, depth, parent, is_left = stack.pop()
        ys = yb[rows]
        c1 = int(ys.sum())
        c0 = len(rows) - c1
        node = new_node(c0, c1)
        if parent >= 0:
            if is_left:
                left[parent] = node
            else:
                right[parent] = node
        if c0 == 0 or c1 == 0 or len(rows) < hp.min_samples_split:
            continue
        if hp.max_depth is not None and depth >= hp.max_depth:
            continue

        feats = np.sort(rng.choice(DIM, size=hp.max_features, replace=False))
        best: tuple[float, int, float] | None = None
        for f in feats:
            vals = xb[rows, f]
            order = np.argsort(vals, kind="stable")
            sv = vals[order]
            sy = ys[order]
            boundaries = np.nonzero(sv[1:] != sv[:-1])[0]
            if boundaries.size == 0:
                continue
            ones = np.cumsum(sy)
            nl = boundaries + 1
            n1l = ones[boundaries]
            n0l = nl - n1l
            nr = len(rows) - nl
            n1r = c1 - n1l
            n0r = c0 - n0l
            gl = 1.0 - (n0l / nl) ** 2 - (n1l / nl) ** 2
            gr = 1.0 - (n0r / nr) ** 2 - (n1r / nr) ** 2
            weighted = (nl * gl + nr * gr) / len(rows)
            b = int(np.argmin(weighted))  # first minimum = lowest threshold
            g = float(weighted[b])
            if best is None or g < best[0]:  # strict: earlier feature wins ties
                thr = (float(sv[boundaries[b]]) + float(sv[boundaries[b] + 1])) / 2.0
                best = (g, int(f), thr)

        if best is None or best[0] >= gini(c0, c1):
            continue
        g, f, thr = best
        feature[node] = f
        threshold[node] = thr
        mask = xb[rows, f] <= thr
        stack.append((rows[~mask], depth + 1, node, False))
        stack.append((rows[mask], depth + 1, node, True))

    return _Tree(feature=tuple(feature), threshold=tuple(threshold), left=tuple(left),
                 right=tuple(right), count0=tuple(count0), count1=tuple(count1))


def train_forest(train: Dataset, hp: Hyperparams | None = None, *,
                 embedding: EmbeddingConfig | None = None) -> ForestModel:
    """Train n_trees trees; tree t draws its PRNG stream from (seed, t)."""
    hp = hp or Hyperparams()
    counts = train.class_counts()
    if counts[0] == 0 or counts[1] == 0:
        raise SingleClass(f"training data has class counts {counts[0]}/{counts[1]}")
    trees = []
    for t in range(hp.n_trees):
        rng = np.random.default_rng((hp.seed, t))
        trees.append(_grow_tree(train.x, train.y, hp, rng))
    return ForestModel(trees=trees, hyperparams=hp, layout_version=LAYOUT_VERSION,
                       n_samples=len(train), class_counts=counts,
                       embedding=embedding, trained_at=time.time())


def predict(model: ForestModel, x) -> tuple[int, float]:
    """Vote fraction for class 1; label 1 iff score >= 0.5; leaf ties vote 0."""
    row = np.asarray(list(x), dtype=np.float64)
    if row.shape != (DIM,):
        raise DimensionMismatch(f"expected {DIM} features, got {row.shape}")
    if not np.isfinite(row).all():
        raise DimensionMismatch("input vector contains non-finite values")
    votes = sum(tree.predict_vote(row) for tree in model.trees)
    score = votes / len(model.trees)
    return (1 if score >= 0.5 else 0), score


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_auc: float
    confusion: dict[str, int]  # tn / fp / fn / tp

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "roc_auc": self.roc_auc,
                "confusion": dict(self.confusion)}


def roc_auc(scores, labels) -> float:
    """Rank-statistic AUC with 0.5 credit for tied scores (Mann-Whitney).

    Degenerate single-class inputs return 0.5 by definition here.
    """
    scores = list(scores)
    labels = list(labels)
    n = len(scores)
    n1 = sum(1 for l in labels if l == 1)
    n0 = n - n1
    if n1 == 0 or n0 == 0:
        return 0.5
    order = sorted(range(n), key=lambda i: scores[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg_rank = (i + j) / 2 + 1  # 1-based average rank of the tie run
        for t in range(i, j + 1):
            ranks[order[t]] = avg_rank
        i = j + 1
    r1 = sum(r for r, l in zip(ranks, labels) if l == 1)
    u1 = r1 - n1 * (n1 + 1) / 2
    return u1 / (n1 * n0)


def evaluate(model: ForestModel, test: Dataset) -> MetricsReport:
    """Confusion-based metrics with positive class 1 plus rank-statistic AUC."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    scores = []
    preds = []
    for row in test.x:
        label, score = predict(model, row)
        preds.append(label)
        scores.append(score)
    tp = sum(1 for p, t in zip(preds, test.y) if p == 1 and t == 1)
    tn = sum(1 for p, t in zip(preds, test.y) if p == 0 and t == 0)
    fp = sum(1 for p, t in zip(preds, test.y) if p == 1 and t == 0)
    fn = sum(1 for p, t in zip(preds, test.y) if p == 0 and t == 1)
    accuracy = (tp + tn) / len(test)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    auc = roc_auc(scores, [int(t) for t in test.y])
    return MetricsReport(accuracy=accuracy, precision=precision, recall=recall,
                         f1=f1, roc_auc=auc,
                         confusion={"tn": tn, "fp": fp, "fn": fn, "tp": tp})


def save_model(model: ForestModel, sink) -> None:
    """Serialize as a versioned JSON document with stable bytes."""
    doc = {
        "format": MODEL_FORMAT,
        "format_version": MODEL_FORMAT_VERSION,
        "layout_version": model.layout_version,
        "hyperparams": {
            "n_trees": model.hyperparams.n_trees,
            "max_features": model.hyperparams.max_features,
            "min_samples_split": model.hyperparams.min_samples_split,
            "max_depth": model.hyperparams.max_depth,
            "seed": model.hyperparams.seed,
        },
        "n_samples": model.n_samples,
        "class_counts": list(model.class_counts),
        "embedding": None if model.embedding is None else {
            "dim": model.embedding.dim,
            "walks_per_node": model.embedding.walks_per_node,
            "walk_length": model.embedding.walk_length,
            "window": model.embedding.window,
            "seed": model.embedding.seed,
            "power_iterations": model.embedding.power_iterations,
        },
        "trees": [
            {"feature": list(t.feature), "threshold": list(t.threshold),
             "left": list(t.left), "right": list(t.right),
             "count0": list(t.count0), "count1": list(t.count1)}
            for t in model.trees
        ],
    }
    json.dump(doc, sink, sort_keys=True, separators=(",", ":"))
    sink.write("\n")


def load_model(source) -> ForestModel:
    """Inverse of save_model; accepts a path or a readable text stream.
    Layout or format drift raises VersionMismatch."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = source.read()
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptModel(f"model document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CorruptModel("model document is not an object")
    try:
        if doc["format"] != MODEL_FORMAT or doc["format_version"] != MODEL_FORMAT_VERSION:
            raise VersionMismatch(
                f"unsupported model format {doc.get('format')!r} "
                f"v{doc.get('format_version')!r}")
        if doc["layout_version"] != LAYOUT_VERSION:
            raise VersionMismatch(
                f"model layout {doc['layout_version']!r} != current {LAYOUT_VERSION!r}")
        hp_doc = doc["hyperparams"]
        hp = Hyperparams(n_trees=int(hp_doc["n_trees"]),
                         max_features=int(hp_doc["max_features"]),
                         min_samples_split=int(hp_doc["min_samples_split"]),
                         max_depth=None if hp_doc["max_depth"] is None else int(hp_doc["max_depth"]),
                         seed=int(hp_doc["seed"]))
        emb_doc = doc.get("embedding")
        emb = None if emb_doc is None else EmbeddingConfig(
            dim=int(emb_doc["dim"]), walks_per_node=int(emb_doc["walks_per_node"]),
            walk_length=int(emb_doc["walk_length"]), window=int(emb_doc["window"]),
            seed=int(emb_doc["seed"]), power_iterations=int(emb_doc["power_iterations"]))
        trees = []
        for td in doc["trees"]:
            tree = _Tree(feature=tuple(int(v) for v in td["feature"]),
                         threshold=tuple(float(v) for v in td["threshold"]),
                         left=tuple(int(v) for v in td["left"]),
                         right=tuple(int(v) for v in td["right"]),
                         count0=tuple(int(v) for v in td["count0"]),
                         count1=tuple(int(v) for v in td["count1"]))
            lengths = {len(tree.feature), len(tree.threshold), len(tree.left),
                       len(tree.right), len(tree.count0), len(tree.count1)}
            if len(lengths) != 1 or not tree.feature:
                raise CorruptModel("tree arrays are inconsistent")
            if any(f >= DIM for f in tree.feature):
                raise CorruptModel("tree references an out-of-range feature")
            trees.append(tree)
        if len(trees) != hp.n_trees:
            raise CorruptModel("tree count does not match hyperparams")
        return ForestModel(trees=trees, hyperparams=hp,
                           layout_version=doc["layout_version"],
                           n_samples=int(doc["n_samples"]),
                           class_counts=tuple(int(c) for c in doc["class_counts"]),
                           embedding=emb, trained_at=None)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModel(f"model document is malformed: {exc}") from exc
