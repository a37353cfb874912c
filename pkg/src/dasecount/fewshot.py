"""Target-domain meta-testing: episodes, feature extraction, classifiers.

An episode draws k labeled support samples and q query samples per class
from one (scenario, motion) task. Support samples pass through the
frozen extractor at a chosen tap, the amplitude and phase-difference
feature vectors are concatenated, each row is duplicated a configured
number of times, and a lightweight classifier is trained on the result.

The classifiers are deliberately minimal and fully deterministic:
multinomial logistic regression and a one-vs-rest linear SVM trained by
full-batch gradient descent from zero weights, plus a nearest-neighbor
voter. LR/SVM training folds exact duplicate rows into multiplicity
weights, which leaves the objective -- mean loss plus an L2 penalty
scaled by the distinct-row count -- literally unchanged under row
duplication, so the duplication step is an exact no-op for them (it
matters only for per-row stochastic variants).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .convnet import FeatureExtractor, FeatureTap, infer
from .errors import ConfigError, ShapeError, TrainingError, ValidationError
from .preprocess import Sample, SampleStore, TaskId, stacked
from .seeding import rng_from


class Modality(Enum):
    AMP = "amp"
    PHD = "phd"
    BOTH = "both"

    @classmethod
    def parse(cls, value: "Modality | str") -> "Modality":
        if isinstance(value, Modality):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ConfigError(f"unknown modality {value!r}") from None


class ClassifierKind(Enum):
    LR = "lr"
    LINEAR_SVM = "svm"
    NEAREST_NEIGHBOR = "nn"

    @classmethod
    def parse(cls, value: "ClassifierKind | str") -> "ClassifierKind":
        if isinstance(value, ClassifierKind):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ConfigError(f"unknown classifier kind {value!r}") from None


@dataclass(frozen=True)
class ClassifierConfig:
    kind: ClassifierKind = ClassifierKind.LR
    learning_rate: float = 1.0
    max_iters: int = 1000
    grad_tol: float = 1e-6
    l2_strength: float = 1.0
    duplication_factor: int = 5
    k_neighbors: int = 1
    standardize: bool = False  # off: taps feed the classifier directly
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ClassifierKind.parse(self.kind))
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.duplication_factor < 1:
            raise ConfigError("duplication_factor must be >= 1")
        if self.k_neighbors < 1:
            raise ConfigError("k_neighbors must be >= 1")


@dataclass(frozen=True)
class Episode:
    """k-shot support and query split of one target task."""

    support: tuple[Sample, ...]
    query: tuple[Sample, ...]
    task_id: TaskId
    k: int
    seed: int
    support_indices: np.ndarray  # indices into the task's sample list
    query_indices: np.ndarray

    def __post_init__(self):
        counts = {}
        for s in self.support:
            counts[s.label] = counts.get(s.label, 0) + 1
        if counts and set(counts.values()) != {self.k}:
            raise ValidationError(f"support histogram is not exactly {self.k} per class: {counts}")
        if set(self.support_indices) & set(self.query_indices):
            raise ValidationError("support and query overlap")


@dataclass(frozen=True)
class FeatureMatrix:
    rows: np.ndarray  # [n, d] float32
    labels: np.ndarray  # [n] int64
    tap: FeatureTap
    modality: Modality

    def __post_init__(self):
        if len(self.rows) != len(self.labels):
            raise ValidationError(f"{len(self.rows)} rows vs {len(self.labels)} labels")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def sample_episode(store: SampleStore, task_id: TaskId, k: int, q: int, seed: int) -> Episode:
    """Uniform per-class sampling without replacement; deterministic given
    (store ordering, seed)."""
    samples = store.get_task(task_id)
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    rng = rng_from(seed, "episode")
    support_idx, query_idx = [], []
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        if len(idx) < k + q:
            raise ValidationError(
                f"class {label} in task {task_id[0]} has only "
                f"{len(idx)} samples, need k+q = {k + q}"
            )
        idx = idx[rng.permutation(len(idx))]
        support_idx.extend(idx[:k])
        query_idx.extend(idx[k : k + q])
    support_idx = np.array(support_idx, dtype=np.int64)
    query_idx = np.array(query_idx, dtype=np.int64)
    return Episode(
        support=tuple(samples[i] for i in support_idx),
        query=tuple(samples[i] for i in query_idx),
        task_id=task_id,
        k=k,
        seed=seed,
        support_indices=support_idx,
        query_indices=query_idx,
    )


def extract_features(
    extractor: FeatureExtractor,
    samples: list[Sample],
    tap: FeatureTap | str = FeatureTap.CNN2,
    modality: Modality | str = Modality.BOTH,
    duplication_factor: int = 1,
) -> FeatureMatrix:
    """Inference-mode features; [amp || phd] concatenation for ``both``;
    each row (and its label) repeated ``duplication_factor`` times
    consecutively."""
    tap = FeatureTap.parse(tap)
    modality = Modality.parse(modality)
    if duplication_factor < 1:
        raise ConfigError("duplication_factor must be >= 1")
    amp, phd, labels = stacked(samples)
    parts = []
    if modality in (Modality.AMP, Modality.BOTH):
        parts.append(infer(extractor.amp, amp, tap=tap))
    if modality in (Modality.PHD, Modality.BOTH):
        parts.append(infer(extractor.phd, phd, tap=tap))
    rows = np.concatenate(parts, axis=1).astype(np.float32)
    rows = np.repeat(rows, duplication_factor, axis=0)
    labels = np.repeat(labels, duplication_factor, axis=0)
    return FeatureMatrix(rows=rows, labels=labels, tap=tap, modality=modality)


def raw_feature_matrix(samples: list[Sample], duplication_factor: int = 1) -> FeatureMatrix:
    """Flattened preprocessed tensors [amp || phd] without any extractor."""
    amp, phd, labels = stacked(samples)
    rows = np.concatenate([amp.reshape(len(amp), -1), phd.reshape(len(phd), -1)], axis=1)
    rows = np.repeat(rows.astype(np.float32), duplication_factor, axis=0)
    labels = np.repeat(labels, duplication_factor, axis=0)
    return FeatureMatrix(rows=rows, labels=labels, tap=FeatureTap.FC, modality=Modality.BOTH)


def _dedup_rows(rows: np.ndarray, labels: np.ndarray):
    """Fold exact duplicate (row, label) pairs into multiplicity weights.

    Sorting inside np.unique fixes the summation order, so training on a
    matrix and on its row-duplicated copy is bit-identical.
    """
    combined = np.column_stack([rows.astype(np.float64), labels.astype(np.float64)])
    uniq, counts = np.unique(combined, axis=0, return_counts=True)
    return uniq[:, :-1], uniq[:, -1].astype(np.int64), counts.astype(np.float64)


@dataclass
class LinearModelState:
    weights: np.ndarray  # [d, C]
    bias: np.ndarray  # [C]
    classes: np.ndarray  # [C] original label values
    loss_history: list[float] = field(default_factory=list)
    iterations: int = 0
    mean: np.ndarray | None = None
    std: np.ndarray | None = None


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class _LinearClassifier:
    """Shared full-batch gradient-descent scaffold for LR and linear SVM.

    Objective: weighted mean of the per-row loss plus (l2/n) * ||W||^2
    with the bias unregularized and n the number of distinct rows.
    Weights start at zero; training stops when the gradient norm reaches
    ``grad_tol`` or after ``max_iters`` iterations. Deterministic given
    inputs.
    """

    def __init__(self, cfg: ClassifierConfig):
        self.cfg = cfg
        self.state: LinearModelState | None = None

    def _loss_and_grad(self, z, y_idx, w_norm):
        raise NotImplementedError

    def fit(self, rows: np.ndarray, labels: np.ndarray):
        rows, labels = _check_training_inputs(rows, labels)
        mean = std = None
        if self.cfg.standardize:
            mean = rows.mean(axis=0)
            std = rows.std(axis=0) + 1e-8
            rows = (rows - mean) / std
        x, y, counts = _dedup_rows(rows, labels)
        classes = np.unique(y)
        y_idx = np.searchsorted(classes, y)
        n, d = x.shape
        w_norm = counts / counts.sum()

        weights = np.zeros((d, len(classes)))
        bias = np.zeros(len(classes))
        history = []
        eta = self.cfg.learning_rate
        l2 = self.cfg.l2_strength
        it = 0
        for it in range(1, self.cfg.max_iters + 1):
            z = x @ weights + bias
            data_loss, delta = self._loss_and_grad(z, y_idx, w_norm)
            history.append(data_loss + (l2 / n) * float((weights**2).sum()))
            g_w = x.T @ delta + (2.0 * l2 / n) * weights
            g_b = delta.sum(axis=0)
            gnorm = np.sqrt((g_w**2).sum() + (g_b**2).sum())
            if gnorm <= self.cfg.grad_tol:
                break
            weights -= eta * g_w
            bias -= eta * g_b
        self.state = LinearModelState(
            weights=weights, bias=bias, classes=classes, loss_history=history, iterations=it,
            mean=mean, std=std,
        )
        return self

    def decision_values(self, rows: np.ndarray) -> np.ndarray:
        st = _check_fitted(self, rows)
        rows = np.asarray(rows, dtype=np.float64)
        if st.mean is not None:
            rows = (rows - st.mean) / st.std
        return rows @ st.weights + st.bias

    def predict(self, rows: np.ndarray) -> np.ndarray:
        values = self.decision_values(rows)
        return self.state.classes[np.argmax(values, axis=1)]


class LRClassifier(_LinearClassifier):
    """Multinomial logistic regression: weighted mean cross-entropy."""

    kind = ClassifierKind.LR

    def _loss_and_grad(self, z, y_idx, w_norm):
        n = len(z)
        logp = _log_softmax(z)
        p = np.exp(logp)
        loss = -(w_norm * logp[np.arange(n), y_idx]).sum()
        onehot = np.zeros_like(z)
        onehot[np.arange(n), y_idx] = 1.0
        return loss, (p - onehot) * w_norm[:, None]

    def predict_proba(self, rows: np.ndarray) -> np.ndarray:
        return _softmax(self.decision_values(rows))


class LinearSVMClassifier(_LinearClassifier):
    """One-vs-rest linear SVM: weighted mean hinge loss."""

    kind = ClassifierKind.LINEAR_SVM

    def _loss_and_grad(self, z, y_idx, w_norm):
        sign = np.where(np.arange(z.shape[1])[None, :] == y_idx[:, None], 1.0, -1.0)
        margins = 1.0 - sign * z
        loss = (w_norm[:, None] * np.maximum(margins, 0.0)).sum()
        delta = -sign * (margins > 0) * w_norm[:, None]
        return loss, delta


class NearestNeighborClassifier:
    """Euclidean k-NN with majority vote, smallest-label tie-break."""

    kind = ClassifierKind.NEAREST_NEIGHBOR

    def __init__(self, cfg: ClassifierConfig):
        self.cfg = cfg
        self.rows: np.ndarray | None = None
        self.labels: np.ndarray | None = None

    def fit(self, rows: np.ndarray, labels: np.ndarray) -> "NearestNeighborClassifier":
        rows, labels = _check_training_inputs(rows, labels)
        self.rows = rows.astype(np.float64)
        self.labels = labels
        return self

    def predict(self, rows: np.ndarray) -> np.ndarray:
        if self.rows is None:
            raise TrainingError("classifier is not fitted")
        if rows.shape[1] != self.rows.shape[1]:
            raise ShapeError(f"query dim {rows.shape[1]} != training dim {self.rows.shape[1]}")
        d2 = ((rows.astype(np.float64)[:, None, :] - self.rows[None]) ** 2).sum(-1)
        k = min(self.cfg.k_neighbors, len(self.rows))
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        votes = self.labels[order]  # [nq, k]
        preds = np.empty(len(rows), dtype=np.int64)
        for i, row_votes in enumerate(votes):
            values, counts = np.unique(row_votes, return_counts=True)
            preds[i] = values[np.argmax(counts)]  # ties -> smallest label (values sorted)
        return preds


Classifier = LRClassifier | LinearSVMClassifier | NearestNeighborClassifier


def _check_training_inputs(rows: np.ndarray, labels: np.ndarray):
    rows = np.asarray(rows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isfinite(rows)):
        raise ValidationError("features contain non-finite values")
    if len(np.unique(labels)) < 2:
        raise TrainingError("classifier training needs at least two distinct labels")
    return rows, labels


def _check_fitted(clf, rows: np.ndarray) -> LinearModelState:
    if clf.state is None:
        raise TrainingError("classifier is not fitted")
    if rows.shape[1] != clf.state.weights.shape[0]:
        raise ShapeError(
            f"query dim {rows.shape[1]} != training dim {clf.state.weights.shape[0]}"
        )
    return clf.state


def train_classifier(features: FeatureMatrix, cfg: ClassifierConfig) -> Classifier:
    """Fit the configured classifier on a feature matrix."""
    cls = {
        ClassifierKind.LR: LRClassifier,
        ClassifierKind.LINEAR_SVM: LinearSVMClassifier,
        ClassifierKind.NEAREST_NEIGHBOR: NearestNeighborClassifier,
    }[ClassifierKind.parse(cfg.kind)]
    return cls(cfg).fit(features.rows, features.labels)


def classify(classifier: Classifier, query: FeatureMatrix):
    """(predicted labels, per-class probabilities or None).

    LR probabilities are softmax rows; predictions take the smallest
    class index on exact ties (argmax convention).
    """
    preds = classifier.predict(query.rows)
    proba = classifier.predict_proba(query.rows) if isinstance(classifier, LRClassifier) else None
    return preds, proba


def export_classifier(classifier: Classifier, features: FeatureMatrix, path: str | Path) -> Path:
    """Serialize a fitted classifier next to its feature-space metadata."""
    path = Path(path)
    doc = {
        "kind": classifier.kind.value,
        "tap": features.tap.value,
        "modality": features.modality.value,
        "dim": features.dim,
        "config": {**asdict(classifier.cfg), "kind": classifier.cfg.kind.value},
    }
    if isinstance(classifier, NearestNeighborClassifier):
        doc["rows"] = classifier.rows.tolist()
        doc["labels"] = classifier.labels.tolist()
    else:
        st = classifier.state
        doc["weights"] = st.weights.tolist()
        doc["bias"] = st.bias.tolist()
        doc["classes"] = st.classes.tolist()
    path.write_text(json.dumps(doc) + "\n")
    return path
