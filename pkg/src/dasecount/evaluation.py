"""Meta-testing protocols, baselines, and report emission.

A protocol fixes the episode shape (shots, queries per class, repeats)
and the transfer recipe (tap, modality, classifier). Each repeat draws a
fresh episode with a seed hashed from (protocol seed, repeat index),
trains the lightweight classifier on the support features, and scores
the query set. Features are extracted once per task and indexed per
episode; inference-mode forwards are per-sample deterministic, so this
is exactly equivalent to extracting per episode.

Baselines mirror the comparison set: direct transfer of a source
submodel's logits (no target training), logistic regression on raw
flattened tensors, and single-modality variants.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .convnet import FeatureExtractor, FeatureTap
from .errors import ConfigError, DasecountError, IoError, ValidationError
from .fewshot import (
    ClassifierConfig,
    ClassifierKind,
    FeatureMatrix,
    Modality,
    classify,
    extract_features,
    raw_feature_matrix,
    sample_episode,
    train_classifier,
)
from .preprocess import MotionType, SampleStore, TaskId
from .seeding import derive_seed


class BaselineKind(Enum):
    DIRECT_TRANSFER_AMP = "direct_amp"
    DIRECT_TRANSFER_PHD = "direct_phd"
    RAW_LR = "raw_lr"
    AMP_ONLY = "amp_only"
    PHD_ONLY = "phd_only"

    @classmethod
    def parse(cls, value: "BaselineKind | str") -> "BaselineKind":
        if isinstance(value, BaselineKind):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ConfigError(f"unknown baseline kind {value!r}") from None


@dataclass(frozen=True)
class Protocol:
    shots: int = 5
    queries_per_class: int = 20
    repeats: int = 10
    tap: FeatureTap = FeatureTap.CNN2
    modality: Modality = Modality.BOTH
    classifier: ClassifierConfig = ClassifierConfig()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tap", FeatureTap.parse(self.tap))
        object.__setattr__(self, "modality", Modality.parse(self.modality))
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.shots < 1 or self.queries_per_class < 1:
            raise ConfigError("shots and queries_per_class must be >= 1")

    def echo(self) -> dict:
        return {
            "shots": self.shots,
            "queries_per_class": self.queries_per_class,
            "repeats": self.repeats,
            "tap": self.tap.value,
            "modality": self.modality.value,
            "classifier": self.classifier.kind.value,
            "duplication_factor": self.classifier.duplication_factor,
            "seed": self.seed,
        }


@dataclass
class TaskReport:
    task_id: TaskId
    method: str  # "dasecount" or a BaselineKind value
    per_repeat_accuracies: list[float]
    confusion: np.ndarray  # [C, C] mean row-stochastic matrix over `classes`
    protocol: dict
    classes: list[int]  # label values present in the task, sorted

    def __post_init__(self):
        if not self.per_repeat_accuracies:
            raise ValidationError("report needs at least one repeat")
        if self.confusion.shape != (len(self.classes), len(self.classes)):
            raise ValidationError(
                f"confusion shape {self.confusion.shape} does not match {len(self.classes)} classes"
            )
        rowsums = self.confusion.sum(axis=1)
        if np.abs(rowsums - 1.0).max() > 1e-9:
            raise ValidationError(f"confusion rows must sum to 1, got {rowsums}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.per_repeat_accuracies))

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.per_repeat_accuracies))

    @property
    def scenario_id(self) -> str:
        return self.task_id[0]

    @property
    def motion_type(self) -> MotionType:
        return MotionType.parse(self.task_id[1])


def _task_classes(samples) -> np.ndarray:
    return np.array(sorted({s.label for s in samples}), dtype=np.int64)


def _repeat_confusion(y_true: np.ndarray, y_pred: np.ndarray, classes: np.ndarray) -> np.ndarray:
    c = len(classes)
    counts = np.zeros((c, c))
    ti = np.searchsorted(classes, y_true)
    pi = np.searchsorted(classes, y_pred)
    np.add.at(counts, (ti, pi), 1.0)
    rowsums = counts.sum(axis=1)
    if np.any(rowsums == 0):
        raise ValidationError("confusion matrix has a row with zero queries")
    return counts / rowsums[:, None]


def _aggregate(task_id, method, protocol, accs, confusions, classes) -> TaskReport:
    return TaskReport(
        task_id=task_id,
        method=method,
        per_repeat_accuracies=[float(a) for a in accs],
        confusion=np.mean(confusions, axis=0),
        protocol=protocol.echo(),
        classes=[int(c) for c in classes],
    )


def run_metatest(
    extractor: FeatureExtractor,
    target_store: SampleStore,
    task_id: TaskId,
    protocol: Protocol,
    method: str = "dasecount",
) -> TaskReport:
    """Repeated few-shot evaluation of one target task."""
    samples = target_store.get_task(task_id)
    classes = _task_classes(samples)
    cache = extract_features(extractor, samples, protocol.tap, protocol.modality)
    dup = protocol.classifier.duplication_factor
    accs, confusions = [], []
    for r in range(protocol.repeats):
        ep = sample_episode(
            target_store, task_id, protocol.shots, protocol.queries_per_class,
            seed=derive_seed(protocol.seed, r),
        )
        try:
            support = FeatureMatrix(
                rows=np.repeat(cache.rows[ep.support_indices], dup, axis=0),
                labels=np.repeat(cache.labels[ep.support_indices], dup, axis=0),
                tap=cache.tap,
                modality=cache.modality,
            )
            clf = train_classifier(support, protocol.classifier)
            query = FeatureMatrix(
                rows=cache.rows[ep.query_indices],
                labels=cache.labels[ep.query_indices],
                tap=cache.tap,
                modality=cache.modality,
            )
            preds, _ = classify(clf, query)
        except DasecountError as exc:
            raise type(exc)(f"repeat {r}: {exc}") from exc
        accs.append((preds == query.labels).mean())
        confusions.append(_repeat_confusion(query.labels, preds, classes))
    return _aggregate(task_id, method, protocol, accs, confusions, classes)


def run_baseline(
    kind: BaselineKind | str,
    extractor: FeatureExtractor,
    target_store: SampleStore,
    task_id: TaskId,
    protocol: Protocol,
) -> TaskReport:
    """Comparison methods over the same episode draws as run_metatest."""
    kind = BaselineKind.parse(kind)
    if kind is BaselineKind.AMP_ONLY:
        return run_metatest(
            extractor, target_store, task_id, replace(protocol, modality=Modality.AMP),
            method=kind.value,
        )
    if kind is BaselineKind.PHD_ONLY:
        return run_metatest(
            extractor, target_store, task_id, replace(protocol, modality=Modality.PHD),
            method=kind.value,
        )

    samples = target_store.get_task(task_id)
    classes = _task_classes(samples)
    if kind in (BaselineKind.DIRECT_TRANSFER_AMP, BaselineKind.DIRECT_TRANSFER_PHD):
        modality = Modality.AMP if kind is BaselineKind.DIRECT_TRANSFER_AMP else Modality.PHD
        logits = extract_features(extractor, samples, FeatureTap.FC, modality)
        # argmax restricted to the task's candidate labels; a no-op for the
        # standard contiguous 0..M class set
        preds_all = classes[np.argmax(logits.rows[:, classes], axis=1)]
        accs, confusions = [], []
        for r in range(protocol.repeats):
            ep = sample_episode(
                target_store, task_id, protocol.shots, protocol.queries_per_class,
                seed=derive_seed(protocol.seed, r),
            )
            preds = preds_all[ep.query_indices]
            truth = logits.labels[ep.query_indices]
            accs.append((preds == truth).mean())
            confusions.append(_repeat_confusion(truth, preds, classes))
        return _aggregate(task_id, kind.value, protocol, accs, confusions, classes)

    # RAW_LR: logistic regression on flattened preprocessed tensors
    cache = raw_feature_matrix(samples)
    dup = protocol.classifier.duplication_factor
    lr_cfg = replace(protocol.classifier, kind=ClassifierKind.LR)
    accs, confusions = [], []
    for r in range(protocol.repeats):
        ep = sample_episode(
            target_store, task_id, protocol.shots, protocol.queries_per_class,
            seed=derive_seed(protocol.seed, r),
        )
        support = FeatureMatrix(
            rows=np.repeat(cache.rows[ep.support_indices], dup, axis=0),
            labels=np.repeat(cache.labels[ep.support_indices], dup, axis=0),
            tap=cache.tap,
            modality=cache.modality,
        )
        clf = train_classifier(support, lr_cfg)
        preds = clf.predict(cache.rows[ep.query_indices])
        truth = cache.labels[ep.query_indices]
        accs.append((preds == truth).mean())
        confusions.append(_repeat_confusion(truth, preds, classes))
    return _aggregate(task_id, kind.value, protocol, accs, confusions, classes)


def _slug(report: TaskReport) -> str:
    return (
        f"{report.scenario_id}_{report.motion_type.value}_"
        f"{report.protocol['shots']}shot_{report.method}"
    )


def report_to_json(report: TaskReport) -> dict:
    return {
        "task_id": f"{report.scenario_id}:{report.motion_type.value}",
        "scenario_id": report.scenario_id,
        "motion_type": report.motion_type.value,
        "method": report.method,
        "classes": report.classes,
        "per_repeat_accuracies": report.per_repeat_accuracies,
        "mean_accuracy": report.mean_accuracy,
        "std_accuracy": report.std_accuracy,
        "confusion": [[round(v, 12) for v in row] for row in report.confusion.tolist()],
        "protocol": report.protocol,
    }


def report_from_json(doc: dict) -> TaskReport:
    return TaskReport(
        task_id=(doc["scenario_id"], MotionType.parse(doc["motion_type"])),
        method=doc["method"],
        per_repeat_accuracies=doc["per_repeat_accuracies"],
        confusion=np.array(doc["confusion"], dtype=np.float64),
        protocol=doc["protocol"],
        classes=doc["classes"],
    )


def save_task_report(report: TaskReport, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = directory / f"report_{_slug(report)}.json"
    out.write_text(json.dumps(report_to_json(report), indent=2) + "\n")
    return out


def load_task_reports(directory: str | Path) -> list[TaskReport]:
    directory = Path(directory)
    reports = []
    for path in sorted(directory.glob("report_*.json")):
        reports.append(report_from_json(json.loads(path.read_text())))
    if not reports:
        raise ValidationError(f"no report_*.json files in {directory}")
    return reports


def _sort_key(report: TaskReport):
    return (
        f"{report.scenario_id}:{report.motion_type.value}",
        report.protocol["shots"],
        report.method,
    )


def emit_report(reports: list[TaskReport], out_dir: str | Path, formats=("csv", "json")) -> list[Path]:
    """Write summary.csv, per-task confusion CSVs, and summary.json.

    Output bytes are a pure function of the reports: fixed 6-decimal
    formatting, lexicographic task ordering, shots ascending.
    """
    if not reports:
        raise ValidationError("no reports to emit")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise IoError(f"cannot write to {out_dir}: {exc}") from exc

    ordered = sorted(reports, key=_sort_key)
    written: list[Path] = []
    formats = set(formats)

    if "csv" in formats:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["task_id", "motion_type", "shots", "tap", "modality", "classifier",
             "mean_acc", "std_acc", "repeats"]
        )
        for r in ordered:
            writer.writerow(
                [
                    f"{r.scenario_id}:{r.motion_type.value}",
                    r.motion_type.value,
                    r.protocol["shots"],
                    r.protocol["tap"],
                    r.protocol["modality"],
                    r.method if r.method != "dasecount" else r.protocol["classifier"],
                    f"{r.mean_accuracy:.6f}",
                    f"{r.std_accuracy:.6f}",
                    r.protocol["repeats"],
                ]
            )
        path = out_dir / "summary.csv"
        path.write_text(buf.getvalue())
        written.append(path)

        for r in ordered:
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow([f"pred_{c}" for c in r.classes])
            for row in r.confusion:
                writer.writerow([f"{v:.6f}" for v in row])
            path = out_dir / f"confusion_{_slug(r)}.csv"
            path.write_text(buf.getvalue())
            written.append(path)

    if "json" in formats:
        doc = {"reports": [report_to_json(r) for r in ordered]}
        path = out_dir / "summary.json"
        path.write_text(json.dumps(doc, indent=2) + "\n")
        written.append(path)
    return written
