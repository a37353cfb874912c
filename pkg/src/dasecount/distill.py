"""Born-again knowledge distillation of the feature extractor.

Each generation trains a freshly initialized student of identical
architecture against a weighted sum of the hard-label cross-entropy and
the KL divergence from the previous generation's softened outputs:

    loss = alpha * CE(student, labels) + (1 - alpha) * KL(teacher || student)

The teacher is frozen, so its outputs are computed once per sample and
cached. The KL branch is evaluated in float64: the alpha=1 degenerate
case must match plain cross-entropy and KL(p||p) must vanish to within
1e-9, which float32 log/softmax round-off cannot guarantee.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .convnet import (
    CnnSubmodel,
    FeatureExtractor,
    _maybe_compile,
    _to_input,
    evaluate_combined,
    infer,
    load_checkpoint,
    save_checkpoint,
    stratified_split,
)
from .errors import ConfigError, DivergenceError, ValidationError
from .preprocess import SampleStore, stacked
from .seeding import derive_seed, rng_from

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.5
    generations: int = 6
    batch_size: int = 100
    epochs: int = 100
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    temperature: float = 1.0
    seed: int = 0
    compile_model: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if self.generations < 1:
            raise ConfigError("generations must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


def distill_loss(
    student_logits: torch.Tensor,
    teacher_probs: torch.Tensor,
    labels: torch.Tensor,
    alpha: float,
    temperature: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, ce, kl); KL(p_teacher || p_student) with both softmaxes at
    the given temperature, mean over the batch, computed in float64."""
    ce = nn.functional.cross_entropy(student_logits, labels).double()
    log_q = nn.functional.log_softmax(student_logits.double() / temperature, dim=1)
    p = teacher_probs.double()
    kl = (torch.special.xlogy(p, p) - p * log_q).sum(dim=1).mean()
    return alpha * ce + (1.0 - alpha) * kl, ce, kl


def teacher_soft_labels(teacher: CnnSubmodel, x: np.ndarray, temperature: float) -> torch.Tensor:
    """Teacher probabilities at the configured temperature, cached once."""
    logits = infer(teacher, x).astype(np.float64)
    z = logits / temperature
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return torch.from_numpy(e / e.sum(axis=1, keepdims=True))


def distill_step(
    teacher: CnnSubmodel,
    x_train: np.ndarray,
    y_train: np.ndarray,
    cfg: DistillConfig,
    seed: int,
) -> CnnSubmodel:
    """Train one born-again student against a frozen teacher.

    The student is freshly initialized from ``seed`` (not a copy of the
    teacher) and optimized with plain SGD plus the configured weight
    decay.
    """
    if len(x_train) == 0:
        raise ValidationError("distillation training set is empty")
    teacher.eval()
    soft = teacher_soft_labels(teacher, x_train, cfg.temperature)

    student = CnnSubmodel(
        c_in=teacher.c_in,
        num_classes=teacher.num_classes,
        seed=seed,
        input_hw=teacher.input_hw,
        channels=teacher.channels,
        pools=teacher.pools,
    ).to(memory_format=torch.channels_last)
    step_model = _maybe_compile(student, cfg.compile_model)
    opt = torch.optim.SGD(student.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    y_all = torch.from_numpy(np.asarray(y_train, dtype=np.int64))
    n = len(x_train)
    for epoch in range(cfg.epochs):
        student.train()
        perm = rng_from(seed, "epoch", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            xb = _to_input(x_train[sel])
            opt.zero_grad(set_to_none=True)
            logits = step_model(xb)
            loss, _, kl = distill_loss(logits, soft[sel], y_all[sel], cfg.alpha, cfg.temperature)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite distillation loss at epoch {epoch}")
            if kl.detach().item() < -1e-9:
                raise DivergenceError(f"negative KL term {kl.detach().item()} at epoch {epoch}")
            loss.backward()
            opt.step()
    student.eval()
    return student


@dataclass
class DistillLineage:
    """Generations 0..K of the extractor with their validation accuracies."""

    models: list[FeatureExtractor]
    val_accuracy: list[dict]  # per generation: {"amp", "phd", "combined"}
    chosen: int = 0
    config: DistillConfig | None = None

    def __post_init__(self):
        for g, model in enumerate(self.models):
            if model.generation != g:
                raise ValidationError(f"lineage model at index {g} reports generation {model.generation}")
        if not 0 <= self.chosen < len(self.models):
            raise ValidationError(f"chosen generation {self.chosen} outside lineage 0..{len(self.models) - 1}")


def _submodel_accuracy(model: CnnSubmodel, x: np.ndarray, y: np.ndarray) -> float:
    return float((infer(model, x).argmax(axis=1) == y).mean())


def distill_lineage(
    gen0: FeatureExtractor,
    train_set: SampleStore,
    cfg: DistillConfig,
    split_seed: int | None = None,
    val_fraction: float = 0.1,
) -> DistillLineage:
    """Iteratively distill both submodels K times, teacher = previous
    generation; records per-generation validation accuracies.

    ``split_seed`` should be the extractor-training seed so the same
    stratified train/validation split is reused.
    """
    samples = train_set.all_samples()
    amp, phd, labels = stacked(samples)
    split_seed = cfg.seed if split_seed is None else split_seed
    train_idx, val_idx = stratified_split(labels, val_fraction, split_seed)
    xa_tr, xp_tr, y_tr = amp[train_idx], phd[train_idx], labels[train_idx]
    val_samples = [samples[i] for i in val_idx]

    def gen_accuracy(model: FeatureExtractor) -> dict:
        return {
            "amp": _submodel_accuracy(model.amp, amp[val_idx], labels[val_idx]),
            "phd": _submodel_accuracy(model.phd, phd[val_idx], labels[val_idx]),
            "combined": evaluate_combined(model, val_samples),
        }

    models = [gen0]
    accuracies = [gen_accuracy(gen0)]
    for k in range(1, cfg.generations + 1):
        teacher = models[-1]
        try:
            amp_student = distill_step(
                teacher.amp, xa_tr, y_tr, cfg, seed=derive_seed(cfg.seed, "amp", "gen", k)
            )
            phd_student = distill_step(
                teacher.phd, xp_tr, y_tr, cfg, seed=derive_seed(cfg.seed, "phd", "gen", k)
            )
        except DivergenceError as exc:
            raise DivergenceError(f"generation {k}: {exc}") from exc
        student = FeatureExtractor(amp=amp_student, phd=phd_student, generation=k).eval_()
        models.append(student)
        accuracies.append(gen_accuracy(student))
        log.info("generation %d: val %s", k, accuracies[-1])

    chosen = _argmax_combined(accuracies)
    return DistillLineage(models=models, val_accuracy=accuracies, chosen=chosen, config=cfg)


def _argmax_combined(accuracies: list[dict]) -> int:
    best, best_acc = 0, -1.0
    for g, acc in enumerate(accuracies):
        if acc["combined"] > best_acc:  # strict: ties keep the smaller index
            best, best_acc = g, acc["combined"]
    return best


def select_generation(lineage: DistillLineage, criterion: str | int = "source_val") -> FeatureExtractor:
    """Pick the deployed extractor: highest combined source-validation
    accuracy (ties -> smallest generation), or an explicit index."""
    if not lineage.models:
        raise ValidationError("empty lineage")
    if criterion == "source_val":
        lineage.chosen = _argmax_combined(lineage.val_accuracy)
    elif isinstance(criterion, int):
        if not 0 <= criterion < len(lineage.models):
            raise ValidationError(
                f"explicit generation {criterion} out of range 0..{len(lineage.models) - 1}"
            )
        lineage.chosen = criterion
    else:
        raise ConfigError(f"unknown selection criterion {criterion!r}")
    return lineage.models[lineage.chosen]


LINEAGE_INDEX = "lineage.json"


def save_lineage(lineage: DistillLineage, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for g, model in enumerate(lineage.models):
        save_checkpoint(model, directory / f"gen{g}.ckpt")
    doc = {
        "generations": len(lineage.models) - 1,
        "val_accuracy": lineage.val_accuracy,
        "chosen": lineage.chosen,
        "config": asdict(lineage.config) if lineage.config else None,
    }
    out = directory / LINEAGE_INDEX
    out.write_text(json.dumps(doc, indent=2) + "\n")
    return out


def load_lineage(directory: str | Path) -> DistillLineage:
    directory = Path(directory)
    index = directory / LINEAGE_INDEX
    if not index.is_file():
        raise ValidationError(f"no {LINEAGE_INDEX} in {directory}")
    doc = json.loads(index.read_text())
    models = []
    for g in range(doc["generations"] + 1):
        extractor, _ = load_checkpoint(directory / f"gen{g}.ckpt")
        models.append(extractor)
    cfg = DistillConfig(**doc["config"]) if doc.get("config") else None
    return DistillLineage(
        models=models, val_accuracy=doc["val_accuracy"], chosen=doc["chosen"], config=cfg
    )
