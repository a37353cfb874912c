"""Dual-submodel CNN feature extractor: architecture, training, taps.

Each submodel is six convolutional blocks (64 3x3 kernels, stride 1,
zero padding 1; batch norm; ReLU; max pool -- 4x2 in the first block,
2x2 afterwards, floor division on odd extents) followed by one fully
connected layer sized to the class count. Amplitude and phase-difference
submodels share the structure but never share weights; they are trained
independently on the same labels.

Feature taps expose intermediate activations for few-shot transfer:
``CNN2`` is the flattened output of the penultimate block (64*3*3 = 576
values at the default 200x114 input), ``CNN1`` the flattened final block
(64 values), ``FC`` the logits.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DivergenceError, ShapeError, TrainingError, ValidationError
from .preprocess import Sample, SampleStore, stacked
from .seeding import derive_seed, rng_from

log = logging.getLogger(__name__)

DEFAULT_CHANNELS = 64
DEFAULT_POOLS = ((4, 2), (2, 2), (2, 2), (2, 2), (2, 2), (2, 2))
DEFAULT_INPUT_HW = (200, 114)
EVAL_BATCH = 64


class FeatureTap(Enum):
    FC = "fc"
    CNN1 = "cnn1"
    CNN2 = "cnn2"

    @classmethod
    def parse(cls, value: "FeatureTap | str") -> "FeatureTap":
        if isinstance(value, FeatureTap):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ConfigError(f"unknown feature tap {value!r}") from None


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 30
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.1
    seed: int = 0
    compile_model: bool = False  # torch.compile the training step (same math, faster on CPU)
    val_curve: bool = True  # evaluate validation accuracy every epoch, not only at the end

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


def pooled_shape(input_hw: tuple[int, int], pools) -> list[tuple[int, int]]:
    """Spatial size after each block (floor division by the pool kernel)."""
    h, w = input_hw
    chain = []
    for ph, pw in pools:
        h, w = h // ph, w // pw
        chain.append((h, w))
    return chain


class CnnSubmodel(nn.Module):
    """One CNN stack; construction is deterministic given the seed."""

    def __init__(
        self,
        c_in: int,
        num_classes: int,
        seed: int = 0,
        input_hw: tuple[int, int] = DEFAULT_INPUT_HW,
        channels: int = DEFAULT_CHANNELS,
        pools=DEFAULT_POOLS,
    ):
        if c_in < 1:
            raise ConfigError("c_in must be >= 1")
        if num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        super().__init__()
        self.c_in = c_in
        self.num_classes = num_classes
        self.input_hw = tuple(input_hw)
        self.channels = channels
        self.pools = tuple(tuple(p) for p in pools)

        chain = pooled_shape(self.input_hw, self.pools)
        if any(h < 1 or w < 1 for h, w in chain):
            raise ShapeError(
                f"input {self.input_hw} collapses to zero in the pooling chain {chain}"
            )
        self.spatial_chain = chain

        blocks = []
        prev = c_in
        for ph, pw in self.pools:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(prev, channels, kernel_size=3, stride=1, padding=1),
                    nn.BatchNorm2d(channels),
                    nn.ReLU(),
                    nn.MaxPool2d((ph, pw)),
                )
            )
            prev = channels
        self.blocks = nn.ModuleList(blocks)
        fh, fw = chain[-1]
        self.fc = nn.Linear(channels * fh * fw, num_classes)
        self._init_weights(seed)

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(derive_seed(seed, "weights") % 2**63)
        with torch.no_grad():
            for block in self.blocks:
                conv, bn = block[0], block[1]
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                conv.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                conv.bias.zero_()
                bn.weight.fill_(1.0)
                bn.bias.zero_()
            self.fc.weight.normal_(0.0, (2.0 / self.fc.in_features) ** 0.5, generator=gen)
            self.fc.bias.zero_()

    def arch_fingerprint(self) -> dict:
        return {
            "c_in": self.c_in,
            "num_classes": self.num_classes,
            "input_hw": list(self.input_hw),
            "channels": self.channels,
            "pools": [list(p) for p in self.pools],
        }

    def arch_hash(self) -> str:
        doc = json.dumps(self.arch_fingerprint(), sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def _check_input(self, x: torch.Tensor):
        if x.ndim != 4 or x.shape[1] != self.c_in or tuple(x.shape[2:]) != self.input_hw:
            raise ShapeError(
                f"expected input [B, {self.c_in}, {self.input_hw[0]}, {self.input_hw[1]}], "
                f"got {tuple(x.shape)}"
            )

    def forward(self, x: torch.Tensor, tap: FeatureTap | None = None) -> torch.Tensor:
        """Logits by default; an intermediate activation when a tap is given.

        CNN2 is the flattened output of the penultimate block, CNN1 of the
        final block; the FC tap equals the logits.
        """
        self._check_input(x)
        if tap is not None:
            tap = FeatureTap.parse(tap)
            if tap is FeatureTap.CNN2 and len(self.blocks) < 2:
                raise ConfigError("CNN2 tap needs at least two blocks")
        for i, block in enumerate(self.blocks):
            x = block(x)
            if tap is FeatureTap.CNN2 and i == len(self.blocks) - 2:
                return torch.flatten(x, 1)
        last = torch.flatten(x, 1)
        if tap is FeatureTap.CNN1:
            return last
        return self.fc(last)  # FC tap and plain logits coincide

    def activations(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """One forward pass capturing every tap (inference helper)."""
        self._check_input(x)
        cnn2 = None
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i == len(self.blocks) - 2:
                cnn2 = torch.flatten(x, 1)
        cnn1 = torch.flatten(x, 1)
        return {"cnn2": cnn2, "cnn1": cnn1, "logits": self.fc(cnn1)}


def build_submodel(
    c_in: int, num_classes: int, seed: int = 0, input_hw: tuple[int, int] = DEFAULT_INPUT_HW
) -> CnnSubmodel:
    """Paper-default architecture for the given channel/class counts."""
    return CnnSubmodel(c_in=c_in, num_classes=num_classes, seed=seed, input_hw=input_hw)


def parameter_count_formula(c_in: int, num_classes: int, channels: int = DEFAULT_CHANNELS, n_blocks: int = 6) -> int:
    """Closed-form trainable-parameter count of the default architecture."""
    conv1 = c_in * channels * 9 + channels
    convs = (n_blocks - 1) * (channels * channels * 9 + channels)
    bns = n_blocks * 2 * channels
    fc = channels * num_classes + num_classes
    return conv1 + convs + bns + fc


@dataclass
class FeatureExtractor:
    """Frozen pair of submodels used for both classification and feature taps."""

    amp: CnnSubmodel
    phd: CnnSubmodel
    generation: int = 0

    def __post_init__(self):
        if self.amp.num_classes != self.phd.num_classes:
            raise ConfigError(
                f"submodels disagree on num_classes: {self.amp.num_classes} vs {self.phd.num_classes}"
            )
        if self.generation < 0:
            raise ConfigError("generation must be >= 0")

    @property
    def num_classes(self) -> int:
        return self.amp.num_classes

    def submodel(self, which: str) -> CnnSubmodel:
        if which not in ("amp", "phd"):
            raise ConfigError(f"submodel must be 'amp' or 'phd', got {which!r}")
        return self.amp if which == "amp" else self.phd

    def eval_(self) -> "FeatureExtractor":
        self.amp.eval()
        self.phd.eval()
        return self


@dataclass
class SubmodelCurves:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    final_val_acc: float = float("nan")


def _to_input(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).to(
        memory_format=torch.channels_last
    )


def infer(model: CnnSubmodel, x: np.ndarray, tap: FeatureTap | None = None, batch: int = EVAL_BATCH) -> np.ndarray:
    """Batched inference-mode forward; pure function of (weights, input)."""
    was_training = model.training
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, len(x), batch):
            xb = _to_input(x[start : start + batch])
            outs.append(model(xb, tap=tap).numpy())
    if was_training:
        model.train()
    return np.concatenate(outs, axis=0) if outs else np.empty((0,), dtype=np.float32)


def predict_proba(model: CnnSubmodel, x: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    logits = infer(model, x, tap=None, batch=batch).astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def stratified_split(labels: np.ndarray, val_fraction: float, seed: int):
    """Per-class 9:1-style split; every class appears in validation when
    it has at least two samples."""
    labels = np.asarray(labels)
    train_idx, val_idx = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        perm = rng_from(seed, "split", int(cls)).permutation(len(idx))
        idx = idx[perm]
        n_val = int(round(val_fraction * len(idx)))
        n_val = min(max(n_val, 1), len(idx) - 1) if len(idx) >= 2 else 0
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return np.sort(np.array(train_idx, dtype=np.int64)), np.sort(np.array(val_idx, dtype=np.int64))


def _accuracy_from_logits(logits: torch.Tensor, y: torch.Tensor) -> float:
    return float((logits.argmax(dim=1) == y).double().mean())


def _maybe_compile(model: nn.Module, enabled: bool):
    if not enabled:
        return model
    try:
        return torch.compile(model)
    except Exception as exc:  # pragma: no cover - depends on toolchain
        log.warning("torch.compile unavailable (%s); training eagerly", exc)
        return model


def train_submodel(
    model: CnnSubmodel,
    x_train: np.ndarray,
    y_train: np.ndarray,
    cfg: TrainConfig,
    stream: str,
    x_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
) -> SubmodelCurves:
    """Minibatch cross-entropy with Adam; single logical thread, reproducible.

    The per-epoch shuffle order derives from (cfg.seed, stream, epoch), so
    one config seed pins the entire optimization trajectory.
    """
    model = model.to(memory_format=torch.channels_last)
    step_model = _maybe_compile(model, cfg.compile_model)
    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps
    )
    loss_fn = nn.CrossEntropyLoss()
    y_all = torch.from_numpy(np.asarray(y_train, dtype=np.int64))
    curves = SubmodelCurves()
    n = len(x_train)
    for epoch in range(cfg.epochs):
        model.train()
        perm = rng_from(cfg.seed, stream, "epoch", epoch).permutation(n)
        epoch_loss, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            xb = _to_input(x_train[sel])
            yb = y_all[sel]
            opt.zero_grad(set_to_none=True)
            logits = step_model(xb)
            loss = loss_fn(logits, yb)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss in stream '{stream}' at epoch {epoch}")
            loss.backward()
            opt.step()
            epoch_loss += loss.detach().item() * len(sel)
            correct += int((logits.argmax(dim=1) == yb).sum())
        curves.train_loss.append(epoch_loss / n)
        curves.train_acc.append(correct / n)
        if cfg.val_curve and x_val is not None and len(x_val):
            curves.val_acc.append(_np_accuracy(model, x_val, y_val))
    if x_val is not None and len(x_val):
        curves.final_val_acc = _np_accuracy(model, x_val, y_val)
    return curves


def _np_accuracy(model: CnnSubmodel, x: np.ndarray, y: np.ndarray) -> float:
    logits = infer(model, x)
    return float((logits.argmax(axis=1) == np.asarray(y)).mean())


def count_loss_violations(losses: list[float], start: int = 3, rel_tol: float = 0.01) -> int:
    """Epochs (after ``start``) where the loss rises materially.

    A rise counts only when it exceeds ``rel_tol`` of the initial loss;
    minibatch jitter at a converged floor is not a violation.
    """
    if len(losses) <= start + 1:
        return 0
    threshold = rel_tol * max(abs(losses[0]), 1e-12)
    return sum(
        1 for i in range(start, len(losses) - 1) if losses[i + 1] > losses[i] + threshold
    )


def train_extractor(
    train_set: SampleStore | list[Sample], cfg: TrainConfig, num_classes: int | None = None
) -> tuple[FeatureExtractor, dict[str, SubmodelCurves]]:
    """Train generation-0 amplitude and phase-difference submodels.

    The merged multi-task sample set is split stratified-by-class into
    train/validation using ``cfg.seed``; the two submodels are trained
    independently with identical hyperparameters.
    """
    if isinstance(train_set, SampleStore):
        samples = train_set.all_samples()
        num_classes = train_set.num_classes
    else:
        samples = list(train_set)
        if num_classes is None:
            num_classes = int(max(s.label for s in samples)) + 1 if samples else 0
    if not samples:
        raise TrainingError("empty training set")
    amp, phd, labels = stacked(samples)
    if len(np.unique(labels)) < 2:
        raise TrainingError("training needs at least two classes")

    train_idx, val_idx = stratified_split(labels, cfg.val_fraction, cfg.seed)
    input_hw = amp.shape[2], amp.shape[3]
    amp_model = build_submodel(amp.shape[1], num_classes, seed=derive_seed(cfg.seed, "amp-init"), input_hw=input_hw)
    phd_model = build_submodel(phd.shape[1], num_classes, seed=derive_seed(cfg.seed, "phd-init"), input_hw=input_hw)

    curves = {
        "amp": train_submodel(
            amp_model, amp[train_idx], labels[train_idx], cfg, "amp",
            amp[val_idx], labels[val_idx],
        ),
        "phd": train_submodel(
            phd_model, phd[train_idx], labels[train_idx], cfg, "phd",
            phd[val_idx], labels[val_idx],
        ),
    }
    extractor = FeatureExtractor(amp=amp_model, phd=phd_model, generation=0).eval_()
    return extractor, curves


def evaluate(extractor: FeatureExtractor, eval_set, which: str) -> float:
    """Fraction of samples whose argmax logit matches the label (inference mode)."""
    samples = eval_set.all_samples() if isinstance(eval_set, SampleStore) else list(eval_set)
    if not samples:
        raise ValidationError("evaluation set is empty")
    amp, phd, labels = stacked(samples)
    x = amp if which == "amp" else phd
    model = extractor.submodel(which)
    return _np_accuracy(model, x, labels)


def evaluate_combined(extractor: FeatureExtractor, eval_set) -> float:
    """Ensemble accuracy: argmax of the mean of the submodel softmaxes."""
    samples = eval_set.all_samples() if isinstance(eval_set, SampleStore) else list(eval_set)
    if not samples:
        raise ValidationError("evaluation set is empty")
    amp, phd, labels = stacked(samples)
    proba = (predict_proba(extractor.amp, amp) + predict_proba(extractor.phd, phd)) / 2
    return float((proba.argmax(axis=1) == labels).mean())


CHECKPOINT_FORMAT = "dasecount-extractor-v1"


def save_checkpoint(
    extractor: FeatureExtractor, path: str | Path, train_config: TrainConfig | None = None, extra: dict | None = None
) -> Path:
    """Checkpoint container: architecture fingerprint, generation, training
    config, weights including batch-norm running statistics."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "fingerprint": {
            "amp": extractor.amp.arch_fingerprint(),
            "phd": extractor.phd.arch_fingerprint(),
            "amp_hash": extractor.amp.arch_hash(),
            "phd_hash": extractor.phd.arch_hash(),
        },
        "generation": extractor.generation,
        "train_config": asdict(train_config) if train_config else None,
        "amp_state": extractor.amp.state_dict(),
        "phd_state": extractor.phd.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[FeatureExtractor, dict]:
    """Rebuild an extractor from a checkpoint, verifying the fingerprint."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"no such checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    fp = payload["fingerprint"]
    models = {}
    for which in ("amp", "phd"):
        spec = fp[which]
        model = CnnSubmodel(
            c_in=spec["c_in"],
            num_classes=spec["num_classes"],
            input_hw=tuple(spec["input_hw"]),
            channels=spec["channels"],
            pools=[tuple(p) for p in spec["pools"]],
        )
        if model.arch_hash() != fp[f"{which}_hash"]:
            raise ValidationError(f"{path}: architecture fingerprint mismatch for {which}")
        model.load_state_dict(payload[f"{which}_state"])
        models[which] = model
    extractor = FeatureExtractor(
        amp=models["amp"], phd=models["phd"], generation=payload["generation"]
    ).eval_()
    meta = {"train_config": payload.get("train_config"), "extra": payload.get("extra", {})}
    return extractor, meta
