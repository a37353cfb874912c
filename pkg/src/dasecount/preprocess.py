"""Raw CSI to training samples: segmentation, amplitude normalization,
phase unwrap and adjacent-antenna differencing.

The amplitude path keeps the raw magnitudes (no denoising filter; the
high-frequency variation caused by simultaneous movement is the signal,
not noise) and layer-normalizes each antenna pair over its time x
subcarrier plane. The phase path unwraps along the subcarrier axis and
subtracts adjacent receive antennas, which cancels every phase term
shared by the receive chains of one transmit antenna (carrier frequency
offset, sampling time offset).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .csidata import CsiRecording, DatasetManifest, MotionType, load_recording
from .errors import ConfigError, CorruptionError, FormatError, ValidationError

NORM_EPS = 1e-5  # guard for constant-amplitude layers

STORE_MAGIC = b"DSEG1"
_BLOB_HEADER_FMT = "<5s4I"
STORE_INDEX_NAME = "store.json"
STORE_VERSION = 1

TaskId = tuple[str, MotionType]


@dataclass(frozen=True)
class SegmentationConfig:
    tw: int = 200
    ts: int = 50

    def __post_init__(self):
        if not 1 <= self.ts <= self.tw:
            raise ConfigError(f"need 1 <= ts <= tw, got ts={self.ts}, tw={self.tw}")


@dataclass(frozen=True)
class Sample:
    """One preprocessed segment: normalized amplitude, phase difference, label."""

    amp: np.ndarray  # float32 [Nrt, Tw, Nsc]
    phd: np.ndarray  # float32 [Npd, Tw, Nsc]
    label: int
    source: tuple[str, int]  # (recording id, segment index)


def segment_count(t: int, cfg: SegmentationConfig) -> int:
    return (t - cfg.tw) // cfg.ts + 1


def segment(rec_or_tensor, cfg: SegmentationConfig) -> list[np.ndarray]:
    """Sliding windows [Tw, Nr, Nt, Nsc]; window k starts at frame k*ts."""
    data = rec_or_tensor.data if isinstance(rec_or_tensor, CsiRecording) else rec_or_tensor
    t = data.shape[0]
    if t < cfg.tw:
        raise ValidationError(f"recording has {t} frames, shorter than window tw={cfg.tw}")
    n = segment_count(t, cfg)
    return [data[k * cfg.ts : k * cfg.ts + cfg.tw] for k in range(n)]


def amp_pipeline(seg: np.ndarray) -> np.ndarray:
    """Magnitude -> [Nrt, Tw, Nsc] layers -> per-layer normalization.

    Layer l = rx * Nt + tx (rx-major). Each layer is shifted and scaled
    by the mean and population standard deviation of its Tw*Nsc entries,
    with an epsilon-guarded denominator so constant layers map to zero.
    """
    if not np.all(np.isfinite(seg)):
        raise ValidationError("segment contains non-finite values")
    tw, nr, nt, nsc = seg.shape
    mag = np.abs(np.asarray(seg, dtype=np.complex128))
    layers = mag.transpose(1, 2, 0, 3).reshape(nr * nt, tw, nsc)
    mu = layers.mean(axis=(1, 2), keepdims=True)
    sigma = layers.std(axis=(1, 2), keepdims=True)  # population std
    return ((layers - mu) / (sigma + NORM_EPS)).astype(np.float32)


def unwrap_subcarriers(phase: np.ndarray) -> np.ndarray:
    """Correct >pi jumps between adjacent subcarriers (last axis)."""
    return np.unwrap(phase, axis=-1)


def phd_pipeline(seg: np.ndarray) -> np.ndarray:
    """Unwrapped phase differences of adjacent receive antennas.

    Output layer (tx, r) = unwrapped_phase(rx=r+1) - unwrapped_phase(rx=r),
    layers ordered tx-major, giving Nt*(Nr-1) layers. After differencing,
    each (frame, layer) row is shifted by the multiple of 2*pi that puts
    its first subcarrier into (-pi, pi]: the unwrap branch of a row's
    first element depends on phase terms that the difference is meant to
    cancel, and the shift removes that leftover without touching the
    subcarrier-to-subcarrier structure.
    """
    tw, nr, nt, nsc = seg.shape
    if nr < 2:
        raise ConfigError(f"phase differencing needs Nr >= 2, got Nr={nr}")
    if not np.all(np.isfinite(seg)):
        raise ValidationError("segment contains non-finite values")
    phase = np.angle(np.asarray(seg, dtype=np.complex128))  # (-pi, pi]
    unwrapped = unwrap_subcarriers(phase)
    diff = unwrapped[:, 1:, :, :] - unwrapped[:, :-1, :, :]  # [Tw, Nr-1, Nt, Nsc]
    layers = diff.transpose(2, 1, 0, 3).reshape(nt * (nr - 1), tw, nsc)
    first = layers[..., :1]
    shift = 2 * np.pi * np.ceil((first - np.pi) / (2 * np.pi))
    return (layers - shift).astype(np.float32)


class SampleStore:
    """Preprocessed samples grouped by (scenario_id, motion_type) task."""

    def __init__(
        self,
        groups: dict[TaskId, list[Sample]],
        num_classes: int,
        tw: int,
        nsc: int,
        nrt: int,
        npd: int,
    ):
        self.groups = groups
        self.num_classes = num_classes
        self.tw = tw
        self.nsc = nsc
        self.nrt = nrt
        self.npd = npd
        for task, samples in groups.items():
            for s in samples:
                if not 0 <= s.label < num_classes:
                    raise ValidationError(
                        f"sample label {s.label} outside class set 0..{num_classes - 1} "
                        f"in task {task}"
                    )

    @property
    def task_ids(self) -> list[TaskId]:
        return sorted(self.groups, key=lambda t: (t[0], t[1].value))

    def get_task(self, task_id: TaskId) -> list[Sample]:
        scenario, motion = task_id
        key = (scenario, MotionType.parse(motion))
        if key not in self.groups:
            known = ", ".join(f"{s}:{m.value}" for s, m in self.task_ids)
            raise ValidationError(f"unknown task {scenario}:{MotionType.parse(motion).value} (have {known})")
        return self.groups[key]

    def all_samples(self) -> list[Sample]:
        return [s for task in self.task_ids for s in self.groups[task]]

    def subset(self, task_ids) -> "SampleStore":
        keys = [(s, MotionType.parse(m)) for s, m in task_ids]
        return SampleStore(
            {k: self.groups[k] for k in keys},
            self.num_classes,
            self.tw,
            self.nsc,
            self.nrt,
            self.npd,
        )

    def __len__(self) -> int:
        return sum(len(v) for v in self.groups.values())


def stacked(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into (amp [N,...], phd [N,...], labels [N]) arrays."""
    amp = np.stack([s.amp for s in samples])
    phd = np.stack([s.phd for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return amp, phd, labels


def preprocess_recording(
    rec: CsiRecording, cfg: SegmentationConfig, recording_id: str
) -> list[Sample]:
    samples = []
    for idx, seg in enumerate(segment(rec, cfg)):
        samples.append(
            Sample(
                amp=amp_pipeline(seg),
                phd=phd_pipeline(seg),
                label=rec.meta.crowd_count,
                source=(recording_id, idx),
            )
        )
    return samples


def preprocess_dataset(manifest: DatasetManifest, cfg: SegmentationConfig) -> SampleStore:
    """Segment and preprocess every recording in a manifest.

    All recordings must share (Nr, Nt, Nsc); labels come from the
    recording's crowd count and samples are grouped per (scenario,
    motion) task.
    """
    if manifest.root is None and len(manifest):
        raise ValidationError("manifest has no root directory to load recordings from")
    dims = {(e.nr, e.nt, e.nsc) for e in manifest.recordings}
    if len(dims) > 1:
        raise ValidationError(f"recordings have heterogeneous (Nr, Nt, Nsc): {sorted(dims)}")
    groups: dict[TaskId, list[Sample]] = {}
    for entry in manifest.recordings:
        rec = load_recording(manifest.root / entry.path)
        task = (entry.meta.scenario_id, entry.meta.motion_type)
        groups.setdefault(task, []).extend(preprocess_recording(rec, cfg, entry.path))
    if manifest.recordings:
        nr, nt, nsc = next(iter(dims))
        num_classes = max(e.meta.crowd_count for e in manifest.recordings) + 1
    else:
        nr, nt, nsc, num_classes = 2, 1, 1, 1
    return SampleStore(
        groups, num_classes=num_classes, tw=cfg.tw, nsc=nsc, nrt=nr * nt, npd=nt * (nr - 1)
    )


def _blob_bytes(sample: Sample, nsc: int, tw: int) -> bytes:
    nrt, npd = sample.amp.shape[0], sample.phd.shape[0]
    header = struct.pack(_BLOB_HEADER_FMT, STORE_MAGIC, nrt, npd, tw, nsc)
    return (
        header
        + sample.amp.astype("<f4", copy=False).tobytes()
        + sample.phd.astype("<f4", copy=False).tobytes()
        + bytes([sample.label])
    )


def save_store(store: SampleStore, directory: str | Path, ts: int | None = None) -> Path:
    """Persist a store as ``store.json`` plus one DSEG1 blob per sample."""
    directory = Path(directory)
    (directory / "samples").mkdir(parents=True, exist_ok=True)
    index = {
        "format_version": STORE_VERSION,
        "tw": store.tw,
        "ts": ts,
        "nsc": store.nsc,
        "nrt": store.nrt,
        "npd": store.npd,
        "num_classes": store.num_classes,
        "samples": [],
    }
    for scenario, motion in store.task_ids:
        for i, sample in enumerate(store.groups[(scenario, motion)]):
            rel = f"samples/{scenario}_{motion.value}_{i:05d}.dseg"
            (directory / rel).write_bytes(_blob_bytes(sample, store.nsc, store.tw))
            index["samples"].append(
                {
                    "path": rel,
                    "scenario_id": scenario,
                    "motion_type": motion.value,
                    "label": sample.label,
                    "recording_id": sample.source[0],
                    "segment_index": sample.source[1],
                }
            )
    out = directory / STORE_INDEX_NAME
    out.write_text(json.dumps(index, indent=2) + "\n")
    return out


def _read_blob(path: Path) -> tuple[np.ndarray, np.ndarray, int]:
    blob = path.read_bytes()
    hsize = struct.calcsize(_BLOB_HEADER_FMT)
    if len(blob) < hsize:
        raise CorruptionError(f"{path}: truncated header")
    magic, nrt, npd, tw, nsc = struct.unpack(_BLOB_HEADER_FMT, blob[:hsize])
    if magic != STORE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    amp_n, phd_n = nrt * tw * nsc, npd * tw * nsc
    expected = hsize + 4 * (amp_n + phd_n) + 1
    if len(blob) != expected:
        raise CorruptionError(f"{path}: {len(blob)} bytes, expected {expected}")
    amp = np.frombuffer(blob, dtype="<f4", count=amp_n, offset=hsize).reshape(nrt, tw, nsc)
    phd = np.frombuffer(blob, dtype="<f4", count=phd_n, offset=hsize + 4 * amp_n).reshape(
        npd, tw, nsc
    )
    return amp, phd, blob[-1]


def load_store(directory: str | Path) -> SampleStore:
    directory = Path(directory)
    index_path = directory / STORE_INDEX_NAME
    if not index_path.is_file():
        raise ValidationError(f"no {STORE_INDEX_NAME} in {directory}")
    index = json.loads(index_path.read_text())
    groups: dict[TaskId, list[Sample]] = {}
    for rec in index["samples"]:
        amp, phd, label = _read_blob(directory / rec["path"])
        if label != rec["label"]:
            raise CorruptionError(f"{rec['path']}: label byte {label} != index {rec['label']}")
        task = (rec["scenario_id"], MotionType.parse(rec["motion_type"]))
        groups.setdefault(task, []).append(
            Sample(amp=amp, phd=phd, label=label, source=(rec["recording_id"], rec["segment_index"]))
        )
    return SampleStore(
        groups,
        num_classes=index["num_classes"],
        tw=index["tw"],
        nsc=index["nsc"],
        nrt=index["nrt"],
        npd=index["npd"],
    )
