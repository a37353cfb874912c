"""CSI recording types and the "CSIR1" on-disk container.

A recording is a complex channel tensor of shape [T, Nr, Nt, Nsc)] --
time frames x receive antennas x transmit antennas x subcarriers -- plus
capture metadata. Recordings are stored as little-endian float32
(real, imag) pairs in row-major [t][rx][tx][subcarrier] order behind a
fixed-size binary header, which makes save/load bit-exact for every
finite float32 value including negative zero and subnormals.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, IoError, ValidationError

log = logging.getLogger(__name__)

MAGIC = b"CSIR1"
_SCENARIO_BYTES = 64
# magic + dims(4*u32) + motion(u8) + has_seed(u8) + pad(2) + crowd(u32)
# + sample_rate(f64) + seed(u64) + scenario_id(64 bytes, zero padded)
_HEADER_FMT = "<5s4I2BxxI" + "dQ" + f"{_SCENARIO_BYTES}s"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class MotionType(Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"
    MIXED = "mixed"

    @classmethod
    def parse(cls, value: "MotionType | str") -> "MotionType":
        if isinstance(value, MotionType):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValidationError(f"unknown motion type {value!r}") from None


@dataclass(frozen=True)
class RecordingMeta:
    scenario_id: str
    motion_type: MotionType
    crowd_count: int
    sample_rate: float
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "motion_type", MotionType.parse(self.motion_type))
        if self.crowd_count < 0:
            raise ValidationError(f"crowd_count must be >= 0, got {self.crowd_count}")
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.seed is not None and not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed must fit in 64 bits, got {self.seed}")
        if len(self.scenario_id.encode("utf-8")) > _SCENARIO_BYTES:
            raise ValidationError(f"scenario_id exceeds {_SCENARIO_BYTES} bytes: {self.scenario_id!r}")


@dataclass(frozen=True)
class CsiRecording:
    """Immutable raw CSI tensor [T, Nr, Nt, Nsc] (complex64) with metadata."""

    data: np.ndarray
    meta: RecordingMeta

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.complex64)
        if data.ndim != 4:
            raise ValidationError(f"CSI tensor must be 4-D [T, Nr, Nt, Nsc], got shape {data.shape}")
        t, nr, nt, nsc = data.shape
        if t < 1 or nr < 2 or nt < 1 or nsc < 1:
            raise ValidationError(
                f"dims out of range: T={t} (>=1), Nr={nr} (>=2 for phase differencing), "
                f"Nt={nt} (>=1), Nsc={nsc} (>=1)"
            )
        object.__setattr__(self, "data", data)

    @property
    def t(self) -> int:
        return self.data.shape[0]

    @property
    def nr(self) -> int:
        return self.data.shape[1]

    @property
    def nt(self) -> int:
        return self.data.shape[2]

    @property
    def nsc(self) -> int:
        return self.data.shape[3]

    def __eq__(self, other):
        if not isinstance(other, CsiRecording):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()  # bitwise, -0.0 != 0.0
        )


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    meta: RecordingMeta
    t: int
    nr: int
    nt: int
    nsc: int


@dataclass(frozen=True)
class DatasetManifest:
    recordings: tuple[ManifestEntry, ...]
    format_version: int = MANIFEST_VERSION
    root: Path | None = None
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.recordings)


def _motion_code(m: MotionType) -> int:
    return list(MotionType).index(m)


def payload_bytes(t: int, nr: int, nt: int, nsc: int) -> int:
    """Payload size: two float32 per complex entry."""
    return 8 * t * nr * nt * nsc


def save_recording(rec: CsiRecording, path: str | Path) -> int:
    """Write a recording to `path` in CSIR1 format; returns bytes written."""
    path = Path(path)
    if not path.parent.is_dir():
        raise IoError(f"parent directory does not exist: {path.parent}")
    meta = rec.meta
    header = struct.pack(
        _HEADER_FMT,
        MAGIC,
        rec.t,
        rec.nr,
        rec.nt,
        rec.nsc,
        _motion_code(meta.motion_type),
        0 if meta.seed is None else 1,
        meta.crowd_count,
        float(meta.sample_rate),
        0 if meta.seed is None else meta.seed,
        meta.scenario_id.encode("utf-8"),
    )
    payload = rec.data.astype(np.complex64, copy=False).tobytes()
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload)
    except OSError as exc:
        raise IoError(f"failed to write {path}: {exc}") from exc
    return len(header) + len(payload)


def load_recording(path: str | Path) -> CsiRecording:
    """Read a CSIR1 file; inverse of :func:`save_recording`, bit-exact."""
    path = Path(path)
    if not path.is_file():
        raise IoError(f"no such file: {path}")
    with open(path, "rb") as f:
        header = f.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE:
            raise CorruptionError(f"{path}: truncated header ({len(header)} < {HEADER_SIZE} bytes)")
        magic, t, nr, nt, nsc, motion_code, has_seed, crowd, rate, seed, scen = struct.unpack(
            _HEADER_FMT, header
        )
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        expected = payload_bytes(t, nr, nt, nsc)
        payload = f.read(expected)  # never read past the declared payload
        if len(payload) != expected:
            raise CorruptionError(
                f"{path}: payload truncated, got {len(payload)} of {expected} bytes "
                f"for dims T={t} Nr={nr} Nt={nt} Nsc={nsc}"
            )
    if motion_code >= len(MotionType):
        raise CorruptionError(f"{path}: invalid motion code {motion_code}")
    meta = RecordingMeta(
        scenario_id=scen.rstrip(b"\x00").decode("utf-8"),
        motion_type=list(MotionType)[motion_code],
        crowd_count=crowd,
        sample_rate=rate,
        seed=seed if has_seed else None,
    )
    data = np.frombuffer(payload, dtype=np.complex64).reshape(t, nr, nt, nsc)
    return CsiRecording(data=data, meta=meta)


def _entry_to_json(e: ManifestEntry) -> dict:
    return {
        "path": e.path,
        "scenario_id": e.meta.scenario_id,
        "motion_type": e.meta.motion_type.value,
        "crowd_count": e.meta.crowd_count,
        "sample_rate": e.meta.sample_rate,
        "t": e.t,
        "nr": e.nr,
        "nt": e.nt,
        "nsc": e.nsc,
        "seed": e.meta.seed,
    }


def write_manifest(manifest: DatasetManifest, directory: str | Path) -> Path:
    directory = Path(directory)
    doc = {
        "format_version": manifest.format_version,
        "recordings": [_entry_to_json(e) for e in manifest.recordings],
    }
    out = directory / MANIFEST_NAME
    out.write_text(json.dumps(doc, indent=2) + "\n")
    return out


def load_manifest(directory: str | Path) -> DatasetManifest:
    """Load and eagerly validate `manifest.json` from a dataset directory.

    Checks, per entry: the referenced file exists, its size matches the
    declared dims exactly, and no path is listed twice. The manifest
    metadata is authoritative; if the file's embedded header disagrees, a
    warning is recorded and the manifest values win.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ValidationError(f"no {MANIFEST_NAME} in {directory}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "recordings" not in doc or "format_version" not in doc:
        raise FormatError(f"{manifest_path}: missing required keys")

    entries: list[ManifestEntry] = []
    warnings: list[str] = []
    seen: set[str] = set()
    for raw in doc["recordings"]:
        rel = raw["path"]
        if rel in seen:
            raise ValidationError(f"duplicate path in manifest: {rel}")
        seen.add(rel)
        meta = RecordingMeta(
            scenario_id=raw["scenario_id"],
            motion_type=MotionType.parse(raw["motion_type"]),
            crowd_count=int(raw["crowd_count"]),
            sample_rate=float(raw["sample_rate"]),
            seed=raw.get("seed"),
        )
        t, nr, nt, nsc = (int(raw[k]) for k in ("t", "nr", "nt", "nsc"))
        file_path = directory / rel
        if not file_path.is_file():
            raise ValidationError(f"manifest references missing file: {rel}")
        expected_size = HEADER_SIZE + payload_bytes(t, nr, nt, nsc)
        actual_size = file_path.stat().st_size
        if actual_size != expected_size:
            raise ValidationError(
                f"size mismatch for {rel}: {actual_size} bytes on disk, "
                f"expected {expected_size} (header {HEADER_SIZE} + payload "
                f"{payload_bytes(t, nr, nt, nsc)})"
            )
        embedded = _read_embedded_meta(file_path)
        if embedded is not None and embedded != meta:
            msg = f"{rel}: embedded metadata disagrees with manifest; manifest wins"
            warnings.append(msg)
            log.warning(msg)
        entries.append(ManifestEntry(path=rel, meta=meta, t=t, nr=nr, nt=nt, nsc=nsc))

    return DatasetManifest(
        recordings=tuple(entries),
        format_version=int(doc["format_version"]),
        root=directory,
        warnings=tuple(warnings),
    )


def _read_embedded_meta(path: Path) -> RecordingMeta | None:
    with open(path, "rb") as f:
        header = f.read(HEADER_SIZE)
    if len(header) < HEADER_SIZE:
        return None
    magic, _, _, _, _, motion_code, has_seed, crowd, rate, seed, scen = struct.unpack(
        _HEADER_FMT, header
    )
    if magic != MAGIC or motion_code >= len(MotionType):
        return None
    return RecordingMeta(
        scenario_id=scen.rstrip(b"\x00").decode("utf-8", errors="replace"),
        motion_type=list(MotionType)[motion_code],
        crowd_count=crowd,
        sample_rate=rate,
        seed=seed if has_seed else None,
    )


def entry_for(rec: CsiRecording, rel_path: str) -> ManifestEntry:
    return ManifestEntry(path=rel_path, meta=rec.meta, t=rec.t, nr=rec.nr, nt=rec.nt, nsc=rec.nsc)


def with_meta(rec: CsiRecording, **changes) -> CsiRecording:
    return CsiRecording(data=rec.data, meta=replace(rec.meta, **changes))
