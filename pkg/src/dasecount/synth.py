"""Synthetic CSI generation from a frequency-domain multipath model.

Each channel sample is a sum of path contributions
``H(f, t) = sum_n a_n(t) * exp(-i 2 pi f tau_n(t))`` evaluated per
subcarrier frequency and antenna pair, with three path populations:

* a time-invariant background set drawn per scenario (walls, furniture),
* one direct transmitter-receiver path scaled by ``los_gain``,
* per-person scatterer clusters whose positions evolve with the motion
  type, so the temporal channel variation grows with the crowd count.

Complex Gaussian receiver noise is added at a configured SNR, then
hardware impairments (per-frame common phase, a linear subcarrier phase
ramp from sampling-time offset) multiply the result. Everything is a
pure function of the configs and seeds; independent named RNG streams
keep e.g. the noise draw identical when impairments are toggled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .csidata import (
    CsiRecording,
    DatasetManifest,
    ManifestEntry,
    MotionType,
    RecordingMeta,
    entry_for,
    save_recording,
    write_manifest,
)
from .errors import ValidationError
from .seeding import derive_seed, rng_from

SPEED_OF_LIGHT = 299792458.0

# Fixed room geometry (meters). The transmit array sits on the left wall,
# the receive array on the right wall, both linear along y.
ROOM_W = 6.0
ROOM_H = 5.0
TX_BASE = (0.0, ROOM_H / 2)
RX_BASE = (ROOM_W, ROOM_H / 2)
WALK_MARGIN = 0.4  # persons keep this far from the walls
CLUSTER_STD = 0.20  # scatterer offsets around a person's center
HEADING_DIFFUSION = 0.15  # radians/frame of random-walk heading drift
SWAY_TIME_CONST = 1.5  # seconds; posture sway correlation for seated persons


@dataclass(frozen=True)
class SceneConfig:
    """One deployment scenario: room response, radio, and antenna layout."""

    scenario_id: str
    n_static_paths: int = 12
    los_gain: float = 1.0
    room_delay_spread: float = 50e-9
    antenna_spacing: float = 0.0625
    carrier_freq: float = 2.437e9
    bandwidth: float = 40e6
    nsc: int = 114
    snr_db: float = 25.0
    seed: int | None = None
    # Not in the channel equation but required to shape the tensor and to
    # convert walk speed into per-frame steps.
    nr: int = 3
    nt: int = 2
    sample_rate: float = 100.0

    def __post_init__(self):
        if self.n_static_paths < 1:
            raise ValidationError("n_static_paths must be >= 1")
        if self.nsc < 1:
            raise ValidationError("nsc must be >= 1")
        if not math.isfinite(self.snr_db) and not self.snr_db == math.inf:
            raise ValidationError("snr_db must be finite or +inf (noise disabled)")
        if self.los_gain < 0:
            raise ValidationError("los_gain must be >= 0")
        if self.nr < 2 or self.nt < 1:
            raise ValidationError("need nr >= 2 and nt >= 1")
        if self.sample_rate <= 0 or self.bandwidth <= 0 or self.carrier_freq <= 0:
            raise ValidationError("sample_rate, bandwidth, carrier_freq must be positive")


@dataclass(frozen=True)
class CrowdMotionConfig:
    scatterers_per_person: int = 3
    static_jitter_std: float = 0.02
    walk_speed: float = 1.2
    mixed_moving_fraction: float = 0.5
    per_person_reflection_gain: float = 0.2
    # body shadowing: a person near a propagation path attenuates it, so
    # the rate of deep fades grows with the crowd count
    blockage_atten: float = 0.7  # fractional amplitude loss at the path line
    blockage_width: float = 0.3  # meters; lateral reach of the body shadow

    def __post_init__(self):
        if self.scatterers_per_person < 1:
            raise ValidationError("scatterers_per_person must be >= 1")
        if not 0.0 <= self.mixed_moving_fraction <= 1.0:
            raise ValidationError("mixed_moving_fraction must be in [0, 1]")
        if not 0.0 <= self.blockage_atten < 1.0:
            raise ValidationError("blockage_atten must be in [0, 1)")
        if self.blockage_width <= 0:
            raise ValidationError("blockage_width must be positive")


@dataclass(frozen=True)
class ImpairmentConfig:
    common_phase_offset: bool = True
    sto_slope_std: float = 0.05  # radians per subcarrier index

    def __post_init__(self):
        if self.sto_slope_std < 0:
            raise ValidationError("sto_slope_std must be >= 0")


@dataclass(frozen=True)
class BackgroundPaths:
    """Time-invariant multipath set of one scenario."""

    amps: np.ndarray  # complex [N]
    delays: np.ndarray  # seconds [N]
    aoa: np.ndarray  # radians [N], arrival angle at the rx array
    aod: np.ndarray  # radians [N], departure angle at the tx array
    anchors: np.ndarray  # [N, 2] reflection points; the path traces tx->anchor->rx


def subcarrier_freqs(scene: SceneConfig) -> np.ndarray:
    """Per-subcarrier center frequencies, symmetric around the carrier."""
    j = np.arange(scene.nsc, dtype=np.float64)
    return scene.carrier_freq + (j - (scene.nsc - 1) / 2) * (scene.bandwidth / scene.nsc)


def antenna_positions(scene: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """(tx [Nt,2], rx [Nr,2]) element positions in room coordinates."""

    def array_at(base, n):
        off = (np.arange(n, dtype=np.float64) - (n - 1) / 2) * scene.antenna_spacing
        pos = np.tile(np.asarray(base, dtype=np.float64), (n, 1))
        pos[:, 1] += off
        return pos

    return array_at(TX_BASE, scene.nt), array_at(RX_BASE, scene.nr)


def draw_background(scene: SceneConfig) -> BackgroundPaths:
    """Draw the scenario's static path set from ``scene.seed``.

    Delays start at the direct-path delay and spread over
    ``room_delay_spread`` with an exponentially decaying power profile;
    total background power is normalized to 1 so ``los_gain`` and person
    gains are expressed relative to it.
    """
    seed = scene.seed if scene.seed is not None else derive_seed(scene.scenario_id, "scene")
    rng = rng_from(seed, "background")
    n = scene.n_static_paths
    los_delay = ROOM_W / SPEED_OF_LIGHT
    excess = rng.uniform(0.0, scene.room_delay_spread, size=n)
    weights = np.exp(-excess / max(scene.room_delay_spread, 1e-12))
    weights /= weights.sum()
    phases = rng.uniform(0.0, 2 * np.pi, size=n)
    amps = np.sqrt(weights) * np.exp(1j * phases)
    aoa = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
    aod = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
    anchors = rng.uniform((0.0, 0.0), (ROOM_W, ROOM_H), size=(n, 2))
    return BackgroundPaths(amps=amps, delays=los_delay + excess, aoa=aoa, aod=aod, anchors=anchors)


def simulate_crowd(
    motion: CrowdMotionConfig,
    motion_type: MotionType,
    crowd_count: int,
    duration_frames: int,
    sample_rate: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Trajectories: (scatterers [T, crowd*s_per, 2], person centers [T, crowd, 2]).

    Walking persons follow a reflecting random walk with individual speeds
    (0.75-1.25x the configured walk speed) and diffusing headings. Seated
    persons sway around their base position with a mean-reverting random
    walk (stationary std = static_jitter_std, time constant
    ``SWAY_TIME_CONST``). Every scatterer additionally jitters i.i.d. per
    frame by static_jitter_std.
    """
    motion_type = MotionType.parse(motion_type)
    s_per = motion.scatterers_per_person
    n_scat = crowd_count * s_per
    t = duration_frames
    if n_scat == 0:
        return np.zeros((t, 0, 2)), np.zeros((t, 0, 2))

    lo, hi = WALK_MARGIN, np.array([ROOM_W, ROOM_H]) - WALK_MARGIN
    centers0 = rng.uniform(lo, hi, size=(crowd_count, 2))
    offsets = rng.normal(0.0, CLUSTER_STD, size=(crowd_count, s_per, 2))

    if motion_type is MotionType.STATIC:
        moving = np.zeros(crowd_count, dtype=bool)
    elif motion_type is MotionType.DYNAMIC:
        moving = np.ones(crowd_count, dtype=bool)
    else:
        moving = rng.random(crowd_count) < motion.mixed_moving_fraction

    headings = rng.uniform(0.0, 2 * np.pi, size=crowd_count)
    heading_steps = rng.normal(0.0, HEADING_DIFFUSION, size=(t, crowd_count))
    jitter = rng.normal(0.0, motion.static_jitter_std, size=(t, crowd_count, s_per, 2))
    # individual gaits: distinct speeds spread the Doppler-like spectrum
    speed = motion.walk_speed * rng.uniform(0.75, 1.25, size=crowd_count)
    sway0 = rng.normal(0.0, motion.static_jitter_std, size=(crowd_count, 2))
    sway_noise = rng.normal(0.0, 1.0, size=(t, crowd_count, 2))

    steps = speed / sample_rate
    rho = math.exp(-1.0 / (SWAY_TIME_CONST * sample_rate))
    sway_step = motion.static_jitter_std * math.sqrt(1.0 - rho * rho)
    centers = np.empty((t, crowd_count, 2))
    pos = centers0.copy()
    theta = headings.copy()
    sway = sway0
    for i in range(t):
        centers[i] = np.where(moving[:, None], pos, centers0 + sway)
        theta = theta + heading_steps[i]
        delta = steps[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        delta[~moving] = 0.0
        pos = _reflect(pos + delta, lo, hi)
        sway = rho * sway + sway_step * sway_noise[i]

    traj = centers[:, :, None, :] + offsets[None, :, :, :] + jitter
    return traj.reshape(t, n_scat, 2), centers


def simulate_positions(
    motion: CrowdMotionConfig,
    motion_type: MotionType,
    crowd_count: int,
    duration_frames: int,
    sample_rate: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Scatterer trajectories [T, crowd*scatterers_per_person, 2] in meters."""
    return simulate_crowd(motion, motion_type, crowd_count, duration_frames, sample_rate, rng)[0]


def _reflect(pos: np.ndarray, lo, hi) -> np.ndarray:
    """Fold positions back into [lo, hi] (mirror reflection at the walls)."""
    span = hi - lo
    x = np.mod(pos - lo, 2 * span)
    return lo + span - np.abs(x - span)


def synthesize_background_paths(scene: SceneConfig, bg: BackgroundPaths) -> np.ndarray:
    """Per-path channel responses [N, Nr, Nt, Nsc] of the background set."""
    freqs = subcarrier_freqs(scene)
    r_off = (np.arange(scene.nr) - (scene.nr - 1) / 2) * scene.antenna_spacing
    t_off = (np.arange(scene.nt) - (scene.nt - 1) / 2) * scene.antenna_spacing
    # delay[p, r, m] = base + (array offsets projected on the path angle) / c
    delay = (
        bg.delays[:, None, None]
        + (
            r_off[None, :, None] * np.sin(bg.aoa)[:, None, None]
            + t_off[None, None, :] * np.sin(bg.aod)[:, None, None]
        )
        / SPEED_OF_LIGHT
    )
    phases = -2j * np.pi * freqs[None, None, None, :] * delay[..., None]
    return bg.amps[:, None, None, None] * np.exp(phases)


def synthesize_background(scene: SceneConfig, bg: BackgroundPaths) -> np.ndarray:
    """Static channel component [Nr, Nt, Nsc] from the background path set."""
    return synthesize_background_paths(scene, bg).sum(axis=0)


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points [..., 2] to segments a->b ([K, 2] each)."""
    ab = b - a  # [K, 2]
    denom = np.maximum((ab * ab).sum(-1), 1e-12)  # [K]
    ap = points[..., None, :] - a  # [..., K, 2]
    t = np.clip((ap * ab).sum(-1) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(points[..., None, :] - closest, axis=-1)


def blocking_attenuation(
    scene: SceneConfig, motion: CrowdMotionConfig, bg: BackgroundPaths, centers: np.ndarray
) -> np.ndarray:
    """Per-frame amplitude attenuation [T, N+1] from body shadowing.

    Each background path is traced tx -> anchor -> rx; the last column is
    the direct tx -> rx path. A person near a trace multiplies the path
    amplitude by ``1 - blockage_atten * exp(-d^2 / (2 width^2))``, so
    crossings produce deep fades and their rate grows with the count.
    """
    t = centers.shape[0]
    n = scene.n_static_paths
    if centers.shape[1] == 0:
        return np.ones((t, n + 1))
    tx = np.asarray(TX_BASE, dtype=np.float64)
    rx = np.asarray(RX_BASE, dtype=np.float64)
    seg_a = np.concatenate([np.tile(tx, (n, 1)), bg.anchors, tx[None, :]], axis=0)
    seg_b = np.concatenate([bg.anchors, np.tile(rx, (n, 1)), rx[None, :]], axis=0)
    # distances [T, P, 2N+1]; path k < n owns segments (k, n+k), the LOS owns 2n
    d = _segment_distance(centers, seg_a, seg_b)
    prox = np.exp(-(d**2) / (2.0 * motion.blockage_width**2))
    path_prox = np.concatenate(
        [np.maximum(prox[..., :n], prox[..., n : 2 * n]), prox[..., 2 * n :]], axis=-1
    )
    per_person = 1.0 - motion.blockage_atten * path_prox  # [T, P, N+1]
    return per_person.prod(axis=1)


def synthesize_los(scene: SceneConfig) -> np.ndarray:
    """Direct-path component [Nr, Nt, Nsc]; exact element-pair geometry."""
    if scene.los_gain == 0.0:
        return np.zeros((scene.nr, scene.nt, scene.nsc), dtype=np.complex128)
    freqs = subcarrier_freqs(scene)
    tx, rx = antenna_positions(scene)
    dist = np.linalg.norm(rx[:, None, :] - tx[None, :, :], axis=-1)  # [Nr, Nt]
    delay = dist / SPEED_OF_LIGHT
    return scene.los_gain * np.exp(-2j * np.pi * freqs[None, None, :] * delay[..., None])


def synthesize_person_paths(
    scene: SceneConfig,
    positions: np.ndarray,
    coeffs: np.ndarray,
    frame_chunk: int = 128,
) -> np.ndarray:
    """Moving-scatterer component [T, Nr, Nt, Nsc].

    ``positions`` is [T, S, 2]; ``coeffs`` is the complex reflection
    coefficient per scatterer [S]. Processes frames in chunks to bound
    the [T, S, Nr, Nt, Nsc] intermediate.
    """
    t, n_scat = positions.shape[:2]
    out = np.zeros((t, scene.nr, scene.nt, scene.nsc), dtype=np.complex128)
    if n_scat == 0:
        return out
    freqs = subcarrier_freqs(scene)
    tx, rx = antenna_positions(scene)
    for start in range(0, t, frame_chunk):
        p = positions[start : start + frame_chunk]  # [Tc, S, 2]
        d_rx = np.linalg.norm(p[:, :, None, :] - rx[None, None, :, :], axis=-1)  # [Tc,S,Nr]
        d_tx = np.linalg.norm(p[:, :, None, :] - tx[None, None, :, :], axis=-1)  # [Tc,S,Nt]
        delay = (d_rx[:, :, :, None] + d_tx[:, :, None, :]) / SPEED_OF_LIGHT  # [Tc,S,Nr,Nt]
        phases = -2 * np.pi * freqs[None, None, None, None, :] * delay[..., None]
        contrib = coeffs[None, :, None, None, None] * np.exp(1j * phases)
        out[start : start + frame_chunk] = contrib.sum(axis=1)
    return out


def generate_recording(
    scene: SceneConfig,
    motion: CrowdMotionConfig,
    motion_type: MotionType | str,
    crowd_count: int,
    duration_frames: int,
    seed: int,
    impairments: ImpairmentConfig | None = None,
) -> CsiRecording:
    """Generate one labeled recording; deterministic given configs and seed.

    The background path set depends only on ``scene.seed``, so recordings
    of the same scenario share their static environment. Everything
    recording-specific (trajectories, reflection coefficients, noise,
    impairments) derives from ``seed`` through independent named streams.
    """
    if crowd_count < 0:
        raise ValidationError("crowd_count must be >= 0")
    if duration_frames < 1:
        raise ValidationError("duration_frames must be >= 1")
    motion_type = MotionType.parse(motion_type)
    impairments = impairments or ImpairmentConfig()

    bg = draw_background(scene)
    positions, centers = simulate_crowd(
        motion, motion_type, crowd_count, duration_frames, scene.sample_rate, rng_from(seed, "motion")
    )
    n_scat = positions.shape[1]
    bg_resp = synthesize_background_paths(scene, bg)  # [N, Nr, Nt, Nsc]
    los_resp = synthesize_los(scene)  # [Nr, Nt, Nsc]
    if n_scat:
        atten = blocking_attenuation(scene, motion, bg, centers)  # [T, N+1]
        h = np.tensordot(atten[:, :-1], bg_resp, axes=(1, 0))
        h += atten[:, -1][:, None, None, None] * los_resp[None]
    else:
        h = np.empty((duration_frames, scene.nr, scene.nt, scene.nsc), dtype=np.complex128)
        h[:] = bg_resp.sum(axis=0)[None] + los_resp[None]
    if n_scat:
        rrng = rng_from(seed, "reflection")
        refl = rrng.uniform(0.0, 2 * np.pi, size=n_scat)
        # reflection strength varies per scatterer around the configured gain
        gains = motion.per_person_reflection_gain * rrng.uniform(0.7, 1.3, size=n_scat)
        coeffs = gains * np.exp(1j * refl)
        h += synthesize_person_paths(scene, positions, coeffs)

    if np.isfinite(scene.snr_db):
        p_sig = float(np.mean(np.abs(h) ** 2))
        noise_var = p_sig * 10.0 ** (-scene.snr_db / 10.0)
        nrng = rng_from(seed, "noise")
        noise = nrng.normal(0.0, 1.0, size=h.shape) + 1j * nrng.normal(0.0, 1.0, size=h.shape)
        h += np.sqrt(noise_var / 2.0) * noise

    if impairments.common_phase_offset:
        theta = rng_from(seed, "impair-common").uniform(
            0.0, 2 * np.pi, size=(duration_frames, scene.nt)
        )
        h *= np.exp(1j * theta)[:, None, :, None]
    if impairments.sto_slope_std > 0:
        slopes = rng_from(seed, "impair-sto").normal(
            0.0, impairments.sto_slope_std, size=duration_frames
        )
        ramp = np.exp(-1j * slopes[:, None] * np.arange(scene.nsc)[None, :])
        h *= ramp[:, None, None, :]

    meta = RecordingMeta(
        scenario_id=scene.scenario_id,
        motion_type=motion_type,
        crowd_count=crowd_count,
        sample_rate=scene.sample_rate,
        seed=seed,
    )
    return CsiRecording(data=h.astype(np.complex64), meta=meta)


@dataclass(frozen=True)
class GenerationSpec:
    """Declarative description of a dataset: scenarios x motions x counts."""

    scenes: tuple[SceneConfig, ...]
    motion: CrowdMotionConfig = CrowdMotionConfig()
    impairments: ImpairmentConfig = ImpairmentConfig()
    motion_types: tuple[MotionType, ...] = tuple(MotionType)
    crowd_counts: tuple[int, ...] = tuple(range(9))
    duration_frames: int = 3150
    base_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scenes", tuple(self.scenes))
        object.__setattr__(
            self, "motion_types", tuple(MotionType.parse(m) for m in self.motion_types)
        )
        object.__setattr__(self, "crowd_counts", tuple(int(c) for c in self.crowd_counts))
        if any(c < 0 for c in self.crowd_counts):
            raise ValidationError("crowd_counts must be >= 0")
        if len(set(s.scenario_id for s in self.scenes)) != len(self.scenes):
            raise ValidationError("duplicate scenario_id in generation spec")
        if len(set(self.crowd_counts)) != len(self.crowd_counts):
            raise ValidationError("duplicate crowd_counts in generation spec")
        if len(set(self.motion_types)) != len(self.motion_types):
            raise ValidationError("duplicate motion_types in generation spec")

    def categories(self):
        for scene in self.scenes:
            for motion_type in self.motion_types:
                for count in self.crowd_counts:
                    yield scene, motion_type, count


def category_seed(base_seed: int, scenario_id: str, motion_type: MotionType, count: int) -> int:
    return derive_seed(base_seed, scenario_id, MotionType.parse(motion_type).value, count)


def resolve_scene_seed(spec: GenerationSpec, scene: SceneConfig) -> SceneConfig:
    """Fill in a scene seed derived from the base seed when absent."""
    if scene.seed is not None:
        return scene
    return replace(scene, seed=derive_seed(spec.base_seed, scene.scenario_id, "scene"))


def generate_dataset(spec: GenerationSpec, out_dir: str | Path) -> DatasetManifest:
    """Write one CSIR1 recording per category plus ``manifest.json``.

    Category seeds are hashed from (base_seed, scenario, motion, count),
    so categories are independent and the directory is byte-identical
    across runs with the same spec.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries: list[ManifestEntry] = []
    for scene, motion_type, count in spec.categories():
        scene = resolve_scene_seed(spec, scene)
        seed = category_seed(spec.base_seed, scene.scenario_id, motion_type, count)
        rec = generate_recording(
            scene, spec.motion, motion_type, count, spec.duration_frames, seed, spec.impairments
        )
        rel = f"{scene.scenario_id}_{motion_type.value}_{count:02d}.csir"
        save_recording(rec, out_dir / rel)
        entries.append(entry_for(rec, rel))
    manifest = DatasetManifest(recordings=tuple(entries), root=out_dir)
    write_manifest(manifest, out_dir)
    return manifest
