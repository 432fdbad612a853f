"""Synthetic grasp-episode simulator for 16 real/fake fruit pairs (32 classes).

Object reflectance is split into a visible part (< 700 nm), shared exactly by
the two members of a pair, and a NIR part (>= 700 nm) that differs between
them. Detector counts are::

    dark + lamp * gel * flex * (ambient + g_vis(d) * visible + g_nir(d) * nir) + noise

with ``g_vis(d) = a / (1 + d)`` and ``g_nir(d) = b / (1 + d)**2`` so the NIR
part only dominates once the fingers are close to the object.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import SpectralDataset, write_dataset, write_json
from .errors import ParameterError
from .spectra import FRAME_RATE_HZ, CalibrationPair, RawFrame, WavelengthGrid

FRUITS = (
    "kiwi", "banana", "green_grape", "lemon", "mango", "avocado", "plum", "orange",
    "red_apple", "pear", "strawberry", "red_grape", "black_grape", "green_apple", "peach", "lime",
)
AUTHENTICITY = ("real", "fake")
VISIBLE_EDGE_NM = 700.0
# member-specific NIR bumps are zero below this so smoothing cannot carry them into the visible band
NIR_TAPER_NM = (710.0, 740.0)
NIR_BASE_RANGE = (0.15, 0.35)

GAIN_VIS = 0.8
GAIN_NIR = 3.2  # b / a = 4 puts the g_nir == g_vis crossover at d = 3 cm


@dataclass(frozen=True)
class MaterialClass:
    fruit: str
    authenticity: str
    class_index: int

    @property
    def name(self) -> str:
        return f"{self.fruit}-{self.authenticity}"

    @property
    def pair_id(self) -> int:
        return self.class_index // 2


MATERIAL_CLASSES = tuple(
    MaterialClass(f, a, 2 * i + j) for i, f in enumerate(FRUITS) for j, a in enumerate(AUTHENTICITY)
)
CLASS_BY_NAME = {m.name: m for m in MATERIAL_CLASSES}


def pair_of(label: str) -> int:
    return CLASS_BY_NAME[label].pair_id


def pair_partner(label: str) -> str:
    """Name of the other member of ``label``'s real/fake pair."""
    m = CLASS_BY_NAME[label]
    return MATERIAL_CLASSES[m.class_index ^ 1].name


@dataclass(frozen=True)
class ClassProfile:
    material: MaterialClass
    visible_profile: np.ndarray  # zero on channels >= 700 nm
    nir_profile: np.ndarray  # zero on channels < 700 nm

    @property
    def pair_id(self) -> int:
        return self.material.pair_id

    @property
    def reflectance(self) -> np.ndarray:
        return self.visible_profile + self.nir_profile


@dataclass(frozen=True)
class EpisodeParams:
    frame_rate: float = FRAME_RATE_HZ
    n_frames: int = 65
    d_start: float = 8.5
    d_grasp: float = 1.0
    snr: float = 1000.0
    gel_attenuation: float = 0.93
    closing_fraction: float = 0.6
    flex_jitter: float = 0.02
    object_gain_jitter: float = 0.05
    nir_gain_jitter: float = 0.05
    frame_nir_jitter: float = 0.1
    frame_drift: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not self.d_grasp < self.d_start:
            raise ParameterError("d_grasp must be smaller than d_start")
        if self.d_grasp < 0:
            raise ParameterError("distances must be nonnegative")
        if self.n_frames < 2:
            raise ParameterError("n_frames must be >= 2")
        if not self.snr > 0:
            raise ParameterError("snr must be positive")
        if not 0 < self.gel_attenuation <= 1:
            raise ParameterError("gel_attenuation must lie in (0, 1]")
        if not 0 < self.closing_fraction <= 1:
            raise ParameterError("closing_fraction must lie in (0, 1]")

    @property
    def n_closing(self) -> int:
        return max(2, min(self.n_frames, int(round(self.closing_fraction * self.n_frames))))


@dataclass
class GraspEpisode:
    frames: list
    label: MaterialClass
    phase_marks: dict
    episode_id: int = 0

    @property
    def distances(self) -> np.ndarray:
        return np.array([f.distance for f in self.frames])

    @property
    def grasp_index(self) -> int:
        return self.phase_marks["grasp"]


def gain_vis(d):
    return GAIN_VIS / (1.0 + np.asarray(d, dtype=float))


def gain_nir(d):
    return GAIN_NIR / (1.0 + np.asarray(d, dtype=float)) ** 2


def _smoothstep(x, lo, hi):
    t = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return t * t * (3 - 2 * t)


def _bumps(rng, lam, n_lo, n_hi, centre_lo, centre_hi, width_lo, width_hi, amp_lo, amp_hi):
    out = np.zeros_like(lam)
    for _ in range(rng.integers(n_lo, n_hi + 1)):
        c = rng.uniform(centre_lo, centre_hi)
        w = rng.uniform(width_lo, width_hi)
        out += rng.uniform(amp_lo, amp_hi) * np.exp(-0.5 * ((lam - c) / w) ** 2)
    return out


def lamp_counts(grid: WavelengthGrid) -> np.ndarray:
    """Quartz-tungsten-halogen emission times a silicon detector response, in counts."""
    lam = grid.values * 1e-9
    hc_k = 1.4388e-2
    planck = 1.0 / (lam ** 5 * (np.exp(hc_k / (lam * 3100.0)) - 1.0))
    planck /= planck.max()
    nm = grid.values
    response = np.exp(-0.5 * ((nm - 760.0) / 260.0) ** 2)
    shape = planck * response
    return 1500.0 + 42000.0 * shape / shape.max()


def dark_counts(grid: WavelengthGrid) -> np.ndarray:
    nm = grid.values
    return 900.0 + 60.0 * (nm - nm[0]) / (nm[-1] - nm[0]) + 15.0 * np.sin(nm / 37.0)


def calibration_pair(grid: WavelengthGrid) -> CalibrationPair:
    dark = dark_counts(grid)
    return CalibrationPair(dark + lamp_counts(grid), dark)


def ambient_profile(grid: WavelengthGrid) -> np.ndarray:
    """Overhead white-LED signature: blue emitter peak plus a broad phosphor hump."""
    nm = grid.values
    return (0.06 * np.exp(-0.5 * ((nm - 452.0) / 12.0) ** 2)
            + 0.09 * np.exp(-0.5 * ((nm - 575.0) / 55.0) ** 2)
            + 0.012 * np.exp(-0.5 * ((nm - 700.0) / 120.0) ** 2))


def _relative_l2(a, b):
    return float(np.linalg.norm(a - b) / (0.5 * (np.linalg.norm(a) + np.linalg.norm(b))))


def make_profiles(seed: int, grid: Optional[WavelengthGrid] = None, nir_shape_overlap: float = 0.9) -> list:
    """Draw the 32 class profiles; deterministic per seed.

    ``nir_shape_overlap`` in [0, 1) mixes a share of one member's NIR bump
    pattern into the other's, making pairs harder to tell apart by shape alone.
    """
    if not 0.0 <= nir_shape_overlap < 1.0:
        raise ParameterError("nir_shape_overlap must lie in [0, 1)")
    grid = grid or WavelengthGrid.default()
    lam = grid.values
    vis = lam < VISIBLE_EDGE_NM
    nir = ~vis
    taper = _smoothstep(lam, *NIR_TAPER_NM)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    profiles = []
    for pair, fruit in enumerate(FRUITS):
        while True:
            visible = (rng.uniform(0.04, 0.12)
                       + _bumps(rng, lam, 2, 4, 380.0, 690.0, 30.0, 90.0, 0.08, 0.45)) * vis
            base = rng.uniform(*NIR_BASE_RANGE)
            bumps = [_bumps(rng, lam, 3, 6, 730.0, 1120.0, 20.0, 80.0, 0.1, 0.4) for _ in range(2)]
            bumps[1] = nir_shape_overlap * bumps[0] + (1.0 - nir_shape_overlap) * bumps[1]
            peaks = [b.max() for b in bumps]
            bright = int(rng.integers(2))
            ratio = rng.uniform(1.5, 2.5)
            bumps[bright] *= ratio * peaks[1 - bright] / peaks[bright]
            nirs = [(base + b * taper) * nir for b in bumps]
            if _relative_l2(nirs[0], nirs[1]) < 0.3:
                continue
            vis_mean = visible[vis].mean()
            if not all(0.6 <= vis_mean / n[nir].mean() <= 1.6 for n in nirs):
                continue
            break
        for j in range(2):
            profiles.append(ClassProfile(MATERIAL_CLASSES[2 * pair + j], visible.copy(), nirs[j]))
    return profiles


def band_signals(profile: ClassProfile, distance: float, grid: WavelengthGrid) -> tuple:
    """Mean object reflectance contributed in the visible and NIR bands at ``distance``."""
    vis = grid.values < VISIBLE_EDGE_NM
    return (float(gain_vis(distance) * profile.visible_profile[vis].mean()),
            float(gain_nir(distance) * profile.nir_profile[~vis].mean()))


def nir_crossover_distance(profile: ClassProfile, grid: WavelengthGrid) -> float:
    """Distance at which the mean NIR object signal equals the visible one."""
    vis = grid.values < VISIBLE_EDGE_NM
    ratio = GAIN_NIR * profile.nir_profile[~vis].mean() / (GAIN_VIS * profile.visible_profile[vis].mean())
    return ratio - 1.0


class Renderer:
    """Holds the per-dataset constants (grid, lamp, dark, ambient) for rendering frames."""

    def __init__(self, grid: Optional[WavelengthGrid] = None):
        self.grid = grid or WavelengthGrid.default()
        self.lamp = lamp_counts(self.grid)
        self.dark = dark_counts(self.grid)
        self.ambient = ambient_profile(self.grid)
        self.calibration = CalibrationPair(self.dark + self.lamp, self.dark)

    def drift(self, rng: np.random.Generator, scale: float) -> np.ndarray:
        """Smooth random multiplicative distortion ``1 + delta(lambda)`` from fiber flex."""
        nm = self.grid.values
        out = np.ones_like(nm)
        if scale > 0:
            for _ in range(3):
                c = rng.uniform(nm[0], nm[-1])
                w = rng.uniform(60.0, 150.0)
                out += rng.normal(0.0, scale) * np.exp(-0.5 * ((nm - c) / w) ** 2)
        return np.maximum(out, 0.0)

    def signal(self, profile: Optional[ClassProfile], distance: float, params: EpisodeParams,
               object_gain: float = 1.0, nir_gain: float = 1.0, flex: float = 1.0,
               distortion: Optional[np.ndarray] = None) -> np.ndarray:
        """Noise-free, dark-subtracted counts."""
        refl = self.ambient
        if profile is not None:
            refl = refl + object_gain * (gain_vis(distance) * profile.visible_profile
                                         + nir_gain * gain_nir(distance) * profile.nir_profile)
        if distortion is not None:
            refl = refl * distortion
        return self.lamp * (params.gel_attenuation * flex) * refl

    def render(self, profile: Optional[ClassProfile], distance: float, params: EpisodeParams,
               rng: Optional[np.random.Generator] = None, *, timestamp: float = 0.0,
               object_gain: float = 1.0, nir_gain: float = 1.0, flex: float = 1.0,
               distortion: Optional[np.ndarray] = None) -> RawFrame:
        if profile is not None and not (params.d_grasp - 1e-12 <= distance <= params.d_start + 1e-12):
            raise ParameterError(f"distance {distance} outside [{params.d_grasp}, {params.d_start}]")
        sig = self.signal(profile, distance, params, object_gain, nir_gain, flex, distortion)
        counts = self.dark + sig
        if rng is not None:
            counts = counts + rng.normal(0.0, sig.mean() / params.snr, size=counts.size)
            np.maximum(counts, 0.0, out=counts)
        return RawFrame(counts, timestamp, float(distance) if profile is not None else None)


_DEFAULT_RENDERERS = {}


def _renderer(grid=None) -> Renderer:
    key = None if grid is None else grid.values.tobytes()
    if key not in _DEFAULT_RENDERERS:
        _DEFAULT_RENDERERS[key] = Renderer(grid)
    return _DEFAULT_RENDERERS[key]


def render_frame(profile: ClassProfile, distance: float, params: EpisodeParams,
                 rng: Optional[np.random.Generator] = None, **kwargs) -> RawFrame:
    """Render one frame on the default grid. ``rng=None`` switches noise off."""
    return _renderer().render(profile, distance, params, rng, **kwargs)


def render_ambient_frame(params: EpisodeParams, rng: Optional[np.random.Generator] = None,
                         timestamp: float = 0.0) -> RawFrame:
    """Empty-gripper frame: overhead lighting only, independent of any class."""
    return _renderer().render(None, params.d_start, params, rng, timestamp=timestamp)


def episode_rng(seed: int, class_index: int, episode_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(class_index), int(episode_index)]))


def episode_distances(params: EpisodeParams) -> np.ndarray:
    closing = np.linspace(params.d_start, params.d_grasp, params.n_closing)
    hold = np.full(params.n_frames - params.n_closing, params.d_grasp)
    return np.concatenate([closing, hold])


def generate_episode(material: MaterialClass, profiles, params: EpisodeParams,
                     episode_index: int = 0, renderer: Optional[Renderer] = None) -> GraspEpisode:
    """Approach from ``d_start`` to ``d_grasp`` then hold while lifting.

    The random stream is derived from ``(params.seed, class_index, episode_index)``.
    """
    renderer = renderer or _renderer()
    profile = profiles[material.class_index]
    rng = episode_rng(params.seed, material.class_index, episode_index)
    object_gain = 1.0 + rng.uniform(-params.object_gain_jitter, params.object_gain_jitter)
    nir_gain = 1.0 + rng.uniform(-params.nir_gain_jitter, params.nir_gain_jitter)
    dists = episode_distances(params)
    frames = []
    for i, d in enumerate(dists):
        flex, distortion = 1.0, None
        if i >= params.n_closing:
            # the fiber only flexes once the object is held and lifted
            flex += rng.uniform(-params.flex_jitter, params.flex_jitter)
            distortion = renderer.drift(rng, params.frame_drift)
        frame_nir = nir_gain * (1.0 + rng.uniform(-params.frame_nir_jitter, params.frame_nir_jitter))
        frames.append(renderer.render(profile, d, params, rng, timestamp=i / params.frame_rate,
                                      object_gain=object_gain, nir_gain=frame_nir, flex=flex,
                                      distortion=distortion))
    marks = {"pre_grasp": 0, "grasp": params.n_closing - 1}
    return GraspEpisode(frames, material, marks)


@dataclass(frozen=True)
class GenConfig:
    episodes_per_class: int = 5
    seed: int = 42
    profile_seed: Optional[int] = None
    params: EpisodeParams = field(default_factory=EpisodeParams)
    nir_shape_overlap: float = 0.9

    @property
    def resolved_profile_seed(self) -> int:
        return self.seed if self.profile_seed is None else self.profile_seed

    def to_dict(self) -> dict:
        p = dataclasses.asdict(self.params)
        p.pop("seed")
        return {"schema_version": 1, "episodes_per_class": self.episodes_per_class, "seed": self.seed,
                "profile_seed": self.resolved_profile_seed, "nir_shape_overlap": self.nir_shape_overlap,
                "params": p}

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in dataclasses.fields(EpisodeParams)} - {"seed"}
        extra = set(d.get("params", {})) - known
        if extra:
            raise ParameterError(f"unknown episode parameters {sorted(extra)}")
        seed = int(d.get("seed", 42))
        params = EpisodeParams(seed=seed, **d.get("params", {}))
        return cls(int(d.get("episodes_per_class", 5)), seed, d.get("profile_seed"), params,
                   float(d.get("nir_shape_overlap", cls.nir_shape_overlap)))

    def profiles(self) -> list:
        return make_profiles(self.resolved_profile_seed, nir_shape_overlap=self.nir_shape_overlap)

    def with_params(self, **kw) -> "GenConfig":
        return dataclasses.replace(self, params=dataclasses.replace(self.params, **kw))


def iter_episodes(config: GenConfig, profiles=None, renderer: Optional[Renderer] = None):
    """Yield ``(episode_id, GraspEpisode)`` in class-major order."""
    profiles = profiles or config.profiles()
    params = dataclasses.replace(config.params, seed=config.seed)
    for m in MATERIAL_CLASSES:
        for e in range(config.episodes_per_class):
            ep = generate_episode(m, profiles, params, e, renderer)
            ep.episode_id = m.class_index * config.episodes_per_class + e
            yield ep.episode_id, ep


def build_dataset(config: GenConfig) -> SpectralDataset:
    if config.episodes_per_class < 1:
        raise ParameterError("episodes_per_class must be >= 1")
    renderer = _renderer()
    rows = {k: [] for k in ("ep", "label", "idx", "t", "d", "c")}
    for ep_id, ep in iter_episodes(config, renderer=renderer):
        for i, f in enumerate(ep.frames):
            rows["ep"].append(ep_id)
            rows["label"].append(ep.label.name)
            rows["idx"].append(i)
            rows["t"].append(f.timestamp)
            rows["d"].append(f.distance)
            rows["c"].append(f.counts)
    return SpectralDataset(
        grid=renderer.grid,
        calibration=renderer.calibration,
        episode_ids=np.array(rows["ep"], dtype=np.int64),
        labels=np.array(rows["label"], dtype=object),
        frame_index=np.array(rows["idx"], dtype=np.int64),
        timestamps=np.array(rows["t"], dtype=float),
        distances=np.array(rows["d"], dtype=float),
        counts=np.vstack(rows["c"]),
    )


def generate_dataset(episodes_per_class: int = 5, seed: int = 42, out_dir=None,
                     config: Optional[GenConfig] = None) -> SpectralDataset:
    """Build the synthetic dataset and, if ``out_dir`` is given, write it there."""
    config = config or GenConfig(episodes_per_class=episodes_per_class, seed=seed,
                                 params=EpisodeParams(seed=seed))
    ds = build_dataset(config)
    if out_dir is not None:
        out = Path(out_dir)
        write_dataset(out, ds)
        write_json(out / "gen_config.json", config.to_dict())
    return ds


def load_gen_config(path) -> GenConfig:
    return GenConfig.from_dict(json.loads(Path(path).read_text()))
