"""Spectral data model plus calibration, smoothing and scan averaging.

All functions are pure. Batch variants (``*_batch``) accept 2-D arrays of
shape ``(n_frames, n_channels)`` and are what the training pipeline uses;
the single-frame variants wrap them for streaming.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DegenerateCalibrationError, DimensionError, DomainError, ParameterError

N_CHANNELS = 2048
LAMBDA_MIN_NM = 350.0
LAMBDA_MAX_NM = 1150.0
FRAME_RATE_HZ = 10.0

R_MAX = 2.0
EPS_CAL_REL = 1e-6

SAVGOL_WINDOW = 17
SAVGOL_DEGREE = 5


@dataclass(frozen=True)
class WavelengthGrid:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ParameterError("wavelength grid needs at least 2 points")
        if not np.all(np.isfinite(v)) or not np.all(np.diff(v) > 0):
            raise ParameterError("wavelength grid must be finite and strictly increasing")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def default(cls, n: int = N_CHANNELS) -> "WavelengthGrid":
        return cls(np.linspace(LAMBDA_MIN_NM, LAMBDA_MAX_NM, n))

    def __len__(self):
        return self.values.size

    def mask_below(self, nm: float) -> np.ndarray:
        return self.values < nm


@dataclass(frozen=True)
class RawFrame:
    counts: np.ndarray
    timestamp: float = 0.0
    distance: Optional[float] = None

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=float)
        if c.ndim != 1:
            raise DimensionError("frame counts must be 1-D")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise DomainError("frame counts must be finite and nonnegative")
        if self.distance is not None and not self.distance >= 0:
            raise DomainError(f"distance must be >= 0, got {self.distance}")
        object.__setattr__(self, "counts", c)


@dataclass(frozen=True)
class CalibrationPair:
    white: np.ndarray
    dark: np.ndarray
    valid_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        w = np.asarray(self.white, dtype=float)
        d = np.asarray(self.dark, dtype=float)
        if w.shape != d.shape or w.ndim != 1:
            raise DimensionError(f"white {w.shape} and dark {d.shape} must be equal-length vectors")
        if np.any(d < 0) or not np.all(np.isfinite(w)) or not np.all(np.isfinite(d)):
            raise DomainError("calibration vectors must be finite with dark >= 0")
        eps = EPS_CAL_REL * float(np.max(w)) if w.size else 0.0
        mask = (w - d) > eps
        object.__setattr__(self, "white", w)
        object.__setattr__(self, "dark", d)
        object.__setattr__(self, "valid_mask", mask)

    def __len__(self):
        return self.white.size

    @property
    def span(self) -> np.ndarray:
        return self.white - self.dark


@dataclass(frozen=True)
class ReflectanceCurve:
    values: np.ndarray
    valid_mask: np.ndarray

    def __len__(self):
        return self.values.size


def calibrate_batch(counts: np.ndarray, cal: CalibrationPair) -> np.ndarray:
    """Convert raw counts to reflectance, ``(raw - dark) / (white - dark)``.

    Invalid channels are zeroed and valid ones clamped to ``[0, R_MAX]``.
    """
    counts = np.asarray(counts, dtype=float)
    if counts.shape[-1] != len(cal):
        raise DimensionError(f"frame has {counts.shape[-1]} channels, calibration has {len(cal)}")
    mask = cal.valid_mask
    if not mask.any():
        raise DegenerateCalibrationError("no channel has white - dark above the calibration floor")
    span = np.where(mask, cal.span, 1.0)
    refl = (counts - cal.dark) / span
    np.clip(refl, 0.0, R_MAX, out=refl)
    refl[..., ~mask] = 0.0
    # NaN only arises from NaN counts, which RawFrame rejects; guard batch input too
    if not np.all(np.isfinite(refl)):
        raise DomainError("non-finite counts in calibration input")
    return refl


def calibrate(raw: RawFrame, cal: CalibrationPair) -> ReflectanceCurve:
    return ReflectanceCurve(calibrate_batch(raw.counts, cal), cal.valid_mask)


def savgol_coeffs(window: int, degree: int) -> np.ndarray:
    """Correlation weights that evaluate the least-squares polynomial at the window centre."""
    _check_savgol(window, degree)
    return _savgol_coeffs_cached(int(window), int(degree)).copy()


@lru_cache(maxsize=32)
def _savgol_coeffs_cached(window: int, degree: int) -> np.ndarray:
    half = window // 2
    offsets = np.arange(-half, half + 1, dtype=float)
    vander = np.vander(offsets, degree + 1, increasing=True)
    # row 0 of the pseudo-inverse maps samples to the constant term, i.e. the value at offset 0
    return np.linalg.pinv(vander)[0]


def _check_savgol(window, degree):
    if int(window) != window or int(degree) != degree:
        raise ParameterError("window and degree must be integers")
    if degree < 0:
        raise ParameterError("degree must be nonnegative")
    if window % 2 == 0:
        raise ParameterError(f"window must be odd, got {window}")
    if window <= degree:
        raise ParameterError(f"window {window} must exceed degree {degree}")


def savgol_batch(values: np.ndarray, window: int = SAVGOL_WINDOW, degree: int = SAVGOL_DEGREE,
                 clip: bool = False) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    _check_savgol(window, degree)
    if window > values.shape[-1]:
        raise ParameterError(f"window {window} longer than signal ({values.shape[-1]})")
    out = correlate1d(values, _savgol_coeffs_cached(int(window), int(degree)), axis=-1, mode="mirror")
    if clip:
        np.clip(out, 0.0, R_MAX, out=out)
    return out


def savgol_smooth(curve: ReflectanceCurve, window: int = SAVGOL_WINDOW,
                  degree: int = SAVGOL_DEGREE) -> ReflectanceCurve:
    """Smooth a reflectance curve; result is re-clamped and invalid channels stay 0."""
    out = savgol_batch(curve.values, window, degree, clip=True)
    out[~curve.valid_mask] = 0.0
    return ReflectanceCurve(out, curve.valid_mask)


def scan_average(frames: Sequence[RawFrame]) -> RawFrame:
    if len(frames) == 0:
        raise ParameterError("scan_average needs at least one frame")
    n = frames[0].counts.size
    if any(f.counts.size != n for f in frames):
        raise DimensionError("frames have unequal channel counts")
    counts = np.mean([f.counts for f in frames], axis=0)
    ts = float(np.mean([f.timestamp for f in frames]))
    dists = [f.distance for f in frames]
    dist = None if any(d is None for d in dists) else float(np.mean(dists))
    return RawFrame(counts, ts, dist)


@dataclass(frozen=True)
class PreprocessConfig:
    """Settings for the raw-counts to model-input path.

    ``scan_average`` is a trailing window length in frames (1 disables it).
    ``band_max_nm`` restricts the channels fed to the model, used for the
    visible-only ablation.
    """

    window: int = SAVGOL_WINDOW
    degree: int = SAVGOL_DEGREE
    scan_average: int = 1
    band_max_nm: Optional[float] = None

    def to_dict(self):
        return {"window": self.window, "degree": self.degree,
                "scan_average": self.scan_average, "band_max_nm": self.band_max_nm}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("window", "degree", "scan_average", "band_max_nm") if k in d})

    def channel_mask(self, grid: WavelengthGrid) -> np.ndarray:
        if self.band_max_nm is None:
            return np.ones(len(grid), dtype=bool)
        return grid.mask_below(self.band_max_nm)


def trailing_average(counts: np.ndarray, episode_ids: np.ndarray, n: int) -> np.ndarray:
    """Trailing mean over the last ``n`` frames of each episode (rows assumed in frame order)."""
    if n <= 1:
        return counts
    out = np.empty_like(counts)
    for ep in np.unique(episode_ids):
        idx = np.flatnonzero(episode_ids == ep)
        block = counts[idx]
        csum = np.cumsum(block, axis=0)
        lag = np.zeros_like(csum)
        lag[n:] = csum[:-n]
        width = np.minimum(np.arange(1, len(idx) + 1), n)[:, None]
        out[idx] = (csum - lag) / width
    return out


def preprocess_batch(counts: np.ndarray, cal: CalibrationPair, grid: WavelengthGrid,
                     config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """calibrate -> smooth -> band select, for a stack of frames."""
    refl = calibrate_batch(counts, cal)
    sm = savgol_batch(refl, config.window, config.degree, clip=True)
    sm[..., ~cal.valid_mask] = 0.0
    return sm[..., config.channel_mask(grid)]
