"""On-disk dataset directory: ``grid.csv``, ``frames.csv``, ``calibration.csv``.

Floats are written with 9 significant digits so that re-running a
generator yields byte-identical files.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataFormatError, DimensionError
from .spectra import CalibrationPair, WavelengthGrid

FLOAT_FMT = "%.9g"
META_COLUMNS = ["episode_id", "label", "frame_index", "timestamp_s", "distance_cm"]

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def serialize_grid(grid: WavelengthGrid) -> bytes:
    return "".join(FLOAT_FMT % v + "\n" for v in grid.values).encode()


def grid_hash(grid: WavelengthGrid) -> str:
    return f"{fnv1a_64(serialize_grid(grid)):016x}"


def fmt(v: float) -> str:
    return FLOAT_FMT % v


@dataclass
class SpectralDataset:
    grid: WavelengthGrid
    calibration: CalibrationPair
    episode_ids: np.ndarray
    labels: np.ndarray
    frame_index: np.ndarray
    timestamps: np.ndarray
    distances: np.ndarray  # NaN where absent
    counts: np.ndarray

    def __post_init__(self):
        n = self.counts.shape[0]
        for name in ("episode_ids", "labels", "frame_index", "timestamps", "distances"):
            if len(getattr(self, name)) != n:
                raise DimensionError(f"{name} has {len(getattr(self, name))} rows, counts has {n}")
        if self.counts.shape[1] != len(self.grid) or len(self.calibration) != len(self.grid):
            raise DimensionError("grid, calibration and frame widths disagree")

    def __len__(self):
        return self.counts.shape[0]

    @property
    def classes(self) -> list:
        return sorted(set(self.labels.tolist()))

    def subset(self, rows: np.ndarray) -> "SpectralDataset":
        return SpectralDataset(self.grid, self.calibration, self.episode_ids[rows], self.labels[rows],
                               self.frame_index[rows], self.timestamps[rows], self.distances[rows],
                               self.counts[rows])

    def episode_rows(self) -> dict:
        """episode id -> row indices in frame order."""
        out = {}
        order = np.lexsort((self.frame_index, self.episode_ids))
        eps = self.episode_ids[order]
        bounds = np.flatnonzero(np.diff(eps)) + 1
        for chunk in np.split(order, bounds):
            if chunk.size:
                out[int(self.episode_ids[chunk[0]])] = chunk
        return out


def write_grid(path: Path, grid: WavelengthGrid):
    path.write_bytes(serialize_grid(grid))


def read_grid(path: Path) -> WavelengthGrid:
    try:
        vals = np.loadtxt(path, dtype=float, ndmin=1)
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"cannot parse grid: {exc}", path=path) from exc
    return WavelengthGrid(vals)


def write_calibration(path: Path, grid: WavelengthGrid, cal: CalibrationPair):
    lines = ["wavelength_nm,white,dark"]
    lines += [f"{fmt(w)},{fmt(a)},{fmt(b)}" for w, a, b in zip(grid.values, cal.white, cal.dark)]
    path.write_text("\n".join(lines) + "\n")


def read_calibration(path: Path, grid: WavelengthGrid) -> CalibrationPair:
    try:
        df = pd.read_csv(path)
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"cannot read calibration: {exc}", path=path) from exc
    if list(df.columns) != ["wavelength_nm", "white", "dark"]:
        raise DataFormatError(f"unexpected calibration header {list(df.columns)}", path=path, row=1)
    if len(df) != len(grid):
        raise DataFormatError(f"calibration has {len(df)} rows, grid has {len(grid)}", path=path)
    _require_numeric(df, ["wavelength_nm", "white", "dark"], path)
    if not np.allclose(df["wavelength_nm"].to_numpy(), grid.values, rtol=1e-8, atol=0):
        raise DataFormatError("calibration wavelengths do not match grid.csv", path=path)
    return CalibrationPair(df["white"].to_numpy(float), df["dark"].to_numpy(float))


def _require_numeric(df: pd.DataFrame, columns, path):
    for col in columns:
        if not pd.api.types.is_numeric_dtype(df[col]):
            bad = pd.to_numeric(df[col], errors="coerce").isna() & df[col].notna()
            row = int(np.flatnonzero(bad.to_numpy())[0]) + 2 if bad.any() else None
            raise DataFormatError(f"non-numeric value in column {col!r}", path=path, row=row)


def format_frame_rows(episode_ids, labels, frame_index, timestamps, distances, counts) -> str:
    buf = io.StringIO()
    for i in range(counts.shape[0]):
        d = distances[i]
        dist = "" if np.isnan(d) else fmt(d)
        buf.write(f"{int(episode_ids[i])},{labels[i]},{int(frame_index[i])},{fmt(timestamps[i])},{dist},")
        buf.write(",".join(map(fmt, counts[i].tolist())))
        buf.write("\n")
    return buf.getvalue()


def frames_header(n_channels: int) -> str:
    return ",".join(META_COLUMNS + [f"c{i}" for i in range(n_channels)]) + "\n"


def write_dataset(root: Path, ds: SpectralDataset):
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        write_grid(root / "grid.csv", ds.grid)
        write_calibration(root / "calibration.csv", ds.grid, ds.calibration)
        with open(root / "frames.csv", "w") as fh:
            fh.write(frames_header(len(ds.grid)))
            fh.write(format_frame_rows(ds.episode_ids, ds.labels, ds.frame_index, ds.timestamps,
                                       ds.distances, ds.counts))
    except OSError as exc:
        raise DataFormatError(f"cannot write dataset: {exc}", path=root) from exc


def read_dataset(root: Path) -> SpectralDataset:
    root = Path(root)
    for name in ("grid.csv", "frames.csv", "calibration.csv"):
        if not (root / name).is_file():
            raise DataFormatError(f"missing {name}", path=root / name)
    grid = read_grid(root / "grid.csv")
    cal = read_calibration(root / "calibration.csv", grid)
    path = root / "frames.csv"
    try:
        df = pd.read_csv(path, dtype={"label": str, "distance_cm": float}, keep_default_na=False,
                         na_values={"distance_cm": [""]})
    except ValueError as exc:
        raise DataFormatError(f"cannot parse frames: {exc}", path=path) from exc
    expected = META_COLUMNS + [f"c{i}" for i in range(len(grid))]
    if list(df.columns) != expected:
        raise DataFormatError("frames.csv header does not match grid length", path=path, row=1)
    count_cols = expected[len(META_COLUMNS):]
    _require_numeric(df, ["episode_id", "frame_index", "timestamp_s"] + count_cols, path)
    counts = df[count_cols].to_numpy(dtype=float)
    bad_rows = np.flatnonzero(~np.all(np.isfinite(counts), axis=1) | np.any(counts < 0, axis=1))
    if bad_rows.size:
        raise DataFormatError("counts must be finite and nonnegative", path=path, row=int(bad_rows[0]) + 2)
    return SpectralDataset(
        grid=grid,
        calibration=cal,
        episode_ids=df["episode_id"].to_numpy(dtype=np.int64),
        labels=df["label"].to_numpy(dtype=object),
        frame_index=df["frame_index"].to_numpy(dtype=np.int64),
        timestamps=df["timestamp_s"].to_numpy(dtype=float),
        distances=df["distance_cm"].to_numpy(dtype=float),
        counts=counts,
    )


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"cannot read JSON: {exc}", path=path) from exc
