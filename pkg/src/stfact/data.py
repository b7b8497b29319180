"""Dataset containers and file formats.

Observations are dense (N, T, D) float64 arrays with a boolean mask that
is False exactly at missing cells; missing cells hold a 0.0 placeholder so
that masked arithmetic never sees NaN.  Two interchange formats are
supported: a long CSV with header ``instance,t,d,value`` where absent rows
mean missing, and a raw little-endian float64 dump with a JSON manifest
plus a uint8 mask file.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError

Array = np.ndarray

MANIFEST_SUFFIX = ".manifest.json"


@dataclass
class MaskedTensor:
    """Multivariate time series for N instances with missing-cell mask."""

    values: Array  # (N, T, D) float64, 0.0 at missing cells
    mask: Array  # (N, T, D) bool, False where missing
    instance_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 3:
            raise DataError(f"values must be (N, T, D), got shape {self.values.shape}")
        if self.mask.shape != self.values.shape:
            raise DataError("mask shape does not match values shape")
        if not self.instance_ids:
            self.instance_ids = [f"i{k:04d}" for k in range(self.values.shape[0])]
        if len(self.instance_ids) != self.values.shape[0]:
            raise DataError("instance_ids length does not match N")
        if not np.isfinite(self.values[self.mask]).all():
            raise DataError("observed cells contain non-finite values")
        # Normalize the placeholder so serialized bytes are reproducible.
        self.values = np.where(self.mask, self.values, 0.0)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def t(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    @property
    def coverage(self) -> float:
        """Fraction of observed cells: 1 - missing / (N*T*D)."""
        return float(self.mask.mean())

    def subset(self, idx) -> "MaskedTensor":
        idx = np.asarray(idx)
        return MaskedTensor(
            self.values[idx].copy(),
            self.mask[idx].copy(),
            [self.instance_ids[i] for i in idx],
        )

    def flatten_time(self) -> tuple[Array, Array]:
        """Concatenate instances chronologically into one (N*T, D) series."""
        return (
            self.values.reshape(-1, self.d).copy(),
            self.mask.reshape(-1, self.d).copy(),
        )


@dataclass
class VoxelGrid:
    """Spatial sample locations, one 3-D position per observed column."""

    positions: Array  # (D, 3)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise DataError(f"grid positions must be (D, 3), got {self.positions.shape}")

    @classmethod
    def lattice(cls, n_per_axis: int, lo: float, hi: float) -> "VoxelGrid":
        axis = np.linspace(lo, hi, n_per_axis)
        xs, ys, zs = np.meshgrid(axis, axis, axis, indexing="ij")
        return cls(np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1))

    @property
    def d(self) -> int:
        return self.positions.shape[0]

    def bbox(self) -> tuple[Array, Array]:
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def diameter(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def nn_spacing(self) -> float:
        """Median nearest-neighbor distance between grid points."""
        dist, _ = cKDTree(self.positions).query(self.positions, k=2)
        return float(np.median(dist[:, 1]))

    def local_maxima(self, values: Array, radius: float | None = None) -> Array:
        """Indices of points whose value is >= all neighbors within radius."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.d,):
            raise DataError("field length does not match grid size")
        if radius is None:
            radius = 1.5 * self.nn_spacing()
        tree = cKDTree(self.positions)
        out = []
        for i, neighbors in enumerate(tree.query_ball_point(self.positions, r=radius)):
            if all(values[i] >= values[j] for j in neighbors):
                out.append(i)
        return np.array(out, dtype=np.int64)


@dataclass
class ControlSequence:
    """One-hot exogenous control codes aligned with the observations."""

    codes: Array  # (N, T, U) float64 one-hot rows

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        if self.codes.ndim != 3:
            raise DataError(f"controls must be (N, T, U), got {self.codes.shape}")
        ok = np.isin(self.codes, (0.0, 1.0)).all() and (self.codes.sum(axis=2) == 1.0).all()
        if not ok:
            raise DataError("control rows must be one-hot")

    @classmethod
    def from_labels(cls, labels: Array, n_controls: int) -> "ControlSequence":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() >= n_controls:
            raise DataError("control labels out of range")
        return cls(np.eye(n_controls)[labels])

    @property
    def u(self) -> int:
        return self.codes.shape[2]

    def flatten_time(self) -> Array:
        return self.codes.reshape(-1, self.u).copy()


def mean_square_field(data: MaskedTensor) -> Array:
    """Masked mean of squared signal per column; 0 for never-observed columns."""
    count = data.mask.sum(axis=(0, 1))
    total = (data.values**2).sum(axis=(0, 1))
    return np.divide(total, count, out=np.zeros(data.d), where=count > 0)


def load_tensor(path) -> MaskedTensor:
    """Load a dataset from long CSV or dense-binary format, by extension."""
    path = Path(path)
    if path.suffix == ".csv":
        return _load_csv_long(path)
    return _load_dense(path)


def save_tensor(data: MaskedTensor, path) -> Path:
    """Write a dataset; returns the path to reload it from."""
    path = Path(path)
    if path.suffix == ".csv":
        _save_csv_long(data, path)
        return path
    return _save_dense(data, path)


def _load_csv_long(path: Path) -> MaskedTensor:
    rows: list[tuple[str, int, int, float]] = []
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise DataError(f"cannot open {path}: {e}") from e
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["instance", "t", "d", "value"]:
            raise DataError(f"{path}: expected header instance,t,d,value, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                inst, t, d, value = row[0], int(row[1]), int(row[2]), float(row[3])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from e
            if t < 0 or d < 0:
                raise DataError(f"{path}:{lineno}: negative index")
            rows.append((inst, t, d, value))
    if not rows:
        raise DataError(f"{path}: no data rows")
    ids: list[str] = []
    index: dict[str, int] = {}
    for inst, _, _, _ in rows:
        if inst not in index:
            index[inst] = len(ids)
            ids.append(inst)
    T = max(r[1] for r in rows) + 1
    D = max(r[2] for r in rows) + 1
    values = np.zeros((len(ids), T, D))
    mask = np.zeros((len(ids), T, D), dtype=bool)
    for inst, t, d, value in rows:
        n = index[inst]
        if mask[n, t, d]:
            raise DataError(f"{path}: duplicate cell ({inst}, {t}, {d})")
        if np.isfinite(value):
            values[n, t, d] = value
            mask[n, t, d] = True
    return MaskedTensor(values, mask, ids)


def _save_csv_long(data: MaskedTensor, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance", "t", "d", "value"])
        for n in range(data.n):
            ts, ds = np.nonzero(data.mask[n])
            for t, d in zip(ts, ds):
                writer.writerow([data.instance_ids[n], t, d, repr(float(data.values[n, t, d]))])


def _manifest_prefix(path: Path) -> Path:
    name = path.name
    if name.endswith(MANIFEST_SUFFIX):
        return path.with_name(name[: -len(MANIFEST_SUFFIX)])
    return path


def _save_dense(data: MaskedTensor, path: Path) -> Path:
    prefix = _manifest_prefix(path)
    np.ascontiguousarray(data.values, dtype="<f8").tofile(f"{prefix}.f64")
    np.ascontiguousarray(data.mask, dtype=np.uint8).tofile(f"{prefix}.mask.u8")
    manifest = {
        "n": data.n,
        "t": data.t,
        "d": data.d,
        "ids": data.instance_ids,
        "missing_sentinel": "mask-file",
    }
    manifest_path = Path(f"{prefix}{MANIFEST_SUFFIX}")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest_path


def _load_dense(path: Path) -> MaskedTensor:
    prefix = _manifest_prefix(path)
    manifest_path = Path(f"{prefix}{MANIFEST_SUFFIX}")
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"{manifest_path}: invalid JSON: {e}") from e
    for key in ("n", "t", "d", "ids", "missing_sentinel"):
        if key not in manifest:
            raise DataError(f"{manifest_path}: missing field '{key}'")
    if manifest["missing_sentinel"] != "mask-file":
        raise DataError(f"{manifest_path}: unsupported missing_sentinel")
    n, t, d = int(manifest["n"]), int(manifest["t"]), int(manifest["d"])
    values = np.fromfile(f"{prefix}.f64", dtype="<f8")
    if values.size != n * t * d:
        raise DataError(
            f"{prefix}.f64: expected {n * t * d} values, found {values.size}"
        )
    mask = np.fromfile(f"{prefix}.mask.u8", dtype=np.uint8)
    if mask.size != n * t * d:
        raise DataError(f"{prefix}.mask.u8: wrong length")
    return MaskedTensor(
        values.reshape(n, t, d).astype(np.float64),
        mask.reshape(n, t, d).astype(bool),
        [str(s) for s in manifest["ids"]],
    )


def save_grid(grid: VoxelGrid, prefix) -> Path:
    out = Path(f"{prefix}.grid.f64")
    np.ascontiguousarray(grid.positions, dtype="<f8").tofile(out)
    return out


def load_grid(path) -> VoxelGrid:
    raw = np.fromfile(path, dtype="<f8")
    if raw.size % 3 != 0:
        raise DataError(f"{path}: grid file length not divisible by 3")
    return VoxelGrid(raw.reshape(-1, 3))


def save_controls(controls: ControlSequence, prefix) -> Path:
    out = Path(f"{prefix}.controls.json")
    labels = controls.codes.argmax(axis=2).astype(int)
    with open(out, "w") as fh:
        json.dump({"u": controls.u, "labels": labels.tolist()}, fh)
        fh.write("\n")
    return out


def load_controls(path) -> ControlSequence:
    with open(path) as fh:
        payload = json.load(fh)
    return ControlSequence.from_labels(np.array(payload["labels"]), int(payload["u"]))


def split_sequences(
    series: Array, seq_len: int, mask: Array | None = None, id_prefix: str = "seq"
) -> MaskedTensor:
    """Chop one long (T_total, D) series into fixed-length instances.

    A trailing remainder shorter than seq_len is dropped.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise DataError("series must be (T_total, D)")
    if seq_len < 1:
        raise DataError("seq_len must be positive")
    n = series.shape[0] // seq_len
    if n == 0:
        raise DataError("series shorter than one sequence")
    if mask is None:
        mask = np.isfinite(series)
    mask = np.asarray(mask, dtype=bool)
    values = series[: n * seq_len].reshape(n, seq_len, -1)
    m = mask[: n * seq_len].reshape(n, seq_len, -1)
    ids = [f"{id_prefix}{k:04d}" for k in range(n)]
    return MaskedTensor(np.where(m, values, 0.0), m, ids)


def temporal_holdout(data: MaskedTensor, n_test: int) -> tuple[MaskedTensor, MaskedTensor]:
    """Split off the last n_test instances (chronological tail) as test."""
    if not 0 < n_test < data.n:
        raise DataError(f"n_test must be in [1, {data.n - 1}], got {n_test}")
    return data.subset(np.arange(data.n - n_test)), data.subset(np.arange(data.n - n_test, data.n))
