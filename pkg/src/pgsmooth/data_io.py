"""Snapshot files, synthetic DIC data and field export.

Snapshot format
---------------
A CSV file whose leading ``#`` lines hold a JSON header, followed by one
row per node::

    # {"format": "pgsmooth-snapshot", "version": 1, "dims": [21, 21],
    #  "spacing": 0.25, "origin": [0.0, 0.0], "protocol_id": "p1",
    #  "constraint_mask": [true, true], "units": "mm"}
    index,x1,x2,u1,u2
    0,0,0,0.0012,-0.0003
    ...

Nodes are row-major with x1 varying fastest. Floats are written with
``repr`` so a load/save round trip is exact. Vendor DIC exports should be
converted to this layout before loading (see :func:`snapshot_from_arrays`).
"""

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, PGSError, SnapshotParseError
from .field_recon import check_coefficients, strain_from_gradient
from .pgs_opt import DisplacementSample
from .rk_basis import NodeGrid, uniform_points

FORMAT_NAME = "pgsmooth-snapshot"
UNIT_SCALE = {"m": 1.0, "mm": 1e-3, "um": 1e-6}
COLUMNS = ["index", "x1", "x2", "u1", "u2"]


@dataclass
class Snapshot:
    """In-memory snapshot: grid geometry plus one displacement sample."""

    dims: tuple
    spacing: float
    origin: tuple
    u: np.ndarray
    protocol_id: str = ""
    constraint_mask: tuple = (True, True)
    units: str = "mm"
    extra: dict = field(default_factory=dict)

    @property
    def points(self):
        n1, n2 = self.dims
        ext = ((n1 - 1) * self.spacing, (n2 - 1) * self.spacing)
        return uniform_points(self.dims, self.origin, ext)

    def header(self):
        h = {"format": FORMAT_NAME, "version": 1, "dims": list(self.dims),
             "spacing": self.spacing, "origin": list(self.origin),
             "protocol_id": self.protocol_id,
             "constraint_mask": list(self.constraint_mask), "units": self.units}
        if self.extra:
            h["extra"] = self.extra
        return h

    def sample(self):
        return DisplacementSample(self.u, self.protocol_id, self.constraint_mask)

    def grid(self, center_shape=(10, 10)):
        return NodeGrid.uniform(self.dims, center_shape, self.spacing, self.origin)


def snapshot_from_arrays(u, dims, spacing, origin=(0.0, 0.0), **kw):
    return Snapshot(tuple(dims), float(spacing), tuple(map(float, origin)),
                    np.asarray(u, dtype=float), **kw)


def _fmt(x):
    return repr(float(x))


def dumps_snapshot(snap):
    buf = io.StringIO()
    header = json.dumps(snap.header(), sort_keys=True)
    buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for k, ((x1, x2), (u1, u2)) in enumerate(zip(snap.points, snap.u)):
        w.writerow([k, _fmt(x1), _fmt(x2), _fmt(u1), _fmt(u2)])
    return buf.getvalue()


def save_snapshot(snap, path):
    text = dumps_snapshot(snap)
    try:
        with open(path, "w", newline="") as f:
            f.write(text)
    except OSError as exc:
        raise PGSError(f"cannot write snapshot {path}: {exc}") from exc


def read_snapshot(path):
    """Parse a snapshot file into a :class:`Snapshot` with full validation."""
    try:
        with open(path, newline="") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise SnapshotParseError(path, 0, str(exc)) from exc

    header_lines = []
    lineno = 0
    while lineno < len(lines) and lines[lineno].startswith("#"):
        header_lines.append(lines[lineno][1:].strip())
        lineno += 1
    try:
        header = json.loads(" ".join(header_lines))
    except json.JSONDecodeError as exc:
        raise SnapshotParseError(path, 1, f"bad header: {exc}") from exc
    if header.get("format") != FORMAT_NAME:
        raise SnapshotParseError(path, 1, "not a pgsmooth snapshot")
    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = float(header["spacing"])
        origin = tuple(float(o) for o in header.get("origin", (0.0, 0.0)))
        mask = tuple(bool(m) for m in header.get("constraint_mask", (True, True)))
        units = header.get("units", "mm")
    except (KeyError, TypeError, ValueError) as exc:
        raise SnapshotParseError(path, 1, f"bad header field: {exc}") from exc
    if len(dims) != 2 or min(dims) < 2 or not spacing > 0:
        raise SnapshotParseError(path, 1, f"invalid grid dims {dims} / spacing {spacing}")
    if units not in UNIT_SCALE:
        raise SnapshotParseError(path, 1, f"unknown unit {units!r}")

    if lineno >= len(lines) or [c.strip() for c in lines[lineno].split(",")] != COLUMNS:
        raise SnapshotParseError(path, lineno + 1, f"expected column header {COLUMNS}")
    lineno += 1
    n = dims[0] * dims[1]
    data = np.empty((n, 4))
    count = 0
    for row in csv.reader(lines[lineno:]):
        lineno += 1
        if not row:
            continue
        if len(row) != 5:
            raise SnapshotParseError(path, lineno, f"expected 5 fields, got {len(row)}")
        try:
            idx = int(row[0])
            vals = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise SnapshotParseError(path, lineno, f"malformed row: {exc}") from exc
        if not all(math.isfinite(v) for v in vals):
            raise SnapshotParseError(path, lineno, "non-finite value")
        if idx != count:
            raise SnapshotParseError(path, lineno, f"node index {idx} out of order, expected {count}")
        if count >= n:
            raise SnapshotParseError(path, lineno, f"more than {n} rows for dims {dims}")
        data[count] = vals
        count += 1
    if count != n:
        raise SnapshotParseError(path, lineno, f"{count} rows for dims {dims}, expected {n}")

    snap = Snapshot(dims, spacing, origin, data[:, 2:].copy(), header.get("protocol_id", ""),
                    mask, units, header.get("extra", {}))
    if not np.allclose(data[:, :2], snap.points, rtol=0, atol=1e-9 * max(1.0, spacing * max(dims))):
        raise SnapshotParseError(path, lineno, "node coordinates do not match the header grid")
    return snap


def convert_units(snap, unit):
    """Copy of ``snap`` with lengths expressed in ``unit``."""
    if unit not in UNIT_SCALE:
        raise InvalidParameterError(f"unknown unit {unit!r}")
    f = UNIT_SCALE[snap.units] / UNIT_SCALE[unit]
    return Snapshot(snap.dims, snap.spacing * f, tuple(o * f for o in snap.origin),
                    snap.u * f, snap.protocol_id, snap.constraint_mask, unit, dict(snap.extra))


def load_snapshot(path, center_shape=(10, 10), unit=None):
    """Load a snapshot as ``(NodeGrid, DisplacementSample)``."""
    snap = read_snapshot(path)
    if unit is not None:
        snap = convert_units(snap, unit)
    return snap.grid(center_shape), snap.sample()


# -- synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic DIC snapshot.

    Ground truth is either a homogeneous stretch (``"affine"``) or a stretch
    with a smooth sinusoidal modulation (``"trig"``), both strictly tensile.
    The artifact is a compressive Gaussian bump
    ``-A exp(-|x - c|^2 / r^2) (x - c)`` whose strain at ``c`` is ``-A``
    in both normal directions on top of the truth.
    """

    dims: tuple = (21, 21)
    spacing: float = 0.25
    kind: str = "affine"
    stretch: tuple = (0.05, 0.05)
    shear: float = 0.0
    sigma: float = 0.003
    artifact_center: tuple = None
    artifact_radius: float = 1.5
    artifact_amplitude: float = 0.0
    seed: int = 0
    protocol_id: str = "synthetic"
    constraint_mask: tuple = (True, True)

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidParameterError("sigma must be non-negative")
        if self.artifact_amplitude != 0 and not self.artifact_radius > 0:
            raise InvalidParameterError("artifact radius must be positive")
        if self.kind not in ("affine", "trig"):
            raise InvalidParameterError(f"unknown field kind {self.kind!r}")
        if len(self.dims) != 2 or min(self.dims) < 2:
            raise InvalidParameterError(f"invalid dims {self.dims}")

    @property
    def extent(self):
        return ((self.dims[0] - 1) * self.spacing, (self.dims[1] - 1) * self.spacing)

    def center(self):
        if self.artifact_center is not None:
            return tuple(self.artifact_center)
        return (0.5 * self.extent[0], 0.5 * self.extent[1])


def artifact_spec(seed, **overrides):
    """Default artifact scenario: equi-biaxial stretch with a compressive bump
    placed at a seed-dependent position near the specimen center."""
    rng = np.random.default_rng([seed, 1])
    base = SyntheticSpec()
    ext = base.extent
    c = (ext[0] * (0.5 + rng.uniform(-0.15, 0.15)), ext[1] * (0.5 + rng.uniform(-0.15, 0.15)))
    kw = dict(artifact_center=c, artifact_amplitude=0.07, seed=seed)
    kw.update(overrides)
    return SyntheticSpec(**kw)


def true_displacement(spec, x):
    """Ground-truth displacement and gradient at points ``x``."""
    x = np.asarray(x, dtype=float)
    s1, s2 = spec.stretch
    A = np.array([[s1, spec.shear], [spec.shear, s2]])
    u = x @ A.T
    grad = np.broadcast_to(A, (len(x), 2, 2)).copy()
    if spec.kind == "trig":
        L1, L2 = spec.extent
        k1, k2 = np.pi / L1, np.pi / L2
        amp = 0.25 * min(s1, s2)
        u[:, 0] += amp / k1 * np.sin(k1 * x[:, 0]) * np.cos(0.5 * k2 * x[:, 1])
        u[:, 1] += amp / k2 * np.sin(k2 * x[:, 1]) * np.cos(0.5 * k1 * x[:, 0])
        grad[:, 0, 0] += amp * np.cos(k1 * x[:, 0]) * np.cos(0.5 * k2 * x[:, 1])
        grad[:, 0, 1] += -0.5 * amp * k2 / k1 * np.sin(k1 * x[:, 0]) * np.sin(0.5 * k2 * x[:, 1])
        grad[:, 1, 1] += amp * np.cos(k2 * x[:, 1]) * np.cos(0.5 * k1 * x[:, 0])
        grad[:, 1, 0] += -0.5 * amp * k1 / k2 * np.sin(k2 * x[:, 1]) * np.sin(0.5 * k1 * x[:, 0])
    return u, grad


def bump_displacement(spec, x):
    """Artifact displacement and its gradient at points ``x``."""
    x = np.asarray(x, dtype=float)
    d = x - np.asarray(spec.center())
    r2 = spec.artifact_radius**2
    g = np.exp(-np.sum(d * d, axis=1) / r2)
    A = spec.artifact_amplitude
    u = -A * g[:, None] * d
    # d/dx_j [g d_i] = g (delta_ij - 2 d_i d_j / r^2)
    grad = -A * g[:, None, None] * (np.eye(2) - 2.0 * d[:, :, None] * d[:, None, :] / r2)
    return u, grad


@dataclass
class SyntheticData:
    snapshot: Snapshot
    u_true: np.ndarray
    grad_true: np.ndarray
    u_clean: np.ndarray
    grad_clean: np.ndarray

    @property
    def strain_true(self):
        return strain_from_gradient(self.grad_true)

    @property
    def strain_clean(self):
        """Strain of the noiseless field including the artifact."""
        return strain_from_gradient(self.grad_clean)


def generate_synthetic(spec):
    """Synthetic snapshot ``u_exp = u_true + bump + noise``.

    Returns ``(NodeGrid, DisplacementSample, SyntheticData)``.
    """
    grid = NodeGrid.uniform(spec.dims, (10, 10), spec.spacing)
    x = grid.measurement_points
    u_true, grad_true = true_displacement(spec, x)
    u_clean, grad_clean = u_true.copy(), grad_true.copy()
    if spec.artifact_amplitude != 0:
        ub, gb = bump_displacement(spec, x)
        u_clean += ub
        grad_clean += gb
    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(0.0, spec.sigma, size=u_clean.shape) if spec.sigma > 0 else 0.0
    u_exp = u_clean + noise
    snap = snapshot_from_arrays(u_exp, spec.dims, spec.spacing, protocol_id=spec.protocol_id,
                                constraint_mask=spec.constraint_mask)
    data = SyntheticData(snap, u_true, grad_true, u_clean, grad_clean)
    return grid, snap.sample(), data


# -- resolution transfer ------------------------------------------------------

def resample(coeffs, basis, to_dims, extent=None, origin=None):
    """Evaluate the RK reconstruction on a new uniform grid.

    The target grid spans the bounding box of ``basis.points`` unless
    ``extent``/``origin`` are given. Returns ``(points, DisplacementSample)``.
    """
    if min(to_dims) < 2:
        raise InvalidParameterError(f"target dims must be >= 2 per axis, got {to_dims}")
    coeffs = check_coefficients(coeffs, basis.n_centers)
    lo = basis.points.min(axis=0)
    hi = basis.points.max(axis=0)
    origin = tuple(lo) if origin is None else origin
    extent = tuple(hi - lo) if extent is None else extent
    pts = uniform_points(to_dims, origin, extent)
    Phi, _ = basis.evaluate(pts)
    return pts, DisplacementSample(Phi @ coeffs)


# -- export -----------------------------------------------------------------

def _summary(name, values):
    v = np.asarray(values, dtype=float)
    return {"min": float(v.min()), "max": float(v.max()),
            "fraction_negative": float(np.mean(v < 0))}


STRAIN_KEYS = ("E11", "E12", "E22", "principal_min", "principal_max")


def export_fields(fields, path, points=None):
    """Write named nodal fields to ``<path>.csv`` plus a ``<path>.json`` summary.

    ``fields`` maps column names to 1D arrays (or ``(N, 2)`` arrays, split
    into ``name_1``/``name_2`` columns). Strain components get min/max and
    negative-fraction statistics in the summary.
    """
    if not fields:
        raise InvalidParameterError("no fields to export")
    columns = {}
    if points is not None:
        points = np.asarray(points, dtype=float)
        columns["x1"], columns["x2"] = points[:, 0], points[:, 1]
    for name, arr in fields.items():
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 2:
            for k in range(arr.shape[1]):
                columns[f"{name}_{k + 1}"] = arr[:, k]
        else:
            columns[name] = arr
    sizes = {len(c) for c in columns.values()}
    if len(sizes) != 1:
        raise InvalidParameterError(f"fields have mismatched lengths {sorted(sizes)}")
    stem = os.fspath(path)
    if stem.endswith(".csv"):
        stem = stem[:-4]
    summary = {name: _summary(name, columns[name]) for name in columns if name in STRAIN_KEYS}
    summary["n_points"] = sizes.pop()
    try:
        with open(stem + ".csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(list(columns))
            for row in zip(*columns.values()):
                w.writerow([_fmt(v) for v in row])
        with open(stem + ".json", "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise PGSError(f"cannot write fields to {stem}: {exc}") from exc
    return summary


def strain_columns(strain):
    return {k: getattr(strain, k) for k in STRAIN_KEYS}


def read_fields_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    names = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return {n: data[:, k] for k, n in enumerate(names)}
