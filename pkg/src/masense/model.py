"""Scenario, geometry and signal model for a planar movable-antenna receiver.

Angles are handled directly as spatial coordinates ``(u, v)`` with
``u = cos(phi) sin(theta)`` and ``v = cos(theta)``; positions are in meters
relative to the center of the square moving region.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

# Independent random streams derived from one master seed.
STREAM_SIGNALS = 0
STREAM_NOISE = 1
STREAM_TARGETS = 2
STREAM_AGENTS = 3
STREAM_SINGLE_TARGET = 4


def stream_rng(seed, stream, *extra):
    """Generator for logical stream ``stream`` of master ``seed``.

    Extra integers (trial index, sweep point, ...) further split the stream.
    """
    return np.random.default_rng([int(seed), int(stream), *[int(e) for e in extra]])


def db_to_linear(db):
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class ScenarioConfig:
    """Physical and sampling parameters of one sensing scenario.

    ``noise_power`` is derived from ``signal_power`` and the SNR so that
    ``signal_power / noise_power`` is the configured SNR exactly.
    """

    wavelength: float = 0.05
    region_size: float = 0.6
    min_spacing: float = 0.025
    num_antennas: int = 16
    num_targets: int = 5
    num_snapshots: int = 64
    snr_db: float = 10.0
    u_max: float = 0.6
    v_max: float = 0.6
    seed: int = 0
    signal_power: float = 1.0

    def __post_init__(self):
        if not (self.wavelength > 0 and math.isfinite(self.wavelength)):
            raise InvalidInputError("wavelength must be positive")
        if not self.region_size > 0:
            raise InvalidInputError("region_size must be positive")
        if self.min_spacing < 0:
            raise InvalidInputError("min_spacing must be non-negative")
        if self.num_targets < 1 or self.num_snapshots < 1:
            raise InvalidInputError("need at least one target and one snapshot")
        if self.num_antennas <= self.num_targets:
            raise InvalidInputError(
                f"need more antennas than targets (N={self.num_antennas}, K={self.num_targets})")
        for name in ("u_max", "v_max"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1], got {val}")
        if not self.signal_power > 0:
            raise InvalidInputError("signal_power must be positive")

    @property
    def noise_power(self) -> float:
        return self.signal_power / db_to_linear(self.snr_db)

    @property
    def snr_linear(self) -> float:
        return self.signal_power / self.noise_power

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_mapping(cls, mapping, *, strict=False) -> "ScenarioConfig":
        """Build from string/number mapping; unknown keys are ignored unless ``strict``."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                if strict:
                    raise InvalidInputError(f"unknown scenario key {key!r}")
                continue
            kind = int if known[key].type in ("int", int) else float
            try:
                kwargs[key] = kind(float(raw)) if kind is int else kind(raw)
            except (TypeError, ValueError) as exc:
                raise InvalidInputError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        return cls.from_mapping(read_kv_file(path))


def read_kv_file(path) -> dict:
    """Parse a flat ``key = value`` file. ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else (":" if ":" in line else None)
        if sep is None:
            raise InvalidInputError(f"{path}:{lineno}: expected key = value")
        key, value = line.split(sep, 1)
        out[key.strip()] = value.strip()
    return out


def write_kv_file(path, mapping) -> None:
    lines = [f"{k} = {_fmt_value(v)}" for k, v in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt_value(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt_value(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class SpatialAngle:
    u: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise InvalidInputError("angle coordinates must be finite")
        if self.u * self.u + self.v * self.v > 1.0 + 1e-12:
            raise InvalidInputError(f"(u, v) = ({self.u}, {self.v}) lies outside the unit disk")

    @classmethod
    def from_elevation_azimuth(cls, theta, phi):
        """Convert physical elevation ``theta`` / azimuth ``phi`` (radians)."""
        return cls(math.cos(phi) * math.sin(theta), math.cos(theta))


@dataclass(frozen=True, eq=False)
class TargetSet:
    """K target directions stored as parallel ``u`` and ``v`` arrays."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.u, dtype=float)).copy()
        v = np.atleast_1d(np.asarray(self.v, dtype=float)).copy()
        if u.shape != v.shape or u.ndim != 1:
            raise InvalidInputError("u and v must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise InvalidInputError("target angles must be finite")
        u.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_angles(cls, angles: Iterable) -> "TargetSet":
        pairs = [(a.u, a.v) if isinstance(a, SpatialAngle) else tuple(a) for a in angles]
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])

    def __len__(self):
        return self.u.size

    def __iter__(self):
        return (SpatialAngle(float(a), float(b)) for a, b in zip(self.u, self.v))

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.u, self.v])

    def closest_pair(self):
        """Indices and (u, v) distance of the closest pair of targets."""
        pts = self.as_array()
        best = (None, math.inf)
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                d = float(np.hypot(*(pts[i] - pts[j])))
                if d < best[1]:
                    best = ((i, j), d)
        return best


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    """Antenna positions (``N x 2``, meters) inside a square region of side ``region_size``.

    Construction does not enforce the region/spacing constraints; call
    :func:`validate_geometry` for that (some analytic layouts used in bound
    checks deliberately sit outside the region).
    """

    positions: np.ndarray
    region_size: float = math.inf
    min_spacing: float = 0.0

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1, 2)
        if pos.shape[0] == 0:
            raise InvalidInputError("geometry needs at least one antenna")
        if not np.all(np.isfinite(pos)):
            raise InvalidInputError("antenna positions must be finite")
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)

    @property
    def x(self) -> np.ndarray:
        return self.positions[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.positions[:, 1]

    @property
    def num_antennas(self) -> int:
        return self.positions.shape[0]

    def __len__(self):
        return self.num_antennas

    def moved(self, index, new_position) -> "ArrayGeometry":
        pos = self.positions.copy()
        pos[index] = new_position
        return replace(self, positions=pos)

    def scaled(self, factor) -> "ArrayGeometry":
        return replace(self, positions=self.positions * factor, region_size=self.region_size * factor,
                       min_spacing=self.min_spacing * factor)

    def mean_radius(self) -> float:
        return float(np.mean(np.hypot(self.x, self.y)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", "x", "y"])
            for n, (x, y) in enumerate(self.positions):
                writer.writerow([n, repr(float(x)), repr(float(y))])

    @classmethod
    def from_csv(cls, path, region_size=math.inf, min_spacing=0.0) -> "ArrayGeometry":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["n", "x", "y"]:
                raise InvalidInputError(f"{path}: expected header n,x,y")
            rows = sorted(((int(r["n"]), float(r["x"]), float(r["y"])) for r in reader))
        return cls(np.array([[x, y] for _, x, y in rows]), region_size, min_spacing)


@dataclass(frozen=True)
class Violation:
    kind: str  # "region" or "spacing"
    antennas: tuple
    value: float

    def __str__(self):
        if self.kind == "region":
            return f"antenna {self.antennas[0]} outside region (|coord|max = {self.value:.6g})"
        return f"antennas {self.antennas} closer than d_min (distance {self.value:.6g})"


def validate_geometry(geometry: ArrayGeometry, tol=1e-12) -> list:
    """List every region and spacing violation; never raises."""
    out = []
    half = geometry.region_size / 2.0
    pos = geometry.positions
    for n, (x, y) in enumerate(pos):
        worst = max(abs(x), abs(y))
        if worst > half * (1 + tol) + tol:
            out.append(Violation("region", (n,), float(worst)))
    if geometry.min_spacing > 0:
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        limit = geometry.min_spacing * (1 - tol)
        for i in range(len(pos)):
            for j in range(i + 1, len(pos)):
                if dist[i, j] < limit:
                    out.append(Violation("spacing", (i, j), float(dist[i, j])))
    return out


def _check_inputs(geometry, wavelength):
    if not (wavelength > 0 and math.isfinite(wavelength)):
        raise InvalidInputError("wavelength must be positive and finite")


def _angle_arrays(angle):
    if isinstance(angle, SpatialAngle):
        return np.float64(angle.u), np.float64(angle.v)
    if isinstance(angle, TargetSet):
        return angle.u, angle.v
    arr = np.asarray(angle, dtype=float)
    if arr.shape[-1:] != (2,):
        raise InvalidInputError("angle must be SpatialAngle, TargetSet or (..., 2) array")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("angle must be finite")
    return arr[..., 0], arr[..., 1]


def steering_vector(geometry: ArrayGeometry, angle, wavelength) -> np.ndarray:
    """Far-field response ``exp(j 2pi/lambda (x_n u + y_n v))``.

    A single angle gives a length-N vector; a TargetSet (or ``(K, 2)``
    array) gives the ``N x K`` steering matrix.
    """
    _check_inputs(geometry, wavelength)
    u, v = _angle_arrays(angle)
    k = 2.0 * np.pi / wavelength
    phase = k * (np.multiply.outer(geometry.x, u) + np.multiply.outer(geometry.y, v))
    return np.exp(1j * phase)


def steering_derivatives(geometry: ArrayGeometry, angle, wavelength):
    """Derivatives of the steering vector (or matrix) with respect to u and v."""
    a = steering_vector(geometry, angle, wavelength)
    k = 2.0 * np.pi / wavelength
    shape = (-1,) + (1,) * (a.ndim - 1)
    du = 1j * k * geometry.x.reshape(shape) * a
    dv = 1j * k * geometry.y.reshape(shape) * a
    return du, dv


@dataclass(frozen=True, eq=False)
class SnapshotBundle:
    source_matrix: np.ndarray
    noise_power: float
    received: np.ndarray | None = None
    steering_matrix: np.ndarray | None = None

    @property
    def num_snapshots(self) -> int:
        return self.source_matrix.shape[1]


def equal_power_sources(num_targets, num_snapshots, signal_power, rng) -> np.ndarray:
    """K x T complex Gaussian waveforms rescaled so each row has energy ``T * signal_power``."""
    if num_targets < 1 or num_snapshots < 1:
        raise InvalidInputError("need K >= 1 and T >= 1")
    s = (rng.standard_normal((num_targets, num_snapshots))
         + 1j * rng.standard_normal((num_targets, num_snapshots))) / np.sqrt(2.0)
    energy = np.sum(np.abs(s) ** 2, axis=1, keepdims=True) / num_snapshots
    return s * np.sqrt(signal_power / energy)


def complex_noise(shape, noise_power, rng) -> np.ndarray:
    """Circularly-symmetric complex Gaussian with per-entry variance ``noise_power``."""
    scale = np.sqrt(noise_power / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def synthesize_snapshots(geometry, targets: TargetSet, bundle: SnapshotBundle, wavelength, rng) -> SnapshotBundle:
    """Fill ``bundle.received`` with ``A S + Z``."""
    S = np.asarray(bundle.source_matrix)
    if S.ndim != 2 or S.shape[0] != len(targets):
        raise InvalidInputError(
            f"source matrix must be K x T with K = {len(targets)}, got shape {S.shape}")
    if bundle.noise_power < 0:
        raise InvalidInputError("noise power must be non-negative")
    A = steering_vector(geometry, targets, wavelength)
    Y = A @ S
    if bundle.noise_power > 0:
        Y = Y + complex_noise(Y.shape, bundle.noise_power, rng)
    return replace(bundle, received=Y, steering_matrix=A)


def sample_covariance(Y) -> np.ndarray:
    """``Y Y^H / T``; exactly Hermitian."""
    Y = np.asarray(Y)
    if Y.ndim != 2 or Y.size == 0:
        raise InvalidInputError("received matrix must be non-empty N x T")
    R = (Y @ Y.conj().T) / Y.shape[1]
    return 0.5 * (R + R.conj().T)


def sample_targets(num_targets, u_max, v_max, rng, min_separation=0.0, max_tries=10000) -> TargetSet:
    """Uniform draw of K directions in the angle box.

    Draws outside the unit disk or with two targets closer than
    ``min_separation`` are rejected.
    """
    for _ in range(max_tries):
        u = rng.uniform(-u_max, u_max, num_targets)
        v = rng.uniform(-v_max, v_max, num_targets)
        if np.any(u * u + v * v > 1.0):
            continue
        if min_separation > 0 and num_targets > 1:
            d = np.hypot(u[:, None] - u[None, :], v[:, None] - v[None, :])
            d[np.diag_indices(num_targets)] = np.inf
            if d.min() < min_separation:
                continue
        return TargetSet(u, v)
    raise InvalidInputError("could not draw a valid target set; box too small for separation")


def draw_realization(scenario: ScenarioConfig, rng, min_separation=1e-3, num_targets=None):
    """One (targets, source matrix) pair from a single generator."""
    k = scenario.num_targets if num_targets is None else num_targets
    sep = min_separation if (scenario.u_max > 0 or scenario.v_max > 0) else 0.0
    targets = sample_targets(k, scenario.u_max, scenario.v_max, rng, sep)
    S = equal_power_sources(k, scenario.num_snapshots, scenario.signal_power, rng)
    return targets, S


def upa_lattice(num_antennas, spacing, region_size=math.inf, min_spacing=0.0) -> ArrayGeometry:
    """Square lattice with ceil(sqrt(N)) columns and rows, centered at the origin.

    Nodes are ordered row by row (y ascending, then x ascending) and surplus
    nodes are dropped from the end.
    """
    if num_antennas < 1:
        raise InvalidInputError("need at least one antenna")
    side = math.isqrt(num_antennas - 1) + 1
    offsets = (np.arange(side) - (side - 1) / 2.0) * spacing
    yy, xx = np.meshgrid(offsets, offsets, indexing="ij")
    pos = np.column_stack([xx.ravel(), yy.ravel()])[:num_antennas]
    return ArrayGeometry(pos, region_size, min_spacing)


def full_aperture_upa(num_antennas, region_size, min_spacing=0.0) -> ArrayGeometry:
    """Lattice spanning the whole region, spacing ``A / (ceil(sqrt(N)) - 1)``."""
    side = math.isqrt(num_antennas - 1) + 1 if num_antennas >= 1 else 0
    if side < 2:
        raise InvalidInputError("a full-aperture lattice needs ceil(sqrt(N)) >= 2")
    return upa_lattice(num_antennas, region_size / (side - 1), region_size, min_spacing)


def geometry_stats(geometry: ArrayGeometry):
    """Population mean/variance/covariance of the coordinates (divide by N)."""
    x, y = geometry.x, geometry.y
    mx, my = x.mean(), y.mean()
    var_x = float(np.mean((x - mx) ** 2))
    var_y = float(np.mean((y - my) ** 2))
    cov = float(np.mean((x - mx) * (y - my)))
    return {"mean_x": float(mx), "mean_y": float(my), "var_x": var_x, "var_y": var_y, "cov": cov}


__all__ = [
    "ScenarioConfig", "SpatialAngle", "TargetSet", "ArrayGeometry", "SnapshotBundle", "Violation",
    "steering_vector", "steering_derivatives", "synthesize_snapshots", "sample_covariance",
    "validate_geometry", "equal_power_sources", "complex_noise", "sample_targets",
    "draw_realization", "geometry_stats", "upa_lattice", "full_aperture_upa", "stream_rng", "read_kv_file", "write_kv_file",
    "db_to_linear",
]
