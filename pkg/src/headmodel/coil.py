"""Thin-wire figure-eight TMS coil and its magnetic vector potential.

Lengths are in metres here; volume spacings elsewhere are millimetres and are
converted at the grid boundary (:func:`grid_points`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

MU0 = 4e-7 * np.pi
MIN_SEGMENTS = 16


@dataclass(frozen=True)
class CoilPose:
    """Coil placement.

    ``normal`` is the coil axis (local z). ``handle`` fixes the in-plane
    orientation: it is the direction of the current under the junction of the
    two wings (local y). The wing centres lie on the local x axis.
    """

    center: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)
    handle: tuple = (0.0, 1.0, 0.0)

    def frame(self):
        ez = np.asarray(self.normal, dtype=float)
        if not np.linalg.norm(ez) > 0:
            raise ValueError("degenerate pose: zero normal")
        ez = ez / np.linalg.norm(ez)
        ey = np.asarray(self.handle, dtype=float)
        ey = ey - ey.dot(ez) * ez
        if not np.linalg.norm(ey) > 1e-12:
            raise ValueError("degenerate pose: handle parallel to normal")
        ey = ey / np.linalg.norm(ey)
        return np.cross(ey, ez), ey, ez


@dataclass(frozen=True)
class Coil:
    """Closed wire loops discretized into straight segments ``start -> end``."""

    start: np.ndarray
    end: np.ndarray
    current: float = 1.0
    frequency: float = 10e3
    wing: np.ndarray = field(default=None)  # wing index (0 or 1) per segment, if any

    @property
    def omega(self):
        return 2.0 * np.pi * self.frequency

    @property
    def midpoints(self):
        return 0.5 * (self.start + self.end)

    @property
    def dl(self):
        return self.end - self.start

    def scaled(self, factor):
        return Coil(self.start, self.end, self.current * factor, self.frequency, self.wing)

    def select(self, mask):
        wing = None if self.wing is None else self.wing[mask]
        return Coil(self.start[mask], self.end[mask], self.current, self.frequency, wing)


def _loop(center, ex, ey, radius, segments, clockwise=False, phase=0.0):
    k = np.arange(segments + 1)
    ang = phase + (-1.0 if clockwise else 1.0) * 2.0 * np.pi * k / segments
    return center + radius * (np.cos(ang)[:, None] * ex + np.sin(ang)[:, None] * ey)


def circular_loop(radius, segments=256, center=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0),
                  current=1.0, frequency=10e3) -> Coil:
    """Single counter-clockwise (about ``normal``) circular loop."""
    if segments < MIN_SEGMENTS:
        raise ValueError(f"segments too few: {segments} < {MIN_SEGMENTS}")
    helper = (1.0, 0.0, 0.0) if abs(normal[0]) < 0.9 else (0.0, 1.0, 0.0)
    ex, ey, _ = CoilPose(center, normal, np.cross(normal, helper)).frame()
    pts = _loop(np.asarray(center, float), ex, ey, radius, segments)
    return Coil(pts[:-1], pts[1:], current, frequency)


def build_figure_eight(pose: CoilPose = CoilPose(), outer_diameter=0.097, inner_diameter=0.047,
                       turns=5, segments=64, current=1.0, frequency=10e3, single_loop=False) -> Coil:
    """Figure-eight coil: two tangent wings wound in opposite senses.

    Each wing is ``turns`` concentric loops with radii spaced uniformly from
    the inner to the outer wing radius (``single_loop`` uses one loop at the
    mean radius). The wing centres sit one outer radius either side of the
    pose centre, so the outermost turns touch at the centre.
    """
    if segments < MIN_SEGMENTS:
        raise ValueError(f"segments too few: {segments} < {MIN_SEGMENTS}")
    if not 0 < inner_diameter <= outer_diameter:
        raise ValueError("need 0 < inner_diameter <= outer_diameter")
    ex, ey, _ = pose.frame()
    c = np.asarray(pose.center, dtype=float)
    r_out, r_in = outer_diameter / 2, inner_diameter / 2
    radii = [0.5 * (r_in + r_out)] if single_loop else np.linspace(r_in, r_out, turns)
    starts, ends, wing = [], [], []
    for w, (centre, cw, phase) in enumerate(((c - r_out * ex, False, 0.0), (c + r_out * ex, True, np.pi))):
        for r in radii:
            pts = _loop(centre, ex, ey, r, segments, clockwise=cw, phase=phase)
            starts.append(pts[:-1])
            ends.append(pts[1:])
            wing.append(np.full(segments, w))
    return Coil(np.concatenate(starts), np.concatenate(ends), current, frequency, np.concatenate(wing))


@njit(parallel=True, cache=True)
def _biot_savart(points, start, end, guard, out):
    """Midpoint-rule sum of dl / |r - m| per point; returns the index of the
    first point closer than ``guard`` to a segment, or -1."""
    n, m = points.shape[0], start.shape[0]
    bad = np.full(n, False)
    for p in prange(n):
        px, py, pz = points[p, 0], points[p, 1], points[p, 2]
        ax = ay = az = 0.0
        for s in range(m):
            dx, dy, dz = end[s, 0] - start[s, 0], end[s, 1] - start[s, 1], end[s, 2] - start[s, 2]
            rx = px - 0.5 * (start[s, 0] + end[s, 0])
            ry = py - 0.5 * (start[s, 1] + end[s, 1])
            rz = pz - 0.5 * (start[s, 2] + end[s, 2])
            dist = np.sqrt(rx * rx + ry * ry + rz * rz)
            len2 = dx * dx + dy * dy + dz * dz
            if dist <= guard + 0.5 * np.sqrt(len2):
                # exact point-to-segment distance
                wx, wy, wz = px - start[s, 0], py - start[s, 1], pz - start[s, 2]
                t = min(max((wx * dx + wy * dy + wz * dz) / len2, 0.0), 1.0)
                qx, qy, qz = wx - t * dx, wy - t * dy, wz - t * dz
                if np.sqrt(qx * qx + qy * qy + qz * qz) <= guard:
                    bad[p] = True
            inv = 1.0 / dist
            ax += dx * inv
            ay += dy * inv
            az += dz * inv
        out[p, 0], out[p, 1], out[p, 2] = ax, ay, az
    for p in range(n):
        if bad[p]:
            return p
    return -1


def vector_potential(coil: Coil, points, guard=0.0) -> np.ndarray:
    """A(r) = mu0 I / (4 pi) * sum_s dl_s / |r - m_s| (midpoint rule per segment).

    ``points`` is ``(..., 3)`` in metres; returns an array of the same shape.
    Raises if a point lies within ``guard`` of a wire segment.
    """
    points = np.asarray(points, dtype=float)
    flat = np.ascontiguousarray(points.reshape(-1, 3))
    out = np.empty_like(flat)
    bad = _biot_savart(flat, np.ascontiguousarray(coil.start, dtype=float),
                       np.ascontiguousarray(coil.end, dtype=float), float(guard), out)
    if bad >= 0:
        raise ValueError(f"singular segment distance: point {tuple(float(v) for v in flat[bad])} inside the guard radius {guard:g} m")
    return (MU0 * coil.current / (4.0 * np.pi) * out).reshape(points.shape)


def flux_density(coil: Coil, points, step=1e-5) -> np.ndarray:
    """B = curl A by central differences of :func:`vector_potential`."""
    points = np.asarray(points, dtype=float)
    jac = np.empty(points.shape[:-1] + (3, 3))  # jac[..., i, j] = dA_i / dx_j
    for j in range(3):
        e = np.zeros(3)
        e[j] = step
        jac[..., :, j] = (vector_potential(coil, points + e) - vector_potential(coil, points - e)) / (2 * step)
    return np.stack([
        jac[..., 2, 1] - jac[..., 1, 2],
        jac[..., 0, 2] - jac[..., 2, 0],
        jac[..., 1, 0] - jac[..., 0, 1],
    ], axis=-1)


@dataclass(frozen=True)
class VectorField:
    """Real 3-vector per voxel, ``data[x, y, z, component]``.

    Time-harmonic quantities are stored as real amplitudes with a common
    phase: A0 is in phase with the coil current, and the electric field
    ``E = -j omega (A0 - grad psi)`` is stored as ``omega (A0 - grad psi)``,
    i.e. with the uniform factor ``-j`` dropped.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)  # mm

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[-1] != 3:
            raise ValueError(f"vector field must be (nx, ny, nz, 3), got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("non-finite vector field")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.data.shape[:3]

    def magnitude(self):
        return np.linalg.norm(self.data, axis=-1)


def grid_points(dims, spacing, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Voxel-centre coordinates in metres; ``spacing`` in mm, ``origin`` (the grid corner) in m."""
    axes = [origin[k] + (np.arange(dims[k]) + 0.5) * spacing[k] * 1e-3 for k in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def vector_potential_grid(coil: Coil, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                          guard=None) -> VectorField:
    """A0 at the voxel centres of a grid. ``guard`` defaults to half the voxel diagonal."""
    if guard is None:
        guard = 0.5 * np.linalg.norm(np.asarray(spacing, dtype=float) * 1e-3)
    pts = grid_points(dims, spacing, origin)
    return VectorField(vector_potential(coil, pts, guard=guard), spacing)


_POSE_VECTORS = ("center", "normal", "handle")
_COIL_PARAMS = {"turns": int, "segments": int, "current": float, "frequency": float,
                "outer_diameter": float, "inner_diameter": float, "single_loop": lambda s: s.lower() in ("1", "true", "yes")}


def write_coil_file(path, pose: CoilPose, **params):
    """Write a coil pose and build parameters as ``key=value`` lines (vectors comma-separated)."""
    lines = [f"{k}={','.join(repr(float(v)) for v in getattr(pose, k))}" for k in _POSE_VECTORS]
    for k, v in params.items():
        if k not in _COIL_PARAMS:
            raise ValueError(f"unknown coil parameter {k!r}")
        lines.append(f"{k}={v}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_coil_file(path):
    """Inverse of :func:`write_coil_file`; returns ``(CoilPose, params)``."""
    vectors, params = {}, {}
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ValueError(f"{path}:{n}: expected key=value")
            if key in _POSE_VECTORS:
                vec = tuple(float(x) for x in value.split(","))
                if len(vec) != 3:
                    raise ValueError(f"{path}:{n}: {key} needs 3 components")
                vectors[key] = vec
            elif key in _COIL_PARAMS:
                params[key] = _COIL_PARAMS[key](value.strip())
            else:
                raise ValueError(f"{path}:{n}: unknown key {key!r}")
    pose = CoilPose(**vectors)
    pose.frame()
    return pose, params
