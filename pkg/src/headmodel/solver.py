"""Quasi-static induced-field solver on a voxel conductivity model.

The scalar potential obeys ``div(sigma grad psi) = div(sigma A0)`` with
``J . n = 0`` on the conductor boundary; with ``phi = -j omega psi`` the
induced field is ``E = -j omega (A0 - grad psi)``. The problem is discretized
with trilinear hexahedral elements (element = voxel, element-constant sigma)
and solved matrix-free by Jacobi-preconditioned conjugate gradients.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange
from scipy import ndimage

from .coil import VectorField
from .metrics import hotspot_mask  # noqa: F401  (re-exported)
from .tissues import CONDUCTIVITY
from .volume import LabelVolume


class SolverError(RuntimeError):
    """Raised when the iterative solve does not reach the requested tolerance."""

    def __init__(self, message, info=None):
        super().__init__(message)
        self.info = info


@dataclass(frozen=True)
class ConductivityVolume:
    data: np.ndarray  # S/m per voxel, 0 = air
    spacing: tuple = (1.0, 1.0, 1.0)  # mm

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"conductivity must be 3-D, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("non-finite conductivity")
        if (data < 0).any():
            raise ValueError("negative conductivity")
        if not (data > 0).any():
            raise ValueError("all-air volume: no conducting voxel")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.data.shape


@dataclass(frozen=True)
class PotentialField:
    """Node potential ``psi`` on the ``(nx+1, ny+1, nz+1)`` corner lattice (phi = -j omega psi)."""

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    conducting: np.ndarray | None = None  # voxel mask; E is zeroed outside it

    @property
    def dims(self):
        return tuple(n - 1 for n in self.values.shape)


@dataclass
class SolveInfo:
    iterations: int = 0
    converged: bool = False
    residuals: list = field(default_factory=list)  # relative residual per iteration (index 0 = start)
    energies: list = field(default_factory=list)  # 0.5 x'Kx - f'x per iteration
    components: int = 0
    active_nodes: int = 0
    seconds: float = 0.0

    def log_text(self, timing=False):
        lines = [f"components={self.components}", f"active_nodes={self.active_nodes}",
                 f"iterations={self.iterations}", f"converged={self.converged}"]
        if timing:
            lines.append(f"seconds={self.seconds:.3f}")
        lines.append("# iteration relative_residual")
        lines += [f"{i} {r:.6e}" for i, r in enumerate(self.residuals)]
        return "\n".join(lines) + "\n"


def assign_conductivity(labels, table=None) -> ConductivityVolume:
    """Voxelwise tissue-to-conductivity lookup; background (0) maps to 0 S/m."""
    table = CONDUCTIVITY if table is None else table
    if isinstance(labels, LabelVolume):
        data, spacing = labels.data, labels.spacing
    else:
        data, spacing = np.asarray(labels), (1.0, 1.0, 1.0)
    present = set(np.unique(data).tolist()) - {0}
    missing = sorted(present - set(table))
    if missing:
        raise ValueError(f"unmapped label ID(s): {missing}")
    lut = np.zeros(int(max(present | {0})) + 1)
    for t in present:
        lut[t] = table[t]
    return ConductivityVolume(lut[data], spacing)


def element_stiffness(spacing_m) -> np.ndarray:
    """8x8 trilinear hexahedron stiffness for unit conductivity.

    Local node ``(a, b, c)`` in {0, 1}^3 has index ``4a + 2b + c``.
    """
    hx, hy, hz = spacing_m
    s = np.array([[1.0, -1.0], [-1.0, 1.0]])
    m = np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
    return (hy * hz / hx * np.kron(np.kron(s, m), m)
            + hx * hz / hy * np.kron(np.kron(m, s), m)
            + hx * hy / hz * np.kron(np.kron(m, m), s))


@njit(parallel=True, cache=True)
def _apply_stiffness(psi, sigma, ke, out):
    nx, ny, nz = sigma.shape
    out[:] = 0.0
    # even then odd x-planes: elements in one pass never share a node, so the
    # reduction order (and thus the result) is independent of thread count
    for parity in range(2):
        for ii in prange((nx - parity + 1) // 2):
            i = 2 * ii + parity
            u = np.empty(8)
            for j in range(ny):
                for k in range(nz):
                    s = sigma[i, j, k]
                    if s == 0.0:
                        continue
                    for L in range(8):
                        u[L] = psi[i + (L >> 2), j + ((L >> 1) & 1), k + (L & 1)]
                    for L in range(8):
                        acc = 0.0
                        for M in range(8):
                            acc += ke[L, M] * u[M]
                        out[i + (L >> 2), j + ((L >> 1) & 1), k + (L & 1)] += s * acc


def _corner_sum(vox):
    """Sum of the (up to 8) voxel values adjacent to each node."""
    p = np.pad(vox, 1)
    nx, ny, nz = vox.shape
    out = np.zeros((nx + 1, ny + 1, nz + 1), dtype=vox.dtype)
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                out += p[a:a + nx + 1, b:b + ny + 1, c:c + nz + 1]
    return out


def _corner_max(vox):
    p = np.pad(vox, 1)
    nx, ny, nz = vox.shape
    out = np.zeros((nx + 1, ny + 1, nz + 1), dtype=vox.dtype)
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                np.maximum(out, p[a:a + nx + 1, b:b + ny + 1, c:c + nz + 1], out=out)
    return out


class StiffnessOperator:
    """Matrix-free assembled stiffness ``K`` with its Jacobi diagonal."""

    def __init__(self, sigma: ConductivityVolume):
        self.sigma = sigma.data
        self.h = tuple(s * 1e-3 for s in sigma.spacing)
        self.ke = element_stiffness(self.h)
        self.shape = tuple(n + 1 for n in self.sigma.shape)
        self.diagonal = _corner_sum(self.sigma) * self.ke[0, 0]

    def __call__(self, psi):
        out = np.empty(self.shape)
        _apply_stiffness(np.ascontiguousarray(psi, dtype=np.float64), self.sigma, self.ke, out)
        return out


def load_vector(sigma: ConductivityVolume, a0) -> np.ndarray:
    """Right-hand side ``f_i = sum_e sigma_e A0_e . int_e grad N_i`` (A0 constant per voxel)."""
    a0 = np.asarray(a0.data if isinstance(a0, VectorField) else a0, dtype=np.float64)
    if a0.shape != sigma.dims + (3,):
        raise ValueError(f"shape mismatch: A0 {a0.shape} vs conductivity {sigma.dims}")
    hx, hy, hz = (s * 1e-3 for s in sigma.spacing)
    w = sigma.data[..., None] * a0 * np.array([hy * hz, hx * hz, hx * hy]) / 4.0
    nx, ny, nz = sigma.dims
    f = np.zeros((nx + 1, ny + 1, nz + 1))
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                sx, sy, sz = (2 * a - 1), (2 * b - 1), (2 * c - 1)
                f[a:a + nx, b:b + ny, c:c + nz] += sx * w[..., 0] + sy * w[..., 1] + sz * w[..., 2]
    return f


def node_components(sigma: ConductivityVolume):
    """Label conducting voxels (26-connectivity) and carry labels to their nodes.

    Returns ``(node_labels, count)``; label 0 marks inactive nodes.
    """
    vox, count = ndimage.label(sigma.data > 0, structure=np.ones((3, 3, 3), dtype=bool))
    return _corner_max(vox), count


def _project(x, labels, count):
    """Remove the per-component mean (over active nodes); inactive nodes are zeroed."""
    flat = labels.ravel()
    sums = np.bincount(flat, weights=x.ravel(), minlength=count + 1)
    sizes = np.bincount(flat, minlength=count + 1)
    means = sums / np.maximum(sizes, 1)
    means[0] = 0.0
    out = x - means[labels]
    out[labels == 0] = 0.0
    return out


def default_max_iter(sigma: ConductivityVolume) -> int:
    nodes = np.prod([n + 1 for n in sigma.dims])
    return int(10 * round(nodes ** (1 / 3)) * 100)


def solve_potential(sigma: ConductivityVolume, a0, omega=2 * np.pi * 10e3, tol=1e-6, max_iter=None,
                    x0=None) -> tuple[PotentialField, SolveInfo]:
    """Solve ``K psi = f`` by Jacobi-preconditioned CG.

    Each conducting component has its potential mean pinned to zero. ``omega``
    is accepted for interface symmetry; psi does not depend on it.

    Returns:
        ``(PotentialField, SolveInfo)``. Raises :class:`SolverError` if the
        relative residual does not fall to ``tol`` within ``max_iter``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    del omega
    start = time.perf_counter()
    op = StiffnessOperator(sigma)
    labels, count = node_components(sigma)
    f = _project(load_vector(sigma, a0), labels, count)
    inv_diag = np.zeros(op.shape)
    active = labels > 0
    inv_diag[active] = 1.0 / op.diagonal[active]
    max_iter = default_max_iter(sigma) if max_iter is None else int(max_iter)
    info = SolveInfo(components=count, active_nodes=int(active.sum()))

    fnorm = np.linalg.norm(f)
    x = np.zeros(op.shape) if x0 is None else _project(np.asarray(x0, dtype=np.float64), labels, count)
    if fnorm == 0.0:
        info.converged, info.residuals = True, [0.0]
        info.seconds = time.perf_counter() - start
        return PotentialField(x, sigma.spacing, sigma.data > 0), info
    kx = op(x)
    r = f - kx
    energy = 0.5 * np.vdot(x, kx) - np.vdot(f, x)
    info.residuals.append(np.linalg.norm(r) / fnorm)
    info.energies.append(energy)
    z = inv_diag * r
    p = z.copy()
    rz = np.vdot(r, z)
    for it in range(1, max_iter + 1):
        if info.residuals[-1] <= tol:
            break
        kp = op(p)
        pkp = np.vdot(p, kp)
        if not pkp > 0:
            break
        alpha = rz / pkp
        x += alpha * p
        r -= alpha * kp
        energy -= 0.5 * rz * rz / pkp
        info.residuals.append(np.linalg.norm(r) / fnorm)
        info.energies.append(energy)
        info.iterations = it
        z = inv_diag * r
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    x = _project(x, labels, count)
    # true residual of the returned iterate
    final = np.linalg.norm(f - op(x)) / fnorm
    info.converged = bool(final <= tol)
    info.seconds = time.perf_counter() - start
    if not info.converged:
        raise SolverError(f"no convergence: relative residual {final:.3e} > {tol:.1e} "
                          f"after {info.iterations} iterations", info)
    return PotentialField(x, sigma.spacing, sigma.data > 0), info


def potential_gradient(psi: PotentialField) -> np.ndarray:
    """Trilinear-element gradient of psi at the voxel centres, ``(nx, ny, nz, 3)`` in 1/m units."""
    v = psi.values
    nx, ny, nz = psi.dims
    hx, hy, hz = (s * 1e-3 for s in psi.spacing)
    g = np.zeros((nx, ny, nz, 3))
    for b in (0, 1):
        for c in (0, 1):
            g[..., 0] += v[1:, b:b + ny, c:c + nz] - v[:-1, b:b + ny, c:c + nz]
    for a in (0, 1):
        for c in (0, 1):
            g[..., 1] += v[a:a + nx, 1:, c:c + nz] - v[a:a + nx, :-1, c:c + nz]
    for a in (0, 1):
        for b in (0, 1):
            g[..., 2] += v[a:a + nx, b:b + ny, 1:] - v[a:a + nx, b:b + ny, :-1]
    return g / (4.0 * np.array([hx, hy, hz]))


def electric_field(psi: PotentialField, a0, omega=2 * np.pi * 10e3):
    """``E = -j omega (A0 - grad psi)`` per voxel, stored without the ``-j`` factor.

    Returns:
        ``(VectorField E, |E| array)``. Voxels outside ``psi.conducting`` are zero.
    """
    a0 = np.asarray(a0.data if isinstance(a0, VectorField) else a0, dtype=np.float64)
    if a0.shape != tuple(psi.dims) + (3,):
        raise ValueError(f"shape mismatch: A0 {a0.shape} vs potential dims {psi.dims}")
    e = omega * (a0 - potential_gradient(psi))
    if psi.conducting is not None:
        e[~psi.conducting] = 0.0
    field_ = VectorField(e, psi.spacing)
    return field_, field_.magnitude()


def induced_field(sigma: ConductivityVolume, a0, omega=2 * np.pi * 10e3, tol=1e-6, max_iter=None):
    """Convenience: solve for psi and return ``(E, |E|, SolveInfo)``."""
    psi, info = solve_potential(sigma, a0, omega, tol, max_iter)
    e, mag = electric_field(psi, a0, omega)
    return e, mag, info
