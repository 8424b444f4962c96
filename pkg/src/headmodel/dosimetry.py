"""Glue between head models, the coil and the field solver.

Coil placement, region-of-interest selection, label corruption for
sensitivity studies and the label-volume to |E| chain.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tissues
from .coil import Coil, CoilPose, build_figure_eight, grid_points, vector_potential_grid
from .solver import SolveInfo, assign_conductivity, electric_field, solve_potential
from .volume import LabelVolume


@dataclass(frozen=True)
class SimulationConfig:
    turns: int = 5
    segments: int = 64
    current: float = 1.0
    frequency: float = 10e3
    single_loop: bool = False
    tol: float = 1e-6
    max_iter: int | None = None

    def coil_params(self):
        return {"turns": self.turns, "segments": self.segments, "current": self.current,
                "frequency": self.frequency, "single_loop": self.single_loop}


def default_pose(dims, spacing=(1.0, 1.0, 1.0), distance_mm=10.0) -> CoilPose:
    """Coil centred over the top (+z) face of the grid, ``distance_mm`` above it.

    Uses only the grid geometry, so the same pose serves every label volume
    on that grid.
    """
    ext = np.asarray(dims, dtype=float) * np.asarray(spacing, dtype=float) * 1e-3
    centre = (ext[0] / 2, ext[1] / 2, ext[2] + distance_mm * 1e-3)
    return CoilPose(centre, (0.0, 0.0, 1.0), (0.0, 1.0, 0.0))


def roi_mask(labels, pose: CoilPose, radius_mm=40.0, tissue=tissues.GM) -> np.ndarray:
    """Voxels of ``tissue`` within ``radius_mm`` of the coil centre."""
    data = labels.data if isinstance(labels, LabelVolume) else np.asarray(labels)
    spacing = labels.spacing if isinstance(labels, LabelVolume) else (1.0, 1.0, 1.0)
    pts = grid_points(data.shape, spacing)
    dist = np.linalg.norm(pts - np.asarray(pose.center), axis=-1)
    return (data == tissue) & (dist <= radius_mm * 1e-3)


def corrupt_labels(labels, rate, seed=0) -> np.ndarray:
    """Relabel a random ``rate`` fraction of head voxels to a different tissue."""
    data = np.array(labels.data if isinstance(labels, LabelVolume) else labels, dtype=np.uint8)
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    head = np.flatnonzero(data.ravel() > 0)
    rng = np.random.default_rng([seed, 11])
    pick = rng.choice(head, size=int(round(rate * head.size)), replace=False)
    flat = data.ravel()
    # shift by 1..12 (mod 13) so the new tissue always differs from the old one
    shift = rng.integers(1, tissues.NUM_TISSUES, size=pick.size)
    flat[pick] = (flat[pick] - 1 + shift) % tissues.NUM_TISSUES + 1
    return flat.reshape(data.shape)


def field_magnitude(labels: LabelVolume, coil: Coil, config: SimulationConfig = SimulationConfig(), a0=None):
    """Induced |E| for a label volume; returns ``(|E| array, SolveInfo)``.

    ``a0`` may be passed to reuse a vector potential already computed on the grid.
    """
    sigma = assign_conductivity(labels)
    if a0 is None:
        a0 = vector_potential_grid(coil, labels.dims, labels.spacing)
    psi, info = solve_potential(sigma, a0, coil.omega, config.tol, config.max_iter)
    _, mag = electric_field(psi, a0, coil.omega)
    return mag, info


def simulate(labels: LabelVolume, pose: CoilPose, config: SimulationConfig = SimulationConfig(),
             a0=None) -> tuple[np.ndarray, SolveInfo]:
    """Build the figure-eight coil at ``pose`` and return ``(|E|, SolveInfo)``."""
    coil = build_figure_eight(pose, **config.coil_params())
    return field_magnitude(labels, coil, config, a0)
