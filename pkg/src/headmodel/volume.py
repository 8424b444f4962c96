"""Voxel volumes, raw+header file I/O, MRI normalization, slicing and phantoms.

Arrays are indexed ``data[x, y, z]`` with x the sagittal index, y the coronal
index and z the axial index. An axial slice is therefore ``data[:, :, k]``,
a sagittal slice ``data[k, :, :]`` and a coronal slice ``data[:, k, :]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import tissues

AXES = ("sagittal", "coronal", "axial")
AXIS_INDEX = {"sagittal": 0, "coronal": 1, "axial": 2}


def _axis(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXIS_INDEX[axis]
        except KeyError:
            raise ValueError(f"unknown axis {axis!r}") from None
    if axis not in (0, 1, 2):
        raise ValueError(f"unknown axis {axis!r}")
    return int(axis)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


def _check_spacing(spacing) -> tuple:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    return spacing


@dataclass(frozen=True)
class ScalarVolume:
    """Real-valued voxel grid with millimetre spacing."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be 3D with non-empty axes, got {data.shape}")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    kind = "scalar"

    @property
    def dims(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True)
class LabelVolume:
    """Tissue-ID voxel grid; 0 is background (air), 1..13 are tissues."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be 3D with non-empty axes, got {data.shape}")
        if data.size and (data.min() < 0 or data.max() > tissues.NUM_TISSUES):
            raise ValueError(f"label IDs must lie in [0, {tissues.NUM_TISSUES}]")
        object.__setattr__(self, "data", _freeze(data.astype(np.uint8)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    kind = "label"

    @property
    def dims(self) -> tuple:
        return self.data.shape


Volume = Union[ScalarVolume, LabelVolume]

_DTYPES = {"scalar": np.dtype("<f4"), "label": np.dtype("u1")}


def header_path(path) -> Path:
    return Path(path).with_suffix(".hdr")


def save_volume(path, volume: Volume) -> Path:
    """Write ``volume`` as a raw payload at ``path`` plus a ``.hdr`` sidecar.

    Returns the header path.
    """
    path = Path(path)
    hdr = header_path(path)
    if hdr == path:
        raise ValueError("data file must not use the .hdr suffix")
    dims = ",".join(str(n) for n in volume.dims)
    spacing = ",".join(repr(s) for s in volume.spacing)
    hdr.write_text(
        f"dims={dims}\nspacing={spacing}\nkind={volume.kind}\n"
        "order=little-endian,x-fastest\n",
        encoding="utf-8",
    )
    payload = volume.data.astype(_DTYPES[volume.kind], copy=False)
    path.write_bytes(payload.tobytes(order="F"))
    return hdr


def read_header(header) -> dict:
    meta = {}
    for line in Path(header).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed header line {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def load_volume(path, header=None) -> Volume:
    """Read a raw volume and its sidecar header (default: ``path`` with ``.hdr``)."""
    path = Path(path)
    meta = read_header(header if header is not None else header_path(path))
    try:
        dims = tuple(int(n) for n in meta["dims"].split(","))
        spacing = tuple(float(s) for s in meta["spacing"].split(","))
        kind = meta["kind"]
    except KeyError as exc:
        raise ValueError(f"header is missing {exc.args[0]!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims mismatch: {meta['dims']!r}")
    if kind not in _DTYPES:
        raise ValueError(f"unknown element kind {kind!r}")
    order = meta.get("order", "little-endian,x-fastest")
    if order != "little-endian,x-fastest":
        raise ValueError(f"unsupported order {order!r}")
    if not path.exists():
        raise FileNotFoundError(f"missing data file {path}")
    raw = path.read_bytes()
    dtype = _DTYPES[kind]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"size mismatch: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    if kind == "scalar":
        return ScalarVolume(data.astype(np.float32), spacing)
    return LabelVolume(data, spacing)


def normalize_mri(volume: ScalarVolume) -> ScalarVolume:
    """Z-score the intensities, then rescale them onto [0, 1]."""
    v = volume.data.astype(np.float64)
    std = v.std()
    if not std > 0:
        raise ValueError("constant volume")
    z = (v - v.mean()) / std
    lo, hi = z.min(), z.max()
    return ScalarVolume((z - lo) / (hi - lo), volume.spacing)


@dataclass(frozen=True)
class Slice2D:
    axis: str
    index: int
    data: np.ndarray

    @property
    def width(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]


def extract_slice(volume, axis, k: int) -> Slice2D:
    """Return slice ``k`` along ``axis`` (name or 0/1/2) of a volume or array."""
    a = _axis(axis)
    data = volume.data if hasattr(volume, "data") else np.asarray(volume)
    if not 0 <= k < data.shape[a]:
        raise IndexError(f"index out of range: {k} not in [0, {data.shape[a]})")
    return Slice2D(AXES[a], int(k), np.take(data, k, axis=a))


def slices(volume, axis) -> list:
    a = _axis(axis)
    data = volume.data if hasattr(volume, "data") else np.asarray(volume)
    return [extract_slice(data, a, k) for k in range(data.shape[a])]


def stack_slices(slice_set: Sequence[Slice2D], axis) -> np.ndarray:
    """Stack slices (any order, one per index) back into a 3D array."""
    a = _axis(axis)
    if not slice_set:
        raise ValueError("empty slice set")
    by_index = {}
    for s in slice_set:
        if _axis(s.axis) != a:
            raise ValueError(f"slice along {s.axis} in a {AXES[a]} stack")
        by_index[s.index] = np.asarray(s.data)
    if sorted(by_index) != list(range(len(slice_set))):
        raise ValueError("slice set must hold exactly one slice per index 0..K-1")
    shapes = {d.shape for d in by_index.values()}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise ValueError(f"ragged slice set: shapes {sorted(shapes)}")
    return np.stack([by_index[k] for k in range(len(by_index))], axis=a)


def assemble_labels(slice_set: Sequence[Slice2D], axis, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    return LabelVolume(stack_slices(slice_set, axis), spacing)


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry and noise parameters for :func:`generate_phantom`.

    ``head_fraction`` is the outer semi-axis as a fraction of half the grid
    extent; ``jitter`` is the relative seed-dependent perturbation applied to
    the semi-axes and (in voxels) to the centre.
    """

    noise: float = 0.02
    head_fraction: float = 0.92
    aspect: tuple = (0.92, 1.0, 0.96)
    jitter: float = 0.04
    # tissue IDs from the outermost shell inwards
    shell_order: tuple = (
        tissues.SKIN, tissues.FAT, tissues.MUSCLE, tissues.BONE_CORTICAL,
        tissues.BONE_CANCELLOUS, tissues.DURA, tissues.CSF, tissues.BLOOD,
        tissues.GM, tissues.WM, tissues.CEREBELLUM, tissues.MUCOUS,
        tissues.VITREOUS_HUMOR,
    )
    spacing: tuple = field(default=(1.0, 1.0, 1.0))


MIN_PHANTOM_DIM = 32


def tissue_intensity(label: int) -> float:
    """Mean phantom intensity of a tissue; equally spaced over [0.1, 0.9]."""
    return 0.1 + 0.8 * (label - 1) / (tissues.NUM_TISSUES - 1)


def phantom_labels(seed: int, dims=(64, 64, 64), config: PhantomConfig = PhantomConfig()) -> np.ndarray:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < MIN_PHANTOM_DIM:
        raise ValueError(f"dims too small to fit 13 shells: need >= {MIN_PHANTOM_DIM} per axis, got {dims}")
    rng = np.random.default_rng(seed)
    half = np.array(dims, dtype=float) / 2.0
    semi = config.head_fraction * half * np.asarray(config.aspect, dtype=float)
    semi *= 1.0 + config.jitter * rng.uniform(-1.0, 1.0, size=3)
    semi = np.minimum(semi, half - 1.0)
    centre = half + config.jitter * 10.0 * rng.uniform(-1.0, 1.0, size=3)
    x, y, z = (np.arange(n) + 0.5 for n in dims)
    rho = np.sqrt(
        ((x[:, None, None] - centre[0]) / semi[0]) ** 2
        + ((y[None, :, None] - centre[1]) / semi[1]) ** 2
        + ((z[None, None, :] - centre[2]) / semi[2]) ** 2
    )
    order = config.shell_order
    if sorted(order) != list(range(1, tissues.NUM_TISSUES + 1)):
        raise ValueError("shell_order must be a permutation of the 13 tissue IDs")
    # equal-thickness shells, outer boundaries at 1, 12/13, ..., 1/13
    shell = np.floor((1.0 - rho) * len(order)).astype(int)
    labels = np.zeros(dims, dtype=np.uint8)
    inside = rho < 1.0
    labels[inside] = np.asarray(order, dtype=np.uint8)[np.clip(shell[inside], 0, len(order) - 1)]
    return labels


def generate_phantom(seed: int, dims=(64, 64, 64), config: PhantomConfig = PhantomConfig()):
    """Concentric-ellipsoid head phantom.

    Returns ``(mri, labels)``; the MRI is normalized with :func:`normalize_mri`.
    Deterministic for a fixed seed.
    """
    labels = phantom_labels(seed, dims, config)
    rng = np.random.default_rng([seed, 1])
    means = np.zeros(tissues.NUM_TISSUES + 1)
    means[1:] = [tissue_intensity(t) for t in range(1, tissues.NUM_TISSUES + 1)]
    intensity = means[labels]
    if config.noise > 0:
        intensity = intensity + rng.normal(0.0, config.noise, size=labels.shape)
    mri = normalize_mri(ScalarVolume(intensity, config.spacing))
    return mri, LabelVolume(labels, config.spacing)
