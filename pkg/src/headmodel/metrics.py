"""Segmentation overlap/distance metrics and electric-field error metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tissues

HOTSPOT_FRACTION = 0.7


def dice(a, b) -> float:
    """Dice coefficient of two boolean masks, in percent."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        raise ValueError("dice undefined for two empty masks")
    return 200.0 * int(np.logical_and(a, b).sum()) / total


def hausdorff(a, b, spacing=(1.0, 1.0, 1.0), symmetric=False) -> float:
    """Directed Hausdorff distance from mask ``a`` to mask ``b`` in mm.

    Computed from the exact Euclidean distance transform of ``b`` sampled on
    ``a``. ``symmetric=True`` returns ``max(h(a, b), h(b, a))``.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("hausdorff distance needs two non-empty masks")
    spacing = tuple(float(s) for s in spacing)[: a.ndim]
    if symmetric:
        return max(hausdorff(a, b, spacing), hausdorff(b, a, spacing))
    dist = ndimage.distance_transform_edt(~b, sampling=spacing)
    return float(dist[a].max())


def normalize_field(field, region):
    """Divide a field magnitude by its maximum over ``region``."""
    peak = float(np.max(field[region]))
    if not peak > 0:
        raise ValueError("field vanishes on the region")
    return field / peak


def _region(region, shape):
    region = np.asarray(region, dtype=bool)
    if region.shape != shape:
        raise ValueError(f"shape mismatch: region {region.shape} vs field {shape}")
    if not region.any():
        raise ValueError("empty region")
    return region


def hotspot_mask(e_ref, roi, fraction=HOTSPOT_FRACTION):
    """ROI voxels whose reference magnitude exceeds ``fraction`` of the ROI maximum.

    Voxels equal to the maximum are always included.
    """
    e_ref = np.asarray(e_ref)
    roi = _region(roi, e_ref.shape)
    peak = e_ref[roi].max()
    return roi & ((e_ref > fraction * peak) | (e_ref == peak))


def mae(e_ref, e_test, region, normalize=True) -> float:
    """Mean absolute field difference over ``region``, in percent (x100).

    With ``normalize`` each field is first divided by its own maximum over
    the region.
    """
    e_ref = np.asarray(e_ref, dtype=np.float64)
    e_test = np.asarray(e_test, dtype=np.float64)
    if e_ref.shape != e_test.shape:
        raise ValueError(f"shape mismatch: {e_ref.shape} vs {e_test.shape}")
    region = _region(region, e_ref.shape)
    if normalize:
        e_ref = normalize_field(e_ref, region)
        e_test = normalize_field(e_test, region)
    return 100.0 * float(np.mean(np.abs(e_ref[region] - e_test[region])))


def mae_hotspot(e_ref, e_test, roi, normalize=True) -> float:
    """MAE restricted to the hotspot of the reference field within ``roi``.

    Normalization (when enabled) still uses each field's ROI maximum.
    """
    e_ref = np.asarray(e_ref, dtype=np.float64)
    e_test = np.asarray(e_test, dtype=np.float64)
    roi = _region(roi, e_ref.shape)
    if normalize:
        e_ref = normalize_field(e_ref, roi)
        e_test = normalize_field(e_test, roi)
    return mae(e_ref, e_test, hotspot_mask(e_ref, roi), normalize=False)


@dataclass
class MetricsReport:
    subject: str = ""
    model: str = ""
    dice: dict = field(default_factory=dict)  # tissue -> percent (None when absent from both)
    hd: dict = field(default_factory=dict)  # tissue -> directed mm
    hd_symmetric: dict = field(default_factory=dict)
    mae: float | None = None
    mae_hotspot: float | None = None
    extra: dict = field(default_factory=dict)

    def table(self):
        lines = [f"subject {self.subject}  model {self.model}",
                 f"{'tissue':<16}{'dice [%]':>10}{'HD [mm]':>10}{'HDsym [mm]':>12}"]
        for t in range(1, tissues.NUM_TISSUES + 1):
            name = tissues.TISSUE_NAMES[t]
            fmt = lambda v, w: f"{v:>{w}.2f}" if v is not None else f"{'-':>{w}}"  # noqa: E731
            lines.append(f"{name:<16}{fmt(self.dice.get(t), 10)}{fmt(self.hd.get(t), 10)}"
                         f"{fmt(self.hd_symmetric.get(t), 12)}")
        if self.mae is not None:
            lines.append(f"MAE [%] {self.mae:.3f}   MAE0.7 [%] {self.mae_hotspot:.3f}")
        return "\n".join(lines)

    def keyvalues(self):
        kv = {"subject": self.subject, "model": self.model}
        for t in range(1, tissues.NUM_TISSUES + 1):
            for name, store in (("dice", self.dice), ("hd", self.hd), ("hd_sym", self.hd_symmetric)):
                if t in store:
                    kv[f"{name}.{t}"] = "nan" if store[t] is None else f"{store[t]:.6f}"
        if self.mae is not None:
            kv["mae"] = f"{self.mae:.6f}"
            kv["mae_0.7"] = f"{self.mae_hotspot:.6f}"
        kv.update(self.extra)
        return "\n".join(f"{k}={v}" for k, v in kv.items())


def segmentation_report(test, reference, spacing=(1.0, 1.0, 1.0), subject="", model="") -> MetricsReport:
    """Per-tissue Dice and Hausdorff distances of label array ``test`` vs ``reference``."""
    test = np.asarray(test)
    reference = np.asarray(reference)
    report = MetricsReport(subject=subject, model=model)
    for t in range(1, tissues.NUM_TISSUES + 1):
        a, b = test == t, reference == t
        if not a.any() and not b.any():
            report.dice[t] = None
            continue
        report.dice[t] = dice(a, b)
        if a.any() and b.any():
            report.hd[t] = hausdorff(a, b, spacing)
            report.hd_symmetric[t] = max(report.hd[t], hausdorff(b, a, spacing))
    return report
