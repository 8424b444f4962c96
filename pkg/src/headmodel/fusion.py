"""Fuse axial, sagittal and coronal label volumes into one head model.

Voxels where at least two views agree take the majority label. Voxels where
all three views disagree ("fuzzy" voxels) are resolved by a neighbourhood
vote over the three views, or by the axial view when ``fuzzy="axial-priority"``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .volume import AXIS_INDEX, LabelVolume


@dataclass(frozen=True)
class ViewTriple:
    alpha: LabelVolume  # axial
    beta: LabelVolume  # sagittal
    gamma: LabelVolume  # coronal

    def __post_init__(self):
        dims = {self.alpha.dims, self.beta.dims, self.gamma.dims}
        if len(dims) != 1:
            raise ValueError(f"misaligned dims: {sorted(dims)}")
        spacings = {self.alpha.spacing, self.beta.spacing, self.gamma.spacing}
        if len(spacings) != 1:
            raise ValueError(f"misaligned spacing: {sorted(spacings)}")

    def arrays(self):
        return self.alpha.data, self.beta.data, self.gamma.data


# slicing axis of each view, in ViewTriple order
VIEW_AXES = (AXIS_INDEX["axial"], AXIS_INDEX["sagittal"], AXIS_INDEX["coronal"])


@dataclass(frozen=True)
class AgreementStats:
    pct_all_three: float
    pct_two: float
    pct_fuzzy: float
    voxels: int

    def as_dict(self):
        return {
            "pct_all_three": self.pct_all_three,
            "pct_two": self.pct_two,
            "pct_fuzzy": self.pct_fuzzy,
            "voxels": self.voxels,
        }

    def report(self):
        return (
            f"all three views agree : {self.pct_all_three:8.4f} %\n"
            f"two views agree       : {self.pct_two:8.4f} %\n"
            f"fuzzy (no agreement)  : {self.pct_fuzzy:8.4f} %\n"
            f"voxels counted        : {self.voxels}\n"
        )


def agreement_classes(a, b, c):
    """Boolean masks ``(all_three, exactly_two, fuzzy)``."""
    ab, bc, ac = a == b, b == c, a == c
    all3 = ab & bc
    fuzzy = ~(ab | bc | ac)
    return all3, ~all3 & ~fuzzy, fuzzy


def agreement_stats(a, b, c, mask=None) -> AgreementStats:
    all3, two, fuzzy = agreement_classes(a, b, c)
    if mask is not None:
        all3, two, fuzzy = all3[mask], two[mask], fuzzy[mask]
    n = all3.size
    if n == 0:
        raise ValueError("no voxels to count")
    n3, n2 = int(all3.sum()), int(two.sum())
    nf = n - n3 - n2
    return AgreementStats(100.0 * n3 / n, 100.0 * n2 / n, 100.0 * nf / n, n)


def _vote_counts(views, coords, window, plane):
    """Label counts ``(views, n, labels)`` around ``coords`` (clamped at the borders)."""
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    shape = np.array(views[0].shape)
    n_labels = int(max(int(v.max()) for v in views)) + 1
    n = len(coords)
    r = window // 2
    counts = np.zeros((len(views), n, n_labels), dtype=np.int64)
    rows = np.arange(n)
    span = range(-r, r + 1)
    for t, view in enumerate(views):
        for off in itertools.product(span, span, span):
            if plane and off[VIEW_AXES[t]] != 0:
                continue
            p = coords + np.asarray(off)
            ok = np.all((p >= 0) & (p < shape), axis=1)
            labs = view[tuple(p[ok].T)].astype(np.int64)
            counts[t] += np.bincount(rows[ok] * n_labels + labs, minlength=n * n_labels).reshape(n, n_labels)
    return counts


def _resolve(views, coords, window, plane):
    counts = _vote_counts(views, coords, window, plane)
    if plane:
        # the label with the single largest in-plane count over all three directions
        best = counts.max(axis=0)
    else:
        best = counts.sum(axis=0)
    return np.argmax(best, axis=1)  # first maximum = lowest label ID


def neighborhood_vote(t: ViewTriple, voxel, window=3, plane=False) -> int:
    """Most frequent label around ``voxel`` across the three views.

    ``plane=False`` counts a ``window``-cube in every view; ``plane=True`` counts
    a ``window``-square in each view's own slicing plane and takes the label
    with the largest count in any direction. Ties go to the lowest label ID.
    """
    views = t.arrays()
    voxel = np.asarray(voxel, dtype=np.int64)
    if voxel.shape != (3,) or np.any(voxel < 0) or np.any(voxel >= views[0].shape):
        raise IndexError(f"voxel {tuple(voxel)} outside volume {views[0].shape}")
    return int(_resolve(views, voxel[None], window, plane)[0])


def fuse_views(t: ViewTriple, window=3, fuzzy="neighborhood", plane=False, head_mask=None):
    """Fuse a view triple; returns ``(LabelVolume, AgreementStats)``.

    ``head_mask``: ``None`` counts statistics over all voxels, ``True`` over
    voxels that are non-background in any view, or pass a boolean array.
    Statistics describe the views before fuzzy voxels are resolved.
    """
    a, b, c = t.arrays()
    all3, two, fuzzy_mask = agreement_classes(a, b, c)
    if head_mask is True:
        head_mask = (a != 0) | (b != 0) | (c != 0)
    stats = agreement_stats(a, b, c, None if head_mask is None or head_mask is False else head_mask)
    # a == b or a == c -> a; otherwise (b == c, or fuzzy placeholder) -> b
    out = np.where((a == b) | (a == c), a, b)
    if fuzzy_mask.any():
        coords = np.argwhere(fuzzy_mask)
        if fuzzy == "axial-priority":
            out[fuzzy_mask] = a[fuzzy_mask]
        elif fuzzy == "neighborhood":
            out[tuple(coords.T)] = _resolve((a, b, c), coords, window, plane)
        else:
            raise ValueError(f"unknown fuzzy policy {fuzzy!r}")
    return LabelVolume(out, t.alpha.spacing), stats
