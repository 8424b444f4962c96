import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import cdist

from headmodel import tissues
from headmodel.metrics import (dice, hausdorff, hotspot_mask, mae, mae_hotspot, normalize_field,
                               segmentation_report)


def brute_dice(a, b):
    sa = set(map(tuple, np.argwhere(a)))
    sb = set(map(tuple, np.argwhere(b)))
    return 200.0 * len(sa & sb) / (len(sa) + len(sb))


def brute_hd(a, b, spacing):
    pa = np.argwhere(a) * np.asarray(spacing)
    pb = np.argwhere(b) * np.asarray(spacing)
    return cdist(pa, pb).min(axis=1).max()


def random_pair(rng, shape=(16, 16, 16), limit=500):
    pa, pb = rng.uniform(0.005, 0.1, 2)
    a = rng.random(shape) < pa
    b = rng.random(shape) < pb
    for m in (a, b):
        idx = np.flatnonzero(m)
        if idx.size > limit:
            m.ravel()[rng.choice(idx, idx.size - limit, replace=False)] = False
        if not m.any():
            m.ravel()[rng.integers(m.size)] = True
    return a, b


def test_dice_examples():
    a = np.zeros((4, 4, 4), bool)
    b = a.copy()
    a[0, 0, :3] = True
    b[0, 0, 1:4] = True
    assert dice(a, b) == pytest.approx(200 / 3, abs=1e-12)
    assert dice(a, a) == 100.0
    c = np.zeros_like(a)
    c[3, 3, 3] = True
    assert dice(a, c) == 0.0
    with pytest.raises(ValueError, match="empty"):
        dice(np.zeros(3, bool), np.zeros(3, bool))
    with pytest.raises(ValueError, match="shape mismatch"):
        dice(np.ones(3), np.ones(4))


def test_dice_and_hd_oracles_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = random_pair(rng)
        spacing = tuple(rng.choice([0.5, 1.0, 1.3], 3))
        assert dice(a, b) == brute_dice(a, b)
        assert dice(a, b) == dice(b, a)
        assert abs(hausdorff(a, b, spacing) - brute_hd(a, b, spacing)) < 1e-9
        assert abs(hausdorff(a, b, spacing, symmetric=True)
                   - max(brute_hd(a, b, spacing), brute_hd(b, a, spacing))) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_dice_bounds(seed):
    a, b = random_pair(np.random.default_rng(seed), (6, 6, 6))
    d = dice(a, b)
    assert 0.0 <= d <= 100.0
    assert (d == 100.0) == np.array_equal(a, b)


def test_hausdorff_examples():
    a = np.zeros((5, 5, 2), bool)
    b = a.copy()
    a[0, 0, 0] = True
    b[3, 4, 0] = True
    assert hausdorff(a, b) == 5.0
    assert hausdorff(a, a) == 0.0
    assert hausdorff(a, b, spacing=(2.0, 1.0, 1.0)) == pytest.approx(np.hypot(6, 4))
    sup = a | b
    assert hausdorff(a, sup) == 0.0 and hausdorff(sup, a) == 5.0
    with pytest.raises(ValueError, match="non-empty"):
        hausdorff(a, np.zeros_like(a))
    with pytest.raises(ValueError, match="shape mismatch"):
        hausdorff(a, b[:4])


def test_mae_examples():
    rng = np.random.default_rng(1)
    e = rng.uniform(0.1, 1.0, (6, 6, 6))
    region = rng.random((6, 6, 6)) < 0.5
    assert mae(e, e, region) == 0.0
    assert mae(e, e, region, normalize=False) == 0.0
    ref = np.full((4, 4, 4), 0.5)
    ref[0, 0, 0] = 1.0
    assert mae(ref, ref - 0.01, np.ones_like(ref, bool), normalize=False) == pytest.approx(1.0, abs=1e-12)
    # scaling the test field does not change the normalized error
    assert mae(e, 7.0 * e, region) == pytest.approx(0.0, abs=1e-12)
    assert mae(e, 7.0 * e, region, normalize=False) > 0


def test_mae_permutation_invariance():
    rng = np.random.default_rng(2)
    a, b = rng.random(300), rng.random(300)
    perm = rng.permutation(300)
    region = rng.random(300) < 0.6
    shape = (3, 10, 10)
    x = mae(a.reshape(shape), b.reshape(shape), region.reshape(shape))
    y = mae(a[perm].reshape(shape), b[perm].reshape(shape), region[perm].reshape(shape))
    assert x == pytest.approx(y, rel=1e-13)
    assert x >= 0


def test_mae_errors():
    e = np.ones((2, 2, 2))
    with pytest.raises(ValueError, match="empty region"):
        mae(e, e, np.zeros((2, 2, 2), bool))
    with pytest.raises(ValueError, match="shape mismatch"):
        mae(e, np.ones((2, 2, 3)), np.ones((2, 2, 2), bool))
    with pytest.raises(ValueError, match="vanishes"):
        normalize_field(np.zeros((2, 2, 2)), np.ones((2, 2, 2), bool))


def test_hotspot_and_mae_hotspot():
    ref = np.array([1.0, 0.8, 0.6, 0.2]).reshape(4, 1, 1)
    test = np.array([0.9, 0.8, 0.0, 0.0]).reshape(4, 1, 1)
    roi = np.ones_like(ref, bool)
    np.testing.assert_array_equal(hotspot_mask(ref, roi).ravel(), [1, 1, 0, 0])
    # normalized test field is [1, 8/9, 0, 0]; hotspot errors are 0 and |0.8 - 8/9|
    assert mae_hotspot(ref, test, roi) == pytest.approx(100 * (8 / 9 - 0.8) / 2, rel=1e-12)
    assert mae_hotspot(ref, test, roi, normalize=False) == pytest.approx(5.0, rel=1e-12)


def test_segmentation_report():
    rng = np.random.default_rng(3)
    ref = rng.integers(0, tissues.NUM_TISSUES, (10, 10, 10)).astype(np.uint8)  # label 13 absent
    test = ref.copy()
    test[:2] = 0
    rep = segmentation_report(test, ref, subject="s", model="R_psi")
    assert rep.dice[tissues.MUCOUS] is None
    for t in range(1, tissues.NUM_TISSUES):
        assert rep.dice[t] == pytest.approx(dice(test == t, ref == t))
        assert rep.hd[t] == 0.0 and rep.hd_symmetric[t] >= 0.0
    text = rep.table()
    assert "mucous tissue" in text and text.count("\n") == tissues.NUM_TISSUES + 1
    kv = dict(line.split("=", 1) for line in rep.keyvalues().splitlines())
    assert kv["model"] == "R_psi" and kv[f"dice.{tissues.MUCOUS}"] == "nan"
    assert "mae" not in kv
