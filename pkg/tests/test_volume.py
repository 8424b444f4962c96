import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from headmodel import tissues
from headmodel.volume import (
    LabelVolume, PhantomConfig, ScalarVolume, assemble_labels, extract_slice, generate_phantom,
    header_path, load_volume, normalize_mri, save_volume, slices, stack_slices, tissue_intensity,
)


def write_raw(tmp_path, name, payload, dims, kind, spacing="1,1,1"):
    path = tmp_path / name
    path.write_bytes(payload)
    header_path(path).write_text(f"dims={dims}\nspacing={spacing}\nkind={kind}\norder=little-endian,x-fastest\n")
    return path


def test_load_label_bytes(tmp_path):
    path = write_raw(tmp_path, "lab.raw", bytes([1, 1, 1, 1, 0, 0, 0, 0]), "2,2,2", "label")
    vol = load_volume(path)
    assert isinstance(vol, LabelVolume)
    assert vol.dims == (2, 2, 2)
    assert int((vol.data == 1).sum()) == 4
    # x-fastest: the first four bytes fill x, y for z = 0
    assert (vol.data[:, :, 0] == 1).all() and (vol.data[:, :, 1] == 0).all()


def test_load_full_size_scalar(tmp_path):
    n = 256
    payload = np.arange(n ** 3, dtype="<f4").tobytes()
    vol = load_volume(write_raw(tmp_path, "mri.raw", payload, "256,256,256", "scalar"))
    assert isinstance(vol, ScalarVolume) and vol.dims == (n, n, n)
    assert vol.data[1, 0, 0] == 1.0 and vol.data[0, 1, 0] == n


def test_load_errors(tmp_path):
    with pytest.raises(ValueError, match="size mismatch"):
        load_volume(write_raw(tmp_path, "a.raw", bytes(100), "256,256,256", "scalar"))
    with pytest.raises(ValueError, match="unknown element kind"):
        load_volume(write_raw(tmp_path, "b.raw", bytes(8), "2,2,2", "complex"))
    with pytest.raises(ValueError, match="dims"):
        load_volume(write_raw(tmp_path, "c.raw", bytes(8), "2,2", "label"))
    path = write_raw(tmp_path, "d.raw", bytes(8), "2,2,2", "label")
    path.unlink()
    with pytest.raises(FileNotFoundError):
        load_volume(path)
    header_path(tmp_path / "e.raw").write_text("dims=2,2,2\nkind=label\n")
    (tmp_path / "e.raw").write_bytes(bytes(8))
    with pytest.raises(ValueError, match="spacing"):
        load_volume(tmp_path / "e.raw")


def test_header_format(tmp_path):
    save_volume(tmp_path / "v.raw", ScalarVolume(np.zeros((3, 2, 1)), (0.5, 1.0, 2.0)))
    text = (tmp_path / "v.hdr").read_text()
    assert "dims=3,2,1" in text and "kind=scalar" in text and "order=little-endian,x-fastest" in text
    assert (tmp_path / "v.raw").stat().st_size == 3 * 2 * 1 * 4


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, width=32)),
       st.tuples(*[st.floats(0.1, 4.0)] * 3))
def test_scalar_round_trip_bit_exact(tmp_path_factory, data, spacing):
    path = tmp_path_factory.mktemp("rt") / "s.raw"
    vol = ScalarVolume(data, spacing)
    save_volume(path, vol)
    back = load_volume(path)
    assert back.data.tobytes() == vol.data.tobytes() and back.spacing == vol.spacing
    save_volume(path, back)
    assert load_volume(path).data.tobytes() == vol.data.tobytes()


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
              elements=st.integers(0, 13)))
def test_label_round_trip_bit_exact(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("rt") / "l.raw"
    save_volume(path, LabelVolume(data))
    back = load_volume(path)
    assert isinstance(back, LabelVolume)
    np.testing.assert_array_equal(back.data, data)


def test_volume_invariants():
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), 14))
    with pytest.raises(ValueError):
        ScalarVolume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        ScalarVolume(np.zeros((2, 2)))
    vol = ScalarVolume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1.0


def test_normalize_examples():
    out = normalize_mri(ScalarVolume(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)))
    np.testing.assert_allclose(out.data.ravel(), [0.0, 0.5, 1.0], atol=1e-7)
    with pytest.raises(ValueError, match="constant volume"):
        normalize_mri(ScalarVolume(np.full((3, 1, 1), 5.0)))
    # fixed point
    np.testing.assert_allclose(normalize_mri(out).data, out.data, atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 3, 2), elements=st.floats(-100, 100)),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_normalize_affine_invariance(data, a, b):
    if np.ptp(data) < 1e-3:
        return
    ref = normalize_mri(ScalarVolume(data)).data
    assert ref.min() == 0.0 and ref.max() == 1.0
    np.testing.assert_allclose(normalize_mri(ScalarVolume(a * data + b)).data, ref, atol=2e-5)


@settings(max_examples=20, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
              elements=st.integers(0, 13)), st.sampled_from(["sagittal", "coronal", "axial"]))
def test_extract_assemble_identities(data, axis):
    vol = LabelVolume(data)
    rebuilt = assemble_labels(slices(vol, axis), axis)
    np.testing.assert_array_equal(rebuilt.data, data)
    for k, s in enumerate(slices(rebuilt, axis)):
        np.testing.assert_array_equal(extract_slice(data, axis, k).data, s.data)


def test_slice_axis_convention():
    data = np.arange(4 * 5 * 6).reshape(4, 5, 6)
    assert extract_slice(data, "axial", 2).data.tolist() == data[:, :, 2].tolist()
    assert extract_slice(data, "sagittal", 1).data.tolist() == data[1].tolist()
    assert extract_slice(data, "coronal", 3).data.tolist() == data[:, 3, :].tolist()
    s = extract_slice(data, "axial", 0)
    assert (s.width, s.height) == (4, 5)


def test_full_size_sagittal_slices():
    vol = np.zeros((256, 256, 256), dtype=np.uint8)
    ss = slices(vol, "sagittal")
    assert len(ss) == 256 and all(s.data.shape == (256, 256) for s in ss[:3])


def test_slice_errors():
    data = np.zeros((4, 4, 3))
    with pytest.raises(IndexError, match="index out of range"):
        extract_slice(data, "axial", 3)
    ss = slices(np.zeros((4, 4, 3), dtype=np.uint8), "axial")
    with pytest.raises(ValueError, match="one slice per index"):
        stack_slices(ss[:1] + ss[2:], "axial")
    bad = list(ss)
    bad[1] = type(ss[1])("axial", 1, np.zeros((4, 5)))
    with pytest.raises(ValueError, match="ragged slice set"):
        stack_slices(bad, "axial")


def test_phantom_contains_every_tissue_and_is_deterministic():
    mri, labels = generate_phantom(0, (64, 64, 64))
    counts = np.bincount(labels.data.ravel(), minlength=14)
    assert counts[0] > 0 and (counts[1:] >= 1).all()
    mri2, labels2 = generate_phantom(0, (64, 64, 64))
    assert mri.data.tobytes() == mri2.data.tobytes() and labels.data.tobytes() == labels2.data.tobytes()
    assert mri.data.min() == 0.0 and mri.data.max() == 1.0
    other = generate_phantom(1, (64, 64, 64))[1]
    assert not np.array_equal(other.data, labels.data)


def test_phantom_noise_free_is_piecewise_constant():
    mri, labels = generate_phantom(3, (40, 40, 40), PhantomConfig(noise=0.0))
    values = {}
    for t in range(tissues.NUM_TISSUES + 1):
        v = np.unique(mri.data[labels.data == t])
        assert v.size == 1
        values[t] = float(v[0])
    # tissue means are equally spaced and ordered by ID
    ordered = [values[t] for t in range(1, 14)]
    assert np.all(np.diff(ordered) > 0)
    np.testing.assert_allclose(np.diff(ordered), np.diff(ordered)[0], rtol=1e-5)
    assert tissue_intensity(1) == pytest.approx(0.1) and tissue_intensity(13) == pytest.approx(0.9)


def test_phantom_too_small():
    with pytest.raises(ValueError, match="too small"):
        generate_phantom(0, (16, 64, 64))
