import numpy as np
import pytest

from headmodel.forknet import (
    ForkNetConfig, Network, argmax_labels, build_forknet, build_unet, segment_slice, segment_stack,
    split_indices, track_loss, train, walk,
)
from headmodel.volume import generate_phantom

from conftest import numeric_grad, rel_error


def manifest_parameter_count(depth, tracks, level1=None, head=True):
    """Closed-form parameter count from the module manifest (conv 3x3, deconv 2x2, BN scale+shift)."""
    conv = lambda cin, cout: 9 * cin * cout + cout  # noqa: E731
    deconv = lambda cin, cout: 4 * cin * cout + cout  # noqa: E731
    bn = lambda c: 2 * c  # noqa: E731
    enc = sum(conv(1 if i == 1 else 2 ** (i + 1), 2 ** (i + 2)) + bn(2 ** (i + 2)) for i in range(1, depth + 1))
    d_ch = {j: 2 ** (j + 1) for j in range(1, depth + 1)}
    c_ch = {j: 2 ** (j + 2) for j in range(1, depth)}
    if level1:
        d_ch[1] = c_ch[1] = level1
    track = 0
    for j in range(depth, 0, -1):
        cin = 2 ** (depth + 2) if j == depth else c_ch[j]
        track += deconv(cin, d_ch[j]) + bn(d_ch[j]) + conv(d_ch[j], d_ch[j])
        if j < depth:
            track += conv(2 ** (j + 3), c_ch[j]) + bn(c_ch[j])
    if head:
        track += conv(d_ch[1], 1)
    return enc + tracks * track


def test_forknet_parameter_count_closed_form():
    for depth, n in ((2, 3), (4, 13), (6, 13)):
        net = build_forknet(ForkNetConfig(degree=n, depth=depth, extent=2 ** (depth + 2)))
        assert net.parameter_count() == manifest_parameter_count(depth, n)


def test_unet_parameter_count_closed_form():
    net = build_unet(ForkNetConfig(depth=6, extent=256), out_channels=13)
    assert net.parameter_count() == manifest_parameter_count(6, 1, level1=13, head=False)


def test_scaled_walk_formulas():
    # the full-size size formulas, checked at depth 3 and extent 32
    D, E, N = 3, 32, 4
    w = walk(build_forknet(ForkNetConfig(degree=N, depth=D, extent=E))).by_module()
    for i in range(1, D + 1):
        assert w[f"EncMod_{i}"][0][1] == (1, 2 ** (i + 2), E >> (i - 1), E >> (i - 1))
        assert w[f"EncMod_{i}"][-1][1] == (1, 2 ** (i + 2), E >> i, E >> i)
    for j in range(1, D + 1):
        assert w[f"DecMod_{j}"][-1][1] == (N, 2 ** (j + 1), E >> (j - 1), E >> (j - 1))
    for j in range(1, D):
        assert w[f"Concat_{j}"][0][1] == (N, 2 ** (j + 3), E >> j, E >> j)
        assert w[f"ConvMod_{j}"][-1][1] == (N, 2 ** (j + 2), E >> j, E >> j)
    assert w["Map"][-1][1] == (N, 1, E, E)


def test_single_track_forknet_matches_unet_structure():
    cfg = ForkNetConfig(degree=1, depth=3, extent=32)
    fork_net, unet_net = build_forknet(cfg), build_unet(cfg, out_channels=1)
    fork, unet = walk(fork_net).by_module(), walk(unet_net).by_module()
    # identical encoder, skip joins and decoder above level 1; both emit one map
    for name in unet:
        if name.startswith(("EncMod", "Concat")) or name in ("DecMod_3", "DecMod_2", "ConvMod_2"):
            assert fork[name] == unet[name]
    x = np.zeros((2, 32, 32))
    assert fork_net.forward(x).shape == unet_net.forward(x).shape == (2, 1, 32, 32)
    # level-2 channels equal the single-track counts for the 13-channel U-net too
    unet13 = walk(build_unet(cfg, out_channels=13)).by_module()
    assert unet13["DecMod_2"] == fork["DecMod_2"]


def test_config_validation():
    with pytest.raises(ValueError):
        build_forknet(ForkNetConfig(depth=4, extent=40))
    with pytest.raises(ValueError):
        build_forknet(ForkNetConfig(degree=0, depth=2, extent=16))
    with pytest.raises(ValueError):
        build_forknet(ForkNetConfig(depth=1, extent=16))


def test_zeroed_map_outputs_half():
    net = build_forknet(ForkNetConfig(degree=3, depth=2, extent=16))
    for p in net.head.layers[0].params.values():
        p[:] = 0
    maps = segment_slice(net, np.random.default_rng(0).random((16, 16)))
    assert maps.shape == (3, 16, 16)
    np.testing.assert_allclose(maps, 0.5, atol=1e-7)
    with pytest.raises(ValueError):
        segment_slice(net, np.zeros((8, 8)))


def test_default_output_count():
    net = build_forknet(ForkNetConfig(depth=2, extent=16))
    assert net.n_outputs == 13
    assert segment_stack(net, np.zeros((3, 16, 16))).shape == (3, 13, 16, 16)


def test_encoder_sharing(rng):
    net = build_forknet(ForkNetConfig(degree=4, depth=2, extent=16)).astype(np.float64)
    trace = []
    net.forward(rng.random((2, 16, 16)), train=False, trace=trace)
    enc = [shape for name, _, shape in trace if name.startswith("EncMod")]
    assert all(s[0] == 1 for s in enc)  # evaluated once, one track
    # identical decoders see identical encoder features, so their outputs coincide
    for layer in (m for _, m in net.layers()):
        for k, p in layer.params.items():
            if p.ndim >= 1 and p.shape[0] == 4 and layer is not net.encoder[0].layers[0]:
                p[:] = p[:1]
    out = net.forward(rng.random((2, 16, 16)), train=False)
    for n in range(1, 4):
        np.testing.assert_array_equal(out[:, n], out[:, 0])


def test_argmax_examples():
    maps = np.array([0.2, 0.9, 0.1]).reshape(3, 1, 1)
    assert argmax_labels(maps)[0, 0] == 2
    assert (argmax_labels(np.full((4, 2, 2), 0.3)) == 1).all()
    assert (argmax_labels(np.full((4, 2, 2), 0.3), background_threshold=0.5) == 0).all()
    with pytest.raises(ValueError):
        argmax_labels(np.zeros((0, 2, 2)))


def test_argmax_invariant_under_monotone_transform(rng):
    maps = rng.random((5, 8, 8))
    ref = argmax_labels(maps)
    for f in (np.log, np.exp, lambda x: 3 * x + 1, lambda x: x ** 3):
        np.testing.assert_array_equal(argmax_labels(f(maps)), ref)


def test_end_to_end_gradient(rng):
    net = build_forknet(ForkNetConfig(degree=2, depth=2, extent=16, seed=3)).astype(np.float64)
    x = rng.random((2, 16, 16))
    t = (rng.random((2, 2, 16, 16)) > 0.5).astype(np.float64)

    def loss():
        return track_loss(net, net.forward(x, train=True), t)[0]

    net.zero_grad()
    _, g = track_loss(net, net.forward(x, train=True), t)
    net.backward(g)
    grads = net.named_grads()
    params = net.named_parameters()
    probe = params["EncMod_1.0.W"]
    idx = rng.choice(probe.size, 12, replace=False)
    assert rel_error(grads["EncMod_1.0.W"].ravel()[idx], numeric_grad(loss, probe, idx)) < 1e-4


def test_split_is_deterministic():
    a = split_indices(50, 0.9, seed=4)
    b = split_indices(50, 0.9, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert len(a[0]) == 45 and len(a[1]) == 5
    assert set(a[0]).isdisjoint(a[1])


def phantom_slices(seeds, dims=64):
    imgs, masks = [], []
    ids = np.arange(1, 14)[None, :, None, None]
    for s in seeds:
        mri, lab = generate_phantom(s, (dims,) * 3)
        imgs.append(np.moveaxis(mri.data, 2, 0))
        masks.append(np.moveaxis(lab.data, 2, 0)[:, None] == ids)
    return np.concatenate(imgs), np.concatenate(masks)


def test_train_errors():
    net = build_forknet(ForkNetConfig(degree=2, depth=2, extent=16))
    with pytest.raises(ValueError, match="empty"):
        train(net, np.zeros((0, 16, 16)), np.zeros((0, 2, 16, 16)))
    with pytest.raises(ValueError, match="mismatch"):
        train(net, np.zeros((2, 16, 16)), np.zeros((2, 3, 16, 16)))


def test_overfit_single_slice():
    imgs, masks = phantom_slices([0])
    img, mask = imgs[32:33], masks[32:33]
    net = build_forknet(ForkNetConfig(depth=4, extent=64))
    # 200 optimizer steps on the one slice
    train(net, img, mask, epochs=200, batch_size=1, lr=1e-2, split=1.0)
    pred = argmax_labels(segment_slice(net, img[0]), background_threshold=0.5)
    truth = np.where(mask[0].any(axis=0), mask[0].argmax(axis=0) + 1, 0)
    fg = (pred > 0) | (truth > 0)
    dice = []
    for n in np.unique(truth[truth > 0]):
        a, b = pred == n, truth == n
        dice.append(2 * (a & b).sum() / (a.sum() + b.sum()))
    assert np.mean(dice) >= 0.95, np.round(dice, 3)
    assert fg.any()


def test_training_is_deterministic_and_loss_decreases():
    imgs, masks = phantom_slices([0], dims=32)
    masks = masks[:, :3]
    cfg = ForkNetConfig(degree=3, depth=2, extent=32, seed=1)
    runs = []
    for _ in range(2):
        net = build_forknet(cfg)
        res = train(net, imgs, masks, epochs=3, batch_size=2, seed=5)
        runs.append((res, net))
    (r1, n1), (r2, n2) = runs
    assert r1.step_loss == r2.step_loss
    for k, v in n1.named_parameters().items():
        np.testing.assert_array_equal(v, n2.named_parameters()[k])
    assert r1.loss[-1] < r1.loss[0]


def test_checkpoint_round_trip(tmp_path, rng):
    net = build_forknet(ForkNetConfig(degree=3, depth=2, extent=16, seed=2))
    train(net, rng.random((4, 16, 16)), rng.random((4, 3, 16, 16)) > 0.5, epochs=1)
    net.save(tmp_path / "n.ckpt")
    back = Network.load(tmp_path / "n.ckpt")
    x = rng.random((2, 16, 16))
    np.testing.assert_array_equal(net.forward(x), back.forward(x))
    u = build_unet(ForkNetConfig(depth=2, extent=16), out_channels=5)
    u.save(tmp_path / "u.ckpt")
    assert Network.load(tmp_path / "u.ckpt").forward(x).shape == (2, 5, 16, 16)
