"""ForkNet (one shared encoder, N parallel decoder tracks) and the U-net baseline.

Per track the decoder is wired as::

    DecMod_D(bottleneck) -> Concat_{D-1} -> ConvMod_{D-1} -> DecMod_{D-1} -> ... -> Concat_1
    -> ConvMod_1 -> DecMod_1 -> Map

where Concat_j joins the decoder tensor with the pooled output of EncMod_j.
With the default depth 6 and 256x256 input the bottleneck is 256x4x4 and each
map is 1x256x256; :func:`walk` records every layer output size.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .nn import (
    Adam, BatchNorm, Concat, Conv3x3, Deconv2x2, LogSigmoid, MaxPool2x2, ReLU, Sigmoid,
    cross_entropy, load_checkpoint, save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass
class ForkNetConfig:
    degree: int = 13
    depth: int = 6
    extent: int = 256
    log_output: bool = True
    seed: int = 0

    def validate(self):
        if self.degree < 1:
            raise ValueError("degree N must be >= 1")
        if self.depth < 2:
            raise ValueError("depth D must be >= 2")
        if self.extent % (2 ** self.depth):
            raise ValueError(f"extent {self.extent} not divisible by 2^{self.depth}")
        return self


class Module:
    """Named sequence of layers."""

    def __init__(self, name, layers):
        self.name = name
        self.layers = list(layers)

    def forward(self, x, train, trace=None):
        for layer in self.layers:
            x = layer.forward(x, train)
            if trace is not None:
                trace.append((self.name, layer.kind, x.shape[1:]))
        return x

    def backward(self, d):
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d


def _enc_channels(i):
    return 2 ** (i + 2)


class Network:
    """Encoder/decoder graph shared by ForkNet and the U-net baseline."""

    def __init__(self, config: ForkNetConfig, kind: str, final_channels: int | None = None):
        config.validate()
        self.config = config
        self.kind = kind
        D = config.depth
        rng = np.random.default_rng(config.seed)
        if kind == "forknet":
            T, self.n_outputs = config.degree, config.degree
        elif kind == "unet":
            T, self.n_outputs = 1, final_channels or config.degree
        else:
            raise ValueError(f"unknown network kind {kind!r}")
        self.tracks = T

        def conv(cin, cout, tracks):
            return Conv3x3(cin, cout, tracks, rng=rng)

        self.encoder = []
        cin = 1
        for i in range(1, D + 1):
            c = _enc_channels(i)
            self.encoder.append(Module(f"EncMod_{i}", [conv(cin, c, 1), BatchNorm(c, 1), ReLU(), MaxPool2x2()]))
            cin = c

        # decoder channel plan; the U-net carries `n_outputs` channels at level 1
        dec_ch = {j: 2 ** (j + 1) for j in range(1, D + 1)}
        cm_ch = {j: 2 ** (j + 2) for j in range(1, D)}
        if kind == "unet":
            dec_ch[1] = cm_ch[1] = self.n_outputs

        self.decoder = {}
        self.convmod = {}
        self.concat = {}
        prev = _enc_channels(D)
        for j in range(D, 0, -1):
            if j < D:
                self.concat[j] = Module(f"Concat_{j}", [Concat()])
                cat = prev + _enc_channels(j)
                self.convmod[j] = Module(
                    f"ConvMod_{j}", [conv(cat, cm_ch[j], T), BatchNorm(cm_ch[j], T), ReLU()]
                )
                prev = cm_ch[j]
            c = dec_ch[j]
            self.decoder[j] = Module(
                f"DecMod_{j}",
                [Deconv2x2(prev, c, T, rng=rng), BatchNorm(c, T), ReLU(), conv(c, c, T)],
            )
            prev = c
        out_act = LogSigmoid() if config.log_output else Sigmoid()
        if kind == "forknet":
            self.head = Module("Map", [conv(prev, 1, T), out_act])
        else:
            self.head = Module("Output", [out_act])

    # -- graph traversal ------------------------------------------------
    def modules(self):
        """Modules in evaluation order (decoder modules listed once; they carry all tracks)."""
        D = self.config.depth
        mods = list(self.encoder)
        for j in range(D, 0, -1):
            if j < D:
                mods += [self.concat[j], self.convmod[j]]
            mods.append(self.decoder[j])
        mods.append(self.head)
        return mods

    def layers(self):
        for mod in self.modules():
            for k, layer in enumerate(mod.layers):
                yield f"{mod.name}.{k}", layer

    def named_parameters(self):
        return {f"{prefix}.{key}": arr for prefix, layer in self.layers() for key, arr in layer.params.items()}

    def named_grads(self):
        return {f"{prefix}.{key}": g for prefix, layer in self.layers() for key, g in layer.grads.items()}

    def named_buffers(self):
        return {f"{prefix}.{key}": arr for prefix, layer in self.layers() for key, arr in layer.buffers.items()}

    def parameter_count(self):
        return int(sum(p.size for p in self.named_parameters().values()))

    def zero_grad(self):
        for _, layer in self.layers():
            layer.grads = {}

    def astype(self, dtype):
        for _, layer in self.layers():
            layer.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.encoder[0].layers[0].params["W"].dtype

    # -- evaluation -----------------------------------------------------
    def forward(self, images, train=False, trace=None):
        """Map a batch of slices ``(B, H, W)`` to output maps ``(B, N, H, W)``.

        Outputs are log-probabilities when ``config.log_output`` is set,
        otherwise probabilities.
        """
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 2:
            images = images[None]
        E = self.config.extent
        if images.shape[1:] != (E, E):
            raise ValueError(f"expected {E}x{E} slices, got {images.shape[1:]}")
        D = self.config.depth
        h = images[:, None, None]
        pooled = {}
        for i, mod in enumerate(self.encoder, start=1):
            h = mod.forward(h, train, trace)
            pooled[i] = h
        x = pooled[D]
        for j in range(D, 0, -1):
            if j < D:
                x = self.concat[j].layers[0].forward(x, pooled[j], train)
                if trace is not None:
                    trace.append((f"Concat_{j}", "Concat", x.shape[1:]))
                x = self.convmod[j].forward(x, train, trace)
            x = self.decoder[j].forward(x, train, trace)
        out = self.head.forward(x, train, trace)
        return out[:, :, 0] if self.kind == "forknet" else out[:, 0]

    def backward(self, dmaps):
        """Accumulate parameter gradients from ``d loss / d outputs`` ``(B, N, H, W)``.

        Returns the gradient w.r.t. the input slices.
        """
        D = self.config.depth
        d = dmaps[:, :, None] if self.kind == "forknet" else dmaps[:, None]
        d = self.head.backward(d)
        dpooled = {}
        for j in range(1, D + 1):
            d = self.decoder[j].backward(d)
            if j < D:
                d = self.convmod[j].backward(d)
                d, dpooled[j] = self.concat[j].layers[0].backward(d)
        g = d  # the bottleneck feeds DecMod_D of every track
        for i in range(D, 0, -1):
            g = self.encoder[i - 1].backward(g)
            if i > 1:
                g = g + dpooled[i - 1]
        return g[:, 0, 0]

    # -- persistence ----------------------------------------------------
    def save(self, path):
        entries = []
        for prefix, layer in self.layers():
            for store in (layer.params, layer.buffers):
                for key, arr in store.items():
                    entries.append((f"{prefix}.{key}", layer.kind, arr))
        meta = {
            "kind": self.kind,
            "degree": self.config.degree,
            "depth": self.config.depth,
            "extent": self.config.extent,
            "log_output": int(self.config.log_output),
            "outputs": self.n_outputs,
            "seed": self.config.seed,
        }
        return save_checkpoint(path, entries, meta)

    @classmethod
    def load(cls, path):
        meta, manifest, arrays = load_checkpoint(path)
        config = ForkNetConfig(
            degree=int(meta["degree"]), depth=int(meta["depth"]), extent=int(meta["extent"]),
            log_output=bool(int(meta["log_output"])), seed=int(meta["seed"]),
        )
        net = cls(config, meta["kind"], int(meta["outputs"]))
        expected = {f"{p}.{k}": layer for p, layer in net.layers() for k in (*layer.params, *layer.buffers)}
        if set(expected) != set(arrays):
            raise ValueError(f"{path}: checkpoint manifest does not match a {meta['kind']} network")
        for name, arr in arrays.items():
            layer = expected[name]
            key = name.rsplit(".", 1)[1]
            store = layer.params if key in layer.params else layer.buffers
            if store[key].shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {store[key].shape}")
            store[key] = arr.astype(np.float32)
        return net


def build_forknet(config: ForkNetConfig = None) -> Network:
    """ForkNet of degree ``config.degree``: shared encoder, one decoder track per tissue."""
    return Network(config or ForkNetConfig(), "forknet")


def build_unet(config: ForkNetConfig = None, out_channels: int = 13) -> Network:
    """U-net baseline: a single decoder whose level-1 modules carry ``out_channels``."""
    return Network(config or ForkNetConfig(), "unet", out_channels)


# -- structure -----------------------------------------------------------------
@dataclass
class Walk:
    shapes: list  # (module, layer kind, per-batch shape (tracks, C, H, W))
    module_count: int
    layer_count: int

    def by_module(self):
        out = {}
        for name, kind, shape in self.shapes:
            out.setdefault(name, []).append((kind, shape))
        return out


def walk(net: Network) -> Walk:
    """Run one zero slice through ``net`` (infer mode) recording every layer output shape.

    Module count is the number of named modules along a single track; layer
    count is the number of primitive layers along a single track.
    """
    trace = []
    E = net.config.extent
    net.forward(np.zeros((1, E, E), dtype=net.dtype), train=False, trace=trace)
    modules = {name for name, _, _ in trace}
    return Walk(trace, len(modules), len(trace))


# -- inference -----------------------------------------------------------------
def _as_probabilities(net, out):
    return np.exp(out) if net.config.log_output else out


def segment_slice(net: Network, image) -> np.ndarray:
    """Label maps ``(N, H, W)`` with values in [0, 1] for one slice."""
    data = getattr(image, "data", image)
    out = net.forward(np.asarray(data)[None], train=False)
    return _as_probabilities(net, out)[0]


def segment_stack(net: Network, images, batch_size=8) -> np.ndarray:
    """Label maps ``(S, N, H, W)`` for a stack of slices ``(S, H, W)``."""
    images = np.asarray(images)
    maps = [
        _as_probabilities(net, net.forward(images[s:s + batch_size], train=False)).astype(np.float32)
        for s in range(0, len(images), batch_size)
    ]
    return np.concatenate(maps, axis=0)


def argmax_labels(maps, background_threshold=None) -> np.ndarray:
    """Per pixel, the 1-based index of the largest map (lowest index on ties).

    With ``background_threshold`` set, pixels whose largest map value is below
    it are labelled 0. ``maps`` has the map index on axis 0.
    """
    maps = np.asarray(maps)
    if maps.ndim < 1 or maps.shape[0] == 0:
        raise ValueError("empty map set")
    labels = (np.argmax(maps, axis=0) + 1).astype(np.uint8)
    if background_threshold is not None:
        labels[maps.max(axis=0) < background_threshold] = 0
    return labels


# -- training ------------------------------------------------------------------
@dataclass
class TrainResult:
    loss: list = field(default_factory=list)  # mean training loss per epoch
    val_loss: list = field(default_factory=list)
    step_loss: list = field(default_factory=list)
    train_index: np.ndarray = None
    val_index: np.ndarray = None
    seconds: float = 0.0


def split_indices(n, split=0.9, seed=0):
    """Shuffle ``range(n)`` and cut it into training / validation index sets."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(n, max(1, int(round(split * n))))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def track_loss(net, out, targets):
    """Sum over tracks of the per-track mean cross-entropy, and its gradient."""
    loss, grad = cross_entropy(out, targets, log_space=net.config.log_output)
    n = targets.shape[1]
    return loss * n, grad * n


def train(net: Network, images, masks, epochs=50, batch_size=2, lr=1e-3, seed=0, split=0.9,
          optimizer=None, progress=None) -> TrainResult:
    """Train on slices ``images (S, H, W)`` against binary masks ``(S, N, H, W)``."""
    images = np.asarray(images, dtype=net.dtype)
    masks = np.asarray(masks)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if masks.shape != (images.shape[0], net.n_outputs) + images.shape[1:]:
        raise ValueError(f"label/slice shape mismatch: {masks.shape} vs {images.shape}")
    masks = masks.astype(net.dtype)
    result = TrainResult()
    result.train_index, result.val_index = split_indices(len(images), split, seed)
    opt = optimizer or Adam(lr=lr)
    rng = np.random.default_rng([seed, 7])
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(result.train_index)
        losses = []
        for s in range(0, len(order), batch_size):
            idx = np.sort(order[s:s + batch_size])
            net.zero_grad()
            out = net.forward(images[idx], train=True)
            loss, grad = track_loss(net, out, masks[idx])
            net.backward(grad)
            opt.step(net.named_parameters(), net.named_grads())
            losses.append(loss)
        result.step_loss.extend(losses)
        result.loss.append(float(np.mean(losses)))
        if len(result.val_index):
            vl = [
                track_loss(net, net.forward(images[result.val_index[s:s + 8]], train=False),
                           masks[result.val_index[s:s + 8]])[0] * len(result.val_index[s:s + 8])
                for s in range(0, len(result.val_index), 8)
            ]
            result.val_loss.append(float(np.sum(vl) / len(result.val_index)))
        log.debug("epoch %d/%d loss %.5f val %s", epoch + 1, epochs, result.loss[-1],
                 f"{result.val_loss[-1]:.5f}" if result.val_loss else "-")
        if progress is not None:
            progress(epoch, result)
    result.seconds = time.perf_counter() - t0
    return result
