"""Layers for the encoder/decoder networks.

Activations are 5D arrays ``(batch, tracks, channels, height, width)``.
The track axis stacks the parallel decoders: a layer built with ``tracks=T``
holds one independent parameter set per track and evaluates all of them with
a single batched matmul. An input with a track extent of 1 is shared by every
track (that is how the encoder output fans out to the decoders); its gradient
is the sum over tracks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from . import _kernels

# planes at least this large use the direct kernel, smaller ones im2col + matmul
DIRECT_CONV_MIN_PIXELS = 1024


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._ctx = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _context(self):
        if self._ctx is None:
            raise RuntimeError(f"{self.kind}: missing forward context")
        return self._ctx

    def _finite(self, out):
        if not np.isfinite(out).all():
            raise FloatingPointError(f"{self.kind}: non-finite output")
        return out

    def astype(self, dtype):
        for store in (self.params, self.buffers):
            for key in store:
                store[key] = store[key].astype(dtype)
        self.grads = {}
        self._ctx = None
        return self

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _accumulate(self, name, g):
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = g


def _track_sum(dx, tracks_in):
    if tracks_in == 1 and dx.shape[1] != 1:
        return dx.sum(axis=1, keepdims=True)
    return dx


def _check_tracks(x, tracks):
    if x.ndim != 5:
        raise ValueError(f"expected a 5D activation, got shape {x.shape}")
    if x.shape[1] not in (1, tracks):
        raise ValueError(f"input has {x.shape[1]} tracks, layer has {tracks}")


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero padding 1."""

    kind = "Conv3x3"

    def __init__(self, in_channels, out_channels, tracks=1, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.in_channels, self.out_channels, self.tracks = in_channels, out_channels, tracks
        bound = np.sqrt(6.0 / (in_channels * 9))
        self.params["W"] = rng.uniform(-bound, bound, (tracks, out_channels, in_channels, 3, 3)).astype(dtype)
        self.params["b"] = np.zeros((tracks, out_channels), dtype=dtype)

    def forward(self, x, train=True):
        _check_tracks(x, self.tracks)
        B, Tx, C, H, W = x.shape
        if C != self.in_channels:
            raise ValueError(f"Conv3x3 expects {self.in_channels} channels, got {C}")
        T, F = self.tracks, self.out_channels
        xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (1, 1), (1, 1)))
        if H * W >= DIRECT_CONV_MIN_PIXELS:
            out = np.empty((B, T, F, H, W), dtype=x.dtype)
            _kernels.conv3x3_forward(xp, self.params["W"], self.params["b"], out)
            self._ctx = ("direct", xp)
            return self._finite(out)
        out, cols = _im2col_conv(xp, self.params["W"], self.params["b"])
        self._ctx = ("im2col", cols, x.shape)
        return self._finite(out)

    def backward(self, dout):
        ctx = self._context()
        T, F = self.tracks, self.out_channels
        dout = np.ascontiguousarray(dout)
        if ctx[0] == "direct":
            xp = ctx[1]
            dw = np.empty_like(self.params["W"])
            dxp = np.zeros_like(xp)
            _kernels.conv3x3_backward(xp, self.params["W"], dout, dw, dxp)
            self._accumulate("W", dw)
            self._accumulate("b", dout.sum(axis=(0, 3, 4)))
            return np.ascontiguousarray(dxp[:, :, :, 1:-1, 1:-1])
        _, cols, (B, Tx, C, H, W) = ctx
        dm = dout.transpose(1, 0, 3, 4, 2).reshape(T, B * H * W, F)
        dw = np.matmul(cols.transpose(0, 2, 1), dm)
        self._accumulate("W", dw.transpose(0, 2, 1).reshape(T, F, C, 3, 3))
        self._accumulate("b", dm.sum(axis=1))
        # input gradient = correlation of dout with the flipped, channel-swapped kernel
        wflip = self.params["W"][:, :, :, ::-1, ::-1].transpose(0, 2, 1, 3, 4)
        dp = np.pad(dout, ((0, 0), (0, 0), (0, 0), (1, 1), (1, 1)))
        dx, _ = _im2col_conv(dp, wflip)
        return _track_sum(dx, Tx)


def _im2col_conv(xp, w, bias=None):
    """3x3 correlation of padded ``xp`` with ``w (T, F, C, 3, 3)``; returns (out, cols)."""
    B, Tx, C, Hp, Wp = xp.shape
    H, W = Hp - 2, Wp - 2
    T, F = w.shape[:2]
    cols = sliding_window_view(xp, (3, 3), axis=(3, 4))
    cols = cols.transpose(1, 0, 3, 4, 2, 5, 6).reshape(Tx, B * H * W, C * 9)
    out = np.matmul(cols, w.reshape(T, F, C * 9).transpose(0, 2, 1))
    if bias is not None:
        out += bias[:, None, :]
    out = out.reshape(T, B, H, W, F).transpose(1, 0, 4, 2, 3)
    return np.ascontiguousarray(out), cols


class Deconv2x2(Layer):
    """Transposed convolution with a 2x2 kernel and stride 2 (doubles H and W)."""

    kind = "Deconv2x2"

    def __init__(self, in_channels, out_channels, tracks=1, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.in_channels, self.out_channels, self.tracks = in_channels, out_channels, tracks
        bound = np.sqrt(6.0 / in_channels)
        self.params["W"] = rng.uniform(-bound, bound, (tracks, in_channels, out_channels, 2, 2)).astype(dtype)
        self.params["b"] = np.zeros((tracks, out_channels), dtype=dtype)

    def forward(self, x, train=True):
        _check_tracks(x, self.tracks)
        B, Tx, C, H, W = x.shape
        if C != self.in_channels:
            raise ValueError(f"Deconv2x2 expects {self.in_channels} channels, got {C}")
        T, F = self.tracks, self.out_channels
        xm = x.transpose(1, 0, 3, 4, 2).reshape(Tx, B * H * W, C)
        out = np.matmul(xm, self.params["W"].reshape(T, C, F * 4))
        out = out.reshape(T, B, H, W, F, 2, 2) + self.params["b"][:, None, None, None, :, None, None]
        out = out.transpose(1, 0, 4, 2, 5, 3, 6).reshape(B, T, F, 2 * H, 2 * W)
        self._ctx = (xm, x.shape)
        return self._finite(out)

    def backward(self, dout):
        xm, (B, Tx, C, H, W) = self._context()
        T, F = self.tracks, self.out_channels
        dm = dout.reshape(B, T, F, H, 2, W, 2).transpose(1, 0, 3, 5, 2, 4, 6).reshape(T, B * H * W, F * 4)
        self._accumulate("W", np.matmul(xm.transpose(0, 2, 1), dm).reshape(T, C, F, 2, 2))
        self._accumulate("b", dm.reshape(T, -1, F, 4).sum(axis=(1, 3)))
        dxm = np.matmul(dm, self.params["W"].reshape(T, C, F * 4).transpose(0, 2, 1))
        dx = dxm.reshape(T, B, H, W, C).transpose(1, 0, 4, 2, 3)
        return np.ascontiguousarray(_track_sum(dx, Tx))


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    element of the window in row-major order."""

    kind = "MaxPool2x2"

    def forward(self, x, train=True):
        B, T, C, H, W = x.shape
        if H % 2 or W % 2:
            raise ValueError(f"MaxPool2x2 needs even spatial dims, got {H}x{W}")
        win = x.reshape(B, T, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 3, 5, 4, 6)
        win = win.reshape(B, T, C, H // 2, W // 2, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._ctx = (idx, x.shape)
        return out

    def backward(self, dout):
        idx, (B, T, C, H, W) = self._context()
        dwin = np.zeros(idx.shape + (4,), dtype=dout.dtype)
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dx = dwin.reshape(B, T, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 3, 5, 4, 6)
        return dx.reshape(B, T, C, H, W)


class BatchNorm(Layer):
    """Per-channel batch normalization.

    Train mode normalizes with batch statistics over (batch, H, W) and updates
    ``running = momentum * running + (1 - momentum) * batch``; infer mode uses
    the running statistics.
    """

    kind = "BatchNorm"

    def __init__(self, channels, tracks=1, momentum=0.9, eps=1e-3, dtype=np.float32):
        super().__init__()
        self.channels, self.tracks = channels, tracks
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones((tracks, channels), dtype=dtype)
        self.params["beta"] = np.zeros((tracks, channels), dtype=dtype)
        self.buffers["running_mean"] = np.zeros((tracks, channels), dtype=dtype)
        self.buffers["running_var"] = np.ones((tracks, channels), dtype=dtype)

    def forward(self, x, train=True):
        if x.shape[1:3] != (self.tracks, self.channels):
            raise ValueError(f"BatchNorm expects (tracks, channels)={(self.tracks, self.channels)}, got {x.shape[1:3]}")
        gamma = self.params["gamma"][None, :, :, None, None]
        beta = self.params["beta"][None, :, :, None, None]
        if train:
            mean = x.mean(axis=(0, 3, 4))
            var = x.var(axis=(0, 3, 4))
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(x.dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(x.dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, :, None, None]) * inv_std[None, :, :, None, None]
        self._ctx = (xhat, inv_std, train)
        return self._finite(gamma * xhat + beta)

    def backward(self, dout):
        xhat, inv_std, train = self._context()
        self._accumulate("gamma", (dout * xhat).sum(axis=(0, 3, 4)))
        self._accumulate("beta", dout.sum(axis=(0, 3, 4)))
        scale = (self.params["gamma"] * inv_std)[None, :, :, None, None]
        if not train:
            return dout * scale
        m = dout.shape[0] * dout.shape[3] * dout.shape[4]
        dsum = dout.sum(axis=(0, 3, 4), keepdims=True)
        dxsum = (dout * xhat).sum(axis=(0, 3, 4), keepdims=True)
        return scale * (dout - dsum / m - xhat * dxsum / m)


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, train=True):
        mask = x > 0
        self._ctx = mask
        return x * mask

    def backward(self, dout):
        return dout * self._context()


class LogSigmoid(Layer):
    kind = "LogSigmoid"

    def forward(self, x, train=True):
        self._ctx = x
        return self._finite(-np.logaddexp(0.0, -x))

    def backward(self, dout):
        return dout * expit(-self._context())


class Sigmoid(Layer):
    kind = "Sigmoid"

    def forward(self, x, train=True):
        out = expit(x)
        self._ctx = out
        return out

    def backward(self, dout):
        out = self._context()
        return dout * out * (1.0 - out)


class Concat(Layer):
    """Channel concatenation of a decoder tensor with a (shared) skip tensor."""

    kind = "Concat"

    def forward(self, x, skip, train=True):
        if x.shape[0] != skip.shape[0] or x.shape[3:] != skip.shape[3:]:
            raise ValueError(f"Concat spatial mismatch: {x.shape} vs {skip.shape}")
        T = max(x.shape[1], skip.shape[1])
        if {x.shape[1], skip.shape[1]} - {1, T}:
            raise ValueError(f"Concat track mismatch: {x.shape[1]} vs {skip.shape[1]}")
        shape = lambda a: (a.shape[0], T, a.shape[2]) + a.shape[3:]  # noqa: E731
        out = np.concatenate([np.broadcast_to(x, shape(x)), np.broadcast_to(skip, shape(skip))], axis=2)
        self._ctx = (x.shape, skip.shape)
        return out

    def backward(self, dout):
        xs, ss = self._context()
        dx = _track_sum(dout[:, :, :xs[2]], xs[1])
        ds = _track_sum(dout[:, :, xs[2]:], ss[1])
        return dx, ds
