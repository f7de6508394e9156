"""Invertible layers: actnorm, channel permutations, invertible 1x1 convolution,
coupling, plus squeeze and split.

Every layer exposes

* ``forward(x) -> (y, logdet)`` with ``logdet`` of shape ``(n,)``,
* ``inverse(y) -> x``,
* ``forward_ctx(x) -> (y, logdet, ctx)`` and ``backward(ctx, dy, dlogdet)
  -> (dx, grads)`` for training, where ``dlogdet`` is the per-sample
  gradient of the loss with respect to the layer's log-determinant.

Parameters live in ``params()`` (trainable) and ``buffers()`` (fixed); both
return dicts of the live arrays, so in-place updates reach the layer.
"""

import logging

import numpy as np
import scipy.linalg

from . import tensor as T
from .errors import NumericsError, ShapeError, SingularError

log = logging.getLogger(__name__)

DET_GUARD = 1e-12
STD_EPS = 1e-6


class Layer:
    kind = "layer"

    def params(self):
        return {}

    def buffers(self):
        return {}

    def num_free_params(self):
        return sum(p.size for p in self.params().values())

    def describe(self):
        return {"kind": self.kind}

    def forward(self, x):
        y, logdet, _ = self.forward_ctx(x)
        return y, logdet


# -- actnorm ---------------------------------------------------------------


class ActNorm(Layer):
    """Per-channel scale and bias with data-dependent initialization."""

    kind = "actnorm"

    def __init__(self, channels, dtype=T.F32):
        self.s = np.ones(channels, dtype=dtype)
        self.b = np.zeros(channels, dtype=dtype)
        self.initialized = False

    def params(self):
        return {"s": self.s, "b": self.b}

    def describe(self):
        return {"kind": self.kind, "channels": len(self.s), "initialized": self.initialized}

    def _check(self, x):
        if x.shape[-1] != len(self.s):
            raise ShapeError(f"actnorm has {len(self.s)} channels, input has {x.shape[-1]}")
        if np.any(self.s == 0):
            raise SingularError("actnorm scale contains a zero channel")

    def initialize(self, x):
        """Set s, b so that this layer maps ``x`` to zero mean, unit variance."""
        self._check(x)
        x64 = x.astype(T.F64)
        mean = T.mean_per_channel(x64)
        std = np.sqrt(T.var_per_channel(x64))
        flat = std < STD_EPS
        if np.any(flat):
            log.warning("actnorm init: %d zero-variance channel(s), adding eps=%g",
                        int(flat.sum()), STD_EPS)
            std = np.where(flat, std + STD_EPS, std)
        self.s[...] = 1.0 / std
        self.b[...] = -mean / std
        self.initialized = True

    def forward_ctx(self, x):
        self._check(x)
        n, h, w, _ = x.shape
        y = T.channel_affine(x, self.s, self.b)
        ld = h * w * np.sum(np.log(np.abs(self.s)))
        return y, np.full(n, ld, dtype=x.dtype), x

    def backward(self, x, dy, dlogdet):
        _, h, w, _ = x.shape
        dx, ds, db = T.channel_affine_vjp(x, self.s, dy)
        ds = ds + h * w * dlogdet.sum() / self.s
        return dx, {"s": ds, "b": db}

    def inverse(self, y):
        self._check(y)
        return (y - self.b) / self.s


# -- channel mixing ----------------------------------------------------------


class Permutation(Layer):
    """Fixed channel permutation: ``reverse`` or seeded ``shuffle``."""

    kind = "permutation"

    def __init__(self, channels, variant="reverse", rng=None):
        if variant == "reverse":
            perm = np.arange(channels)[::-1]
        elif variant == "shuffle":
            rng = rng if rng is not None else np.random.default_rng()
            perm = rng.permutation(channels)
        else:
            raise ValueError(f"unknown permutation variant {variant!r}")
        self.variant = variant
        self.perm = perm.astype(np.int64)

    def buffers(self):
        return {"perm": self.perm}

    def describe(self):
        return {"kind": self.kind, "variant": self.variant, "channels": len(self.perm)}

    def forward_ctx(self, x):
        if x.shape[-1] != len(self.perm):
            raise ShapeError(f"permutation has {len(self.perm)} channels, input has {x.shape[-1]}")
        return x[..., self.perm], np.zeros(x.shape[0], dtype=x.dtype), None

    def backward(self, ctx, dy, dlogdet):
        dx = np.empty_like(dy)
        dx[..., self.perm] = dy
        return dx, {}

    def inverse(self, y):
        x = np.empty_like(y)
        x[..., self.perm] = y
        return x


def random_rotation(c, rng, dtype=T.F64):
    """Haar-random orthogonal matrix with determinant +1."""
    q, r = np.linalg.qr(rng.standard_normal((c, c)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q.astype(dtype)


class InvConv(Layer):
    """Invertible 1x1 convolution, ``y_ij = W x_ij``.

    ``mode="dense"`` stores W directly. ``mode="lu"`` stores
    ``W = P @ L @ (U + diag(s))`` with P frozen, L unit lower triangular and
    U strictly upper triangular; only the free triangles are trained.
    """

    kind = "invconv"

    def __init__(self, channels, mode="dense", rng=None, dtype=T.F32, weight=None):
        if mode not in ("dense", "lu"):
            raise ValueError(f"unknown invconv mode {mode!r}")
        self.mode = mode
        self.channels = channels
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng()
            weight = random_rotation(channels, rng)
        weight = np.asarray(weight, dtype=T.F64)
        if mode == "dense":
            self.weight = weight.astype(dtype)
        else:
            p, l, u = scipy.linalg.lu(weight)
            self.p = p.astype(dtype)
            self.lower = np.tril(l, -1).astype(dtype)
            self.upper = np.triu(u, 1).astype(dtype)
            self.s = np.diag(u).astype(dtype).copy()
            self._lmask = np.tril(np.ones((channels, channels), dtype=dtype), -1)
            self._umask = self._lmask.T.copy()

    def params(self):
        if self.mode == "dense":
            return {"weight": self.weight}
        return {"lower": self.lower, "upper": self.upper, "s": self.s}

    def buffers(self):
        return {"p": self.p} if self.mode == "lu" else {}

    def num_free_params(self):
        return self.channels ** 2

    def describe(self):
        return {"kind": self.kind, "mode": self.mode, "channels": self.channels}

    def _factors(self):
        eye = np.eye(self.channels, dtype=self.s.dtype)
        lower = self.lower * self._lmask + eye
        upper = self.upper * self._umask + np.diag(self.s)
        return lower, upper

    def matrix(self):
        if self.mode == "dense":
            return self.weight
        lower, upper = self._factors()
        return self.p @ lower @ upper

    def log_abs_det(self):
        if self.mode == "dense":
            sign, ld = np.linalg.slogdet(self.weight.astype(T.F64))
            if sign == 0 or ld < np.log(DET_GUARD):
                raise SingularError(f"1x1 conv weight is numerically singular (log|det|={ld})")
            return ld
        if np.any(np.abs(self.s) < DET_GUARD):
            raise SingularError("LU scale vector has a zero entry")
        return np.sum(np.log(np.abs(self.s.astype(T.F64))))

    def _check(self, x):
        if x.shape[-1] != self.channels:
            raise ShapeError(f"1x1 conv has {self.channels} channels, input has {x.shape[-1]}")

    def forward_ctx(self, x):
        self._check(x)
        n, h, w, _ = x.shape
        ld = h * w * self.log_abs_det()
        y = T.check_finite(x @ self.matrix().T, "1x1 conv output")
        return y, np.full(n, ld, dtype=x.dtype), x

    def backward(self, x, dy, dlogdet):
        _, h, w, c = x.shape
        wmat = self.matrix()
        dx = dy @ wmat
        dw = dy.reshape(-1, c).T @ x.reshape(-1, c)
        scale = h * w * dlogdet.sum()
        if self.mode == "dense":
            dw = dw + scale * np.linalg.inv(wmat).T
            return dx, {"weight": dw}
        lower, upper = self._factors()
        da = self.p.T @ dw
        dlower = (da @ upper.T) * self._lmask
        dm = lower.T @ da
        dupper = dm * self._umask
        ds = np.diag(dm) + scale / self.s
        return dx, {"lower": dlower, "upper": dupper, "s": ds}

    def inverse(self, y):
        self._check(y)
        self.log_abs_det()
        flat = y.reshape(-1, self.channels).T
        if self.mode == "dense":
            x = np.linalg.solve(self.weight, flat)
        else:
            lower, upper = self._factors()
            t = scipy.linalg.solve_triangular(lower, self.p.T @ flat, lower=True,
                                              unit_diagonal=True)
            x = scipy.linalg.solve_triangular(upper, t, lower=False)
        return T.check_finite(x.T.reshape(y.shape).astype(y.dtype), "1x1 conv inverse")


# -- coupling ----------------------------------------------------------------


class Coupling(Layer):
    """Affine or additive coupling.

    The first half of the channels (x_a) is transformed, conditioned on the
    second half (x_b) through a 3x3 -> ReLU -> 1x1 -> ReLU -> 3x3 network.
    The last convolution starts at zero so the layer starts as the identity.
    Affine network output: first half is log s, second half is t.
    """

    kind = "coupling"

    def __init__(self, channels, hidden=512, mode="affine", rng=None, dtype=T.F32,
                 init_std=0.05):
        if channels % 2:
            raise ShapeError(f"coupling needs an even channel count, got {channels}")
        if mode not in ("affine", "additive"):
            raise ValueError(f"unknown coupling mode {mode!r}")
        rng = rng if rng is not None else np.random.default_rng()
        half = channels // 2
        out = channels if mode == "affine" else half
        self.mode = mode
        self.channels = channels
        self.hidden = hidden
        self.w1 = (init_std * rng.standard_normal((3, 3, half, hidden))).astype(dtype)
        self.b1 = np.zeros(hidden, dtype=dtype)
        self.w2 = (init_std * rng.standard_normal((1, 1, hidden, hidden))).astype(dtype)
        self.b2 = np.zeros(hidden, dtype=dtype)
        self.w3 = np.zeros((3, 3, hidden, out), dtype=dtype)
        self.b3 = np.zeros(out, dtype=dtype)

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}

    def describe(self):
        return {"kind": self.kind, "mode": self.mode, "channels": self.channels,
                "hidden": self.hidden}

    def _net(self, xb):
        c1 = T.im2col(xb, 3)
        a1 = T.conv2d(xb, self.w1, self.b1)
        h1 = T.relu(a1)
        a2 = T.conv2d(h1, self.w2, self.b2)
        h2 = T.relu(a2)
        c3 = T.im2col(h2, 3)
        out = c3 @ self.w3.reshape(-1, self.w3.shape[-1]) + self.b3
        return out, (xb, c1, a1, h1, a2, h2, c3)

    def _net_backward(self, cache, dout):
        xb, c1, a1, h1, a2, h2, c3 = cache
        dh2, dw3, db3 = T.conv2d_vjp(h2, self.w3, dout, cols=c3)
        da2 = T.relu_vjp(a2, dh2)
        dh1, dw2, db2 = T.conv2d_vjp(h1, self.w2, da2)
        da1 = T.relu_vjp(a1, dh1)
        dxb, dw1, db1 = T.conv2d_vjp(xb, self.w1, da1, cols=c1)
        grads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2, "w3": dw3, "b3": db3}
        return dxb, grads

    def _split(self, x):
        if x.shape[-1] != self.channels:
            raise ShapeError(f"coupling has {self.channels} channels, input has {x.shape[-1]}")
        half = self.channels // 2
        return x[..., :half], x[..., half:]

    def _scale_shift(self, out):
        if self.mode == "additive":
            return None, None, out
        half = self.channels // 2
        log_s = out[..., :half]
        s = T.check_finite(np.exp(log_s), "coupling scale")
        return log_s, s, out[..., half:]

    def forward_ctx(self, x):
        xa, xb = self._split(x)
        out, cache = self._net(xb)
        log_s, s, t = self._scale_shift(out)
        if self.mode == "additive":
            ya = xa + t
            ld = np.zeros(x.shape[0], dtype=x.dtype)
        else:
            ya = s * xa + t
            ld = log_s.sum(axis=(1, 2, 3))
        y = T.check_finite(np.concatenate([ya, xb], axis=-1), "coupling output")
        return y, ld, (xa, s, cache)

    def backward(self, ctx, dy, dlogdet):
        xa, s, cache = ctx
        half = self.channels // 2
        dya, dyb = dy[..., :half], dy[..., half:]
        if self.mode == "additive":
            dxa, dout = dya, dya
        else:
            dxa = dya * s
            dlog_s = dya * xa * s + dlogdet[:, None, None, None]
            dout = np.concatenate([dlog_s, dya], axis=-1)
        dxb, grads = self._net_backward(cache, dout)
        return np.concatenate([dxa, dyb + dxb], axis=-1), grads

    def inverse(self, y):
        ya, yb = self._split(y)
        out, _ = self._net(yb)
        _, s, t = self._scale_shift(out)
        xa = ya - t if self.mode == "additive" else (ya - t) / s
        return T.check_finite(np.concatenate([xa, yb], axis=-1), "coupling inverse")


# -- reshaping ---------------------------------------------------------------


def squeeze(x):
    """(n, h, w, c) -> (n, h/2, w/2, 4c).

    Output channel ``(2*di + dj) * c + ch`` holds input pixel
    ``(2i + di, 2j + dj)`` channel ``ch``: row-major within each 2x2 block,
    original channels fastest.
    """
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze needs even height and width, got {h}x{w}")
    x = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h // 2, w // 2, 4 * c)


def unsqueeze(y):
    n, h, w, c4 = y.shape
    if c4 % 4:
        raise ShapeError(f"unsqueeze needs channels divisible by 4, got {c4}")
    c = c4 // 4
    y = y.reshape(n, h, w, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(n, 2 * h, 2 * w, c)


def split(h):
    """Channel halves: the first continues the flow, the second is factored out."""
    c = h.shape[-1]
    if c % 2:
        raise ShapeError(f"split needs an even channel count, got {c}")
    return h[..., :c // 2], h[..., c // 2:]


def unsplit(h_keep, z_out):
    return np.concatenate([h_keep, z_out], axis=-1)


# -- one step of flow --------------------------------------------------------


class FlowStep:
    """actnorm -> channel mixing -> coupling."""

    def __init__(self, channels, coupling="affine", perm="invconv", invconv="dense",
                 hidden=512, rng=None, dtype=T.F32):
        rng = rng if rng is not None else np.random.default_rng()
        self.actnorm = ActNorm(channels, dtype=dtype)
        if perm == "invconv":
            self.mix = InvConv(channels, mode=invconv, rng=rng, dtype=dtype)
        else:
            self.mix = Permutation(channels, variant=perm, rng=rng)
        self.coupling = Coupling(channels, hidden=hidden, mode=coupling, rng=rng, dtype=dtype)

    @property
    def layers(self):
        return [("actnorm", self.actnorm), ("mix", self.mix), ("coupling", self.coupling)]

    def forward_ctx(self, x, hook=None):
        ctxs = []
        total = np.zeros(x.shape[0], dtype=x.dtype)
        for name, layer in self.layers:
            if hook is not None:
                hook(name, layer, x)
            x, ld, ctx = layer.forward_ctx(x)
            total = total + ld
            ctxs.append(ctx)
        return x, total, ctxs

    def forward(self, x):
        y, ld, _ = self.forward_ctx(x)
        return y, ld

    def backward(self, ctxs, dy, dlogdet):
        grads = {}
        for (name, layer), ctx in zip(reversed(self.layers), reversed(ctxs)):
            dy, g = layer.backward(ctx, dy, dlogdet)
            grads.update({f"{name}.{k}": v for k, v in g.items()})
        return dy, grads

    def inverse(self, y):
        for _, layer in reversed(self.layers):
            y = layer.inverse(y)
        return y
