"""Dequantization, negative log-likelihood and bits per dimension."""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericsError, StateError
from .model import standard_normal_logpdf

LOG2 = float(np.log(2.0))
_FROM_MODEL = object()


def reduce_bits(x_int, n_bits, source_bits=8):
    """floor(x / 2^(source_bits - n_bits)) on integer pixels."""
    if n_bits > source_bits:
        raise DataError(f"cannot raise bit depth from {source_bits} to {n_bits}")
    return np.floor_divide(np.asarray(x_int, dtype=np.int64), 2 ** (source_bits - n_bits))


def dequantize(x_int, n_bits, seed=None, rng=None, dtype=np.float32):
    """Scale integer pixels to [0, 1) and add U(0, 2^-n_bits) noise."""
    x_int = np.asarray(x_int)
    if x_int.size and (x_int.min() < 0 or x_int.max() >= 2 ** n_bits):
        raise DataError(
            f"pixel values must lie in [0, {2 ** n_bits}), got range "
            f"[{x_int.min()}, {x_int.max()}]"
        )
    rng = rng if rng is not None else np.random.default_rng(seed)
    a = 2.0 ** -n_bits
    u = rng.uniform(0.0, a, size=x_int.shape)
    return (x_int * a + u).astype(dtype)


def quantize(x, n_bits):
    """Inverse of :func:`dequantize` on its support: floor(x * 2^n_bits)."""
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) * 2 ** n_bits),
                   0, 2 ** n_bits - 1).astype(np.int64)


def discretization_constant(dim, n_bits):
    """c = -M log a with a = 2^-n_bits; zero for continuous data."""
    if n_bits is None:
        return 0.0
    return dim * n_bits * LOG2


@dataclass
class BitsPerDim:
    nats_total: float
    M: int
    a: float | None
    value_bpd: float

    @classmethod
    def from_nll(cls, nll_nats, dim, n_bits):
        """``nll_nats`` is the per-sample -log p of the dequantized data."""
        c = discretization_constant(dim, n_bits)
        total = float(nll_nats) + c
        a = None if n_bits is None else 2.0 ** -n_bits
        return cls(total, dim, a, total / (dim * LOG2))


def _bits(model, n_bits):
    if n_bits is _FROM_MODEL:
        config = getattr(model, "config", None)
        return getattr(config, "n_bits", None)
    return n_bits


def nll_loss(batch, model, n_bits=_FROM_MODEL):
    """Mean over the batch of -log p(x) + c, in nats, and the matching bpd.

    ``batch`` is already dequantized. ``n_bits`` defaults to the model's
    config; None means continuous data (c = 0).
    """
    n_bits = _bits(model, n_bits)
    logp = model.log_prob(batch)
    if not np.all(np.isfinite(logp)):
        raise NumericsError("non-finite log-likelihood")
    dim = int(np.prod(batch.shape[1:]))
    bpd = BitsPerDim.from_nll(-np.mean(logp, dtype=np.float64), dim, n_bits)
    return bpd.nats_total, bpd.value_bpd


def loss_and_grads(model, batch, n_bits=_FROM_MODEL, require_init=True):
    """Training loss (mean nats per sample, c included) and its parameter gradients."""
    n_bits = _bits(model, n_bits)
    if require_init:
        missing = [name for name, layer in model.actnorms() if not layer.initialized]
        if missing:
            raise StateError(f"actnorm not initialized: {missing[0]} (run ddi_pass first)")
    lat, logdet, ctx = model.forward_ctx(batch)
    n = batch.shape[0]
    logp = sum(standard_normal_logpdf(z) for z in lat.z_parts) + logdet
    if not np.all(np.isfinite(logp)):
        raise NumericsError("non-finite log-likelihood")
    dim = model.dim
    nats = float(-np.mean(logp, dtype=np.float64)) + discretization_constant(dim, n_bits)
    dparts = [z / n for z in lat.z_parts]
    dlogdet = np.full(n, -1.0 / n, dtype=model.dtype)
    _, grads = model.backward(ctx, dparts, dlogdet)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
    return nats, grads
