"""Shared test utilities: random-but-tame parameters and finite differences."""

import numpy as np

from glowflow.layers import ActNorm, Coupling, InvConv


def perturb(model, rng, scale=0.05):
    """Make every layer non-trivial: random actnorm, nonzero last coupling conv.

    Hidden biases are randomized too, so no ReLU input sits exactly on its kink
    (a zero bias behind an all-dead unit would), where central differences
    disagree with any one-sided derivative."""
    for _, layer in model.named_layers():
        if isinstance(layer, ActNorm):
            layer.s[...] = rng.uniform(0.5, 1.5, layer.s.shape) * rng.choice([-1, 1], layer.s.shape)
            layer.b[...] = rng.normal(0, 0.3, layer.b.shape)
            layer.initialized = True
        elif isinstance(layer, Coupling):
            for name in ("w3", "b3"):
                p = getattr(layer, name)
                p[...] = scale * rng.standard_normal(p.shape)
            layer.b1[...] = 0.1 * rng.standard_normal(layer.b1.shape)
            layer.b2[...] = 0.1 * rng.standard_normal(layer.b2.shape)
        elif isinstance(layer, InvConv):
            for p in layer.params().values():
                p[...] = p + 0.1 * rng.standard_normal(p.shape)
    return model


def random_coupling(channels, rng, mode="affine", hidden=8, scale=0.3):
    layer = Coupling(channels, hidden=hidden, mode=mode, rng=rng, dtype=np.float64,
                     init_std=0.5)
    layer.w3[...] = scale * rng.standard_normal(layer.w3.shape)
    layer.b3[...] = scale * rng.standard_normal(layer.b3.shape)
    layer.b1[...] = 0.1 * rng.standard_normal(layer.b1.shape)
    layer.b2[...] = 0.1 * rng.standard_normal(layer.b2.shape)
    return layer


def fd_grad(f, x, h=1e-6):
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / scale
