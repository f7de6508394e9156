"""Latent-space interpolation and attribute-direction manipulation."""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .model import LatentRecord


@dataclass
class AttributeDirection:
    direction: LatentRecord
    name: str = "attribute"
    n_pos: int = 0
    n_neg: int = 0


def _single(x, model):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != model.config.input_shape or x.shape[0] != 1:
        raise ShapeError(f"expected one image of shape {model.config.input_shape}, got {x.shape}")
    return x


def interpolate(x1, x2, steps, model):
    """Decode (1 - t) z1 + t z2 for ``steps`` evenly spaced t in [0, 1]."""
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    z1, _ = model.encode(_single(x1, model))
    z2, _ = model.encode(_single(x2, model))
    ts = np.linspace(0.0, 1.0, steps)
    parts = [np.concatenate([(1 - t) * a + t * b for t in ts]) for a, b in zip(z1.z_parts, z2.z_parts)]
    return model.decode(LatentRecord(parts))


def encode_mean(images, model, batch_size=256):
    """Mean latent of a set of (already dequantized) images."""
    sums, count = None, 0
    for start in range(0, len(images), batch_size):
        lat, _ = model.encode(images[start:start + batch_size])
        part_sums = [z.astype(np.float64).sum(axis=0) for z in lat.z_parts]
        sums = part_sums if sums is None else [a + b for a, b in zip(sums, part_sums)]
        count += len(lat.z_parts[0])
    return LatentRecord([(s / count)[None] for s in sums])


def attribute_direction(images, labels, model, name="attribute"):
    """z_pos - z_neg: mean latent of label-1 images minus that of label-0 images."""
    labels = np.asarray(labels)
    if len(labels) != len(images):
        raise DataError(f"{len(labels)} labels for {len(images)} images")
    pos, neg = labels == 1, labels == 0
    if not pos.any() or not neg.any():
        raise DataError("attribute direction needs images both with and without the attribute")
    z_pos = encode_mean(images[pos], model)
    z_neg = encode_mean(images[neg], model)
    return AttributeDirection(z_pos - z_neg, name, int(pos.sum()), int(neg.sum()))


def manipulate(x, direction, alphas, model):
    """Decode encode(x) + alpha * direction for each alpha."""
    z, _ = model.encode(_single(x, model))
    d = direction.direction if isinstance(direction, AttributeDirection) else direction
    parts = [np.concatenate([zp + a * dp.astype(zp.dtype) for a in alphas])
             for zp, dp in zip(z.z_parts, d.z_parts)]
    return model.decode(LatentRecord(parts))
