"""Adam, data-dependent initialization and the training loop."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import batches
from .errors import NumericsError, StateError
from .layers import ActNorm
from .model import save_checkpoint
from .objective import dequantize, loss_and_grads, nll_loss

log = logging.getLogger(__name__)


class Adam:
    """Bias-corrected Adam over a dict of named arrays, updated in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, warmup_steps=0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient for parameter {name}")
        self.t += 1
        lr = self.lr
        if self.warmup_steps:
            lr *= min(1.0, self.t / self.warmup_steps)
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)


def ddi_pass(model, init_batch):
    """Initialize every actnorm, in forward order, from the activations that
    reach it when all earlier layers are already initialized."""
    done = [name for name, layer in model.actnorms() if layer.initialized]
    if done:
        raise StateError(f"actnorm {done[0]} is already initialized")

    def hook(name, layer, x):
        if isinstance(layer, ActNorm):
            layer.initialize(x)

    model.encode(init_batch, hook=hook)
    return model


@dataclass
class TrainConfig:
    batch_size: int = 64
    steps: int = 1000
    seed: int = 0
    eval_every: int = 100
    checkpoint_every: int = 0
    warmup_steps: int = 0
    lr: float = 1e-3
    init_batch_size: int = 256
    record_wallclock: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    model: object
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def prepare(batch, n_bits, rng, dtype):
    """Integer pixels -> dequantized floats; continuous data passes through."""
    if n_bits is None:
        return batch.astype(dtype)
    return dequantize(batch, n_bits, rng=rng, dtype=dtype)


def _stream(dataset, batch_size, seed):
    epoch = 0
    while True:
        produced = False
        for b in batches(dataset, batch_size, (seed, 1, epoch)):
            produced = True
            yield b
        if not produced:
            raise ValueError(f"dataset of {len(dataset)} items is smaller than one batch")
        epoch += 1


def train_loop(model, dataset, config, out_dir=None):
    """Seeded training: data order and dequantization noise come from separate
    streams, so either can be reproduced on its own.

    Writes ``metrics.jsonl`` and checkpoints under ``out_dir`` when given.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    n_bits = dataset.n_bits
    noise_rng = np.random.default_rng((config.seed, 2))
    init_rng = np.random.default_rng((config.seed, 3))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
    result = TrainResult(model)
    last_good = None

    if not all(layer.initialized for _, layer in model.actnorms()):
        k = min(config.init_batch_size, len(dataset))
        idx = init_rng.choice(len(dataset), size=k, replace=False)
        ddi_pass(model, prepare(dataset.images[np.sort(idx)], n_bits, init_rng, model.dtype))

    adam = Adam(lr=config.lr, warmup_steps=config.warmup_steps)
    params = model.named_params()
    stream = _stream(dataset, config.batch_size, config.seed)
    t0 = time.perf_counter()
    try:
        for step in range(1, config.steps + 1):
            x = prepare(next(stream), n_bits, noise_rng, model.dtype)
            try:
                nats, grads = loss_and_grads(model, x, n_bits=n_bits)
                adam.step(params, grads)
            except NumericsError as exc:
                raise NumericsError(f"step {step}: {exc}", last_checkpoint=last_good) from exc
            if step == 1 or step % config.eval_every == 0 or step == config.steps:
                wall = round((time.perf_counter() - t0) * 1000.0, 3) if config.record_wallclock else None
                row = {"step": step, "nats": nats, "bpd": nats / (model.dim * np.log(2.0)),
                       "wallclock_ms": wall}
                result.metrics.append(row)
                if out is not None:
                    metrics_fh.write(json.dumps(row) + "\n")
                    metrics_fh.flush()
                log.info("step %d  nats %.4f  bpd %.4f", step, nats, row["bpd"])
            if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                last_good = save_checkpoint(model, out / f"ckpt-{step:06d}",
                                            extra={"step": step, "train": config.to_dict()})
                result.checkpoints.append(last_good)
        if out is not None:
            final = save_checkpoint(model, out / "final",
                                    extra={"step": config.steps, "train": config.to_dict()})
            result.checkpoints.append(final)
    finally:
        if out is not None:
            metrics_fh.close()
    return result


def evaluate(model, dataset, batch_size=256, seed=0):
    """Mean (nats, bpd) over a dataset with seeded dequantization noise."""
    rng = np.random.default_rng((seed, 4))
    total, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        x = prepare(dataset.images[start:start + batch_size], dataset.n_bits, rng, model.dtype)
        nats, _ = nll_loss(x, model, n_bits=dataset.n_bits)
        total += nats * len(x)
        count += len(x)
    nats = total / count
    return nats, nats / (model.dim * np.log(2.0))
