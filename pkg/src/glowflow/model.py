"""The multi-scale flow: L levels of squeeze -> K steps -> split."""

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataError, NumericsError, ShapeError
from .layers import ActNorm, FlowStep, squeeze, unsqueeze, split, unsplit

CKPT_MAGIC = "GLOWCKPT/1"
LOG_2PI = float(np.log(2 * np.pi))


@dataclass
class GlowConfig:
    K: int = 32
    L: int = 3
    coupling_mode: str = "affine"
    perm_variant: str = "invconv"
    invconv_param: str = "dense"
    hidden_channels: int = 512
    input_shape: tuple = (32, 32, 3)
    n_bits: int | None = 8

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.validate()

    @property
    def squeezes(self):
        """False only for the 1x1 toy shape, which skips squeezing entirely."""
        h, w, _ = self.input_shape
        return not (h == 1 and w == 1)

    def validate(self):
        errors = []
        if self.K < 1:
            errors.append(f"K must be >= 1, got {self.K}")
        if self.L < 1:
            errors.append(f"L must be >= 1, got {self.L}")
        if self.coupling_mode not in ("additive", "affine"):
            errors.append(f"coupling_mode must be additive|affine, got {self.coupling_mode!r}")
        if self.perm_variant not in ("reverse", "shuffle", "invconv"):
            errors.append(f"perm_variant must be reverse|shuffle|invconv, got {self.perm_variant!r}")
        if self.invconv_param not in ("dense", "lu"):
            errors.append(f"invconv_param must be dense|lu, got {self.invconv_param!r}")
        if self.hidden_channels < 1:
            errors.append(f"hidden_channels must be >= 1, got {self.hidden_channels}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            errors.append(f"input_shape must be (h, w, c) with positive dims, got {self.input_shape}")
        if errors:
            raise ShapeError("; ".join(errors))
        h, w, c = self.input_shape
        if not self.squeezes:
            if self.L != 1:
                raise ShapeError(f"a 1x1 input has no spatial dims to squeeze, so L must be 1 (got L={self.L})")
            if c % 2:
                raise ShapeError(f"a 1x1 input needs an even channel count, got {c}")
        elif h % 2 ** self.L or w % 2 ** self.L:
            raise ShapeError(
                f"height and width must be divisible by 2^L = {2 ** self.L} "
                f"for L={self.L} levels, got {h}x{w}"
            )

    def level_shapes(self):
        """(h, w, c) entering the K steps at each level."""
        h, w, c = self.input_shape
        shapes = []
        for level in range(self.L):
            if self.squeezes:
                h, w, c = h // 2, w // 2, 4 * c
            shapes.append((h, w, c))
            if level < self.L - 1:
                c //= 2
        return shapes

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LatentRecord:
    """Latents of a batch: one tensor per split, then the final level output."""

    z_parts: list = field(default_factory=list)

    @property
    def shapes(self):
        return [z.shape for z in self.z_parts]

    def flatten(self):
        n = self.z_parts[0].shape[0]
        return np.concatenate([z.reshape(n, -1) for z in self.z_parts], axis=1)

    @classmethod
    def from_flat(cls, flat, part_shapes):
        """``part_shapes`` are per-sample (h, w, c) shapes."""
        n = flat.shape[0]
        need = sum(int(np.prod(shp)) for shp in part_shapes)
        if need != flat.shape[1]:
            raise ShapeError(f"flat latent has {flat.shape[1]} dims, shapes need {need}")
        parts, start = [], 0
        for shp in part_shapes:
            size = int(np.prod(shp))
            parts.append(flat[:, start:start + size].reshape((n,) + tuple(shp)))
            start += size
        return cls(parts)

    def __add__(self, other):
        return LatentRecord([a + b for a, b in zip(self.z_parts, other.z_parts)])

    def __sub__(self, other):
        return LatentRecord([a - b for a, b in zip(self.z_parts, other.z_parts)])

    def scale(self, alpha):
        return LatentRecord([alpha * z for z in self.z_parts])

    def take(self, idx):
        return LatentRecord([z[idx] for z in self.z_parts])


def standard_normal_logpdf(z):
    """Sum over all non-batch dims of log N(z; 0, I), exact constant included."""
    flat = z.reshape(z.shape[0], -1)
    return -0.5 * np.sum(flat * flat, axis=1) - 0.5 * flat.shape[1] * LOG_2PI


class Glow:
    def __init__(self, config, seed=0, dtype=T.F32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.levels = []
        for h, w, c in config.level_shapes():
            self.levels.append([
                FlowStep(c, coupling=config.coupling_mode, perm=config.perm_variant,
                         invconv=config.invconv_param, hidden=config.hidden_channels,
                         rng=rng, dtype=dtype)
                for _ in range(config.K)
            ])

    # -- bookkeeping -------------------------------------------------------

    def named_layers(self):
        for li, steps in enumerate(self.levels):
            for ki, step in enumerate(steps):
                for name, layer in step.layers:
                    yield f"level{li}.step{ki}.{name}", layer

    def named_params(self):
        return {f"{prefix}.{k}": v for prefix, layer in self.named_layers()
                for k, v in layer.params().items()}

    def named_buffers(self):
        return {f"{prefix}.{k}": v for prefix, layer in self.named_layers()
                for k, v in layer.buffers().items()}

    def actnorms(self):
        return [(name, layer) for name, layer in self.named_layers()
                if isinstance(layer, ActNorm)]

    def num_params(self):
        return sum(layer.num_free_params() for _, layer in self.named_layers())

    def latent_shapes(self):
        shapes = []
        level_shapes = self.config.level_shapes()
        for li, (h, w, c) in enumerate(level_shapes):
            if li < self.config.L - 1:
                shapes.append((h, w, c // 2))
            else:
                shapes.append((h, w, c))
        return shapes

    @property
    def dim(self):
        return int(np.prod(self.config.input_shape))

    def astype(self, dtype):
        """Deep copy with every floating-point array cast to ``dtype``."""
        other = copy.deepcopy(self)
        other.dtype = np.dtype(dtype)
        for _, layer in other.named_layers():
            for attr, val in vars(layer).items():
                if isinstance(val, np.ndarray) and val.dtype.kind == "f":
                    setattr(layer, attr, val.astype(dtype))
        return other

    def _check_input(self, x):
        x = T.as_tensor4(x)
        if x.shape[1:] != self.config.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} != model input {self.config.input_shape}")
        return x.astype(self.dtype, copy=False)

    # -- forward / inverse -------------------------------------------------

    def forward_ctx(self, x, hook=None):
        """Returns ``(latents, logdet, ctx)``; ``ctx`` feeds :meth:`backward`."""
        h = self._check_input(x)
        n = h.shape[0]
        logdet = np.zeros(n, dtype=self.dtype)
        parts, ctx = [], []
        for li, steps in enumerate(self.levels):
            if self.config.squeezes:
                h = squeeze(h)
            level_ctx = []
            for ki, step in enumerate(steps):
                step_hook = None
                if hook is not None:
                    def step_hook(name, layer, value, _p=f"level{li}.step{ki}"):
                        hook(f"{_p}.{name}", layer, value)
                h, ld, sctx = step.forward_ctx(h, hook=step_hook)
                logdet = logdet + ld
                level_ctx.append(sctx)
            ctx.append(level_ctx)
            if li < self.config.L - 1:
                h, z = split(h)
                parts.append(z)
        parts.append(h)
        if not np.all(np.isfinite(logdet)):
            raise NumericsError("non-finite log-determinant during encode")
        return LatentRecord(parts), logdet, ctx

    def encode(self, x, hook=None):
        lat, logdet, _ = self.forward_ctx(x, hook=hook)
        return lat, logdet

    def decode(self, lat):
        parts = list(lat.z_parts)
        expect = self.latent_shapes()
        if len(parts) != len(expect) or any(p.shape[1:] != s for p, s in zip(parts, expect)):
            raise ShapeError(f"latent shapes {[p.shape[1:] for p in parts]} != expected {expect}")
        h = parts[-1].astype(self.dtype, copy=False)
        for li in reversed(range(self.config.L)):
            if li < self.config.L - 1:
                h = unsplit(h, parts[li].astype(self.dtype, copy=False))
            for step in reversed(self.levels[li]):
                h = step.inverse(h)
            if self.config.squeezes:
                h = unsqueeze(h)
        return T.check_finite(h, "decoded image")

    def backward(self, ctx, dparts, dlogdet):
        """Reverse pass. ``dparts`` are loss gradients w.r.t. each latent part,
        ``dlogdet`` w.r.t. the per-sample total log-determinant.
        Returns ``(dx, grads)`` with grads keyed like :meth:`named_params`."""
        grads = {}
        dh = dparts[-1]
        for li in reversed(range(self.config.L)):
            if li < self.config.L - 1:
                dh = unsplit(dh, dparts[li])
            for ki in reversed(range(self.config.K)):
                dh, g = self.levels[li][ki].backward(ctx[li][ki], dh, dlogdet)
                grads.update({f"level{li}.step{ki}.{k}": v for k, v in g.items()})
            if self.config.squeezes:
                dh = unsqueeze(dh)
        return dh, grads

    # -- densities ---------------------------------------------------------

    def log_prob(self, x):
        """log p(x) in nats per sample."""
        lat, logdet = self.encode(x)
        return sum(standard_normal_logpdf(z) for z in lat.z_parts) + logdet

    def sample_latents(self, n, temperature=1.0, seed=0):
        if temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {temperature}")
        rng = np.random.default_rng(seed)
        parts = [(temperature * rng.standard_normal((n,) + s)).astype(self.dtype)
                 for s in self.latent_shapes()]
        return LatentRecord(parts)

    def sample(self, n, temperature=1.0, seed=0):
        """Draw every latent part from N(0, T^2 I) and decode."""
        return self.decode(self.sample_latents(n, temperature, seed))


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(model, path, extra=None):
    """Directory checkpoint: ``manifest.json`` plus one GTB blob per tensor."""
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = {}
    for kind, named in (("param", model.named_params()), ("buffer", model.named_buffers())):
        for name, arr in named.items():
            fname = f"tensors/{name}.gtb"
            T.write_gtb(path / fname, arr.astype(T.F64) if arr.dtype.kind != "f" else arr)
            tensors[name] = {"kind": kind, "file": fname, "dtype": str(arr.dtype),
                             "shape": list(arr.shape)}
    manifest = {
        "magic": CKPT_MAGIC,
        "config": model.config.to_dict(),
        "dtype": str(model.dtype),
        "seed": model.seed,
        "layers": [dict(name=name, **layer.describe()) for name, layer in model.named_layers()],
        "tensors": tensors,
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path):
    """Returns ``(model, manifest)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: unreadable checkpoint manifest ({exc})") from exc
    if manifest.get("magic") != CKPT_MAGIC:
        raise DataError(f"{path}: not a {CKPT_MAGIC} checkpoint")
    config = GlowConfig.from_dict(manifest["config"])
    model = Glow(config, seed=manifest["seed"], dtype=np.dtype(manifest["dtype"]))
    live = {**model.named_params(), **model.named_buffers()}
    for name, info in manifest["tensors"].items():
        if name not in live:
            raise DataError(f"{path}: checkpoint tensor {name} does not match the config")
        arr = T.read_gtb(path / info["file"])
        if arr.shape != live[name].shape:
            raise DataError(f"{path}: tensor {name} has shape {arr.shape}, expected {live[name].shape}")
        live[name][...] = arr
    inits = {d["name"]: d.get("initialized") for d in manifest["layers"] if d["kind"] == "actnorm"}
    for name, layer in model.actnorms():
        layer.initialized = bool(inits.get(name, False))
    return model, manifest
