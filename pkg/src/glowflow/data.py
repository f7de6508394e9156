"""Datasets: PNG directories, GTB archives and procedural toy sets."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataError
from .objective import reduce_bits

TOY_KINDS = ("two_moons", "gauss_mixture", "checker8x8")


@dataclass
class Dataset:
    """Images of shape (N, h, w, c).

    Quantized sets hold integers in [0, 2^n_bits); continuous sets (the 2-D
    toys) hold floats and have ``n_bits=None``.
    """

    images: np.ndarray
    n_bits: int | None = 8
    source: str = ""
    split: str = "train"
    names: list | None = None
    labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) == 0:
            raise DataError(f"{self.source}: dataset must be a nonempty (N, h, w, c) array")
        if self.n_bits is not None:
            lo, hi = self.images.min(), self.images.max()
            if lo < 0 or hi >= 2 ** self.n_bits:
                raise DataError(
                    f"{self.source}: pixel range [{lo}, {hi}] outside [0, {2 ** self.n_bits})"
                )

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]

    @property
    def continuous(self):
        return self.n_bits is None

    def subset(self, idx):
        return Dataset(self.images[idx], self.n_bits, self.source, self.split,
                       None if self.names is None else [self.names[i] for i in idx],
                       None if self.labels is None else self.labels[idx])


# -- procedural sets -------------------------------------------------------


def gauss_mixture_params():
    """Means and shared isotropic std of the 2-D mixture: 101 equal-weight
    components spaced along the parabola x0 = x1^2, x1 in [-2, 2]. The
    spacing (0.04) is below the std (0.05), so the modes merge into a curve."""
    t = np.linspace(-2.0, 2.0, 101)
    return np.stack([t ** 2, t], axis=1), 0.05


def gauss_mixture_logpdf(points):
    """Exact log-density of the toy mixture at (m, 2) points."""
    means, std = gauss_mixture_params()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    d2 = ((points[:, None, :] - means[None]) ** 2).sum(-1)
    comp = -0.5 * d2 / std ** 2 - np.log(2 * np.pi * std ** 2)
    top = comp.max(axis=1)
    return top + np.log(np.exp(comp - top[:, None]).mean(axis=1))


def _two_moons(n, rng):
    n_up = n // 2
    t_up = rng.uniform(0, np.pi, n_up)
    t_lo = rng.uniform(0, np.pi, n - n_up)
    up = np.stack([np.cos(t_up), np.sin(t_up)], axis=1)
    lo = np.stack([1 - np.cos(t_lo), 0.5 - np.sin(t_lo)], axis=1)
    pts = np.concatenate([up, lo])[rng.permutation(n)]
    pts += 0.05 * rng.standard_normal(pts.shape)
    return 2.0 * (pts - [0.5, 0.25])


def _gauss_mixture(n, rng):
    means, std = gauss_mixture_params()
    comp = rng.integers(0, len(means), n)
    return means[comp] + std * rng.standard_normal((n, 2))


def _checker(n, rng, size=8, n_bits=3):
    """Checkerboards with random cell size, phase and two grey levels, plus
    sparse +-1 pixel noise."""
    top = 2 ** n_bits
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    cell = rng.choice([1, 2, 4], size=n)
    oy = rng.integers(0, 4, n)
    ox = rng.integers(0, 4, n)
    lo = rng.integers(0, top // 2, n)
    hi = rng.integers(top // 2, top, n)
    on = (((ii[None] + oy[:, None, None]) // cell[:, None, None])
          + ((jj[None] + ox[:, None, None]) // cell[:, None, None])) % 2
    img = np.where(on == 1, hi[:, None, None], lo[:, None, None])
    flip = rng.uniform(size=img.shape) < 0.1
    img = img + flip * rng.choice([-1, 1], size=img.shape)
    return np.clip(img, 0, top - 1)[..., None].astype(np.int64)


def toy_generate(kind, n, seed=0):
    """2-D kinds come out as continuous (n, 1, 1, 2) images; checker8x8 as
    8x8x1 3-bit integer images."""
    if n < 1:
        raise DataError(f"toy dataset size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    source = f"toy:{kind}:n={n}:seed={seed}"
    if kind == "two_moons":
        return Dataset(_two_moons(n, rng).reshape(n, 1, 1, 2), None, source)
    if kind == "gauss_mixture":
        return Dataset(_gauss_mixture(n, rng).reshape(n, 1, 1, 2), None, source)
    if kind == "checker8x8":
        return Dataset(_checker(n, rng), 3, source)
    raise DataError(f"unknown toy dataset {kind!r}; choose from {', '.join(TOY_KINDS)}")


def parse_toy_spec(spec):
    """``toy:gauss_mixture:n=4096:seed=7`` -> (kind, n, seed)."""
    parts = spec.split(":")
    if len(parts) < 2 or parts[0] != "toy":
        raise DataError(f"bad toy spec {spec!r}; expected toy:<kind>[:n=N][:seed=S]")
    opts = {"n": 4096, "seed": 0}
    for item in parts[2:]:
        key, _, val = item.partition("=")
        if key not in opts or not val:
            raise DataError(f"bad option {item!r} in toy spec {spec!r}")
        try:
            opts[key] = int(val)
        except ValueError:
            raise DataError(f"option {key} must be an integer in {spec!r}") from None
    return parts[1], opts["n"], opts["seed"]


# -- files -------------------------------------------------------------------


def _load_png_dir(path, n_bits):
    from PIL import Image

    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DataError(f"{path}: no PNG files found")
    images = []
    for f in files:
        try:
            with Image.open(f) as im:
                if im.mode not in ("L", "RGB"):
                    raise DataError(f"{f}: unsupported PNG mode {im.mode}; need 8-bit L or RGB")
                arr = np.asarray(im, dtype=np.int64)
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"{f}: cannot decode PNG ({exc})") from exc
        if arr.ndim == 2:
            arr = arr[..., None]
        if images and arr.shape != images[0].shape:
            raise DataError(f"{f}: shape {arr.shape} differs from {images[0].shape} ({files[0].name})")
        images.append(arr)
    images = np.stack(images)
    if n_bits is not None and n_bits < 8:
        images = reduce_bits(images, n_bits)
    return Dataset(images, 8 if n_bits is None else n_bits, str(path),
                   names=[f.name for f in files])


def _load_gtb(path, n_bits):
    arr = T.read_gtb(path)
    if arr.ndim != 4:
        raise DataError(f"{path}: GTB archive must be rank 4 (N, h, w, c), got {arr.shape}")
    n_bits = 8 if n_bits is None else n_bits
    if not np.all(arr == np.floor(arr)):
        raise DataError(f"{path}: archive holds non-integer pixel values")
    return Dataset(arr.astype(np.int64), n_bits, str(path),
                   names=[str(i) for i in range(len(arr))])


def read_labels(path, dataset):
    """Attach a ``filename,label`` CSV (label in {0, 1}) to ``dataset``."""
    by_name = {}
    try:
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().lower() == "filename":
                    continue
                if len(row) != 2 or row[1].strip() not in ("0", "1"):
                    raise DataError(f"{path}: bad label row {row!r}")
                by_name[row[0].strip()] = int(row[1])
    except OSError as exc:
        raise DataError(f"{path}: cannot read labels ({exc})") from exc
    names = dataset.names or [str(i) for i in range(len(dataset))]
    missing = [n for n in names if n not in by_name]
    if missing:
        raise DataError(f"{path}: no label for {missing[0]} ({len(missing)} missing)")
    dataset.labels = np.array([by_name[n] for n in names], dtype=np.int64)
    return dataset


def load(source, n_bits=None, labels=None):
    """Load a PNG directory, a GTB archive or a ``toy:...`` spec string."""
    source = str(source)
    if source.startswith("toy:"):
        ds = toy_generate(*parse_toy_spec(source))
    else:
        path = Path(source)
        if path.is_dir():
            ds = _load_png_dir(path, n_bits)
        elif path.is_file():
            ds = _load_gtb(path, n_bits)
        else:
            raise DataError(f"{source}: no such file or directory")
    if labels is not None:
        read_labels(labels, ds)
    return ds


def batches(dataset, size, epoch_seed):
    """One epoch in a seeded random order; the last partial batch is dropped."""
    if size < 1:
        raise ValueError(f"batch size must be >= 1, got {size}")
    order = np.random.default_rng(epoch_seed).permutation(len(dataset))
    for start in range(0, len(order) - size + 1, size):
        yield dataset.images[order[start:start + size]]
