"""Brute-force numerical ground truth for log-determinants and gradients.

Nothing here calls the analytic log-determinant or backward code it is used
to check: Jacobians come from central differences of forward passes, and
determinants from a separate pivoted LU written out below.
"""

import copy
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import CostGuardError, GlowError, SingularError
from .layers import ActNorm

MAX_DIM = 64
SINGULAR_TOL = 1e-12


@dataclass
class JacobianEstimate:
    matrix: np.ndarray
    h: float
    method: str = "central"


def numeric_jacobian(f, x0, h=1e-5):
    """Central-difference Jacobian of a flat map R^D -> R^D at ``x0`` (f64)."""
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    d = x0.size
    if d > MAX_DIM:
        raise CostGuardError(f"Jacobian of dimension {d} exceeds the {MAX_DIM}-dim guard")
    cols = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        plus = np.asarray(f(x0 + e), dtype=np.float64).ravel()
        minus = np.asarray(f(x0 - e), dtype=np.float64).ravel()
        cols.append((plus - minus) / (2 * h))
    jac = np.stack(cols, axis=1)
    if not np.all(np.isfinite(jac)):
        raise SingularError("non-finite entries in numeric Jacobian")
    return JacobianEstimate(jac, h)


def logabsdet(matrix):
    """log|det A| by Gaussian elimination with partial pivoting."""
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"logabsdet needs a square matrix, got {a.shape}")
    n = a.shape[0]
    total = 0.0
    for k in range(n):
        piv = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[piv, k]) < SINGULAR_TOL:
            raise SingularError(f"matrix is singular (pivot {k} below {SINGULAR_TOL})")
        if piv != k:
            a[[k, piv]] = a[[piv, k]]
        total += np.log(abs(a[k, k]))
        a[k + 1:, k:] -= np.outer(a[k + 1:, k] / a[k, k], a[k, k:])
    return total


def cofactor_det(matrix):
    """Determinant by Laplace expansion along the first row; tiny matrices only."""
    a = np.asarray(matrix, dtype=np.float64)
    n = a.shape[0]
    if n == 1:
        return a[0, 0]
    return sum((-1) ** j * a[0, j] * cofactor_det(np.delete(a[1:], j, axis=1))
               for j in range(n))


# -- gradient checking -------------------------------------------------------


@dataclass
class GradcheckReport:
    rel_tol: float
    h: float
    errors: dict = field(default_factory=dict)

    @property
    def worst(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return bool(self.worst < self.rel_tol)

    def to_dict(self):
        return {"rel_tol": self.rel_tol, "h": self.h, "worst": self.worst,
                "passed": self.passed, "per_parameter": self.errors}


def relative_error(a, b, floor=0.0):
    """Norm-wise relative error; gradients whose norms are both below ``floor``
    count as agreeing (both are zero up to difference noise)."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale <= floor else float(np.linalg.norm(a - b) / scale)


def gradcheck(loss, params, analytic, rel_tol=1e-3, h=1e-4, max_entries=None, seed=0,
              floor=1e-7):
    """Compare ``analytic`` gradients with central differences of ``loss(params)``.

    ``params`` is perturbed in place and restored. The relative error per
    parameter is ``|g_a - g_fd| / max(|g_a|, |g_fd|)`` over the checked entries;
    ``max_entries`` caps how many entries per tensor are sampled; ``floor``
    is the gradient norm below which a tensor counts as identically zero.
    """
    rng = np.random.default_rng(seed)
    report = GradcheckReport(rel_tol, h)
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss(params)
            flat[i] = orig - h
            down = loss(params)
            flat[i] = orig
            fd[j] = (up - down) / (2 * h)
        report.errors[name] = relative_error(np.asarray(analytic[name]).reshape(-1)[idx], fd,
                                            floor)
    return report


# -- layer and model checks ----------------------------------------------------


def layer_logdet_error(layer, x, h=1e-5):
    """Relative gap between a layer's analytic logdet and log|det J| of the
    finite-difference Jacobian at the single sample ``x`` (shape (1, h, w, c))."""
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape

    def f(flat):
        y, _ = layer.forward(flat.reshape(shape))
        return y

    _, analytic = layer.forward(x)
    brute = logabsdet(numeric_jacobian(f, x, h).matrix)
    analytic = float(analytic[0])
    denom = max(abs(brute), abs(analytic), 1.0)
    return abs(brute - analytic) / denom, analytic, brute


def actnorm_output_stats(model, batch):
    """Per-actnorm (mean, std) of each channel of the actnorm's output."""
    stats = {}

    def hook(name, layer, x):
        if isinstance(layer, ActNorm):
            y = x.astype(np.float64) * layer.s + layer.b
            flat = y.reshape(-1, y.shape[-1])
            stats[name] = (flat.mean(axis=0), flat.std(axis=0))

    model.encode(batch, hook=hook)
    return stats


def _probe_side(level_hw, c):
    for side in (4, 2, 1):
        if side <= level_hw and side * side * c <= MAX_DIM:
            return side
    return None


def run_verification(model, precision="f32", seed=0, batch=None, gradcheck_entries=4):
    """Oracle suite behind ``glowflow verify``.

    Returns a JSON-ready dict with one entry per check and an overall flag.
    """
    from .objective import loss_and_grads
    from .train import ddi_pass

    rng = np.random.default_rng(seed)
    shape = model.config.input_shape
    if batch is None:
        batch = rng.uniform(0.0, 1.0, size=(8,) + shape)
    f64 = precision == "f64"
    work = model.astype(np.float64) if f64 else model
    checks = []

    def record(name, fn):
        try:
            checks.append({"name": name, **fn()})
        except GlowError as exc:
            checks.append({"name": name, "passed": False,
                           "error": type(exc).__name__, "detail": str(exc)})

    def round_trip():
        tol = 1e-8 if f64 else 1e-4
        x = batch.astype(work.dtype)
        lat, _ = work.encode(x)
        err = float(np.max(np.abs(work.decode(lat) - x)))
        return {"passed": bool(err < tol), "value": err, "tol": tol}

    def logdet_oracle():
        tol = 1e-3
        ref = model.astype(np.float64)
        worst, checked, skipped = 0.0, 0, 0
        shapes = ref.config.level_shapes()
        for li, steps in enumerate(ref.levels):
            hw, _, c = shapes[li]
            side = _probe_side(hw, c)
            if side is None:
                skipped += 3 * len(steps)
                continue
            for step in steps:
                x = rng.standard_normal((1, side, side, c))
                for _, layer in step.layers:
                    err, _, _ = layer_logdet_error(layer, x)
                    worst = max(worst, err)
                    checked += 1
                    x, _ = layer.forward(x)
        return {"passed": bool(worst < tol), "value": worst, "tol": tol,
                "layers_checked": checked, "layers_skipped": skipped}

    def grad_check():
        tol = 1e-3
        ref = model.astype(np.float64)
        for _, layer in ref.actnorms():
            layer.initialized = True
        x = batch[:2].astype(np.float64)
        n_bits = ref.config.n_bits
        _, analytic = loss_and_grads(ref, x, n_bits=n_bits, require_init=False)
        params = ref.named_params()

        def loss(_):
            return -float(np.mean(ref.log_prob(x)))

        rep = gradcheck(loss, params, analytic, rel_tol=tol, h=1e-6,
                        max_entries=gradcheck_entries, seed=seed)
        return {"passed": bool(rep.passed), "value": rep.worst, "tol": tol}

    def actnorm_init():
        tol_mean, tol_std = 1e-5, 1e-4
        fresh = copy.deepcopy(work)
        for _, layer in fresh.actnorms():
            layer.s[...] = 1
            layer.b[...] = 0
            layer.initialized = False
        x = batch.astype(fresh.dtype)
        ddi_pass(fresh, x)
        stats = actnorm_output_stats(fresh, x)
        worst_mean = max(float(np.max(np.abs(m))) for m, _ in stats.values())
        worst_std = max(float(np.max(np.abs(s - 1))) for _, s in stats.values())
        return {"passed": bool(worst_mean < tol_mean and worst_std < tol_std),
                "value": {"mean": worst_mean, "std": worst_std},
                "tol": {"mean": tol_mean, "std": tol_std}}

    record("round_trip", round_trip)
    record("logdet_oracle", logdet_oracle)
    record("gradcheck", grad_check)
    record("actnorm_init", actnorm_init)
    return {"precision": precision, "seed": seed,
            "passed": all(c["passed"] for c in checks), "checks": checks}


def all_configs(Ks=(1, 2, 4), Ls=(1, 2, 3)):
    """The bijectivity test matrix."""
    return list(itertools.product(Ks, Ls, ("additive", "affine"),
                                  ("reverse", "shuffle", "invconv"), ("dense", "lu")))
