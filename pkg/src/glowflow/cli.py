"""``glowflow`` command line: train, eval, sample, encode, decode, interp,
manipulate, verify, report.

Exit codes: 0 success, 2 argument error, 3 data error, 4 numerics error,
5 verification failure.
"""

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import load
from .errors import ArgError, GlowError, ShapeError
from .latentops import attribute_direction, interpolate, manipulate
from .model import Glow, GlowConfig, LatentRecord, load_checkpoint
from .oracle import run_verification
from .report import (image_grid, plot_ablation, plot_points_2d, plot_training_curve,
                     read_metrics, save_png)
from .train import TrainConfig, evaluate, train_loop

log = logging.getLogger("glowflow")

PERMS = ("reverse", "shuffle", "invconv")
COUPLINGS = ("additive", "affine")
DESK_MODEL = {"K": 8, "L": 2, "hidden_channels": 64, "coupling_mode": "affine",
              "perm_variant": "invconv", "invconv_param": "dense"}


# -- config ------------------------------------------------------------------


def read_config(path):
    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ArgError(f"{path}: cannot read config ({exc})") from exc
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ArgError(f"{path}: invalid TOML ({exc})") from exc
    try:
        return json.loads(text)
    except ValueError as exc:
        raise ArgError(f"{path}: invalid JSON ({exc})") from exc


def _check_keys(section, cls, name, errors):
    known = {f.name for f in fields(cls)}
    errors.extend(f"unknown {name} option {k!r}" for k in section if k not in known)


def resolve_configs(raw, args, data_shape=None, n_bits=None):
    """Merge config file sections with CLI overrides; every problem is reported."""
    errors = []
    model = {**DESK_MODEL, **raw.get("model", {})}
    train = dict(raw.get("train", {}))
    extra = set(raw) - {"model", "train", "data", "valid"}
    errors.extend(f"unknown config section {k!r}" for k in sorted(extra))
    _check_keys(model, GlowConfig, "model", errors)
    _check_keys(train, TrainConfig, "train", errors)
    for key, attr in (("perm_variant", "perm"), ("coupling_mode", "coupling"),
                      ("invconv_param", "invconv"), ("K", "K"), ("L", "L"),
                      ("hidden_channels", "hidden")):
        val = getattr(args, attr, None)
        if val is not None:
            model[key] = val
    for key in ("steps", "seed", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            train[key] = val
    if data_shape is not None:
        if "input_shape" in model and tuple(model["input_shape"]) != tuple(data_shape):
            errors.append(f"model input_shape {tuple(model['input_shape'])} != data shape {tuple(data_shape)}")
        model.setdefault("input_shape", tuple(data_shape))
        model.setdefault("n_bits", n_bits)
    if errors:
        raise ArgError("invalid configuration:\n  " + "\n  ".join(errors))
    try:
        glow_cfg = GlowConfig(**model)
    except ShapeError as exc:
        raise ShapeError(f"invalid model configuration: {exc}") from exc
    try:
        train_cfg = TrainConfig(**train)
    except (TypeError, ValueError) as exc:
        raise ArgError(f"invalid train configuration: {exc}") from exc
    return glow_cfg, train_cfg


def _threads():
    try:
        return max(1, int(os.environ.get("FLOW_THREADS", os.cpu_count() or 1)))
    except ValueError:
        raise ArgError("FLOW_THREADS must be an integer") from None


# -- train -------------------------------------------------------------------


def run_training(model_cfg, train_cfg, data_source, out_dir, valid_source=None):
    """One seeded run: metrics.jsonl, checkpoints, curve.png; returns a summary."""
    dataset = load(data_source)
    out_dir = Path(out_dir)
    model = Glow(model_cfg, seed=train_cfg.seed)
    result = train_loop(model, dataset, train_cfg, out_dir)
    plot_training_curve(result.metrics, out_dir / "curve.png",
                        title=f"{model_cfg.perm_variant} / {model_cfg.coupling_mode}")
    summary = {"perm": model_cfg.perm_variant, "coupling": model_cfg.coupling_mode,
               "seed": train_cfg.seed, "final_bpd": result.metrics[-1]["bpd"] if result.metrics else None}
    if valid_source is not None:
        summary["valid_bpd"] = evaluate(model, load(valid_source), seed=train_cfg.seed)[1]
    return summary


def _grid_job(job):
    return run_training(*job)


def cmd_train(args):
    raw = read_config(args.config)
    data_source = args.data or raw.get("data")
    if data_source is None:
        raise ArgError("no training data: pass --data or set 'data' in the config")
    valid_source = args.valid or raw.get("valid")
    dataset = load(data_source)
    model_cfg, train_cfg = resolve_configs(raw, args, dataset.shape, dataset.n_bits)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                "data": data_source, "valid": valid_source}
    (out / "config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True))
    if not args.grid:
        summary = run_training(model_cfg, train_cfg, data_source, out, valid_source)
        print(json.dumps(summary))
        return 0

    jobs, keys = [], []
    for coupling in COUPLINGS:
        for perm in PERMS:
            for k in range(args.seeds):
                mc = GlowConfig(**{**model_cfg.to_dict(), "perm_variant": perm,
                                   "coupling_mode": coupling})
                tc = TrainConfig(**{**train_cfg.to_dict(), "seed": train_cfg.seed + k})
                jobs.append((mc, tc, data_source, out / f"{perm}_{coupling}" / f"seed{tc.seed}",
                             valid_source))
                keys.append((perm, coupling))
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_grid_job, jobs))
    else:
        summaries = [_grid_job(j) for j in jobs]

    runs = {}
    for key, job in zip(keys, jobs):
        runs.setdefault(key, []).append(read_metrics(job[3] / "metrics.jsonl"))
    plot_ablation(runs, out / "ablation.png")
    cols = ["perm", "coupling", "seed", "final_bpd", "valid_bpd"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(summaries)
    for s in summaries:
        print(json.dumps(s))
    return 0


# -- evaluation and sampling -------------------------------------------------


def _load(args):
    model, _ = load_checkpoint(args.ckpt)
    return model


def cmd_eval(args):
    model = _load(args)
    dataset = load(args.data)
    nats, bpd = evaluate(model, dataset, batch_size=args.batch_size, seed=args.seed)
    result = {"nats": nats, "bpd": bpd, "n": len(dataset), "data": args.data}
    print(json.dumps(result))
    if args.out:
        Path(args.out).write_text(json.dumps(result) + "\n")
    return 0


def _temps(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    return vals


def cmd_sample(args):
    temps = args.temps or [args.temperature]
    if any(t < 0 for t in temps):
        raise ArgError(f"temperature must be >= 0, got {min(temps)}")
    model = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_bits = model.config.n_bits
    base = model.sample_latents(args.n, 1.0, seed=args.seed)
    rows = []
    for t in temps:
        x = model.decode(base.scale(t))
        rows.append(x)
    if model.config.squeezes:
        if len(temps) == 1:
            x = rows[0]
            save_png(out / "samples.png", image_grid(x, n_bits, gap=args.gap))
            for i, img in enumerate(x):
                save_png(out / f"sample_{i:03d}.png", image_grid(img[None], n_bits))
        else:
            # one column per temperature, one row per latent draw
            sweep = np.stack(rows, axis=1).reshape((-1,) + rows[0].shape[1:])
            save_png(out / "temperature_sweep.png",
                     image_grid(sweep, n_bits, ncols=len(temps), gap=args.gap))
    else:
        with open(out / "samples.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["temperature", "x0", "x1"])
            for t, x in zip(temps, rows):
                for p in x.reshape(len(x), -1):
                    writer.writerow([t, repr(float(p[0])), repr(float(p[1]))])
        for t, x in zip(temps, rows):
            plot_points_2d(x, out / f"samples_T{t:g}.png", title=f"T = {t:g}")
    print(json.dumps({"out": str(out), "n": args.n, "temperatures": temps}))
    return 0


def _dequantized(dataset, model):
    """Bin midpoints: deterministic inputs for encode/interp/manipulate."""
    if dataset.n_bits is None:
        return dataset.images.astype(model.dtype)
    return ((dataset.images + 0.5) / 2 ** dataset.n_bits).astype(model.dtype)


def cmd_encode(args):
    model = _load(args)
    dataset = load(args.data)
    x = _dequantized(dataset, model)
    lat, logdet = model.encode(x)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, z in enumerate(lat.z_parts):
        T.write_gtb(out / f"z{i}.gtb", z)
    T.write_gtb(out / "logdet.gtb", logdet)
    manifest = {"n": len(x), "parts": [list(z.shape[1:]) for z in lat.z_parts],
                "source": args.data}
    (out / "latents.json").write_text(json.dumps(manifest, indent=1))
    print(json.dumps(manifest))
    return 0


def read_latents(path):
    path = Path(path)
    manifest = json.loads((path / "latents.json").read_text())
    return LatentRecord([T.read_gtb(path / f"z{i}.gtb") for i in range(len(manifest["parts"]))])


def cmd_decode(args):
    model = _load(args)
    lat = read_latents(args.latents)
    x = model.decode(LatentRecord([z.astype(model.dtype) for z in lat.z_parts]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_bits = model.config.n_bits
    save_png(out / "decoded.png", image_grid(x, n_bits, gap=args.gap))
    for i, img in enumerate(x):
        save_png(out / f"decoded_{i:03d}.png", image_grid(img[None], n_bits))
    print(json.dumps({"out": str(out), "n": len(x)}))
    return 0


def cmd_interp(args):
    model = _load(args)
    dataset = load(args.data)
    x = _dequantized(dataset, model)
    i, j = args.pair
    for k in (i, j):
        if not 0 <= k < len(x):
            raise ArgError(f"index {k} out of range for {len(x)} images")
    frames = interpolate(x[i], x[j], args.steps, model)
    save_png(args.out, image_grid(frames, model.config.n_bits, ncols=args.steps, gap=args.gap))
    print(json.dumps({"out": args.out, "pair": [i, j], "steps": args.steps}))
    return 0


def cmd_manipulate(args):
    model = _load(args)
    dataset = load(args.data, labels=args.labels)
    x = _dequantized(dataset, model)
    if not 0 <= args.index < len(x):
        raise ArgError(f"index {args.index} out of range for {len(x)} images")
    direction = attribute_direction(x, dataset.labels, model, name=args.name)
    frames = manipulate(x[args.index], direction, args.alphas, model)
    save_png(args.out, image_grid(frames, model.config.n_bits, ncols=len(args.alphas), gap=args.gap))
    print(json.dumps({"out": args.out, "attribute": args.name, "n_pos": direction.n_pos,
                      "n_neg": direction.n_neg, "alphas": args.alphas}))
    return 0


def cmd_verify(args):
    if args.ckpt:
        model = _load(args)
    else:
        raw = read_config(args.config)
        shape = raw.get("model", {}).get("input_shape", (8, 8, 1))
        model_cfg, train_cfg = resolve_configs(raw, args, tuple(shape), raw.get("model", {}).get("n_bits", 3))
        model = Glow(model_cfg, seed=train_cfg.seed)
    report = run_verification(model, precision=args.precision, seed=args.seed)
    text = json.dumps(report, indent=1, default=float)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0 if report["passed"] else 5


def cmd_report(args):
    run = Path(args.run)
    written = []
    if (run / "metrics.jsonl").exists():
        plot_training_curve(read_metrics(run / "metrics.jsonl"), run / "curve.png")
        written.append(str(run / "curve.png"))
    runs = {}
    for perm in PERMS:
        for coupling in COUPLINGS:
            files = sorted((run / f"{perm}_{coupling}").glob("seed*/metrics.jsonl"))
            if files:
                runs[(perm, coupling)] = [read_metrics(f) for f in files]
    if runs:
        plot_ablation(runs, run / "ablation.png")
        written.append(str(run / "ablation.png"))
    if not written:
        raise ArgError(f"{run}: no metrics.jsonl found")
    print(json.dumps({"figures": written}))
    return 0


# -- parser ------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="glowflow", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_flags(sp):
        sp.add_argument("--perm", choices=PERMS)
        sp.add_argument("--coupling", choices=COUPLINGS)
        sp.add_argument("--invconv", choices=("dense", "lu"))
        sp.add_argument("-K", type=int, help="steps of flow per level")
        sp.add_argument("-L", type=int, help="number of levels")
        sp.add_argument("--hidden", type=int, help="coupling network width")

    sp = sub.add_parser("train", help="train a model (or the ablation grid)")
    sp.add_argument("--config", help="JSON or TOML file with model/train/data sections")
    sp.add_argument("--data", help="PNG dir, GTB archive or toy:<kind>:n=..:seed=..")
    sp.add_argument("--valid", help="held-out data evaluated after training")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--grid", action="store_true",
                    help="train every permutation x coupling combination")
    sp.add_argument("--seeds", type=int, default=1, help="seeds per grid cell")
    model_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="mean NLL and bits/dim of a dataset")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=256)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sample", help="draw samples at temperature T")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("-n", type=int, default=16)
    sp.add_argument("-T", "--temperature", type=float, default=0.7)
    sp.add_argument("--temps", type=_temps, help="comma-separated sweep, e.g. 0,0.25,0.6,0.7,0.8,0.9,1")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--gap", type=int, default=2)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("encode", help="write latents of a dataset")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="decode latents written by encode")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--latents", required=True)
    sp.add_argument("--gap", type=int, default=2)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("interp", help="linear latent interpolation between two images")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--pair", type=int, nargs=2, default=(0, 1), metavar=("I", "J"))
    sp.add_argument("--steps", type=int, default=8)
    sp.add_argument("--gap", type=int, default=2)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_interp)

    sp = sub.add_parser("manipulate", help="move an image along an attribute direction")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--labels", required=True, help="CSV of filename,label")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--alphas", type=_temps, default=[-2.0, -1.0, 0.0, 1.0, 2.0])
    sp.add_argument("--name", default="attribute")
    sp.add_argument("--gap", type=int, default=2)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_manipulate)

    sp = sub.add_parser("verify", help="run the numerical oracle suite")
    sp.add_argument("--ckpt")
    sp.add_argument("--config")
    sp.add_argument("--precision", choices=("f32", "f64"), default="f32")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    model_flags(sp)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("report", help="re-render figures from a run directory")
    sp.add_argument("run")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GlowError as exc:
        print(f"glowflow {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
