import json

import numpy as np
import pytest
from PIL import Image

from glowflow.cli import main
from glowflow.tensor import read_gtb, write_gtb

TINY = ["-K", "1", "-L", "2", "--hidden", "4"]
DATA = "toy:checker8x8:n=64:seed=1"


def run(argv, capsys):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


@pytest.fixture
def ckpt(tmp_path_factory, capsys):
    out = tmp_path_factory.mktemp("run")
    code, _ = run(["train", "--data", DATA, "--out", out, "--steps", 3, "--batch-size", 16,
                   *TINY], capsys)
    assert code == 0
    return out / "final"


def test_train_writes_run_directory(tmp_path, capsys):
    code, cap = run(["train", "--data", DATA, "--valid", "toy:checker8x8:n=32:seed=2",
                     "--out", tmp_path, "--steps", 2, "--batch-size", 16, *TINY], capsys)
    assert code == 0
    summary = json.loads(cap.out)
    assert set(summary) == {"perm", "coupling", "seed", "final_bpd", "valid_bpd"}
    for name in ("config.json", "metrics.jsonl", "curve.png", "final/manifest.json"):
        assert (tmp_path / name).exists(), name
    resolved = json.loads((tmp_path / "config.json").read_text())
    assert resolved["model"]["input_shape"] == [8, 8, 1] and resolved["model"]["n_bits"] == 3


def test_train_from_toml_config(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'data = "{DATA}"\n[model]\nK = 1\nL = 1\nhidden_channels = 4\n'
                   '[train]\nsteps = 2\nbatch_size = 16\n')
    code, _ = run(["train", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 0
    assert json.loads((tmp_path / "o/config.json").read_text())["model"]["L"] == 1


def test_bad_config_reports_every_problem(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"depth": 3}, "train": {"speed": 1}, "extra": 1}))
    code, cap = run(["train", "--config", cfg, "--data", DATA, "--out", tmp_path / "o"], capsys)
    assert code == 2
    for word in ("depth", "speed", "extra"):
        assert word in cap.err


def test_invalid_levels_exit_2(tmp_path, capsys):
    code, cap = run(["train", "--data", DATA, "--out", tmp_path, "-L", 4], capsys)
    assert code == 2 and "2^L" in cap.err


def test_missing_data_exit_3(tmp_path, capsys):
    code, _ = run(["train", "--data", tmp_path / "nope", "--out", tmp_path / "o"], capsys)
    assert code == 3


def test_argparse_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["sample"])
    assert info.value.code == 2


def test_grid_emits_six_runs(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("FLOW_THREADS", "1")
    code, cap = run(["train", "--grid", "--data", DATA, "--out", tmp_path, "--steps", 2,
                     "--batch-size", 16, *TINY], capsys)
    assert code == 0
    files = sorted(tmp_path.glob("*_*/seed0/metrics.jsonl"))
    assert len(files) == 6
    assert (tmp_path / "ablation.png").exists()
    rows = (tmp_path / "ablation.csv").read_text().splitlines()
    assert rows[0] == "perm,coupling,seed,final_bpd,valid_bpd" and len(rows) == 7
    code, cap = run(["report", tmp_path], capsys)
    assert code == 0 and "ablation.png" in cap.out


def test_sample_zero_temperature_tiles_identical(ckpt, tmp_path, capsys):
    code, _ = run(["sample", "--ckpt", ckpt, "-n", 4, "-T", 0, "--gap", 0,
                   "--out", tmp_path / "s"], capsys)
    assert code == 0
    grid = np.asarray(Image.open(tmp_path / "s/samples.png"))
    tiles = [grid[r:r + 8, c:c + 8] for r in (0, 8) for c in (0, 8)]
    assert all(np.array_equal(t, tiles[0]) for t in tiles)


def test_sample_default_temperature_and_seed(ckpt, tmp_path, capsys):
    code, cap = run(["sample", "--ckpt", ckpt, "-n", 2, "--out", tmp_path / "a"], capsys)
    assert json.loads(cap.out)["temperatures"] == [0.7]
    run(["sample", "--ckpt", ckpt, "-n", 2, "--out", tmp_path / "b"], capsys)
    assert (tmp_path / "a/samples.png").read_bytes() == (tmp_path / "b/samples.png").read_bytes()
    code, _ = run(["sample", "--ckpt", ckpt, "--temps", "0,0.5,1", "-n", 2,
                   "--out", tmp_path / "c"], capsys)
    assert code == 0 and (tmp_path / "c/temperature_sweep.png").exists()
    code, _ = run(["sample", "--ckpt", ckpt, "-T", -1, "--out", tmp_path / "d"], capsys)
    assert code == 2


def test_eval_encode_decode(ckpt, tmp_path, capsys):
    code, cap = run(["eval", "--ckpt", ckpt, "--data", DATA, "--out", tmp_path / "e.json"], capsys)
    assert code == 0 and json.loads(cap.out)["n"] == 64
    code, _ = run(["encode", "--ckpt", ckpt, "--data", "toy:checker8x8:n=3",
                   "--out", tmp_path / "z"], capsys)
    assert code == 0 and read_gtb(tmp_path / "z/z0.gtb").shape == (3, 4, 4, 2)
    code, _ = run(["decode", "--ckpt", ckpt, "--latents", tmp_path / "z",
                   "--out", tmp_path / "d"], capsys)
    assert code == 0
    from glowflow.data import toy_generate
    from glowflow.report import image_grid
    src = toy_generate("checker8x8", 3).images
    dec = np.asarray(Image.open(tmp_path / "d/decoded_001.png"))
    np.testing.assert_array_equal(dec, image_grid((src[1:2] + 0.5) / 8, 3)[..., 0])


def test_interp_and_manipulate(ckpt, tmp_path, capsys):
    code, _ = run(["interp", "--ckpt", ckpt, "--data", DATA, "--steps", 4,
                   "--out", tmp_path / "i.png"], capsys)
    assert code == 0 and (tmp_path / "i.png").exists()
    code, _ = run(["interp", "--ckpt", ckpt, "--data", DATA, "--pair", 0, 999,
                   "--out", tmp_path / "j.png"], capsys)
    assert code == 2
    pngs = tmp_path / "p"
    pngs.mkdir()
    rows = ["filename,label"]
    for i in range(4):
        Image.fromarray(np.full((8, 8), 40 * i, np.uint8)).save(pngs / f"{i}.png")
        rows.append(f"{i}.png,{i % 2}")
    (tmp_path / "l.csv").write_text("\n".join(rows) + "\n")
    # the checkpoint is 3-bit; PNGs load as 8-bit, so shape matches but bits differ
    code, cap = run(["manipulate", "--ckpt", ckpt, "--data", pngs, "--labels", tmp_path / "l.csv",
                     "--out", tmp_path / "m.png"], capsys)
    assert code == 0 and json.loads(cap.out)["n_pos"] == 2


def test_verify_fresh_model_passes(tmp_path, capsys):
    code, cap = run(["verify", *TINY, "--precision", "f64", "--out", tmp_path / "v.json"], capsys)
    assert code == 0
    report = json.loads((tmp_path / "v.json").read_text())
    assert report["passed"] and all(isinstance(c["passed"], bool) for c in report["checks"])


def test_corrupted_checkpoint_fails(ckpt, tmp_path, capsys):
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(ckpt, bad)
    f = bad / "tensors" / "level0.step0.actnorm.s.gtb"
    write_gtb(f, np.zeros_like(read_gtb(f)))
    code, _ = run(["verify", "--ckpt", bad], capsys)
    assert code != 0
    code, cap = run(["sample", "--ckpt", bad, "--out", tmp_path / "s"], capsys)
    assert code == 4 and "SingularError" in cap.err
