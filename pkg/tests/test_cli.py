import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from lipvae.checkpoint import load_checkpoint, read_header, save_checkpoint
from lipvae.cli import SCHEMAS, main
from lipvae.lipnet import empirical_lipschitz
from lipvae.numerics import SeededRng
from lipvae.vae import VaeModel

DATA = ["--synthetic", "--synthetic-n", "300", "--synthetic-dim", "64", "--data-seed", "2"]
SMALL = DATA + ["--width", "16", "--hidden-layers", "2", "--latent-dim", "4", "--epochs", "2", "--quiet"]
FAST_ATTACK = ["--restarts", "2", "--steps", "10", "--attack-samples", "4", "--samples", "50"]


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# lipvae-csv v1 schema=")
    return list(csv.DictReader(lines[1:]))


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def lip_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("lip")
    assert run("train", "--out", out, "--lip-const", 5, "--fixed-sigma-norm", 0.1, *SMALL) == 0
    return out / "model.ckpt"


@pytest.fixture(scope="module")
def std_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("std")
    assert run("train", "--out", out, "--standard", "--fixed-sigma-norm", 0.1, *SMALL) == 0
    return out / "model.ckpt"


# -- train ---------------------------------------------------------------------------


def test_train_twice_gives_identical_checkpoints(tmp_path):
    for name in ("a", "b"):
        assert run("train", "--out", tmp_path / name, "--lip-const", 5, "--seed", 1, *SMALL) == 0
    assert (tmp_path / "a/model.ckpt").read_bytes() == (tmp_path / "b/model.ckpt").read_bytes()
    assert (tmp_path / "a/history.csv").read_bytes() == (tmp_path / "b/history.csv").read_bytes()


def test_train_outputs_and_manifest(lip_ckpt):
    out = lip_ckpt.parent
    rows = read_csv(out / "history.csv")
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert list(rows[0]) == SCHEMAS["history"]
    header = read_header(lip_ckpt)
    assert header["model"]["fixed_sigma"] is True
    model = load_checkpoint(lip_ckpt)
    assert np.linalg.norm(model.fixed_sigma) == pytest.approx(0.1, rel=1e-14)
    manifest = json.loads((out / "manifest-train.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 0
    assert manifest["config"]["lip_const"] == 5.0
    assert str(lip_ckpt) in manifest["outputs"]
    assert "manifest=manifest-train.json" in (out / "history.csv").read_text().splitlines()[0]


def test_standard_and_lipschitz_both_train(lip_ckpt, std_ckpt, tmp_path):
    assert run("train", "--out", tmp_path, "--lip-const", 10, *SMALL) == 0
    lip10 = load_checkpoint(tmp_path / "model.ckpt")
    assert empirical_lipschitz(lip10.decoder, 10**4, SeededRng(0)) <= 10 * (1 + 1e-3)
    assert load_checkpoint(std_ckpt).mode == "standard"


def test_train_flag_errors(tmp_path, capsys):
    assert run("train", "--out", tmp_path, *SMALL) == 1
    assert "--lip-const" in capsys.readouterr().err
    assert run("train", "--out", tmp_path, "--lip-const", 5, "--standard", *SMALL) == 1
    assert run("train", "--out", tmp_path, "--lip-const", 5, "--epochs", 1) == 1
    assert run("train", "--out", tmp_path, "--lip-const", 5, "--images", tmp_path / "none.idx") == 1


# -- certify ---------------------------------------------------------------------------


def test_certify_calculator(tmp_path):
    assert run("certify", "--out", tmp_path, "--a", 5, "--b", 5, "--c", 5, "--sigma-norm", 0,
               "--r", 8) == 0
    (row,) = read_csv(tmp_path / "certify.csv")
    assert float(row["margin"]) == pytest.approx(0.16, rel=1e-14)
    assert row["index"] == "calc"


def test_certify_calculator_missing_flags(tmp_path):
    assert run("certify", "--out", tmp_path, "--a", 5) == 1


def test_certify_refuses_standard_checkpoint(tmp_path, std_ckpt, capsys):
    assert run("certify", "--out", tmp_path, "--checkpoint", std_ckpt, *DATA) == 1
    assert "refusing to certify" in capsys.readouterr().err
    assert not (tmp_path / "certify.csv").exists()


def test_certify_global_fixed_sigma(tmp_path):
    model = VaeModel.build(64, 10, 16, 2, lipschitz=5.0, fixed_sigma=np.full(10, 0.1 / math.sqrt(10)),
                           seed=0)
    save_checkpoint(tmp_path / "m.ckpt", model)
    assert run("certify", "--out", tmp_path, "--checkpoint", tmp_path / "m.ckpt", "--global", "--r", 8) == 0
    (row,) = read_csv(tmp_path / "certify.csv")
    assert row["index"] == "global"
    assert round(float(row["m1"]), 6) == 0.222711


def test_certify_per_input(tmp_path, lip_ckpt):
    assert run("certify", "--out", tmp_path, "--checkpoint", lip_ckpt, *DATA, "--start", 10,
               "--count", 3) == 0
    rows = read_csv(tmp_path / "certify.csv")
    assert [int(r["index"]) for r in rows] == [10, 11, 12]
    assert all(float(r["margin"]) == max(float(r["m1"] or 0), float(r["m2"])) for r in rows)


# -- curves ------------------------------------------------------------------------------


def test_curves_at_reference_parameters(tmp_path):
    assert run("curves", "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "curves.csv")
    assert float(rows[0]["delta_norm"]) == 0.0 and float(rows[0]["p1"]) == 0.015625
    p1 = [float(r["p1"]) for r in rows]
    p2 = [float(r["p2"]) for r in rows]
    assert all(0 <= v <= 1 for v in p1 + p2)
    assert all(b >= a for a, b in zip(p1, p1[1:]))
    switches = json.loads((tmp_path / "curves-switch.json").read_text())["switches"]
    assert switches and {r["tighter"] for r in rows} >= {"p1", "p2"}


# -- attack -------------------------------------------------------------------------------


def test_attack_budget_zero(tmp_path, lip_ckpt):
    assert run("attack", "--out", tmp_path, "--checkpoint", lip_ckpt, *DATA, "--count", 2,
               "--budget", 0, *FAST_ATTACK) == 0
    rows = read_csv(tmp_path / "attack.csv")
    assert [float(r["delta_norm"]) for r in rows] == [0.0, 0.0]
    delta = np.frombuffer((tmp_path / "attack-0-delta.f64").read_bytes(), dtype="<f8")
    assert delta.shape == (64,) and not delta.any()
    before = (tmp_path / "attack-0-recon-before.f64").read_bytes()
    assert before == (tmp_path / "attack-0-recon-after.f64").read_bytes()
    assert (tmp_path / "attack-0-perturbed.pgm").read_bytes().startswith(b"P5\n8 8\n255\n")


def test_attack_latent_target_is_source(tmp_path, lip_ckpt):
    assert run("attack", "--out", tmp_path, "--checkpoint", lip_ckpt, *DATA, "--start", 4, "--count", 1,
               "--mode", "latent", "--target-index", 4, "--budget", 1, *FAST_ATTACK, "--steps", 100) == 0
    (row,) = read_csv(tmp_path / "attack.csv")
    assert float(row["objective"]) <= 1e-8


def test_attack_with_probability(tmp_path, lip_ckpt):
    assert run("attack", "--out", tmp_path, "--checkpoint", lip_ckpt, *DATA, "--count", 1,
               "--budget", 0.5, "--r", 1.0, *FAST_ATTACK) == 0
    (row,) = read_csv(tmp_path / "attack.csv")
    assert 0 <= float(row["r_prob"]) <= 1
    assert float(row["delta_norm"]) <= 0.5 * (1 + 1e-12)
    res = json.loads((tmp_path / "attack.json").read_text())["results"][0]
    assert res["objective"] == float(row["objective"])


def test_attack_bad_mode(tmp_path, lip_ckpt, capsys):
    assert run("attack", "--out", tmp_path, "--checkpoint", lip_ckpt, *DATA, "--budget", 1,
               "--mode", "sideways") == 1
    assert "sideways" in capsys.readouterr().err


def test_attack_latent_needs_target(tmp_path, lip_ckpt):
    assert run("attack", "--out", tmp_path, "--checkpoint", lip_ckpt, *DATA, "--count", 1, "--budget", 1,
               "--mode", "latent") == 1


# -- margin -------------------------------------------------------------------------------


def test_margin_constant_decoder(tmp_path):
    model = VaeModel.build(64, 4, 16, 2, lipschitz=None, fixed_sigma=np.full(4, 0.05), seed=0)
    model.decoder.layers[-1].weight[:] = 0.0
    model.touch()
    save_checkpoint(tmp_path / "m.ckpt", model)
    assert run("margin", "--out", tmp_path, "--checkpoint", tmp_path / "m.ckpt", *DATA, "--count", 3,
               "--r", 1e-3, "--max-r", 2, "--alpha", 0.5, *FAST_ATTACK) == 0
    rows = read_csv(tmp_path / "margin.csv")
    assert [float(r["radius"]) for r in rows] == [2.0, 2.0, 2.0]
    (summary,) = read_csv(tmp_path / "margin-summary.csv")
    assert float(summary["mean"]) == 2.0 and float(summary["std"]) == 0.0
    assert int(summary["found"]) == 3


def test_margin_desk_scale_defaults(tmp_path, lip_ckpt):
    assert run("margin", "--out", tmp_path, "--checkpoint", lip_ckpt, *DATA, "--count", 1, "--desk-scale",
               *FAST_ATTACK) == 0
    ladder = json.loads((tmp_path / "manifest-margin.json").read_text())["ladder"]
    k = math.sqrt(64 / 784)
    assert ladder == {"r": 8 * k, "max_r": 5 * k, "alpha": 0.25 * k}
    (row,) = read_csv(tmp_path / "margin.csv")
    assert int(row["n_probes"]) == len(row["ladder"].split("|"))


def test_outputs_are_byte_identical(tmp_path, lip_ckpt):
    args = [*DATA, "--count", 2, "--r", 1.0, "--max-r", 1.0, "--alpha", 0.5, *FAST_ATTACK]
    for name in ("a", "b"):
        assert run("margin", "--out", tmp_path / name, "--checkpoint", lip_ckpt, *args) == 0
        assert run("attack", "--out", tmp_path / name, "--checkpoint", lip_ckpt, *DATA, "--count", 2,
                   "--budget", 1, *FAST_ATTACK) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if not p.name.startswith("manifest"))
    assert files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lipvae", "curves", "--out", str(tmp_path), "--points", "5"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len(read_csv(tmp_path / "curves.csv")) == 5
