"""Command-line interface: train, certify, curves, attack, margin.

Every command writes its data files plus ``manifest-<command>.json`` into
``--out``. Data files are byte-identical for identical flags; the wall clock
lives only in the manifest. CSV files open with a comment line naming their
schema version and the manifest that produced them.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import attack as atk
from . import certify as cert
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import Dataset, IdxFormatError, downsample, load_mnist_idx, synthetic_blobs
from .lipnet import CertificationError
from .numerics import SeededRng
from .trainer import DivergenceError, TrainConfig, Trainer
from .vae import VaeModel

CSV_VERSION = 1
MNIST_DIM = 784
DESK_WIDTH = 64

# column order is part of each schema version
SCHEMAS = {
    "history": ["epoch", "elbo", "recon_ll", "kl"],
    "certify": ["index", "sigma_norm", "a", "b", "c", "d_z", "r", "m1", "m2", "margin"],
    "curves": ["delta_norm", "p1", "p2", "p2_branch", "bound", "tighter"],
    "attack": ["index", "mode", "budget", "delta_norm", "objective", "distortion", "r_prob"],
    "margin": ["index", "radius", "reason", "n_probes", "ladder"],
    "margin_summary": ["n", "mean", "std", "found"],
}


class UsageError(Exception):
    pass


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Collects outputs of one command and writes its manifest last."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_name = f"manifest-{command}.json"
        self.outputs: list[Path] = []
        self.inputs: list[Path] = []
        self.extra: dict = {}
        self.started = time.time()

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def write_csv(self, name: str, schema: str, rows):
        lines = [f"# lipvae-csv v{CSV_VERSION} schema={schema} manifest={self.manifest_name}",
                 ",".join(SCHEMAS[schema])]
        lines += [",".join(_fmt(v) for v in row) for row in rows]
        self.path(name).write_text("\n".join(lines) + "\n")

    def write_json(self, name: str, obj):
        self.path(name).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")

    def finish(self):
        try:
            version = metadata.version("artifact")
        except metadata.PackageNotFoundError:
            version = "unknown"
        manifest = {
            "command": self.command,
            "config": {k: v for k, v in sorted(vars(self.args).items()) if k != "func"},
            "seed": getattr(self.args, "seed", None),
            "code_version": version,
            "inputs": {str(p): _sha256(p) for p in self.inputs},
            "outputs": {str(p): _sha256(p) for p in self.outputs},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self.started)),
            "wall_clock_s": round(time.time() - self.started, 3),
            **self.extra,
        }
        (self.out / self.manifest_name).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


# -- data and model helpers -------------------------------------------------


def _load_data(args, run: Run) -> Dataset:
    if args.images is None and not args.synthetic:
        raise UsageError("give --images PATH or --synthetic")
    if args.images is not None and args.synthetic:
        raise UsageError("--images and --synthetic are exclusive")
    if args.synthetic:
        ds = synthetic_blobs(args.synthetic_n, args.synthetic_dim, args.data_seed)
    else:
        run.inputs.append(Path(args.images))
        if args.labels:
            run.inputs.append(Path(args.labels))
        ds = load_mnist_idx(args.images, args.labels)
    if args.downsample > 1:
        ds = downsample(ds, args.downsample)
    return ds


def _select(ds: Dataset, args) -> tuple[np.ndarray, np.ndarray]:
    """Row indices chosen by ``--start``/``--count`` and the matching images."""
    stop = len(ds) if args.count is None else args.start + args.count
    if args.start < 0 or stop > len(ds) or stop <= args.start:
        raise UsageError(f"rows [{args.start}, {stop}) not inside a dataset of {len(ds)}")
    idx = np.arange(args.start, stop)
    return idx, ds.images[idx]


def _load_model(args, run: Run) -> VaeModel:
    run.inputs.append(Path(args.checkpoint))
    return load_checkpoint(args.checkpoint)


def _scale(args, d_x: int) -> float:
    """Desk-scale factor for pixel-space norms: ``sqrt(d_x / 784)``."""
    return math.sqrt(d_x / MNIST_DIM) if args.desk_scale else 1.0


def _attack_cfg(args, budget: float, seed: int) -> atk.AttackConfig:
    steps = args.steps if args.steps is not None else (50 if args.desk_scale else 200)
    per_step = args.attack_samples if args.attack_samples is not None else (16 if args.desk_scale else 64)
    return atk.AttackConfig(budget=budget, steps=steps, restarts=args.restarts, samples=per_step,
                            eval_samples=args.samples, seed=seed, clip=args.clip)


def _write_pgm(path: Path, image: np.ndarray, shape):
    rows, cols = shape
    pix = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    path.write_bytes(f"P5\n{cols} {rows}\n255\n".encode() + pix.tobytes())


# -- commands ---------------------------------------------------------------


def cmd_train(args) -> int:
    run = Run("train", args)
    ds = _load_data(args, run)
    if args.count is not None or args.start:
        idx, _ = _select(ds, args)
        ds = ds.subset(idx)
    if (args.lip_const is None) == (not args.standard):
        raise UsageError("give exactly one of --lip-const M or --standard")
    width = DESK_WIDTH if args.desk_scale and args.width is None else (args.width or 512)
    sigma = None
    if args.fixed_sigma_norm is not None:
        if args.fixed_sigma_norm <= 0:
            raise UsageError("--fixed-sigma-norm must be positive")
        sigma = np.full(args.latent_dim, args.fixed_sigma_norm / math.sqrt(args.latent_dim))
    model = VaeModel.build(ds.dim, args.latent_dim, width, args.hidden_layers,
                           lipschitz=args.lip_const, fixed_sigma=sigma, beta=args.beta, seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                      beta=args.beta, lipschitz=args.lip_const, fixed_sigma_norm=args.fixed_sigma_norm,
                      desk_scale=args.desk_scale)
    trainer = Trainer(model, cfg)
    trainer.fit(ds, callback=None if args.quiet else
                lambda rec: print(f"epoch {rec['epoch']}: elbo {rec['elbo']:.4f}", file=sys.stderr))
    save_checkpoint(run.path("model.ckpt"), model, trainer,
                    extra={"image_shape": list(ds.image_shape), "provenance": ds.provenance})
    run.write_csv("history.csv", "history",
                  [[h["epoch"], h["elbo"], h["recon_ll"], h["kl"]] for h in trainer.history])
    run.finish()
    return 0


def cmd_certify(args) -> int:
    run = Run("certify", args)
    rows = []
    if args.checkpoint is None:
        missing = [f for f in ("a", "b", "sigma_norm") if getattr(args, f) is None]
        if missing:
            raise UsageError("calculator mode needs --" + ", --".join(m.replace("_", "-") for m in missing))
        r = 8.0 if args.r is None else args.r
        inp = cert.CertInput(args.a, args.b, args.c, args.sigma_norm, args.d_z, r, args.delta_norm)
        rep = cert.certify(inp)
        rows.append(["global" if inp.c == 0 else "calc", inp.sigma_norm, inp.a, inp.b, inp.c,
                     inp.d_z, r, rep.m1, rep.m2, rep.margin])
        run.extra["report"] = vars(rep)
    else:
        model = _load_model(args, run)
        try:
            a, b, c = model.constants(tight=args.tight)
        except CertificationError as exc:
            raise UsageError(f"refusing to certify {args.checkpoint}: {exc}") from None
        r = args.r if args.r is not None else 8.0 * _scale(args, model.input_dim)
        if args.global_margin:
            if model.fixed_sigma is None:
                raise UsageError("--global needs a fixed-sigma checkpoint")
            s = float(np.linalg.norm(model.fixed_sigma))
            inp = cert.CertInput(a, b, 0.0, s, model.latent_dim, r)
            rows.append(["global", s, a, b, 0.0, model.latent_dim, r,
                         cert.margin_m1(inp), cert.margin_m2(inp), cert.margin_bound(inp)])
        else:
            ds = _load_data(args, run)
            idx, X = _select(ds, args)
            for i, s in zip(idx, model.sigma_norm(X)):
                inp = cert.CertInput(a, b, c, float(s), model.latent_dim, r)
                rows.append([int(i), float(s), a, b, c, model.latent_dim, r,
                             cert.margin_m1(inp), cert.margin_m2(inp), cert.margin_bound(inp)])
    run.write_csv("certify.csv", "certify", rows)
    run.finish()
    return 0


def cmd_curves(args) -> int:
    run = Run("curves", args)
    r = 8.0 if args.r is None else args.r
    base = cert.CertInput(args.a, args.b, args.c, args.sigma_norm, args.d_z, r)
    hi = args.delta_max if args.delta_max is not None else 1.25 * r / (args.a * args.b)
    rows, switches, prev = [], [], None
    for t in np.linspace(0.0, hi, args.points):
        inp = base.at(float(t))
        v1 = cert.p1(inp)
        v2, branch = cert.p2(inp)
        tighter = "p1" if v1 < v2 else ("p2" if v2 < v1 else "tie")
        if prev is not None and tighter != "tie" and prev != tighter:
            switches.append({"delta_norm": float(t), "to": tighter})
        if tighter != "tie":
            prev = tighter
        rows.append([float(t), v1, v2, branch, 1.0 - min(v1, v2), tighter])
    run.write_csv("curves.csv", "curves", rows)
    run.write_json("curves-switch.json", {"switches": switches})
    run.finish()
    return 0


def cmd_attack(args) -> int:
    run = Run("attack", args)
    if args.mode not in ("max-damage", "latent"):
        raise UsageError(f"unknown attack mode {args.mode!r}")
    model = _load_model(args, run)
    ds = _load_data(args, run)
    idx, X = _select(ds, args)
    if args.mode == "latent" and args.target_index is None:
        raise UsageError("--mode latent needs --target-index")
    rows, results = [], []
    for i, x in zip(idx, X):
        cfg = _attack_cfg(args, args.budget, args.seed)
        rng = SeededRng(args.seed, (int(i),))
        if args.mode == "max-damage":
            res = atk.max_damage_attack(model, x, cfg, r=args.r, rng=rng.spawn(0))
        else:
            res = atk.latent_space_attack(model, x, ds.images[args.target_index], cfg, rng=rng.spawn(0))
        dist = atk.expected_distortion(model, x, res.delta, args.samples, rng.spawn(1), args.clip)
        xp = x + res.delta
        if args.clip:
            xp = np.clip(xp, 0.0, 1.0)
        before = model.decode(model.encode(x).mean)
        after = model.decode(model.encode(xp).mean)
        stem = f"attack-{int(i)}"
        for tag, arr in (("delta", res.delta), ("recon-before", before), ("recon-after", after)):
            run.path(f"{stem}-{tag}.f64").write_bytes(np.asarray(arr, dtype="<f8").tobytes())
        for tag, img in (("input", x), ("perturbed", xp), ("recon-before", before), ("recon-after", after)):
            _write_pgm(run.path(f"{stem}-{tag}.pgm"), img, ds.image_shape)
        rows.append([int(i), args.mode, args.budget, float(np.linalg.norm(res.delta)), res.objective,
                     dist, res.r_prob])
        results.append({"index": int(i), "objective": res.objective, "distortion": dist,
                        "r_prob": res.r_prob, "delta": res.delta.tolist(),
                        "trace": res.trace.tolist(), "restart_best": res.restart_best.tolist(),
                        "shape": list(ds.image_shape)})
    run.write_csv("attack.csv", "attack", rows)
    run.write_json("attack.json", {"mode": args.mode, "budget": args.budget, "results": results})
    run.finish()
    return 0


def cmd_margin(args) -> int:
    run = Run("margin", args)
    model = _load_model(args, run)
    ds = _load_data(args, run)
    idx, X = _select(ds, args)
    k = _scale(args, model.input_dim)
    r = args.r if args.r is not None else 8.0 * k
    max_r = args.max_r if args.max_r is not None else 5.0 * k
    alpha = args.alpha if args.alpha is not None else 0.25 * k
    cfg = _attack_cfg(args, max_r, args.seed)
    est = atk.estimate_margins(model, X, r, max_r, alpha, args.samples, args.restarts,
                               args.seed, cfg, keys=idx)
    rows = []
    for i, e in zip(idx, est):
        ladder = "|".join(f"{rad!r}:" + ";".join(repr(p) for p in probs) for rad, probs in e.probes)
        rows.append([int(i), e.radius, e.reason, len(e.probes), ladder])
    radii = np.array([e.radius for e in est])
    run.write_csv("margin.csv", "margin", rows)
    run.write_csv("margin-summary.csv", "margin_summary",
                  [[len(radii), float(radii.mean()), float(radii.std()),
                    sum(e.reason == "found" for e in est)]])
    run.extra["ladder"] = {"r": r, "max_r": max_r, "alpha": alpha}
    run.finish()
    return 0


# -- argument parsing -------------------------------------------------------


def _data_flags(p):
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--synthetic", action="store_true", help="use synthetic bump images")
    p.add_argument("--synthetic-n", type=int, default=2000)
    p.add_argument("--synthetic-dim", type=int, default=64)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--downsample", type=int, default=1, help="block-mean pooling factor")
    p.add_argument("--start", type=int, default=0, help="first dataset row to use")
    p.add_argument("--count", type=int, help="number of rows (default: all)")


def _attack_flags(p):
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--samples", type=int, default=1000, help="fresh samples for probability estimates")
    p.add_argument("--steps", type=int, help="PGD steps (default 200, desk scale 50)")
    p.add_argument("--attack-samples", type=int, help="samples per PGD step (default 64, desk scale 16)")
    p.add_argument("--clip", action="store_true", help="clip x + delta to [0, 1]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lipvae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--desk-scale", action="store_true",
                       help="width-64 nets, norms scaled by sqrt(d_x/784), lighter attacks")

    p = sub.add_parser("train", help="train a standard or Lipschitz VAE")
    common(p)
    _data_flags(p)
    p.add_argument("--lip-const", type=float, help="Lipschitz constant of every network")
    p.add_argument("--standard", action="store_true", help="unconstrained ReLU VAE")
    p.add_argument("--fixed-sigma-norm", type=float, help="fix the encoder std to a vector of this norm")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--latent-dim", type=int, default=10)
    p.add_argument("--width", type=int)
    p.add_argument("--hidden-layers", type=int, default=3)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="certified r-robustness margins")
    common(p)
    _data_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--global", dest="global_margin", action="store_true",
                   help="input-independent margin of a fixed-sigma checkpoint")
    p.add_argument("--tight", action="store_true", help="use the sigmoid-tightened decoder constant")
    p.add_argument("--r", type=float)
    p.add_argument("--a", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--c", type=float, default=0.0)
    p.add_argument("--sigma-norm", type=float)
    p.add_argument("--d-z", type=int, default=10)
    p.add_argument("--delta-norm", type=float)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("curves", help="p1 / p2 bound curves over the perturbation norm")
    common(p)
    p.add_argument("--a", type=float, default=5.0)
    p.add_argument("--b", type=float, default=5.0)
    p.add_argument("--c", type=float, default=5.0)
    p.add_argument("--sigma-norm", type=float, default=0.1)
    p.add_argument("--d-z", type=int, default=5)
    p.add_argument("--r", type=float)
    p.add_argument("--delta-max", type=float)
    p.add_argument("--points", type=int, default=401)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("attack", help="maximum damage or latent space attack")
    common(p)
    _data_flags(p)
    _attack_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", default="max-damage", help="max-damage | latent")
    p.add_argument("--budget", type=float, required=True)
    p.add_argument("--target-index", type=int)
    p.add_argument("--r", type=float, help="also estimate the r-robustness probability")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("margin", help="estimated r-robustness margins")
    common(p)
    _data_flags(p)
    _attack_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--r", type=float)
    p.add_argument("--max-r", type=float)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_margin)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, CheckpointError, IdxFormatError, DivergenceError, ValueError, OSError) as exc:
        print(f"lipvae {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
