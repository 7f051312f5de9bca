"""Checkpoint files: one JSON header line, then a little-endian float64 payload.

The header carries the format tag, architecture, training config and history,
and the name/shape of every array stored in the payload (in payload order)
together with the payload's byte length and SHA-256. ``head -1 file`` shows the
metadata.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .lipnet import DenseLayer, LipschitzMLP, OrthoConfig
from .trainer import TrainConfig, Trainer
from .vae import VaeModel

FORMAT_VERSION = "lipvae-ckpt-1"
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


def _net_header(net: LipschitzMLP) -> dict:
    return {
        "lipschitz": net.lipschitz,
        "ortho": {"iters": net.ortho.iters, "order": net.ortho.order, "tol": net.ortho.tol,
                  "safe_scaling": net.ortho.safe_scaling},
        "layers": [{"in": l.in_dim, "out": l.out_dim, "activation": l.activation,
                    "scale": l.scale, "orthonormalize": l.orthonormalize} for l in net.layers],
    }


def _model_arrays(model: VaeModel) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, net in model.nets().items():
        out.extend((f"{name}/{pname}", p) for pname, p in zip(net.param_names(), net.params()))
    if model.fixed_sigma is not None:
        out.append(("fixed_sigma", model.fixed_sigma))
    return out


def save_checkpoint(path, model: VaeModel, trainer: Trainer = None, extra: dict = None):
    """Write ``model`` (and optionally the optimizer/history of ``trainer``) to ``path``."""
    arrays = _model_arrays(model)
    header = {
        "format": FORMAT_VERSION,
        "model": {"mode": model.mode, "beta": model.beta, "latent_dim": model.latent_dim,
                  "input_dim": model.input_dim, "fixed_sigma": model.fixed_sigma is not None,
                  "nets": {name: _net_header(net) for name, net in model.nets().items()}},
        "trainer": None,
        "extra": extra or {},
    }
    if trainer is not None:
        if trainer.model is not model:
            raise ValueError("trainer belongs to a different model")
        opt = trainer.optimizer
        arrays += [(f"adam/m/{i}", m) for i, m in enumerate(opt.m)]
        arrays += [(f"adam/v/{i}", v) for i, v in enumerate(opt.v)]
        header["trainer"] = {"config": trainer.cfg.to_dict(), "epoch": trainer.epoch,
                             "adam_step": opt.t, "history": trainer.history,
                             "rng": {"seed": trainer.cfg.seed, "next_stream": [trainer.epoch]}}
    payload = b"".join(np.ascontiguousarray(a, dtype=_LE_F64).tobytes() for _, a in arrays)
    header["arrays"] = [{"name": name, "shape": list(np.shape(a))} for name, a in arrays]
    header["payload_bytes"] = len(payload)
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    text = json.dumps(header, sort_keys=True, separators=(",", ":"))
    Path(path).write_bytes(text.encode() + b"\n" + payload)


def _read(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    head, sep, payload = raw.partition(b"\n")
    if not sep:
        raise CheckpointCorruptError(f"{path}: missing header terminator")
    try:
        header = json.loads(head)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header ({exc})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_VERSION:
        found = header.get("format") if isinstance(header, dict) else None
        raise CheckpointVersionError(f"{path}: format {found!r}, expected {FORMAT_VERSION!r}")
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointCorruptError(f"{path}: payload length {len(payload)} != {header.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointCorruptError(f"{path}: payload checksum mismatch")
    arrays, offset = {}, 0
    for entry in header["arrays"]:
        count = math.prod(entry["shape"])
        chunk = payload[offset:offset + 8 * count]
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=_LE_F64).astype(np.float64).reshape(entry["shape"])
        offset += 8 * count
    return header, arrays


def _build_net(desc: dict, arrays: dict, prefix: str) -> LipschitzMLP:
    layers = []
    for i, spec in enumerate(desc["layers"]):
        layers.append(DenseLayer(arrays[f"{prefix}/w{i}"].copy(), arrays[f"{prefix}/b{i}"].copy(),
                                 spec["scale"], spec["activation"], spec["orthonormalize"]))
    return LipschitzMLP(layers, desc["lipschitz"], OrthoConfig(**desc["ortho"]))


def _model_from(header: dict, arrays: dict) -> VaeModel:
    m = header["model"]
    nets = {name: _build_net(desc, arrays, name) for name, desc in m["nets"].items()}
    return VaeModel(nets["mean"], nets["decoder"], nets.get("std"),
                    arrays.get("fixed_sigma"), m["beta"])


def read_header(path) -> dict:
    return _read(path)[0]


def load_checkpoint(path) -> VaeModel:
    header, arrays = _read(path)
    return _model_from(header, arrays)


def load_trainer(path) -> Trainer:
    """Restore model, optimizer moments, epoch counter and history for resumption."""
    header, arrays = _read(path)
    state = header["trainer"]
    if state is None:
        raise CheckpointError(f"{path}: checkpoint holds no training state")
    model = _model_from(header, arrays)
    trainer = Trainer(model, TrainConfig(**state["config"]))
    opt = trainer.optimizer
    for i in range(len(opt.m)):
        opt.m[i][...] = arrays[f"adam/m/{i}"]
        opt.v[i][...] = arrays[f"adam/v/{i}"]
    opt.t = state["adam_step"]
    trainer.epoch = state["epoch"]
    trainer.history = list(state["history"])
    return trainer
