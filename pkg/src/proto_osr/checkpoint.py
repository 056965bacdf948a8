"""Single-file JSON checkpoints for trained prototype models.

A checkpoint carries everything needed to evaluate a model or resume its
training run: model layout and parameters, Adam moments, the label-smoothing
record, calibrated rejection thresholds, and the resolved training
configuration. Arrays are embedded as base64-encoded little-endian float64
bytes and the JSON is written with sorted keys, so identical runs produce
byte-identical files.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from .model import ModelConfig, PrototypeModel
from .openset import ThresholdTable
from .smoothing import SmoothingState

FORMAT_VERSION = "proto-osr.ckpt.v1"

_REQUIRED = ("format_version", "model", "params", "loss", "smoothing",
             "optimizer", "epochs_completed", "thresholds", "train")


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint contents."""


def encode_array(a: np.ndarray) -> dict:
    """Pack a float array as shape + base64 of little-endian float64 bytes."""
    a = np.asarray(a)
    if a.dtype.kind != "f":
        raise CheckpointError(f"only float arrays are stored, got dtype {a.dtype}")
    buf = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape),
            "data": base64.b64encode(buf.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    """Inverse of encode_array; returns a writable native float64 array."""
    try:
        shape = tuple(int(s) for s in d["shape"])
        raw = base64.b64decode(d["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad array record: {exc}") from None
    expect = int(np.prod(shape, dtype=np.int64)) * 8
    if len(raw) != expect:
        raise CheckpointError(
            f"array payload holds {len(raw)} bytes, shape {shape} needs {expect}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def build_state(*, model: PrototypeModel, loss: dict, smoothing: SmoothingState,
                optimizer: dict, epochs_completed: int,
                thresholds: ThresholdTable | None, train: dict) -> dict:
    """Assemble the full checkpoint dict from live training objects.

    ``optimizer`` is ``{"t": int, "m": {name: array}, "v": {name: array}}``
    with moment arrays matching the model parameters.
    """
    for slot in ("m", "v"):
        if set(optimizer[slot]) != set(model.params):
            raise CheckpointError(f"optimizer {slot!r} keys do not match parameters")
    return {
        "format_version": FORMAT_VERSION,
        "model": {"config": model.config.to_dict(), "n_classes": model.n_classes},
        "params": {k: encode_array(v) for k, v in model.params.items()},
        "loss": dict(loss),
        "smoothing": {
            "mode": smoothing.mode,
            "alpha": float(smoothing.alpha),
            "n_classes": int(smoothing.n_classes),
            "q": None if smoothing.q is None else encode_array(smoothing.q),
        },
        "optimizer": {
            "t": int(optimizer["t"]),
            "m": {k: encode_array(a) for k, a in optimizer["m"].items()},
            "v": {k: encode_array(a) for k, a in optimizer["v"].items()},
        },
        "epochs_completed": int(epochs_completed),
        "thresholds": None if thresholds is None else thresholds.to_dict(),
        "train": dict(train),
    }


def save(path, state: dict) -> None:
    """Write a checkpoint dict as canonical JSON (sorted keys, one indent)."""
    missing = [k for k in _REQUIRED if k not in state]
    if missing:
        raise CheckpointError(f"checkpoint is missing keys {missing}")
    text = json.dumps(state, sort_keys=True, indent=1)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")


def load(path) -> dict:
    """Read and structurally validate a checkpoint file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            state = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    if not isinstance(state, dict):
        raise CheckpointError("checkpoint root must be a JSON object")
    tag = state.get("format_version")
    if tag != FORMAT_VERSION:
        raise CheckpointError(f"format_version {tag!r}, expected {FORMAT_VERSION!r}")
    missing = [k for k in _REQUIRED if k not in state]
    if missing:
        raise CheckpointError(f"checkpoint is missing keys {missing}")
    return state


def restore_model(state: dict) -> PrototypeModel:
    """Rebuild the model and overwrite its parameters from the checkpoint."""
    md = state["model"]
    model = PrototypeModel(ModelConfig.from_dict(md["config"]),
                           int(md["n_classes"]), seed=0)
    enc = state["params"]
    if set(enc) != set(model.params):
        raise CheckpointError("stored parameters do not match the model layout")
    for name, arr in model.params.items():
        got = decode_array(enc[name])
        if got.shape != arr.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {got.shape}, expected {arr.shape}")
        arr[...] = got
    return model


def restore_smoothing(state: dict) -> SmoothingState:
    sd = state["smoothing"]
    q = None if sd.get("q") is None else decode_array(sd["q"])
    return SmoothingState(sd["mode"], float(sd["alpha"]), int(sd["n_classes"]),
                          q)


def restore_optimizer(state: dict, params: dict) -> dict:
    """Return ``{"t", "m", "v"}`` with decoded moments matching ``params``."""
    od = state["optimizer"]
    out = {"t": int(od["t"]), "m": {}, "v": {}}
    for slot in ("m", "v"):
        enc = od[slot]
        if set(enc) != set(params):
            raise CheckpointError(f"optimizer {slot!r} keys do not match parameters")
        for name, p in params.items():
            a = decode_array(enc[name])
            if a.shape != p.shape:
                raise CheckpointError(
                    f"moment {slot}[{name!r}] has shape {a.shape}, expected {p.shape}")
            out[slot][name] = a
    return out


def restore_thresholds(state: dict) -> ThresholdTable | None:
    td = state["thresholds"]
    return None if td is None else ThresholdTable.from_dict(td)
