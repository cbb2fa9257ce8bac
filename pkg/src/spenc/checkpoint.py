"""JSON checkpoints for variational states and fit results.

Float arrays are stored as ``{"dtype": "<f8", "shape": [...], "data": base64}``
with little-endian bytes, so a round trip is exact.  Configuration scalars
keep Python's shortest round-trip repr.  Keys are sorted so identical fits
give byte-identical files.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .inference import FitResult, OptimizerState, ParamLayout, TrainConfig, VariationalState
from .model import ModelConfig

FORMAT = "spenc-fit"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_array(arr) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"dtype": "<f8", "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(doc: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(doc["data"], validate=True)
        arr = np.frombuffer(raw, dtype=np.dtype(doc["dtype"])).astype(np.float64)
        return arr.reshape(doc["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed array block: {exc}") from exc


def state_to_json(state: VariationalState) -> dict:
    o = state.opt
    steps = [t for t, _ in state.trace]
    values = [v for _, v in state.trace]
    return {
        "n_items": state.layout.n_items,
        "n_factors": state.layout.n_factors,
        "blocks": state.layout.to_json(),
        "params": encode_array(o.params),
        "adam_m": encode_array(o.m),
        "adam_v": encode_array(o.v),
        "slow": encode_array(o.slow),
        "t": int(o.t),
        "trace_steps": [int(t) for t in steps],
        "trace_values": encode_array(np.asarray(values, dtype=np.float64)),
    }


def state_from_json(doc: dict) -> VariationalState:
    layout = ParamLayout(int(doc["n_items"]), int(doc["n_factors"]))
    if doc.get("blocks") is not None and doc["blocks"] != layout.to_json():
        raise CheckpointError("parameter block layout does not match this version")
    opt = OptimizerState(decode_array(doc["params"]), decode_array(doc["adam_m"]),
                         decode_array(doc["adam_v"]), decode_array(doc["slow"]), int(doc["t"]))
    if opt.params.size != 2 * layout.size:
        raise CheckpointError(f"expected {2 * layout.size} parameters, got {opt.params.size}")
    values = decode_array(doc["trace_values"]).tolist()
    trace = list(zip([int(t) for t in doc["trace_steps"]], values))
    return VariationalState(layout, opt, trace)


_SUMMARIES = ("alpha_mean", "alpha_sd", "B_mean", "B_sd", "phi_mean", "phi_sd", "gate_mean", "eta")


def fit_to_json(result: FitResult) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "model_config": result.model_config.to_json(),
        "train_config": result.train_config.to_json(),
        "xi_mode": result.xi_mode,
        "mean_row_sum": encode_array(np.array([result.mean_row_sum])),
        "n_users": int(result.n_users),
        "state": state_to_json(result.state),
        "summaries": {k: encode_array(getattr(result, k)) for k in _SUMMARIES},
    }


def fit_from_json(doc: dict) -> FitResult:
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"not a fit checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        summaries = {k: decode_array(doc["summaries"][k]) for k in _SUMMARIES}
        return FitResult(
            **summaries,
            xi_mode=doc["xi_mode"],
            mean_row_sum=float(decode_array(doc["mean_row_sum"])[0]),
            state=state_from_json(doc["state"]),
            model_config=ModelConfig(**doc["model_config"]),
            train_config=TrainConfig(**doc["train_config"]),
            n_users=int(doc["n_users"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing field {exc}") from exc


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save_fit(result: FitResult, path) -> None:
    Path(path).write_text(dumps(fit_to_json(result)), encoding="utf-8")


def load_fit(path) -> FitResult:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: invalid JSON at line {exc.lineno}") from exc
    return fit_from_json(doc)
