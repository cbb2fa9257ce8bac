"""Command-line entry point: simulate, fit, transform, evaluate, export.

Every command writes into ``--out`` and exits 0 only after all requested
files exist.  Failures print one JSON line to stderr, e.g.::

    {"command": "fit", "error": "ValidationError", "message": "..."}

and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import dumps, load_fit, save_fit
from .data import FORMATS, GENERATORS, gen_poisson_noise, load_matrix, save_matrix, write_dense_csv
from .evaluate import UNITS, feature_partition, stratify, waic
from .inference import FitResult, TrainConfig, fit, transform_new
from .model import ModelConfig

log = logging.getLogger("spenc")

# flag -> (section, field)
_OVERRIDES = {
    "seed": ("train", "seed"),
    "epochs": ("train", "epochs"),
    "lr": ("train", "learning_rate"),
    "batch_size": ("train", "batch_size"),
    "mc_samples": ("train", "mc_samples"),
    "k": ("model", "n_factors"),
    "link": ("model", "link"),
    "xi": ("model", "xi_mode"),
}


class CliError(Exception):
    pass


def write_ppm(path, matrix: np.ndarray) -> None:
    """Binary P6 greyscale heatmap, one grey level per cell scaled to the max."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    top = m.max() if m.size else 0.0
    level = np.zeros(m.shape) if top <= 0 else np.clip(m, 0, None) / top
    grey = np.round(level * 255).astype(np.uint8)
    rgb = np.repeat(grey[:, :, None], 3, axis=2)
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def round_floats(obj):
    """Recursively round floats to 9 significant digits."""
    if isinstance(obj, float):
        return float(f"{obj:.9g}")
    if isinstance(obj, dict):
        return {k: round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v) for v in obj]
    return obj


def _write_json(path, doc) -> None:
    Path(path).write_text(dumps(round_floats(doc)), encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    return load_matrix(args.data, args.format)


def build_configs(args) -> tuple[ModelConfig, TrainConfig]:
    """Defaults, then the JSON config file, then explicit flags."""
    sections = {"model": {}, "train": {}}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"{args.config}: invalid JSON at line {exc.lineno}") from None
        if not isinstance(doc, dict):
            raise CliError(f"{args.config}: expected a JSON object")
        known = {"model": {f.name for f in fields(ModelConfig)}, "train": {f.name for f in fields(TrainConfig)}}
        for key, value in doc.items():
            if key in sections and isinstance(value, dict):
                for sub, v in value.items():
                    if sub not in known[key]:
                        raise CliError(f"{args.config}: unknown {key} option {sub!r}")
                    sections[key][sub] = v
            elif key in known["model"]:
                sections["model"][key] = value
            elif key in known["train"]:
                sections["train"][key] = value
            else:
                raise CliError(f"{args.config}: unknown option {key!r}")
    for flag, (section, name) in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            sections[section][name] = value
    return ModelConfig(**sections["model"]), TrainConfig(**sections["train"])


def export_fit(result: FitResult, out: Path, heatmaps: bool) -> list[Path]:
    paths = {
        "alpha": out / "alpha.csv",
        "alpha_sd": out / "alpha_sd.csv",
        "beta": out / "beta.csv",
        "phi": out / "phi.csv",
        "elbo": out / "elbo.csv",
    }
    write_dense_csv(paths["alpha"], result.alpha_mean)
    write_dense_csv(paths["alpha_sd"], result.alpha_sd)
    write_dense_csv(paths["beta"], result.B_mean)
    write_dense_csv(paths["phi"], np.column_stack([result.phi_mean, result.phi_sd]), header=["mean", "sd"])
    trace = np.array(result.state.trace, dtype=np.float64).reshape(-1, 2)
    with open(paths["elbo"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,value\n")
        for step, value in trace:
            fh.write(f"{int(step)},{value:.9g}\n")
    written = list(paths.values())
    if heatmaps:
        for name, mat in (("alpha.ppm", result.alpha_mean), ("beta.ppm", result.B_mean)):
            write_ppm(out / name, mat)
            written.append(out / name)
    return written


def cmd_simulate(args) -> list[Path]:
    out = _out_dir(args)
    if args.kind == "noise":
        Y, truth = gen_poisson_noise(args.rows, args.cols, args.rate, seed=args.seed)
    else:
        if args.cols < 3:
            raise CliError(f"{args.kind} data needs at least 3 columns, got {args.cols}")
        Y, truth = GENERATORS[args.kind](args.rows, args.cols, seed=args.seed)
    save_matrix(Y, out / "Y.mtx")
    _write_json(out / "truth.json", truth.to_json(include_arrays=args.truth_arrays))
    return [out / "Y.mtx", out / "truth.json"]


def cmd_fit(args) -> list[Path]:
    model_config, train_config = build_configs(args)
    Y = _load(args)
    out = _out_dir(args)
    result = fit(Y, model_config, train_config)
    save_fit(result, out / "fit.json")
    return [out / "fit.json", *export_fit(result, out, args.heatmaps)]


def cmd_transform(args) -> list[Path]:
    result = load_fit(args.fit)
    Y = _load(args)
    if Y.n_cols != result.n_items:
        raise CliError(f"column count mismatch: expected I={result.n_items} items, got {Y.n_cols}")
    out = _out_dir(args)
    theta = transform_new(result, Y, args.xi)
    path = out / "theta.csv"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(f"theta_{k}" for k in range(result.n_factors)) + "\n")
        for row in theta:
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")
    return [path]


def _parse_quantiles(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError(f"cannot parse quantiles {text!r}") from None


def cmd_evaluate(args) -> list[Path]:
    if not (args.waic or args.partition or args.stratify):
        raise CliError("nothing to do: pass at least one of --waic, --partition, --stratify")
    result = load_fit(args.fit)
    out = _out_dir(args)
    written = []
    Y = None
    if args.waic or args.stratify:
        Y = _load(args)
        if Y.n_cols != result.n_items:
            raise CliError(f"column count mismatch: expected I={result.n_items} items, got {Y.n_cols}")
    if args.waic:
        report = waic(result, Y, S=args.draws, unit=args.waic_unit)
        _write_json(out / "waic.json", report.to_json())
        written.append(out / "waic.json")
    if args.partition:
        part = feature_partition(result, args.gate_threshold)
        doc = part.to_json()
        doc["phi_mean"] = [float(v) for v in result.phi_mean]
        _write_json(out / "partition.json", doc)
        written.append(out / "partition.json")
    if args.stratify:
        try:
            k = int(args.stratify[0])
        except ValueError:
            raise CliError(f"factor index must be an integer, got {args.stratify[0]!r}") from None
        theta = transform_new(result, Y)
        strat = stratify(result, theta, k, _parse_quantiles(args.stratify[1]),
                         support_threshold=args.support_threshold)
        doc = strat.to_json()
        doc["xi_mode"] = result.xi_mode
        _write_json(out / "rules.json", doc)
        written.append(out / "rules.json")
    return written


def cmd_export(args) -> list[Path]:
    result = load_fit(args.fit)
    return export_fit(result, _out_dir(args), args.heatmaps)


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spenc", description="Sparsely encoded hierarchical Poisson factorization")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, required=True):
        sp.add_argument("--data", required=required, help="count matrix file")
        sp.add_argument("--format", choices=FORMATS, help="input format (inferred when omitted)")

    s = sub.add_parser("simulate", help="generate a synthetic count matrix")
    s.add_argument("--kind", choices=sorted(GENERATORS), required=True)
    s.add_argument("--rows", type=_positive_int, default=5000)
    s.add_argument("--cols", type=_positive_int, default=30)
    s.add_argument("--rate", type=float, default=1.0, help="Poisson rate for --kind noise")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--truth-arrays", action="store_true", help="include true decoder and representations")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit the model by minibatch ADVI")
    data_args(f)
    f.add_argument("--config", help="JSON config with optional 'model' and 'train' sections")
    f.add_argument("--seed", type=int)
    f.add_argument("--epochs", type=_positive_int)
    f.add_argument("--lr", type=float)
    f.add_argument("--batch-size", type=_positive_int)
    f.add_argument("--mc-samples", type=_positive_int)
    f.add_argument("--k", type=_positive_int)
    f.add_argument("--link", choices=["identity", "log"])
    f.add_argument("--xi", choices=["unit", "overdispersed"])
    f.add_argument("--heatmaps", action="store_true", help="also write alpha.ppm and beta.ppm")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("transform", help="encode new rows with a fitted model")
    t.add_argument("--fit", required=True)
    data_args(t)
    t.add_argument("--xi", choices=["unit", "overdispersed"], help="override the fit's user-scale mode")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_transform)

    e = sub.add_parser("evaluate", help="WAIC, feature partition and count rules")
    e.add_argument("--fit", required=True)
    data_args(e, required=False)
    e.add_argument("--waic", action="store_true")
    e.add_argument("--waic-unit", choices=UNITS, default="entry")
    e.add_argument("--draws", type=_positive_int, default=200, help="posterior draws for WAIC")
    e.add_argument("--partition", action="store_true")
    e.add_argument("--gate-threshold", type=float, default=0.5)
    e.add_argument("--stratify", nargs=2, metavar=("K", "Q1,Q2"), help="factor index and quantile list")
    e.add_argument("--support-threshold", type=float, default=0.01)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export", help="rewrite CSV and heatmap files from fit.json")
    x.add_argument("--fit", required=True)
    x.add_argument("--heatmaps", action="store_true")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def _thread_limit():
    value = os.environ.get("SPENC_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise CliError(f"SPENC_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise CliError(f"SPENC_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command in ("evaluate",) and (args.waic or args.stratify) and not args.data:
        parser.error("--data is required for --waic and --stratify")
    try:
        with _thread_limit():
            written = args.func(args)
    except Exception as exc:  # noqa: BLE001, reported as one machine-readable line
        record = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1
    for path in written:
        log.info("wrote %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
