"""Command-line entry point: generate data, train, evaluate, ablate, and
export embeddings as reproducible on-disk artifacts.

Every artifact directory receives the fully resolved configuration, and every
file written here is deterministic for a given config and seed, so re-running
a command over the stored config reproduces the artifact byte for byte.
"""

from __future__ import annotations

import os


def _cap_threads() -> None:
    """Honor PROTO_OSR_THREADS before the first numpy import loads a BLAS."""
    n = os.environ.get("PROTO_OSR_THREADS", "").strip()
    if n:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, n)


_cap_threads()

import argparse  # noqa: E402
import copy  # noqa: E402
import dataclasses  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402

import numpy as np  # noqa: E402

from . import checkpoint as ckpt  # noqa: E402
from . import openset  # noqa: E402
from .rfdata import ImpairmentRanges, build_dataset, make_fleet  # noqa: E402
from .trainer import (TrainConfig, fit, report_rows_csv,  # noqa: E402
                      report_summary, run_trials)

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit status 2."""


class RuntimeFailure(Exception):
    """Valid request that failed while running; maps to exit status 1."""


DEFAULT_CONFIG = {
    "dataset": {
        "n_known": 10,
        "n_unknown": 8,
        "fleet_seed": 11,
        "seed": 1,
        "bursts_per_device": 20,
        "slices_per_burst": 10,
        "slice_len": 1024,
        "snr_db": 20.0,
        "include_transients": False,
        "ranges": None,          # null -> library defaults
    },
    # an augment spec rides along even though the default objective ignores
    # it (lambda_cons = 0), so consistency ablations work without extra keys
    "train": {**TrainConfig().to_dict(),
              "augment": {"rotate": True, "permute": True,
                          "phases": [0.0, 1.5707963267948966,
                                     3.141592653589793, 4.71238898038469],
                          "segments_min": 4, "segments_max": 8}},
    "checkpoint": None,          # consumed by evaluate / export-embeddings
    "ablate": {
        "variants": ["gcpl", "consistency", "online", "ipl"],
        "lambda_cons": [0.0, 0.1, 0.5, 1.0],
        "alpha": [0.1, 0.2, 0.3],
    },
}


# --------------------------------------------------------------------------
# config plumbing


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _set_dotted(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            node[part] = nxt
        node = nxt
    node[parts[-1]] = value


def _parse_override(text: str):
    if "=" not in text:
        raise UsageError(f"--set needs KEY=VALUE, got {text!r}")
    key, _, raw = text.partition("=")
    key = key.strip()
    if not key:
        raise UsageError(f"--set needs a non-empty key, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw          # bare words pass through as strings
    return key, value


def load_config(path: str | None, overrides: list[str],
                seed: int | None, seed_key: str) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        cfg = _deep_merge(cfg, user)
    for item in overrides:
        key, value = _parse_override(item)
        _set_dotted(cfg, key, value)
    if seed is not None:
        _set_dotted(cfg, seed_key, seed)
    return cfg


def dataset_from_config(cfg: dict):
    d = cfg["dataset"]
    try:
        ranges = ImpairmentRanges() if d.get("ranges") is None else ImpairmentRanges(
            **{k: tuple(v) if isinstance(v, (list, tuple)) else v
               for k, v in d["ranges"].items()})
        fleet = make_fleet(int(d["n_known"]), int(d["n_unknown"]),
                           seed=int(d["fleet_seed"]), ranges=ranges)
        snr = d.get("snr_db")
        return build_dataset(fleet, int(d["bursts_per_device"]),
                             int(d["slices_per_burst"]), int(d["slice_len"]),
                             None if snr is None else float(snr),
                             seed=int(d["seed"]),
                             include_transients=bool(d.get("include_transients",
                                                           False)))
    except (KeyError, TypeError) as exc:
        raise UsageError(f"dataset config: {exc!r}") from None
    except ValueError as exc:
        raise UsageError(f"dataset config: {exc}") from None


def train_config_from(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except (KeyError, TypeError) as exc:
        raise UsageError(f"train config: {exc!r}") from None
    except ValueError as exc:
        raise UsageError(f"train config: {exc}") from None


def prepare_out_dir(path: str, force: bool) -> str:
    if os.path.isfile(path):
        raise UsageError(f"output path {path} is a file")
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(
            f"output directory {path} is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path: str, payload: dict) -> None:
    text = json.dumps(payload, sort_keys=True, indent=1)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_resolved_config(out: str, cfg: dict) -> None:
    _write_json(os.path.join(out, "config.json"), cfg)


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv(rows: list[dict], columns: tuple) -> str:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_csv_cell(row.get(c)) for c in columns))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# verbs


def cmd_generate(cfg: dict, out: str) -> None:
    ds = dataset_from_config(cfg)
    _write_resolved_config(out, cfg)
    _write_json(os.path.join(out, "manifest.json"), ds.manifest)
    stacked = np.stack([b.samples for b in ds.bursts])
    np.save(os.path.join(out, "bursts.npy"), stacked)
    for name in ("train_x", "train_y", "val_x", "val_y", "test_known_x",
                 "test_known_y", "test_unknown_x"):
        np.save(os.path.join(out, f"{name}.npy"), getattr(ds, name))


def cmd_train(cfg: dict, out: str) -> None:
    ds = dataset_from_config(cfg)
    tc = train_config_from(cfg)
    _write_resolved_config(out, cfg)
    if tc.trials > 1:
        trials = run_trials(tc, ds, checkpoint_dir=out)
        payload = {
            "best_seed": trials.best_seed,
            "best_val_accuracy": trials.best_val_accuracy,
            "median_val_accuracy": trials.median_val_accuracy,
            "outcomes": [{"seed": o.seed, "val_accuracy": o.val_accuracy,
                          "checkpoint": f"seed{o.seed}.ckpt.json"}
                         for o in trials.outcomes],
        }
        _write_json(os.path.join(out, "trials.json"), payload)
        for outcome in trials.outcomes:
            _write_text(os.path.join(out, f"report_seed{outcome.seed}.csv"),
                        report_rows_csv(outcome.report))
    else:
        report = fit(tc, ds, checkpoint_path=os.path.join(out,
                                                          "checkpoint.ckpt.json"))
        _write_text(os.path.join(out, "report.csv"), report_rows_csv(report))
        summary = report_summary(report)
        # keep the artifact location-independent: identical runs into
        # different directories must produce identical bytes
        summary["checkpoint_path"] = "checkpoint.ckpt.json"
        _write_json(os.path.join(out, "summary.json"), summary)


METRIC_COLUMNS = ("known_accuracy", "unknown_rejection", "auroc",
                  "n_known", "n_unknown", "kappa")


def _load_eval_model(cfg: dict):
    path = cfg.get("checkpoint")
    if not path:
        raise UsageError(
            "checkpoint: set a checkpoint path in the config or with "
            "--set checkpoint=PATH")
    if not os.path.isfile(path):
        raise RuntimeFailure(f"checkpoint {path} does not exist")
    try:
        state = ckpt.load(path)
        model = ckpt.restore_model(state)
        table = ckpt.restore_thresholds(state)
    except ckpt.CheckpointError as exc:
        raise RuntimeFailure(f"checkpoint {path}: {exc}") from None
    return model, table


def cmd_evaluate(cfg: dict, out: str) -> None:
    model, table = _load_eval_model(cfg)
    if table is None:
        raise RuntimeFailure("checkpoint holds no thresholds; train first")
    ds = dataset_from_config(cfg)
    zk = model.embed_array(ds.test_known_x)
    zu = model.embed_array(ds.test_unknown_x)
    metrics = openset.evaluate(zk, ds.test_known_y, zu,
                               model.params["prototypes"], table)
    _write_resolved_config(out, cfg)
    _write_text(os.path.join(out, "metrics.csv"),
                _csv([metrics.flat()], METRIC_COLUMNS))
    _write_json(os.path.join(out, "confusion.json"), metrics.confusion_dict())


ABLATE_COLUMNS = ("variant", "lambda_cons", "alpha", "final_val_accuracy",
                  "known_accuracy", "unknown_rejection", "auroc")


def _ablate_cells(section: dict) -> list[dict]:
    variants = section.get("variants", DEFAULT_CONFIG["ablate"]["variants"])
    lam = [float(v) for v in section.get("lambda_cons",
                                         DEFAULT_CONFIG["ablate"]["lambda_cons"])]
    alpha = [float(v) for v in section.get("alpha",
                                           DEFAULT_CONFIG["ablate"]["alpha"])]
    cells = []
    for variant in variants:
        if variant == "gcpl":
            cells.append({"variant": "gcpl", "lambda_cons": 0.0, "alpha": 0.0})
        elif variant == "consistency":
            cells.extend({"variant": "consistency", "lambda_cons": v,
                          "alpha": 0.0} for v in lam)
        elif variant == "online":
            cells.extend({"variant": "online", "lambda_cons": 0.0, "alpha": a}
                         for a in alpha)
        elif variant == "ipl":
            cells.extend({"variant": "ipl", "lambda_cons": v, "alpha": a}
                         for v in lam for a in alpha)
        else:
            raise UsageError(f"ablate config: unknown variant {variant!r}")
    return cells


def _cell_config(base: TrainConfig, cell: dict) -> TrainConfig:
    lam, alpha = cell["lambda_cons"], cell["alpha"]
    loss = dataclasses.replace(base.loss, lambda_cons=lam)
    augment = base.augment if lam > 0.0 else None
    if lam > 0.0 and augment is None:
        raise UsageError(
            "ablate config: consistency cells need train.augment set")
    smoothing = "online" if alpha > 0.0 else "none"
    return dataclasses.replace(base, loss=loss, augment=augment,
                               smoothing_mode=smoothing, alpha=alpha)


def cmd_ablate(cfg: dict, out: str) -> None:
    ds = dataset_from_config(cfg)
    base = train_config_from(cfg)
    cells = _ablate_cells(cfg.get("ablate") or {})
    _write_resolved_config(out, cfg)
    rows = []
    for n, cell in enumerate(cells):
        tc = _cell_config(base, cell)
        cell_ckpt = os.path.join(out, f"cell{n:02d}.ckpt.json")
        report = fit(tc, ds, checkpoint_path=cell_ckpt)
        model = ckpt.restore_model(ckpt.load(cell_ckpt))
        zk = model.embed_array(ds.test_known_x)
        zu = model.embed_array(ds.test_unknown_x)
        metrics = openset.evaluate(zk, ds.test_known_y, zu,
                                   model.params["prototypes"], report.thresholds)
        row = dict(cell)
        row["final_val_accuracy"] = report.final_val_accuracy
        row.update({k: metrics.flat()[k]
                    for k in ("known_accuracy", "unknown_rejection", "auroc")})
        rows.append(row)
    _write_text(os.path.join(out, "grid.csv"), _csv(rows, ABLATE_COLUMNS))


def cmd_export_embeddings(cfg: dict, out: str) -> None:
    model, _ = _load_eval_model(cfg)
    ds = dataset_from_config(cfg)
    _write_resolved_config(out, cfg)
    dim = model.params["prototypes"].shape[1]
    columns = ("split", "label") + tuple(f"e{i}" for i in range(dim))
    rows = []
    splits = (("train", ds.train_x, ds.train_y),
              ("val", ds.val_x, ds.val_y),
              ("test_known", ds.test_known_x, ds.test_known_y),
              ("test_unknown", ds.test_unknown_x,
               np.full(ds.test_unknown_x.shape[0], -1)))
    for split, x, y in splits:
        z = model.embed_array(x)
        for i in range(z.shape[0]):
            row = {"split": split, "label": int(y[i])}
            row.update({f"e{j}": float(z[i, j]) for j in range(dim)})
            rows.append(row)
    _write_text(os.path.join(out, "embeddings.csv"), _csv(rows, columns))


# --------------------------------------------------------------------------
# argument plumbing


VERBS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export_embeddings,
}

# --seed is sugar for the verb's primary stream: the dataset draw when
# generating, the training seed everywhere else
_SEED_KEYS = {
    "generate": "dataset.seed",
    "train": "train.seed",
    "evaluate": "train.seed",
    "ablate": "train.seed",
    "export-embeddings": "train.seed",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="proto-osr",
        description="Open-set RF emitter recognition experiments.")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", metavar="PATH",
                       help="JSON experiment config; defaults fill gaps")
        p.add_argument("--out", metavar="DIR", required=True,
                       help="artifact directory")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty directory")
        p.add_argument("--seed", type=int, metavar="N",
                       help="override the run's primary seed")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override a dotted config key (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    def fail(status: int, exc: Exception) -> int:
        print(f"proto-osr {args.verb}: {exc}", file=sys.stderr)
        return status

    try:
        cfg = load_config(args.config, args.overrides, args.seed,
                          _SEED_KEYS[args.verb])
        out = prepare_out_dir(args.out, args.force)
    except UsageError as exc:
        return fail(USAGE_ERROR, exc)
    except OSError as exc:
        return fail(RUNTIME_ERROR, exc)
    try:
        VERBS[args.verb](cfg, out)
    except UsageError as exc:
        # config-shaped problems diagnosed while interpreting the sections
        return fail(USAGE_ERROR, exc)
    except RuntimeFailure as exc:
        return fail(RUNTIME_ERROR, exc)
    except (ValueError, ArithmeticError, OSError) as exc:
        # the run itself broke: calibration, numerics, unwritable artifacts
        return fail(RUNTIME_ERROR, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
