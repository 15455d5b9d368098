"""Command-line frontend: reproducible pipelines over the library modules.

Subcommands map one-to-one onto module operations (train, dump-logits,
fuse, eval-anytime, calibrate, eval-budget, diversity, trace-fusion; smoke
chains them end to end). Every run merges defaults <- config file <- flags
into an effective configuration that is embedded, along with the seed,
format versions, and a build id, in every JSON report. All outputs are
written atomically (temp file + rename). Exit codes: 0 ok, 2 configuration
error, 3 data/parse error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import tempfile
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from . import diversity as diversity_mod
from . import fusion as fusion_mod
from . import inference as inference_mod
from . import model as model_mod
from . import training as training_mod
from .errors import ConfigurationError, DataError, EvexitError

__version__ = "0.1.0"

FORMAT_VERSIONS = {"checkpoint": 1, "logits_store": 1, "schedule": 1, "report": 1}
FUSE_METHODS = ("cdm", "cdm-nobalance", "avg", "wavg", "vote", "dempster", "nn")


def build_id() -> str:
    return os.environ.get("EVEXIT_BUILD_ID", f"evexit-{__version__}")


@contextlib.contextmanager
def atomic_write(path, mode: str = "w"):
    """Write to a temp file in the target directory, rename on success."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".evexit-", suffix=".tmp")
    try:
        encoding = None if "b" in mode else "utf-8"
        with os.fdopen(fd, mode, encoding=encoding, newline="") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


# Per-command defaults. Config-file keys and flag names coincide
# (dashes become underscores); unknown keys are rejected.
_DATASET_DEFAULTS = {
    "dataset": "synth",
    "classes": 10,
    "dim": 16,
    "n_per_class": 200,
    "separation": 3.0,
    "noise": 1.0,
    "data_path": "",
    "images_path": "",
    "labels_path": "",
    "test_fraction": 0.2,
    "validation_fraction": 0.1,
}
_MODEL_DEFAULTS = {"blocks": "64,64,64,64"}
_TRAIN_DEFAULTS = {
    **_DATASET_DEFAULTS, **_MODEL_DEFAULTS,
    "epochs": 40, "batch_size": 64, "learning_rate": 0.08, "momentum": 0.9,
    "loss_mode": "edl", "regularize": False, "tau1": 0.5, "tau2": 1.0,
    "edl_mean_mode": "belief", "lambda1": 1.0,
}

DEFAULTS: dict[str, dict] = {
    "train": {**_TRAIN_DEFAULTS, "seed": 0},
    "dump-logits": {**_DATASET_DEFAULTS, "split": "test", "seed": 0},
    "fuse": {"method": "cdm", "seed": 0},
    "eval-anytime": {"exit": 0, "fusion": False, "seed": 0},
    "calibrate": {"budget": 0.0, "fusion": False, "seed": 0},
    "eval-budget": {"fusion": False, "seed": 0},
    "diversity": {"seed": 0},
    "trace-fusion": {"mode": "balanced", "sample": "", "seed": 0},
    "smoke": {"seed": 0},
}


@dataclass
class RunConfig:
    """Effective configuration of one invocation: defaults overridden by the
    config file, overridden by explicit flags."""

    command: str
    effective: dict

    @property
    def seed(self) -> int:
        return int(self.effective.get("seed", 0))

    def __getitem__(self, key):
        return self.effective[key]


def _coerce(key: str, raw: str, default):
    if isinstance(default, bool):
        if raw in ("on", "true", "1", "yes"):
            return True
        if raw in ("off", "false", "0", "no"):
            return False
        raise ConfigurationError(f"config key {key!r}: expected on/off, got {raw!r}")
    try:
        return type(default)(raw)
    except ValueError as err:
        raise ConfigurationError(f"config key {key!r}: {err}") from err


def read_config_file(path, defaults: dict) -> dict:
    """Flat key=value UTF-8 text; '#' starts a comment; unknown keys rejected."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(
                    f"config {path}: line {lineno} is not key=value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in defaults:
                raise ConfigurationError(
                    f"config {path}: unknown key {key!r} on line {lineno}")
            values[key] = _coerce(key, raw, defaults[key])
    return values


def merge_config(command: str, config_path, flag_values: dict) -> RunConfig:
    defaults = DEFAULTS[command]
    effective = dict(defaults)
    if config_path:
        effective.update(read_config_file(config_path, defaults))
    for key, value in flag_values.items():
        if value is not None:
            effective[key] = value
    return RunConfig(command=command, effective=effective)


def write_report(path, payload: dict, cfg: RunConfig) -> None:
    report = dict(payload)
    report["config"] = dict(cfg.effective)
    report["command"] = cfg.command
    report["seed"] = cfg.seed
    report["format_versions"] = dict(FORMAT_VERSIONS)
    report["build_id"] = build_id()
    with atomic_write(path) as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _onoff(raw: str) -> bool:
    if raw in ("on", "off"):
        return raw == "on"
    raise argparse.ArgumentTypeError(f"expected on|off, got {raw!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line, machine-parseable
        raise ConfigurationError(f"argv: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="evexit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train a multi-exit model")
    common(p)
    p.add_argument("--out", required=True, help="checkpoint path (JSON)")
    p.add_argument("--metrics", default=None, help="per-epoch metrics CSV")
    p.add_argument("--report", default=None, help="training report JSON")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--loss", dest="loss_mode", choices=training_mod.LOSS_MODES,
                   default=None)
    p.add_argument("--regularize", type=_onoff, default=None)
    p.add_argument("--tau1", type=float, default=None)
    p.add_argument("--tau2", type=float, default=None)
    p.add_argument("--blocks", default=None, help="comma-separated block widths")
    p.add_argument("--dataset", choices=("synth", "csv", "idx"), default=None)
    p.add_argument("--data-path", dest="data_path", default=None)
    p.add_argument("--images-path", dest="images_path", default=None)
    p.add_argument("--labels-path", dest="labels_path", default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--n-per-class", dest="n_per_class", type=int, default=None)
    p.add_argument("--separation", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)

    p = sub.add_parser("dump-logits", help="write per-exit logits for a split")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "validation", "test", "all"),
                   default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", choices=("synth", "csv", "idx"), default=None)
    p.add_argument("--data-path", dest="data_path", default=None)
    p.add_argument("--images-path", dest="images_path", default=None)
    p.add_argument("--labels-path", dest="labels_path", default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--n-per-class", dest="n_per_class", type=int, default=None)
    p.add_argument("--separation", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)

    p = sub.add_parser("fuse", help="fuse a logits store, compare to plain exits")
    common(p)
    p.add_argument("--logits", required=True)
    p.add_argument("--method", choices=FUSE_METHODS, default=None)
    p.add_argument("--report", required=True)
    p.add_argument("--csv", default=None)

    p = sub.add_parser("eval-anytime", help="accuracy at one fixed exit")
    common(p)
    p.add_argument("--logits", required=True)
    p.add_argument("--exit", type=int, required=True)
    p.add_argument("--fusion", type=_onoff, default=None)
    p.add_argument("--report", required=True)

    p = sub.add_parser("calibrate", help="derive thresholds for a FLOPs budget")
    common(p)
    p.add_argument("--logits", required=True, help="validation logits store")
    p.add_argument("--model", required=True, help="checkpoint for exit costs")
    p.add_argument("--budget", type=float, required=True)
    p.add_argument("--fusion", type=_onoff, default=None)
    p.add_argument("--out", required=True, help="schedule JSON")

    p = sub.add_parser("eval-budget", help="replay a schedule on a test store")
    common(p)
    p.add_argument("--logits", required=True)
    p.add_argument("--schedule", required=True)
    p.add_argument("--fusion", type=_onoff, default=None)
    p.add_argument("--report", required=True)

    p = sub.add_parser("diversity", help="diversity metrics across exits")
    common(p)
    p.add_argument("--logits", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--report", default=None)

    p = sub.add_parser("trace-fusion", help="step-by-step fusion trace")
    common(p)
    p.add_argument("--logits", required=True)
    p.add_argument("--mode", choices=fusion_mod.MODES, default=None)
    p.add_argument("--sample", default=None, help="sample id (default: first)")
    p.add_argument("--csv", default=None, help="trace CSV for the one sample")
    p.add_argument("--out-dir", dest="out_dir", default=None,
                   help="write one CSV per sample here")
    p.add_argument("--report", default=None)

    p = sub.add_parser("smoke", help="end-to-end pipeline on a tiny config")
    common(p)
    p.add_argument("--workdir", required=True)
    p.add_argument("--report", required=True)
    return parser


def _parse_blocks(raw: str) -> tuple[tuple[int, ...], ...]:
    try:
        widths = tuple((int(w),) for w in raw.split(",") if w.strip())
    except ValueError as err:
        raise ConfigurationError(f"blocks: {err}") from err
    if len(widths) < 2:
        raise ConfigurationError("blocks: need at least two blocks")
    return widths


def _dataset_from_config(cfg: RunConfig) -> data_mod.Dataset:
    kind = cfg["dataset"]
    if kind == "synth":
        return data_mod.gen_gaussian_mixture(
            cfg["classes"], cfg["dim"], cfg["n_per_class"],
            cfg["separation"], cfg["noise"], seed=cfg.seed,
            test_fraction=cfg["test_fraction"],
            validation_fraction=cfg["validation_fraction"])
    if kind == "csv":
        if not cfg["data_path"]:
            raise ConfigurationError("csv dataset needs data_path")
        return data_mod.load_csv(cfg["data_path"], seed=cfg.seed,
                                 test_fraction=cfg["test_fraction"],
                                 validation_fraction=cfg["validation_fraction"])
    if kind == "idx":
        if not (cfg["images_path"] and cfg["labels_path"]):
            raise ConfigurationError("idx dataset needs images_path and labels_path")
        return data_mod.load_idx(cfg["images_path"], cfg["labels_path"],
                                 seed=cfg.seed,
                                 test_fraction=cfg["test_fraction"],
                                 validation_fraction=cfg["validation_fraction"])
    raise ConfigurationError(f"unknown dataset kind {cfg['dataset']!r}")


def _flag_values(args, command: str) -> dict:
    return {key: getattr(args, key, None) for key in DEFAULTS[command]}


def _cmd_train(args) -> int:
    cfg = merge_config("train", args.config, _flag_values(args, "train"))
    dataset = _dataset_from_config(cfg)
    spec = model_mod.ModelSpec(input_dim=dataset.features.shape[1],
                               class_count=dataset.class_count,
                               block_widths=_parse_blocks(cfg["blocks"]))
    net = model_mod.MultiExitModel.build(spec, seed=cfg.seed)
    tc = training_mod.TrainingConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"], momentum=cfg["momentum"],
        seed=cfg.seed, loss_mode=cfg["loss_mode"], regularize=cfg["regularize"],
        tau1=cfg["tau1"], tau2=cfg["tau2"], edl_mean_mode=cfg["edl_mean_mode"],
        lambda1=cfg["lambda1"])
    result = training_mod.fit(net, dataset, tc)
    model_mod.save(result.model, args.out)
    if args.metrics:
        training_mod.write_metrics_csv(result.metrics, args.metrics)
    if args.report:
        final = {m.exit: m.accuracy for m in result.metrics
                 if m.split == "validation" and m.epoch == result.best_epoch}
        write_report(args.report, {
            "best_epoch": result.best_epoch,
            "best_val_accuracy": result.best_val_accuracy,
            "val_accuracy_per_exit": [final[c] for c in sorted(final)],
            "checkpoint": os.path.abspath(args.out)}, cfg)
    return 0


def _cmd_dump_logits(args) -> int:
    cfg = merge_config("dump-logits", args.config,
                       _flag_values(args, "dump-logits"))
    net = model_mod.load(args.model)
    dataset = _dataset_from_config(cfg)
    store = data_mod.store_from_model(net, dataset, cfg["split"])
    data_mod.store_write(store, args.out)
    return 0


def _cmd_fuse(args) -> int:
    cfg = merge_config("fuse", args.config, _flag_values(args, "fuse"))
    store = data_mod.store_read(args.logits)
    method = cfg["method"]
    if method == "nn":
        report = fusion_mod.nn_report(store, seed=cfg.seed)
    else:
        report = fusion_mod.build_report(store, method)
    if args.csv:
        report.write_csv(args.csv)
    write_report(args.report, {
        "method": report.method,
        "exit_count": report.exit_count,
        "sample_count": report.sample_count,
        "plain_accuracy": report.plain_accuracy,
        "fused_accuracy": report.fused_accuracy,
        "degenerate_samples": report.degenerate_samples}, cfg)
    return 0


def _cmd_eval_anytime(args) -> int:
    cfg = merge_config("eval-anytime", args.config,
                       _flag_values(args, "eval-anytime"))
    store = data_mod.store_read(args.logits)
    accuracy = inference_mod.eval_anytime(store, cfg["exit"], cfg["fusion"])
    write_report(args.report, {"accuracy": accuracy, "exit": cfg["exit"],
                               "fusion": cfg["fusion"]}, cfg)
    return 0


def _cmd_calibrate(args) -> int:
    cfg = merge_config("calibrate", args.config, _flag_values(args, "calibrate"))
    store = data_mod.store_read(args.logits)
    net = model_mod.load(args.model)
    costs = model_mod.exit_costs(net)
    schedule = inference_mod.calibrate(store, costs, cfg["budget"], cfg["fusion"])
    schedule.write_json(args.out)
    return 0


def _cmd_eval_budget(args) -> int:
    cfg = merge_config("eval-budget", args.config,
                       _flag_values(args, "eval-budget"))
    store = data_mod.store_read(args.logits)
    schedule = inference_mod.load_schedule(args.schedule)
    result = inference_mod.eval_budgeted(store, schedule, cfg["fusion"])
    write_report(args.report, {
        "accuracy": result.accuracy,
        "mean_flops": result.mean_flops,
        "per_exit_counts": result.per_exit_counts,
        "budget": schedule.budget,
        "fusion": cfg["fusion"]}, cfg)
    return 0


def _cmd_diversity(args) -> int:
    cfg = merge_config("diversity", args.config, _flag_values(args, "diversity"))
    store = data_mod.store_read(args.logits)
    report = diversity_mod.measure_store(store)
    diversity_mod.write_csv(report, args.csv)
    if args.report:
        write_report(args.report, report.to_json(), cfg)
    return 0


def _cmd_trace_fusion(args) -> int:
    cfg = merge_config("trace-fusion", args.config,
                       _flag_values(args, "trace-fusion"))
    store = data_mod.store_read(args.logits)
    records = list(store)
    if not records:
        raise DataError("trace-fusion: empty store")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        for record in records:
            trace = _trace_record(record, cfg["mode"])
            trace.write_csv(os.path.join(args.out_dir, f"trace_{record.id}.csv"))
        return 0
    wanted = cfg["sample"] or records[0].id
    record = next((r for r in records if r.id == wanted), None)
    if record is None:
        raise DataError(f"trace-fusion: sample {wanted!r} not in store")
    trace = _trace_record(record, cfg["mode"])
    if args.csv:
        trace.write_csv(args.csv)
    if args.report:
        write_report(args.report, {"sample": record.id, **trace.to_json()}, cfg)
    return 0


def _trace_record(record, mode: str):
    from .evidential import quantify
    opinions = [quantify(lg) for lg in record.exit_logits]
    return fusion_mod.trace_fusion(opinions, mode)


SMOKE_SETTINGS = {
    "classes": 5, "dim": 8, "n_per_class": 80, "separation": 3.0, "noise": 0.8,
    "blocks": "32,32,32", "epochs": 10, "batch_size": 32, "learning_rate": 0.1,
    "regularize": True,
}


def pipeline_smoke(workdir, seed: int = 0, settings: dict | None = None) -> dict:
    """Run train -> dump-logits -> fuse -> calibrate -> eval-budget on a tiny
    synthetic config, asserting the pipeline-level invariants (exit-1 fusion
    identity, budget clamps, cost bound). Returns the smoke report payload."""
    os.makedirs(workdir, exist_ok=True)
    merged = dict(SMOKE_SETTINGS)
    merged.update(settings or {})
    paths = {name: os.path.join(workdir, name) for name in (
        "model.json", "val.jsonl", "test.jsonl", "fuse.json",
        "schedule_mid.json", "budget_mid.json")}

    train_args = ["train", "--seed", str(seed), "--out", paths["model.json"]]
    for key in ("classes", "dim", "n_per_class", "separation", "noise",
                "blocks", "epochs", "batch_size", "learning_rate"):
        flag = "--" + key.replace("_", "-")
        train_args += [flag, str(merged[key])]
    train_args += ["--regularize", "on" if merged["regularize"] else "off"]
    _run_checked(train_args)

    data_args = ["--seed", str(seed)]
    for key in ("classes", "dim", "n_per_class", "separation", "noise"):
        data_args += ["--" + key.replace("_", "-"), str(merged[key])]
    _run_checked(["dump-logits", "--model", paths["model.json"], "--split",
                  "validation", "--out", paths["val.jsonl"], *data_args])
    _run_checked(["dump-logits", "--model", paths["model.json"], "--split",
                  "test", "--out", paths["test.jsonl"], *data_args])

    _run_checked(["fuse", "--logits", paths["test.jsonl"], "--method", "cdm",
                  "--report", paths["fuse.json"], "--seed", str(seed)])
    with open(paths["fuse.json"], encoding="utf-8") as fh:
        fuse_report = json.load(fh)
    if abs(fuse_report["fused_accuracy"][0] - fuse_report["plain_accuracy"][0]) > 0:
        raise EvexitError("smoke: exit-1 accuracy changed under fusion")

    net = model_mod.load(paths["model.json"])
    costs = model_mod.exit_costs(net)
    val_store = data_mod.store_read(paths["val.jsonl"])
    test_store = data_mod.store_read(paths["test.jsonl"])

    checks = {}
    for tag, budget in (("low", costs[0]), ("mid", (costs[0] + costs[-1]) / 2),
                        ("high", costs[-1])):
        schedule = inference_mod.calibrate(val_store, costs, budget)
        result = inference_mod.eval_budgeted(test_store, schedule)
        checks[tag] = {"budget": budget, "accuracy": result.accuracy,
                       "mean_flops": result.mean_flops,
                       "per_exit_counts": result.per_exit_counts}
        if result.mean_flops > 1.05 * budget:
            raise EvexitError(f"smoke: realized cost exceeds budget at {tag}")
        if tag == "mid":
            schedule.write_json(paths["schedule_mid.json"])
            _run_checked(["eval-budget", "--logits", paths["test.jsonl"],
                          "--schedule", paths["schedule_mid.json"],
                          "--report", paths["budget_mid.json"],
                          "--seed", str(seed)])
    anytime_first = inference_mod.eval_anytime(test_store, 1)
    anytime_last = inference_mod.eval_anytime(test_store, len(costs))
    if checks["high"]["accuracy"] != anytime_last:
        raise EvexitError("smoke: full-budget accuracy != last-exit anytime")
    if checks["low"]["accuracy"] != anytime_first:
        raise EvexitError("smoke: minimal-budget accuracy != first-exit anytime")
    if checks["low"]["mean_flops"] != costs[0]:
        raise EvexitError("smoke: minimal-budget cost != first exit cost")

    return {"settings": merged, "paths": {k: os.path.abspath(v)
                                          for k, v in paths.items()},
            "fuse_accuracy": fuse_report["fused_accuracy"],
            "plain_accuracy": fuse_report["plain_accuracy"],
            "anytime": {"first": anytime_first, "last": anytime_last},
            "budgeted": checks}


def _run_checked(argv: list[str]) -> None:
    code = dispatch(argv)
    if code != 0:
        raise EvexitError(f"smoke: stage {argv[0]} failed with code {code}")


def _cmd_smoke(args) -> int:
    cfg = merge_config("smoke", args.config, _flag_values(args, "smoke"))
    payload = pipeline_smoke(args.workdir, seed=cfg.seed)
    write_report(args.report, payload, cfg)
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "dump-logits": _cmd_dump_logits,
    "fuse": _cmd_fuse,
    "eval-anytime": _cmd_eval_anytime,
    "calibrate": _cmd_calibrate,
    "eval-budget": _cmd_eval_budget,
    "diversity": _cmd_diversity,
    "trace-fusion": _cmd_trace_fusion,
    "smoke": _cmd_smoke,
}


def dispatch(argv) -> int:
    """Parse argv and run one subcommand; returns the process exit code."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    return _HANDLERS[args.command](args)


def main(argv=None) -> int:
    try:
        code = dispatch(sys.argv[1:] if argv is None else argv)
    except EvexitError as err:
        kind = {2: "config", 3: "data", 4: "numeric"}.get(err.exit_code, "error")
        print(f"evexit: {kind}: {err}", file=sys.stderr)
        return err.exit_code
    except OSError as err:
        print(f"evexit: data: {err}", file=sys.stderr)
        return 3
    return code


if __name__ == "__main__":
    sys.exit(main())
