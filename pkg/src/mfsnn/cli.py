"""Batch command line: generate, train, eval, finetune, sweep-ratio, ablate, energy.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import datakit, energy, training
from .encoder import EncoderConfig
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .spiking import LifParams
from .training import TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3, 4


class ValidationError(Exception):
    pass


def _floats(s):
    return [float(v) for v in str(s).split(",") if v.strip() != ""] if not isinstance(s, list) else [float(v) for v in s]


def _ints(s):
    return [int(v) for v in str(s).split(",") if v.strip() != ""] if not isinstance(s, list) else [int(v) for v in s]


def _bool(s):
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes"):
        return True
    if str(s).lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {s}")


# documented keys accepted in config files and --set overrides
CONFIG_KEYS = {
    # model
    "kind": str, "n_subencoders": int, "t_out": int, "kernel_size": int, "dilation": int,
    "bottleneck_ratio": int, "tau_m": float, "v_threshold": float, "v_reset": float,
    "surrogate_alpha": float, "t_window": int, "mlp_hidden": int, "mlp_layers": int,
    # training
    "epochs": int, "batch_size": int, "lr_max": float, "lr_min": float, "seed": int,
    "finetune_scope": str, "finetune_epoch_fraction": float, "finetune_lr": float,
    # protocol
    "day": int, "train_day": int, "test_days": _ints, "rho": float, "ratios": _floats,
    "seeds": _ints, "include_classifier": _bool,
}

DEFAULTS = {
    "kind": "mfsnn", "n_subencoders": 16, "t_out": 10, "kernel_size": 3, "dilation": 2,
    "bottleneck_ratio": 4, "tau_m": 2.0, "v_threshold": 1.0, "v_reset": 0.0,
    "surrogate_alpha": 2.0, "t_window": 20, "mlp_hidden": 256, "mlp_layers": 2,
    "epochs": 50, "batch_size": 32, "lr_max": 0.01, "lr_min": 0.0001, "seed": 0,
    "finetune_scope": "classifier_only", "finetune_epoch_fraction": 0.2, "finetune_lr": None,
    "day": 0, "train_day": 0, "test_days": None, "rho": 0.078,
    "ratios": list(training.DEFAULT_RATIOS), "seeds": None, "include_classifier": False,
}


def resolve_settings(args) -> dict:
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config file {args.config}: {exc}")
        if not isinstance(loaded, dict):
            raise ValidationError("config file must hold a JSON object")
        for k, v in loaded.items():
            settings[k] = _coerce(k, v)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        settings[k.strip()] = _coerce(k.strip(), v)
    for k in ("seed", "day", "rho", "ratios", "seeds", "train_day", "test_days", "kind", "epochs"):
        v = getattr(args, k, None)
        if v is not None:
            settings[k] = _coerce(k, v)
    if getattr(args, "include_classifier", False):
        settings["include_classifier"] = True
    return settings


def _coerce(key, value):
    if key not in CONFIG_KEYS:
        raise ValidationError(f"unknown config key {key!r}")
    if value is None:
        return None
    try:
        return CONFIG_KEYS[key](value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad value for {key!r}: {exc}")


def model_config_for(settings: dict, ds: datakit.TrialSet) -> ModelConfig:
    try:
        enc = EncoderConfig(n_channels=ds.n_channels, n_subencoders=settings["n_subencoders"],
                            t_in=ds.n_time, t_out=settings["t_out"],
                            kernel_size=settings["kernel_size"], dilation=settings["dilation"],
                            bottleneck_ratio=settings["bottleneck_ratio"])
        lif = LifParams(settings["tau_m"], settings["v_threshold"], settings["v_reset"],
                        settings["surrogate_alpha"], settings["t_window"])
        return ModelConfig(encoder=enc, lif=lif, n_classes=ds.n_classes, kind=settings["kind"],
                           mlp_hidden=settings["mlp_hidden"], mlp_layers=settings["mlp_layers"])
    except ValueError as exc:
        raise ValidationError(str(exc))


def train_config_for(settings: dict, seed: int | None = None) -> TrainConfig:
    keys = {f.name for f in fields(TrainConfig)}
    kw = {k: settings[k] for k in keys}
    if seed is not None:
        kw["seed"] = seed
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise ValidationError(str(exc))


# -- output helpers --------------------------------------------------------

class Outputs:
    """Collects files and writes each with temp-file + rename once the command succeeds."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.files: dict[str, str] = {}

    def json(self, name, obj):
        self.files[name] = json.dumps(obj, indent=2, sort_keys=True) + "\n"

    def csv(self, name, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
        self.files[name] = buf.getvalue()

    def text(self, name, s):
        self.files[name] = s

    def commit(self, log_line: str):
        self.dir.mkdir(parents=True, exist_ok=True)
        for name, content in self.files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.dir)
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                f.write(content)
            os.replace(tmp, self.dir / name)
        with open(self.dir / "run.log", "a", encoding="utf-8") as f:
            f.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {log_line}\n")


def _load_dataset(path) -> datakit.TrialSet:
    try:
        return datakit.load_trialset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationError(f"dataset {path}: {exc}")


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"checkpoint {path}: {exc}")


def _day_set(ds, day):
    try:
        return ds.day(day)
    except KeyError as exc:
        raise ValidationError(str(exc.args[0]))


# -- commands --------------------------------------------------------------

def cmd_generate(args) -> str:
    try:
        ts = datakit.make_preset(args.preset, seed=args.seed, drift=not args.no_drift,
                                 trials_per_day=args.trials_per_day, n_days=args.days)
    except ValueError as exc:
        raise ValidationError(str(exc))
    datakit.save_trialset(ts, args.out)
    return (f"wrote {args.out}: preset={args.preset} trials={len(ts)} channels={ts.n_channels} "
            f"bins={ts.n_time} classes={ts.n_classes} days={len(ts.days)}")


def cmd_train(args) -> str:
    s = resolve_settings(args)
    ds = _load_dataset(args.dataset)
    mcfg = model_config_for(s, ds)
    tcfg = train_config_for(s)
    _day_set(ds, s["day"])
    train_set, test_set = datakit.split_single_day(ds, s["day"], 0.8, seed=tcfg.seed)
    model = build_model(mcfg, seed=tcfg.seed)
    model, report = training.train(model, train_set, tcfg)
    out = Outputs(args.out)
    out.json("train_report.json", dict(report.to_dict(), effective_config=s,
                                       n_train=len(train_set), n_test=len(test_set)))
    save_checkpoint(model, Path(args.out) / "model.ckpt",
                    extra={"day": s["day"], "split_seed": tcfg.seed, "effective_config": s})
    out.commit(f"train wall_clock_s={report.wall_clock_s:.2f}")
    return (f"trained {mcfg.kind} on day {s['day']} ({len(train_set)} trials): "
            f"final loss {report.epoch_loss[-1]:.4f}, train acc {report.epoch_accuracy[-1]:.3f}")


def cmd_eval(args) -> str:
    model, extra = _load_model(args.checkpoint)
    ds = _load_dataset(args.dataset)
    s = resolve_settings(args)
    day = args.day if args.day is not None else extra.get("day", s["day"])
    split_seed = extra.get("split_seed", s["seed"])
    if args.split == "test":
        _day_set(ds, day)
        _, eval_set = datakit.split_single_day(ds, day, 0.8, seed=split_seed)
    else:
        eval_set = _day_set(ds, day)
    try:
        acc, conf = training.evaluate(model, eval_set)
    except ValueError as exc:
        raise ValidationError(str(exc))
    out = Outputs(args.out)
    out.json("eval_report.json", {"accuracy": acc, "confusion": conf.tolist(), "day": day,
                                  "split": args.split, "n_trials": len(eval_set),
                                  "effective_config": s, "checkpoint_config": model.config.to_dict()})
    out.commit("eval")
    return f"accuracy {acc:.4f} on day {day} ({args.split}, {len(eval_set)} trials)"


def cmd_finetune(args) -> str:
    model, extra = _load_model(args.checkpoint)
    ds = _load_dataset(args.dataset)
    s = resolve_settings(args)
    tcfg = train_config_for(s)
    day_set = _day_set(ds, s["day"])
    rho = s["rho"]
    if not 0 <= rho < 1:
        raise ValidationError("rho must lie in [0, 1)")
    if rho > 0:
        ft, ev = datakit.finetune_subset(day_set, rho, seed=tcfg.seed)
        _, rep = training.finetune(model, ft, tcfg)
    else:
        ft, ev, rep = None, day_set, training.RunReport()
    acc, conf = training.evaluate(model, ev)
    out = Outputs(args.out)
    out.json("finetune_report.json", dict(rep.to_dict(), test_accuracy=acc, confusion=conf.tolist(),
                                          rho=rho, day=s["day"], n_finetune=0 if ft is None else len(ft),
                                          n_eval=len(ev), effective_config=s))
    save_checkpoint(model, Path(args.out) / "model.ckpt", extra=dict(extra, finetuned_day=s["day"], rho=rho))
    out.commit("finetune")
    return f"fine-tuned on {0 if ft is None else len(ft)} trials of day {s['day']}: accuracy {acc:.4f}"


def _test_days(s, ds):
    days = s["test_days"]
    if days is None:
        days = [d for d in ds.days if d != s["train_day"]][:3]
    if not days:
        raise ValidationError("no test days available")
    for d in [s["train_day"]] + list(days):
        _day_set(ds, d)
    return list(days)


def cmd_sweep_ratio(args) -> str:
    s = resolve_settings(args)
    ds = _load_dataset(args.dataset)
    ratios = s["ratios"]
    if ratios != sorted(ratios) or any(not 0 <= r < 1 for r in ratios):
        raise ValidationError("ratios must be sorted and lie in [0, 1)")
    test_days = _test_days(s, ds)
    seeds = s["seeds"] or [s["seed"]]
    pretrained = None
    if args.checkpoint:
        pretrained, _ = _load_model(args.checkpoint)
        mcfg = pretrained.config
    else:
        mcfg = model_config_for(s, ds)
    rows = []
    for seed in seeds:
        tcfg = train_config_for(s, seed)
        rows += training.ratio_sweep(ds, s["train_day"], test_days, ratios, tcfg, mcfg, pretrained)
    out = Outputs(args.out)
    out.json("sweep.json", {"rows": rows, "test_days": test_days, "effective_config": s})
    out.csv("sweep.csv", ["ratio", "seed", "accuracy"], [(r["ratio"], r["seed"], r["accuracy"]) for r in rows])
    out.commit("sweep-ratio")
    return "ratio sweep: " + ", ".join(f"{r['ratio']:g}->{r['accuracy']:.3f}" for r in rows)


def cmd_ablate(args) -> str:
    s = resolve_settings(args)
    ds = _load_dataset(args.dataset)
    mcfg = model_config_for(s, ds)
    seeds = s["seeds"] or [s["seed"]]
    test_days = _test_days(s, ds) if len(ds.days) > 1 else []
    reports = training.ablation_suite(mcfg, ds, train_config_for(s), seeds,
                                      train_day=s["train_day"], test_days=test_days, rho=s["rho"])
    out = Outputs(args.out)
    out.json("ablation.json", {"variants": {k: r.to_dict() for k, r in reports.items()},
                               "effective_config": s})
    out.csv("ablation.csv", ["variant", "seed", "accuracy"],
            [(k, seed, acc) for k, r in reports.items()
             for seed, acc in zip(r.per_day["seeds"], r.per_day["accuracy"])])
    out.commit("ablate")
    return "ablation: " + ", ".join(f"{k} {r.per_day['mean']:.3f}+-{r.per_day['std']:.3f}"
                                    for k, r in reports.items())


def cmd_energy(args) -> str:
    model, _ = _load_model(args.checkpoint)
    s = resolve_settings(args)
    if model.config.kind != "mfsnn":
        raise ValidationError("energy needs an mfsnn checkpoint")
    ds = _load_dataset(args.dataset)
    if args.day is not None:
        ds = _day_set(ds, args.day)
    rates = energy.measure_rates(model, ds)
    rep = energy.energy_report(model.config, rates, model.config.lif.t_window,
                               include_classifier=s["include_classifier"])
    out = Outputs(args.out)
    out.json("energy.json", dict(rep.to_dict(), comparison={
        "mfsnn_pj": rep.e_snn_pj, "mfann_pj": rep.e_ann_pj,
        "reduction_fraction": rep.reduction_fraction}, effective_config=s))
    out.text("energy.csv", rep.to_csv())
    out.commit("energy")
    return (f"E_MFSNN {rep.e_snn_pj:.1f} pJ vs E_MFANN {rep.e_ann_pj:.1f} pJ "
            f"(reduction {100 * rep.reduction_fraction:.1f}%)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfsnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True, checkpoint=False):
        if dataset:
            sp.add_argument("--dataset", required=True)
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("generate")
    g.add_argument("--preset", required=True, choices=sorted(datakit.PRESETS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--no-drift", action="store_true")
    g.add_argument("--trials-per-day", type=int)
    g.add_argument("--days", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train")
    common(t)
    t.add_argument("--day", type=int)
    t.add_argument("--kind", choices=["mfsnn", "mfann", "mlp"])
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval")
    common(e, checkpoint=True)
    e.add_argument("--day", type=int)
    e.add_argument("--split", choices=["test", "all"], default="test")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("finetune")
    common(f, checkpoint=True)
    f.add_argument("--day", type=int)
    f.add_argument("--rho", type=float)
    f.add_argument("--epochs", type=int)
    f.set_defaults(func=cmd_finetune)

    sw = sub.add_parser("sweep-ratio")
    common(sw)
    sw.add_argument("--checkpoint")
    sw.add_argument("--ratios")
    sw.add_argument("--seeds")
    sw.add_argument("--train-day", type=int)
    sw.add_argument("--test-days")
    sw.add_argument("--epochs", type=int)
    sw.set_defaults(func=cmd_sweep_ratio)

    a = sub.add_parser("ablate")
    common(a)
    a.add_argument("--seeds")
    a.add_argument("--rho", type=float)
    a.add_argument("--train-day", type=int)
    a.add_argument("--test-days")
    a.add_argument("--epochs", type=int)
    a.set_defaults(func=cmd_ablate)

    en = sub.add_parser("energy")
    common(en, checkpoint=True)
    en.add_argument("--day", type=int)
    en.add_argument("--include-classifier", action="store_true")
    en.set_defaults(func=cmd_energy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        print(args.func(args))
        return EXIT_OK
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
