"""Command-line surface: train, eval, forecast, gradcheck, synth.

Flags may also come from a config file of key=value lines (--config); explicit
command-line flags win over file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import data as data_mod
from . import runner
from .checkpoint import restore_model
from .gradcheck import grad_check
from .model import Model, ModelConfig, loss_mae
from .runner import RunConfig
from .tensor import dtype_scope


def _parse_ratio(text: str):
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("ratio must look like 7:1:2")
    return tuple(int(p) for p in parts)


def _add_model_flags(p):
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--layers", dest="n_layers", type=int)
    p.add_argument("--upper", dest="n_upper", type=int,
                   help="number of fully trainable top layers")
    p.add_argument("--heads", dest="heads", type=int)
    p.add_argument("--t-in", dest="t_in", type=int)
    p.add_argument("--t-out", dest="t_out", type=int)
    p.add_argument("--dropout", dest="dropout", type=float)
    p.add_argument("--mem-slots", dest="mem_slots", type=int)
    p.add_argument("--top-k-mem", dest="top_k_mem", type=int)
    p.add_argument("--experts", dest="n_experts", type=int)
    p.add_argument("--top-k-exp", dest="top_k_exp", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--alpha", dest="alpha", type=float)


def _add_train_flags(p):
    p.add_argument("--config", help="key=value file; command-line flags win")
    p.add_argument("--data", dest="data_path")
    p.add_argument("--synth-nodes", dest="synth_nodes", type=int)
    p.add_argument("--synth-steps", dest="synth_steps", type=int)
    p.add_argument("--synth-seed", dest="synth_seed", type=int)
    p.add_argument("--ratio", dest="ratio", type=_parse_ratio)
    p.add_argument("--null-value", dest="null_value", type=float)
    p.add_argument("--lr", dest="lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", dest="epochs", type=int)
    p.add_argument("--patience", dest="patience", type=int)
    p.add_argument("--seed", dest="seed", type=int)
    p.add_argument("--no-se-attention", dest="no_se_attention", action="store_true",
                   default=None)
    p.add_argument("--standard-rope", dest="standard_rope", action="store_true",
                   default=None)
    p.add_argument("--no-memory", dest="no_memory", action="store_true", default=None)
    p.add_argument("--standard-ffn", dest="standard_ffn", action="store_true",
                   default=None)


_LITERALS = {"true": True, "false": False, "none": None}


def _parse_value(key: str, text: str):
    low = text.strip().lower()
    if low in _LITERALS:
        return _LITERALS[low]
    if key == "ratio":
        return tuple(int(p) for p in text.split(":"))
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text.strip()


def _read_config_file(path) -> dict:
    values = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"bad config line: {raw.strip()!r}")
            values[key.strip()] = _parse_value(key.strip(), value)
    return values


def _build_run_config(args) -> RunConfig:
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    merged = {}
    if getattr(args, "config", None):
        file_values = _read_config_file(args.config)
        unknown = set(file_values) - fields
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_values)
    for key, value in vars(args).items():
        if key in fields and value is not None:
            merged[key] = value
    return RunConfig(**merged)


def _fmt(value) -> str:
    return "-" if value is None else f"{value:10.4f}"


def _print_report(report: dict, csv: bool, out=None):
    out = out if out is not None else sys.stdout  # bind at call time, not import
    keys = [k for k in report if k.startswith("horizon_")]
    keys.sort(key=lambda k: int(k.split("_")[1]))
    keys.append("aggregate")
    if csv:
        print("split,mae,rmse,mape", file=out)
        for key in keys:
            m = report[key]
            cells = [key] + ["" if m[c] is None else f"{m[c]:.6f}"
                             for c in ("mae", "rmse", "mape")]
            print(",".join(cells), file=out)
    else:
        print(f"{'split':>12} {'MAE':>10} {'RMSE':>10} {'MAPE%':>10}", file=out)
        for key in keys:
            m = report[key]
            print(f"{key:>12} {_fmt(m['mae'])} {_fmt(m['rmse'])} {_fmt(m['mape'])}",
                  file=out)


def _cmd_train(args) -> int:
    config = _build_run_config(args)
    log_fn = None if args.quiet else (lambda msg: print(msg))
    if args.seeds and args.seeds > 1:
        base = config.resolved_seed()
        maes = []
        for s in range(args.seeds):
            cfg = dataclasses.replace(config, seed=base + s)
            out_dir = f"{args.out}/seed_{base + s}" if args.out else None
            if out_dir:
                _, runlog, _, _ = runner.train_and_save(cfg, out_dir, log_fn)
            else:
                _, runlog = runner.train(cfg, log_fn=log_fn)
            mae = runlog.final["test"]["aggregate"]["mae"]
            maes.append(mae)
            print(f"seed {base + s}: test mae {mae:.4f}")
        print(f"mean test mae {np.mean(maes):.4f} +- {np.std(maes):.4f} over {args.seeds} seeds")
        return 0
    if args.out:
        model, runlog, ckpt, logp = runner.train_and_save(config, args.out, log_fn)
        print(f"checkpoint: {ckpt}\nrunlog: {logp}")
    else:
        model, runlog = runner.train(config, log_fn=log_fn)
    _print_report(runlog.final["test"], args.csv)
    return 0


def _load_for_eval(args):
    model = restore_model(args.checkpoint)
    bundle = data_mod.load_dataset(args.data)
    c = model.config
    if bundle.n_nodes != c.n_nodes or bundle.n_features != c.f_in:
        raise ValueError(
            f"checkpoint expects {c.n_nodes} nodes x {c.f_in} features, dataset has "
            f"{bundle.n_nodes} nodes x {bundle.n_features} features")
    # evaluation uses the scaler the model was trained with, never a refit
    bundle.scaler = (np.asarray(c.scaler_mean, dtype=np.float32),
                     np.asarray(c.scaler_std, dtype=np.float32))
    return model, bundle


def _cmd_eval(args) -> int:
    model, bundle = _load_for_eval(args)
    ranges = (data_mod.split(bundle, args.ratio, model.config.t_in, model.config.t_out)
              if args.ratio else data_mod.split(bundle, (7, 1, 2),
                                                model.config.t_in, model.config.t_out))
    bundle.scaler = (np.asarray(model.config.scaler_mean, dtype=np.float32),
                     np.asarray(model.config.scaler_std, dtype=np.float32))
    which = {"train": 0, "val": 1, "test": 2}[args.split]
    windows = data_mod.make_windows(bundle, ranges[which], model.config.t_in,
                                    model.config.t_out)
    report = runner.evaluate_windows(model, windows, null_value=args.null_value)
    _print_report(report, args.csv)
    return 0


def _cmd_forecast(args) -> int:
    model, bundle = _load_for_eval(args)
    c = model.config
    if bundle.n_steps < c.t_in:
        raise ValueError(f"dataset has {bundle.n_steps} steps, window needs {c.t_in}")
    mean, std = bundle.scaler
    x = bundle.values[:, -c.t_in:, :].transpose(1, 0, 2)
    x = ((x - mean) / std)[None]
    slots = bundle.tod_slot[-c.t_in:][None]
    dow = bundle.dow[-c.t_in:][None]
    pred = model.forward(x, slots, dow, train_mode=False).data[0]
    for step in pred:  # (N, F) per output step, printed node-major
        print(",".join(f"{float(v):.6g}" for v in step.reshape(-1)))
    return 0


def _cmd_gradcheck(args) -> int:
    with dtype_scope(np.float64):
        cfg = ModelConfig(
            n_nodes=args.nodes, t_in=args.t_in, t_out=args.t_out,
            d_model=args.d_model, n_layers=args.n_layers, n_upper=args.n_upper,
            heads=args.heads, dropout=0.0, mem_slots=args.mem_slots,
            top_k_mem=min(args.top_k_mem, args.mem_slots),
            n_experts=args.n_experts, top_k_exp=min(args.top_k_exp, args.n_experts),
            tod_slots=max(args.t_in, 4), seed=args.seed)
        rng = np.random.default_rng(args.seed)
        model = Model(cfg, rng)
        x = rng.standard_normal((args.batch, cfg.t_in, cfg.n_nodes, cfg.f_in))
        y = rng.standard_normal((args.batch, cfg.t_out, cfg.n_nodes, cfg.f_out))
        slots = np.arange(cfg.t_in) % cfg.tod_slots
        dow = (np.arange(cfg.t_in) // cfg.tod_slots) % 7

        def f():
            return loss_mae(model.forward(x, slots, dow), y)

        max_entries = args.max_entries if args.max_entries > 0 else None
        report = grad_check(f, model.trainable_parameters(), h=args.h, tol=args.tol,
                            max_entries_per_param=max_entries,
                            rng=np.random.default_rng(args.seed))
    for name, err in sorted(report.per_param.items(), key=lambda kv: -kv[1]):
        print(f"{name:40s} {err:.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: max rel err {report.max_rel_err:.3e} (tol {report.tol:g})")
    return 0 if report.passed else 1


def _cmd_synth(args) -> int:
    bundle = data_mod.synth_generate(
        args.nodes, args.steps, args.seed, interval_minutes=args.interval,
        level=args.level, amplitude=args.amplitude, noise=args.noise,
        ar=args.ar, coupling=args.coupling, lag=args.lag)
    data_mod.save_dataset(bundle, args.out)
    print(f"wrote {args.out}: {bundle.n_nodes} nodes x {bundle.n_steps} steps")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stlink",
                                     description="spatio-temporal forecasting engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", help="directory for checkpoint and run log")
    p.add_argument("--seeds", type=int, help="average over this many seeds")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--ratio", type=_parse_ratio)
    p.add_argument("--null-value", dest="null_value", type=float)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("forecast", help="forecast from the last input window of a file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=_cmd_forecast)

    p = sub.add_parser("gradcheck", help="whole-model finite-difference check")
    p.add_argument("--d-model", dest="d_model", type=int, default=8)
    p.add_argument("--layers", dest="n_layers", type=int, default=2)
    p.add_argument("--upper", dest="n_upper", type=int, default=2)
    p.add_argument("--heads", dest="heads", type=int, default=1)
    p.add_argument("--nodes", type=int, default=3)
    p.add_argument("--t-in", dest="t_in", type=int, default=4)
    p.add_argument("--t-out", dest="t_out", type=int, default=4)
    p.add_argument("--mem-slots", dest="mem_slots", type=int, default=4)
    p.add_argument("--top-k-mem", dest="top_k_mem", type=int, default=2)
    p.add_argument("--experts", dest="n_experts", type=int, default=2)
    p.add_argument("--top-k-exp", dest="top_k_exp", type=int, default=1)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-entries", dest="max_entries", type=int, default=0,
                   help="subsample large parameters to this many entries (0 = all)")
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset file")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--interval", type=int, default=5)
    p.add_argument("--level", type=float, default=50.0)
    p.add_argument("--amplitude", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--ar", type=float, default=0.8)
    p.add_argument("--coupling", type=float, default=0.5)
    p.add_argument("--lag", type=int, default=1)
    p.set_defaults(fn=_cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
