"""Command-line entry point: ``timeflow {train,impute,forecast,evaluate,synth}``.

Exit codes: 0 success, 2 configuration or usage error, 3 divergence during
optimization, 4 I/O (unreadable input, bad checkpoint).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import KnnConfig
from .config import RunConfig, load_config, substream, substream_seed, to_ini, validate
from .data import CsvLayout, TimeSeriesSample, apply_stats, load_csv, normalize_dataset, synth_generate, write_csv
from .errors import CheckpointError, ConfigError, ContractError, DivergenceError, ParseError
from .evaluation import EvalReport, ResultRow, aggregate, format_table, write_results
from .meta import InnerLoopConfig, fit
from .model import TimeFlowModel
from .persist import load_checkpoint, save_checkpoint
from .pipeline import (
    FORECAST_METHODS,
    IMPUTE_METHODS,
    impute_windows,
    imputation_tasks,
    run_forecast,
    run_imputation,
)
from .tasks import ForecastWindowSampler, WindowSpec, build_imputation_tasks

log = logging.getLogger("timeflow")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers

def _threads(n: int):
    if n <= 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _layout(time_column: str) -> CsvLayout:
    return CsvLayout(time_column=int(time_column) if time_column.isdigit() else time_column)


def _load_samples(cfg: RunConfig) -> list[TimeSeriesSample]:
    if cfg.data.synth:
        return synth_generate(cfg.data.n_samples, cfg.data.length, cfg.synth, cfg.data.seed)
    return load_csv(cfg.data.path, _layout(cfg.data.time_column))


def _normalize_with(model: TimeFlowModel, samples: list[TimeSeriesSample]) -> list[TimeSeriesSample]:
    """Training statistics for known ids, fresh statistics for new ones."""
    out = []
    for s in samples:
        stats = model.norm_stats.get(s.sample_id)
        if stats is not None:
            out.append(apply_stats(s, stats))
        else:
            out.extend(normalize_dataset([s]))
    return out


def _write_loss(history, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, format(v, ".17g")])


def _inner_eval(model: TimeFlowModel, override: int | None) -> InnerLoopConfig:
    alpha = float(model.metadata.get("inner_alpha", 1e-2))
    steps = int(model.metadata.get("eval_steps") or 0) or int(model.metadata.get("inner_steps", 3))
    return InnerLoopConfig(alpha, override or steps)


def _read_mask(path, samples: list[TimeSeriesSample]) -> list[np.ndarray]:
    masks = load_csv(path)
    by_id = {m.sample_id: m for m in masks}
    out = []
    for s in samples:
        m = by_id.get(s.sample_id)
        if m is None or len(m) != len(s):
            raise ConfigError("mask", f"mask file does not cover sample {s.sample_id!r} on the data grid")
        out.append(np.nan_to_num(m.values) != 0)
    return out


# --------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    out = Path(args.out or Path(args.config).with_suffix(""))
    out.mkdir(parents=True, exist_ok=True)
    samples = normalize_dataset(_load_samples(cfg))
    model = TimeFlowModel.create(cfg.model, substream(cfg.seed, "init"))
    model.norm_stats = {s.sample_id: s.norm_stats for s in samples}
    t = cfg.task
    model.metadata.update(
        mode=t.mode, inner_alpha=repr(cfg.inner.alpha), inner_steps=str(cfg.inner.steps),
        eval_steps=str(cfg.eval_steps), dataset=cfg.dataset_name,
    )
    if t.mode == "impute":
        n = min(len(s) for s in samples)
        window_len = t.window_len or n - t.window_start
        if t.window_start + window_len > n:
            raise ConfigError("task.window_len", f"window exceeds series length {n}")
        parts = [s.window(t.window_start, t.window_start + window_len) for s in samples]
        tasks = build_imputation_tasks(parts, t.tau, seed=substream_seed(cfg.seed, "subsample"))
        model.metadata.update(tau=repr(t.tau), window_start=str(t.window_start), window_len=str(window_len))
    else:
        n = min(len(s) for s in samples)
        region = (t.train_start, t.train_end or n)
        spec = WindowSpec(t.lookback, t.horizon)
        tasks = ForecastWindowSampler(samples, spec, t.draws_per_epoch, region)
        model.metadata.update(lookback=str(t.lookback), horizon=str(t.horizon), train_end=str(region[1]))
    with _threads(cfg.threads):
        result = fit(tasks, model, cfg.inner, cfg.outer, seed=substream_seed(cfg.seed, "fit"))
    save_checkpoint(model, out / "checkpoint.tfc", adam=result.adam, seed=cfg.seed)
    _write_loss(result.loss_history, out / "loss_history.csv")
    (out / "config.ini").write_text(to_ini(cfg), encoding="utf-8")
    print(f"trained {cfg.outer.epochs} epochs, final loss {result.loss_history[-1]:.6g}; wrote {out}")
    return EXIT_OK


def _imputation_eval(method, samples, windows, tau, seed, observed, model, inner, knn, dataset):
    rows, preds = [], {}
    for wid, win in enumerate(windows):
        tasks = imputation_tasks(samples, win, tau, seed, wid, observed)
        run = run_imputation(method, tasks, model=model, inner=inner, knn=knn)
        for s, p in zip(samples, run.predictions):
            preds.setdefault(s.sample_id, np.full(len(s), np.nan))[win[0]:win[1]] = p
        if run.window_mae is not None:
            rows.append(ResultRow(dataset, method, tau if tau is not None else "mask", "", wid, run.window_mae))
    return rows, preds


def _report(rows, **meta) -> EvalReport | None:
    if not rows:
        return None
    return aggregate([r.mae for r in rows], **meta)


def _write_predictions(samples, preds, path):
    out = []
    for s in samples:
        vals = s.denormalize(preds[s.sample_id])
        out.append(TimeSeriesSample(s.sample_id, vals, s.timestamps, mask=~np.isnan(vals)))
    write_csv(out, path)


def cmd_impute(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    samples = _normalize_with(model, load_csv(args.data))
    n = min(len(s) for s in samples)
    window_len = args.window_len or int(model.metadata.get("window_len", 0)) or n
    windows = impute_windows(n, min(window_len, n))
    observed = _read_mask(args.mask, samples) if args.mask else None
    tau = None if observed is not None else args.tau
    if observed is None and tau is None:
        observed = [s.mask.copy() for s in samples]
    inner = _inner_eval(model, args.inner_steps_eval)
    with _threads(args.threads or 0):
        rows, preds = _imputation_eval("timeflow", samples, windows, tau, args.seed, observed, model, inner, None,
                                       Path(args.data).stem)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_predictions(samples, preds, out / "predictions.csv")
    report = _report(rows, dataset=Path(args.data).stem, method="timeflow", tau=tau if tau is not None else "mask")
    if report is None:
        print(f"wrote predictions to {out / 'predictions.csv'} (no held-out truth, no report)")
        return EXIT_OK
    write_results(rows, out / "results.csv")
    print(format_table([report]))
    return EXIT_OK


def _forecast_rows(results, dataset, method, tau, horizon):
    fc = [ResultRow(dataset, method, tau, horizon, i, r.forecast_error) for i, r in enumerate(results)]
    imp = [ResultRow(dataset, method, tau, horizon, i, r.imputation_error) for i, r in enumerate(results)]
    return fc, imp


def _print_forecast(fc_rows, imp_rows, tau, meta):
    fc = aggregate([r.mae for r in fc_rows], **meta)
    if tau < 1:
        imp = aggregate([r.mae for r in imp_rows], **meta)
        keys = ("dataset", "method", "tau", "horizon")
        print("  ".join(keys) + "  imputation_error  forecast_error")
        print("  ".join(str(meta.get(k, "")) for k in keys) + f"  {imp}  {fc}")
    else:
        print(format_table([fc]))


def _forecast_command(args, method) -> int:
    model = None
    if method == "timeflow":
        model, _ = load_checkpoint(args.checkpoint)
        samples = _normalize_with(model, load_csv(args.data))
    else:
        samples = normalize_dataset(load_csv(args.data))
    lookback = args.lookback or (int(model.metadata["lookback"]) if model and "lookback" in model.metadata else None)
    horizon = args.horizon or (int(model.metadata["horizon"]) if model and "horizon" in model.metadata else None)
    if not lookback or not horizon:
        raise UsageError("--lookback and --horizon are required")
    spec = WindowSpec(lookback, horizon)
    n = min(len(s) for s in samples)
    test_start = args.test_start if args.test_start is not None else (
        int(model.metadata.get("train_end", 0)) if model and model.metadata.get("train_end") and
        int(model.metadata["train_end"]) + spec.total <= n else 0
    )
    tau = args.tau if args.tau is not None else 1.0
    if not 0 < tau <= 1:
        raise ConfigError("tau", f"must be in (0, 1], got {tau}")
    inner = _inner_eval(model, args.inner_steps_eval) if model else None
    with _threads(args.threads or 0):
        results = run_forecast(method, samples, spec, tau, args.seed, region=(test_start, n), model=model, inner=inner)
    dataset = Path(args.data).stem
    fc_rows, imp_rows = _forecast_rows(results, dataset, method, tau, horizon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results(fc_rows, out / "results.csv")
    if tau < 1:
        write_results(imp_rows, out / "results_imputation.csv")
    with (out / "predictions.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "window_id", "step", "part", "observed", "prediction", "truth"])
        by_id = {s.sample_id: s for s in samples}
        for wid, r in enumerate(results):
            for j, sid in enumerate(r.sample_ids):
                s = by_id[sid]
                for i in range(spec.total):
                    idx = r.start + i
                    is_lb = i < lookback
                    pred = r.lookback_pred[j][i] if is_lb else r.horizon_pred[j][i - lookback]
                    truth = s.values[idx] if s.mask[idx] else np.nan
                    w.writerow([sid, wid, i, "lookback" if is_lb else "horizon",
                                int(r.observed[j][i]) if is_lb else 0,
                                format(float(s.denormalize(pred)), ".10g"),
                                "" if np.isnan(truth) else format(float(s.denormalize(truth)), ".10g")])
    _print_forecast(fc_rows, imp_rows, tau, dict(dataset=dataset, method=method, tau=tau, horizon=horizon))
    return EXIT_OK


def cmd_forecast(args) -> int:
    return _forecast_command(args, "timeflow")


def cmd_evaluate(args) -> int:
    method, mode = args.method, args.mode
    if mode == "impute" and method not in IMPUTE_METHODS:
        raise UsageError(f"method {method!r} does not support mode=impute")
    if mode == "forecast" and method not in FORECAST_METHODS:
        raise UsageError(f"method {method!r} does not support mode=forecast")
    if method == "timeflow" and not args.checkpoint:
        raise UsageError("method timeflow requires --checkpoint")
    if mode == "forecast":
        return _forecast_command(args, method)

    model = None
    if method == "timeflow":
        model, _ = load_checkpoint(args.checkpoint)
        samples = _normalize_with(model, load_csv(args.data))
    else:
        samples = normalize_dataset(load_csv(args.data))
    knn = KnnConfig(args.k)
    if method == "knn":
        knn.validate(len(samples) - 1)
    n = min(len(s) for s in samples)
    window_len = args.window_len or (int(model.metadata.get("window_len", 0)) if model else 0) or n
    windows = impute_windows(n, min(window_len, n))
    tau = args.tau if args.tau is not None else 0.5
    if not 0 < tau <= 1:
        raise ConfigError("tau", f"must be in (0, 1], got {tau}")
    inner = _inner_eval(model, args.inner_steps_eval) if model else None
    dataset = Path(args.data).stem
    with _threads(args.threads or 0):
        rows, _ = _imputation_eval(method, samples, windows, tau, args.seed, None, model, inner, knn, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results(rows, out / "results.csv")
    report = _report(rows, dataset=dataset, method=method, tau=tau)
    if report is None:
        print("no held-out points to score")
    else:
        print(format_table([report]))
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.config:
        cfg = load_config(args.config, require_mode=False)
    else:
        cfg = validate(RunConfig(), require_mode=False)
    data = cfg.data
    if args.seed is not None:
        data = replace(data, seed=args.seed)
    if args.n_samples is not None:
        data = replace(data, n_samples=args.n_samples)
    if args.length is not None:
        data = replace(data, length=args.length)
    cfg = validate(replace(cfg, data=data), require_mode=False)
    samples = synth_generate(cfg.data.n_samples, cfg.data.length, cfg.synth, cfg.data.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(samples, args.out)
    print(f"wrote {len(samples)} samples x {cfg.data.length} steps to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="timeflow", description="Continuous-time modelling of univariate series.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--data", required=True, help="wide CSV: time column + one column per sample")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--inner-steps-eval", type=int, default=None)
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)

    t = sub.add_parser("train", help="meta-train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None, help="output directory (default: next to the config)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--threads", type=int, default=None)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("impute", help="impute missing values with a trained model")
    common(i, checkpoint=True)
    g = i.add_mutually_exclusive_group()
    g.add_argument("--tau", type=float, default=None, help="subsample the observed data at this rate")
    g.add_argument("--mask", default=None, help="CSV of 0/1 flags marking observed cells (overrides --tau)")
    i.add_argument("--window-len", type=int, default=None)
    i.set_defaults(func=cmd_impute)

    f = sub.add_parser("forecast", help="forecast with a trained model")
    common(f, checkpoint=True)
    f.add_argument("--lookback", type=int, default=None)
    f.add_argument("--horizon", type=int, default=None)
    f.add_argument("--tau", type=float, default=None, help="look-back sampling rate (default 1)")
    f.add_argument("--test-start", type=int, default=None)
    f.set_defaults(func=cmd_forecast)

    e = sub.add_parser("evaluate", help="score TimeFlow or a classical baseline")
    common(e)
    e.add_argument("--method", required=True, choices=["timeflow", "linear", "knn", "repeat"])
    e.add_argument("--mode", required=True, choices=["impute", "forecast"])
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--tau", type=float, default=None)
    e.add_argument("--lookback", type=int, default=None)
    e.add_argument("--horizon", type=int, default=None)
    e.add_argument("--test-start", type=int, default=None)
    e.add_argument("--window-len", type=int, default=None)
    e.add_argument("--k", type=int, default=3)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth", help="write a synthetic multi-seasonal dataset")
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True, help="output CSV file")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--n-samples", type=int, default=None)
    s.add_argument("--length", type=int, default=None)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    level = os.environ.get("TIMEFLOW_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ParseError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
