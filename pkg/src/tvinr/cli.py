"""Command-line entry point: ``tvinr <command> ...``.

Exit codes: 0 success, 1 usage or input error, 2 training divergence,
3 task mode mismatch, 4 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import re
import sys
import time
from collections import OrderedDict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .config import PRESETS, ConfigError, TrainConfig, dump_config, load_config, preset
from .dataset import (
    SYNTH_KINDS,
    DatasetError,
    SplitPlan,
    TimeSeriesSample,
    fully_observed,
    load_csv,
    make_imputation_mask,
    standardize_channels,
    synth_generate,
    window_series,
    write_csv,
)
from .encoder import EmptyContextError
from .model import TVINR, collate
from .tasks import (
    ALPHA,
    EvalReport,
    ModeMismatchError,
    WindowResult,
    compare_reports,
    evaluate_forecast,
    evaluate_imputation,
    forecast,
    reconstruct_batch,
)
from .training import TrainingDivergedError, grad_check, load_checkpoint, save_checkpoint, train

log = logging.getLogger("tvinr")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_MODE, EXIT_GRADCHECK = 0, 1, 2, 3, 4
GRADCHECK_TOL = {64: 1e-4, 32: 1e-2}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def resolve_seed(flag: int | None, fallback: int = 0) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("TVINR_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"TVINR_SEED must be an integer, got {env!r}") from None
    return fallback


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_atomic(path: str | Path, text: str) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_manifest(path: str | Path, **fields) -> None:
    """RunManifest: config, dataset hash, checkpoint, metrics, timings and seed as JSON."""
    write_atomic(path, json.dumps(fields, indent=2, sort_keys=True) + "\n")


def load_series(path: str | Path) -> list[TimeSeriesSample]:
    """Load a dataset and standardize each series per channel."""
    samples = load_csv(path)
    if not samples:
        raise DatasetError(f"{path}: no series")
    return [standardize_channels(s)[0] for s in samples]


def split_windows(series: Sequence[TimeSeriesSample], plan: SplitPlan):
    train_w, val_w, test_w = [], [], []
    for s in series:
        a, b, c = window_series(s, plan)
        train_w += a
        val_w += b
        test_w += c
    return train_w, val_w, test_w


def select_windows(series, config: TrainConfig, split: str, window_len: int) -> list[TimeSeriesSample]:
    if split == "whole":
        return list(series)
    parts = split_windows(series, SplitPlan(window_len, config.stride, config.test_windows))
    chosen = dict(zip(("train", "val", "test"), parts))[split]
    if not chosen:
        raise DatasetError(f"no {split} windows; check window, stride and test_windows against the data")
    return chosen


PRED_FIELDS = ("series_id", "t", "channel", "prediction", "truth", "observed", "window")


def write_predictions(path: str | Path, rows: list[dict], with_truth: bool) -> None:
    fields = [f for f in PRED_FIELDS if with_truth or f != "truth"]
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    tmp.replace(path)


def _num(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def result_rows(res: WindowResult) -> list[dict]:
    s, pred = res.sample, res.prediction
    rows = []
    for l in range(s.length):
        for j in range(s.n_channels):
            rows.append(
                {
                    "series_id": s.series_id,
                    "t": repr(float(s.times[l])),
                    "channel": j,
                    "prediction": repr(float(pred[l, j])),
                    "truth": _num(s.features[l, j]) if s.available[l, j] else "",
                    "observed": int(s.observed[l, j]),
                    "window": s.window_id,
                }
            )
    return rows


def _config_overrides(args) -> dict:
    over = {
        "task": getattr(args, "task", None),
        "tau_set": getattr(args, "tau_set", None),
        "horizons": getattr(args, "horizons", None),
        "history": getattr(args, "history", None),
        "epochs": getattr(args, "epochs", None),
        "lr": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "beta": getattr(args, "beta", None),
        "precision": getattr(args, "precision", None),
    }
    return {k: v for k, v in over.items() if v is not None}


def build_config(args) -> TrainConfig:
    over = _config_overrides(args)
    if args.config:
        cfg = load_config(args.config, over)
    else:
        cfg = preset(args.preset, **over)
    return cfg.replace(seed=resolve_seed(args.seed, cfg.seed))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.series < 1 or args.len < 2 or args.dims < 1:
        raise UsageError("--series and --dims must be >= 1 and --len >= 2")
    if args.noise < 0:
        raise UsageError("--noise must be >= 0")
    seed = resolve_seed(args.seed)
    samples = synth_generate(args.kind, args.series, args.len, n_channels=args.dims, noise=args.noise, rng=seed)
    write_csv(args.out, samples)
    print(f"wrote {len(samples)} series of length {args.len} to {args.out}")
    return EXIT_OK


def cmd_config(args) -> int:
    text = dump_config(preset(args.preset))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    series = load_series(args.data)
    cfg = build_config(args)
    cfg = cfg.replace(n_channels=series[0].n_channels, n_covariates=len(series[0].covariates))
    train_w, val_w, _ = split_windows(series, SplitPlan(cfg.window_len, cfg.stride, cfg.test_windows))
    if not train_w:
        raise DatasetError("no training windows; series are too short for the configured window and test split")
    print(f"# task={cfg.task} train_windows={len(train_w)} val_windows={len(val_w)} seed={cfg.seed}", flush=True)

    def report(rec):
        print(f"epoch={rec['epoch']} train={rec['train']!r} val={rec['val']!r} kl={rec['kl']!r}", flush=True)

    ck = train(cfg, train_w, val_w, on_epoch=report)
    save_checkpoint(ck, args.out)
    elapsed = time.perf_counter() - t0
    print(f"# best_epoch={ck.best_epoch} best_val={ck.best_val!r} checkpoint={args.out}")
    write_manifest(
        args.manifest or f"{args.out}.manifest.json",
        command="train",
        config=cfg.to_dict(),
        dataset={"path": str(args.data), "sha256": file_sha256(args.data)},
        checkpoint=str(args.out),
        metrics={"best_epoch": ck.best_epoch, "best_val": ck.best_val, "final": ck.history[-1] if ck.history else {}},
        timings={"wall_seconds": elapsed},
        seed=cfg.seed,
        version=__version__,
    )
    return EXIT_OK


def _load_for(args, task: str):
    ck = load_checkpoint(args.checkpoint)
    if ck.config.task != task:
        raise ModeMismatchError(f"checkpoint {args.checkpoint} was trained for {ck.config.task}, not {task}")
    return ck


def _finish_eval(args, command, ck, report: EvalReport | None, rows, with_truth, seed, t0, extra) -> int:
    write_predictions(args.out, rows, with_truth)
    metrics, manifest = {}, f"{args.out}.manifest.json"
    if report is not None and report.records:
        write_atomic(args.report, report.to_text())
        metrics = {"n": report.n, "mse": report.mse, "mae": report.mae}
        manifest = f"{args.report}.manifest.json"
        print(f"{command}: windows={report.n} mse={report.mse!r} mae={report.mae!r}")
    write_manifest(
        manifest,
        command=command,
        config=ck.config.to_dict(),
        dataset={"path": str(args.data), "sha256": file_sha256(args.data)},
        checkpoint=str(args.checkpoint),
        metrics=metrics,
        timings={"wall_seconds": time.perf_counter() - t0},
        seed=seed,
        version=__version__,
        **extra,
    )
    return EXIT_OK


def cmd_impute(args) -> int:
    t0 = time.perf_counter()
    if not 0.0 <= args.tau <= 1.0:
        raise UsageError("--tau must lie in [0, 1]")
    ck = _load_for(args, "imputation")
    seed = resolve_seed(args.seed)
    model = ck.model()
    windows = select_windows(load_series(args.data), ck.config, args.split, ck.config.window)
    report, results = evaluate_imputation(model, windows, args.tau, seed=seed, n_samples=args.samples)
    rows = [r for res in results for r in result_rows(res)]
    if not report.records:
        report = None
    return _finish_eval(args, "impute", ck, report, rows, True, seed, t0, {"tau": args.tau, "split": args.split})


def _future_times(times: np.ndarray, n: int) -> np.ndarray:
    step = float(np.median(np.diff(times))) if len(times) > 1 else 1.0
    return times[-1] + step * np.arange(1, n + 1)


def cmd_forecast(args) -> int:
    t0 = time.perf_counter()
    if args.horizon < 1:
        raise UsageError("--horizon must be >= 1")
    ck = _load_for(args, "forecasting")
    seed = resolve_seed(args.seed)
    model = ck.model()
    H, F = ck.config.history, args.horizon
    series = load_series(args.data)
    extra = {"horizon": F, "split": args.split}
    if args.split != "whole":
        window_len = H + max(F, max(ck.config.horizons))
        windows = select_windows(series, ck.config, args.split, window_len)
        report, results = evaluate_forecast(model, windows, F, n_samples=args.samples, seed=seed)
        rows = [r for res in results for r in result_rows(res)]
        return _finish_eval(args, "forecast", ck, report, rows, True, seed, t0, extra)
    # forecast past the end of each series; there is no ground truth
    rows = []
    for s in series:
        if s.length < H:
            raise DatasetError(f"series {s.series_id!r} has {s.length} points; need a history of {H}")
        hist_times = s.times[-H:]
        all_times = np.concatenate([hist_times, _future_times(hist_times, F)])
        span = all_times[-1] - all_times[0]
        stamps = (all_times - all_times[0]) / span
        hist = TimeSeriesSample(stamps[:H], s.features[-H:], s.mask[-H:], s.covariates, hist_times, s.series_id)
        future = forecast(model, hist, stamps[H:], n_samples=args.samples, seed=seed)
        fitted = reconstruct_batch(model, [hist], role="prior")[0]
        pred = np.concatenate([fitted, future])
        for l, t in enumerate(all_times):
            for j in range(s.n_channels):
                rows.append(
                    {
                        "series_id": s.series_id,
                        "t": repr(float(t)),
                        "channel": j,
                        "prediction": repr(float(pred[l, j])),
                        "observed": int(l < H and hist.observed[l, j]),
                        "window": "future",
                    }
                )
    return _finish_eval(args, "forecast", ck, None, rows, False, seed, t0, extra)


def cmd_eval(args) -> int:
    a, b = EvalReport.load(args.report_a), EvalReport.load(args.report_b)
    results = compare_reports(a, b)
    print(f"# windows={a.n} alpha={ALPHA}")
    for metric, res in results.items():
        verdict = "significant difference" if res.significant else "no significant difference"
        print(
            f"{metric}: mean_a={np.mean(a.metric(metric))!r} mean_b={np.mean(b.metric(metric))!r} "
            f"t={res.t!r} df={res.df!r} p={res.p!r} -> {verdict}"
        )
    return EXIT_OK


def gradcheck_batch(config: TrainConfig, seed: int, n: int = 2):
    """Two synthetic windows with some absent cells, masked to half observed."""
    rng = np.random.default_rng(seed)
    samples = []
    for s in synth_generate("sine-mix", n, config.window, n_channels=config.n_channels, rng=seed):
        vals = s.features.copy()
        vals[rng.random(vals.shape) < 0.1] = np.nan
        vals[0] = s.features[0]
        samples.append(make_imputation_mask(fully_observed(vals, series_id=s.series_id), 0.5, rng))
    return collate(samples, torch.float64 if config.precision == 64 else torch.float32)


def cmd_gradcheck(args) -> int:
    cfg = build_config(args)
    if cfg.precision != 64:
        log.warning("gradient check requested in 32-bit; threshold relaxed to %g", GRADCHECK_TOL[32])
    tol = GRADCHECK_TOL[cfg.precision]
    seed = cfg.seed
    model = TVINR(cfg)
    res = grad_check(model, gradcheck_batch(cfg, seed), eps_fd=args.step, n_params=args.params, seed=seed)
    for group, err in res.per_group.items():
        print(f"group={group} max_rel_error={err:.3e}")
    print(f"max_rel_error={res.max_rel_error:.3e} worst={res.worst} checked={res.checked} threshold={tol:g}")
    if not res.max_rel_error < tol:
        print(f"gradcheck FAILED: worst parameter {res.worst}", file=sys.stderr)
        return EXIT_GRADCHECK
    print("gradcheck passed")
    return EXIT_OK


def _safe_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text) or "_"


def cmd_plotdata(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups: "OrderedDict[tuple[str, str], list[dict]]" = OrderedDict()
    with open(args.predictions, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"series_id", "t", "channel", "prediction", "observed"} - set(reader.fieldnames or ())
        if missing:
            raise DatasetError(f"{args.predictions}: missing columns {sorted(missing)}")
        for row in reader:
            groups.setdefault((row["series_id"], row.get("window", "")), []).append(row)
    for (sid, win), rows in groups.items():
        name = _safe_name(f"{sid}__{win}" if win else sid) + ".csv"
        with open(out_dir / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "channel", "truth", "prediction", "observed"])
            for r in rows:
                w.writerow([r["t"], r["channel"], r.get("truth", ""), r["prediction"], r["observed"]])
        print(out_dir / name)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="cap torch intra-op threads")
    common.add_argument("--seed", type=int, default=None, help="seed (falls back to $TVINR_SEED)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="tvinr", description="Temporal variational implicit neural representations.")
    p.add_argument("--version", action="version", version=f"tvinr {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset CSV")
    s.add_argument("--kind", choices=SYNTH_KINDS, default="sine-mix")
    s.add_argument("--series", type=int, default=8)
    s.add_argument("--len", type=int, default=200)
    s.add_argument("--dims", type=int, default=1)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--out", default="synth.csv")
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("config", parents=[common], help="print a preset as a YAML config file")
    c.add_argument("--preset", choices=sorted(PRESETS), default="electricity-200")
    c.add_argument("--out")
    c.set_defaults(func=cmd_config)

    def model_flags(q):
        q.add_argument("--config", help="YAML config file")
        q.add_argument("--preset", choices=sorted(PRESETS), default="electricity-200")
        q.add_argument("--precision", type=int, choices=(32, 64))

    t = sub.add_parser("train", parents=[common], help="train one checkpoint")
    model_flags(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", default="model.tvinr")
    t.add_argument("--manifest")
    t.add_argument("--task", choices=("imputation", "forecasting"))
    t.add_argument("--tau-set", type=_float_list)
    t.add_argument("--horizons", type=_int_list)
    t.add_argument("--history", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--beta", type=float)
    t.set_defaults(func=cmd_train)

    splits = ("test", "val", "train", "whole")
    for name, func in (("impute", cmd_impute), ("forecast", cmd_forecast)):
        q = sub.add_parser(name, parents=[common], help=f"{name} with a trained checkpoint")
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--split", choices=splits, default="test")
        q.add_argument("--samples", type=int, default=0, help="average this many latent samples (0: use the mean)")
        q.add_argument("--out", default=f"{name}_predictions.csv")
        q.add_argument("--report", default=f"{name}_report.txt")
        if name == "impute":
            q.add_argument("--tau", type=float, required=True)
        else:
            q.add_argument("--horizon", type=int, required=True)
        q.set_defaults(func=func)

    e = sub.add_parser("eval", parents=[common], help="Welch t-tests between two eval reports")
    e.add_argument("report_a")
    e.add_argument("report_b")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", parents=[common], help="compare autograd with finite differences")
    model_flags(g)
    g.set_defaults(preset="gradcheck")
    g.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    g.add_argument("--params", type=int, default=120, help="scalars to probe across all parameter groups")
    g.set_defaults(func=cmd_gradcheck)

    pd = sub.add_parser("plotdata", parents=[common], help="split a predictions file into per-window series")
    pd.add_argument("predictions")
    pd.add_argument("--out-dir", default="plotdata")
    pd.set_defaults(func=cmd_plotdata)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tvinr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"tvinr {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ModeMismatchError as exc:
        print(f"tvinr {args.command}: mode mismatch: {exc}", file=sys.stderr)
        return EXIT_MODE
    except (ConfigError, DatasetError, EmptyContextError, ValueError, OSError) as exc:
        print(f"tvinr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
