"""Imputation and forecasting inference, error metrics, Welch's t-test and eval reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import special

from .dataset import Cell, TimeSeriesSample, make_forecast_mask, make_imputation_mask
from .encoder import EmptyContextError
from .model import TVINR, Batch, collate

ALPHA = 0.05


class ModeMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# inference


def context_only(batch: Batch) -> Batch:
    """Drop masked cells so no encoder can see the targets at inference time."""
    hidden = batch.masked
    state = torch.where(hidden, torch.full_like(batch.state, Cell.ABSENT), batch.state)
    values = torch.where(hidden, torch.zeros((), dtype=batch.values.dtype), batch.values)
    return Batch(batch.stamps, values, state, batch.covariates)


def _predict(model: TVINR, batch: Batch, role: str, stamps: torch.Tensor, n_samples: int, seed: int) -> np.ndarray:
    with torch.no_grad():
        lat = model.latent(context_only(batch), role)
        if n_samples <= 0:
            out = model.decode(lat.mu, batch.covariates, stamps)
        else:
            gen = torch.Generator().manual_seed(seed)
            out = sum(
                model.decode(lat.sample(torch.randn(lat.mu.shape, generator=gen, dtype=lat.mu.dtype)),
                             batch.covariates, stamps)
                for _ in range(n_samples)
            ) / n_samples
    return out.cpu().numpy().astype(np.float64)


def _require_context(samples: Sequence[TimeSeriesSample]) -> None:
    for s in samples:
        if not s.observed.any():
            raise EmptyContextError(f"window {s.series_id}/{s.window_id} has no observed cell")


def reconstruct_batch(
    model: TVINR, samples: Sequence[TimeSeriesSample], role: str | None = None, n_samples: int = 0, seed: int = 0
) -> list[np.ndarray]:
    """Predictions at every stamp of each sample, conditioning on its observed cells.

    ``role`` picks the encoder; by default the one configured for the model's task.
    """
    _require_context(samples)
    if role is None:
        role = model.config.imputation_encoder if model.config.task == "imputation" else "prior"
    batch = collate(samples, model.dtype)
    pred = _predict(model, batch, role, batch.stamps, n_samples, seed)
    return [pred[i, : s.length] for i, s in enumerate(samples)]


@dataclass
class Imputation:
    values: np.ndarray  # (L, d) predictions at every cell
    target: np.ndarray  # (L, d) bool, the masked cells

    def at_targets(self) -> np.ndarray:
        return self.values[self.target]


def impute(model: TVINR, sample: TimeSeriesSample, n_samples: int = 0, seed: int = 0) -> Imputation:
    """Fill the masked cells of ``sample`` from its observed cells."""
    if model.config.task != "imputation":
        raise ModeMismatchError("checkpoint was trained for forecasting")
    (values,) = reconstruct_batch(model, [sample], n_samples=n_samples, seed=seed)
    return Imputation(values, sample.masked.copy())


def forecast(
    model: TVINR, history: TimeSeriesSample, stamps: np.ndarray, n_samples: int = 0, seed: int = 0
) -> np.ndarray:
    """Predictions ``(len(stamps), d)`` after the history, from the conditional prior."""
    if model.config.task != "forecasting":
        raise ModeMismatchError("checkpoint was trained for imputation")
    stamps = np.asarray(stamps, dtype=np.float64)
    if len(stamps) and stamps.min() <= history.stamps.max():
        raise ValueError("forecast stamps must lie after the last history stamp")
    _require_context([history])
    batch = collate([history], model.dtype)
    if len(stamps) == 0:
        return np.zeros((0, history.n_channels))
    query = torch.from_numpy(stamps).to(model.dtype).unsqueeze(0)
    return _predict(model, batch, "prior", query, n_samples, seed)[0]


# ---------------------------------------------------------------------------
# metrics


def mse_mae(pred: np.ndarray, truth: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    pred, truth, target = np.asarray(pred), np.asarray(truth), np.asarray(target, dtype=bool)
    if pred.shape != truth.shape or pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape}, {truth.shape}, {target.shape}")
    if not target.any():
        raise ValueError("no target cells to score")
    err = pred[target] - truth[target]
    return float(np.mean(err**2)), float(np.mean(np.abs(err)))


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float

    @property
    def significant(self) -> bool:
        return self.p < ALPHA


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    """Two-sided Welch test with Welch-Satterthwaite degrees of freedom."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / na, b.var(ddof=1) / nb
    diff = a.mean() - b.mean()
    if va + vb == 0:
        if diff == 0:
            return WelchResult(0.0, float(na + nb - 2), 1.0)
        raise ValueError("both samples are constant with different means; the test is undefined")
    t = diff / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (na - 1) + vb**2 / (nb - 1))
    p = float(2 * special.stdtr(df, -abs(t)))
    return WelchResult(float(t), float(df), min(p, 1.0))


# ---------------------------------------------------------------------------
# evaluation reports


@dataclass
class WindowRecord:
    window_id: str
    setting: str
    mse: float
    mae: float


@dataclass
class EvalReport:
    """One record per test window plus aggregates; serialises to a stable text format::

        # tvinr-eval v1 task=imputation
        window_id,setting,mse,mae
        s0/test0,tau=0.3,0.12,0.27
        # aggregate n=1 mse=0.12 mae=0.27
    """

    task: str
    records: list[WindowRecord] = field(default_factory=list)
    welch: dict[str, WelchResult] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def mse(self) -> float:
        return float(np.mean([r.mse for r in self.records])) if self.records else math.nan

    @property
    def mae(self) -> float:
        return float(np.mean([r.mae for r in self.records])) if self.records else math.nan

    def metric(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    def to_text(self) -> str:
        lines = [f"# tvinr-eval v1 task={self.task}", "window_id,setting,mse,mae"]
        lines += [f"{r.window_id},{r.setting},{r.mse!r},{r.mae!r}" for r in self.records]
        lines.append(f"# aggregate n={self.n} mse={self.mse!r} mae={self.mae!r}")
        for name, w in sorted(self.welch.items()):
            lines.append(f"# welch metric={name} t={w.t!r} df={w.df!r} p={w.p!r}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# tvinr-eval v1 task="):
            raise ValueError("not a tvinr eval report")
        report = cls(lines[0].split("task=", 1)[1].strip())
        for line in lines[2:]:
            if not line or line.startswith("# aggregate"):
                continue
            if line.startswith("# welch"):
                kv = dict(part.split("=", 1) for part in line[2:].split()[1:])
                report.welch[kv["metric"]] = WelchResult(float(kv["t"]), float(kv["df"]), float(kv["p"]))
                continue
            wid, setting, mse, mae = line.split(",")
            report.records.append(WindowRecord(wid, setting, float(mse), float(mae)))
        return report

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_text(Path(path).read_text())


def window_name(sample: TimeSeriesSample) -> str:
    return f"{sample.series_id}/{sample.window_id}" if sample.window_id else sample.series_id


@dataclass
class WindowResult:
    sample: TimeSeriesSample  # masked window (ground truth at every available cell)
    prediction: np.ndarray  # (L, d)


def evaluate_imputation(
    model: TVINR,
    windows: Sequence[TimeSeriesSample],
    tau: float,
    seed: int = 0,
    batch_size: int = 64,
    n_samples: int = 0,
) -> tuple[EvalReport, list[WindowResult]]:
    """Mask each window to ``tau`` (seeded) and score predictions on its masked cells."""
    if model.config.task != "imputation":
        raise ModeMismatchError("checkpoint was trained for forecasting")
    rng = np.random.default_rng(seed)
    masked = [make_imputation_mask(w, tau, rng) for w in windows]
    report, results = EvalReport("imputation"), []
    for i in range(0, len(masked), batch_size):
        chunk = masked[i : i + batch_size]
        for s, pred in zip(chunk, reconstruct_batch(model, chunk, n_samples=n_samples, seed=seed)):
            results.append(WindowResult(s, pred))
            if s.masked.any():
                mse, mae = mse_mae(pred, s.features, s.masked)
                report.records.append(WindowRecord(window_name(s), f"tau={tau:g}", mse, mae))
    return report, results


def evaluate_forecast(
    model: TVINR,
    windows: Sequence[TimeSeriesSample],
    horizon: int,
    batch_size: int = 64,
    n_samples: int = 0,
    seed: int = 0,
) -> tuple[EvalReport, list[WindowResult]]:
    """Condition on the first ``history`` stamps of each window and score the next ``horizon``."""
    if model.config.task != "forecasting":
        raise ModeMismatchError("checkpoint was trained for imputation")
    H = model.config.history
    masked = []
    for w in windows:
        if w.length < H + horizon:
            raise ValueError(f"window {window_name(w)} has {w.length} stamps; need {H + horizon}")
        masked.append(make_forecast_mask(w.head(H + horizon), H, horizon))
    report, results = EvalReport("forecasting"), []
    for i in range(0, len(masked), batch_size):
        chunk = masked[i : i + batch_size]
        for s, pred in zip(chunk, reconstruct_batch(model, chunk, role="prior", n_samples=n_samples, seed=seed)):
            results.append(WindowResult(s, pred))
            if s.masked.any():
                mse, mae = mse_mae(pred, s.features, s.masked)
                report.records.append(WindowRecord(window_name(s), f"F={horizon}", mse, mae))
    return report, results


def compare_reports(a: EvalReport, b: EvalReport) -> dict[str, WelchResult]:
    """Welch tests per metric over windows shared by both reports (ids must match exactly)."""
    ids_a, ids_b = [r.window_id for r in a.records], [r.window_id for r in b.records]
    only_a, only_b = sorted(set(ids_a) - set(ids_b)), sorted(set(ids_b) - set(ids_a))
    if only_a or only_b:
        raise ValueError(f"reports cover different windows: only in A {only_a}, only in B {only_b}")
    return {m: welch_t_test(a.metric(m), b.metric(m)) for m in ("mse", "mae")}


# ---------------------------------------------------------------------------
# naive reference predictors


def mean_imputation(sample: TimeSeriesSample) -> np.ndarray:
    """Per-channel mean of the observed cells, broadcast over the window."""
    obs = sample.observed
    out = np.zeros_like(sample.features)
    for j in range(sample.n_channels):
        vals = sample.features[obs[:, j], j]
        out[:, j] = vals.mean() if vals.size else 0.0
    return out


def last_value_forecast(sample: TimeSeriesSample) -> np.ndarray:
    """Carry each channel's last observed value forward."""
    out = np.zeros_like(sample.features)
    for j in range(sample.n_channels):
        idx = np.flatnonzero(sample.mask[:, j] == Cell.OBSERVED)
        last = sample.features[idx[-1], j] if idx.size else 0.0
        out[:, j] = last
        if idx.size:
            out[: idx[-1] + 1, j] = sample.features[: idx[-1] + 1, j]
    return out
