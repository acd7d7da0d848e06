"""ELBO objective, the training loop, checkpoints and finite-difference gradient checks."""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import TrainConfig
from .dataset import TimeSeriesSample, make_forecast_mask, make_imputation_mask
from .encoder import EmptyContextError, kl_to_prior
from .model import TVINR, Batch, collate

log = logging.getLogger(__name__)

MAGIC = b"TVINR1"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LossTerms:
    loss: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor


def reconstruction_error(pred: torch.Tensor, batch: Batch) -> torch.Tensor:
    """Per-sample mean squared error over available (observed or masked) cells."""
    avail = batch.available
    sq = torch.where(avail, (pred - batch.values) ** 2, torch.zeros((), dtype=pred.dtype))
    counts = avail.flatten(1).sum(dim=1)
    if bool((counts == 0).any()):
        raise EmptyContextError("sample has no available cell to reconstruct")
    return sq.flatten(1).sum(dim=1) / counts.to(pred.dtype)


def elbo_loss(
    model: TVINR,
    batch: Batch,
    eps: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    beta: float | None = None,
) -> LossTerms:
    """Negative ELBO with a unit-variance Gaussian likelihood, averaged over cells and samples.

    ``eps`` fixes the reparameterisation noise; otherwise it is drawn from ``generator``.
    """
    beta = model.config.beta if beta is None else beta
    q = model.latent(batch, "posterior")
    p = model.latent(batch, "prior")
    if eps is None:
        eps = torch.randn(q.mu.shape, generator=generator, dtype=q.mu.dtype)
    z = q.sample(eps)
    pred = model.decode(z, batch.covariates, batch.stamps)
    recon = reconstruction_error(pred, batch).mean()
    kl = kl_to_prior(q, p).mean()
    return LossTerms(recon + beta * kl, recon, kl)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    state: "OrderedDict[str, torch.Tensor]"
    epoch: int = 0
    best_epoch: int = 0
    best_val: float = math.inf
    rng_state: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    def model(self) -> TVINR:
        m = TVINR(self.config)
        m.load_state_dict({k: v.to(m.dtype) for k, v in self.state.items()})
        m.eval()
        return m

    @classmethod
    def from_model(cls, model: TVINR, **kw) -> "Checkpoint":
        state = OrderedDict((k, v.detach().to(torch.float64).clone()) for k, v in model.state_dict().items())
        return cls(model.config, state, **kw)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """``TVINR1\\n``, header byte length, JSON header, then little-endian float64 payload."""
    tensors, offset, chunks = [], 0, []
    for name, t in ckpt.state.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format": "TVINR1",
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "best_epoch": ckpt.best_epoch,
        "best_val": ckpt.best_val,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "tensors": tensors,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC) + 1) != MAGIC + b"\n":
            raise ValueError(f"{path}: not a TVINR1 checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        payload = fh.read()
    if len(payload) != header["payload_bytes"]:
        raise ValueError(f"{path}: truncated payload")
    state = OrderedDict()
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=t["offset"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    return Checkpoint(
        TrainConfig(**header["config"]),
        state,
        epoch=header["epoch"],
        best_epoch=header["best_epoch"],
        best_val=header["best_val"],
        rng_state=header["rng_state"],
        history=header["history"],
    )


# ---------------------------------------------------------------------------
# training


def mask_for_training(sample: TimeSeriesSample, config: TrainConfig, rng: np.random.Generator) -> TimeSeriesSample:
    if config.task == "imputation":
        tau = config.tau_set[rng.integers(len(config.tau_set))]
        return make_imputation_mask(sample, tau, rng)
    horizon = int(config.horizons[rng.integers(len(config.horizons))])
    H = config.history
    if sample.length < H + horizon:
        raise ValueError(f"forecasting window has {sample.length} stamps; need {H + horizon}")
    return make_forecast_mask(sample.head(H + horizon), H, horizon)


def _batches(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def evaluate_loss(
    model: TVINR, samples: Sequence[TimeSeriesSample], config: TrainConfig, seed: int
) -> tuple[float, float]:
    """Mean (loss, kl) over ``samples`` with masks and noise fixed by ``seed``."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    total = kl_total = 0.0
    with torch.no_grad():
        masked = [mask_for_training(s, config, rng) for s in samples]
        for chunk in _batches(masked, config.batch_size):
            terms = elbo_loss(model, collate(chunk, model.dtype), generator=gen)
            total += float(terms.loss) * len(chunk)
            kl_total += float(terms.kl) * len(chunk)
    return total / len(samples), kl_total / len(samples)


EpochCallback = Callable[[dict], None]
StepCallback = Callable[[int, LossTerms], None]


def train(
    config: TrainConfig,
    train_set: Sequence[TimeSeriesSample],
    val_set: Sequence[TimeSeriesSample] = (),
    on_epoch: EpochCallback | None = None,
    on_step: StepCallback | None = None,
) -> Checkpoint:
    """Fit all parameters with Adam; return the parameters with the best validation loss.

    Every epoch each training sample gets a fresh mask: an observation ratio
    drawn uniformly from ``config.tau_set`` (imputation) or a horizon drawn
    from ``config.horizons`` (forecasting). Without a validation set the
    training loss selects the checkpoint.
    """
    if not train_set:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    model = TVINR(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    best_state, best_val, best_epoch = None, math.inf, 0
    history: list[dict] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        masked = [mask_for_training(train_set[i], config, rng) for i in order]
        loss_sum = kl_sum = 0.0
        for chunk in _batches(masked, config.batch_size):
            terms = elbo_loss(model, collate(chunk, model.dtype), generator=gen)
            if not torch.isfinite(terms.loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}")
            if on_step is not None:
                on_step(step, terms)
            opt.zero_grad(set_to_none=True)
            terms.loss.backward()
            opt.step()
            loss_sum += float(terms.loss.detach()) * len(chunk)
            kl_sum += float(terms.kl.detach()) * len(chunk)
            step += 1
        model.eval()
        train_loss = loss_sum / len(masked)
        if val_set:
            val_loss, _ = evaluate_loss(model, val_set, config, seed=config.seed + 2)
            if not math.isfinite(val_loss):
                raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        else:
            val_loss = train_loss
        record = {"epoch": epoch, "train": train_loss, "val": val_loss, "kl": kl_sum / len(masked)}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    rng_state = {"numpy": rng.bit_generator.state, "torch": gen.get_state().numpy().tobytes().hex()}
    return Checkpoint.from_model(
        model,
        epoch=config.epochs,
        best_epoch=best_epoch,
        best_val=best_val,
        rng_state=json.loads(json.dumps(rng_state)),
        history=history,
    )


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    checked: int
    per_group: dict[str, float]


def grad_check(
    model: TVINR,
    batch: Batch,
    eps_fd: float = 1e-5,
    n_params: int = 120,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autograd against central differences on random scalars from every parameter group.

    The reparameterisation noise is frozen so the loss is a deterministic
    function of the parameters.
    """
    rng = np.random.default_rng(seed)
    eps = torch.from_numpy(rng.standard_normal((len(batch), model.config.dim_z)))
    model.zero_grad(set_to_none=True)
    loss0 = elbo_loss(model, batch, eps=eps.to(model.dtype)).loss
    loss0.backward()
    grads = {n: p.grad.detach().clone().double() for n, p in model.named_parameters() if p.grad is not None}
    if model.dtype != torch.float64:
        # finite differences are too noisy below 64-bit; difference a 64-bit copy instead
        log.warning("gradient check of a %s model against 64-bit finite differences", model.dtype)
        model = copy.deepcopy(model).double()
        batch = Batch(batch.stamps.double(), batch.values.double(), batch.state, batch.covariates.double())
    eps = eps.to(model.dtype)
    params = dict(model.named_parameters())
    # differences below the rounding noise of the loss carry no information
    floor = max(1e-8, 10 * torch.finfo(model.dtype).eps * abs(float(loss0.detach())) / eps_fd)

    groups = model.param_groups()
    per_group_n = max(1, math.ceil(n_params / len(groups)))
    worst, worst_name, checked = 0.0, "", 0
    per_group: dict[str, float] = {}
    with torch.no_grad():
        for group, names in groups.items():
            sizes = np.array([params[n].numel() for n in names])
            picks = rng.choice(int(sizes.sum()), size=min(per_group_n, int(sizes.sum())), replace=False)
            bounds = np.cumsum(sizes)
            gworst = 0.0
            for flat in np.sort(picks):
                t = int(np.searchsorted(bounds, flat, side="right"))
                name = names[t]
                idx = int(flat - (bounds[t - 1] if t else 0))
                p = params[name].view(-1)
                orig = p[idx].item()
                p[idx] = orig + eps_fd
                x_plus = p[idx].item()
                f_plus = float(elbo_loss(model, batch, eps=eps).loss)
                p[idx] = orig - eps_fd
                x_minus = p[idx].item()
                f_minus = float(elbo_loss(model, batch, eps=eps).loss)
                p[idx] = orig
                g_fd = (f_plus - f_minus) / (x_plus - x_minus)
                g_a = float(grads[name].view(-1)[idx]) if name in grads else 0.0
                rel = abs(g_a - g_fd) / max(floor, abs(g_a) + abs(g_fd))
                checked += 1
                gworst = max(gworst, rel)
                if rel >= worst:
                    worst, worst_name = rel, f"{name}[{idx}]"
            per_group[group] = gworst
    return GradCheckResult(worst, worst_name, checked, per_group)
