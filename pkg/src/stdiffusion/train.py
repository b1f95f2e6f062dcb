"""Noise-prediction training with Adam and validation-bound model selection."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .diffusion import vlb_nll
from .events import Dataset, EventSequence
from .model import ModelConfig, STPPModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 256  # events per step
    epochs: int = 100
    seed: int = 0
    validation_every: int = 10
    k_per_event: int = 1
    grad_clip: float | None = 10.0
    max_seconds: float | None = None
    model: ModelConfig = field(default_factory=ModelConfig)


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grads(params, max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def loss_step(eps_true: np.ndarray, eps_pred: ad.Tensor) -> ad.Tensor:
    """Mean squared noise-prediction error over all (time + space) coordinates."""
    return ad.mse(eps_pred, ad.Tensor(eps_true))


def batch_loss(model: STPPModel, seqs: Sequence[EventSequence], rng: np.random.Generator,
               k_per_event: int = 1) -> ad.Tensor:
    """Algorithm-1 objective for every event of ``seqs``: random step, random noise."""
    batch, tg = model.pack(seqs)
    h = model.history(batch)
    rows = np.tile(tg.rows, k_per_event)
    H = {name: ad.take_rows(v, rows) for name, v in h.items()}
    x0_s = np.tile(model.clean_space(tg), (k_per_event, 1))
    x0_t = np.tile(tg.tau, (k_per_event, 1))
    B = len(rows)
    ks = rng.integers(1, model.schedule.K + 1, size=B)
    eps = rng.standard_normal((B, model.d_space + 1))
    ab = model.schedule.alpha_bar[ks - 1][:, None]
    x0 = np.concatenate([x0_s, x0_t], axis=1)
    xk = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    e_s, e_t = model.denoiser.forward(xk[:, :-1], xk[:, -1:], H, ks)
    return loss_step(eps, ad.concat([e_s, e_t], axis=1))


def make_batches(seqs: Sequence[EventSequence], batch_size: int, rng) -> list[list[EventSequence]]:
    order = rng.permutation(len(seqs))
    batches, cur, n = [], [], 0
    for i in order:
        s = seqs[i]
        if cur and n + len(s) > batch_size:
            batches.append(cur)
            cur, n = [], 0
        cur.append(s)
        n += len(s)
    if cur:
        batches.append(cur)
    return batches


def evaluate_nll(model: STPPModel, seqs: Sequence[EventSequence], seed: int = 0,
                 chunk: int = 4096) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Mean per-event (temporal, spatial) bound in data units, plus the per-event values."""
    rng = np.random.default_rng(seed)
    lt, ls = model.stats.log_scale()
    if model.space.is_discrete:
        ls = 0.0
    h, tg = model.history_arrays(seqs)
    x0_s = model.clean_space(tg)
    nts, nss = [], []
    for lo in range(0, len(tg.rows), chunk):
        sl = slice(lo, lo + chunk)
        fn = model.eps_fn({k: v[sl] for k, v in h.items()})
        nt, ns = vlb_nll(x0_s[sl], tg.tau[sl], fn, model.schedule, rng, (lt, ls))
        nts.append(nt)
        nss.append(ns)
    nt, ns = np.concatenate(nts), np.concatenate(nss)
    return float(nt.mean()), float(ns.mean()), nt, ns


@dataclass
class TrainResult:
    model: STPPModel
    best_epoch: int
    best_val: tuple[float, float] | None
    losses: list[float]
    log_rows: list[dict]


def train(dataset: Dataset, config: TrainConfig | None = None,
          on_validation: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit a model on ``dataset.train``; keep the parameters with the best validation bound.

    Without a validation split the final parameters are kept. The test split
    is never touched.
    """
    cfg = config or TrainConfig()
    if cfg.learning_rate < 0 or cfg.batch_size < 1 or cfg.epochs < 0 or cfg.validation_every < 1:
        raise ValueError("invalid training configuration")
    model = STPPModel(dataset.space, dataset.stats, cfg.model, seed=cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    params = list(model.params.values())
    opt = Adam(params, cfg.learning_rate)
    losses, rows = [], []
    best, best_epoch, best_state = None, 0, None
    started = time.monotonic()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        epoch_loss, n = 0.0, 0
        for seqs in make_batches(dataset.train, cfg.batch_size, rng):
            ad.zero_grad(params)
            try:
                loss = batch_loss(model, seqs, rng, cfg.k_per_event)
            except FloatingPointError as exc:
                raise TrainingDiverged(_diagnose(model, step, str(exc))) from exc
            val = float(loss.data)
            if not math.isfinite(val):
                raise TrainingDiverged(_diagnose(model, step, f"loss {val}"))
            ad.backward(loss)
            if cfg.grad_clip:
                clip_grads(params, cfg.grad_clip)
            if cfg.learning_rate > 0:
                opt.step()
            epoch_loss += val
            n += 1
            step += 1
        losses.append(epoch_loss / max(n, 1))
        out_of_time = cfg.max_seconds is not None and time.monotonic() - started > cfg.max_seconds
        if epoch % cfg.validation_every == 0 or epoch == cfg.epochs or out_of_time:
            row = {"epoch": epoch, "train_loss": losses[-1], "val_nll_t": float("nan"), "val_nll_s": float("nan")}
            if dataset.val:
                nt, ns, _, _ = evaluate_nll(model, dataset.val, seed=cfg.seed)
                row["val_nll_t"], row["val_nll_s"] = nt, ns
                if best is None or nt + ns < best[0] + best[1]:
                    best, best_epoch = (nt, ns), epoch
                    best_state = copy.deepcopy(model.state_dict())
            rows.append(row)
            log.info("epoch %d loss %.4f val %.4f %.4f", epoch, row["train_loss"], row["val_nll_t"], row["val_nll_s"])
            if on_validation:
                on_validation(row)
        if out_of_time:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = len(losses)
    return TrainResult(model, best_epoch, best, losses, rows)


def _diagnose(model: STPPModel, step: int, what: str) -> str:
    norms = ", ".join(f"{k}={np.linalg.norm(v.data):.3g}" for k, v in model.params.items())
    return f"training diverged at step {step}: {what}; parameter norms: {norms}"
