"""Next-event prediction, error metrics, likelihood reports and diagnostics exports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import step_embed
from .diffusion import reverse_chain
from .events import EventSequence
from .model import STPPModel
from .train import evaluate_nll


def rmse(truth, pred) -> float:
    truth, pred = np.asarray(truth, dtype=np.float64), np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape or truth.size == 0:
        raise ValueError(f"rmse: shapes {truth.shape} and {pred.shape}")
    return float(np.sqrt(np.mean((truth - pred) ** 2)))


def euclid(truth, pred) -> float:
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    if truth.shape != pred.shape or truth.size == 0:
        raise ValueError(f"euclid: shapes {truth.shape} and {pred.shape}")
    return float(np.mean(np.linalg.norm(truth - pred, axis=1)))


def accuracy(truth, pred) -> float:
    truth, pred = np.asarray(truth), np.asarray(pred)
    if truth.shape != pred.shape or truth.size == 0:
        raise ValueError(f"accuracy: shapes {truth.shape} and {pred.shape}")
    return float(np.mean(truth == pred))


def energy_distance(x, y) -> float:
    """Multivariate energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| (V-statistic)."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    return float(2 * cdist(x, y).mean() - cdist(x, x).mean() - cdist(y, y).mean())


@dataclass
class MetricsReport:
    nll_temporal: float
    nll_spatial: float
    rmse_time: float
    euclid_space: float | None
    accuracy: float | None
    n_events: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def sample_events(model: STPPModel, h: dict[str, np.ndarray], n_samples: int, rng: np.random.Generator,
                  snapshots=(), chunk: int = 8192):
    """Draw ``n_samples`` next events for each history row in ``h``.

    Returns (tau (B, n), space (B, n, D) or ids (B, n), snapshots) in data units;
    snapshots hold standardized states keyed by step.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    B = len(next(iter(h.values())))
    rep = {k: np.repeat(v, n_samples, axis=0) for k, v in h.items()}
    total = B * n_samples
    s_parts, t_parts, snaps = [], [], {}
    for lo in range(0, total, chunk):
        sl = slice(lo, min(lo + chunk, total))
        fn = model.eps_fn({k: v[sl] for k, v in rep.items()})
        s0, t0, sn = reverse_chain(fn, sl.stop - sl.start, model.d_space, model.schedule, rng, snapshots)
        s_parts.append(s0)
        t_parts.append(t0)
        for k, v in sn.items():
            snaps.setdefault(k, []).append(v)
    s0 = np.concatenate(s_parts)
    tau = model.stats.denorm_tau(np.concatenate(t_parts)[:, 0]).reshape(B, n_samples)
    space = model.decode_space(s0)
    space = space.reshape(B, n_samples) if model.space.is_discrete else space.reshape(B, n_samples, -1)
    snaps = {k: (np.concatenate([a for a, _ in v]), np.concatenate([b for _, b in v])) for k, v in snaps.items()}
    return tau, space, snaps


def point_predictions(model: STPPModel, tau: np.ndarray, space: np.ndarray):
    """Sample mean of intervals (clipped at 0) and of locations, or majority location."""
    tau_hat = np.clip(tau, 0.0, None).mean(axis=1)
    if model.space.is_discrete:
        counts = np.zeros((space.shape[0], model.space.size), dtype=np.int64)
        for j in range(space.shape[1]):
            np.add.at(counts, (np.arange(space.shape[0]), space[:, j]), 1)
        return tau_hat, counts.argmax(axis=1)  # argmax: smallest id wins ties
    return tau_hat, space.mean(axis=1)


def predict_next(model: STPPModel, history: EventSequence | None, n_samples: int = 30, seed=0,
                 window_start: float = 0.0):
    """Predicted (time, location) of the event after ``history`` (None for a cold start)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    if history is None:
        dummy = EventSequence(np.array([window_start]), _dummy_space(model), window_start)
        h, _ = model.history_arrays([dummy])  # row 0: start token only
        last = window_start
    else:
        h, _ = model.history_arrays([history], final=True)
        last = float(history.times[-1])
    tau, space, _ = sample_events(model, h, n_samples, rng)
    tau_hat, s_hat = point_predictions(model, tau, space)
    return last + float(tau_hat[0]), s_hat[0]


def _dummy_space(model: STPPModel) -> np.ndarray:
    if model.space.is_discrete:
        return np.zeros(1, dtype=np.int64)
    return model.stats.space_mean[None, :].copy()


def teacher_forced_predictions(model: STPPModel, seqs: Sequence[EventSequence], n_samples: int = 30,
                               seed=0):
    """Predict every event from its true history; returns dict of truth/prediction arrays."""
    rng = np.random.default_rng(seed)
    h, _ = model.history_arrays(seqs)
    tau, space, _ = sample_events(model, h, n_samples, rng)
    tau_hat, s_hat = point_predictions(model, tau, space)
    prev = np.concatenate([np.concatenate([[s.window_start], s.times[:-1]]) for s in seqs])
    truth_t = np.concatenate([s.times for s in seqs])
    truth_s = np.concatenate([s.space for s in seqs])
    return {"t": truth_t, "t_hat": prev + tau_hat, "s": truth_s, "s_hat": s_hat}


def evaluate(model: STPPModel, seqs: Sequence[EventSequence], n_samples: int = 30, seed: int = 0
             ) -> MetricsReport:
    if not seqs:
        raise ValueError("cannot evaluate an empty split")
    # canonical order, so the report does not depend on how the split is listed
    seqs = sorted(seqs, key=lambda s: (s.seq_id, s.window_start))
    nt, ns, _, _ = evaluate_nll(model, seqs, seed=seed)
    pred = teacher_forced_predictions(model, seqs, n_samples, seed + 1)
    disc = model.space.is_discrete
    return MetricsReport(
        nll_temporal=nt,
        nll_spatial=ns,
        rmse_time=rmse(pred["t"], pred["t_hat"]),
        euclid_space=None if disc else euclid(pred["s"], pred["s_hat"]),
        accuracy=accuracy(pred["s"], pred["s_hat"]) if disc else None,
        n_events=sum(len(s) for s in seqs),
    )


def attention_trace(model: STPPModel, seqs: Sequence[EventSequence], steps=None) -> list[dict]:
    """Mean co-attention weights per step over every event's history.

    One row per (step, domain) with the weights the domain's noise head puts
    on the time branch and on the space branch.
    """
    steps = list(range(model.schedule.K, 0, -1)) if steps is None else list(steps)
    h, _ = model.history_arrays(seqs)
    h_st = Tensor(h["st"])
    rows = []
    with ad.no_grad():
        for k in steps:
            e_k = Tensor(step_embed(np.full(len(h["st"]), k), model.config.hidden, model.schedule.K))
            a_s, a_t = model.denoiser.co_attention(h_st, e_k)
            ms, mt = a_s.data.mean(axis=0), a_t.data.mean(axis=0)
            rows.append({"step": k, "domain": "space", "weight_on_time": float(ms[1]), "weight_on_space": float(ms[0])})
            rows.append({"step": k, "domain": "time", "weight_on_time": float(mt[1]), "weight_on_space": float(mt[0])})
    return rows


def cross_attention(trace: list[dict], max_step: int) -> tuple[float, float]:
    """Mean cross-domain weights (space on time, time on space) over steps <= max_step."""
    sp = [r["weight_on_time"] for r in trace if r["domain"] == "space" and r["step"] <= max_step]
    tm = [r["weight_on_space"] for r in trace if r["domain"] == "time" and r["step"] <= max_step]
    return float(np.mean(sp)), float(np.mean(tm))


# ---------------------------------------------------------------------------
# exports


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path, header: Sequence[str], rows, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) if isinstance(r, dict) else _fmt(x) for h, x in zip(header, _row(r, header))])


def _row(r, header):
    return [r[h] for h in header] if isinstance(r, dict) else list(r)


TRACE_HEADER = ("step", "domain", "weight_on_time", "weight_on_space")
RESULTS_HEADER = ("dataset", "split", "K", "nll_t", "nll_s", "rmse", "euclid", "accuracy", "seed")


def trajectory_rows(model: STPPModel, snaps: dict[int, tuple[np.ndarray, np.ndarray]]):
    """Rows ``step,sample_id,z_tau,z_s_1..z_s_D`` of the standardized diffusion state.

    Step K is the N(0, I) start; step 0 is comparable with standardized data
    (location embeddings for discrete space).
    """
    for k in sorted(snaps, reverse=True):
        s, tau = snaps[k]
        for i in range(len(tau)):
            yield [k, i, float(tau[i, 0]), *map(float, s[i])]


def trajectory_header(model: STPPModel) -> list[str]:
    return ["step", "sample_id", "z_tau"] + [f"z_s_{j + 1}" for j in range(model.d_space)]


def poisson_interval_nll(train_seqs: Sequence[EventSequence], seqs: Sequence[EventSequence]) -> float:
    """Per-event interval NLL of the maximum-likelihood homogeneous Poisson process."""
    rate = 1.0 / np.mean(np.concatenate([s.intervals() for s in train_seqs]))
    tau = np.concatenate([s.intervals() for s in seqs])
    return float(-math.log(rate) + rate * tau.mean())
