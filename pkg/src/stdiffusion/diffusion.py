"""Forward noising, reverse sampling and the variational bound on NLL.

Everything here works on plain arrays whose last axis is the coordinate
axis; the space and time coordinates of an event share one schedule.
``eps_fn(x_s, x_t, k)`` is any noise predictor returning ``(eps_s, eps_t)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

EpsFn = Callable[[np.ndarray, np.ndarray, int], tuple[np.ndarray, np.ndarray]]

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    beta: np.ndarray  # beta[k-1] is beta_k

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        object.__setattr__(self, "beta", b)
        if b.ndim != 1 or len(b) < 1:
            raise ValueError("schedule needs at least one step")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        if np.any(np.diff(b) < 0):
            raise ValueError("beta must be nondecreasing")
        object.__setattr__(self, "alpha", 1.0 - b)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - b))

    @property
    def K(self) -> int:
        return len(self.beta)

    # 1-based accessors matching the step index k
    def b(self, k: int) -> float:
        return float(self.beta[k - 1])

    def a(self, k: int) -> float:
        return float(self.alpha[k - 1])

    def abar(self, k: int) -> float:
        """Cumulative product up to step k; abar(0) = 1."""
        return 1.0 if k == 0 else float(self.alpha_bar[k - 1])

    def posterior_var(self, k: int) -> float:
        """Variance of q(x_{k-1} | x_k, x_0)."""
        return self.b(k) * (1.0 - self.abar(k - 1)) / (1.0 - self.abar(k))

    def to_dict(self) -> dict:
        return {"beta": [float(v) for v in self.beta]}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return cls(np.asarray(d["beta"], dtype=np.float64))


def make_schedule(K: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, K) if K > 1 else np.array([beta_start]))


def q_sample(x0, k: int, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form draw of x_k given x_0 and a standard normal ``eps``."""
    if not 1 <= k <= schedule.K:
        raise ValueError(f"step {k} outside 1..{schedule.K}")
    ab = schedule.abar(k)
    return math.sqrt(ab) * np.asarray(x0) + math.sqrt(1.0 - ab) * np.asarray(eps)


def q_step(x_prev, k: int, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """One forward transition x_{k-1} -> x_k."""
    b = schedule.b(k)
    return math.sqrt(1.0 - b) * np.asarray(x_prev) + math.sqrt(b) * np.asarray(eps)


def p_mean(x_k, eps_pred, k: int, schedule: DiffusionSchedule) -> np.ndarray:
    b, ab = schedule.b(k), schedule.abar(k)
    return (np.asarray(x_k) - b / math.sqrt(1.0 - ab) * np.asarray(eps_pred)) / math.sqrt(1.0 - b)


def p_sample_step(x_k, eps_pred, z, k: int, schedule: DiffusionSchedule) -> np.ndarray:
    """Reverse update x_k -> x_{k-1} with fixed standard deviation sqrt(beta_k).

    ``z`` must be all zeros at k = 1.
    """
    if k < 1:
        raise ValueError("cannot step below k = 1")
    if k == 1 and np.any(np.asarray(z) != 0):
        raise ValueError("the final reverse step takes no noise (z must be 0 at k = 1)")
    return p_mean(x_k, eps_pred, k, schedule) + math.sqrt(schedule.b(k)) * np.asarray(z)


def reverse_chain(
    eps_fn: EpsFn,
    n: int,
    d_space: int,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    snapshots: Iterable[int] = (),
) -> tuple[np.ndarray, np.ndarray, dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Run the reverse process from N(0, I) for ``n`` events.

    Returns standardized ``(s_0, tau_0, snaps)``; ``snaps[k]`` holds the
    state after reaching step k for every requested k.
    """
    want = set(snapshots)
    s = rng.standard_normal((n, d_space))
    tau = rng.standard_normal((n, 1))
    snaps = {}
    if schedule.K in want:
        snaps[schedule.K] = (s.copy(), tau.copy())
    for k in range(schedule.K, 0, -1):
        if k > 1:
            z_s = rng.standard_normal(s.shape)
            z_t = rng.standard_normal(tau.shape)
        else:
            z_s, z_t = np.zeros_like(s), np.zeros_like(tau)
        eps_s, eps_t = eps_fn(s, tau, k)
        s = p_sample_step(s, eps_s, z_s, k, schedule)
        tau = p_sample_step(tau, eps_t, z_t, k, schedule)
        if k - 1 in want:
            snaps[k - 1] = (s.copy(), tau.copy())
    return s, tau, snaps


def snapshot_steps(K: int) -> list[int]:
    """Steps K, 3K/4, K/2, K/4, 1, 0 (deduplicated, descending)."""
    steps = [K, (3 * K) // 4, K // 2, K // 4, 1, 0]
    out = []
    for s in steps:
        if s not in out:
            out.append(s)
    return out


# ---------------------------------------------------------------------------
# variational bound


def gaussian_kl(mean_q, var_q, mean_p, var_p):
    return 0.5 * (np.log(var_p / var_q) + (var_q + (mean_q - mean_p) ** 2) / var_p - 1.0)


def vlb_terms(
    x0_s: np.ndarray,
    x0_t: np.ndarray,
    eps_fn: EpsFn,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Per-event, per-coordinate pieces of the diffusion bound in standardized units.

    Returns arrays shaped like the inputs: ``prior`` (KL of x_K to N(0,1)),
    ``kl`` (sum over k = 2..K of the reverse-transition KLs) and ``recon``
    (-log p(x_0 | x_1)). One forward draw per step.
    """
    K = schedule.K
    x0 = np.concatenate([x0_s, x0_t], axis=1)
    ds = x0_s.shape[1]
    abK = schedule.abar(K)
    prior = gaussian_kl(math.sqrt(abK) * x0, 1.0 - abK, 0.0, 1.0)
    kl = np.zeros_like(x0)
    recon = np.zeros_like(x0)
    for k in range(K, 0, -1):
        eps = rng.standard_normal(x0.shape)
        xk = q_sample(x0, k, eps, schedule)
        e_s, e_t = eps_fn(xk[:, :ds], xk[:, ds:], k)
        mu_p = p_mean(xk, np.concatenate([e_s, e_t], axis=1), k, schedule)
        var_p = schedule.b(k)
        if k > 1:
            ab_prev, ab = schedule.abar(k - 1), schedule.abar(k)
            c0 = math.sqrt(ab_prev) * schedule.b(k) / (1.0 - ab)
            ck = math.sqrt(schedule.a(k)) * (1.0 - ab_prev) / (1.0 - ab)
            mu_q = c0 * x0 + ck * xk
            kl += gaussian_kl(mu_q, schedule.posterior_var(k), mu_p, var_p)
        else:
            recon = 0.5 * (LOG_2PI + math.log(var_p) + (x0 - mu_p) ** 2 / var_p)
    split = lambda a: (a[:, :ds], a[:, ds:])  # noqa: E731
    out = {}
    for name, arr in (("prior", prior), ("kl", kl), ("recon", recon)):
        out[name + "_s"], out[name + "_t"] = split(arr)
    return out


def vlb_nll(
    x0_s: np.ndarray,
    x0_t: np.ndarray,
    eps_fn: EpsFn,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    log_scale: tuple[float, float] = (0.0, 0.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Per-event (temporal, spatial) NLL bounds in nats.

    ``log_scale`` holds the log-Jacobians of the standardization, so the
    result is in data units.
    """
    parts = vlb_terms(x0_s, x0_t, eps_fn, schedule, rng)
    nll_t = (parts["prior_t"] + parts["kl_t"] + parts["recon_t"]).sum(axis=1) + log_scale[0]
    nll_s = (parts["prior_s"] + parts["kl_s"] + parts["recon_s"]).sum(axis=1) + log_scale[1]
    return nll_t, nll_s


def round_to_location(s0, table: np.ndarray) -> np.ndarray:
    """Nearest row of ``table`` (one embedding per location); ties go to the smaller id."""
    s0 = np.atleast_2d(np.asarray(s0, dtype=np.float64))
    d2 = ((s0[:, None, :] - table[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)  # argmin returns the first minimum
