"""Co-attention noise predictor.

Two branch networks turn the noisy location and noisy interval (each with
its own history stream and the step embedding) into feature vectors. A
softmax over the two branches, computed from the joint history state and
the step, mixes them separately for the space and the time output heads.
Index 0 of every weight pair is the space branch, index 1 the time branch.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import positional_encode, uniform_init


@lru_cache(maxsize=8)
def _step_table(M: int, kmax: int) -> np.ndarray:
    table = positional_encode(np.arange(kmax + 1, dtype=np.float64), M)
    table.setflags(write=False)
    return table


def step_embed(k, M: int, K: int | None = None) -> np.ndarray:
    """Sinusoidal embedding of the integer diffusion step(s) ``k``."""
    k_arr = np.asarray(k, dtype=np.int64)
    if K is not None and (np.any(k_arr < 1) or np.any(k_arr > K)):
        raise ValueError(f"step outside 1..{K}")
    if np.any(k_arr < 0):
        raise ValueError("negative diffusion step")
    kmax = max(1024, int(k_arr.max(initial=0)))
    return _step_table(M, 1 << (kmax - 1).bit_length())[k_arr]


class Denoiser:
    def __init__(self, d_space: int, M: int = 64, layers: int = 3, rng=None):
        if layers < 1:
            raise ValueError("need at least one branch layer")
        rng = np.random.default_rng(rng)
        self.d_space, self.M, self.layers = d_space, M, layers
        p = {
            "W_s": uniform_init(rng, d_space, (d_space, M)),
            "b_s": uniform_init(rng, d_space, (M,)),
            "W_sh": uniform_init(rng, M, (M, M)),
            "b_sh": uniform_init(rng, M, (M,)),
            "W_t": uniform_init(rng, 1, (1, M)),
            "b_t": uniform_init(rng, 1, (M,)),
            "W_th": uniform_init(rng, M, (M, M)),
            "b_th": uniform_init(rng, M, (M,)),
            # zero co-attention start: both branches weighted 0.5
            "W_sa": np.zeros((2 * M, 2)),
            "b_sa": np.zeros(2),
            "W_ta": np.zeros((2 * M, 2)),
            "b_ta": np.zeros(2),
            "head_s": uniform_init(rng, M, (M, d_space)),
            "head_s_b": uniform_init(rng, M, (d_space,)),
            # linear path from the noisy location; a width-M ReLU branch cannot carry an M-dim input
            "skip_s": np.zeros((d_space, d_space)),
            "head_t": uniform_init(rng, M, (M, 1)),
            "head_t_b": uniform_init(rng, M, (1,)),
        }
        for br in ("s", "t"):
            for j in range(2, layers + 1):
                p[f"{br}.L{j}"] = uniform_init(rng, M, (M, M))
                p[f"{br}.L{j}_b"] = uniform_init(rng, M, (M,))
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def co_attention(self, h_st: Tensor, e_k: Tensor) -> tuple[Tensor, Tensor]:
        """Branch weights (alpha_s, alpha_t), each (B, 2) with rows summing to 1."""
        p = self.params
        ctx = ad.concat([h_st, e_k], axis=1)
        alpha_s = ad.softmax(ctx @ p["W_sa"] + p["b_sa"], axis=1)
        alpha_t = ad.softmax(ctx @ p["W_ta"] + p["b_ta"], axis=1)
        return alpha_s, alpha_t

    def _branch(self, br: str, x: Tensor, h: Tensor, e_k: Tensor) -> Tensor:
        p = self.params
        W, b, Wh, bh = ("W_s", "b_s", "W_sh", "b_sh") if br == "s" else ("W_t", "b_t", "W_th", "b_th")
        out = ad.relu(x @ p[W] + p[b] + h @ p[Wh] + p[bh] + e_k)
        for j in range(2, self.layers + 1):
            out = ad.relu(out @ p[f"{br}.L{j}"] + p[f"{br}.L{j}_b"] + e_k)
        return out

    def forward(self, s_k, tau_k, h: dict[str, Tensor], k, return_alpha: bool = False):
        """Predicted noise (eps_s (B, d_space), eps_t (B, 1)) at steps ``k`` (scalar or (B,))."""
        s_k = s_k if isinstance(s_k, Tensor) else Tensor(s_k)
        tau_k = tau_k if isinstance(tau_k, Tensor) else Tensor(tau_k)
        B = s_k.shape[0]
        if s_k.shape != (B, self.d_space) or tau_k.shape != (B, 1):
            raise ad.ShapeError(f"noisy state shapes {s_k.shape}, {tau_k.shape} vs d_space={self.d_space}")
        k_arr = np.broadcast_to(np.asarray(k), (B,))
        e_k = Tensor(step_embed(k_arr, self.M))
        x_s = self._branch("s", s_k, h["s"], e_k)
        x_t = self._branch("t", tau_k, h["t"], e_k)
        alpha_s, alpha_t = self.co_attention(h["st"], e_k)
        p = self.params
        mixed_s = _mix(alpha_s, x_s, x_t)
        mixed_t = _mix(alpha_t, x_s, x_t)
        eps_s = mixed_s @ p["head_s"] + p["head_s_b"] + s_k @ p["skip_s"]
        eps_t = mixed_t @ p["head_t"] + p["head_t_b"]
        if return_alpha:
            return eps_s, eps_t, alpha_s, alpha_t
        return eps_s, eps_t


def _mix(alpha: Tensor, x_s: Tensor, x_t: Tensor) -> Tensor:
    w_s = ad.column(alpha, 0)
    w_t = ad.column(alpha, 1)
    return ad.scale_rows(x_s, w_s) + ad.scale_rows(x_t, w_t)
