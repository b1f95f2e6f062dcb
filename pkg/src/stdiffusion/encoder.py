"""Self-attention history encoder with spatial, temporal and joint streams.

Weights are stored input-major (``x @ W``). A batch of sequences is packed
row-wise: each sequence contributes a learned start row followed by one row
per event, and a block-diagonal causal mask keeps attention inside each
sequence and on positions at or before the query. Row ``j`` of a sequence
summarizes events ``1..j`` and conditions event ``j+1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STREAMS = ("s", "t", "st")


def positional_encode(t, M: int) -> np.ndarray:
    """cos on odd (1-based) positions, sin on even ones, frequency 1/10000^((j-1)/M).

    Vectorized over ``t``: returns shape ``t.shape + (M,)``.
    """
    if M % 2:
        raise ValueError(f"embedding dimension must be even, got {M}")
    t = np.asarray(t, dtype=np.float64)
    j = np.arange(M)  # 0-based, so j here is (j-1) in 1-based terms
    angle = t[..., None] / np.power(10000.0, j / M)
    return np.where(j % 2 == 0, np.cos(angle), np.sin(angle))


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class PackedBatch:
    """Row layout of a packed batch of sequences."""

    features: np.ndarray  # (R, D_in) space features, zero on start rows
    start: np.ndarray  # (R, 1) indicator of start rows
    pos: np.ndarray  # (R, M) positional encodings, zero on start rows
    mask: np.ndarray  # (R, R) allowed attention
    offsets: np.ndarray  # first row of each sequence
    lengths: np.ndarray  # events per sequence


def pack(seqs, M: int) -> PackedBatch:
    """``seqs``: list of (normalized absolute times (L,), space features (L, D_in))."""
    lengths = np.array([len(t) for t, _ in seqs], dtype=np.int64)
    rows = lengths + 1
    R = int(rows.sum())
    d_in = seqs[0][1].shape[1]
    features = np.zeros((R, d_in))
    start = np.zeros((R, 1))
    pos = np.zeros((R, M))
    group = np.repeat(np.arange(len(seqs)), rows)
    offsets = np.concatenate([[0], np.cumsum(rows)[:-1]])
    for o, (t, f) in zip(offsets, seqs):
        start[o] = 1.0
        features[o + 1 : o + 1 + len(t)] = f
        pos[o + 1 : o + 1 + len(t)] = positional_encode(t, M)
    idx = np.arange(R)
    mask = (group[:, None] == group[None, :]) & (idx[None, :] <= idx[:, None])
    return PackedBatch(features, start, pos, mask, offsets, lengths)


class Encoder:
    def __init__(self, d_in: int, M: int = 64, rng=None):
        if M % 2:
            raise ValueError("M must be even")
        rng = np.random.default_rng(rng)
        self.d_in, self.M = d_in, M
        p = {
            "W_e": uniform_init(rng, d_in, (d_in, M)),
            "start": uniform_init(rng, M, (1, M)),
        }
        for name in STREAMS:
            for w in ("Wq", "Wk", "Wv", "ff1", "ff2"):
                p[f"{name}.{w}"] = uniform_init(rng, M, (M, M))
            p[f"{name}.ff1_b"] = uniform_init(rng, M, (M,))
            p[f"{name}.ff2_b"] = uniform_init(rng, M, (M,))
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def embed_space(self, s) -> np.ndarray:
        """Linear spatial embedding of raw feature rows (one-hot rows for discrete ids)."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        if s.shape[1] != self.d_in:
            raise ValueError(f"space features have {s.shape[1]} columns, expected {self.d_in}")
        return s @ self.params["W_e"].data

    def _stream(self, name: str, E: Tensor, mask: np.ndarray, keep: dict | None) -> Tensor:
        p = self.params
        Q = E @ p[f"{name}.Wq"]
        K = E @ p[f"{name}.Wk"]
        V = E @ p[f"{name}.Wv"]
        A = ad.softmax(ad.scale(Q @ K.T, 1.0 / np.sqrt(self.M)), axis=1, mask=mask)
        if keep is not None:
            keep[name] = A.data
        S = A @ V
        hidden = ad.relu(S @ p[f"{name}.ff1"] + p[f"{name}.ff1_b"])
        return hidden @ p[f"{name}.ff2"] + p[f"{name}.ff2_b"]

    def forward(self, batch: PackedBatch, keep_attention: dict | None = None) -> dict[str, Tensor]:
        """Hidden states for every packed row, keyed by stream."""
        p = self.params
        start = Tensor(batch.start) @ p["start"]
        E_s = Tensor(batch.features) @ p["W_e"] + start
        E_t = Tensor(batch.pos) + start
        E_st = Tensor(batch.features) @ p["W_e"] + Tensor(batch.pos) + start
        embeds = {"s": E_s, "t": E_t, "st": E_st}
        return {n: self._stream(n, embeds[n], batch.mask, keep_attention) for n in STREAMS}
