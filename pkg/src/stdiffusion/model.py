"""Encoder + denoiser + schedule + normalization bundled as one model, and its checkpoint file.

Checkpoint: a JSON document ``{"format": "stdiffusion-checkpoint", "version": 1,
"config": ..., "space": ..., "stats": ..., "schedule": ..., "params": {name: nested list},
"meta": ...}``. Floats are written with ``repr`` so reloading is exact.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import Denoiser
from .diffusion import DiffusionSchedule, make_schedule, round_to_location
from .encoder import Encoder, pack
from .events import EventSequence, NormalizationStats, SpaceSpec, intervals

CHECKPOINT_FORMAT = "stdiffusion-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden: int = 64
    branch_layers: int = 3
    K: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class Targets:
    """Standardized next-event targets and the packed row that conditions each."""

    rows: np.ndarray  # (B,) packed row index of the conditioning history
    tau: np.ndarray  # (B, 1)
    space: np.ndarray  # (B, D) standardized coords, or (B,) ids for discrete space


class STPPModel:
    def __init__(self, space: SpaceSpec, stats: NormalizationStats, config: ModelConfig | None = None,
                 seed: int = 0):
        self.space = space
        self.stats = stats
        self.config = config or ModelConfig()
        cfg = self.config
        self.schedule = make_schedule(cfg.K, cfg.beta_start, cfg.beta_end)
        ss = np.random.SeedSequence(seed).spawn(2)
        self.encoder = Encoder(space.size, cfg.hidden, np.random.default_rng(ss[0]))
        d_space = cfg.hidden if space.is_discrete else space.size
        self.denoiser = Denoiser(d_space, cfg.hidden, cfg.branch_layers, np.random.default_rng(ss[1]))

    @property
    def d_space(self) -> int:
        return self.denoiser.d_space

    @property
    def params(self) -> dict[str, Tensor]:
        out = {"enc." + k: v for k, v in self.encoder.params.items()}
        out.update({"den." + k: v for k, v in self.denoiser.params.items()})
        return out

    # -- data plumbing -----------------------------------------------------

    def space_features(self, space_col: np.ndarray) -> np.ndarray:
        if self.space.is_discrete:
            return np.eye(self.space.size)[np.asarray(space_col, dtype=np.int64)]
        return self.stats.norm_space(space_col)

    def location_table(self) -> np.ndarray:
        """Embedding of every discrete location (row per id)."""
        return self.encoder.params["W_e"].data.copy()

    def diffusion_table(self) -> np.ndarray:
        """Location embeddings centred and scaled to unit RMS, the discrete diffusion targets.

        One scalar scale keeps nearest-row rounding identical to the raw table,
        while matching the unit variance the noise schedule assumes.
        """
        table = self.location_table()
        table = table - table.mean(axis=0)
        rms = float(np.sqrt(np.mean(table**2)))
        return table / rms if rms > 0 else table

    def pack(self, seqs: Sequence[EventSequence]):
        """Pack sequences; returns the batch and the targets for every event."""
        items = []
        for s in seqs:
            items.append((self.stats.norm_time(s.times, s.window_start), self.space_features(s.space)))
        batch = pack(items, self.config.hidden)
        rows = np.concatenate([o + np.arange(L) for o, L in zip(batch.offsets, batch.lengths)])
        tau = np.concatenate([self.stats.norm_tau(intervals(s)) for s in seqs])[:, None]
        if self.space.is_discrete:
            space = np.concatenate([s.space for s in seqs])
        else:
            space = np.concatenate([self.stats.norm_space(s.space) for s in seqs], axis=0)
        return batch, Targets(rows, tau, space)

    def history(self, batch, keep_attention=None) -> dict[str, Tensor]:
        return self.encoder.forward(batch, keep_attention)

    def clean_space(self, targets: Targets) -> np.ndarray:
        """Diffusion-space x_0 for space: coordinates, or (constant) standardized location embeddings."""
        if self.space.is_discrete:
            return self.diffusion_table()[targets.space]
        return targets.space

    # -- noise prediction --------------------------------------------------

    def eps_fn(self, h: dict[str, np.ndarray]):
        """Graph-free noise predictor over fixed history rows, for sampling and the bound."""
        H = {k: Tensor(v) for k, v in h.items()}

        def fn(s_k, tau_k, k):
            with ad.no_grad():
                e_s, e_t = self.denoiser.forward(s_k, tau_k, H, k)
            return e_s.data, e_t.data

        return fn

    def history_arrays(self, seqs: Sequence[EventSequence], final: bool = False):
        """History rows (numpy) conditioning each event, or only the post-sequence rows if ``final``."""
        batch, tg = self.pack(seqs)
        with ad.no_grad():
            h = self.history(batch)
        rows = batch.offsets + batch.lengths if final else tg.rows
        return {k: v.data[rows] for k, v in h.items()}, tg

    def decode_space(self, s0: np.ndarray) -> np.ndarray:
        if self.space.is_discrete:
            return round_to_location(s0, self.diffusion_table())
        return self.stats.denorm_space(s0)

    # -- checkpoint --------------------------------------------------------

    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.params
        missing = set(params) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise CheckpointError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def save(self, path, meta: dict | None = None) -> None:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "space": self.space.to_dict(),
            "stats": self.stats.to_dict(),
            "schedule": self.schedule.to_dict(),
            "params": {k: v.tolist() for k, v in self.state_dict().items()},
            "meta": meta or {},
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def load(cls, path) -> tuple["STPPModel", dict]:
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a model checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {doc.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
            )
        model = cls(SpaceSpec.from_dict(doc["space"]), NormalizationStats.from_dict(doc["stats"]),
                    ModelConfig(**doc["config"]))
        model.schedule = DiffusionSchedule.from_dict(doc["schedule"])
        model.load_state_dict(doc["params"])
        return model, doc.get("meta", {})
