"""Event sequences, dataset files, z-score normalization and splits.

Events file (CSV, header required)::

    seq_id,t,s_1,...,s_D        # continuous space
    seq_id,t,loc_id             # discrete space

Rows are grouped by ``seq_id`` with nondecreasing ``t``. A companion file
``<stem>.windows.csv`` holds ``seq_id,window_start,window_end,split``; when
it is missing every window starts at 0, ends at the last event, and all
sequences land in the train split unless ``split_fractions`` is given.

The JSON form carries the same fields::

    {"space": {"kind": "continuous", "dim": 2},
     "sequences": [{"seq_id": 0, "window_start": 0.0, "window_end": 10.0,
                    "split": "train", "events": [[t, s1, s2], ...]}]}
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SpaceSpec:
    kind: str  # "continuous" | "discrete"
    size: int  # D for continuous, N for discrete

    def __post_init__(self):
        if self.kind == "continuous":
            if self.size not in (1, 2, 3):
                raise ValueError(f"continuous space needs D in {{1,2,3}}, got {self.size}")
        elif self.kind == "discrete":
            if self.size < 2:
                raise ValueError(f"discrete space needs N >= 2, got {self.size}")
        else:
            raise ValueError(f"unknown space kind {self.kind!r}")

    @classmethod
    def continuous(cls, dim: int) -> "SpaceSpec":
        return cls("continuous", dim)

    @classmethod
    def discrete(cls, n: int) -> "SpaceSpec":
        return cls("discrete", n)

    @property
    def is_discrete(self) -> bool:
        return self.kind == "discrete"

    def to_dict(self) -> dict:
        key = "n" if self.is_discrete else "dim"
        return {"kind": self.kind, key: self.size}

    @classmethod
    def from_dict(cls, d: dict) -> "SpaceSpec":
        return cls(d["kind"], int(d["n"] if d["kind"] == "discrete" else d["dim"]))


@dataclass(frozen=True)
class Event:
    t: float
    s: tuple[float, ...] | int


@dataclass(frozen=True, eq=False)
class EventSequence:
    """``times`` has shape (L,); ``space`` is (L, D) float or (L,) int location ids."""

    times: np.ndarray
    space: np.ndarray
    window_start: float = 0.0
    window_end: float | None = None
    seq_id: int = 0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        space = np.asarray(self.space)
        object.__setattr__(self, "times", times)
        if len(times) < 1:
            raise ValueError(f"sequence {self.seq_id} is empty")
        if not np.all(np.isfinite(times)):
            raise ValueError(f"sequence {self.seq_id} has non-finite times")
        if np.any(np.diff(times) < 0):
            raise ValueError(f"sequence {self.seq_id}: timestamps decrease")
        if self.window_start > times[0]:
            raise ValueError(f"sequence {self.seq_id}: window_start after first event")
        end = float(times[-1]) if self.window_end is None else float(self.window_end)
        if end < times[-1]:
            raise ValueError(f"sequence {self.seq_id}: window_end before last event")
        object.__setattr__(self, "window_start", float(self.window_start))
        object.__setattr__(self, "window_end", end)
        if space.dtype.kind in "iu":
            space = space.astype(np.int64).reshape(-1)
        else:
            space = space.astype(np.float64)
            if space.ndim == 1:
                space = space.reshape(-1, 1)
            if not np.all(np.isfinite(space)):
                raise ValueError(f"sequence {self.seq_id} has non-finite coordinates")
        if space.shape[0] != len(times):
            raise ValueError(f"sequence {self.seq_id}: {len(times)} times vs {space.shape[0]} locations")
        object.__setattr__(self, "space", space)

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[Event]:
        for i, t in enumerate(self.times):
            s = self.space[i]
            yield Event(float(t), int(s) if self.space.ndim == 1 else tuple(float(v) for v in s))

    @property
    def is_discrete(self) -> bool:
        return self.space.ndim == 1

    def intervals(self) -> np.ndarray:
        return intervals(self)

    def same_as(self, other: "EventSequence") -> bool:
        return (
            self.seq_id == other.seq_id
            and self.window_start == other.window_start
            and self.window_end == other.window_end
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.space, other.space)
        )


def intervals(seq: EventSequence) -> np.ndarray:
    """Inter-event times; the first is measured from the window start."""
    return np.diff(seq.times, prepend=seq.window_start)


@dataclass(frozen=True)
class NormalizationStats:
    time_interval_mean: float
    time_interval_std: float
    space_mean: np.ndarray | None = None
    space_std: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = {"time_interval_mean": self.time_interval_mean, "time_interval_std": self.time_interval_std}
        if self.space_mean is not None:
            d["space_mean"] = [float(v) for v in self.space_mean]
            d["space_std"] = [float(v) for v in self.space_std]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        sm = d.get("space_mean")
        return cls(
            float(d["time_interval_mean"]),
            float(d["time_interval_std"]),
            None if sm is None else np.asarray(sm, dtype=np.float64),
            None if sm is None else np.asarray(d["space_std"], dtype=np.float64),
        )

    def norm_tau(self, tau):
        return (np.asarray(tau, dtype=np.float64) - self.time_interval_mean) / self.time_interval_std

    def denorm_tau(self, z):
        return np.asarray(z, dtype=np.float64) * self.time_interval_std + self.time_interval_mean

    def norm_time(self, t, window_start: float = 0.0):
        """Absolute time since the window start, in units of the interval std."""
        return (np.asarray(t, dtype=np.float64) - window_start) / self.time_interval_std

    def norm_space(self, s):
        return (np.asarray(s, dtype=np.float64) - self.space_mean) / self.space_std

    def denorm_space(self, z):
        return np.asarray(z, dtype=np.float64) * self.space_std + self.space_mean

    def log_scale(self) -> tuple[float, float]:
        """Log-Jacobians (temporal, spatial) that map standardized NLL back to data units."""
        lt = math.log(self.time_interval_std)
        ls = 0.0 if self.space_std is None else float(np.sum(np.log(self.space_std)))
        return lt, ls


def _safe_std(x: np.ndarray, what: str) -> np.ndarray:
    std = np.std(x, axis=0)
    bad = ~(std > 0)
    if np.any(bad):
        log.warning("zero std for %s; using 1", what)
        std = np.where(bad, 1.0, std)
    return std


def compute_stats(train: Sequence[EventSequence], space: SpaceSpec) -> NormalizationStats:
    """Population mean/std of intervals and coordinates over the given (train) sequences."""
    tau = np.concatenate([intervals(s) for s in train])
    t_std = float(_safe_std(tau, "time intervals"))
    if space.is_discrete:
        return NormalizationStats(float(tau.mean()), t_std)
    xy = np.concatenate([s.space for s in train], axis=0)
    return NormalizationStats(float(tau.mean()), t_std, xy.mean(axis=0), _safe_std(xy, "coordinates"))


@dataclass(frozen=True, eq=False)
class Dataset:
    space: SpaceSpec
    train: list[EventSequence]
    val: list[EventSequence] = field(default_factory=list)
    test: list[EventSequence] = field(default_factory=list)
    stats: NormalizationStats | None = None

    def __post_init__(self):
        if not self.train:
            raise ValueError("dataset has no training sequences")
        ids = [s.seq_id for s in self.train + self.val + self.test]
        if len(set(ids)) != len(ids):
            raise ValueError("sequence ids repeat across splits")
        for s in self.train + self.val + self.test:
            _check_space(s, self.space)
        if self.stats is None:
            object.__setattr__(self, "stats", compute_stats(self.train, self.space))

    def split(self, name: str) -> list[EventSequence]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_sequences(self) -> Iterator[tuple[str, EventSequence]]:
        for name in SPLITS:
            for s in self.split(name):
                yield name, s

    def n_events(self, split: str) -> int:
        return sum(len(s) for s in self.split(split))


def _check_space(seq: EventSequence, space: SpaceSpec) -> None:
    if space.is_discrete:
        if not seq.is_discrete:
            raise ValueError(f"sequence {seq.seq_id}: expected location ids")
        if seq.space.min() < 0 or seq.space.max() >= space.size:
            raise ValueError(f"sequence {seq.seq_id}: location id outside [0, {space.size})")
    elif seq.is_discrete or seq.space.shape[1] != space.size:
        raise ValueError(f"sequence {seq.seq_id}: expected {space.size} coordinates")


def normalize(dataset: Dataset) -> dict[str, list[tuple[np.ndarray, np.ndarray]]]:
    """Per split, a list of (standardized intervals, standardized coordinates or ids)."""
    st = dataset.stats
    out = {}
    for name in SPLITS:
        rows = []
        for seq in dataset.split(name):
            sp = seq.space if dataset.space.is_discrete else st.norm_space(seq.space)
            rows.append((st.norm_tau(intervals(seq)), sp))
        out[name] = rows
    return out


def denormalize(tau_z, s_z, stats: NormalizationStats):
    s = s_z if stats.space_mean is None else stats.denorm_space(s_z)
    return stats.denorm_tau(tau_z), s


def assign_splits(
    seqs: Sequence[EventSequence], fractions=(0.8, 0.1, 0.1), seed: int = 0
) -> dict[str, list[EventSequence]]:
    """Random disjoint split by sequence."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(seqs))
    n_train = max(1, int(round(fractions[0] * len(seqs))))
    n_val = int(round(fractions[1] * len(seqs)))
    parts = {
        "train": order[:n_train],
        "val": order[n_train : n_train + n_val],
        "test": order[n_train + n_val :],
    }
    return {k: [seqs[i] for i in sorted(v)] for k, v in parts.items()}


# ---------------------------------------------------------------------------
# files


def windows_path(path: Path) -> Path:
    return path.with_name(path.stem + ".windows.csv")


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(dataset: Dataset, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or ("json" if path.suffix == ".json" else "csv")
    if fmt == "json":
        seqs = []
        for name, s in dataset.all_sequences():
            if s.is_discrete:
                rows = [[float(t), int(l)] for t, l in zip(s.times, s.space)]
            else:
                rows = [[float(t), *map(float, xy)] for t, xy in zip(s.times, s.space)]
            seqs.append(
                {"seq_id": s.seq_id, "window_start": s.window_start,
                 "window_end": s.window_end, "split": name, "events": rows}
            )
        path.write_text(json.dumps({"space": dataset.space.to_dict(), "sequences": seqs}))
        return
    if fmt != "csv":
        raise ValueError(f"unknown dataset format {fmt!r}")
    sp = dataset.space
    header = ["seq_id", "t"] + (["loc_id"] if sp.is_discrete else [f"s_{j + 1}" for j in range(sp.size)])
    with open(path, "w", newline="") as f, open(windows_path(path), "w", newline="") as g:
        w, wg = csv.writer(f, lineterminator="\n"), csv.writer(g, lineterminator="\n")
        w.writerow(header)
        wg.writerow(["seq_id", "window_start", "window_end", "split"])
        for name, s in dataset.all_sequences():
            wg.writerow([s.seq_id, _fmt(s.window_start), _fmt(s.window_end), name])
            for i, t in enumerate(s.times):
                loc = [int(s.space[i])] if s.is_discrete else [_fmt(v) for v in s.space[i]]
                w.writerow([s.seq_id, _fmt(t), *loc])


def read_sequences(path) -> tuple[SpaceSpec, list[EventSequence], dict[int, str]]:
    """Parse an events file; returns the space, sequences, and any split labels."""
    path = Path(path)
    if path.suffix == ".json":
        return _read_json(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        if header[:2] != ["seq_id", "t"] or len(header) < 3:
            raise DatasetFormatError(f"{path}: header must start with seq_id,t and name the space columns")
        discrete = header[2:] == ["loc_id"]
        space = SpaceSpec.discrete(2) if discrete else SpaceSpec.continuous(len(header) - 2)
        grouped: dict[int, tuple[list, list]] = {}
        last_id = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                sid, t = int(row[0]), float(row[1])
                loc = int(row[2]) if discrete else [float(v) for v in row[2:]]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
            if not math.isfinite(t) or t < 0:
                raise DatasetFormatError(f"{path}:{lineno}: bad time {row[1]!r}")
            if sid != last_id and sid in grouped:
                raise DatasetFormatError(f"{path}:{lineno}: rows of sequence {sid} are not contiguous")
            last_id = sid
            ts, ss = grouped.setdefault(sid, ([], []))
            if ts and t < ts[-1]:
                raise DatasetFormatError(f"{path}:{lineno}: times decrease within sequence {sid}")
            ts.append(t)
            ss.append(loc)
    windows, splits = _read_windows(windows_path(path))
    if discrete:
        n = max(max(ss) for _, ss in grouped.values()) + 1
        space = SpaceSpec.discrete(max(n, 2))
    seqs = []
    for sid, (ts, ss) in grouped.items():
        ws, we = windows.get(sid, (0.0, None))
        sp = np.asarray(ss, dtype=np.int64 if discrete else np.float64)
        try:
            seqs.append(EventSequence(np.asarray(ts), sp, ws, we, sid))
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: {exc}") from None
    return space, seqs, splits


def _read_windows(path: Path) -> tuple[dict[int, tuple[float, float]], dict[int, str]]:
    windows, splits = {}, {}
    if not path.exists():
        return windows, splits
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for lineno, row in enumerate(reader, start=2):
            try:
                sid = int(row["seq_id"])
                windows[sid] = (float(row["window_start"]), float(row["window_end"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
            if row.get("split"):
                splits[sid] = row["split"]
    return windows, splits


def _read_json(path: Path):
    doc = json.loads(path.read_text(encoding="utf-8"))
    space = SpaceSpec.from_dict(doc["space"])
    seqs, splits = [], {}
    for i, rec in enumerate(doc["sequences"]):
        ev = np.asarray(rec["events"], dtype=np.float64)
        if ev.ndim != 2 or ev.shape[1] != (2 if space.is_discrete else 1 + space.size):
            raise DatasetFormatError(f"{path}: sequence #{i} has malformed events")
        sp = ev[:, 1].astype(np.int64) if space.is_discrete else ev[:, 1:]
        sid = int(rec.get("seq_id", i))
        try:
            seqs.append(EventSequence(ev[:, 0], sp, rec.get("window_start", 0.0), rec.get("window_end"), sid))
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: {exc}") from None
        if rec.get("split"):
            splits[sid] = rec["split"]
    return space, seqs, splits


def load_dataset(path, split_fractions=None, seed: int = 0, space: SpaceSpec | None = None) -> Dataset:
    """Load an events file into a :class:`Dataset`; normalization stats come from train only."""
    found, seqs, labels = read_sequences(path)
    if space is not None:
        if space.kind != found.kind or (not space.is_discrete and space.size != found.size):
            raise DatasetFormatError(f"{path}: file holds {found.kind} space, expected {space}")
        found = space
    if labels:
        parts = {k: [s for s in seqs if labels.get(s.seq_id, "train") == k] for k in SPLITS}
        unknown = set(labels.values()) - set(SPLITS)
        if unknown:
            raise DatasetFormatError(f"{path}: unknown split labels {sorted(unknown)}")
    elif split_fractions is not None:
        parts = assign_splits(seqs, split_fractions, seed)
    else:
        parts = {"train": seqs, "val": [], "test": []}
    return Dataset(found, parts["train"], parts["val"], parts["test"])


def with_stats(dataset: Dataset, stats: NormalizationStats) -> Dataset:
    return replace(dataset, stats=stats)
