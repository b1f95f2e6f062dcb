"""Command-line front end: simulate, train, evaluate, sample, trace, reproduce-synthetic.

Every command resolves its parameters from built-in defaults, then an
optional JSON ``--config`` file, then explicit flags, and writes the
resolved set to ``config.json`` in its output directory. Outputs depend
only on (config, seed, input files), so reruns are byte-identical.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from . import evaluate as ev
from . import simulate as sim
from .diffusion import snapshot_steps
from .events import Dataset, EventSequence, SpaceSpec, load_dataset, save_dataset
from .model import ModelConfig, STPPModel
from .train import TrainConfig, train

log = logging.getLogger("stdiffusion")

OUT_ENV = "STDIFFUSION_OUT"
GENERATORS = ("poisson", "hawkes", "self_correcting", "hawkes_gmm", "independent", "cycle")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    name: str
    kind: str  # int | float | str | json
    default: Any = None
    required: bool = False
    help: str = ""


# ---------------------------------------------------------------------------
# option tables

_SPLITS = (Opt("n_train", "int", 100), Opt("n_val", "int", 20), Opt("n_test", "int", 20))

GEN_OPTS: dict[str, tuple[Opt, ...]] = {
    "poisson": (Opt("rate", "float", required=True), Opt("horizon", "float", 10.0),
                Opt("space_dim", "int", 2), *_SPLITS),
    "hawkes": (Opt("mu", "float", sim.SYNTHETIC_HAWKES.mu),
               Opt("excitations", "json", [list(e) for e in sim.SYNTHETIC_HAWKES.excitations]),
               Opt("horizon", "float", sim.SYNTHETIC_HAWKES.horizon), Opt("max_events", "int", 500),
               Opt("space_dim", "int", 2), *_SPLITS),
    "self_correcting": (Opt("mu", "float", 1.0), Opt("alpha", "float", 1.0), Opt("horizon", "float", 10.0),
                        Opt("space_dim", "int", 2), *_SPLITS),
    "hawkes_gmm": (Opt("mu", "float", sim.DEFAULT_GMM_HAWKES.mu),
                   Opt("excitations", "json", [list(e) for e in sim.DEFAULT_GMM_HAWKES.excitations]),
                   Opt("horizon", "float", sim.DEFAULT_GMM_HAWKES.horizon),
                   Opt("weights", "json", list(sim.DEFAULT_GMM.weights)),
                   Opt("means", "json", [list(m) for m in sim.DEFAULT_GMM.means]),
                   Opt("covs", "json", [[list(r) for r in c] for c in sim.DEFAULT_GMM.covs]),
                   Opt("mark_persistence", "float", 0.9),
                   Opt("n_train", "int", 200), Opt("n_val", "int", 30), Opt("n_test", "int", 30)),
    "independent": (Opt("window", "float", 10.0), Opt("max_events", "int", 500),
                    Opt("n_train", "int", 1000), Opt("n_val", "int", 100), Opt("n_test", "int", 100)),
    "cycle": (Opt("n_locations", "int", 5), Opt("n_seqs", "int", 200), Opt("length", "int", 20),
              Opt("rate", "float", 1.0)),
}

_MODEL_OPTS = (
    Opt("K", "int", 200, help="diffusion steps"),
    Opt("beta_start", "float", 1e-4),
    Opt("beta_end", "float", 0.02),
    Opt("hidden", "int", 64),
    Opt("branch_layers", "int", 3),
)
_TRAIN_OPTS = (
    Opt("data", "str", required=True, help="events file"),
    Opt("space", "str", help="expected space, e.g. continuous:2 or discrete:5"),
    Opt("epochs", "int", 100),
    Opt("learning_rate", "float", 3e-4),
    Opt("batch_size", "int", 256, help="events per batch"),
    Opt("validation_every", "int", 10),
    Opt("k_per_event", "int", 1),
    Opt("grad_clip", "float", 10.0),
    *_MODEL_OPTS,
)
_CKPT_OPTS = (
    Opt("checkpoint", "str", required=True),
    Opt("data", "str", required=True, help="events file"),
    Opt("split", "str", "test"),
)
COMMAND_OPTS: dict[str, tuple[Opt, ...]] = {
    "simulate": (Opt("gen", "str", required=True, help="|".join(GENERATORS)),),
    "train": _TRAIN_OPTS,
    "evaluate": (*_CKPT_OPTS, Opt("n_samples", "int", 30), Opt("dataset_name", "str"),
                 Opt("results", "str", help="results table to append to (default <out>/results.csv)")),
    "sample": (*_CKPT_OPTS, Opt("n_samples", "int", 1)),
    "trace": _CKPT_OPTS,
    "reproduce-synthetic": (Opt("epochs", "int", 100), Opt("learning_rate", "float", 3e-4),
                            Opt("batch_size", "int", 256), Opt("validation_every", "int", 10),
                            Opt("n_samples", "int", 30), *_MODEL_OPTS,
                            *[o for o in GEN_OPTS["independent"]]),
}


def _parse_value(kind: str, raw):
    if raw is None:
        return None
    try:
        if kind == "int":
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "json":
            return json.loads(raw) if isinstance(raw, str) else raw
        return str(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"cannot read {raw!r} as {kind}: {e}") from None


def resolve(command: str, file_cfg: dict, flags: dict) -> dict:
    """Defaults, overlaid by the config file, overlaid by flags that were given."""
    opts = list(COMMAND_OPTS[command])
    if command == "simulate":
        gen = flags.get("gen") or file_cfg.get("gen")
        if gen is None:
            raise UsageError("simulate needs --gen (" + ", ".join(GENERATORS) + ")")
        if gen not in GENERATORS:
            raise UsageError(f"unknown generator {gen!r}; choose from {', '.join(GENERATORS)}")
        opts += GEN_OPTS[gen]
    known = {o.name for o in opts} | {"seed"}
    extra = set(file_cfg) - known
    if extra:
        raise UsageError(f"unknown config keys for {command}: {sorted(extra)}")
    cfg: dict[str, Any] = {"seed": 0}
    for o in opts:
        cfg[o.name] = o.default
    for k, v in file_cfg.items():
        cfg[k] = v
    for k, v in flags.items():
        if v is not None and k in known:
            cfg[k] = v
    for o in opts:
        cfg[o.name] = _parse_value(o.kind, cfg[o.name])
        if o.required and cfg[o.name] is None:
            raise UsageError(f"missing required parameter --{o.name.replace('_', '-')}")
    cfg["seed"] = _parse_value("int", cfg["seed"])
    if cfg["seed"] < 0:
        raise UsageError("--seed must be a nonnegative integer")
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _space_from_str(text: str) -> SpaceSpec:
    try:
        kind, size = text.split(":")
        return SpaceSpec(kind, int(size))
    except ValueError as e:
        raise UsageError(f"bad space spec {text!r} (use continuous:D or discrete:N): {e}") from None


def _with_splits(space: SpaceSpec, seqs: list[EventSequence], n_train: int, n_val: int) -> Dataset:
    return Dataset(space, seqs[:n_train], seqs[n_train : n_train + n_val], seqs[n_train + n_val :])


def _temporal_dataset(cfg: dict, make_times: Callable[[np.random.Generator], np.ndarray],
                      window: Callable[[np.ndarray], float]) -> Dataset:
    """Sequences from a temporal generator, with independent standard-normal locations."""
    t_seed, s_seed = np.random.SeedSequence(cfg["seed"]).spawn(2)
    t_rng, s_rng = np.random.default_rng(t_seed), np.random.default_rng(s_seed)
    total = cfg["n_train"] + cfg["n_val"] + cfg["n_test"]
    seqs: list[EventSequence] = []
    attempts = 0
    while len(seqs) < total:
        attempts += 1
        if attempts > 100 * total + 1000:
            raise RuntimeError("generator keeps producing empty windows; raise the rate or horizon")
        t = make_times(t_rng)
        if len(t) == 0:
            continue
        locs = s_rng.standard_normal((len(t), cfg["space_dim"]))
        seqs.append(EventSequence(t, locs, 0.0, window(t), len(seqs)))
    return _with_splits(SpaceSpec.continuous(cfg["space_dim"]), seqs, cfg["n_train"], cfg["n_val"])


def build_dataset(gen: str, cfg: dict) -> Dataset:
    seed = cfg["seed"]
    if gen == "poisson":
        return _temporal_dataset(cfg, lambda r: sim.simulate_poisson(cfg["rate"], cfg["horizon"], r),
                                 lambda t: cfg["horizon"])
    if gen == "hawkes":
        hp = sim.HawkesParams(cfg["mu"], tuple(map(tuple, cfg["excitations"])), cfg["horizon"])
        cap = cfg["max_events"]
        return _temporal_dataset(
            cfg,
            lambda r: sim.simulate_hawkes(hp, r, allow_explosive=True, max_events=cap),
            # a run stopped by the event cap is observed only up to its last event
            lambda t: float(t[-1]) if cap is not None and len(t) >= cap else hp.horizon,
        )
    if gen == "self_correcting":
        return _temporal_dataset(
            cfg, lambda r: sim.simulate_self_correcting(cfg["mu"], cfg["alpha"], cfg["horizon"], r),
            lambda t: cfg["horizon"])
    if gen == "hawkes_gmm":
        hp = sim.HawkesParams(cfg["mu"], tuple(map(tuple, cfg["excitations"])), cfg["horizon"])
        spatial = sim.GmmSpatialParams(
            tuple(cfg["weights"]), tuple(map(tuple, cfg["means"])),
            tuple(tuple(map(tuple, c)) for c in cfg["covs"]))
        return sim.simulate_gmm_dataset(seed, sim.GmmConfig(
            cfg["n_train"], cfg["n_val"], cfg["n_test"], hp, spatial, cfg["mark_persistence"]))
    if gen == "independent":
        return sim.simulate_independent(seed, sim.IndependentConfig(
            cfg["n_train"], cfg["n_val"], cfg["n_test"], cfg["window"], max_events=cfg["max_events"]))
    if gen == "cycle":
        return sim.simulate_cycle(cfg["n_locations"], cfg["n_seqs"], cfg["length"], seed, cfg["rate"])
    raise UsageError(f"unknown generator {gen!r}")


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(hidden=cfg["hidden"], branch_layers=cfg["branch_layers"], K=cfg["K"],
                       beta_start=cfg["beta_start"], beta_end=cfg["beta_end"])


def _load_for_checkpoint(cfg: dict) -> tuple[STPPModel, list[EventSequence]]:
    model, _ = STPPModel.load(cfg["checkpoint"])
    ds = load_dataset(cfg["data"], space=model.space)
    seqs = ds.split(cfg["split"])
    if not seqs:
        raise ValueError(f"split {cfg['split']!r} of {cfg['data']} is empty")
    return model, seqs


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, out: Path) -> None:
    ds = build_dataset(cfg["gen"], cfg)
    save_dataset(ds, out / "events.csv")
    _write_json(out / "manifest.json", {
        "command": "simulate", "generator": cfg["gen"], "seed": cfg["seed"],
        "params": {k: v for k, v in cfg.items() if k not in ("gen", "seed")},
        "space": ds.space.to_dict(),
        "n_sequences": {"train": len(ds.train), "val": len(ds.val), "test": len(ds.test)},
        "n_events": {s: ds.n_events(s) for s in ("train", "val", "test")},
        "files": ["events.csv", "events.windows.csv"],
        "version": __version__,
    })
    log.info("wrote %d sequences to %s", len(ds.train) + len(ds.val) + len(ds.test), out / "events.csv")


def _data_provenance(path) -> dict:
    # name and content hash rather than the path, so reruns elsewhere stay byte-identical
    path = Path(path)
    return {"data_file": path.name, "data_sha256": hashlib.sha256(path.read_bytes()).hexdigest()}


def cmd_train(cfg: dict, out: Path) -> None:
    space = _space_from_str(cfg["space"]) if cfg["space"] else None
    ds = load_dataset(cfg["data"], space=space)
    tc = TrainConfig(learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                     seed=cfg["seed"], validation_every=cfg["validation_every"],
                     k_per_event=cfg["k_per_event"], grad_clip=cfg["grad_clip"], model=_model_config(cfg))
    res = train(ds, tc)
    res.model.save(out / "checkpoint.json", meta={
        "seed": cfg["seed"], "best_epoch": res.best_epoch, **_data_provenance(cfg["data"]),
        "best_val": None if res.best_val is None else list(res.best_val)})
    ev.write_rows(out / "train_log.csv", ("epoch", "train_loss", "val_nll_t", "val_nll_s"), res.log_rows)
    ev.write_rows(out / "train_loss.csv", ("epoch", "train_loss"),
                  [(i + 1, v) for i, v in enumerate(res.losses)])


def cmd_evaluate(cfg: dict, out: Path) -> None:
    model, seqs = _load_for_checkpoint(cfg)
    rep = ev.evaluate(model, seqs, n_samples=cfg["n_samples"], seed=cfg["seed"])
    (out / "metrics.json").write_text(rep.to_json() + "\n")
    name = cfg["dataset_name"] or Path(cfg["data"]).stem
    row = (name, cfg["split"], model.schedule.K, rep.nll_temporal, rep.nll_spatial, rep.rmse_time,
           "" if rep.euclid_space is None else rep.euclid_space,
           "" if rep.accuracy is None else rep.accuracy, cfg["seed"])
    ev.write_rows(cfg["results"] or out / "results.csv", ev.RESULTS_HEADER, [row], append=True)
    log.info("%s", rep)


def cmd_sample(cfg: dict, out: Path) -> None:
    model, seqs = _load_for_checkpoint(cfg)
    rng = np.random.default_rng(cfg["seed"])
    h, _ = model.history_arrays(seqs)
    steps = snapshot_steps(model.schedule.K)
    tau, space, snaps = ev.sample_events(model, h, cfg["n_samples"], rng, snapshots=steps)
    prev = np.concatenate([np.concatenate([[s.window_start], s.times[:-1]]) for s in seqs])
    keys = [(s.seq_id, i) for s in seqs for i in range(len(s))]
    disc = model.space.is_discrete
    header = ["seq_id", "event", "sample", "t"] + (["loc_id"] if disc else
                                                    [f"s_{j + 1}" for j in range(model.space.size)])
    rows = []
    for r, (sid, i) in enumerate(keys):
        for j in range(cfg["n_samples"]):
            loc = [int(space[r, j])] if disc else [float(v) for v in space[r, j]]
            rows.append([sid, i, j, float(prev[r] + tau[r, j]), *loc])
    ev.write_rows(out / "samples.csv", header, rows)
    ev.write_rows(out / "trajectory.csv", ev.trajectory_header(model), ev.trajectory_rows(model, snaps))


def cmd_trace(cfg: dict, out: Path) -> None:
    model, seqs = _load_for_checkpoint(cfg)
    ev.write_rows(out / "trace.csv", ev.TRACE_HEADER, ev.attention_trace(model, seqs))


def cmd_reproduce_synthetic(cfg: dict, out: Path) -> None:
    """Simulate Synthetic-Independent, train, evaluate on test, export trace and trajectory."""
    data_dir, train_dir, eval_dir = out / "data", out / "train", out / "eval"
    for d in (data_dir, train_dir, eval_dir):
        d.mkdir(parents=True, exist_ok=True)
    sim_cfg = {k: cfg[k] for k in ("seed", "window", "max_events", "n_train", "n_val", "n_test")}
    sim_cfg["gen"] = "independent"
    cmd_simulate(sim_cfg, data_dir)
    data = str(data_dir / "events.csv")
    tcfg = {o.name: o.default for o in _TRAIN_OPTS}
    tcfg.update({k: cfg[k] for k in tcfg if k in cfg}, data=data, seed=cfg["seed"])
    cmd_train(tcfg, train_dir)
    ecfg = {"checkpoint": str(train_dir / "checkpoint.json"), "data": data, "split": "test",
            "n_samples": cfg["n_samples"], "dataset_name": "synthetic_independent",
            "results": None, "seed": cfg["seed"]}
    cmd_evaluate(ecfg, eval_dir)
    cmd_trace(ecfg, eval_dir)
    cmd_sample({**ecfg, "n_samples": 1}, eval_dir)

    model, _ = STPPModel.load(train_dir / "checkpoint.json")
    ds = load_dataset(data)
    trace = ev.attention_trace(model, ds.test)
    cross_s, cross_t = ev.cross_attention(trace, model.schedule.K // 4)
    h, _ = model.history_arrays(ds.test)
    _, sp, _ = ev.sample_events(model, h, 1, np.random.default_rng(cfg["seed"] + 1))
    sp = sp[:, 0, :]
    metrics = json.loads((eval_dir / "metrics.json").read_text())
    _write_json(out / "summary.json", {
        "cross_attention_space_on_time": cross_s,
        "cross_attention_time_on_space": cross_t,
        "sampled_space_mean": sp.mean(axis=0).tolist(),
        "sampled_space_std": sp.std(axis=0).tolist(),
        "nll_temporal": metrics["nll_temporal"],
        "poisson_nll_temporal": ev.poisson_interval_nll(ds.train, ds.test),
    })


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sample": cmd_sample,
    "trace": cmd_trace,
    "reproduce-synthetic": cmd_reproduce_synthetic,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stdiffusion", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, opts in COMMAND_OPTS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON file with parameters")
        sp.add_argument("--seed", help="nonnegative integer seed (default 0)")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>-seed<seed>)")
        sp.add_argument("-q", "--quiet", action="store_true")
        seen = set()
        all_opts = list(opts)
        if name == "simulate":
            for g in GEN_OPTS.values():
                all_opts += [o for o in g]
        for o in all_opts:
            if o.name in seen:
                continue
            seen.add(o.name)
            flags = ["--" + o.name.replace("_", "-")]
            if "_" in o.name:
                flags.append("--" + o.name)
            sp.add_argument(*flags, dest=o.name, default=None, help=o.help or None)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out", "quiet")}
    try:
        file_cfg = {}
        if args.config:
            try:
                file_cfg = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise UsageError(f"cannot read config {args.config}: {e}") from None
            if not isinstance(file_cfg, dict):
                raise UsageError(f"config {args.config} must hold a JSON object")
        cfg = resolve(args.command, file_cfg, flags)
    except UsageError as e:
        print(f"stdiffusion {args.command}: {e}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / f"{args.command}-seed{cfg['seed']}"
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", {"command": args.command, **cfg})
        COMMANDS[args.command](cfg, out)
    except UsageError as e:
        print(f"stdiffusion {args.command}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures map to exit code 1
        print(f"stdiffusion {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
