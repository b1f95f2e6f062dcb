"""HawkesGMM: prediction against mean baselines, and the denoising trajectory.

    python3 scripts/hawkes_gmm.py --epochs 100 --out runs/hawkes_gmm
"""
import argparse
import json
from pathlib import Path

import numpy as np

from stdiffusion import evaluate as ev
from stdiffusion.diffusion import snapshot_steps
from stdiffusion.simulate import simulate_gmm_dataset
from stdiffusion.train import TrainConfig, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--out", type=Path, default=Path("runs/hawkes_gmm"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    ds = simulate_gmm_dataset(args.seed)
    model = train(ds, TrainConfig(epochs=args.epochs, seed=args.seed)).model

    pred = ev.teacher_forced_predictions(model, ds.test, 30, seed=args.seed)
    tau_bar = np.concatenate([s.intervals() for s in ds.train]).mean()
    loc_bar = np.concatenate([s.space for s in ds.train]).mean(axis=0)
    prev = np.concatenate([np.concatenate([[s.window_start], s.times[:-1]]) for s in ds.test])
    summary = {
        "rmse_model": ev.rmse(pred["t"], pred["t_hat"]),
        "rmse_mean_interval": ev.rmse(pred["t"], prev + tau_bar),
        "euclid_model": ev.euclid(pred["s"], pred["s_hat"]),
        "euclid_mean_location": ev.euclid(pred["s"], np.tile(loc_bar, (len(pred["s"]), 1))),
    }

    h, _ = model.history_arrays(ds.test)
    steps = snapshot_steps(model.schedule.K)
    _, _, snaps = ev.sample_events(model, h, 1, np.random.default_rng(args.seed), snapshots=steps)
    data = np.concatenate([s.space for s in ds.test])
    summary["energy_distance_by_step"] = {
        str(k): ev.energy_distance(model.stats.denorm_space(snaps[k][0]), data) for k in steps}
    ev.write_rows(args.out / "trajectory.csv", ev.trajectory_header(model), ev.trajectory_rows(model, snaps))
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
