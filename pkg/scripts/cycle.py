"""Discrete-space check: next-location accuracy on a deterministic 5-location cycle.

    python3 scripts/cycle.py --epochs 200 --out runs/cycle
"""
import argparse
from pathlib import Path

from stdiffusion import evaluate as ev
from stdiffusion.simulate import simulate_cycle
from stdiffusion.train import TrainConfig, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--learning-rate", type=float, default=3e-3)
    ap.add_argument("--k-per-event", type=int, default=8)
    ap.add_argument("--seed", type=int, default=9)
    ap.add_argument("--out", type=Path, default=Path("runs/cycle"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    ds = simulate_cycle(seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.learning_rate, k_per_event=args.k_per_event,
                      seed=args.seed)
    model = train(ds, cfg).model
    rep = ev.evaluate(model, ds.test, n_samples=30, seed=args.seed)
    (args.out / "metrics.json").write_text(rep.to_json() + "\n")
    print(rep)


if __name__ == "__main__":
    main()
