"""Diffusion-step ablation on Synthetic-Independent: validation bound per K.

    python3 scripts/ablate_steps.py --steps 2 20 200 --epochs 100 --out runs/ablation
"""
import argparse
import json
import time
from pathlib import Path

from stdiffusion.model import ModelConfig
from stdiffusion.simulate import simulate_independent
from stdiffusion.train import TrainConfig, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, nargs="+", default=[2, 200])
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    ds = simulate_independent(args.seed)
    rows = []
    for K in args.steps:
        t0 = time.perf_counter()
        res = train(ds, TrainConfig(epochs=args.epochs, seed=args.seed, model=ModelConfig(K=K)))
        nt, ns = res.best_val
        rows.append({"K": K, "val_nll_t": nt, "val_nll_s": ns, "val_nll": nt + ns,
                     "best_epoch": res.best_epoch, "seconds": time.perf_counter() - t0})
        print(f"K={K:4d}  val nll {nt + ns:.4f} (t {nt:.4f}, s {ns:.4f})  epoch {res.best_epoch}")
    (args.out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
