"""Run the point-count, neighbourhood-size and feature-strategy sweeps.

Writes one CSV per axis into --out-dir. The defaults are a desk-scale
budget; raise --steps / --train / --image-size for a longer study.
"""
import argparse
import logging
from dataclasses import replace
from pathlib import Path

from scbct.trainer import ABLATION_GRIDS, TrainConfig, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--axes", default="n_points,k,features")
    ap.add_argument("--model", default="trans2")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--train", type=int, default=4)
    ap.add_argument("--test", type=int, default=2)
    ap.add_argument("--image-size", type=int, default=128)
    ap.add_argument("--phantom-size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="results")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = replace(TrainConfig(), model=args.model, max_steps=args.steps, n_train=args.train, n_test=args.test,
                   image_size=args.image_size, phantom_size=args.phantom_size, seed=args.seed, batch_size=1)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for axis in args.axes.split(","):
        rows = run_ablation(axis, ABLATION_GRIDS[axis], base, out_csv=out_dir / f"ablation_{axis}.csv")
        for value, p, s in rows:
            print(f"{axis}={value} psnr={p:.4f} ssim={s:.4f}")


if __name__ == "__main__":
    main()
