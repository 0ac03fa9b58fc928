"""ECE versus misprediction-detection rate over several generator seeds.

    python scripts/ablation_sweep.py --seeds 20 --sharpness 3
"""
import argparse
import json
from dataclasses import asdict, dataclass

import numpy as np

from segcal.cli import ABLATION_TOLERANCE, monotone_verdict
from segcal.data import SyntheticConfig, generate_synthetic
from segcal.selector import selector_accuracy_sweep


@dataclass
class SweepConfig:
    seeds: int = 20
    images: int = 20
    sharpness: float = 3.0
    rates: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    t1: float = 1e10
    t2: float = 1.0


def run(cfg):
    curves = []
    for seed in range(cfg.seeds):
        data = generate_synthetic(SyntheticConfig(num_images=cfg.images, sharpness=cfg.sharpness, seed=seed)).dataset
        curves.append(selector_accuracy_sweep(data, cfg.rates, cfg.t1, cfg.t2, seed))
    eces = np.array([[e for _, e in c] for c in curves])
    return {
        "config": asdict(cfg),
        "mean_ece": dict(zip(map(str, cfg.rates), eces.mean(axis=0).round(6).tolist())),
        "monotone_seeds": int(sum(monotone_verdict(c) and c[-1][1] < c[0][1] for c in curves)),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, default=SweepConfig.seeds)
    parser.add_argument("--images", type=int, default=SweepConfig.images)
    parser.add_argument("--sharpness", type=float, default=SweepConfig.sharpness)
    args = parser.parse_args()
    result = run(SweepConfig(seeds=args.seeds, images=args.images, sharpness=args.sharpness))
    for rate, ece in result["mean_ece"].items():
        print(f"rate {float(rate):.2f}  mean ECE {ece:.4f}")
    print(f"seeds decreasing and non-increasing within {ABLATION_TOLERANCE}: "
          f"{result['monotone_seeds']}/{args.seeds}")
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
