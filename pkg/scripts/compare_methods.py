"""Fit every calibrator on one dataset and print the comparison table.

By default the data has a planted correctness rule (confident pixels are
right, the rest are wrong), which is the regime where a learned selector can
help. Pass ``--plain`` to use the unmodified generator output instead.
"""
import argparse
from dataclasses import dataclass

from segcal.cli import format_compare_table, run_compare
from segcal.data import SplitSpec, SyntheticConfig, generate_synthetic, relabel_by_confidence
from segcal.metrics import BinningConfig


@dataclass
class CompareConfig:
    images: int = 20
    sharpness: float = 3.0
    concentration: float = 10.0
    relabel_threshold: float = 0.9
    seed: int = 21
    plain: bool = False


def build_dataset(cfg):
    data = generate_synthetic(SyntheticConfig(num_images=cfg.images, sharpness=cfg.sharpness,
                                              concentration=cfg.concentration, seed=cfg.seed)).dataset
    return data if cfg.plain else relabel_by_confidence(data, cfg.relabel_threshold, seed=cfg.seed)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--images", type=int, default=CompareConfig.images)
    parser.add_argument("--sharpness", type=float, default=CompareConfig.sharpness)
    parser.add_argument("--seed", type=int, default=CompareConfig.seed)
    parser.add_argument("--plain", action="store_true")
    args = parser.parse_args()
    cfg = CompareConfig(images=args.images, sharpness=args.sharpness, seed=args.seed, plain=args.plain)
    rows = run_compare(build_dataset(cfg), ["temp", "vector", "dirichlet", "metacal", "selective"],
                       SplitSpec(0.4, 0.2, 0.4), cfg.seed, BinningConfig())
    print(format_compare_table(rows), end="")


if __name__ == "__main__":
    main()
