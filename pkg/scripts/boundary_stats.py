"""Boundary vs interior ECE, and correct vs incorrect ECE, across seeds."""
import argparse
from dataclasses import dataclass

import numpy as np

from segcal.core import softmax_with_temperature
from segcal.data import SyntheticConfig, generate_synthetic
from segcal.metrics import BoundaryConfig, boundary_mask, dataset_split_ece, ece_boxplot_stats, regional_ece


@dataclass
class BoundaryStudy:
    seeds: int = 20
    images: int = 10
    boundary_noise: float = 0.3
    radius: int = 2
    sharpness: float = 1.0


def one_seed(cfg, seed):
    synth = generate_synthetic(SyntheticConfig(num_images=cfg.images, boundary_noise=cfg.boundary_noise,
                                               boundary_radius=cfg.radius, sharpness=cfg.sharpness, seed=seed))
    inside, outside, items = [], [], []
    for img, region in zip(synth.dataset, synth.region_maps):
        probs = softmax_with_temperature(img.logits)
        items.append((img.image_id, probs, img.labels))
        e_in, e_out = regional_ece(probs, img.labels, boundary_mask(region, BoundaryConfig(cfg.radius)))
        if e_in is not None and e_out is not None:
            inside.append(e_in)
            outside.append(e_out)
    split = dataset_split_ece(items)
    return np.mean(inside), np.mean(outside), split["ece_correct"], split["ece_incorrect"]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=BoundaryStudy.seeds)
    parser.add_argument("--noise", type=float, default=BoundaryStudy.boundary_noise)
    parser.add_argument("--sharpness", type=float, default=BoundaryStudy.sharpness)
    args = parser.parse_args()
    cfg = BoundaryStudy(seeds=args.seeds, boundary_noise=args.noise, sharpness=args.sharpness)
    rows = np.array([one_seed(cfg, s) for s in range(cfg.seeds)])
    for name, col in zip(["boundary", "interior", "correct", "incorrect"], rows.T):
        stats = ece_boxplot_stats(col.tolist())
        print(f"{name:<10} median {stats.median:.4f}  q25 {stats.q25:.4f}  q75 {stats.q75:.4f}")
    print(f"boundary > interior in {int((rows[:, 0] > rows[:, 1]).sum())}/{cfg.seeds} seeds")
    print(f"incorrect > correct in {int((rows[:, 3] > rows[:, 2]).sum())}/{cfg.seeds} seeds")


if __name__ == "__main__":
    main()
