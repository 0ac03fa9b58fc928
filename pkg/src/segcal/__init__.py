"""Calibration error metrics and post-hoc calibrators for dense per-pixel classifiers."""
from .core import IGNORE, SegImage, argmax_predict, correctness_mask, pixel_entropy, softmax_with_temperature
from .data import Dataset, SplitSpec, SyntheticConfig, generate_synthetic, read_container, split_dataset, write_container
from .metrics import BinningConfig, BoundaryConfig, binned_ece, boundary_mask, dataset_ece, image_ece
from .calibrators import (
    FitConfig, apply_dirichlet, apply_metacal_ext, apply_selective, apply_temperature, apply_vector,
    ensemble_average, fit_dirichlet, fit_metacal_ext, fit_selective, fit_temperature, fit_vector,
)

__version__ = "0.1.0"
