"""Adversarial examples against embedding-based face verifiers, with a
simulated print-and-capture evaluation pipeline."""

from .errors import ContractError, CorruptImageError, DegenerateGridError, \
    FaceadvError, ImageIOError, UnsupportedFormatError
from .imagecore import SmoothnessSpec, as_image, as_mask, as_thresholds, \
    compose_patch_noise, load_image, load_mask, load_thresholds, masked_smoothness, \
    masked_smoothness_grad, quantize8, save_image, save_mask, save_thresholds, \
    tv_loss, tv_loss_grad
from .featnet import ARCHITECTURES, DISTANCE_METRICS, DiversityConfig, EnsembleSpec, \
    FeatureExtractor, apply_diversity, diversity_pullback, ensemble_distance, \
    feature_distance, feature_distance_with_grad, load_extractor_spec, \
    sample_crop_offsets, save_extractor_spec
from .attacks import ALGORITHMS, BLACKBOX_MODES, TECHNIQUES, AttackConfig, \
    AttackResult, GridCell, cell_config, config_from_dict, config_to_dict, \
    grid_cells, pair_seed, resolve_masks, run_attack, run_cell, run_cw, \
    run_ifgsm, run_lots, run_pgd
from .physim import CaptureParams, capture_grid, capture_outcomes, kelvin_gains, \
    physical_asr, realign, sharpness, simulate_capture, simulate_print, \
    warp_image, yaw_homography
from .evalharness import AblationReport, VerificationThreshold, build_report, \
    calibrate_threshold, digital_asr, epsilon_sweep, physical_transferability, \
    tv_statistics, verification_scores
from .pipeline import GridRunSpec, SweepRunSpec, grid_spec_from_dict, run_grid, \
    run_one_cell, run_sweep

__version__ = "0.1.0"
