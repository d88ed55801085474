"""Slice-to-volume reconstruction with anisotropic Gaussian primitives.

A 3D volume is represented as a cloud of oriented Gaussians fit directly to
motion-corrupted low-resolution slice stacks. The slice acquisition PSF is
folded into each primitive's covariance in closed form, so rendering an
observed pixel needs no stochastic sampling, and per-slice rigid corrections
are optimized jointly with the field.
"""

import numba as _numba

# Pick the dependency-free threading layer before any parallel kernel runs.
_numba.config.THREADING_LAYER = "workqueue"

from .config import RunConfig
from .errors import (GsvrError, InvalidParameterError, NumericalDegeneracyError,
                     TrainingDivergedError, UndefinedMetricError,
                     UnsupportedFormatError)
from .field import DELTA, GaussianField, evaluate_field, rasterize, shrink_for_viz
from .formats import (export_pointcloud, export_slices, read_field,
                      read_history, read_pointcloud, read_states_json,
                      write_field, write_history_csv, write_history_json,
                      write_states_json)
from .geometry import (build_covariance, quat_from_axis_angle, quat_normalize,
                       quat_to_rotation, rotation_angle, rotation_to_quat)
from .initialization import InitConfig, init_field, sample_init_positions
from .knn import NeighborIndex, build_index, query
from .metrics import motion_error, motion_gauge, ncc, psnr, ssim
from .motion import (PointBatch, SliceStack, SliceState, SliceStates,
                     apply_correction, build_point_batch, init_states, lift_pixel)
from .nifti import IntensityNormalization, read_nifti, read_stack, write_nifti
from .optim import AdamW, AdamWConfig, SchedulerConfig, lr_at
from .psf import PsfModel, build_psf, convolve_covariance
from .render import mc_oracle_render, render_observed
from .simulate import (AcquisitionParams, MotionParams, make_phantom,
                       phantom_intensity, simulate_protocol, simulate_stack)
from .train import LossConfig, OptimConfig, TrainState, backward, compute_loss, fit
from .volume import VolumeGrid

__version__ = "0.1.0"

__all__ = [
    "AcquisitionParams", "AdamW", "AdamWConfig", "DELTA", "GaussianField",
    "GsvrError", "InitConfig", "IntensityNormalization", "InvalidParameterError",
    "LossConfig", "MotionParams", "NeighborIndex", "NumericalDegeneracyError",
    "OptimConfig", "PointBatch", "PsfModel", "RunConfig", "SchedulerConfig",
    "SliceStack", "SliceState", "SliceStates", "TrainState",
    "TrainingDivergedError", "UndefinedMetricError", "UnsupportedFormatError",
    "VolumeGrid", "apply_correction", "backward", "build_covariance",
    "build_index", "build_point_batch", "build_psf", "compute_loss",
    "convolve_covariance", "evaluate_field", "export_pointcloud",
    "export_slices", "fit", "init_field", "init_states", "lift_pixel", "lr_at",
    "make_phantom", "mc_oracle_render", "motion_error", "motion_gauge", "ncc",
    "phantom_intensity", "psnr", "quat_from_axis_angle", "quat_normalize",
    "quat_to_rotation", "query", "rasterize", "read_field", "read_history",
    "read_nifti", "read_pointcloud", "read_stack", "read_states_json",
    "render_observed", "rotation_angle", "rotation_to_quat",
    "sample_init_positions", "shrink_for_viz", "simulate_protocol",
    "simulate_stack", "ssim", "write_field", "write_history_csv",
    "write_history_json", "write_nifti", "write_states_json", "__version__",
]
