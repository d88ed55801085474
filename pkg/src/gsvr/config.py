"""Run configuration: every tunable knob with defaults, JSON (de)serialization.

The schema is flat and strict: unknown keys are rejected so typos cannot
silently fall back to defaults, and parse -> serialize -> parse is a fixed
point (tested), so configs can be echoed alongside results and re-used.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Union

from .errors import InvalidParameterError
from .initialization import InitConfig
from .optim import AdamWConfig, SchedulerConfig
from .psf import INPLANE_FWHM_FACTOR
from .train import LossConfig, OptimConfig


@dataclass
class RunConfig:
    """All reconstruction knobs in one serializable record."""

    # field initialization
    n_gaussians: int = 50_000
    lambda_init: float = 0.0
    initial_scale: float = 1.6          # mm
    intensity_policy: str = "source"
    seed: int = 0
    # loss
    lambda_reg: float = 2.5e-3
    s_target: float = 1.6               # mm
    outlier_weighting: bool = False
    delta: float = 1e-8
    # neighbor culling
    top_k: int = 50
    knn_refresh: int = 50
    knn_staleness_mm: float = 0.5
    # optimization
    epochs: int = 500
    lr_means: float = 2.5e-2
    lr_log_scales: float = 2.5e-2
    lr_quaternions: float = 1e-2
    lr_intensities: float = 1e-2
    lr_slice_rotation: float = 2.5e-3
    lr_slice_translation: float = 1e-1
    lr_log_sigma: float = 1e-2
    lr_eta: float = 1e-2
    scheduler_step: int = 200
    scheduler_gamma: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    motion_warmup: int = 10
    rotation_warmup: int = 100
    reseed_every: int = 100
    reseed_mode: str = "resample"
    anchor_slice: Optional[int] = 0
    # PSF convention
    use_psf: bool = True
    inplane_fwhm_factor: float = INPLANE_FWHM_FACTOR

    def __post_init__(self):
        # Delegate range validation to the concrete configs.
        self.init_config()
        self.loss_config()
        self.optim_config()
        if self.delta <= 0:
            raise InvalidParameterError("delta must be positive")
        if self.inplane_fwhm_factor <= 0:
            raise InvalidParameterError("inplane_fwhm_factor must be positive")

    def init_config(self) -> InitConfig:
        return InitConfig(n_gaussians=self.n_gaussians,
                          lambda_init=self.lambda_init,
                          seed=self.seed,
                          initial_scale=self.initial_scale,
                          intensity_policy=self.intensity_policy)

    def loss_config(self) -> LossConfig:
        return LossConfig(lambda_reg=self.lambda_reg,
                          s_target=self.s_target,
                          outlier_weighting=self.outlier_weighting)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(
            epochs=self.epochs,
            lr_means=self.lr_means,
            lr_log_scales=self.lr_log_scales,
            lr_quaternions=self.lr_quaternions,
            lr_intensities=self.lr_intensities,
            lr_slice_rotation=self.lr_slice_rotation,
            lr_slice_translation=self.lr_slice_translation,
            lr_log_sigma=self.lr_log_sigma,
            lr_eta=self.lr_eta,
            scheduler=SchedulerConfig(factor=self.scheduler_gamma,
                                      every=self.scheduler_step),
            adamw=AdamWConfig(betas=(self.adam_beta1, self.adam_beta2),
                              eps=self.adam_eps, weight_decay=self.weight_decay),
            knn_refresh_every=self.knn_refresh,
            k_neighbors=self.top_k,
            knn_staleness_mm=self.knn_staleness_mm,
            motion_warmup=self.motion_warmup,
            rotation_warmup=self.rotation_warmup,
            reseed_every=self.reseed_every,
            reseed_mode=self.reseed_mode,
            anchor_slice=self.anchor_slice)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise InvalidParameterError("config root must be an object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidParameterError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def replace(self, **overrides) -> "RunConfig":
        doc = self.to_dict()
        unknown = sorted(set(overrides) - set(doc))
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {', '.join(unknown)}")
        doc.update(overrides)
        return RunConfig(**doc)
