"""Loss, analytic gradients for every learnable parameter, and the fit loop.

The loss is an L1 data term over all masked slice pixels plus a quadratic
pull of the primitive scales toward a target size:

    L = sum_u |I(u) - Ihat(u)| + lambda_reg * sum_j ||exp(log_s_j) - s_target||^2

With outlier weighting enabled, the data term becomes a per-slice Laplace
likelihood  sum_u exp(-eta_i) |r_u| + n_i * eta_i  whose stationary point sets
exp(eta_i) to the slice's mean absolute residual, down-weighting slices the
model cannot explain.

Gradients are closed-form. The fused kernel returns gradients with respect to
means, packed observed covariances, intensities, slice translations, the raw
correction rotation matrices, the packed rotated PSF covariances, and the
slice intensity scalars; this module chains them through the covariance
factorization Sigma = R diag(exp(2 log_s)) R^T, the quaternion-to-rotation
map, and the PSF rotation Sigma_rot = R_eff Sigma_psf R_eff^T.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as _field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .errors import (InvalidParameterError, NumericalDegeneracyError,
                     TrainingDivergedError)
from .field import DELTA, GaussianField, evaluate_field, rasterize
from .geometry import (EIGENVALUE_FLOOR, pack_sym6, quat_rotation_vjp,
                       quat_to_rotation, unpack_sym6)
from .initialization import InitConfig, init_field, sample_init_positions
from .knn import NeighborIndex, build_index, query
from .motion import PointBatch, SliceStack, SliceStates, build_point_batch, init_states
from .optim import AdamW, AdamWConfig, SchedulerConfig, lr_at
from .psf import PsfModel, build_psf
from .volume import VolumeGrid

FIELD_PARAM_NAMES = ("means", "log_scales", "quaternions", "intensities")
SLICE_PARAM_NAMES = ("slice_quaternions", "slice_translations", "log_sigma", "eta")


@dataclass
class LossConfig:
    lambda_reg: float = 2.5e-3
    s_target: float = 1.6            # mm
    outlier_weighting: bool = False
    point_budget: int = 10_000_000   # max points per fused kernel call

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise InvalidParameterError("lambda_reg must be >= 0")
        if self.s_target <= 0:
            raise InvalidParameterError("s_target must be positive")
        if self.point_budget < 1:
            raise InvalidParameterError("point_budget must be positive")


@dataclass
class OptimConfig:
    epochs: int = 500
    lr_means: float = 2.5e-2
    lr_log_scales: float = 2.5e-2
    lr_quaternions: float = 1e-2
    lr_intensities: float = 1e-2
    lr_slice_rotation: float = 2.5e-3
    lr_slice_translation: float = 1e-1
    lr_log_sigma: float = 1e-2
    lr_eta: float = 1e-2
    scheduler: SchedulerConfig = _field(default_factory=SchedulerConfig)
    adamw: AdamWConfig = _field(default_factory=AdamWConfig)
    knn_refresh_every: int = 50
    k_neighbors: int = 50
    knn_staleness_mm: float = 0.5    # extra refresh once points move this far
    motion_warmup: int = 10          # epochs with slice states frozen
    rotation_warmup: int = 100       # epochs with slice rotations frozen
    reseed_every: int = 100          # re-seed the field from corrected points
    reseed_mode: str = "resample"    # what a re-seeded primitive inherits:
                                     # "resample" shape+intensity from the old
                                     # field, "render" intensity only,
                                     # "observed" raw pixel values only
    anchor_slice: Optional[int] = 0  # gauge fix: this slice's state never moves

    def __post_init__(self):
        rates = [self.lr_means, self.lr_log_scales, self.lr_quaternions,
                 self.lr_intensities, self.lr_slice_rotation,
                 self.lr_slice_translation, self.lr_log_sigma, self.lr_eta]
        if any(r <= 0 for r in rates):
            raise InvalidParameterError("all learning rates must be positive")
        if self.epochs < 1:
            raise InvalidParameterError("epochs must be positive")
        if self.knn_refresh_every < 1 or self.k_neighbors < 1:
            raise InvalidParameterError("knn settings must be positive")
        if self.motion_warmup < 0 or self.rotation_warmup < 0:
            raise InvalidParameterError("warmups must be >= 0")
        if self.reseed_every < 0:
            raise InvalidParameterError("reseed_every must be >= 0")
        if self.reseed_mode not in ("resample", "render", "observed"):
            raise InvalidParameterError(
                "reseed_mode must be resample, render or observed")
        if self.knn_staleness_mm < 0:
            raise InvalidParameterError("knn_staleness_mm must be >= 0")

    def field_lrs(self) -> Dict[str, float]:
        return {"means": self.lr_means, "log_scales": self.lr_log_scales,
                "quaternions": self.lr_quaternions,
                "intensities": self.lr_intensities}

    def slice_lrs(self) -> Dict[str, float]:
        return {"slice_quaternions": self.lr_slice_rotation,
                "slice_translations": self.lr_slice_translation,
                "log_sigma": self.lr_log_sigma, "eta": self.lr_eta}


@dataclass
class TrainState:
    """Optimizer moments, epoch counter, neighbor index, and run history."""
    field_opt: AdamW
    slice_opt: AdamW
    epoch: int
    index: NeighborIndex
    neighbor_ids: np.ndarray
    history: List[dict] = _field(default_factory=list)


def slice_psf_diags(batch: PointBatch, stacks: Sequence[SliceStack],
                    use_psf: bool = True,
                    psf_models: Optional[Sequence[PsfModel]] = None) -> np.ndarray:
    """(S, 3) slice-frame PSF covariance diagonal for every global slice."""
    if psf_models is None:
        psf_models = [build_psf(s.inplane_spacing, s.thickness) for s in stacks]
    if isinstance(psf_models, PsfModel):
        psf_models = [psf_models] * len(stacks)
    if len(psf_models) != len(stacks):
        raise InvalidParameterError("need one PSF model per stack")
    per_stack = np.stack([m.sigmas ** 2 for m in psf_models])
    if not use_psf:
        per_stack = np.zeros_like(per_stack)
    return per_stack[batch.slice_to_stack]


def _slice_inputs(batch: PointBatch, states: SliceStates, psf_diags: np.ndarray):
    """Per-slice kernel inputs: Rc, R_eff, packed rotated PSF, sigma."""
    Rc = states.rotations()
    R_eff = np.matmul(Rc, batch.stack_rotations[batch.slice_to_stack])
    psf6s = pack_sym6(np.einsum("sik,sk,sjk->sij", R_eff, psf_diags, R_eff))
    sigma_s = np.exp(states.log_sigma)
    return (np.ascontiguousarray(Rc), R_eff,
            np.ascontiguousarray(psf6s), sigma_s)


def _check_finite_render(I_hat: np.ndarray, slice_ids: np.ndarray) -> None:
    bad = ~np.isfinite(I_hat)
    if bad.any():
        s = int(slice_ids[int(np.flatnonzero(bad)[0])])
        raise TrainingDivergedError(f"non-finite rendered intensity on slice {s}")


def _check_scale_floor(field: GaussianField) -> None:
    smin = np.min(field.scales(), axis=1)
    bad = smin * smin < EIGENVALUE_FLOOR
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        raise NumericalDegeneracyError(
            f"primitive {j} scale {float(smin[j]):.3e} mm collapsed below the "
            f"eigenvalue floor")


def _loss_terms(absres: np.ndarray, batch: PointBatch, field: GaussianField,
                states: SliceStates, cfg: LossConfig,
                wdata_s: np.ndarray) -> dict:
    l1_per_slice = np.bincount(batch.slice_ids, weights=absres,
                               minlength=batch.n_slices)
    data = float(wdata_s @ l1_per_slice)
    if cfg.outlier_weighting:
        outlier = float(batch.slice_counts() @ states.eta)
    else:
        outlier = 0.0
    ds = field.scales() - cfg.s_target
    reg = cfg.lambda_reg * float(np.sum(ds * ds))
    loss = data + outlier + reg
    return {"loss": loss, "data_term": data, "reg_term": reg,
            "outlier_term": outlier}


def render_batch(batch: PointBatch, field: GaussianField, states: SliceStates,
                 psf_diags: np.ndarray, neighbor_ids: np.ndarray,
                 delta: float = DELTA) -> np.ndarray:
    """Observed intensities for every batch point under the current states."""
    Rc, _, psf6s, sigma_s = _slice_inputs(batch, states, psf_diags)
    sid = batch.slice_ids
    X = np.einsum("pij,pj->pi", Rc[sid], batch.lifted) + states.translations[sid]
    out = np.empty(batch.n_points)
    kernels.render_forward(
        np.ascontiguousarray(X), np.ascontiguousarray(psf6s[sid]),
        np.ascontiguousarray(sigma_s[sid]),
        np.ascontiguousarray(neighbor_ids, dtype=np.int64),
        np.ascontiguousarray(field.means, dtype=np.float64),
        np.ascontiguousarray(field.covariances6(), dtype=np.float64),
        np.ascontiguousarray(field.intensities, dtype=np.float64),
        delta, out)
    _check_finite_render(out, sid)
    return out


def compute_loss(batch: PointBatch, field: GaussianField, states: SliceStates,
                 psf_diags: np.ndarray, cfg: LossConfig,
                 neighbor_ids: np.ndarray) -> Tuple[float, dict]:
    """Total loss and its per-term breakdown at the current parameters."""
    I_hat = render_batch(batch, field, states, psf_diags, neighbor_ids)
    absres = np.abs(I_hat - batch.intensities)
    wdata_s = np.exp(-states.eta) if cfg.outlier_weighting else np.ones(batch.n_slices)
    terms = _loss_terms(absres, batch, field, states, cfg, wdata_s)
    return terms["loss"], terms


def backward(batch: PointBatch, field: GaussianField, states: SliceStates,
             psf_diags: np.ndarray, cfg: LossConfig,
             neighbor_ids: np.ndarray,
             delta: float = DELTA) -> Tuple[dict, Dict[str, np.ndarray], np.ndarray]:
    """Loss terms and analytic gradients for all parameter classes.

    Returns (terms, grads, I_hat) where grads holds arrays keyed by
    FIELD_PARAM_NAMES + SLICE_PARAM_NAMES. Primitives outside every point's
    neighbor set receive exactly zero data gradient.
    """
    _check_scale_floor(field)
    P, S, N = batch.n_points, batch.n_slices, field.count
    Rc, R_eff, psf6s, sigma_s = _slice_inputs(batch, states, psf_diags)
    wdata_s = np.exp(-states.eta) if cfg.outlier_weighting else np.ones(S)

    x0 = np.ascontiguousarray(batch.lifted, dtype=np.float64)
    sid = np.ascontiguousarray(batch.slice_ids, dtype=np.int32)
    nbr = np.ascontiguousarray(neighbor_ids, dtype=np.int64)
    tvec = np.ascontiguousarray(states.translations, dtype=np.float64)
    I_obs = np.ascontiguousarray(batch.intensities, dtype=np.float64)
    mu = np.ascontiguousarray(field.means, dtype=np.float64)
    cov6 = np.ascontiguousarray(field.covariances6(), dtype=np.float64)
    cvals = np.ascontiguousarray(field.intensities, dtype=np.float64)

    B = kernels.default_block_count(P)
    I_hat = np.empty(P)
    absres = np.empty(P)
    dmu_b = np.zeros((B, N, 3))
    dcov6_b = np.zeros((B, N, 6))
    dc_b = np.zeros((B, N))
    dt_b = np.zeros((B, S, 3))
    dRc_b = np.zeros((B, S, 3, 3))
    dpsf6_b = np.zeros((B, S, 6))
    dsig_b = np.zeros((B, S))
    for lo in range(0, P, cfg.point_budget):
        hi = min(lo + cfg.point_budget, P)
        kernels.train_step_backward(
            x0[lo:hi], sid[lo:hi], Rc, tvec, psf6s, sigma_s, wdata_s,
            I_obs[lo:hi], nbr[lo:hi], mu, cov6, cvals, delta, B,
            I_hat[lo:hi], absres[lo:hi],
            dmu_b, dcov6_b, dc_b, dt_b, dRc_b, dpsf6_b, dsig_b)
    _check_finite_render(I_hat, sid)

    dmu = dmu_b.sum(axis=0)
    dcov6 = dcov6_b.sum(axis=0)
    dc = dc_b.sum(axis=0)
    dt = dt_b.sum(axis=0)
    dRc = dRc_b.sum(axis=0)
    dpsf6 = dpsf6_b.sum(axis=0)
    dsigraw = dsig_b.sum(axis=0)

    # Primitive covariance chain: Sigma_j = R diag(exp(2 ls)) R^T.
    D = np.exp(2.0 * field.log_scales)
    R = quat_to_rotation(field.quaternions)
    G = unpack_sym6(dcov6)
    GR = np.matmul(G, R)
    dR = 2.0 * GR * D[:, None, :]
    dls = 2.0 * D * np.einsum("njk,njk->nk", R, GR)
    dq = quat_rotation_vjp(field.quaternions, dR)

    if cfg.lambda_reg > 0.0:
        s = field.scales()
        dls = dls + cfg.lambda_reg * 2.0 * (s - cfg.s_target) * s

    # Slice chain: the rotated PSF ties R_eff = Rc @ R_stack back to q_i.
    Gp = unpack_sym6(dpsf6)
    dReff = 2.0 * np.matmul(Gp, R_eff) * psf_diags[:, None, :]
    Rstack_T = np.transpose(batch.stack_rotations[batch.slice_to_stack], (0, 2, 1))
    dRc_total = dRc + np.matmul(dReff, Rstack_T)
    dq_i = quat_rotation_vjp(states.quaternions, dRc_total)
    dlog_sigma = dsigraw * sigma_s

    l1_per_slice = np.bincount(batch.slice_ids, weights=absres, minlength=S)
    if cfg.outlier_weighting:
        deta = -wdata_s * l1_per_slice + batch.slice_counts()
    else:
        deta = np.zeros(S)

    terms = _loss_terms(absres, batch, field, states, cfg, wdata_s)
    grads = {"means": dmu, "log_scales": dls, "quaternions": dq,
             "intensities": dc, "slice_quaternions": dq_i,
             "slice_translations": dt, "log_sigma": dlog_sigma, "eta": deta}
    return terms, grads, I_hat


def corrected_points(batch: PointBatch, states: SliceStates) -> np.ndarray:
    """World positions of all batch points under the current corrections."""
    sid = batch.slice_ids
    Rc = states.rotations()
    return np.einsum("pij,pj->pi", Rc[sid], batch.lifted) + states.translations[sid]


def reseed_field(batch: PointBatch, states: SliceStates, n_gaussians: int,
                 initial_scale: float, seed: int,
                 source_field: Optional[GaussianField] = None,
                 k_neighbors: int = 50,
                 mode: str = "resample") -> GaussianField:
    """Fresh field drawn from the observed points at their corrected poses.

    Joint pose/field descent tends to entrench: the field co-adapts to
    whatever poses it was trained under, after which better poses score worse
    and pose gradients dry up. Discarding the field and re-seeding it from the
    data at the current corrections erases that commitment while keeping all
    pose progress; the re-seeded field converges quickly because it starts on
    the observations themselves.

    `mode` picks what the new primitives inherit. "observed" starts them from
    raw pixel intensities with isotropic `initial_scale` shapes; "render"
    starts intensities from `source_field`'s own prediction at the new
    positions; "resample" additionally copies each primitive's shape (scales
    and orientation) from its nearest source primitive, handing the fitted
    appearance over to freshly based geometry.
    """
    if mode not in ("resample", "render", "observed"):
        raise InvalidParameterError(f"unknown reseed mode {mode!r}")
    if mode != "observed" and source_field is None:
        raise InvalidParameterError(f"reseed mode {mode!r} needs a source field")
    pos = corrected_points(batch, states)
    rng = np.random.Generator(np.random.PCG64(seed))
    replace = n_gaussians > batch.n_points
    take = rng.choice(batch.n_points, size=n_gaussians, replace=replace)
    log_scales = np.full((n_gaussians, 3), np.log(initial_scale))
    quats = np.zeros((n_gaussians, 4))
    quats[:, 0] = 1.0
    if mode == "observed":
        intensities = batch.intensities[take].astype(np.float64)
    else:
        index = build_index(source_field.means)
        nbr = query(index, pos[take], min(k_neighbors, source_field.count))
        intensities = evaluate_field(pos[take], source_field, nbr)
        if mode == "resample":
            nearest = nbr[:, 0]
            log_scales = source_field.log_scales[nearest].copy()
            quats = source_field.quaternions[nearest].copy()
    return GaussianField(
        means=pos[take].copy(),
        log_scales=log_scales,
        quaternions=quats,
        intensities=intensities)


def _evaluate(field: GaussianField, reference: VolumeGrid, K: int,
              states: Optional[SliceStates] = None,
              truth_states: Optional[SliceStates] = None):
    from .metrics import motion_gauge, psnr, ssim
    transform = None
    if states is not None and truth_states is not None:
        transform = motion_gauge(states, truth_states)
    recon = rasterize(field, reference, K=K, transform=transform)
    return (psnr(recon.data, reference.data, mask=reference.mask),
            ssim(recon.data, reference.data, mask=reference.mask))


def fit(stacks: Sequence[SliceStack],
        init_cfg: Optional[InitConfig] = None,
        loss_cfg: Optional[LossConfig] = None,
        optim_cfg: Optional[OptimConfig] = None,
        *,
        field: Optional[GaussianField] = None,
        states: Optional[SliceStates] = None,
        use_psf: bool = True,
        psf_models: Optional[Sequence[PsfModel]] = None,
        reference: Optional[VolumeGrid] = None,
        truth_states: Optional[SliceStates] = None,
        eval_every: int = 0,
        verbose: bool = False) -> Tuple[GaussianField, SliceStates, List[dict]]:
    """Fit a Gaussian field and per-slice states to the given stacks.

    Runs init -> neighbor index -> epoch loop {forward/backward -> AdamW step},
    refreshing the index every `knn_refresh_every` epochs. Slice states stay
    frozen during the first `motion_warmup` epochs of every segment, slice
    rotations additionally until `rotation_warmup`, and the anchor slice stays
    frozen throughout (a gauge choice: without it a global rigid move of the
    field plus the inverse move of every slice leaves the loss unchanged).

    When `reseed_every > 0`, the field is discarded and re-seeded from the
    corrected points at every multiple of it (stopping two segments before the
    end so the final field trains uninterrupted), which prevents the joint
    descent from entrenching around early, badly-posed geometry; the learning
    rate schedule restarts per segment.

    When a reference grid is given and `eval_every > 0`, PSNR/SSIM against it
    are recorded every `eval_every` epochs; if `truth_states` (batch-ordered,
    evaluation-only) are also given, the global pose ambiguity between the
    reconstruction frame and the reference frame is removed first. Returns
    (field, states, history).
    """
    if len(stacks) == 0:
        raise InvalidParameterError("need at least one stack")
    init_cfg = init_cfg or InitConfig()
    loss_cfg = loss_cfg or LossConfig()
    optim_cfg = optim_cfg or OptimConfig()

    batch = build_point_batch(stacks)
    if field is None:
        positions = sample_init_positions(stacks, init_cfg)
        field = init_field(positions, stacks, init_cfg)
    field = field.astype(np.float64)
    states = states.copy() if states is not None else init_states(stacks)
    if len(states) != batch.n_slices:
        raise InvalidParameterError("slice state count does not match stacks")
    psf_diags = slice_psf_diags(batch, stacks, use_psf, psf_models)

    field_params = {name: getattr(field, name) for name in FIELD_PARAM_NAMES}
    slice_params = {"slice_quaternions": states.quaternions,
                    "slice_translations": states.translations,
                    "log_sigma": states.log_sigma, "eta": states.eta}
    state = TrainState(
        field_opt=AdamW(field_params, optim_cfg.field_lrs(), optim_cfg.adamw),
        slice_opt=AdamW(slice_params, optim_cfg.slice_lrs(), optim_cfg.adamw),
        epoch=0,
        index=build_index(field.means, epoch=0),
        neighbor_ids=np.empty(0, dtype=np.int64))

    t_start = time.perf_counter()
    segment_start = 0
    refresh_points = None
    for epoch in range(optim_cfg.epochs):
        state.epoch = epoch
        reseeded = False
        if (optim_cfg.reseed_every > 0 and epoch > 0
                and epoch % optim_cfg.reseed_every == 0
                and epoch <= optim_cfg.epochs - 2 * optim_cfg.reseed_every):
            source = None if optim_cfg.reseed_mode == "observed" else field
            field = reseed_field(batch, states, field.count,
                                 init_cfg.initial_scale, init_cfg.seed + epoch,
                                 source_field=source,
                                 k_neighbors=optim_cfg.k_neighbors,
                                 mode=optim_cfg.reseed_mode)
            field_params = {name: getattr(field, name) for name in FIELD_PARAM_NAMES}
            state.field_opt = AdamW(field_params, optim_cfg.field_lrs(),
                                    optim_cfg.adamw)
            state.slice_opt = AdamW(slice_params, optim_cfg.slice_lrs(),
                                    optim_cfg.adamw)
            segment_start = epoch
            reseeded = True
        seg_epoch = epoch - segment_start
        points = corrected_points(batch, states)
        stale = (refresh_points is not None and optim_cfg.knn_staleness_mm > 0
                 and np.max(np.einsum("pi,pi->p", points - refresh_points,
                                      points - refresh_points))
                 > optim_cfg.knn_staleness_mm ** 2)
        if reseeded or stale or epoch % optim_cfg.knn_refresh_every == 0:
            state.index = build_index(field.means, epoch=epoch)
            state.neighbor_ids = query(state.index, points, optim_cfg.k_neighbors)
            refresh_points = points
        terms, grads, _ = backward(batch, field, states, psf_diags, loss_cfg,
                                   state.neighbor_ids)
        if not np.isfinite(terms["loss"]):
            raise TrainingDivergedError(f"loss diverged at epoch {epoch}")

        scale = lr_at(seg_epoch, 1.0, optim_cfg.scheduler)
        state.field_opt.step({k: grads[k] for k in FIELD_PARAM_NAMES}, scale)
        if seg_epoch >= optim_cfg.motion_warmup and epoch >= optim_cfg.motion_warmup:
            if epoch < optim_cfg.rotation_warmup:
                grads["slice_quaternions"][:] = 0.0
            if optim_cfg.anchor_slice is not None:
                for name in SLICE_PARAM_NAMES:
                    grads[name][optim_cfg.anchor_slice] = 0.0
            state.slice_opt.step({k: grads[k] for k in SLICE_PARAM_NAMES}, scale)

        record = dict(terms)
        record.update(epoch=epoch, lr_scale=scale, reseeded=reseeded,
                      seconds=time.perf_counter() - t_start,
                      psnr=None, ssim=None)
        if (reference is not None and eval_every > 0
                and (epoch + 1) % eval_every == 0):
            record["psnr"], record["ssim"] = _evaluate(
                field, reference, optim_cfg.k_neighbors, states, truth_states)
        state.history.append(record)
        if verbose and (epoch % 50 == 0 or epoch == optim_cfg.epochs - 1):
            extra = ""
            if record["psnr"] is not None:
                extra = f"  psnr={record['psnr']:.2f}  ssim={record['ssim']:.4f}"
            print(f"epoch {epoch:4d}  loss={terms['loss']:.6e}  "
                  f"lr_scale={scale:.4f}{extra}", flush=True)

    return field, states, state.history
