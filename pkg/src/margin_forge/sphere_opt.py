"""Sphere-constrained first-order optimization.

Covers three jobs: joint free-embedding descent of (W, Z) on the unit
sphere under any configured loss, Riesz-energy minimization with exponent
continuation as a Tammes-packing surrogate, and the analytic construction
showing softmax can reach its infimum at an arbitrarily small class margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateInputError, InfeasibleConfigError, TrainingDivergedError
from .geometry import normalize_rows, simplex_etf, tangent_project_rows
from .losses import LossOutput, LossSpec, RegularizerSpec, composite
from .margins import class_margin, mean_cosine_sample_margin, min_sample_margin

UNIT_ROW_TOL = 1e-9
GAMMA_CEILING_SLACK = 1e-6


@dataclass
class OptimConfig:
    lr0: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0
    steps: int = 10000
    t_max: int = 10000
    seed: int = 0
    log_every: int = 200


@dataclass
class RieszConfig:
    # the continuation has to climb well past t=16 before the energy
    # minimizer tracks the best-packing configuration for k > d+1
    t: float = 2.0
    continuation: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)
    restarts: int = 3


@dataclass
class HistoryRow:
    step: int
    lr: float
    loss: float
    class_margin: float  # radians
    gamma_min: float | None = None
    m_samp: float | None = None


@dataclass
class RunHistory:
    rows: list[HistoryRow] = field(default_factory=list)

    COLUMNS = ("step", "lr", "loss", "class_margin_deg", "gamma_min", "m_samp")

    def log(self, **kw) -> None:
        self.rows.append(HistoryRow(**kw))

    def csv_rows(self) -> list[list[str]]:
        def fmt(v):
            return "" if v is None else f"{v:.12g}"

        out = []
        for r in self.rows:
            out.append([
                str(r.step), fmt(r.lr), fmt(r.loss),
                fmt(math.degrees(r.class_margin)), fmt(r.gamma_min), fmt(r.m_samp),
            ])
        return out


def cosine_lr(step: int, cfg: OptimConfig) -> float:
    """Single annealing cycle: lr0 at step 0, zero at t_max, clamped after."""
    frac = min(step, cfg.t_max) / cfg.t_max
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))


def sphere_sgd_step(params, grad, state, cfg: OptimConfig, step: int,
                    lr_scale: float = 1.0):
    """One projected SGD step on unit-row parameters.

    The momentum buffer accumulates tangent-projected gradients; rows are
    retracted back to the sphere by renormalization. The annealing cycle
    wraps every t_max steps, so runs longer than one cycle get warm
    restarts. Returns (new_params, new_state).
    """
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if state is None:
        state = np.zeros_like(params)
    lr = cosine_lr(step % cfg.t_max, cfg) * lr_scale
    g = grad
    if cfg.weight_decay:
        g = g + cfg.weight_decay * params
    v = cfg.momentum * state + tangent_project_rows(params, g)
    return normalize_rows(params - lr * v), v


def riesz_energy(w, t: float) -> LossOutput:
    """Riesz t-energy sum_{i != j} ||w_i - w_j||^(-t) over ordered pairs."""
    w = np.asarray(w, dtype=float)
    diffs = w[:, None, :] - w[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diffs, diffs)
    k = w.shape[0]
    off = ~np.eye(k, dtype=bool)
    if np.any(d2[off] == 0.0):
        raise DegenerateInputError("coincident rows: Riesz energy is singular")
    np.fill_diagonal(d2, np.inf)
    d = np.sqrt(d2)
    value = float((d ** -t).sum())
    coef = d ** (-t - 2.0)
    grad = -2.0 * t * np.einsum("ij,ijk->ik", coef, diffs)
    return LossOutput(value, grad, np.zeros((0, w.shape[1])))


@dataclass
class RieszResult:
    prototypes: np.ndarray
    class_margin: float  # radians
    energy: float
    history: RunHistory
    restarts: list[dict]


def minimize_riesz(k: int, d: int, riesz_cfg: RieszConfig, optim_cfg: OptimConfig) -> RieszResult:
    """Best-of-restarts Riesz minimizer with exponent continuation.

    Each restart optimizes the energy at every t in the continuation
    schedule in turn, warm-starting from the previous stage; the learning
    rate anneals to zero within each stage. A restart that produces a
    non-finite energy is retried with a smaller learning rate before
    giving up. The restart with the lowest final energy wins (ties go to
    the lowest restart index).
    """
    if k < 2 or d < 2:
        raise InfeasibleConfigError(f"need k >= 2 and d >= 2, got k={k}, d={d}")
    best = None
    summaries = []
    for r in range(riesz_cfg.restarts):
        run = None
        for lr_scale in (1.0, 0.25, 0.0625):
            run = _riesz_single(k, d, riesz_cfg, optim_cfg, restart=r, lr_scale=lr_scale)
            if run is not None:
                break
        if run is None:
            continue
        w, energy, history = run
        margin = class_margin(w)
        summaries.append({"restart": r, "class_margin": margin, "energy": energy})
        if best is None or energy < best[1]:
            best = (w, energy, history, margin)
    if best is None:
        raise TrainingDivergedError(
            f"riesz minimization diverged in all {riesz_cfg.restarts} restarts"
        )
    w, energy, history, margin = best
    return RieszResult(w, margin, energy, history, summaries)


def _riesz_single(k, d, riesz_cfg, optim_cfg, restart, lr_scale):
    rng = np.random.default_rng(np.random.SeedSequence((optim_cfg.seed, restart)))
    w = normalize_rows(rng.normal(size=(k, d)))
    history = RunHistory()
    stage_cfg = replace(optim_cfg, t_max=max(optim_cfg.steps, 1))
    global_step = 0
    energy = math.inf
    for t in riesz_cfg.continuation:
        state = None
        for step in range(optim_cfg.steps):
            out = riesz_energy(w, t)
            energy = out.value
            if not math.isfinite(energy):
                return None
            if global_step % optim_cfg.log_every == 0:
                history.log(step=global_step, lr=cosine_lr(step, stage_cfg) * lr_scale,
                            loss=energy, class_margin=class_margin(w))
            w, state = sphere_sgd_step(w, out.grad_W, state, stage_cfg, step, lr_scale)
            global_step += 1
    out = riesz_energy(w, riesz_cfg.continuation[-1])
    energy = out.value
    if not math.isfinite(energy):
        return None
    history.log(step=global_step, lr=0.0, loss=energy, class_margin=class_margin(w))
    return w, energy, history


def optimize_free_embedding(k: int, d: int, labels, loss_spec: LossSpec,
                            reg_spec: RegularizerSpec, cfg: OptimConfig,
                            s_continuation: tuple[float, ...] | None = None):
    """Joint sphere SGD on prototypes W and free features Z.

    Both matrices start from seeded isotropic Gaussian rows normalized to
    the sphere and are updated with the same projected step. Returns
    (W, Z, RunHistory). Raises TrainingDivergedError with the step index
    if the loss turns non-finite.

    s_continuation optionally lists scale values to optimize in sequence,
    splitting the step budget evenly and warm-starting each stage from the
    previous one. Large scales saturate the softmax family long before the
    shared optimum is reached, so a small-scale stage first gets past the
    flat region; pass e.g. (5.0, spec.s).
    """
    labels = np.asarray(labels, dtype=int)
    n = labels.shape[0]
    counts = np.bincount(labels, minlength=k)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    w = normalize_rows(rng.normal(size=(k, d)))
    z = normalize_rows(rng.normal(size=(n, d)))
    history = RunHistory()

    def snapshot(step, lr, loss_value):
        history.log(step=step, lr=lr, loss=loss_value,
                    class_margin=class_margin(w),
                    gamma_min=min_sample_margin(w, z, labels),
                    m_samp=mean_cosine_sample_margin(w, z, labels))

    stages = [loss_spec] if s_continuation is None else [
        loss_spec.with_(s=float(s)) for s in s_continuation
    ]
    stage_steps = cfg.steps // len(stages)
    global_step = 0
    for stage_spec in stages:
        # Gradients and curvature grow with the scale, so later stages step
        # proportionally smaller to stay inside the basin they inherit.
        lr_scale = min(1.0, stages[0].s / stage_spec.s)
        state_w = state_z = None
        for step in range(stage_steps):
            out = composite(w, z, labels, stage_spec, reg_spec, class_counts=counts)
            if not math.isfinite(out.value):
                raise TrainingDivergedError(f"non-finite loss at step {global_step}")
            if global_step % cfg.log_every == 0:
                snapshot(global_step, cosine_lr(step % cfg.t_max, cfg) * lr_scale,
                         out.value)
            w, state_w = sphere_sgd_step(w, out.grad_W, state_w, cfg, step, lr_scale)
            z, state_z = sphere_sgd_step(z, out.grad_Z, state_z, cfg, step, lr_scale)
            global_step += 1
    final = composite(w, z, labels, loss_spec, reg_spec, class_counts=counts)
    snapshot(global_step, 0.0, final.value)

    if loss_spec.normalize_features and loss_spec.normalize_prototypes:
        ceiling = k / (k - 1.0) + GAMMA_CEILING_SLACK
        gmin = min_sample_margin(w, z, labels)
        if gmin > ceiling:
            raise AssertionError(
                f"gamma_min {gmin} exceeds the k/(k-1) ceiling {ceiling}"
            )
    return w, z, history


def construct_small_margin_config(epsilon: float, k: int, d: int, scale: float):
    """k prototypes pairwise at angle epsilon, with features on top of them.

    Built by shrinking a centered simplex frame toward a common axis: every
    pair of the unit directions meets at exactly epsilon, so the class
    margin is epsilon by construction at any scale. W carries the scale;
    z_i = w_{y_i}, one sample per class. Softmax loss decreases towards its
    infimum as scale grows even though the margin never moves.
    """
    if not 0 < epsilon <= math.pi / 2:
        raise InfeasibleConfigError(f"epsilon must lie in (0, pi/2], got {epsilon}")
    if not scale > 0:
        raise InfeasibleConfigError(f"scale must be positive, got {scale}")
    if k > d:
        raise InfeasibleConfigError(
            f"{k} equiangular unit vectors at an acute angle need dimension >= {k}"
        )
    base = simplex_etf(k, d - 1)
    p = np.zeros((k, d))
    p[:, : d - 1] = base
    sin2 = (1.0 - math.cos(epsilon)) * (k - 1.0) / k
    sin_phi = math.sqrt(sin2)
    cos_phi = math.sqrt(1.0 - sin2)
    v = sin_phi * p
    v[:, d - 1] = cos_phi
    w = scale * v
    labels = np.arange(k)
    z = w.copy()
    return w, z, labels
