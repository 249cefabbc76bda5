"""Margin-based losses and regularizers with analytic gradients.

Every loss maps (W, Z, labels, spec) to a LossOutput carrying the scalar
value and gradients with respect to both the prototype matrix W (k, d) and
the feature matrix Z (N, d). Gradients are hand-derived and checked against
central finite differences (see finite_diff_check and the gradcheck module).

All exponentials go through max-subtracted logsumexp so scales up to s=64
do not overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    InvalidCountsError,
    InvalidSpecError,
    NumericOverflowError,
)
from .margins import _check_labels

LOSS_KINDS = ("softmax_ce", "focal", "unified_margin", "gm_softmax", "lm_softmax", "ldam")

# cos(theta) is clamped into [-1+eps, 1-eps] before arccos; d(arccos) is
# evaluated at the clamped value so gradients stay finite at alignment.
COS_CLAMP_EPS = 1e-7


@dataclass
class LossSpec:
    """Which loss to use and its hyperparameters."""

    kind: str = "softmax_ce"
    s: float = 1.0
    m1: float = 1.0
    m2: float = 0.0
    m3: float = 0.0
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta1: float = 0.0
    beta2: float = 0.0
    focal_gamma: float = 0.0
    ldam_C: float | None = None  # None: auto so the largest margin is 0.5
    normalize_features: bool = False
    normalize_prototypes: bool = False

    def validate(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise InvalidSpecError(f"unknown loss kind {self.kind!r}")
        if not self.s > 0:
            raise InvalidSpecError(f"scale s must be positive, got {self.s}")
        if self.kind == "focal" and self.focal_gamma < 0:
            raise InvalidSpecError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.kind == "unified_margin":
            if self.m1 < 1:
                raise InvalidSpecError(f"m1 must be >= 1, got {self.m1}")
            if not 0 <= self.m2 <= math.pi / 2:
                raise InvalidSpecError(f"m2 must lie in [0, pi/2], got {self.m2}")
            if self.m3 < 0:
                raise InvalidSpecError(f"m3 must be >= 0, got {self.m3}")
        if self.kind == "gm_softmax":
            if self.alpha1 < 0.5:
                raise InvalidSpecError(f"alpha1 must be >= 1/2, got {self.alpha1}")
            if self.alpha2 > self.alpha1:
                raise InvalidSpecError("alpha2 must not exceed alpha1")
        if self.kind in ("unified_margin", "gm_softmax", "lm_softmax", "ldam"):
            if not (self.normalize_features and self.normalize_prototypes):
                raise InvalidSpecError(
                    f"{self.kind} requires normalize_features and normalize_prototypes; "
                    "unnormalized margins are degenerate (margins can shrink to zero "
                    "while the loss approaches its infimum)"
                )
        if self.ldam_C is not None and not self.ldam_C > 0:
            raise InvalidSpecError(f"ldam_C must be positive, got {self.ldam_C}")

    # Presets from the unified (m1, m2, m3) family.
    @classmethod
    def normface(cls, s: float) -> "LossSpec":
        return cls(kind="unified_margin", s=s, m1=1.0, m2=0.0, m3=0.0,
                   normalize_features=True, normalize_prototypes=True)

    @classmethod
    def cosface(cls, s: float, m3: float = 0.35) -> "LossSpec":
        return cls(kind="unified_margin", s=s, m1=1.0, m2=0.0, m3=m3,
                   normalize_features=True, normalize_prototypes=True)

    @classmethod
    def arcface(cls, s: float, m2: float = 0.5) -> "LossSpec":
        return cls(kind="unified_margin", s=s, m1=1.0, m2=m2, m3=0.0,
                   normalize_features=True, normalize_prototypes=True)

    @classmethod
    def sphereface_fn(cls, s: float, m1: float = 1.5) -> "LossSpec":
        return cls(kind="unified_margin", s=s, m1=m1, m2=0.0, m3=0.0,
                   normalize_features=True, normalize_prototypes=True)

    @classmethod
    def lm(cls, s: float) -> "LossSpec":
        return cls(kind="lm_softmax", s=s,
                   normalize_features=True, normalize_prototypes=True)

    def with_(self, **kw) -> "LossSpec":
        return replace(self, **kw)


@dataclass
class RegularizerSpec:
    """Weights for the sample-margin and zero-centroid regularizers."""

    mu_sm: float = 0.0
    use_mean_variant: bool = False
    lambda_w: float = 0.0

    def validate(self) -> None:
        for name in ("mu_sm", "lambda_w"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidSpecError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossOutput:
    value: float
    grad_W: np.ndarray
    grad_Z: np.ndarray


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericOverflowError("non-finite entries in loss inputs")


def _dots(w, z, norm_w: bool, norm_z: bool):
    """Inner products of (optionally row-normalized) Z against W.

    Returns the (N, k) product matrix and a backward closure mapping dL/dC
    to (dL/dW, dL/dZ), differentiating through the normalization.
    """
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    _check_finite(w, z)
    if norm_w:
        wn = np.linalg.norm(w, axis=1, keepdims=True)
        wh = w / wn
    else:
        wn, wh = None, w
    if norm_z:
        zn = np.linalg.norm(z, axis=1, keepdims=True)
        zh = z / zn
    else:
        zn, zh = None, z
    with np.errstate(over="ignore"):
        c = zh @ wh.T
    if not np.all(np.isfinite(c)):
        raise NumericOverflowError("inner products overflowed")

    def backward(d):
        gz = d @ wh
        gw = d.T @ zh
        if norm_z:
            gz = (gz - np.sum(gz * zh, axis=1, keepdims=True) * zh) / zn
        if norm_w:
            gw = (gw - np.sum(gw * wh, axis=1, keepdims=True) * wh) / wn
        return gw, gz

    return c, backward


def _lse_rows(t: np.ndarray):
    """Row-wise max-subtracted logsumexp; tolerates -inf placeholders."""
    m = t.max(axis=1, keepdims=True)
    e = np.exp(t - m)
    s = e.sum(axis=1, keepdims=True)
    return (m + np.log(s)).ravel(), e / s


def softmax_ce(w, z, labels, spec: LossSpec) -> LossOutput:
    """Mean cross-entropy of softmax over the inner-product logits (no bias).

    Logits are s * (w_j . z_i) with normalization applied (and differentiated
    through) first when spec.normalize_prototypes / spec.normalize_features
    ask for it.
    """
    spec.validate()
    c, backward = _dots(w, z, spec.normalize_prototypes, spec.normalize_features)
    n, k = c.shape
    y = _check_labels(labels, k)
    idx = np.arange(n)
    t = spec.s * c
    lse, p = _lse_rows(t)
    value = float(np.mean(lse - t[idx, y]))
    d = p.copy()
    d[idx, y] -= 1.0
    d *= spec.s / n
    gw, gz = backward(d)
    return LossOutput(value, gw, gz)


def focal(w, z, labels, spec: LossSpec) -> LossOutput:
    """Focal loss, mean of -(1-p_y)^gamma log p_y; gamma=0 recovers softmax_ce."""
    spec.validate()
    g = spec.focal_gamma
    c, backward = _dots(w, z, spec.normalize_prototypes, spec.normalize_features)
    n, k = c.shape
    y = _check_labels(labels, k)
    idx = np.arange(n)
    t = spec.s * c
    lse, p = _lse_rows(t)
    log_py = t[idx, y] - lse
    py = np.exp(log_py)
    omp = 1.0 - py
    value = float(np.mean(-(omp ** g) * log_py))
    # dL/dp_y folded with dp_y/dlogit; both terms vanish as p_y -> 1.
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = g * py * omp ** (g - 1.0) * log_py - omp ** g
    coef = np.where(omp < 1e-12, 0.0, coef)
    d = p * (-coef[:, None])
    d[idx, y] += coef
    d *= spec.s / n
    gw, gz = backward(d)
    return LossOutput(value, gw, gz)


def _target_cosine(c, y):
    idx = np.arange(c.shape[0])
    cy = c[idx, y]
    cy_cl = np.clip(cy, -1.0 + COS_CLAMP_EPS, 1.0 - COS_CLAMP_EPS)
    return idx, cy_cl


def unified_margin(w, z, labels, spec: LossSpec) -> LossOutput:
    """The (m1, m2, m3) margin family on normalized features and prototypes.

    Target logit is s*(cos(m1*theta_y + m2) - m3) against competitors
    s*cos(theta_j). Presets: NormFace (1, 0, 0), CosFace (1, 0, m3),
    ArcFace (1, m2, 0), multiplicative SphereFace-style (m1, 0, 0); the raw
    cosine is used for m1 > 1, valid for theta_y in [0, pi/2].
    """
    spec.validate()
    if spec.kind != "unified_margin":
        raise InvalidSpecError(f"spec kind is {spec.kind!r}, expected unified_margin")
    c, backward = _dots(w, z, True, True)
    n, k = c.shape
    y = _check_labels(labels, k)
    idx, cy_cl = _target_cosine(c, y)
    theta = np.arccos(cy_cl)
    tgt = spec.s * (np.cos(spec.m1 * theta + spec.m2) - spec.m3)
    t = spec.s * c
    t[idx, y] = tgt
    lse, q = _lse_rows(t)
    value = float(np.mean(lse - tgt))
    dtgt_dc = spec.s * spec.m1 * np.sin(spec.m1 * theta + spec.m2) / np.sqrt(1.0 - cy_cl ** 2)
    d = q * (spec.s / n)
    d[idx, y] = (q[idx, y] - 1.0) * dtgt_dc / n
    gw, gz = backward(d)
    return LossOutput(value, gw, gz)


def _gm_core(w, z, labels, s, a1, a2, b1, b2):
    """Generalized margin softmax with per-sample coefficients.

    L_i = -log[ exp(s(a1 c_y + b1)) / (exp(s(a2 c_y + b2)) + sum_{j!=y} exp(s c_j)) ]

    Note the numerator term is not part of the denominator unless a1=a2 and
    b1=b2, so values may be negative.
    """
    c, backward = _dots(w, z, True, True)
    n, k = c.shape
    y = _check_labels(labels, k)
    idx = np.arange(n)
    cy = c[idx, y]
    u = s * (a1 * cy + b1)
    t = s * c
    t[idx, y] = s * (a2 * cy + b2)
    lse, q = _lse_rows(t)
    d = q * (s / n)
    d[idx, y] = (q[idx, y] * a2 - a1) * s / n
    gw, gz = backward(d)
    return LossOutput(float(np.mean(lse - u)), gw, gz)


def gm_softmax(w, z, labels, spec: LossSpec) -> LossOutput:
    """Generalized margin softmax with constant (alpha1, alpha2, beta1, beta2)."""
    spec.validate()
    if spec.kind != "gm_softmax":
        raise InvalidSpecError(f"spec kind is {spec.kind!r}, expected gm_softmax")
    return _gm_core(w, z, labels, spec.s, spec.alpha1, spec.alpha2,
                    spec.beta1, spec.beta2)


def gm_lower_bound(k: int, spec: LossSpec) -> float:
    """Risk floor of the generalized margin softmax on class-balanced data.

    log[ exp(s(a2-a1+b2-b1)) + (k-1) exp(-s(1/(k-1)+a1+b1)) ], attained
    exactly at the centered simplex configuration with z_i = w_{y_i}.
    """
    s = spec.s
    t1 = s * (spec.alpha2 - spec.alpha1 + spec.beta2 - spec.beta1)
    t2 = math.log(k - 1.0) - s * (1.0 / (k - 1.0) + spec.alpha1 + spec.beta1)
    m = max(t1, t2)
    return m + math.log(math.exp(t1 - m) + math.exp(t2 - m))


def lm_softmax(w, z, labels, spec: LossSpec) -> LossOutput:
    """Softmax with the target term removed from the denominator.

    L_i = (1/s) log sum_{j != y} exp(s (w_j - w_y) . z_i); minimizing it
    pushes every competing logit below the target by the largest margin.
    """
    spec.validate()
    if spec.kind != "lm_softmax":
        raise InvalidSpecError(f"spec kind is {spec.kind!r}, expected lm_softmax")
    c, backward = _dots(w, z, True, True)
    n, k = c.shape
    y = _check_labels(labels, k)
    idx = np.arange(n)
    cy = c[idx, y]
    t = spec.s * c
    t[idx, y] = -np.inf
    lse, r = _lse_rows(t)
    value = float(np.mean(lse / spec.s - cy))
    d = r / n
    d[idx, y] = -1.0 / n
    gw, gz = backward(d)
    return LossOutput(value, gw, gz)


def ldam(w, z, labels, class_counts, spec: LossSpec) -> LossOutput:
    """Label-distribution-aware margins: beta_i = -C n_{y_i}^{-1/4} per sample."""
    spec.validate()
    counts = np.asarray(class_counts, dtype=float)
    if counts.ndim != 1 or np.any(counts <= 0):
        raise InvalidCountsError(f"class counts must all be positive, got {class_counts}")
    y = _check_labels(labels, counts.shape[0])
    c_coef = spec.ldam_C if spec.ldam_C is not None else 0.5 * counts.min() ** 0.25
    beta = -c_coef * counts[y] ** -0.25
    return _gm_core(w, z, labels, spec.s, 1.0, 1.0, beta, beta)


def r_sm(w, z, labels, use_mean_variant: bool = False) -> LossOutput:
    """Sample-margin regularizer, mean of -(w_y.z - max_{j!=y} w_j.z).

    The mean variant replaces the max over competitors with their average,
    pushing z away from the centroid of the other prototypes. Subgradients
    at ties pick the lowest competing index.
    """
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    _check_finite(w, z)
    n, k = z.shape[0], w.shape[0]
    y = _check_labels(labels, k)
    idx = np.arange(n)
    m = z @ w.T
    d = np.zeros_like(m)
    if use_mean_variant:
        value = float(np.mean(-m[idx, y] + (m.sum(axis=1) - m[idx, y]) / (k - 1.0)))
        d += 1.0 / (k - 1.0)
        d[idx, y] = -1.0
    else:
        masked = m.copy()
        masked[idx, y] = -np.inf
        jstar = masked.argmax(axis=1)  # argmax takes the first maximizer
        value = float(np.mean(masked[idx, jstar] - m[idx, y]))
        d[idx, jstar] = 1.0
        d[idx, y] = -1.0
    d /= n
    return LossOutput(value, d.T @ z, d @ w)


def r_w(w, lambda_w: float) -> LossOutput:
    """Zero-centroid regularizer lambda * ||mean of prototypes||^2.

    Applies only to the prototype matrix; grad_Z is identically zero (shape
    (0, d) since no features are involved).
    """
    w = np.asarray(w, dtype=float)
    _check_finite(w)
    k, d = w.shape
    ctr = w.mean(axis=0)
    value = float(lambda_w * ctr @ ctr)
    gw = np.tile(lambda_w * (2.0 / k) * ctr, (k, 1))
    return LossOutput(value, gw, np.zeros((0, d)))


def base_loss(w, z, labels, spec: LossSpec, class_counts=None) -> LossOutput:
    """Dispatch on spec.kind."""
    if spec.kind == "softmax_ce":
        return softmax_ce(w, z, labels, spec)
    if spec.kind == "focal":
        return focal(w, z, labels, spec)
    if spec.kind == "unified_margin":
        return unified_margin(w, z, labels, spec)
    if spec.kind == "gm_softmax":
        return gm_softmax(w, z, labels, spec)
    if spec.kind == "lm_softmax":
        return lm_softmax(w, z, labels, spec)
    if spec.kind == "ldam":
        if class_counts is None:
            raise InvalidCountsError("ldam requires class_counts")
        return ldam(w, z, labels, class_counts, spec)
    raise InvalidSpecError(f"unknown loss kind {spec.kind!r}")


def composite(w, z, labels, loss_spec: LossSpec, reg_spec: RegularizerSpec,
              class_counts=None, base_weight: float = 1.0) -> LossOutput:
    """base_weight * L + mu_sm * R_sm + R_w(lambda_w), gradients summed."""
    reg_spec.validate()
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    value = 0.0
    gw = np.zeros_like(w)
    gz = np.zeros_like(z)
    if base_weight != 0.0:
        out = base_loss(w, z, labels, loss_spec, class_counts)
        value += base_weight * out.value
        gw += base_weight * out.grad_W
        gz += base_weight * out.grad_Z
    if reg_spec.mu_sm != 0.0:
        out = r_sm(w, z, labels, reg_spec.use_mean_variant)
        value += reg_spec.mu_sm * out.value
        gw += reg_spec.mu_sm * out.grad_W
        gz += reg_spec.mu_sm * out.grad_Z
    if reg_spec.lambda_w != 0.0:
        out = r_w(w, reg_spec.lambda_w)
        value += out.value
        gw += out.grad_W
    return LossOutput(value, gw, gz)


def finite_diff_check(loss_closure, w, z, step: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradients.

    loss_closure(W, Z) must return a LossOutput. The numeric side never
    touches the analytic gradient path. Central differences in float64
    carry roundoff noise of about |f| * 1e-11, so each coordinate's error
    is taken relative to max(its own magnitude, 1e-6 of the largest
    gradient entry): coordinates six orders below the dominant scale are
    numerically irrelevant and unmeasurable by differencing.
    """
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    out = loss_closure(w, z)
    scale = max(
        float(np.max(np.abs(out.grad_W))) if out.grad_W.size else 0.0,
        float(np.max(np.abs(out.grad_Z))) if out.grad_Z.size else 0.0,
    )
    floor = max(1e-6 * scale, 1e-8)
    worst = 0.0

    def sweep(base, other, analytic, is_w):
        nonlocal worst
        flat = base.ravel()
        for i in range(flat.size):
            orig = flat[i]
            pert = base.copy().ravel()
            pert[i] = orig + step
            hi = pert.reshape(base.shape)
            pert = base.copy().ravel()
            pert[i] = orig - step
            lo = pert.reshape(base.shape)
            if is_w:
                f_hi = loss_closure(hi, other).value
                f_lo = loss_closure(lo, other).value
            else:
                f_hi = loss_closure(other, hi).value
                f_lo = loss_closure(other, lo).value
            num = (f_hi - f_lo) / (2.0 * step)
            a = analytic.ravel()[i]
            err = abs(a - num) / max(abs(a) + abs(num), floor)
            worst = max(worst, err)

    sweep(w, z, out.grad_W, True)
    if out.grad_Z.size:
        sweep(z, w, out.grad_Z, False)
    return worst
