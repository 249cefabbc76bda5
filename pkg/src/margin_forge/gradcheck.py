"""Finite-difference sweep over every loss kind, used by tests and the CLI."""

from __future__ import annotations

import numpy as np

from . import losses as L

CHECKS = (
    "softmax_ce", "softmax_ce_norm", "focal", "normface", "cosface", "arcface",
    "sphereface_fn", "gm_softmax", "lm_softmax", "lm_softmax_s64", "ldam",
    "r_sm_max", "r_sm_mean", "r_w", "composite",
)


def _spec_for(name: str, rng) -> tuple:
    s_small = float(rng.uniform(2.0, 12.0))
    if name == "softmax_ce":
        return L.LossSpec(kind="softmax_ce", s=1.0), False
    if name == "softmax_ce_norm":
        return L.LossSpec(kind="softmax_ce", s=s_small, normalize_features=True,
                          normalize_prototypes=True), False
    if name == "focal":
        return L.LossSpec(kind="focal", s=s_small, focal_gamma=float(rng.uniform(0.5, 3.0)),
                          normalize_features=True), False
    if name == "normface":
        return L.LossSpec.normface(s_small), False
    if name == "cosface":
        return L.LossSpec.cosface(s_small, float(rng.uniform(0.1, 0.4))), False
    if name == "arcface":
        return L.LossSpec.arcface(s_small, float(rng.uniform(0.1, 0.5))), False
    if name == "sphereface_fn":
        return L.LossSpec.sphereface_fn(s_small, float(rng.uniform(1.0, 2.0))), False
    if name == "gm_softmax":
        a1 = float(rng.uniform(0.5, 1.2))
        return L.LossSpec(kind="gm_softmax", s=s_small, alpha1=a1,
                          alpha2=a1 - float(rng.uniform(0.0, 0.5)),
                          beta1=float(rng.uniform(-0.4, 0.1)),
                          beta2=float(rng.uniform(-0.4, 0.1)),
                          normalize_features=True, normalize_prototypes=True), False
    if name == "lm_softmax":
        return L.LossSpec.lm(s_small), False
    if name == "lm_softmax_s64":
        return L.LossSpec.lm(64.0), False
    if name == "ldam":
        return L.LossSpec(kind="ldam", s=s_small, normalize_features=True,
                          normalize_prototypes=True), True
    return None, False


def _instance(rng, avoid_rsm_ties: bool = False):
    k = int(rng.choice((2, 3, 5)))
    d = int(rng.choice((2, 4)))
    n = int(rng.integers(4, 21))
    for _ in range(100):
        w = rng.normal(size=(k, d))
        z = rng.normal(size=(n, d))
        y = rng.integers(0, k, size=n)
        if not avoid_rsm_ties or k == 2:
            return k, w, z, y
        # subgradient checks need the competitor max to be isolated
        m = z @ w.T
        m[np.arange(n), y] = -np.inf
        top2 = np.sort(m, axis=1)[:, -2:]
        if np.all(top2[:, 1] - top2[:, 0] > 1e-3):
            return k, w, z, y
    return k, w, z, y


def run_check(name: str, instances: int = 10, seed: int = 0,
              corrupt: bool = False) -> float:
    """Worst relative finite-difference error for one check across instances."""
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng(np.random.SeedSequence((seed, hash(name) & 0xFFFF, i)))
        needs_ties = name.startswith("r_sm") or name == "composite"
        k, w, z, y = _instance(rng, avoid_rsm_ties=needs_ties)

        if name == "r_sm_max":
            closure = lambda a, b: L.r_sm(a, b, y, False)
        elif name == "r_sm_mean":
            closure = lambda a, b: L.r_sm(a, b, y, True)
        elif name == "r_w":
            lam = float(rng.uniform(0.5, 4.0))
            closure = lambda a, b, _lam=lam: L.r_w(a, _lam)
        elif name == "composite":
            spec = L.LossSpec.lm(float(rng.uniform(2.0, 12.0)))
            reg = L.RegularizerSpec(mu_sm=0.5, lambda_w=2.0)
            counts = np.bincount(y, minlength=k) + 1
            closure = lambda a, b: L.composite(a, b, y, spec, reg, counts)
        else:
            spec, needs_counts = _spec_for(name, rng)
            counts = np.bincount(y, minlength=k) + 1 if needs_counts else None
            closure = lambda a, b: L.base_loss(a, b, y, spec, counts)

        if corrupt:
            inner = closure

            def closure(a, b, _inner=inner):
                out = _inner(a, b)
                return L.LossOutput(out.value, -out.grad_W, out.grad_Z)

        worst = max(worst, L.finite_diff_check(closure, w, z))
    return worst


def sweep(instances: int = 10, seed: int = 0, corrupt: str | None = None,
          tol: float = 1e-4) -> tuple[list[dict], bool]:
    """All checks; returns (rows, ok). corrupt names a check whose gradient
    sign gets flipped, as a negative control for the harness itself."""
    rows = []
    ok = True
    for name in CHECKS:
        err = run_check(name, instances, seed, corrupt=(name == corrupt))
        passed = err <= tol
        ok = ok and passed
        rows.append({"check": name, "max_rel_err": err, "pass": passed})
    return rows, ok
