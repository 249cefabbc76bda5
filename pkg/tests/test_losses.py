import math

import numpy as np
import pytest

from margin_forge import losses as L
from margin_forge.errors import (
    InvalidCountsError,
    InvalidSpecError,
    NumericOverflowError,
)
from margin_forge.geometry import normalize_rows, simplex_etf

from conftest import random_unit_rows


def etf_instance(k, d, reps=1):
    w = simplex_etf(k, d)
    labels = np.tile(np.arange(k), reps)
    return w, w[labels], labels


def random_instance(rng, k=5, d=4, n=12, unit=False):
    w = rng.normal(size=(k, d))
    z = rng.normal(size=(n, d))
    if unit:
        w, z = normalize_rows(w), normalize_rows(z)
    labels = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
    return w, z, labels


class TestSoftmaxCe:
    def test_antipodal_closed_form(self):
        w = np.array([[1.0, 0], [-1.0, 0]])
        out = L.softmax_ce(w, w[:1], np.array([0]), L.LossSpec(kind="softmax_ce", s=1.0))
        assert out.value == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)

    def test_uniform_logits_log_k(self, rng):
        k, d = 6, 4
        w = np.tile(rng.normal(size=d), (k, 1))
        z = rng.normal(size=(3, d))
        out = L.softmax_ce(w, z, np.array([0, 3, 5]), L.LossSpec(kind="softmax_ce"))
        assert out.value == pytest.approx(math.log(k), abs=1e-12)

    def test_gradient_matches_fd(self, rng):
        w, z, labels = random_instance(rng)
        spec = L.LossSpec(kind="softmax_ce", s=3.0, normalize_features=True,
                          normalize_prototypes=True)
        err = L.finite_diff_check(lambda a, b: L.softmax_ce(a, b, labels, spec), w, z)
        assert err <= 1e-5

    def test_overflow_guarded_inputs(self):
        w = np.array([[np.inf, 0.0], [0.0, 1.0]])
        with pytest.raises(NumericOverflowError):
            L.softmax_ce(w, np.eye(2), np.array([0, 1]), L.LossSpec())

    def test_large_scale_no_overflow(self, rng):
        w, z, labels = random_instance(rng, unit=True)
        spec = L.LossSpec(kind="softmax_ce", s=64.0)
        assert math.isfinite(L.softmax_ce(w, z, labels, spec).value)


class TestFocal:
    def test_gamma_zero_equals_ce(self, rng):
        w, z, labels = random_instance(rng)
        spec_f = L.LossSpec(kind="focal", s=2.0, focal_gamma=0.0)
        spec_c = L.LossSpec(kind="softmax_ce", s=2.0)
        a = L.focal(w, z, labels, spec_f)
        b = L.softmax_ce(w, z, labels, spec_c)
        assert a.value == pytest.approx(b.value, abs=1e-12)
        np.testing.assert_allclose(a.grad_W, b.grad_W, atol=1e-12)
        np.testing.assert_allclose(a.grad_Z, b.grad_Z, atol=1e-12)

    def test_confident_prediction_zero_loss(self):
        # p_y -> 1: the focal factor kills the loss
        w = np.array([[1.0, 0], [-1.0, 0]])
        z = np.array([[600.0, 0.0]])
        out = L.focal(w, z, np.array([0]), L.LossSpec(kind="focal", focal_gamma=2.0))
        assert out.value == pytest.approx(0.0, abs=1e-12)

    def test_gradient_matches_fd(self, rng):
        w, z, labels = random_instance(rng)
        spec = L.LossSpec(kind="focal", s=4.0, focal_gamma=1.0,
                          normalize_features=True)
        err = L.finite_diff_check(lambda a, b: L.focal(a, b, labels, spec), w, z)
        assert err <= 1e-5


class TestUnifiedMargin:
    def test_normface_equals_scaled_ce(self, rng):
        w, z, labels = random_instance(rng)
        s = 13.0
        a = L.unified_margin(w, z, labels, L.LossSpec.normface(s))
        spec_ce = L.LossSpec(kind="softmax_ce", s=s, normalize_features=True,
                             normalize_prototypes=True)
        b = L.softmax_ce(w, z, labels, spec_ce)
        assert a.value == pytest.approx(b.value, abs=1e-5)
        np.testing.assert_allclose(a.grad_W, b.grad_W, atol=1e-4)

    def test_arcface_antipodal_closed_form(self):
        w = np.array([[1.0, 0], [-1.0, 0]])
        out = L.unified_margin(w, w[:1], np.array([0]), L.LossSpec.arcface(1.0, 0.5))
        expected = math.log(1 + math.exp(-(math.cos(0.5) + 1)))
        assert expected == pytest.approx(0.14235, abs=5e-5)
        assert out.value == pytest.approx(expected, abs=1e-3)

    def test_relaxation_bound_vs_gm(self, rng):
        # cos(theta + m2) - m3 <= cos(m2) cos(theta) - m3, so the unified
        # loss dominates the matched generalized-margin loss per sample.
        m2, m3, s = 0.4, 0.2, 7.0
        assert math.cos(m2) >= 0.5
        uni = L.LossSpec.arcface(s, m2).with_(m3=m3)
        gm = L.LossSpec(kind="gm_softmax", s=s, alpha1=math.cos(m2),
                        alpha2=math.cos(m2), beta1=-m3, beta2=-m3,
                        normalize_features=True, normalize_prototypes=True)
        for trial in range(200):
            r = np.random.default_rng(trial)
            w = random_unit_rows(r, 4, 3)
            z = random_unit_rows(r, 1, 3)
            y = np.array([int(r.integers(0, 4))])
            lhs = L.unified_margin(w, z, y, uni).value
            rhs = L.gm_softmax(w, z, y, gm).value
            assert lhs >= rhs - 1e-9

    def test_relaxation_equality_at_theta_zero(self):
        m2, m3, s = 0.4, 0.1, 5.0
        w = simplex_etf(3, 3)
        z, y = w[:1], np.array([0])  # theta_y = 0 up to the clamp
        lhs = L.unified_margin(w, z, y, L.LossSpec.arcface(s, m2).with_(m3=m3)).value
        rhs = L.gm_softmax(w, z, y, L.LossSpec(
            kind="gm_softmax", s=s, alpha1=math.cos(m2), alpha2=math.cos(m2),
            beta1=-m3, beta2=-m3, normalize_features=True,
            normalize_prototypes=True)).value
        assert lhs == pytest.approx(rhs, abs=1e-4)

    def test_requires_normalization(self):
        spec = L.LossSpec(kind="unified_margin", s=5.0, normalize_features=False,
                          normalize_prototypes=True)
        with pytest.raises(InvalidSpecError):
            spec.validate()

    def test_spec_ranges(self):
        with pytest.raises(InvalidSpecError):
            L.LossSpec.arcface(5.0, 2.0).validate()  # m2 > pi/2
        with pytest.raises(InvalidSpecError):
            L.LossSpec.sphereface_fn(5.0, 0.5).validate()  # m1 < 1
        with pytest.raises(InvalidSpecError):
            L.LossSpec.cosface(5.0, -0.1).validate()  # m3 < 0


class TestGmSoftmax:
    def test_reduces_to_normface(self, rng):
        w, z, labels = random_instance(rng, unit=True)
        s = 9.0
        gm = L.LossSpec(kind="gm_softmax", s=s, alpha1=1.0, alpha2=1.0,
                        beta1=0.0, beta2=0.0, normalize_features=True,
                        normalize_prototypes=True)
        a = L.gm_softmax(w, z, labels, gm)
        b = L.unified_margin(w, z, labels, L.LossSpec.normface(s))
        assert a.value == pytest.approx(b.value, abs=1e-6)

    def test_etf_attains_lower_bound(self):
        w, z, labels = etf_instance(4, 4, reps=3)
        spec = L.LossSpec(kind="gm_softmax", s=5.0, normalize_features=True,
                          normalize_prototypes=True)
        out = L.gm_softmax(w, z, labels, spec)
        expected = math.log(1 + 3 * math.exp(-20 / 3))
        assert out.value == pytest.approx(expected, abs=1e-9)
        assert out.value == pytest.approx(L.gm_lower_bound(4, spec), abs=1e-12)

    def test_gradient_matches_fd(self, rng):
        w, z, labels = random_instance(rng)
        spec = L.LossSpec(kind="gm_softmax", s=6.0, alpha1=0.9, alpha2=0.6,
                          beta1=-0.2, beta2=-0.1, normalize_features=True,
                          normalize_prototypes=True)
        err = L.finite_diff_check(lambda a, b: L.gm_softmax(a, b, labels, spec), w, z)
        assert err <= 1e-5

    def test_alpha_invariants(self):
        with pytest.raises(InvalidSpecError):
            L.LossSpec(kind="gm_softmax", alpha1=0.4, normalize_features=True,
                       normalize_prototypes=True).validate()
        with pytest.raises(InvalidSpecError):
            L.LossSpec(kind="gm_softmax", alpha1=0.6, alpha2=0.7,
                       normalize_features=True,
                       normalize_prototypes=True).validate()

    def test_mean_dominated_by_bound_on_random_unit_inputs(self, rng):
        # balanced labels, unit rows: the empirical risk can never undercut
        # the closed-form floor
        spec = L.LossSpec(kind="gm_softmax", s=4.0, alpha1=0.8, alpha2=0.5,
                          beta1=-0.1, beta2=-0.3, normalize_features=True,
                          normalize_prototypes=True)
        bound = L.gm_lower_bound(3, spec)
        for _ in range(100):
            w = random_unit_rows(rng, 3, 4)
            z = random_unit_rows(rng, 9, 4)
            labels = np.tile(np.arange(3), 3)
            assert L.gm_softmax(w, z, labels, spec).value >= bound - 1e-12


class TestGmLowerBound:
    def test_normface_k4_s5(self):
        spec = L.LossSpec(kind="gm_softmax", s=5.0, normalize_features=True,
                          normalize_prototypes=True)
        assert L.gm_lower_bound(4, spec) == pytest.approx(
            math.log(1 + 3 * math.exp(-20 / 3)), abs=1e-15)
        assert L.gm_lower_bound(4, spec) == pytest.approx(0.0038106317, abs=1e-9)

    def test_alpha2_limit_matches_lm_optimum(self):
        k, s = 4, 10.0
        spec = L.LossSpec(kind="gm_softmax", s=s, alpha1=1.0, alpha2=-1e9,
                          normalize_features=True, normalize_prototypes=True)
        limit = L.gm_lower_bound(k, spec)
        # only the (k-1)-term survives; s * (LM optimum) recovers it
        w, z, labels = etf_instance(k, k)
        lm = L.lm_softmax(w, z, labels, L.LossSpec.lm(s)).value
        assert limit == pytest.approx(s * lm, abs=1e-9)

    def test_k2_s1(self):
        spec = L.LossSpec(kind="gm_softmax", s=1.0, normalize_features=True,
                          normalize_prototypes=True)
        assert L.gm_lower_bound(2, spec) == pytest.approx(
            math.log(1 + math.exp(-2)), abs=1e-15)


class TestLmSoftmax:
    @pytest.mark.parametrize("s", [1.0, 7.0, 64.0])
    def test_antipodal_is_minus_two(self, s):
        w = np.array([[1.0, 0], [-1.0, 0]])
        out = L.lm_softmax(w, w, np.array([0, 1]), L.LossSpec.lm(s))
        assert out.value == pytest.approx(-2.0, abs=1e-12)

    def test_etf_closed_form(self):
        w, z, labels = etf_instance(4, 4)
        out = L.lm_softmax(w, z, labels, L.LossSpec.lm(10.0))
        assert out.value == pytest.approx(math.log(3) / 10 - 4 / 3, abs=1e-12)

    def test_batch_aggregate_inequality(self, rng):
        # pooled logsumexp dominates mean + (log N)/s because log is concave
        s = 8.0
        for _ in range(50):
            w = random_unit_rows(rng, 4, 5)
            z = random_unit_rows(rng, 10, 5)
            labels = np.concatenate([np.arange(4), rng.integers(0, 4, size=6)])
            diffs = z @ w.T - (z * w[labels]).sum(axis=1, keepdims=True)
            diffs[np.arange(10), labels] = -np.inf
            pooled = (1 / s) * math.log(np.exp(s * diffs).sum())
            mean = L.lm_softmax(w, z, labels, L.LossSpec.lm(s)).value
            assert pooled >= mean + math.log(10) / s - 1e-9

    def test_gradient_matches_fd(self, rng):
        w, z, labels = random_instance(rng)
        err = L.finite_diff_check(
            lambda a, b: L.lm_softmax(a, b, labels, L.LossSpec.lm(15.0)), w, z)
        assert err <= 1e-5

    def test_s64_gradient(self, rng):
        w, z, labels = random_instance(rng, k=3, d=4, n=8)
        err = L.finite_diff_check(
            lambda a, b: L.lm_softmax(a, b, labels, L.LossSpec.lm(64.0)), w, z)
        assert err <= 1e-4


class TestLdam:
    def spec(self, c=None):
        return L.LossSpec(kind="ldam", s=5.0, ldam_C=c, normalize_features=True,
                          normalize_prototypes=True)

    def test_equal_counts_reduces_to_gm(self, rng):
        w, z, labels = random_instance(rng, k=4, d=3, n=8)
        counts = np.full(4, 16)
        a = L.ldam(w, z, labels, counts, self.spec(c=0.5))
        beta = -0.5 * 16 ** -0.25
        gm = L.LossSpec(kind="gm_softmax", s=5.0, alpha1=1.0, alpha2=1.0,
                        beta1=beta, beta2=beta, normalize_features=True,
                        normalize_prototypes=True)
        b = L.gm_softmax(w, z, labels, gm)
        assert a.value == pytest.approx(b.value, abs=1e-12)
        np.testing.assert_allclose(a.grad_W, b.grad_W, atol=1e-12)

    def test_margin_scales_with_counts(self, rng):
        # counts (16, 1): 16^(-1/4) = 1/2, so the rare class margin doubles;
        # check by matching single-sample losses against explicit gm specs
        w = random_unit_rows(rng, 2, 3)
        z = random_unit_rows(rng, 2, 3)
        counts = np.array([16, 1])
        out = L.ldam(w, z, np.array([0, 1]), counts, self.spec(c=0.5))
        parts = []
        for i, beta in enumerate([-0.25, -0.5]):
            gm = L.LossSpec(kind="gm_softmax", s=5.0, beta1=beta, beta2=beta,
                            normalize_features=True, normalize_prototypes=True)
            parts.append(L.gm_softmax(w, z[i:i + 1], np.array([i]), gm).value)
        assert out.value == pytest.approx(np.mean(parts), abs=1e-12)

    def test_auto_c_puts_largest_margin_at_half(self, rng):
        w, z, labels = random_instance(rng, k=3, d=3, n=6)
        counts = np.array([81, 16, 1])
        explicit = L.ldam(w, z, labels, counts, self.spec(c=0.5 * 1 ** 0.25))
        auto = L.ldam(w, z, labels, counts, self.spec(c=None))
        assert auto.value == pytest.approx(explicit.value, abs=1e-12)

    def test_zero_counts_rejected(self, rng):
        w, z, labels = random_instance(rng, k=3, d=3, n=6)
        with pytest.raises(InvalidCountsError):
            L.ldam(w, z, labels, np.array([5, 0, 2]), self.spec())

    def test_gradient_matches_fd(self, rng):
        w, z, labels = random_instance(rng, k=4, d=3, n=10)
        counts = np.array([100, 30, 9, 2])
        err = L.finite_diff_check(
            lambda a, b: L.ldam(a, b, labels, counts, self.spec()), w, z)
        assert err <= 1e-5


class TestRsm:
    def test_etf_optimum_value(self):
        for k in (2, 3, 5):
            w, z, labels = etf_instance(k, k, reps=2)
            for mean_variant in (False, True):
                out = L.r_sm(w, z, labels, mean_variant)
                assert out.value == pytest.approx(-k / (k - 1), abs=1e-12)

    def test_max_variant_dominates_mean_variant(self, rng):
        for _ in range(100):
            w = rng.normal(size=(4, 3))
            z = rng.normal(size=(8, 3))
            labels = np.concatenate([np.arange(4), rng.integers(0, 4, size=4)])
            vmax = L.r_sm(w, z, labels, False).value
            vmean = L.r_sm(w, z, labels, True).value
            assert vmax >= vmean - 1e-12

    def test_balanced_unit_floor(self, rng):
        # mean over a balanced dataset of unit rows can never undercut
        # -k/(k-1), with equality exactly at the centered simplex
        for _ in range(100):
            k = int(rng.integers(2, 6))
            w = random_unit_rows(rng, k, 6)
            z = random_unit_rows(rng, 3 * k, 6)
            labels = np.tile(np.arange(k), 3)
            assert L.r_sm(w, z, labels, False).value >= -k / (k - 1) - 1e-12

    def test_subgradient_matches_fd_away_from_ties(self, rng):
        for variant in (False, True):
            while True:
                w = rng.normal(size=(4, 3))
                z = rng.normal(size=(8, 3))
                labels = np.concatenate([np.arange(4), rng.integers(0, 4, size=4)])
                m = z @ w.T
                m[np.arange(8), labels] = -np.inf
                top2 = np.sort(m, axis=1)[:, -2:]
                if np.all(top2[:, 1] - top2[:, 0] > 1e-3):
                    break
            err = L.finite_diff_check(lambda a, b: L.r_sm(a, b, labels, variant), w, z)
            assert err <= 1e-5


class TestRw:
    def test_etf_is_zero(self):
        out = L.r_w(simplex_etf(5, 6), 3.0)
        assert out.value == pytest.approx(0.0, abs=1e-18)

    def test_identical_unit_rows(self):
        w = np.tile(np.array([0.6, 0.8]), (4, 1))
        assert L.r_w(w, 1.0).value == pytest.approx(1.0, abs=1e-12)

    def test_gradient_quadratic_exact(self, rng):
        w = rng.normal(size=(5, 4))
        err = L.finite_diff_check(lambda a, b: L.r_w(a, 2.5), w, rng.normal(size=(3, 4)))
        assert err <= 1e-8


class TestComposite:
    def test_zero_weights_equal_base(self, rng):
        w, z, labels = random_instance(rng, unit=True)
        spec = L.LossSpec.lm(8.0)
        a = L.composite(w, z, labels, spec, L.RegularizerSpec())
        b = L.lm_softmax(w, z, labels, spec)
        assert a.value == b.value
        np.testing.assert_array_equal(a.grad_W, b.grad_W)

    def test_base_zero_weight_equals_rsm(self, rng):
        w, z, labels = random_instance(rng)
        a = L.composite(w, z, labels, L.LossSpec(), L.RegularizerSpec(mu_sm=1.0),
                        base_weight=0.0)
        b = L.r_sm(w, z, labels, False)
        assert a.value == b.value
        np.testing.assert_array_equal(a.grad_Z, b.grad_Z)

    def test_gradients_are_weighted_sums(self, rng):
        w, z, labels = random_instance(rng, unit=True)
        spec = L.LossSpec.cosface(10.0, 0.2)
        reg = L.RegularizerSpec(mu_sm=0.7, lambda_w=3.0)
        comp = L.composite(w, z, labels, spec, reg)
        base = L.unified_margin(w, z, labels, spec)
        rsm = L.r_sm(w, z, labels, False)
        rw = L.r_w(w, 3.0)
        np.testing.assert_allclose(
            comp.grad_W, base.grad_W + 0.7 * rsm.grad_W + rw.grad_W, atol=1e-15)
        np.testing.assert_allclose(
            comp.grad_Z, base.grad_Z + 0.7 * rsm.grad_Z, atol=1e-15)
        assert comp.value == pytest.approx(base.value + 0.7 * rsm.value + rw.value,
                                           abs=1e-12)

    def test_composite_fd(self, rng):
        w, z, labels = random_instance(rng, k=3, d=3, n=7)
        counts = np.bincount(labels, minlength=3)
        spec = L.LossSpec(kind="ldam", s=5.0, normalize_features=True,
                          normalize_prototypes=True)
        reg = L.RegularizerSpec(mu_sm=0.4, lambda_w=1.5)
        err = L.finite_diff_check(
            lambda a, b: L.composite(a, b, labels, spec, reg, counts), w, z)
        assert err <= 1e-5


class TestGradientSuiteProperty:
    @pytest.mark.parametrize("k", [2, 3, 5])
    @pytest.mark.parametrize("d", [2, 4])
    def test_every_kind_under_1e4(self, k, d):
        rng = np.random.default_rng((k, d))
        n = int(rng.integers(max(k, 4), 21))
        w = rng.normal(size=(k, d))
        z = rng.normal(size=(n, d))
        labels = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
        counts = np.bincount(labels, minlength=k)
        specs = [
            L.LossSpec(kind="softmax_ce", s=2.0),
            L.LossSpec(kind="focal", s=3.0, focal_gamma=2.0),
            L.LossSpec.normface(10.0),
            L.LossSpec.cosface(10.0, 0.3),
            L.LossSpec.arcface(10.0, 0.4),
            L.LossSpec(kind="gm_softmax", s=5.0, alpha1=0.7, alpha2=0.5,
                       beta1=-0.1, beta2=-0.2, normalize_features=True,
                       normalize_prototypes=True),
            L.LossSpec.lm(12.0),
            L.LossSpec(kind="ldam", s=5.0, normalize_features=True,
                       normalize_prototypes=True),
        ]
        for spec in specs:
            cc = counts if spec.kind == "ldam" else None
            err = L.finite_diff_check(
                lambda a, b: L.base_loss(a, b, labels, spec, cc), w, z)
            assert err <= 1e-4, f"{spec.kind} k={k} d={d}: {err}"
