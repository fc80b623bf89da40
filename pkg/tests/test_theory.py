import numpy as np
import pytest

from diffpure_mri import theory as th
from diffpure_mri.numerics import ComplexImage, RngStream
from diffpure_mri.theory_report import gaussian_kl_oracle, random_mixture

SL, SU = 0.01, 378.0


def delta_image(seed=1, scale=0.3):
    return ComplexImage(RngStream(seed).complex_normal((16, 16), scale))


class TestConditionalKl:
    def test_zero_delta(self):
        z = ComplexImage.zeros(8, 8)
        for t in (0.1, 0.5, 1.0):
            assert th.kl_conditional(z, SL, SU, t) == 0.0
            assert th.kl_conditional_derivative(z, SL, SU, t) == 0.0

    def test_matches_gaussian_kl_oracle(self):
        d = delta_image()
        mu1 = np.concatenate([d.data.real.ravel(), d.data.imag.ravel()])
        mu2 = np.zeros_like(mu1)
        for t in np.arange(0.1, 1.05, 0.1):
            var = (SL * (SU / SL) ** t) ** 2 - SL**2
            oracle = gaussian_kl_oracle(mu1, mu2, var)
            assert abs(th.kl_conditional(d, SL, SU, t) - oracle) <= 1e-12

    def test_strictly_decreasing(self):
        d = delta_image(seed=2)
        trace = th.kl_conditional_trace(d, SL, SU, np.arange(0.1, 1.05, 0.1))
        vals = trace.values()
        assert np.all(np.diff(vals) < 0)

    def test_derivative_matches_finite_differences(self):
        d = delta_image(seed=3)
        h = 1e-6
        for t in (0.1, 0.5, 0.9):
            fd = (th.kl_conditional(d, SL, SU, t + h)
                  - th.kl_conditional(d, SL, SU, t - h)) / (2 * h)
            an = th.kl_conditional_derivative(d, SL, SU, t)
            assert abs(fd - an) / abs(fd) <= 1e-5

    def test_derivative_strictly_negative(self):
        for seed in range(5):
            d = delta_image(seed=10 + seed, scale=0.5)
            for t in np.arange(0.1, 1.05, 0.1):
                assert th.kl_conditional_derivative(d, SL, SU, float(t)) < 0

    def test_t_zero_rejected(self):
        d = delta_image(seed=4)
        with pytest.raises(ValueError):
            th.kl_conditional(d, SL, SU, 0.0)
        with pytest.raises(ValueError):
            th.kl_conditional_derivative(d, SL, SU, -0.1)

    def test_nonnegative_and_zero_iff_zero_delta(self):
        d = delta_image(seed=5)
        assert th.kl_conditional(d, SL, SU, 0.5) > 0

    def test_trace_requires_increasing_times(self):
        with pytest.raises(ValueError):
            th.KlTrace([(0.5, 1.0), (0.3, 0.5)])


def gm(w, m, s):
    return th.GaussianMixture1D(np.array(w), np.array(m), np.array(s))


class TestMixtureKl:
    def test_identical_mixtures_zero(self):
        p = gm([0.4, 0.6], [-1.0, 1.5], [0.5, 0.8])
        val = th.mixture_marginal_kl(p, p, 0.3, SL, SU)
        assert abs(val) <= 1e-10

    def test_two_gaussians_closed_form(self):
        m = 1.3
        p = gm([1.0], [0.0], [1.0])
        q = gm([1.0], [m], [1.0])
        for t in (0.1, 0.4, 0.8):
            extra = (SL * (SU / SL) ** t) ** 2 - SL**2
            expect = m**2 / (2 * (1.0 + extra))
            got = th.mixture_marginal_kl(p, q, t, SL, SU)
            assert abs(got - expect) / expect <= 1e-6

    def test_swapped_weights_monotone_nonincreasing(self):
        p = gm([0.25, 0.75], [-1.0, 2.0], [0.6, 0.9])
        q = gm([0.75, 0.25], [-1.0, 2.0], [0.6, 0.9])
        grid = th.QuadratureGrid(rtol=1e-11)
        ts = np.round(np.arange(0.05, 1.025, 0.05), 10)
        vals = [th.mixture_marginal_kl(p, q, float(t), SL, SU, grid) for t in ts]
        assert max(np.diff(vals)) <= 1e-9

    def test_random_pairs_monotone(self):
        stream = RngStream(6)
        grid = th.QuadratureGrid(rtol=1e-11)
        ts = np.round(np.arange(0.05, 1.025, 0.1), 10)
        for pair in range(3):
            s = stream.substream(pair)
            p = random_mixture(s.substream(0), 2)
            q = random_mixture(s.substream(1), 3)
            vals = [th.mixture_marginal_kl(p, q, float(t), SL, SU, grid) for t in ts]
            assert max(np.diff(vals)) <= 1e-9

    def test_grid_too_narrow_rejected(self):
        with pytest.raises(ValueError):
            th.QuadratureGrid(span_stds=4.0)

    def test_t_validation(self):
        p = gm([1.0], [0.0], [1.0])
        with pytest.raises(ValueError):
            th.mixture_marginal_kl(p, p, 0.0, SL, SU)


class TestFisher:
    def test_identical_mixtures_zero(self):
        p = gm([0.3, 0.7], [0.0, 1.0], [0.5, 0.7])
        assert abs(th.fisher_divergence(p, p, 0.4, SL, SU)) <= 1e-12

    def test_nonnegative(self):
        stream = RngStream(7)
        for k in range(3):
            p = random_mixture(stream.substream(k, 0), 2)
            q = random_mixture(stream.substream(k, 1), 2)
            assert th.fisher_divergence(p, q, 0.5, SL, SU) >= 0

    def test_shifted_gaussian_closed_form(self):
        # scores differ by the constant m/v, so D_F = m^2 / v^2 with
        # v = s^2 + sigma^2(t) - sigma^2(0); cross-checked against the KL decay
        # relation in test_decay_relation below
        m, s = 0.8, 1.0
        p = gm([1.0], [0.0], [s])
        q = gm([1.0], [m], [s])
        t = 0.5
        v = s**2 + (SL * (SU / SL) ** t) ** 2 - SL**2
        expect = m**2 / v**2
        got = th.fisher_divergence(p, q, t, SL, SU)
        assert abs(got - expect) / expect <= 1e-8

    def test_decay_relation(self):
        stream = RngStream(8)
        p = random_mixture(stream.substream(0), 2)
        q = random_mixture(stream.substream(1), 3)
        grid = th.QuadratureGrid(rtol=1e-11)
        for t in (0.3, 0.6):
            h = 1e-3
            fd = (th.mixture_marginal_kl(p, q, t + h, SL, SU, grid)
                  - th.mixture_marginal_kl(p, q, t - h, SL, SU, grid)) / (2 * h)
            pred = -0.5 * th.dsigma2_dt(SL, SU, t) * th.fisher_divergence(p, q, t, SL, SU, grid)
            assert abs(fd - pred) / abs(fd) <= 1e-3


class TestMixtureValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            gm([0.5, 0.6], [0.0, 1.0], [1.0, 1.0])

    def test_stds_positive(self):
        with pytest.raises(ValueError):
            gm([1.0], [0.0], [0.0])
