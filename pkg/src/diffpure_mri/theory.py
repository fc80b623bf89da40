"""Numerical verification of the diffusion-contraction results on tractable
distributions: the closed-form conditional KL between forward processes
started at clean vs perturbed images, its time derivative, and the marginal
KL / Fisher-divergence relation on 1-D Gaussian mixtures via quadrature.

The time derivative implemented here is the calculus of the closed form,
d/dt [ c / (2 (sigma^2(t) - sigma_l^2)) ]  with  sigma(t) = sigma_l r^t:
    -c sigma_l^2 ln(r) r^{2t} / (sigma^2(t) - sigma_l^2)^2 ,
which carries sigma_l squared (d sigma^2/dt = 2 ln(r) sigma^2(t)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ComplexImage


@dataclass(frozen=True)
class GaussianMixture1D:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        s = np.asarray(self.stds, dtype=np.float64)
        if not (w.shape == m.shape == s.shape and w.ndim == 1 and w.size >= 1):
            raise ValueError("weights, means, stds must be equal-length 1-D")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(s <= 0):
            raise ValueError("stds must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)

    def diffused_vars(self, extra_var: float) -> np.ndarray:
        return self.stds**2 + extra_var

    def pdf(self, x: np.ndarray, extra_var: float = 0.0) -> np.ndarray:
        v = self.diffused_vars(extra_var)
        comps = np.exp(-0.5 * (x[:, None] - self.means) ** 2 / v) / np.sqrt(2 * np.pi * v)
        return comps @ self.weights

    def dlogpdf(self, x: np.ndarray, extra_var: float = 0.0) -> np.ndarray:
        v = self.diffused_vars(extra_var)
        comps = np.exp(-0.5 * (x[:, None] - self.means) ** 2 / v) / np.sqrt(2 * np.pi * v)
        p = comps @ self.weights
        dp = (comps * (-(x[:, None] - self.means) / v)) @ self.weights
        return dp / np.maximum(p, 1e-300)


@dataclass
class KlTrace:
    points: list  # (t, value), t strictly increasing

    def __post_init__(self) -> None:
        ts = [t for t, _ in self.points]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("trace times must be strictly increasing")

    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.points])


def _sigma2(sigma_l: float, sigma_u: float, t: float) -> float:
    return (sigma_l * (sigma_u / sigma_l) ** t) ** 2


def _check_t(t: float) -> None:
    if not (0 < t <= 1):
        raise ValueError("t must lie in (0, 1]")


def kl_conditional(delta_img: ComplexImage, sigma_l: float, sigma_u: float, t: float) -> float:
    """Closed-form conditional KL between the forward processes started at the
    clean and perturbed images: ||delta||^2 / (2 (sigma^2(t) - sigma^2(0))),
    with the norm over the image's 2n real coordinates."""
    _check_t(t)
    c = delta_img.norm() ** 2
    return c / (2.0 * (_sigma2(sigma_l, sigma_u, t) - sigma_l**2))


def kl_conditional_derivative(delta_img: ComplexImage, sigma_l: float, sigma_u: float,
                              t: float) -> float:
    """d/dt of kl_conditional; strictly negative whenever delta != 0."""
    _check_t(t)
    c = delta_img.norm() ** 2
    r = sigma_u / sigma_l
    denom = (_sigma2(sigma_l, sigma_u, t) - sigma_l**2) ** 2
    return -c * sigma_l**2 * np.log(r) * r ** (2 * t) / denom


def kl_conditional_trace(delta_img: ComplexImage, sigma_l: float, sigma_u: float,
                         ts) -> KlTrace:
    return KlTrace([(float(t), kl_conditional(delta_img, sigma_l, sigma_u, float(t)))
                    for t in ts])


@dataclass(frozen=True)
class QuadratureGrid:
    """Adaptive trapezoid spec: symmetric span in diffused stds, doubling the
    point count until the integral's relative change drops below rtol."""

    span_stds: float = 8.0
    initial_points: int = 513
    rtol: float = 1e-8
    max_doublings: int = 14

    def __post_init__(self) -> None:
        if self.span_stds < 8.0:
            raise ValueError("grid must cover at least 8 stds")


def _grid_bounds(p: GaussianMixture1D, q: GaussianMixture1D, extra_var: float,
                 span: float) -> tuple[float, float]:
    lo, hi = np.inf, -np.inf
    for mix in (p, q):
        stds = np.sqrt(mix.diffused_vars(extra_var))
        lo = min(lo, float(np.min(mix.means - span * stds)))
        hi = max(hi, float(np.max(mix.means + span * stds)))
    return lo, hi


def _adaptive_trapz(f, lo: float, hi: float, grid: QuadratureGrid) -> float:
    n = grid.initial_points
    prev = None
    for _ in range(grid.max_doublings + 1):
        x = np.linspace(lo, hi, n)
        val = float(np.trapezoid(f(x), x))
        if prev is not None and abs(val - prev) <= grid.rtol * max(abs(val), 1e-30):
            return val
        prev = val
        n = 2 * n - 1
    return prev


def _check_mass(p: GaussianMixture1D, extra_var: float, lo: float, hi: float,
                grid: QuadratureGrid) -> None:
    mass = _adaptive_trapz(lambda x: p.pdf(x, extra_var), lo, hi, grid)
    if mass < 1.0 - 1e-8:
        raise ValueError(f"quadrature grid too narrow: captured mass {mass:.12f}")


def mixture_marginal_kl(p: GaussianMixture1D, q: GaussianMixture1D, t: float,
                        sigma_l: float, sigma_u: float,
                        grid: QuadratureGrid = QuadratureGrid()) -> float:
    """KL(p_t || q_t) where both mixtures gain variance sigma^2(t) - sigma^2(0)
    per component, computed by adaptive trapezoidal quadrature."""
    _check_t(t)
    extra = _sigma2(sigma_l, sigma_u, t) - sigma_l**2
    lo, hi = _grid_bounds(p, q, extra, grid.span_stds)
    _check_mass(p, extra, lo, hi, grid)

    def integrand(x):
        pv = p.pdf(x, extra)
        qv = np.maximum(q.pdf(x, extra), 1e-300)
        out = np.zeros_like(pv)
        good = pv > 1e-300
        out[good] = pv[good] * (np.log(pv[good]) - np.log(qv[good]))
        return out

    return _adaptive_trapz(integrand, lo, hi, grid)


def fisher_divergence(p: GaussianMixture1D, q: GaussianMixture1D, t: float,
                      sigma_l: float, sigma_u: float,
                      grid: QuadratureGrid = QuadratureGrid()) -> float:
    """Integral of p_t (dlog p_t - dlog q_t)^2; always nonnegative."""
    _check_t(t)
    extra = _sigma2(sigma_l, sigma_u, t) - sigma_l**2
    lo, hi = _grid_bounds(p, q, extra, grid.span_stds)
    _check_mass(p, extra, lo, hi, grid)

    def integrand(x):
        return p.pdf(x, extra) * (p.dlogpdf(x, extra) - q.dlogpdf(x, extra)) ** 2

    return _adaptive_trapz(integrand, lo, hi, grid)


def dsigma2_dt(sigma_l: float, sigma_u: float, t: float) -> float:
    return 2.0 * np.log(sigma_u / sigma_l) * _sigma2(sigma_l, sigma_u, t)
