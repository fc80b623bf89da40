"""Variance-exploding diffusion: geometric noise schedule, forward diffusion,
denoising-score-matching training, analytic score oracles, and the
predictor-corrector reverse sampler with per-step data consistency.

Sign convention: the sampler expects s(z, sigma) to approximate the score of
the sigma-smoothed data distribution, i.e. -(z(t)-z)/sigma^2 in expectation.
The training objective as commonly printed with a minus sign between the two
terms would fit the negative of that; the trainer's sign_convention flag
selects the target sign ("standard" fits the score, "as_printed" fits its
negation) so the divergence of the latter under reverse sampling can be
demonstrated against the analytic oracle.

Complex-noise convention: a draw of "std" s has E|entry|^2 = s^2. Together
with scores expressed per complex entry ((mu - z)/(v + sigma^2) for a Gaussian
with per-entry variance v), the discrete reverse updates reproduce exactly the
real-coordinate reverse SDE, so no factor-2 bookkeeping appears anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from . import networks as nn
from .forward_model import ForwardOperator, KSpaceMeasurements, adjoint, dc_project_t
from .numerics import ComplexImage, RngStream


class TrainingDivergence(RuntimeError):
    """Raised when a training loss becomes non-finite."""


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_l: float
    sigma_u: float
    n_r: int
    sigmas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not (0 < self.sigma_l < 1):
            raise ValueError("sigma_l must lie in (0, 1)")
        if self.sigma_u <= 1:
            raise ValueError("sigma_u must exceed 1")
        if self.n_r < 2:
            raise ValueError("n_r must be at least 2")
        i = np.arange(self.n_r)
        sig = self.sigma_l * (self.sigma_u / self.sigma_l) ** (i / (self.n_r - 1))
        object.__setattr__(self, "sigmas", sig)

    def sigma(self, i: int) -> float:
        return float(self.sigmas[i])


def make_schedule(sigma_l: float = 0.01, sigma_u: float = 378.0, n_r: int = 500) -> NoiseSchedule:
    """Geometric sigma grid: sigma(i) = sigma_l (sigma_u/sigma_l)^(i/(n_r-1))."""
    return NoiseSchedule(sigma_l, sigma_u, n_r)


@dataclass
class ScoreModel:
    """A score function s(z, sigma): learned net or analytic oracle.

    flavor "analytic-gaussian" carries (mean, var): prior N(mean, var I) with
    per-complex-entry variance var. flavor "analytic-mixture" carries lists of
    (weight, mean, var) components. Analytic flavors need no NetworkParams.
    """

    schedule: NoiseSchedule
    flavor: str = "learned"
    params: nn.NetworkParams | None = None
    mean: np.ndarray | float = 0.0
    var: float = 1.0
    mix_weights: tuple = ()
    mix_means: tuple = ()
    mix_vars: tuple = ()
    sign_convention: str = "standard"

    def __post_init__(self) -> None:
        if self.flavor not in ("learned", "analytic-gaussian", "analytic-mixture"):
            raise ValueError(f"unknown flavor {self.flavor}")
        if self.flavor == "learned" and self.params is None:
            raise ValueError("learned score model requires params")
        if self.sign_convention not in ("standard", "as_printed"):
            raise ValueError("sign_convention must be standard or as_printed")


def _gaussian_score_arr(mean, var: float, z, sigma: float):
    total = var + float(sigma) ** 2
    return eg.scale(eg.sub(mean, z), 1.0 / total)


def _mixture_score_arr(model: ScoreModel, z: np.ndarray, sigma: float) -> np.ndarray:
    if isinstance(z, eg.Node):
        raise TypeError("analytic-mixture score does not support taped inputs")
    logs = []
    comps = []
    n = z.shape[-2] * z.shape[-1]
    axes = (-2, -1)
    for w, mu, v in zip(model.mix_weights, model.mix_means, model.mix_vars):
        total = v + sigma**2
        d2 = np.sum(np.abs(z - mu) ** 2, axis=axes, keepdims=True)
        logs.append(np.log(w) - d2 / total - n * np.log(total))
        comps.append((mu, total))
    logr = np.concatenate([lg[..., None] for lg in logs], axis=-1)
    logr = logr - logr.max(axis=-1, keepdims=True)
    r = np.exp(logr)
    r = r / r.sum(axis=-1, keepdims=True)
    out = np.zeros_like(z)
    for k, (mu, total) in enumerate(comps):
        out = out + r[..., k] * (mu - z) / total
    return out


def score_apply(model: ScoreModel, z, sigma, tape: eg.Tape | None = None):
    """Evaluate the score on (B, h, w) or (h, w) arrays/Nodes at level sigma."""
    if model.flavor == "learned":
        out = nn.score_net_apply(model.params, z, sigma, tape)
        return out
    if model.flavor == "analytic-gaussian":
        out = _gaussian_score_arr(model.mean, model.var, z, float(sigma))
    else:
        out = _mixture_score_arr(model, z, float(sigma))
    if model.sign_convention == "as_printed":
        out = eg.neg(out)
    return out


def analytic_score(model: ScoreModel, z: ComplexImage, sigma: float) -> ComplexImage:
    """Exact score of the analytic prior convolved with N(0, sigma^2 I)."""
    if model.flavor == "learned":
        raise ValueError("analytic_score requires an analytic-flavor model")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return ComplexImage(np.asarray(score_apply(model, z.data, sigma)))


def forward_diffuse_arr(z, i: int, j: int, sched: NoiseSchedule, stream: RngStream | None,
                        noise: np.ndarray | None = None):
    """Single-shot forward diffusion from step i to step j on arrays/Nodes."""
    if not (0 <= i <= j < sched.n_r):
        raise ValueError(f"invalid step range {i} -> {j}")
    if i == j:
        return z
    std = float(np.sqrt(sched.sigma(j) ** 2 - sched.sigma(i) ** 2))
    if noise is None:
        noise = stream.complex_normal(eg._val(z).shape, 1.0)
    return eg.add(z, eg.scale(noise, std))


def forward_diffuse(z: ComplexImage, i: int, j: int, sched: NoiseSchedule,
                    stream: RngStream) -> ComplexImage:
    """Add Gaussian noise of total std sqrt(sigma^2(j) - sigma^2(i))."""
    out = forward_diffuse_arr(z.data, i, j, sched, stream)
    return z if out is z.data else ComplexImage(out)


def corrector_eps(snr: float, sigma: float) -> float:
    """Langevin corrector step size: 2 (snr * sigma)^2, positive and growing
    with the noise level."""
    return 2.0 * (snr * sigma) ** 2


@dataclass
class ScoreTrainResult:
    model: ScoreModel
    losses: list


def train_score(
    images,
    sched: NoiseSchedule,
    arch: nn.ConvNetArch | None = None,
    epochs: int = 40,
    lr: float = 1e-3,
    batch_size: int = 32,
    stream: RngStream | None = None,
    sign_convention: str = "standard",
) -> ScoreTrainResult:
    """Denoising score matching over t ~ uniform{1..N_r-1}, z(t) ~ N(z, sigma^2(t) I).

    images: list of ComplexImage or an (N, h, w) complex array.
    """
    if isinstance(images, (list, tuple)):
        if len(images) == 0:
            raise ValueError("empty training set")
        data = np.stack([im.data for im in images])
    else:
        data = np.asarray(images)
    if sign_convention not in ("standard", "as_printed"):
        raise ValueError("bad sign_convention")
    arch = arch or nn.default_score_arch()
    params = nn.init_params(arch, stream.substream(101), zero_last=True)
    opt = nn.init_optimizer(params, lr)
    n = data.shape[0]
    losses = []
    target_sign = 1.0 if sign_convention == "standard" else -1.0
    for epoch in range(epochs):
        perm = stream.substream(102, epoch).permutation(n)
        noise_stream = stream.substream(103, epoch)
        for lo in range(0, n, batch_size):
            idx = perm[lo : lo + batch_size]
            zb = data[idx]
            b = zb.shape[0]
            t_idx = noise_stream.integers(1, sched.n_r, (b,))
            sig = sched.sigmas[t_idx]
            eta = noise_stream.complex_normal(zb.shape, 1.0)
            zt = zb + sig.reshape(b, 1, 1) * eta
            tape = eg.Tape()
            s = score_apply(ScoreModel(sched, "learned", params), tape.leaf(zt), sig, tape)
            resid = eg.add(eg.scale(s, sig.reshape(b, 1, 1)), eg.scale(eta, target_sign))
            loss = eg.scale(eg.sum_abs2(resid), 1.0 / eta.size)
            lv = float(eg._val(loss))
            if not np.isfinite(lv):
                raise TrainingDivergence(
                    f"score training diverged at epoch {epoch} (loss={lv})"
                )
            losses.append(lv)
            eg.backward(tape, loss, 1.0)
            grads = {k: node.grad if node.grad is not None else np.zeros_like(node.value)
                     for k, node in tape.param_nodes.items()}
            params, opt = nn.adam_step(params, grads, opt)
    model = ScoreModel(sched, "learned", params, sign_convention=sign_convention)
    return ScoreTrainResult(model, losses)


@dataclass
class FrozenSamplerNoise:
    """Pre-drawn sampler noises so an attack can differentiate a fixed chain."""

    predictor: np.ndarray  # (steps, *zshape)
    corrector: np.ndarray  # (steps, m_r, *zshape)

    @staticmethod
    def draw(steps: int, m_r: int, zshape, stream: RngStream) -> "FrozenSamplerNoise":
        pred = stream.complex_normal((steps,) + tuple(zshape), 1.0)
        corr = stream.complex_normal((steps, max(m_r, 1)) + tuple(zshape), 1.0)
        return FrozenSamplerNoise(pred, corr)


def pc_sample_core(
    score: ScoreModel,
    z_init,
    start_step: int,
    end_step: int,
    ys=None,
    op: ForwardOperator | None = None,
    m_r: int = 1,
    snr: float = 0.16,
    stream: RngStream | None = None,
    frozen: FrozenSamplerNoise | None = None,
    tape: eg.Tape | None = None,
):
    """Predictor + m_r correctors + data consistency per step, from start_step
    down to end_step, on (B, h, w) or (h, w) arrays/Nodes. ys=None disables DC.
    """
    sched = score.schedule
    if not (0 <= end_step <= start_step <= sched.n_r - 1):
        raise ValueError(f"invalid step range {start_step} -> {end_step}")
    z = z_init
    if start_step == end_step:
        return z
    if frozen is None and stream is None:
        raise ValueError("need a stream or frozen noise")
    sig2 = sched.sigmas**2
    use_dc = ys is not None
    if use_dc and op is None:
        raise ValueError("data consistency requires the operator")
    for n, i in enumerate(range(start_step - 1, end_step - 1, -1)):
        delta = float(sig2[i + 1] - sig2[i])
        s = score_apply(score, z, sched.sigma(i + 1), tape)
        eta = frozen.predictor[n] if frozen is not None else stream.complex_normal(
            eg._val(z).shape, 1.0
        )
        z = eg.add(eg.add(z, eg.scale(s, delta)), eg.scale(eta, np.sqrt(delta)))
        if use_dc:
            z = dc_project_t(op, ys, z)
        eps_i = corrector_eps(snr, sched.sigma(i))
        for m in range(m_r):
            s = score_apply(score, z, sched.sigma(i), tape)
            eta = frozen.corrector[n, m] if frozen is not None else stream.complex_normal(
                eg._val(z).shape, 1.0
            )
            z = eg.add(eg.add(z, eg.scale(s, eps_i)), eg.scale(eta, np.sqrt(2.0 * eps_i)))
            if use_dc:
                z = dc_project_t(op, ys, z)
        zv = eg._val(z)
        if not (np.all(np.isfinite(zv.real)) and np.all(np.isfinite(zv.imag))):
            raise TrainingDivergence(f"sampler produced non-finite values at step {i}")
    return z


def pc_sample_dc(
    score: ScoreModel,
    y: KSpaceMeasurements | None,
    op: ForwardOperator | None,
    start_step: int,
    end_step: int,
    m_r: int = 1,
    snr: float = 0.16,
    stream: RngStream | None = None,
    z_init: ComplexImage | None = None,
) -> ComplexImage:
    """Reverse PC sampling with data consistency on a single image.

    z_init is required in purification mode (start_step < N_r - 1); for full
    sampling it defaults to z ~ N(0, sigma^2(N_r - 1) I).
    """
    sched = score.schedule
    if z_init is None:
        if start_step != sched.n_r - 1:
            raise ValueError("z_init is required when start_step < N_r - 1")
        if op is None:
            raise ValueError("need the operator dims to initialize")
        z0 = stream.complex_normal((op.height, op.width), sched.sigma(sched.n_r - 1))
    else:
        z0 = z_init.data
    ys = y.data if y is not None else None
    out = pc_sample_core(
        score, z0, start_step, end_step, ys=ys, op=op, m_r=m_r, snr=snr, stream=stream
    )
    return ComplexImage(np.asarray(eg._val(out)))
