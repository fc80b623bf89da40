"""Instability sources for the reconstruction pipeline: random measurement
noise, l-infinity worst-case k-space perturbations (plain, momentum, and
end-to-end through the purifier with frozen noise), and train/test operator
mismatches.

The perturbation delta lives in k-space (added to the measurements); its
budget is componentwise on real and imaginary parts separately, which makes
sign-gradient ascent well-defined. Step size defaults to 2.5 eps / K.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eg
from .diffusion import ScoreModel
from .forward_model import (
    ForwardOperator,
    KSpaceMeasurements,
    adjoint_t,
    perturb_operator,  # noqa: F401  (re-exported operator-mismatch surface)
)
from .modl import ModlConfig, reconstruct_core, unroll_core
from .numerics import ComplexImage, RngStream
from .purification import FrozenPurifyNoise, PurifyConfig, purify_core


class AttackError(RuntimeError):
    """Raised on non-finite attack gradients or when the tape guard trips."""


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 30
    step_size: float | None = None
    momentum_decay: float = 0.75
    step_halving: bool = True
    target: str = "modl-only"
    reference: str = "model"  # or "ground_truth"
    zero_init: bool = False
    max_tape_bytes: float = 1.5e9

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not (0 <= self.momentum_decay < 1):
            raise ValueError("momentum decay must lie in [0, 1)")
        if self.target not in ("modl-only", "end-to-end"):
            raise ValueError("target must be modl-only or end-to-end")
        if self.reference not in ("model", "ground_truth"):
            raise ValueError("reference must be model or ground_truth")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.epsilon / self.steps


@dataclass
class Perturbation:
    delta: np.ndarray  # complex, measurement layout (C, h, k)
    epsilon: float | None
    achieved_loss: float | None = None

    def linf(self) -> float:
        if self.delta.size == 0:
            return 0.0
        return float(max(np.abs(self.delta.real).max(), np.abs(self.delta.imag).max()))

    def check_budget(self) -> None:
        if self.epsilon is not None and self.linf() > self.epsilon * (1 + 1e-12):
            raise AttackError(f"budget violated: linf {self.linf()} > {self.epsilon}")


def random_perturb(y: KSpaceMeasurements, variance: float, stream: RngStream) -> Perturbation:
    """iid complex Gaussian k-space noise with the given per-entry variance."""
    if variance < 0:
        raise ValueError("variance must be >= 0")
    if variance == 0:
        return Perturbation(np.zeros_like(y.data), None)
    return Perturbation(stream.complex_normal(y.data.shape, np.sqrt(variance)), None)


def _project(delta: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(delta.real, -eps, eps) + 1j * np.clip(delta.imag, -eps, eps)


def _init_delta(shape, cfg: AttackConfig, stream: RngStream) -> np.ndarray:
    if cfg.zero_init or cfg.epsilon == 0:
        return np.zeros(shape, dtype=np.complex128)
    re = stream.uniform(-cfg.epsilon, cfg.epsilon, shape)
    im = stream.uniform(-cfg.epsilon, cfg.epsilon, shape)
    return re + 1j * im


def _per_image_losses(xhat: np.ndarray, ref: np.ndarray) -> np.ndarray:
    d = xhat - ref
    return np.sum(np.abs(d) ** 2, axis=tuple(range(1, d.ndim)))


def _resolve_ref(params, op, ys, cfg, modl_cfg, x_ref):
    if cfg.reference == "ground_truth":
        if x_ref is None:
            raise ValueError("ground_truth reference requires the true images")
        return np.asarray(x_ref)
    return reconstruct_core(params, op, ys, modl_cfg)


def pgd_core(
    params,
    op: ForwardOperator,
    ys: np.ndarray,
    cfg: AttackConfig,
    stream: RngStream,
    modl_cfg: ModlConfig,
    x_ref=None,
):
    """Batched sign-gradient ascent on the reconstruction gap, k-space budget.

    ys: (B, C, h, k). Returns (deltas, per-image final losses).
    """
    ref = _resolve_ref(params, op, ys, cfg, modl_cfg, x_ref)
    if cfg.epsilon == 0:
        return np.zeros_like(ys), _per_image_losses(reconstruct_core(params, op, ys, modl_cfg), ref)
    delta = _init_delta(ys.shape, cfg, stream.substream(1))
    alpha = cfg.alpha
    for _ in range(cfg.steps):
        g = _attack_grad(params, op, ys, delta, ref, modl_cfg)
        delta = _project(delta + alpha * (np.sign(g.real) + 1j * np.sign(g.imag)), cfg.epsilon)
    final = _per_image_losses(reconstruct_core(params, op, ys + delta, modl_cfg), ref)
    return delta, final


def _attack_grad(params, op, ys, delta, ref, modl_cfg, return_losses=False):
    tape = eg.Tape()
    dleaf = tape.leaf(delta)
    anchor = adjoint_t(op, eg.add(dleaf, ys))
    xhat = unroll_core(params, op, anchor, anchor, modl_cfg, tape)
    loss = eg.sum_abs2(eg.sub(xhat, ref))
    eg.backward(tape, loss, 1.0)
    g = dleaf.grad
    if g is None or not (np.all(np.isfinite(g.real)) and np.all(np.isfinite(g.imag))):
        raise AttackError("non-finite attack gradient")
    if return_losses:
        return g, _per_image_losses(eg._val(xhat), ref)
    return g


def momentum_core(
    params,
    op: ForwardOperator,
    ys: np.ndarray,
    cfg: AttackConfig,
    stream: RngStream,
    modl_cfg: ModlConfig,
    x_ref=None,
):
    """Momentum variant: iterate momentum (decay times the previous move is
    carried into each step), step-size halving at ceil(K/2) and ceil(3K/4)
    with a restart from the best iterate, best-loss iterate returned per
    image. With decay 0 and halving off this reduces exactly to the plain
    sign-gradient ascent."""
    ref = _resolve_ref(params, op, ys, cfg, modl_cfg, x_ref)
    if cfg.epsilon == 0:
        return np.zeros_like(ys), _per_image_losses(reconstruct_core(params, op, ys, modl_cfg), ref)
    delta = _init_delta(ys.shape, cfg, stream.substream(1))
    b = ys.shape[0]
    prev = delta.copy()
    best_loss = np.full(b, -np.inf)
    best_delta = delta.copy()
    alpha = cfg.alpha
    half_at = {int(np.ceil(0.5 * cfg.steps)), int(np.ceil(0.75 * cfg.steps))}
    for k in range(cfg.steps):
        if cfg.step_halving and k in half_at:
            alpha *= 0.5
            delta = best_delta.copy()
            prev = delta.copy()
        g, losses = _attack_grad(params, op, ys, delta, ref, modl_cfg, return_losses=True)
        improved = losses > best_loss
        best_loss[improved] = losses[improved]
        best_delta[improved] = delta[improved]
        z = _project(delta + alpha * (np.sign(g.real) + 1j * np.sign(g.imag)), cfg.epsilon)
        new = _project(z + cfg.momentum_decay * (delta - prev), cfg.epsilon)
        prev, delta = delta, new
    losses = _per_image_losses(reconstruct_core(params, op, ys + delta, modl_cfg), ref)
    improved = losses > best_loss
    best_loss[improved] = losses[improved]
    best_delta[improved] = delta[improved]
    return best_delta, best_loss


def _estimate_tape_bytes(purify_cfg: PurifyConfig, score: ScoreModel, b: int, h: int, w: int,
                         modl_cfg: ModlConfig) -> float:
    if score.flavor != "learned":
        per_eval = 4 * h * w * 16.0
    else:
        csum = score.params.arch.in_channels + sum(score.params.arch.channels)
        per_eval = 3 * csum * h * w * 8.0
    evals = purify_cfg.pst_step * (purify_cfg.m_r + 1)
    dc = purify_cfg.pst_step * (purify_cfg.m_r + 1) * 8 * h * w * 16.0
    unroll = modl_cfg.unroll_steps * (modl_cfg.cg_max_iter * 6 + 40) * h * w * 16.0
    return b * (evals * per_eval + dc + unroll)


def e2e_core(
    theta_ft,
    score: ScoreModel,
    op: ForwardOperator,
    ys: np.ndarray,
    purify_cfg: PurifyConfig,
    cfg: AttackConfig,
    stream: RngStream,
    modl_cfg: ModlConfig,
):
    """End-to-end attack: ascend the gap between the clean reconstruction and
    the purified+reconstructed perturbed input. All purification noise draws
    are frozen at attack start, making the objective deterministic."""
    est = _estimate_tape_bytes(purify_cfg, score, ys.shape[0], op.height, op.width, modl_cfg)
    if est > cfg.max_tape_bytes:
        raise AttackError(
            f"estimated tape of {est/1e9:.2f} GB exceeds the {cfg.max_tape_bytes/1e9:.2f} GB cap; "
            "reduce the batch, the switching step, or the unroll count"
        )
    ref = reconstruct_core(theta_ft, op, ys, modl_cfg)
    if cfg.epsilon == 0:
        return np.zeros_like(ys), None
    frozen = FrozenPurifyNoise.draw(purify_cfg, (ys.shape[0], op.height, op.width),
                                    stream.substream(2))
    delta = _init_delta(ys.shape, cfg, stream.substream(1))
    alpha = cfg.alpha
    for _ in range(cfg.steps):
        tape = eg.Tape()
        dleaf = tape.leaf(delta)
        ypert = eg.add(dleaf, ys)
        z_pur = purify_core(score, ypert, op, purify_cfg, frozen=frozen, tape=tape)
        xhat = unroll_core(theta_ft, op, z_pur, z_pur, modl_cfg, tape)
        loss = eg.sum_abs2(eg.sub(xhat, ref))
        eg.backward(tape, loss, 1.0)
        g = dleaf.grad
        if g is None or not (np.all(np.isfinite(g.real)) and np.all(np.isfinite(g.imag))):
            raise AttackError("non-finite end-to-end attack gradient")
        delta = _project(delta + alpha * (np.sign(g.real) + 1j * np.sign(g.imag)), cfg.epsilon)
    z_pur = purify_core(score, ys + delta, op, purify_cfg, frozen=frozen)
    final = _per_image_losses(unroll_core(theta_ft, op, z_pur, z_pur, modl_cfg), ref)
    return delta, final


def _single(y: KSpaceMeasurements, op: ForwardOperator):
    if y.fingerprint != op.fingerprint:
        raise ValueError("measurement fingerprint does not match operator")
    return y.data[None]


def pgd_attack(
    params,
    op: ForwardOperator,
    y: KSpaceMeasurements,
    cfg: AttackConfig,
    stream: RngStream,
    modl_cfg: ModlConfig = ModlConfig(),
    x_ref: ComplexImage | None = None,
) -> Perturbation:
    """Worst-case k-space perturbation against the unrolled reconstruction."""
    if cfg.target != "modl-only":
        raise ValueError("pgd_attack expects a modl-only target config")
    xr = x_ref.data[None] if x_ref is not None else None
    deltas, losses = pgd_core(params, op, _single(y, op), cfg, stream, modl_cfg, x_ref=xr)
    pert = Perturbation(deltas[0], cfg.epsilon, float(losses[0]))
    pert.check_budget()
    return pert


def momentum_attack(
    params,
    op: ForwardOperator,
    y: KSpaceMeasurements,
    cfg: AttackConfig,
    stream: RngStream,
    modl_cfg: ModlConfig = ModlConfig(),
    x_ref: ComplexImage | None = None,
) -> Perturbation:
    """Momentum sign-gradient attack with step-size halving; returns the
    best-loss iterate."""
    xr = x_ref.data[None] if x_ref is not None else None
    deltas, losses = momentum_core(params, op, _single(y, op), cfg, stream, modl_cfg, x_ref=xr)
    pert = Perturbation(deltas[0], cfg.epsilon, float(losses[0]))
    pert.check_budget()
    return pert


def e2e_attack(
    theta_ft,
    score: ScoreModel,
    op: ForwardOperator,
    y: KSpaceMeasurements,
    purify_cfg: PurifyConfig,
    cfg: AttackConfig,
    stream: RngStream,
    modl_cfg: ModlConfig = ModlConfig(),
) -> Perturbation:
    """Worst-case perturbation through purification and reconstruction."""
    if cfg.target != "end-to-end":
        raise ValueError("e2e_attack expects an end-to-end target config")
    deltas, losses = e2e_core(
        theta_ft, score, op, _single(y, op), purify_cfg, cfg, stream, modl_cfg
    )
    pert = Perturbation(deltas[0], cfg.epsilon, float(losses[0]) if losses is not None else None)
    pert.check_budget()
    return pert
