"""Unrolled reconstruction alternating a learned denoiser with a regularized
data-consistency solve, plus supervised training, fine-tuning on purified
noisy examples, adversarial training, and randomized smoothing.

Two anchor modes exist for the DC solve: the standard unroll anchors every
solve at A^H y; the purified unroll anchors at the purified image itself,
which is also the initialization. Training backpropagates through all unrolls
including the recorded CG iterates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from . import networks as nn
from .diffusion import ScoreModel, TrainingDivergence
from .forward_model import (
    ForwardOperator,
    KSpaceMeasurements,
    adjoint_t,
    dc_solve_t,
    forward_t,
)
from .numerics import ComplexImage, RngStream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModlConfig:
    unroll_steps: int = 6
    lam: float = 1.0
    cg_tol: float = 1e-6
    cg_max_iter: int = 100

    def __post_init__(self) -> None:
        if self.unroll_steps < 0:
            raise ValueError("unroll_steps must be >= 0")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")


@dataclass
class TrainingSet:
    """(ground truth, measurements) pairs sharing one forward operator."""

    xs: list  # list[ComplexImage]
    ys: list  # list[KSpaceMeasurements]
    op: ForwardOperator

    def __post_init__(self) -> None:
        if len(self.xs) != len(self.ys):
            raise ValueError("xs and ys length mismatch")
        for y in self.ys:
            if y.fingerprint != self.op.fingerprint:
                raise ValueError("measurement fingerprint does not match operator")

    def __len__(self) -> int:
        return len(self.xs)

    def stacked(self):
        return (
            np.stack([x.data for x in self.xs]),
            np.stack([y.data for y in self.ys]),
        )


def unroll_core(params: nn.NetworkParams, op: ForwardOperator, anchor, x0, cfg: ModlConfig,
                tape: eg.Tape | None = None, diagnostics: list | None = None):
    """N rounds of denoise + DC solve on (B, h, w) or (h, w) arrays/Nodes."""
    x = x0
    for _ in range(cfg.unroll_steps):
        z = nn.denoiser_apply(params, x, tape)
        x = dc_solve_t(op, anchor, z, cfg.lam, tol=cfg.cg_tol, max_iter=cfg.cg_max_iter)
        if diagnostics is not None:
            diagnostics.append((eg._val(z), eg._val(x)))
    return x


def reconstruct_core(params: nn.NetworkParams, op: ForwardOperator, ys, cfg: ModlConfig,
                     tape: eg.Tape | None = None, x0=None):
    """Batched reconstruction from measurements (..., C, h, k). x0 overrides
    the A^H y initialization (the DC anchor stays A^H y)."""
    anchor = adjoint_t(op, ys)
    return unroll_core(params, op, anchor, anchor if x0 is None else x0, cfg, tape)


def reconstruct(params: nn.NetworkParams, op: ForwardOperator, y: KSpaceMeasurements,
                cfg: ModlConfig, x0: ComplexImage | None = None) -> ComplexImage:
    """x_0 = A^H y; then z_j = f(x_j), x_{j+1} = (A^H A + lam I)^{-1}(A^H y + lam z_j)."""
    if y.fingerprint != op.fingerprint:
        raise ValueError("measurement fingerprint does not match operator")
    return ComplexImage(reconstruct_core(params, op, y.data, cfg,
                                         x0=None if x0 is None else x0.data))


def reconstruct_purified_core(params: nn.NetworkParams, op: ForwardOperator, z_pur,
                              cfg: ModlConfig, tape: eg.Tape | None = None):
    return unroll_core(params, op, z_pur, z_pur, cfg, tape)


def reconstruct_purified(params: nn.NetworkParams, op: ForwardOperator, z_pur: ComplexImage,
                         cfg: ModlConfig) -> ComplexImage:
    """As reconstruct, but both the initialization and the DC anchor are the
    purified image rather than A^H y."""
    return ComplexImage(reconstruct_purified_core(params, op, z_pur.data, cfg))


@dataclass
class TrainResult:
    params: nn.NetworkParams
    losses: list = field(default_factory=list)


def _loss_and_grads(params, op, anchors, targets, cfg):
    from .numerics import NumericalError

    tape = eg.Tape()
    try:
        xhat = unroll_core(params, op, anchors, anchors, cfg, tape)
    except NumericalError as exc:
        raise TrainingDivergence(f"unroll diverged: {exc}") from exc
    diff = eg.sub(xhat, targets)
    loss = eg.scale(eg.sum_abs2(diff), 1.0 / targets.size)
    lv = float(eg._val(loss))
    if not np.isfinite(lv):
        raise TrainingDivergence(f"training loss is non-finite ({lv})")
    eg.backward(tape, loss, 1.0)
    grads = {k: node.grad if node.grad is not None else np.zeros_like(node.value)
             for k, node in tape.param_nodes.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient for {k} (loss={lv})")
    return lv, grads


def _run_epochs(params, opt, n, batch_size, epochs, stream, step_fn):
    losses = []
    for epoch in range(epochs):
        perm = stream.substream(201, epoch).permutation(n)
        for lo in range(0, n, batch_size):
            idx = perm[lo : lo + batch_size]
            params, opt, lv = step_fn(params, opt, idx, epoch)
            losses.append(lv)
        log.info("epoch %d: loss %.6g", epoch, losses[-1])
    return params, opt, losses


def train(
    train_set: TrainingSet,
    cfg: ModlConfig,
    epochs: int = 15,
    lr: float = 2e-3,
    stream: RngStream | None = None,
    arch: nn.ConvNetArch | None = None,
    batch_size: int = 32,
    init: nn.NetworkParams | None = None,
) -> TrainResult:
    """Supervised end-to-end training of the unrolled reconstruction (MSE)."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    arch = arch or nn.default_denoiser_arch()
    params = init if init is not None else nn.init_params(arch, stream.substream(200))
    opt = nn.init_optimizer(params, lr)
    xs, ys = train_set.stacked()
    op = train_set.op

    def step(params, opt, idx, epoch):
        anchors = adjoint_t(op, ys[idx])
        lv, grads = _loss_and_grads(params, op, anchors, xs[idx], cfg)
        params, opt = nn.adam_step(params, grads, opt)
        return params, opt, lv

    params, opt, losses = _run_epochs(params, opt, len(train_set), batch_size, epochs,
                                      stream, step)
    return TrainResult(params, losses)


def fine_tune(
    params: nn.NetworkParams,
    train_set: TrainingSet,
    score: ScoreModel,
    pst: int,
    sigma_ft: float = 0.01,
    cfg: ModlConfig = ModlConfig(),
    epochs: int = 3,
    lr: float = 5e-4,
    stream: RngStream | None = None,
    batch_size: int = 32,
    m_r: int = 1,
    snr: float = 0.16,
) -> TrainResult:
    """Fine-tune on purified noisy examples: draw k-space noise v of std
    sigma_ft, purify y+v, and train the purified-anchor unroll to map the
    purified image to the ground truth. Starts from the pretrained params.

    Purified anchors are recomputed once per epoch (fresh v draws), not per
    gradient step.
    """
    from .purification import PurifyConfig, purify_core

    if pst >= score.schedule.n_r:
        raise ValueError("pst must be below the schedule length")
    opt = nn.init_optimizer(params, lr)
    xs, ys = train_set.stacked()
    op = train_set.op
    pcfg = PurifyConfig(pst_step=pst, m_r=m_r, snr=snr)
    losses = []
    n = len(train_set)
    for epoch in range(epochs):
        vstream = stream.substream(301, epoch)
        v = vstream.complex_normal(ys.shape, sigma_ft) if sigma_ft > 0 else 0.0
        anchors_all = purify_core(score, ys + v, op, pcfg, stream.substream(302, epoch))
        perm = stream.substream(303, epoch).permutation(n)
        for lo in range(0, n, batch_size):
            idx = perm[lo : lo + batch_size]
            lv, grads = _loss_and_grads(params, op, anchors_all[idx], xs[idx], cfg)
            params, opt = nn.adam_step(params, grads, opt)
            losses.append(lv)
        log.info("fine-tune epoch %d: loss %.6g", epoch, losses[-1])
    return TrainResult(params, losses)


def at_train(
    params: nn.NetworkParams,
    train_set: TrainingSet,
    cfg: ModlConfig,
    attack_cfg,
    epochs: int = 2,
    lr: float = 5e-4,
    stream: RngStream | None = None,
    batch_size: int = 32,
) -> TrainResult:
    """Adversarial training: inner worst-case k-space perturbation against the
    current params (ground-truth-referenced PGD), outer descent on the
    adversarial reconstruction loss. attack_cfg.epsilon == 0 reproduces plain
    training exactly (the inner loop is skipped)."""
    from .perturbations import pgd_core

    opt = nn.init_optimizer(params, lr)
    xs, ys = train_set.stacked()
    op = train_set.op

    def step(params, opt, idx, epoch):
        yb = ys[idx]
        if attack_cfg.epsilon > 0:
            deltas, _ = pgd_core(
                params, op, yb, attack_cfg, stream.substream(401, epoch), cfg,
                x_ref=xs[idx],
            )
            yb = yb + deltas
        anchors = adjoint_t(op, yb)
        lv, grads = _loss_and_grads(params, op, anchors, xs[idx], cfg)
        params, opt = nn.adam_step(params, grads, opt)
        return params, opt, lv

    params, opt, losses = _run_epochs(params, opt, len(train_set), batch_size, epochs,
                                      stream, step)
    return TrainResult(params, losses)


def rs_reconstruct(
    params: nn.NetworkParams,
    op: ForwardOperator,
    y: KSpaceMeasurements,
    cfg: ModlConfig,
    noise_std: float = 0.01,
    num_samples: int = 10,
    stream: RngStream | None = None,
) -> ComplexImage:
    """End-to-end randomized smoothing: average reconstructions over Gaussian
    measurement-noise draws."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    acc = np.zeros((op.height, op.width), dtype=np.complex128)
    for k in range(num_samples):
        noise = stream.complex_normal(y.data.shape, noise_std) if noise_std > 0 else 0.0
        acc += reconstruct_core(params, op, y.data + noise, cfg)
    return ComplexImage(acc / num_samples)


def rs_reconstruct_core(params, op, ys, cfg, noise_std, num_samples, stream):
    """Batched randomized smoothing on (B, C, h, k) measurement arrays."""
    acc = None
    for k in range(num_samples):
        noise = stream.complex_normal(ys.shape, noise_std) if noise_std > 0 else 0.0
        out = reconstruct_core(params, op, ys + noise, cfg)
        acc = out if acc is None else acc + out
    return acc / num_samples
