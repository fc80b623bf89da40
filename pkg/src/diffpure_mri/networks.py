"""Small convolutional networks on the 2-channel real view of complex images:
the unrolled-reconstruction denoiser (residual) and the noise-conditional
score network, plus parameter containers, Adam, and NETP1 checkpoints.

Noise conditioning for the score net: the input is scaled by 1/sqrt(1+sigma^2)
and a constant log(sigma) channel is appended; the raw network output is
divided by sigma. This is the usual noise-prediction parametrization: the
denoising-score-matching target for the raw output is the unit noise, so the
net is well-scaled across the whole sigma range.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine as eg
from .numerics import ComplexImage, RngStream


@dataclass(frozen=True)
class ConvNetArch:
    """Plain conv stack: ReLU between layers, stride 1, same padding."""

    in_channels: int
    channels: tuple  # per-layer output channels; last entry is the output width
    kernel_size: int = 3
    residual: bool = False
    compute_dtype: str = "float64"  # internal conv kernel precision

    def layer_shapes(self):
        shapes = {}
        cin = self.in_channels
        for i, cout in enumerate(self.channels):
            shapes[f"conv{i}.weight"] = (cout, cin, self.kernel_size, self.kernel_size)
            shapes[f"conv{i}.bias"] = (cout,)
            cin = cout
        return shapes

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "kernel_size": self.kernel_size,
            "residual": self.residual,
            "compute_dtype": self.compute_dtype,
        }

    @staticmethod
    def from_dict(d: dict) -> "ConvNetArch":
        return ConvNetArch(
            d["in_channels"], tuple(d["channels"]), d["kernel_size"], d["residual"],
            d.get("compute_dtype", "float64"),
        )


def default_denoiser_arch() -> ConvNetArch:
    return ConvNetArch(in_channels=2, channels=(16, 16, 16, 2), kernel_size=3, residual=True)


def default_score_arch() -> ConvNetArch:
    return ConvNetArch(in_channels=3, channels=(32, 32, 32, 32, 2), kernel_size=3, residual=False)


@dataclass(frozen=True)
class NetworkParams:
    arch: ConvNetArch
    tensors: dict  # name -> float64 ndarray, ordered per arch.layer_shapes()

    def __post_init__(self) -> None:
        shapes = self.arch.layer_shapes()
        if list(shapes.keys()) != list(self.tensors.keys()):
            raise ValueError("parameter names do not match architecture")
        for name, shape in shapes.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ValueError(f"{name}: shape {t.shape} != {shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"{name}: non-finite entries")

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def map(self, fn) -> "NetworkParams":
        return replace(self, tensors={k: fn(k, v) for k, v in self.tensors.items()})


def init_params(arch: ConvNetArch, stream: RngStream, zero_last: bool = True) -> NetworkParams:
    """He-style init; the final layer starts at zero by default so a residual
    net begins as the identity and the score net begins at zero."""
    tensors = {}
    names = list(arch.layer_shapes().items())
    for idx, (name, shape) in enumerate(names):
        is_last_layer = idx >= len(names) - 2
        if name.endswith("bias"):
            tensors[name] = np.zeros(shape)
        elif zero_last and is_last_layer:
            tensors[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            tensors[name] = stream.normal(shape, std=np.sqrt(2.0 / fan_in))
    return NetworkParams(arch, tensors)


def zero_params(arch: ConvNetArch) -> NetworkParams:
    return NetworkParams(arch, {k: np.zeros(s) for k, s in arch.layer_shapes().items()})


def _param_handles(params: NetworkParams, tape: eg.Tape | None):
    if tape is None:
        return params.tensors
    handles = {}
    for name, t in params.tensors.items():
        if name in tape.param_nodes:
            handles[name] = tape.param_nodes[name]
        else:
            node = tape.leaf(t)
            tape.param_nodes[name] = node
            handles[name] = node
    return handles


def convnet_apply(params: NetworkParams, x, tape: eg.Tape | None = None):
    """Run the conv stack on a real (B, C, h, w) array or Node."""
    handles = _param_handles(params, tape)
    out = x
    n = len(params.arch.channels)
    dtype = params.arch.compute_dtype
    for i in range(n):
        out = eg.conv2d(out, handles[f"conv{i}.weight"], handles[f"conv{i}.bias"],
                        compute_dtype=dtype)
        if i < n - 1:
            out = eg.relu(out)
    return out


def denoiser_apply(params: NetworkParams, z, tape: eg.Tape | None = None):
    """Residual denoiser on complex (h, w) or (B, h, w) arrays/Nodes."""
    single = eg._val(z).ndim == 2
    if single:
        z = _reshape4(z, (1,) + eg._val(z).shape)
    x = eg.to_channels(z)
    body = convnet_apply(params, x, tape)
    if params.arch.residual:
        body = eg.add(body, x)
    out = eg.from_channels(body)
    if single:
        out = _reshape_drop_batch(out)
    return out


def _reshape4(x, shape):
    # reshape is a free (view) op; express it as a recorded primitive
    vx = eg._val(x)
    old = vx.shape
    out = vx.reshape(shape)
    return eg._emit(eg._tape_of(x), out, (x, lambda g: g.reshape(old)))


def _reshape_drop_batch(x):
    vx = eg._val(x)
    out = vx[0]
    return eg._emit(eg._tape_of(x), out, (x, lambda g: g[None]))


def score_net_apply(params: NetworkParams, z, sigma, tape: eg.Tape | None = None):
    """Noise-conditional score net on complex (B, h, w) arrays/Nodes.

    sigma: positive scalar or per-sample array (B,). Returns the same shape
    as z: the learned approximation to the score at noise level sigma.
    """
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig <= 0):
        raise ValueError("sigma must be positive")
    single = eg._val(z).ndim == 2
    if single:
        z = _reshape4(z, (1,) + eg._val(z).shape)
    b = eg._val(z).shape[0]
    sig_b = np.broadcast_to(sig, (b,)).astype(np.float64)
    in_scale = (1.0 / np.sqrt(1.0 + sig_b**2)).reshape(b, 1, 1)
    x = eg.to_channels(eg.scale(z, in_scale))
    x = eg.append_const_channel(x, np.log(sig_b).reshape(b, 1, 1, 1))
    body = convnet_apply(params, x, tape)
    out = eg.from_channels(body)
    out = eg.scale(out, (1.0 / sig_b).reshape(b, 1, 1))
    if single:
        out = _reshape_drop_batch(out)
    return out


def denoiser_forward(params: NetworkParams, x: ComplexImage, tape: eg.Tape | None = None) -> ComplexImage:
    """Residual denoiser on a single image; records on tape when given."""
    if tape is None:
        return ComplexImage(denoiser_apply(params, x.data, None))
    node = tape.leaf(x.data)
    tape.input_node = node
    out = denoiser_apply(params, node, tape)
    tape.output_node = out
    return ComplexImage(out.value)


def score_forward(
    params: NetworkParams, z: ComplexImage, sigma: float, tape: eg.Tape | None = None
) -> ComplexImage:
    """Score network on a single image at noise level sigma (> 0)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if tape is not None:
        node = tape.leaf(z.data)
        tape.input_node = node
        out = score_net_apply(params, node, sigma, tape)
        tape.output_node = out
        return ComplexImage(out.value)
    return ComplexImage(score_net_apply(params, z.data, sigma, None))


def backward(tape: eg.Tape, output_grad: ComplexImage | np.ndarray):
    """Reverse-mode gradients of a recorded forward: (param_grads, input_grad).

    output_grad follows the complex-gradient convention of the engine
    (dL/dRe + i dL/dIm). The tape is single-use.
    """
    if tape.output_node is None:
        raise ValueError("tape has no recorded output")
    g = output_grad.data if isinstance(output_grad, ComplexImage) else output_grad
    eg.backward(tape, tape.output_node, g)
    param_grads = {}
    for name, node in tape.param_nodes.items():
        param_grads[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    input_grad = None
    if tape.input_node is not None:
        input_grad = tape.input_node.grad
        if input_grad is None:
            input_grad = np.zeros_like(tape.input_node.value)
    return param_grads, input_grad


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: NetworkParams, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> OptimizerState:
    zeros = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    return OptimizerState({k: z.copy() for k, z in zeros.items()}, zeros, 0, lr, beta1, beta2, eps)


def adam_step(params: NetworkParams, grads: dict, state: OptimizerState):
    """One adaptive-moment update; returns (new_params, new_state)."""
    for name, t in params.tensors.items():
        if name not in grads:
            raise ValueError(f"missing gradient for {name}")
        if grads[name].shape != t.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
    t = state.step + 1
    new_m, new_v, new_t = {}, {}, {}
    b1, b2 = state.beta1, state.beta2
    for name, p in params.tensors.items():
        g = grads[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new_m[name], new_v[name] = m, v
        new_t[name] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return (
        NetworkParams(params.arch, new_t),
        OptimizerState(new_m, new_v, t, state.lr, b1, b2, state.eps),
    )


NETP_MAGIC = b"NETP1"


def save_netp(path, params: NetworkParams, meta: dict | None = None) -> None:
    """NETP1 checkpoint: magic, length-prefixed JSON header, f32 tensors."""
    header = {
        "arch": params.arch.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(NETP_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in params.tensors.values():
            f.write(v.astype("<f4").tobytes())


def load_netp(path):
    """Returns (params, meta)."""
    with open(path, "rb") as f:
        if f.read(5) != NETP_MAGIC:
            raise ValueError(f"bad magic in {path}")
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n))
        arch = ConvNetArch.from_dict(header["arch"])
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            raw = np.frombuffer(f.read(count * 4), dtype="<f4")
            tensors[entry["name"]] = raw.astype(np.float64).reshape(shape)
    return NetworkParams(arch, tensors), header["meta"]
