"""Minimal reverse-mode differentiation over numpy arrays, real and complex.

A Tape records primitive ops in creation order (which is already a topological
order); backward sweeps the list once in reverse. Primitives accept either
plain arrays (eager, no recording) or Node handles (recorded); both paths run
the same value code, so taped and untaped forwards are bit-identical.

Gradient convention for complex values: the stored gradient of z is
dL/d(Re z) + i * dL/d(Im z) for the real scalar loss L. Under this convention
the pullback of any C-linear map is its adjoint (e.g. the pullback of the
unitary fft is the ifft), and real/complex code composes without special
cases at the boundaries.

Networks and training live in networks.py; this module is only the engine.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:  # optional fast conv kernels; the im2col path below is the reference
    import torch as _torch

    _torch.set_num_threads(max(1, _torch.get_num_threads()))
except ImportError:  # pragma: no cover
    _torch = None

# im2col scratch is the peak allocation; bound it by chunking the batch axis.
_CONV_CHUNK_BYTES = 6.0e7


class TapeConsumedError(RuntimeError):
    """A tape can be swept backward only once."""


class Tape:
    """Recorded forward graph of primitive ops with saved activations."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False
        # Optional bookkeeping set by network forwards for the backward() wrapper.
        self.param_nodes: dict[str, Node] = {}
        self.input_node: Node | None = None
        self.output_node: Node | None = None

    def leaf(self, value) -> "Node":
        return Node(np.asarray(value), self)


class Node:
    __slots__ = ("value", "grad", "tape", "_pb")

    def __init__(self, value, tape: Tape):
        self.value = value
        self.grad = None
        self.tape = tape
        self._pb: list = []
        tape.nodes.append(self)


def _val(x):
    return x.value if isinstance(x, Node) else x


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _emit(tape, value, *pulls):
    """pulls: (arg, pullback) pairs; non-Node args are skipped."""
    if tape is None:
        return value
    node = Node(value, tape)
    for arg, pull in pulls:
        if isinstance(arg, Node):
            node._pb.append((arg, pull))
    return node


def backward(tape: Tape, root: Node, seed_grad) -> None:
    """Reverse sweep: fills .grad on every node reachable from root.

    Visits each node exactly once in reverse creation (= reverse topological)
    order. The tape is single-use.
    """
    if tape.consumed:
        raise TapeConsumedError("tape already consumed by a previous backward pass")
    tape.consumed = True
    if root.tape is not tape:
        raise ValueError("root node does not belong to this tape")
    root.grad = seed_grad
    for node in reversed(tape.nodes):
        g = node.grad
        if g is not None:
            for parent, pull in node._pb:
                pg = pull(g)
                parent.grad = pg if parent.grad is None else parent.grad + pg
            if node._pb and node is not root:
                node.grad = None  # interior grads are not needed after propagation
        # release the pullback closures (and the activations they capture) so
        # the graph frees by refcount as the sweep proceeds
        node._pb = []
    tape.nodes = []


# ---------------------------------------------------------------------------
# elementwise / linear primitives (real or complex)

def add(a, b):
    out = _val(a) + _val(b)
    return _emit(_tape_of(a, b), out, (a, lambda g: g), (b, lambda g: g))


def sub(a, b):
    out = _val(a) - _val(b)
    return _emit(_tape_of(a, b), out, (a, lambda g: g), (b, lambda g: -g))


def neg(a):
    return _emit(_tape_of(a), -_val(a), (a, lambda g: -g))


def scale(a, c):
    """Multiply by a constant scalar or array c (never a Node)."""
    cc = np.conj(c)
    out = _val(a) * c
    return _emit(_tape_of(a), out, (a, lambda g: g * cc))


def scale_var(a, s):
    """Array (real or complex) times a real scalar variable."""
    va, vs = _val(a), _val(s)
    out = va * vs

    def pull_s(g):
        prod = np.conj(g) * va
        return float(np.sum(prod.real))

    return _emit(_tape_of(a, s), out, (a, lambda g: g * vs), (s, pull_s))


def div_ss(a, b):
    """Real scalar / real scalar."""
    va, vb = float(_val(a)), float(_val(b))
    out = va / vb
    return _emit(_tape_of(a, b), out, (a, lambda g: g / vb), (b, lambda g: -g * va / (vb * vb)))


def sum_abs2(a):
    """Sum of squared magnitudes -> real scalar (complex or real input)."""
    va = _val(a)
    out = float(np.vdot(va, va).real)
    return _emit(_tape_of(a), out, (a, lambda g: (2.0 * g) * va))


def real_inner(a, b):
    """Re<a, b> with the left argument conjugated -> real scalar."""
    va, vb = _val(a), _val(b)
    out = float(np.vdot(va, vb).real)
    return _emit(_tape_of(a, b), out, (a, lambda g: g * vb), (b, lambda g: g * va))


def conj(a):
    return _emit(_tape_of(a), np.conj(_val(a)), (a, lambda g: np.conj(g)))


# ---------------------------------------------------------------------------
# Fourier / k-space structure (complex, trailing two axes)

def fft2(a):
    out = np.fft.fft2(_val(a), norm="ortho")
    return _emit(_tape_of(a), out, (a, lambda g: np.fft.ifft2(g, norm="ortho")))


def ifft2(a):
    out = np.fft.ifft2(_val(a), norm="ortho")
    return _emit(_tape_of(a), out, (a, lambda g: np.fft.fft2(g, norm="ortho")))


def restrict_cols(a, cols: np.ndarray):
    """Keep the given k-space columns: (..., h, w) -> (..., h, k)."""
    va = _val(a)
    out = va[..., :, cols]
    w = va.shape[-1]

    def pull(g):
        full = np.zeros(g.shape[:-1] + (w,), dtype=g.dtype)
        full[..., :, cols] = g
        return full

    return _emit(_tape_of(a), out, (a, pull))


def zerofill_cols(a, cols: np.ndarray, width: int):
    """Scatter kept columns back into a zero k-space grid: (..., h, k) -> (..., h, w)."""
    va = _val(a)
    out = np.zeros(va.shape[:-1] + (width,), dtype=va.dtype)
    out[..., :, cols] = va
    return _emit(_tape_of(a), out, (a, lambda g: g[..., :, cols]))


def coil_expand(a, maps: np.ndarray):
    """(..., h, w) image times per-coil maps (C, h, w) -> (..., C, h, w)."""
    va = _val(a)
    out = va[..., None, :, :] * maps
    cmaps = np.conj(maps)
    return _emit(_tape_of(a), out, (a, lambda g: np.sum(g * cmaps, axis=-3)))


def coil_combine(a, maps: np.ndarray):
    """Sum_c conj(maps_c) * a_c over the coil axis: (..., C, h, w) -> (..., h, w)."""
    va = _val(a)
    cmaps = np.conj(maps)
    out = np.sum(va * cmaps, axis=-3)
    return _emit(_tape_of(a), out, (a, lambda g: g[..., None, :, :] * maps))


def to_channels(z):
    """Complex (..., h, w) -> real (..., 2, h, w), channels (Re, Im)."""
    vz = _val(z)
    out = np.stack([vz.real, vz.imag], axis=-3)
    return _emit(_tape_of(z), out, (z, lambda g: g[..., 0, :, :] + 1j * g[..., 1, :, :]))


def from_channels(x):
    """Real (..., 2, h, w) -> complex (..., h, w)."""
    vx = _val(x)
    out = (vx[..., 0, :, :] + 1j * vx[..., 1, :, :]).astype(np.complex128)
    return _emit(_tape_of(x), out, (x, lambda g: np.stack([g.real, g.imag], axis=-3)))


# ---------------------------------------------------------------------------
# real network primitives

def relu(x):
    vx = _val(x)
    mask = vx > 0
    return _emit(_tape_of(x), vx * mask, (x, lambda g: g * mask))


def append_const_channel(x, value):
    """Append one constant-valued channel: (B, C, h, w) -> (B, C+1, h, w)."""
    vx = _val(x)
    b, c, h, w = vx.shape
    extra = np.broadcast_to(np.asarray(value, dtype=vx.dtype), (b, 1, h, w))
    out = np.concatenate([vx, extra], axis=1)
    return _emit(_tape_of(x), out, (x, lambda g: g[:, :c]))


def _conv_chunk(n_pix: int, cin: int, k: int) -> int:
    per_image = n_pix * cin * k * k * 8
    return max(1, int(_CONV_CHUNK_BYTES / max(per_image, 1)))


def _conv2d_value(x: np.ndarray, w: np.ndarray, b) -> np.ndarray:
    """Stride-1 same-padding cross-correlation, (B,Cin,H,W) -> (B,Cout,H,W)."""
    bsz, cin, h, wth = x.shape
    cout, _, k, _ = w.shape
    pad = k // 2
    wm = w.reshape(cout, cin * k * k)
    out = np.empty((bsz, cout, h, wth), dtype=np.float64)
    chunk = _conv_chunk(h * wth, cin, k)
    for lo in range(0, bsz, chunk):
        hi = min(lo + chunk, bsz)
        xp = np.pad(x[lo:hi], ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        v = sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = v.transpose(0, 2, 3, 1, 4, 5).reshape((hi - lo) * h * wth, cin * k * k)
        res = cols @ wm.T
        if b is not None:
            res += b
        out[lo:hi] = res.reshape(hi - lo, h, wth, cout).transpose(0, 3, 1, 2)
    return out


def _conv2d_weight_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    bsz, cin, h, wth = x.shape
    cout = g.shape[1]
    pad = k // 2
    acc = np.zeros((cin * k * k, cout), dtype=np.float64)
    chunk = _conv_chunk(h * wth, cin, k)
    for lo in range(0, bsz, chunk):
        hi = min(lo + chunk, bsz)
        xp = np.pad(x[lo:hi], ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        v = sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = v.transpose(0, 2, 3, 1, 4, 5).reshape((hi - lo) * h * wth, cin * k * k)
        gm = g[lo:hi].transpose(0, 2, 3, 1).reshape((hi - lo) * h * wth, cout)
        acc += cols.T @ gm
    return acc.T.reshape(cout, cin, k, k)


def _torch_dtype(compute_dtype: str):
    return _torch.float32 if compute_dtype == "float32" else _torch.float64


def _conv2d_value_torch(x, w, b, compute_dtype: str) -> np.ndarray:
    td = _torch_dtype(compute_dtype)
    xt = _torch.from_numpy(np.ascontiguousarray(x)).to(td)
    wt = _torch.from_numpy(np.ascontiguousarray(w)).to(td)
    bt = _torch.from_numpy(np.ascontiguousarray(b)).to(td) if b is not None else None
    out = _torch.nn.functional.conv2d(xt, wt, bt, padding=w.shape[-1] // 2)
    return out.numpy().astype(np.float64)


def _conv2d_weight_grad_torch(x, g, k: int, compute_dtype: str) -> np.ndarray:
    td = _torch_dtype(compute_dtype)
    xt = _torch.from_numpy(np.ascontiguousarray(x)).to(td).transpose(0, 1)
    gt = _torch.from_numpy(np.ascontiguousarray(g)).to(td).transpose(0, 1)
    dw = _torch.nn.functional.conv2d(xt, gt, padding=k // 2).transpose(0, 1)
    return dw.numpy().astype(np.float64)


def conv2d(x, w, b=None, compute_dtype: str = "float64"):
    """2-D convolution (cross-correlation), stride 1, zero same-padding.

    x: (B, Cin, H, W); w: (Cout, Cin, k, k) with odd k; b: (Cout,) or None.
    compute_dtype selects the internal kernel precision; values and gradients
    are carried as float64 on the tape either way.
    """
    vx, vw = _val(x), _val(w)
    vb = _val(b) if b is not None else None
    k = vw.shape[-1]
    use_torch = _torch is not None
    if use_torch:
        out = _conv2d_value_torch(vx, vw, vb, compute_dtype)
    else:  # pragma: no cover
        out = _conv2d_value(vx, vw, vb)

    def pull_x(g):
        # input grad = same conv of g with in/out-swapped, spatially flipped kernels
        w_rot = vw[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).copy()
        if use_torch:
            return _conv2d_value_torch(g, w_rot, None, compute_dtype)
        return _conv2d_value(g, w_rot, None)  # pragma: no cover

    def pull_w(g):
        if use_torch:
            return _conv2d_weight_grad_torch(vx, g, k, compute_dtype)
        return _conv2d_weight_grad(vx, g, k)  # pragma: no cover

    pulls = [(x, pull_x), (w, pull_w)]
    if b is not None:
        pulls.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return _emit(_tape_of(x, w, b), out, *pulls)
