"""Shared test helpers: brute-force oracles and finite-difference machinery."""

from __future__ import annotations

import numpy as np

from diffpure_mri import engine as eg


def direct_dft2(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """O(n^2) direct unitary 2-D DFT, coded independently of any FFT."""
    h, w = x.shape
    sign = 1j if inverse else -1j
    out = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            rows = np.exp(sign * 2 * np.pi * u * np.arange(h) / h)
            cols = np.exp(sign * 2 * np.pi * v * np.arange(w) / w)
            out[u, v] = np.sum(x * np.outer(rows, cols))
    return out / np.sqrt(h * w)


def operator_dense_matrix(apply_fn, h: int, w: int) -> np.ndarray:
    """Materialize a linear map on (h, w) complex images as an n x n matrix."""
    n = h * w
    mat = np.zeros((n, n), dtype=np.complex128)
    for k in range(n):
        e = np.zeros(n, dtype=np.complex128)
        e[k] = 1.0
        mat[:, k] = np.asarray(apply_fn(e.reshape(h, w))).ravel()
    return mat


def fd_scalar(fn, x: np.ndarray, indices, h: float = 1e-4):
    """Central finite differences of a real scalar fn at the given flat
    indices of a real or complex array. For complex arrays each index yields
    the (d/dRe, d/dIm) pair packaged as a complex number."""
    grads = {}
    for idx in indices:
        if np.iscomplexobj(x):
            parts = []
            for d in (h, 1j * h):
                xp = x.copy()
                xm = x.copy()
                xp.flat[idx] += d
                xm.flat[idx] -= d
                parts.append((fn(xp) - fn(xm)) / (2 * h))
            grads[idx] = parts[0] + 1j * parts[1]
        else:
            xp = x.copy()
            xm = x.copy()
            xp.flat[idx] += h
            xm.flat[idx] -= h
            grads[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return grads


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def max_fd_rel_err_params(loss_fn, params, picks_per_tensor: int, rng: np.random.Generator,
                          h: float = 1e-4, analytic=None) -> float:
    """Compare analytic parameter gradients against central differences on a
    seeded subsample of entries in every tensor (all entries if small)."""
    from diffpure_mri.networks import NetworkParams

    worst = 0.0
    for name, tensor in params.tensors.items():
        count = tensor.size
        if count <= picks_per_tensor:
            picks = np.arange(count)
        else:
            picks = rng.choice(count, size=picks_per_tensor, replace=False)
        for idx in picks:
            tp = {k: v.copy() for k, v in params.tensors.items()}
            tm = {k: v.copy() for k, v in params.tensors.items()}
            tp[name].flat[idx] += h
            tm[name].flat[idx] -= h
            fd = (loss_fn(NetworkParams(params.arch, tp))
                  - loss_fn(NetworkParams(params.arch, tm))) / (2 * h)
            an = analytic[name].flat[idx]
            worst = max(worst, rel_err(fd, an))
    return worst


def fd_complex_array(loss_fn, x: np.ndarray, picks: int, rng: np.random.Generator,
                     analytic: np.ndarray, h: float = 1e-4) -> float:
    """Max relative error of an analytic complex gradient vs FD on a seeded
    subsample of entries (both real and imaginary directions)."""
    idxs = rng.choice(x.size, size=min(picks, x.size), replace=False)
    fd = fd_scalar(loss_fn, x, idxs, h)
    worst = 0.0
    for idx in idxs:
        worst = max(worst, rel_err(fd[idx].real, analytic.flat[idx].real))
        worst = max(worst, rel_err(fd[idx].imag, analytic.flat[idx].imag))
    return worst
