"""Complex 2-D arrays, unitary FFTs, a Hermitian-PSD conjugate-gradient solver,
and deterministic counter-based RNG streams.

Conventions fixed here and relied on everywhere else:

* images are complex128 arrays with power-of-two dims (>= 8), DC at index (0, 0),
  no fftshift anywhere;
* FFTs are unitary (norm="ortho"), so energy is preserved and the adjoint of
  ``fft2`` is ``ifft2``;
* complex Gaussian draws of "std" s have independent real/imag parts of
  variance s^2/2 each, so E|entry|^2 = s^2 and norms behave like the
  real-valued 2n-dimensional formulas.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MIN_DIM = 8


class NumericalError(RuntimeError):
    """Raised when a solver encounters non-finite intermediate values."""


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_dims(h: int, w: int) -> None:
    for n in (h, w):
        if not (_is_pow2(n) and n >= MIN_DIM):
            raise ValueError(f"dimension {n} is not a power of two >= {MIN_DIM}")


@dataclass(frozen=True)
class ComplexImage:
    """A 2-D grid of complex samples; the universal signal carrier.

    data is complex128, row-major, shape (height, width). All entries must be
    finite and both dims must be powers of two >= 8.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.data)
        if a.ndim != 2:
            raise ValueError(f"expected 2-D data, got shape {a.shape}")
        _check_dims(a.shape[0], a.shape[1])
        if not (np.all(np.isfinite(a.real)) and np.all(np.isfinite(a.imag))):
            raise ValueError("non-finite entries in image data")
        if a.dtype != np.complex128:
            a = a.astype(np.complex128)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def norm(self) -> float:
        """l2 norm of the image viewed as 2n real numbers."""
        return float(np.linalg.norm(self.data))

    @staticmethod
    def zeros(h: int, w: int) -> "ComplexImage":
        _check_dims(h, w)
        return ComplexImage(np.zeros((h, w), dtype=np.complex128))


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


@dataclass
class RngStream:
    """A deterministic, independently-seeded random stream.

    Two streams with distinct (master_seed, stream_index) are statistically
    independent (counter-based Philox keying); replaying the same pair
    reproduces the identical sequence bit for bit.
    """

    master_seed: int
    stream_index: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        key = np.array(
            [self.master_seed & 0xFFFFFFFFFFFFFFFF, self.stream_index & 0xFFFFFFFFFFFFFFFF],
            dtype=np.uint64,
        )
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, *indices: int) -> "RngStream":
        """Derive an independent child stream; same indices -> same stream."""
        idx = self.stream_index
        for k in indices:
            idx = _splitmix64(idx ^ _splitmix64(k))
        return RngStream(self.master_seed, idx)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def choice(self, pool, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(pool, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def complex_normal(self, shape, std: float = 1.0) -> np.ndarray:
        """Complex Gaussian with E|entry|^2 = std^2 (real/imag each std^2/2)."""
        parts = self._gen.standard_normal(tuple(shape) + (2,))
        out = (parts[..., 0] + 1j * parts[..., 1]) * (std / np.sqrt(2.0))
        return out.astype(np.complex128)


def fft2_raw(a: np.ndarray) -> np.ndarray:
    """Unitary 2-D FFT over the trailing two axes (batched internally)."""
    return np.fft.fft2(a, norm="ortho")


def ifft2_raw(a: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(a, norm="ortho")


def fft2(img: ComplexImage) -> ComplexImage:
    """Unitary 2-D DFT. Energy preserved; DC at (0, 0)."""
    return ComplexImage(fft2_raw(img.data))


def ifft2(img: ComplexImage) -> ComplexImage:
    """Inverse of fft2 (also its adjoint, by unitarity)."""
    return ComplexImage(ifft2_raw(img.data))


@dataclass
class CgResult:
    image: ComplexImage
    converged: bool
    iterations: int
    rel_residual: float
    residual_history: list


def cg_solve_raw(apply_system, rhs: np.ndarray, tol: float = 1e-6, max_iter: int = 100):
    """Conjugate gradients for a Hermitian PSD linear map on complex arrays.

    Returns (x, converged, iters, rel_residual, history). The caller guarantees
    apply_system is Hermitian positive definite (here: A^H A + lambda I with
    lambda > 0). Residuals are monitored; non-finite values raise
    NumericalError.
    """
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return np.zeros_like(rhs), True, 0, 0.0, [0.0]
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = float(np.vdot(r, r).real)
    history = [np.sqrt(rs) / rhs_norm]
    it = 0
    while it < max_iter and np.sqrt(rs) / rhs_norm > tol:
        ap = apply_system(p)
        pap = float(np.vdot(p, ap).real)
        if not np.isfinite(pap) or pap <= 0.0:
            raise NumericalError(f"CG breakdown at iteration {it}: p^H A p = {pap}")
        alpha = rs / pap
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(np.vdot(r, r).real)
        if not np.isfinite(rs_new):
            raise NumericalError(f"CG produced non-finite residual at iteration {it}")
        p = r + (rs_new / rs) * p
        rs = rs_new
        it += 1
        history.append(np.sqrt(rs) / rhs_norm)
    return x, np.sqrt(rs) / rhs_norm <= tol, it, np.sqrt(rs) / rhs_norm, history


def cg_solve(apply_system, rhs: ComplexImage, tol: float = 1e-6, max_iter: int = 100) -> CgResult:
    """Solve apply_system(x) = rhs to relative residual tol.

    apply_system maps ComplexImage -> ComplexImage and must be Hermitian
    positive definite. An all-zero rhs returns the zero image immediately.
    """

    def apply_arr(a: np.ndarray) -> np.ndarray:
        return apply_system(ComplexImage(a)).data

    x, conv, it, res, hist = cg_solve_raw(apply_arr, rhs.data, tol=tol, max_iter=max_iter)
    return CgResult(ComplexImage(x), conv, it, res, hist)


def gaussian_image(stream: RngStream, h: int, w: int, std: float) -> ComplexImage:
    """Complex Gaussian image with per-entry E|.|^2 = std^2 (std=0 -> zeros)."""
    if std < 0:
        raise ValueError("std must be nonnegative")
    _check_dims(h, w)
    if std == 0.0:
        return ComplexImage.zeros(h, w)
    return ComplexImage(stream.complex_normal((h, w), std))


CIMG_MAGIC = b"CIMG1"


def save_cimg(path, img: ComplexImage) -> None:
    """Write the CIMG1 binary format: magic, u32 h, u32 w, f32 (re, im) pairs."""
    a = img.data
    with open(path, "wb") as f:
        f.write(CIMG_MAGIC)
        f.write(struct.pack("<II", a.shape[0], a.shape[1]))
        inter = np.empty(a.shape + (2,), dtype="<f4")
        inter[..., 0] = a.real
        inter[..., 1] = a.imag
        f.write(inter.tobytes())


def load_cimg(path) -> ComplexImage:
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != CIMG_MAGIC:
            raise ValueError(f"bad magic {magic!r} in {path}")
        h, w = struct.unpack("<II", f.read(8))
        raw = np.frombuffer(f.read(h * w * 8), dtype="<f4").reshape(h, w, 2)
        data = raw[..., 0].astype(np.float64) + 1j * raw[..., 1].astype(np.float64)
    return ComplexImage(data)
