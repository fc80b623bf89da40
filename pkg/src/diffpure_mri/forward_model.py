"""Undersampled multi-coil Fourier operator: mask construction, coil maps,
forward/adjoint application, operator perturbations, and the two
data-consistency updates used by unrolled reconstruction and by the sampler.

The operator is A = M F S: per-coil sensitivity weighting S, unitary 2-D FFT F
(DC at index (0, 0), no fftshift), and column subsampling M along the
phase-encode (width) axis. "Center" columns are centered around DC in the
shifted view, i.e. wrap around index 0 in the storage order used here.

Functions suffixed _t are differentiable: they accept engine Nodes or plain
arrays and support arbitrary leading batch axes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from .numerics import ComplexImage, RngStream, cg_solve_raw, fft2_raw, ifft2_raw, save_cimg, load_cimg


@dataclass(frozen=True)
class SamplingMask:
    height: int
    width: int
    kept_columns: tuple  # sorted unshifted column indices
    acceleration: float
    acs_width: int

    def __post_init__(self) -> None:
        cols = tuple(sorted(int(c) for c in self.kept_columns))
        object.__setattr__(self, "kept_columns", cols)
        if len(set(cols)) != len(cols):
            raise ValueError("duplicate kept columns")
        if cols and (cols[0] < 0 or cols[-1] >= self.width):
            raise ValueError("kept column out of range")
        frac = len(cols) / self.width
        target = 1.0 / self.acceleration
        if not (0.9 * target <= frac <= 1.1 * target):
            raise ValueError(
                f"kept fraction {frac:.3f} violates acceleration {self.acceleration} band"
            )
        missing = set(_acs_columns(self.width, self.acs_width)) - set(cols)
        if missing:
            raise ValueError(f"ACS columns {sorted(missing)} not kept")

    @property
    def num_kept(self) -> int:
        return len(self.kept_columns)

    def cols_array(self) -> np.ndarray:
        return np.asarray(self.kept_columns, dtype=np.int64)


@dataclass(frozen=True)
class CoilSensitivities:
    maps: np.ndarray  # (num_coils, h, w) complex, per-pixel sum |S_c|^2 = 1

    def __post_init__(self) -> None:
        m = np.asarray(self.maps, dtype=np.complex128)
        if m.ndim != 3:
            raise ValueError("coil maps must be (C, h, w)")
        ssq = np.sum(np.abs(m) ** 2, axis=0)
        if np.max(np.abs(ssq - 1.0)) > 1e-6:
            raise ValueError("coil maps are not normalized: sum_c |S_c|^2 != 1")
        object.__setattr__(self, "maps", m)

    @property
    def num_coils(self) -> int:
        return self.maps.shape[0]


@dataclass(frozen=True)
class ForwardOperator:
    mask: SamplingMask
    coils: CoilSensitivities
    fingerprint: str = field(init=False)

    def __post_init__(self) -> None:
        if self.coils.maps.shape[1:] != (self.mask.height, self.mask.width):
            raise ValueError("mask and coil maps dimensions differ")
        h = hashlib.sha256()
        h.update(np.asarray(self.mask.kept_columns, dtype=np.int64).tobytes())
        h.update(self.coils.maps.tobytes())
        object.__setattr__(self, "fingerprint", h.hexdigest()[:16])

    @property
    def height(self) -> int:
        return self.mask.height

    @property
    def width(self) -> int:
        return self.mask.width

    @property
    def num_coils(self) -> int:
        return self.coils.num_coils


@dataclass(frozen=True)
class KSpaceMeasurements:
    """Per-coil complex samples over kept columns: data shape (C, h, k)."""

    data: np.ndarray
    fingerprint: str

    def __post_init__(self) -> None:
        d = np.asarray(self.data, dtype=np.complex128)
        if d.ndim != 3:
            raise ValueError("measurements must be (C, h, k)")
        object.__setattr__(self, "data", d)


def _acs_columns(w: int, acs_width: int) -> list[int]:
    """ACS columns centered on DC: shifted-view center mapped to storage order."""
    start = w // 2 - acs_width // 2
    return sorted(((c - w // 2) % w) for c in range(start, start + acs_width))


def _signed_freq(cols: np.ndarray, w: int) -> np.ndarray:
    return np.where(cols <= w // 2, cols, cols - w)


def make_cartesian_mask(
    h: int,
    w: int,
    acceleration: float,
    acs_width: int | None = None,
    shift_pct: float = 0.0,
    stream: RngStream | None = None,
    equispaced: bool = False,
) -> SamplingMask:
    """Cartesian column mask: ACS center block plus random (or equispaced)
    non-center columns up to w/acceleration total; optional relocation of a
    percentage of the non-ACS columns to unkept high-frequency positions.
    """
    if acceleration < 1:
        raise ValueError("acceleration must be >= 1")
    if not (0 <= shift_pct <= 100):
        raise ValueError("shift_pct must be in [0, 100]")
    budget = int(round(w / acceleration))
    if acs_width is None:
        acs_width = max(4, w // 16)
    if acs_width > budget:
        raise ValueError(f"acs_width {acs_width} exceeds column budget {budget}")
    acs = _acs_columns(w, acs_width)
    pool = np.array(sorted(set(range(w)) - set(acs)), dtype=np.int64)
    n_extra = budget - len(acs)
    if n_extra > len(pool):
        raise ValueError("column budget infeasible")
    if n_extra == 0:
        extra = np.array([], dtype=np.int64)
    elif n_extra == len(pool):
        extra = pool
    elif equispaced:
        idx = np.linspace(0, len(pool) - 1, n_extra).round().astype(np.int64)
        extra = pool[idx]
    else:
        if stream is None:
            raise ValueError("random mask construction requires a stream")
        extra = np.sort(stream.choice(pool, size=n_extra, replace=False))
    mask = SamplingMask(h, w, tuple(acs) + tuple(int(c) for c in extra), acceleration, acs_width)
    if shift_pct > 0:
        mask = shift_mask(mask, shift_pct, stream)
    return mask


def shift_mask(mask: SamplingMask, shift_pct: float, stream: RngStream) -> SamplingMask:
    """Relocate shift_pct of the non-ACS kept columns to currently-unkept
    positions of highest absolute spatial frequency. ACS columns are exempt.
    """
    if not (0 <= shift_pct <= 100):
        raise ValueError("shift_pct must be in [0, 100]")
    w = mask.width
    acs = set(_acs_columns(w, mask.acs_width))
    movable = np.array(sorted(set(mask.kept_columns) - acs), dtype=np.int64)
    n_unkept = w - mask.num_kept
    n_shift = min(int(round(shift_pct / 100.0 * len(movable))), n_unkept)
    if n_shift == 0:
        return mask
    moved = stream.choice(movable, size=n_shift, replace=False)
    unkept = np.array(sorted(set(range(w)) - set(mask.kept_columns)), dtype=np.int64)
    order = np.lexsort((unkept, -np.abs(_signed_freq(unkept, w))))
    targets = unkept[order][:n_shift]
    new_cols = (set(mask.kept_columns) - set(int(c) for c in moved)) | set(int(c) for c in targets)
    return SamplingMask(mask.height, w, tuple(sorted(new_cols)), mask.acceleration, mask.acs_width)


def make_coil_maps(h: int, w: int, num_coils: int, stream: RngStream) -> CoilSensitivities:
    """Smooth synthetic sensitivities: Gaussian-bump magnitudes with distinct
    centers and mild linear phases, normalized so sum_c |S_c|^2 = 1 per pixel.
    """
    if num_coils < 1:
        raise ValueError("num_coils must be >= 1")
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    maps = np.empty((num_coils, h, w), dtype=np.complex128)
    radius = 0.6
    rho = 0.9
    for c in range(num_coils):
        ang = 2 * np.pi * c / num_coils + stream.uniform(-0.2, 0.2, ())
        cy, cx = radius * np.sin(ang), radius * np.cos(ang)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rho**2)) + 0.05
        slope = stream.uniform(-0.5, 0.5, (2,))
        phase = slope[0] * xx + slope[1] * yy
        maps[c] = mag * np.exp(1j * phase)
    norm = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return CoilSensitivities(maps / norm)


def make_operator(mask: SamplingMask, coils: CoilSensitivities) -> ForwardOperator:
    return ForwardOperator(mask, coils)


# ---------------------------------------------------------------------------
# application (differentiable array forms + spec-typed wrappers)

def forward_t(op: ForwardOperator, x):
    """A x for x of shape (..., h, w) -> (..., C, h, k)."""
    per_coil = eg.coil_expand(x, op.coils.maps)
    ksp = eg.fft2(per_coil)
    return eg.restrict_cols(ksp, op.mask.cols_array())


def adjoint_t(op: ForwardOperator, y):
    """A^H y for y of shape (..., C, h, k) -> (..., h, w)."""
    full = eg.zerofill_cols(y, op.mask.cols_array(), op.width)
    imgs = eg.ifft2(full)
    return eg.coil_combine(imgs, op.coils.maps)


def normal_t(op: ForwardOperator, x, lam: float):
    """(A^H A + lam I) x."""
    return eg.add(adjoint_t(op, forward_t(op, x)), eg.scale(x, lam))


def forward(op: ForwardOperator, x: ComplexImage) -> KSpaceMeasurements:
    """Restrict fft2(S_c * x) to the kept columns, per coil."""
    if x.shape != (op.height, op.width):
        raise ValueError(f"image shape {x.shape} does not match operator {op.height}x{op.width}")
    return KSpaceMeasurements(forward_t(op, x.data), op.fingerprint)


def adjoint(op: ForwardOperator, y: KSpaceMeasurements) -> ComplexImage:
    """sum_c conj(S_c) * ifft2(zero-filled y_c)."""
    if y.fingerprint != op.fingerprint:
        raise ValueError("measurement fingerprint does not match operator")
    return ComplexImage(adjoint_t(op, y.data))


def dc_project_t(op: ForwardOperator, y_data, z):
    """z + A^H (y - A z); y_data is (..., C, h, k) constant or Node."""
    residual = eg.sub(y_data, forward_t(op, z))
    return eg.add(z, adjoint_t(op, residual))


def dc_project(op: ForwardOperator, y: KSpaceMeasurements, z: ComplexImage) -> ComplexImage:
    if y.fingerprint != op.fingerprint:
        raise ValueError("measurement fingerprint does not match operator")
    if z.shape != (op.height, op.width):
        raise ValueError("image dims do not match operator")
    return ComplexImage(dc_project_t(op, y.data, z.data))


def dc_solve_t(op: ForwardOperator, anchor, z, lam: float, tol: float = 1e-6, max_iter: int = 100):
    """Differentiable regularized DC solve: argmin_x ||Ax-y||^2 + lam ||x-z||^2
    phrased as (A^H A + lam I)^{-1} (anchor + lam z), anchor in image domain.

    Runs CG through engine primitives; backprop follows the recorded iterates.
    Works on plain arrays too, in which case it is a fast eager solve.
    """
    rhs = eg.add(anchor, eg.scale(z, lam))
    if not isinstance(rhs, eg.Node):
        x, conv, it, res, hist = cg_solve_raw(
            lambda a: normal_t(op, a, lam), rhs, tol=tol, max_iter=max_iter
        )
        return x
    # taped CG on the recorded graph
    rhs_norm = float(np.linalg.norm(rhs.value))
    if rhs_norm == 0.0:
        return eg.scale(rhs, 0.0)
    x = eg.scale(rhs, 0.0)
    r = rhs
    p = r
    rs = eg.sum_abs2(r)
    it = 0
    while it < max_iter and np.sqrt(eg._val(rs)) / rhs_norm > tol:
        ap = normal_t(op, p, lam)
        pap = eg.real_inner(p, ap)
        alpha = eg.div_ss(rs, pap)
        x = eg.add(x, eg.scale_var(p, alpha))
        r = eg.sub(r, eg.scale_var(ap, alpha))
        rs_new = eg.sum_abs2(r)
        beta = eg.div_ss(rs_new, rs)
        p = eg.add(r, eg.scale_var(p, beta))
        rs = rs_new
        it += 1
    return x


def dc_solve(
    op: ForwardOperator,
    anchor: ComplexImage,
    z: ComplexImage,
    lam: float,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> ComplexImage:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    out = dc_solve_t(op, anchor.data, z.data, lam, tol=tol, max_iter=max_iter)
    return ComplexImage(out)


def perturb_operator(
    op: ForwardOperator,
    new_acceleration: float | None = None,
    shift_pct: float | None = None,
    stream: RngStream | None = None,
) -> ForwardOperator:
    """Train/test operator mismatch: regenerate the mask at a new acceleration,
    or relocate a percentage of non-ACS columns. Coil maps are unchanged.
    """
    if (new_acceleration is None) == (shift_pct is None):
        raise ValueError("specify exactly one of new_acceleration or shift_pct")
    if new_acceleration is not None:
        mask = make_cartesian_mask(
            op.height, op.width, new_acceleration, op.mask.acs_width, 0.0, stream
        )
    else:
        mask = shift_mask(op.mask, shift_pct, stream)
    return ForwardOperator(mask, op.coils)


# ---------------------------------------------------------------------------
# serialization

def save_mask_csv(path, mask: SamplingMask, seed: int | None = None) -> None:
    with open(path, "w", newline="") as f:
        f.write("h,w,acceleration,acs_width,seed\n")
        f.write(f"{mask.height},{mask.width},{mask.acceleration},{mask.acs_width},{seed if seed is not None else ''}\n")
        f.write("kept_column\n")
        for c in mask.kept_columns:
            f.write(f"{c}\n")


def load_mask_csv(path) -> SamplingMask:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    h, w, acc, acs, _seed = (lines[1].split(",") + [""])[:5]
    cols = [int(c) for c in lines[3:]]
    return SamplingMask(int(h), int(w), tuple(cols), float(acc), int(acs))


def save_measurements(dirpath, name: str, y: KSpaceMeasurements, op: ForwardOperator) -> None:
    """One CIMG1 per coil plus a sidecar JSON manifest."""
    import os

    c, h, k = y.data.shape
    # kept-column planes are h x k; pad is not needed because CIMG1 stores raw dims
    for ci in range(c):
        plane = y.data[ci]
        path = os.path.join(dirpath, f"{name}_coil{ci}.cimg")
        _save_plane(path, plane)
    manifest = {
        "name": name,
        "num_coils": c,
        "height": h,
        "kept": k,
        "operator_fingerprint": op.fingerprint,
    }
    with open(os.path.join(dirpath, f"{name}.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def _save_plane(path, plane: np.ndarray) -> None:
    import struct

    with open(path, "wb") as f:
        f.write(b"CIMG1")
        f.write(struct.pack("<II", plane.shape[0], plane.shape[1]))
        inter = np.empty(plane.shape + (2,), dtype="<f4")
        inter[..., 0] = plane.real
        inter[..., 1] = plane.imag
        f.write(inter.tobytes())


def _load_plane(path) -> np.ndarray:
    import struct

    with open(path, "rb") as f:
        if f.read(5) != b"CIMG1":
            raise ValueError(f"bad magic in {path}")
        h, w = struct.unpack("<II", f.read(8))
        raw = np.frombuffer(f.read(h * w * 8), dtype="<f4").reshape(h, w, 2)
        return raw[..., 0].astype(np.float64) + 1j * raw[..., 1].astype(np.float64)


def load_measurements(dirpath, name: str) -> KSpaceMeasurements:
    import os

    with open(os.path.join(dirpath, f"{name}.json")) as f:
        manifest = json.load(f)
    planes = [
        _load_plane(os.path.join(dirpath, f"{name}_coil{ci}.cimg"))
        for ci in range(manifest["num_coils"])
    ]
    return KSpaceMeasurements(np.stack(planes), manifest["operator_fingerprint"])
