"""Synthetic complex-valued phantoms: random ellipse superpositions with
smooth random phase, scaled to unit peak magnitude. A family mode draws one
base layout and jitters it per image, producing the highly-correlated sets the
switching-step selection experiment needs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .numerics import ComplexImage, RngStream, _check_dims


@dataclass(frozen=True)
class PhantomSpec:
    count: int
    height: int = 32
    width: int = 32
    ellipses: tuple = (3, 8)  # inclusive range of ellipse counts
    intensity: tuple = (0.3, 1.0)
    phase_scale: float = 6.0  # smoothing length (pixels) of the random phase
    seed: int = 0
    family_jitter: float | None = None

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("count must be >= 1")
        _check_dims(self.height, self.width)


def _ellipse_params(stream: RngStream, n: int) -> dict:
    return {
        "cy": stream.uniform(-0.55, 0.55, n),
        "cx": stream.uniform(-0.55, 0.55, n),
        "a": stream.uniform(0.12, 0.55, n),
        "b": stream.uniform(0.12, 0.55, n),
        "ang": stream.uniform(0, np.pi, n),
    }


def _raster(spec: PhantomSpec, pars: dict, vals: np.ndarray) -> np.ndarray:
    yy, xx = np.meshgrid(
        np.linspace(-1, 1, spec.height), np.linspace(-1, 1, spec.width), indexing="ij"
    )
    img = np.zeros((spec.height, spec.width))
    for k in range(len(vals)):
        ca, sa = np.cos(pars["ang"][k]), np.sin(pars["ang"][k])
        xr = (xx - pars["cx"][k]) * ca + (yy - pars["cy"][k]) * sa
        yr = -(xx - pars["cx"][k]) * sa + (yy - pars["cy"][k]) * ca
        img += vals[k] * ((xr / pars["a"][k]) ** 2 + (yr / pars["b"][k]) ** 2 <= 1.0)
    return img


def _smooth_phase(spec: PhantomSpec, stream: RngStream) -> np.ndarray:
    noise = stream.normal((spec.height, spec.width))
    phase = ndimage.gaussian_filter(noise, sigma=spec.phase_scale, mode="wrap")
    rms = np.sqrt(np.mean(phase**2))
    if rms > 0:
        phase = phase / rms
    return 0.8 * phase


def gen_phantoms(spec: PhantomSpec) -> list:
    """Deterministic phantom set for the given spec (bit-identical per seed)."""
    master = RngStream(spec.seed)
    base = base_vals = None
    if spec.family_jitter is not None:
        fam = master.substream(0)
        n = int(fam.integers(spec.ellipses[0], spec.ellipses[1] + 1))
        base = _ellipse_params(fam, n)
        base_vals = fam.uniform(spec.intensity[0], spec.intensity[1], n)
    out = []
    for i in range(spec.count):
        s = master.substream(1, i)
        if base is None:
            n = int(s.integers(spec.ellipses[0], spec.ellipses[1] + 1))
            pars = _ellipse_params(s, n)
            vals = s.uniform(spec.intensity[0], spec.intensity[1], n)
        else:
            j = spec.family_jitter
            n = len(base_vals)
            pars = {
                "cy": base["cy"] + j * s.uniform(-0.1, 0.1, n),
                "cx": base["cx"] + j * s.uniform(-0.1, 0.1, n),
                "a": np.maximum(base["a"] * (1 + j * s.uniform(-0.2, 0.2, n)), 0.05),
                "b": np.maximum(base["b"] * (1 + j * s.uniform(-0.2, 0.2, n)), 0.05),
                "ang": base["ang"] + j * s.uniform(-0.2, 0.2, n),
            }
            vals = base_vals * (1 + j * s.uniform(-0.2, 0.2, n))
        mag = _raster(spec, pars, vals)
        peak = mag.max()
        if peak == 0.0:
            mag = np.full((spec.height, spec.width), 0.05)
        else:
            mag = mag / peak
        phase = _smooth_phase(spec, s.substream(7))
        out.append(ComplexImage(mag * np.exp(1j * phase)))
    return out
