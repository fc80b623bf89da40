"""Dataset generation and on-disk layout.

A dataset directory holds:
    dataset.json            generation config and split sizes
    images/<split>_NNNN.cimg  ground-truth complex images (CIMG1)
    mask.csv                sampling mask (kept columns + header)
    coils_<c>.cimg          coil sensitivity maps (CIMG1)
    operator.json           dims, coil count, fingerprint

Measurements are always re-derived as y = A x, so checkpoints and attacks can
share one dataset directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .forward_model import (
    CoilSensitivities,
    ForwardOperator,
    KSpaceMeasurements,
    forward,
    load_mask_csv,
    make_cartesian_mask,
    make_coil_maps,
    make_operator,
    save_mask_csv,
)
from .modl import TrainingSet
from .numerics import ComplexImage, RngStream, load_cimg, save_cimg
from .phantoms import PhantomSpec, gen_phantoms

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    images: dict  # split -> list[ComplexImage]
    op: ForwardOperator
    config: dict

    def measurements(self, split: str) -> list:
        return [forward(self.op, x) for x in self.images[split]]

    def training_set(self, split: str = "train") -> TrainingSet:
        return TrainingSet(self.images[split], self.measurements(split), self.op)

    def stacked(self, split: str):
        xs = np.stack([x.data for x in self.images[split]])
        ys = np.stack([forward(self.op, x).data for x in self.images[split]])
        return xs, ys


def gen_dataset(cfg: dict, out_dir, seed: int) -> Dataset:
    """Generate phantoms and the acquisition operator; write the directory."""
    h = int(cfg.get("height", 32))
    w = int(cfg.get("width", 32))
    counts = {s: int(cfg.get(s, n)) for s, n in (("train", 300), ("val", 20), ("test", 64))}
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    images = {}
    for si, split in enumerate(SPLITS):
        spec = PhantomSpec(
            count=counts[split],
            height=h,
            width=w,
            ellipses=tuple(cfg.get("ellipses", (3, 8))),
            intensity=tuple(cfg.get("intensity", (0.3, 1.0))),
            phase_scale=float(cfg.get("phase_scale", 6.0)),
            seed=seed * 1000 + si,
            family_jitter=cfg.get("family_jitter"),
        )
        images[split] = gen_phantoms(spec)
        for i, img in enumerate(images[split]):
            save_cimg(os.path.join(out_dir, "images", f"{split}_{i:04d}.cimg"), img)
    stream = RngStream(seed)
    mask = make_cartesian_mask(
        h, w,
        float(cfg.get("acceleration", 4.0)),
        int(cfg["acs_width"]) if "acs_width" in cfg else None,
        0.0,
        stream.substream(1),
    )
    coils = make_coil_maps(h, w, int(cfg.get("num_coils", 2)), stream.substream(2))
    op = make_operator(mask, coils)
    save_mask_csv(os.path.join(out_dir, "mask.csv"), mask, seed)
    for c in range(coils.num_coils):
        save_cimg(os.path.join(out_dir, f"coils_{c}.cimg"), ComplexImage(coils.maps[c]))
    with open(os.path.join(out_dir, "operator.json"), "w") as f:
        json.dump(
            {
                "height": h,
                "width": w,
                "num_coils": coils.num_coils,
                "fingerprint": op.fingerprint,
            },
            f, indent=1, sort_keys=True,
        )
    meta = dict(cfg)
    meta.update({"height": h, "width": w, "seed": seed, "counts": counts})
    with open(os.path.join(out_dir, "dataset.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return Dataset(images, op, meta)


def load_dataset(path) -> Dataset:
    with open(os.path.join(path, "dataset.json")) as f:
        meta = json.load(f)
    mask = load_mask_csv(os.path.join(path, "mask.csv"))
    maps = []
    c = 0
    while os.path.exists(os.path.join(path, f"coils_{c}.cimg")):
        maps.append(load_cimg(os.path.join(path, f"coils_{c}.cimg")).data)
        c += 1
    arr = np.stack(maps)
    # re-normalize: CIMG1 stores f32, the coil invariant is re-established exactly
    arr = arr / np.sqrt(np.sum(np.abs(arr) ** 2, axis=0))
    op = make_operator(mask, CoilSensitivities(arr))
    images = {}
    for split in SPLITS:
        images[split] = []
        i = 0
        while os.path.exists(os.path.join(path, "images", f"{split}_{i:04d}.cimg")):
            images[split].append(load_cimg(os.path.join(path, "images", f"{split}_{i:04d}.cimg")))
            i += 1
    return Dataset(images, op, meta)
