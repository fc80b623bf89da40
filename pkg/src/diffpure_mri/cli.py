"""Command-line interface. One binary, subcommands for every pipeline stage:

    gen-data train-modl train-score fine-tune at-train attack purify
    pst-select evaluate verify-theorem

Global flags: --config <json>, --seed <u64>, --out <dir>, --threads <n>.
The env var DIFFPURE_LOG sets the log level (DEBUG/INFO/WARNING/ERROR).
Heavy imports happen after --threads is applied so BLAS pools obey it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys


def _setup(args) -> None:
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    level = os.environ.get("DIFFPURE_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(args) -> dict:
    if not args.config:
        return {}
    with open(args.config) as f:
        return json.load(f)


def _require_out(args) -> str:
    if not args.out:
        sys.exit("error: this command requires --out")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_loss_csv(path, losses) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, f"{v:.10g}"])


def _modl_cfg(cfg: dict):
    from .modl import ModlConfig

    m = cfg.get("modl", {})
    return ModlConfig(
        unroll_steps=int(m.get("unroll_steps", 6)),
        lam=float(m.get("lambda", 1.0)),
        cg_tol=float(m.get("cg_tol", 1e-6)),
        cg_max_iter=int(m.get("cg_max_iter", 100)),
    )


def _schedule(cfg: dict):
    from .diffusion import make_schedule

    s = cfg.get("schedule", {})
    return make_schedule(
        float(s.get("sigma_l", 0.01)), float(s.get("sigma_u", 378.0)), int(s.get("n_r", 500))
    )


def _load_score(path):
    from .diffusion import ScoreModel, make_schedule
    from .networks import load_netp

    params, meta = load_netp(path)
    s = meta["schedule"]
    sched = make_schedule(s["sigma_l"], s["sigma_u"], s["n_r"])
    return ScoreModel(sched, "learned", params,
                      sign_convention=meta.get("sign_convention", "standard"))


def cmd_gen_data(args) -> None:
    from .datasets import gen_dataset

    cfg = _load_config(args)
    out = _require_out(args)
    ds = gen_dataset(cfg, out, args.seed)
    print(f"wrote dataset to {out}: " +
          ", ".join(f"{k}={len(v)}" for k, v in ds.images.items()))


def cmd_train_modl(args) -> None:
    from .datasets import load_dataset
    from .modl import train
    from .networks import ConvNetArch, default_denoiser_arch, save_netp
    from .numerics import RngStream

    cfg = _load_config(args)
    out = _require_out(args)
    ds = load_dataset(cfg["dataset"])
    arch = ConvNetArch.from_dict(cfg["arch"]) if "arch" in cfg else default_denoiser_arch()
    result = train(
        ds.training_set("train"),
        _modl_cfg(cfg),
        epochs=int(cfg.get("epochs", 15)),
        lr=float(cfg.get("lr", 2e-3)),
        stream=RngStream(args.seed),
        arch=arch,
        batch_size=int(cfg.get("batch_size", 32)),
    )
    save_netp(os.path.join(out, "modl.netp"), result.params, {"seed": args.seed})
    _write_loss_csv(os.path.join(out, "modl_loss.csv"), result.losses)
    print(f"trained denoiser: final loss {result.losses[-1]:.6g}" if result.losses
          else "trained denoiser (0 steps)")


def cmd_train_score(args) -> None:
    from .datasets import load_dataset
    from .diffusion import train_score
    from .networks import ConvNetArch, default_score_arch, save_netp
    from .numerics import RngStream

    cfg = _load_config(args)
    out = _require_out(args)
    ds = load_dataset(cfg["dataset"])
    sched = _schedule(cfg)
    arch = ConvNetArch.from_dict(cfg["arch"]) if "arch" in cfg else default_score_arch()
    result = train_score(
        ds.images["train"],
        sched,
        arch=arch,
        epochs=int(cfg.get("epochs", 40)),
        lr=float(cfg.get("lr", 1e-3)),
        batch_size=int(cfg.get("batch_size", 32)),
        stream=RngStream(args.seed),
        sign_convention=cfg.get("sign_convention", "standard"),
    )
    meta = {
        "schedule": {"sigma_l": sched.sigma_l, "sigma_u": sched.sigma_u, "n_r": sched.n_r},
        "sign_convention": result.model.sign_convention,
        "seed": args.seed,
    }
    save_netp(os.path.join(out, "score.netp"), result.model.params, meta)
    _write_loss_csv(os.path.join(out, "score_loss.csv"), result.losses)
    print(f"trained score net: final loss {result.losses[-1]:.6g}" if result.losses
          else "trained score net (0 steps)")


def cmd_fine_tune(args) -> None:
    from .datasets import load_dataset
    from .modl import fine_tune
    from .networks import load_netp, save_netp
    from .numerics import RngStream

    cfg = _load_config(args)
    out = _require_out(args)
    ds = load_dataset(cfg["dataset"])
    params, _ = load_netp(cfg["modl_ckpt"])
    score = _load_score(cfg["score_ckpt"])
    result = fine_tune(
        params,
        ds.training_set("train"),
        score,
        pst=int(cfg["pst_step"]),
        sigma_ft=float(cfg.get("sigma_ft", 0.01)),
        cfg=_modl_cfg(cfg),
        epochs=int(cfg.get("epochs", 3)),
        lr=float(cfg.get("lr", 5e-4)),
        stream=RngStream(args.seed),
        batch_size=int(cfg.get("batch_size", 32)),
        m_r=int(cfg.get("purify", {}).get("m_r", 1)),
        snr=float(cfg.get("purify", {}).get("snr", 0.16)),
    )
    save_netp(os.path.join(out, "modl_ft.netp"), result.params,
              {"seed": args.seed, "pst_step": int(cfg["pst_step"])})
    _write_loss_csv(os.path.join(out, "modl_ft_loss.csv"), result.losses)
    print(f"fine-tuned denoiser: final loss {result.losses[-1]:.6g}")


def cmd_at_train(args) -> None:
    from .datasets import load_dataset
    from .modl import at_train
    from .networks import load_netp, save_netp
    from .numerics import RngStream
    from .perturbations import AttackConfig

    cfg = _load_config(args)
    out = _require_out(args)
    ds = load_dataset(cfg["dataset"])
    params, _ = load_netp(cfg["modl_ckpt"])
    a = cfg.get("attack", {})
    attack_cfg = AttackConfig(
        epsilon=float(a.get("epsilon", 0.004)),
        steps=int(a.get("steps", 10)),
        reference="ground_truth",
    )
    result = at_train(
        params,
        ds.training_set("train"),
        _modl_cfg(cfg),
        attack_cfg,
        epochs=int(cfg.get("epochs", 2)),
        lr=float(cfg.get("lr", 5e-4)),
        stream=RngStream(args.seed),
        batch_size=int(cfg.get("batch_size", 32)),
    )
    save_netp(os.path.join(out, "modl_at.netp"), result.params, {"seed": args.seed})
    _write_loss_csv(os.path.join(out, "modl_at_loss.csv"), result.losses)
    print(f"adversarially trained denoiser: final loss {result.losses[-1]:.6g}")


def cmd_attack(args) -> None:
    import csv

    import numpy as np

    from .datasets import load_dataset
    from .forward_model import _save_plane
    from .networks import load_netp
    from .numerics import RngStream
    from .perturbations import AttackConfig, momentum_core, pgd_core

    cfg = _load_config(args)
    out = _require_out(args)
    ds = load_dataset(cfg["dataset"])
    params, _ = load_netp(cfg["modl_ckpt"])
    split = cfg.get("split", "test")
    xs, ys = ds.stacked(split)
    a = cfg.get("attack", {})
    kind = a.get("kind", "pgd")
    acfg = AttackConfig(epsilon=float(a.get("epsilon", 0.004)), steps=int(a.get("steps", 30)))
    core = momentum_core if kind == "momentum" else pgd_core
    deltas, losses = core(params, ds.op, ys, acfg, RngStream(args.seed), _modl_cfg(cfg))
    ddir = os.path.join(out, "deltas")
    os.makedirs(ddir, exist_ok=True)
    for i in range(deltas.shape[0]):
        for c in range(deltas.shape[1]):
            _save_plane(os.path.join(ddir, f"{split}_{i:04d}_coil{c}.cimg"), deltas[i, c])
    manifest = {
        "kind": kind, "epsilon": acfg.epsilon, "steps": acfg.steps, "alpha": acfg.alpha,
        "seed": args.seed, "split": split, "count": int(deltas.shape[0]),
        "num_coils": int(deltas.shape[1]),
        "mean_achieved_loss": float(np.mean(losses)),
    }
    with open(os.path.join(out, "attack.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    with open(os.path.join(out, "attack_summary.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_index", "achieved_loss", "linf"])
        for i, lv in enumerate(losses):
            linf = max(np.abs(deltas[i].real).max(), np.abs(deltas[i].imag).max())
            w.writerow([i, f"{lv:.10g}", f"{linf:.10g}"])
    print(f"wrote {deltas.shape[0]} perturbations; mean loss {np.mean(losses):.6g}")


def cmd_purify(args) -> None:
    import numpy as np

    from .datasets import load_dataset
    from .forward_model import _load_plane
    from .numerics import ComplexImage, RngStream, save_cimg
    from .purification import PurifyConfig, purify_core

    cfg = _load_config(args)
    out = _require_out(args)
    ds = load_dataset(cfg["dataset"])
    score = _load_score(cfg["score_ckpt"])
    split = cfg.get("split", "test")
    xs, ys = ds.stacked(split)
    if "deltas" in cfg:
        ddir = os.path.join(cfg["deltas"], "deltas")
        for i in range(ys.shape[0]):
            for c in range(ys.shape[1]):
                ys[i, c] += _load_plane(os.path.join(ddir, f"{split}_{i:04d}_coil{c}.cimg"))
    p = cfg.get("purify", {})
    pcfg = PurifyConfig(pst_step=int(p.get("pst_step", 150)), m_r=int(p.get("m_r", 1)),
                        snr=float(p.get("snr", 0.16)))
    z = purify_core(score, ys, ds.op, pcfg, RngStream(args.seed))
    pdir = os.path.join(out, "purified")
    os.makedirs(pdir, exist_ok=True)
    for i in range(z.shape[0]):
        save_cimg(os.path.join(pdir, f"{split}_{i:04d}.cimg"), ComplexImage(np.ascontiguousarray(z[i])))
    print(f"purified {z.shape[0]} images at switching step {pcfg.pst_step}")


def cmd_pst_select(args) -> None:
    import csv
    import glob

    from .numerics import RngStream, load_cimg
    from .purification import SampleSets, select_pst

    cfg = _load_config(args)
    out = _require_out(args)
    clean = [load_cimg(p) for p in sorted(glob.glob(os.path.join(cfg["clean_dir"], "*.cimg")))]
    pert = [load_cimg(p) for p in sorted(glob.glob(os.path.join(cfg["perturbed_dir"], "*.cimg")))]
    sel = select_pst(
        SampleSets(clean, pert),
        _schedule(cfg),
        tau=float(cfg.get("tau", 1e-3)),
        stream=RngStream(args.seed),
        bandwidth_mode=cfg.get("bandwidth_mode", "pixel-mean"),
        shared_noise=bool(cfg.get("shared_noise", True)),
    )
    with open(os.path.join(out, "mmd_trace.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "mmd"])
        for i, v in sel.trajectory:
            w.writerow([i, f"{v:.10g}"])
    with open(os.path.join(out, "pst_selection.json"), "w") as f:
        json.dump({"step": sel.step, "found": sel.found, "bandwidth": sel.bandwidth,
                   "tau": float(cfg.get("tau", 1e-3))}, f, indent=1, sort_keys=True)
    print(f"selected switching step {sel.step} (found={sel.found}, bandwidth={sel.bandwidth:.6g})")


def cmd_evaluate(args) -> None:
    from .datasets import load_dataset
    from .harness import Bench, run_experiment
    from .networks import load_netp
    from .purification import PurifyConfig

    cfg = _load_config(args)
    out = _require_out(args)
    ds = load_dataset(cfg["dataset"])
    ck = cfg.get("checkpoints", {})
    vanilla, _ = load_netp(ck["vanilla"])
    at = load_netp(ck["at"])[0] if "at" in ck else None
    ft = load_netp(ck["ft"])[0] if "ft" in ck else None
    score = _load_score(ck["score"]) if "score" in ck else None
    xs, ys = ds.stacked(cfg.get("split", "test"))
    p = cfg.get("purify", {})
    bench = Bench(
        op=ds.op, test_xs=xs, test_ys=ys, vanilla=vanilla, at=at, ft=ft, score=score,
        modl_cfg=_modl_cfg(cfg),
        purify_cfg=PurifyConfig(pst_step=int(p.get("pst_step", 150)),
                                m_r=int(p.get("m_r", 1)), snr=float(p.get("snr", 0.16))),
        rs_noise_std=float(cfg.get("rs", {}).get("noise_std", 0.01)),
        rs_num_samples=int(cfg.get("rs", {}).get("num_samples", 10)),
        seed=args.seed,
    )
    results = run_experiment(bench, cfg.get("scenarios", []), cfg.get("sweeps", []), out)
    print(f"evaluated {len(results)} scenarios -> {out}")


def cmd_verify_theorem(args) -> None:
    from .theory_report import run_theorem_checks

    cfg = _load_config(args)
    out = _require_out(args)
    ok = run_theorem_checks(cfg, out, args.seed)
    if not ok:
        sys.exit(1)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-modl": cmd_train_modl,
    "train-score": cmd_train_score,
    "fine-tune": cmd_fine_tune,
    "at-train": cmd_at_train,
    "attack": cmd_attack,
    "purify": cmd_purify,
    "pst-select": cmd_pst_select,
    "evaluate": cmd_evaluate,
    "verify-theorem": cmd_verify_theorem,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffpure-mri",
        description="Diffusion-purification robustification for unrolled MRI reconstruction",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=0, help="master seed (u64)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="BLAS/omp thread cap")
    return parser


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    _setup(args)
    COMMANDS[args.command](args)


if __name__ == "__main__":
    main()
