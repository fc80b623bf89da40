"""Experiment orchestration: named perturbation scenarios evaluated over a
test set for each reconstruction method, with per-image reports, a
delta-vs-baseline summary table, and sweep curves as plain CSV.

Methods:
    vanilla  plain unrolled reconstruction with the pretrained denoiser
    at       the adversarially-trained denoiser
    rs       randomized smoothing around the pretrained denoiser
    dp       purification followed by the purified-anchor unroll (pretrained)
    dp_ft    purification followed by the purified-anchor unroll (fine-tuned)

Worst-case scenarios attack the denoiser actually deployed by the method
(dp attacks the pretrained net, dp_ft the fine-tuned one); the end-to-end
variant differentiates through purification with frozen noise.

All randomness is derived from one master seed plus stable string tags, so a
repeated run writes byte-identical outputs.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import networks as nn
from .diffusion import ScoreModel
from .forward_model import ForwardOperator, forward_t, perturb_operator
from .metrics import psnr, ssim
from .modl import ModlConfig, reconstruct_core, reconstruct_purified_core, rs_reconstruct_core
from .numerics import ComplexImage, RngStream
from .perturbations import AttackConfig, e2e_core, momentum_core, pgd_core
from .purification import PurifyConfig, purify_core

log = logging.getLogger(__name__)

METHODS = ("vanilla", "at", "rs", "dp", "dp_ft")


def tag_stream(seed: int, *tags) -> RngStream:
    """Deterministic stream from a master seed and stable string/int tags."""
    idx = 0
    base = RngStream(seed)
    parts = []
    for t in tags:
        if isinstance(t, str):
            digest = hashlib.sha256(t.encode()).digest()
            parts.append(int.from_bytes(digest[:8], "little"))
        else:
            parts.append(int(t))
    return base.substream(*parts)


@dataclass
class EvalReport:
    scenario: str
    method: str
    psnr_db: list
    ssim_val: list

    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db))

    def std_psnr(self) -> float:
        return float(np.std(self.psnr_db))

    def median_psnr(self) -> float:
        return float(np.median(self.psnr_db))

    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_val))

    def std_ssim(self) -> float:
        return float(np.std(self.ssim_val))


@dataclass
class Bench:
    """Everything a scenario needs: operator, test data, trained models."""

    op: ForwardOperator
    test_xs: np.ndarray  # (B, h, w) ground truth
    test_ys: np.ndarray  # (B, C, h, k) clean measurements
    vanilla: nn.NetworkParams
    at: nn.NetworkParams | None = None
    ft: nn.NetworkParams | None = None
    score: ScoreModel | None = None
    modl_cfg: ModlConfig = field(default_factory=ModlConfig)
    purify_cfg: PurifyConfig = field(default_factory=PurifyConfig)
    rs_noise_std: float = 0.01
    rs_num_samples: int = 10
    attack_steps: int = 30
    seed: int = 0
    _attack_cache: dict = field(default_factory=dict, repr=False)

    def attack_params_for(self, method: str) -> tuple[str, nn.NetworkParams]:
        if method == "at":
            if self.at is None:
                raise ValueError("no adversarially-trained checkpoint in bench")
            return "at", self.at
        if method == "dp_ft":
            if self.ft is None:
                raise ValueError("no fine-tuned checkpoint in bench")
            return "ft", self.ft
        return "vanilla", self.vanilla

    def get_attack(self, target: str, params, epsilon: float, steps: int,
                   kind: str = "pgd") -> np.ndarray:
        key = (target, round(float(epsilon), 9), int(steps), kind)
        if key not in self._attack_cache:
            cfg = AttackConfig(epsilon=epsilon, steps=steps)
            stream = tag_stream(self.seed, "attack", kind, target, f"{epsilon:.9f}", steps)
            core = momentum_core if kind == "momentum" else pgd_core
            log.info("attack %s: target=%s eps=%g steps=%d", kind, target, epsilon, steps)
            deltas, _ = core(params, self.op, self.test_ys, cfg, stream, self.modl_cfg)
            self._attack_cache[key] = deltas
        return self._attack_cache[key]


def _reconstruct_method(bench: Bench, method: str, op: ForwardOperator, ys: np.ndarray,
                        scen_name: str, pst_override: int | None = None) -> np.ndarray:
    if method == "vanilla":
        return reconstruct_core(bench.vanilla, op, ys, bench.modl_cfg)
    if method == "at":
        return reconstruct_core(bench.at, op, ys, bench.modl_cfg)
    if method == "rs":
        stream = tag_stream(bench.seed, "rs", scen_name)
        return rs_reconstruct_core(bench.vanilla, op, ys, bench.modl_cfg,
                                   bench.rs_noise_std, bench.rs_num_samples, stream)
    if method in ("dp", "dp_ft"):
        pcfg = bench.purify_cfg
        if pst_override is not None:
            pcfg = PurifyConfig(pst_step=pst_override, m_r=pcfg.m_r, snr=pcfg.snr)
        stream = tag_stream(bench.seed, "purify", scen_name, method, pcfg.pst_step)
        z_pur = purify_core(bench.score, ys, op, pcfg, stream)
        if method == "dp_ft":
            # purified-anchor unroll, the variant the fine-tuning trained through
            return reconstruct_purified_core(bench.ft, op, z_pur, bench.modl_cfg)
        # without fine-tuning: purified image initializes the standard unroll
        return reconstruct_core(bench.vanilla, op, ys, bench.modl_cfg, x0=z_pur)
    raise ValueError(f"unknown method {method}")


def _scenario_inputs(bench: Bench, scen: dict, method: str):
    """Resolve (operator, measurements, pst_override) for one scenario+method."""
    kind = scen.get("kind", "none")
    name = scen["name"]
    if kind == "none":
        return bench.op, bench.test_ys, None
    if kind == "gaussian":
        stream = tag_stream(bench.seed, "noise", name)
        noise = stream.complex_normal(bench.test_ys.shape, np.sqrt(scen["variance"]))
        return bench.op, bench.test_ys + noise, None
    if kind in ("pgd", "momentum"):
        target, params = bench.attack_params_for(method)
        deltas = bench.get_attack(target, params, scen["epsilon"],
                                  scen.get("steps", bench.attack_steps), kind)
        return bench.op, bench.test_ys + deltas, None
    if kind == "pgd_e2e":
        key = ("e2e", round(float(scen["epsilon"]), 9), scen.get("steps", bench.attack_steps))
        if key not in bench._attack_cache:
            cfg = AttackConfig(epsilon=scen["epsilon"], steps=key[2], target="end-to-end")
            stream = tag_stream(bench.seed, "attack", "e2e", f"{scen['epsilon']:.9f}")
            deltas, _ = e2e_core(bench.ft, bench.score, bench.op, bench.test_ys,
                                 bench.purify_cfg, cfg, stream, bench.modl_cfg)
            bench._attack_cache[key] = deltas
        return bench.op, bench.test_ys + bench._attack_cache[key], None
    if kind == "acceleration":
        stream = tag_stream(bench.seed, "op", name)
        op2 = perturb_operator(bench.op, new_acceleration=scen["factor"], stream=stream)
        ys2 = np.asarray(forward_t(op2, bench.test_xs))
        return op2, ys2, None
    if kind == "shift":
        if scen["pct"] == 0:
            return bench.op, bench.test_ys, None
        stream = tag_stream(bench.seed, "op", name)
        op2 = perturb_operator(bench.op, shift_pct=scen["pct"], stream=stream)
        ys2 = np.asarray(forward_t(op2, bench.test_xs))
        return op2, ys2, None
    if kind == "pst":
        base = dict(scen["perturbation"])
        base["name"] = name + "_input"
        op2, ys2, _ = _scenario_inputs(bench, base, method)
        return op2, ys2, int(scen["pst_step"])
    raise ValueError(f"unknown scenario kind {kind}")


def run_scenario(bench: Bench, scen: dict) -> list:
    """Evaluate every requested method under one scenario."""
    reports = []
    refs = [ComplexImage(x) for x in bench.test_xs]
    for method in scen.get("methods", list(METHODS)):
        op, ys, pst_override = _scenario_inputs(bench, scen, method)
        log.info("scenario %s / %s", scen["name"], method)
        recon = _reconstruct_method(bench, method, op, ys, scen["name"], pst_override)
        imgs = [ComplexImage(np.ascontiguousarray(r)) for r in recon]
        reports.append(
            EvalReport(
                scen["name"],
                method,
                [psnr(im, ref) for im, ref in zip(imgs, refs)],
                [ssim(im, ref) for im, ref in zip(imgs, refs)],
            )
        )
    return reports


# ---------------------------------------------------------------------------
# CSV emission

REPORT_HEADER = ["scenario", "method", "image_index", "psnr_db", "ssim"]
SUMMARY_HEADER = [
    "scenario", "method", "psnr_mean", "psnr_std", "psnr_median", "ssim_mean", "ssim_std",
]


def _fmt(v: float) -> str:
    # shortest exact round-trip representation keeps CSV aggregates
    # recomputable from rows at full float64 precision
    return repr(float(v))


def write_reports_csv(path, reports: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_HEADER)
        for r in reports:
            for i, (p, s) in enumerate(zip(r.psnr_db, r.ssim_val)):
                w.writerow([r.scenario, r.method, i, _fmt(p), _fmt(s)])


def write_summary_csv(path, reports: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_HEADER)
        for r in reports:
            w.writerow([
                r.scenario, r.method, _fmt(r.mean_psnr()), _fmt(r.std_psnr()),
                _fmt(r.median_psnr()), _fmt(r.mean_ssim()), _fmt(r.std_ssim()),
            ])


def write_table_csv(path, reports: list) -> None:
    """Tables-shaped summary: vanilla row absolute, other rows as paired
    per-image deltas vs vanilla (mean and std of the deltas)."""
    by_scen: dict = {}
    for r in reports:
        by_scen.setdefault(r.scenario, {})[r.method] = r
    scenarios = sorted(by_scen)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        header = ["method"]
        for s in scenarios:
            header += [f"{s}_psnr_mean", f"{s}_psnr_std", f"{s}_ssim_mean", f"{s}_ssim_std"]
        w.writerow(header)
        methods = [m for m in METHODS if any(m in d for d in by_scen.values())]
        for m in methods:
            row = [m]
            for s in scenarios:
                d = by_scen[s]
                if m not in d:
                    row += ["", "", "", ""]
                    continue
                if m == "vanilla" or "vanilla" not in d:
                    row += [_fmt(d[m].mean_psnr()), _fmt(d[m].std_psnr()),
                            _fmt(d[m].mean_ssim()), _fmt(d[m].std_ssim())]
                else:
                    dp = np.array(d[m].psnr_db) - np.array(d["vanilla"].psnr_db)
                    ds = np.array(d[m].ssim_val) - np.array(d["vanilla"].ssim_val)
                    row += [_fmt(float(np.mean(dp))), _fmt(float(np.std(dp))),
                            _fmt(float(np.mean(ds))), _fmt(float(np.std(ds)))]
            w.writerow(row)


def write_sweep_csv(path, param_name: str, rows: list) -> None:
    """rows: (value, method, report)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([param_name, "method", "psnr_mean", "psnr_median", "ssim_mean"])
        for value, method, r in rows:
            w.writerow([_fmt(value), method, _fmt(r.mean_psnr()), _fmt(r.median_psnr()),
                        _fmt(r.mean_ssim())])


def run_experiment(bench: Bench, scenarios: list, sweeps: list, out_dir) -> dict:
    """Run all scenarios and sweeps; write per-scenario, summary, table, and
    sweep CSVs under out_dir. Returns {scenario: [EvalReport, ...]}."""
    os.makedirs(out_dir, exist_ok=True)
    all_reports: list = []
    results: dict = {}
    for scen in scenarios:
        reports = run_scenario(bench, scen)
        results[scen["name"]] = reports
        all_reports.extend(reports)
        write_reports_csv(os.path.join(out_dir, f"report_{scen['name']}.csv"), reports)
    for sweep in sweeps:
        rows = []
        for value in sweep["values"]:
            scen = _sweep_point(sweep, value)
            reports = run_scenario(bench, scen)
            results[scen["name"]] = reports
            all_reports.extend(reports)
            for r in reports:
                rows.append((value, r.method, r))
        write_sweep_csv(os.path.join(out_dir, f"sweep_{sweep['name']}.csv"),
                        sweep["param"], rows)
    write_summary_csv(os.path.join(out_dir, "summary.csv"), all_reports)
    write_table_csv(os.path.join(out_dir, "table.csv"), all_reports)
    return results


def _sweep_point(sweep: dict, value) -> dict:
    kind = sweep["kind"]
    name = f"{sweep['name']}_{value:g}" if isinstance(value, float) else f"{sweep['name']}_{value}"
    scen = {"name": name, "kind": kind, "methods": sweep.get("methods", list(METHODS))}
    if kind in ("pgd", "momentum", "pgd_e2e"):
        scen["epsilon"] = float(value)
        if "steps" in sweep:
            scen["steps"] = sweep["steps"]
    elif kind == "gaussian":
        scen["variance"] = float(value)
    elif kind == "acceleration":
        scen["factor"] = float(value)
    elif kind == "shift":
        scen["pct"] = float(value)
    elif kind == "pst":
        scen["pst_step"] = int(value)
        scen["perturbation"] = sweep["perturbation"]
    else:
        raise ValueError(f"unknown sweep kind {kind}")
    return scen
