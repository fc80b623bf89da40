import csv

import numpy as np
import pytest

from diffpure_mri import forward_model as fm
from diffpure_mri import harness
from diffpure_mri import modl
from diffpure_mri import networks as nn
from diffpure_mri.diffusion import ScoreModel, make_schedule
from diffpure_mri.metrics import psnr, ssim
from diffpure_mri.numerics import ComplexImage, RngStream
from diffpure_mri.phantoms import PhantomSpec, gen_phantoms
from diffpure_mri.purification import PurifyConfig


@pytest.fixture(scope="module")
def tiny_bench():
    st = RngStream(3)
    h = w = 16
    mask = fm.make_cartesian_mask(h, w, 2, 4, stream=st.substream(0))
    op = fm.make_operator(mask, fm.make_coil_maps(h, w, 2, st.substream(1)))
    xs = gen_phantoms(PhantomSpec(count=4, height=h, width=w, seed=9))
    test_xs = np.stack([x.data for x in xs])
    test_ys = np.stack([fm.forward(op, x).data for x in xs])
    arch = nn.ConvNetArch(2, (4, 4, 2), 3, True)
    sched = make_schedule(0.01, 2.0, 8)
    return harness.Bench(
        op=op,
        test_xs=test_xs,
        test_ys=test_ys,
        vanilla=nn.init_params(arch, st.substream(2), zero_last=False),
        at=nn.init_params(arch, st.substream(3), zero_last=False),
        ft=nn.init_params(arch, st.substream(4), zero_last=False),
        score=ScoreModel(sched, "analytic-gaussian", mean=0.0, var=1.0),
        modl_cfg=modl.ModlConfig(unroll_steps=1),
        purify_cfg=PurifyConfig(pst_step=2),
        rs_num_samples=2,
        seed=5,
    )


class TestScenarios:
    def test_clean_matches_direct_composition(self, tiny_bench):
        reports = harness.run_scenario(
            tiny_bench, {"name": "clean", "kind": "none", "methods": ["vanilla"]})
        r = reports[0]
        recon = modl.reconstruct_core(tiny_bench.vanilla, tiny_bench.op,
                                      tiny_bench.test_ys, tiny_bench.modl_cfg)
        for i in range(len(tiny_bench.test_xs)):
            a = ComplexImage(np.ascontiguousarray(recon[i]))
            b = ComplexImage(tiny_bench.test_xs[i])
            assert r.psnr_db[i] == pytest.approx(psnr(a, b), abs=1e-12)
            assert r.ssim_val[i] == pytest.approx(ssim(a, b), abs=1e-12)

    def test_all_methods_run_under_attack(self, tiny_bench):
        reports = harness.run_scenario(
            tiny_bench,
            {"name": "pgd_tiny", "kind": "pgd", "epsilon": 0.01, "steps": 2,
             "methods": ["vanilla", "at", "rs", "dp", "dp_ft"]})
        assert {r.method for r in reports} == set(harness.METHODS)
        for r in reports:
            assert len(r.psnr_db) == 4
            assert all(np.isfinite(v) for v in r.psnr_db)
            assert all(-1 <= v <= 1 for v in r.ssim_val)

    def test_attack_cache_reused(self, tiny_bench):
        tiny_bench._attack_cache.clear()
        harness.run_scenario(
            tiny_bench, {"name": "a1", "kind": "pgd", "epsilon": 0.02, "steps": 2,
                         "methods": ["vanilla", "rs"]})
        assert len(tiny_bench._attack_cache) == 1  # rs attacks the vanilla net too

    def test_operator_mismatch_scenarios(self, tiny_bench):
        for scen in ({"name": "acc", "kind": "acceleration", "factor": 4,
                      "methods": ["vanilla"]},
                     {"name": "sh", "kind": "shift", "pct": 50, "methods": ["vanilla"]}):
            reports = harness.run_scenario(tiny_bench, scen)
            assert np.isfinite(reports[0].mean_psnr())

    def test_gaussian_scenario_deterministic(self, tiny_bench):
        scen = {"name": "g", "kind": "gaussian", "variance": 0.001, "methods": ["vanilla"]}
        a = harness.run_scenario(tiny_bench, scen)[0]
        b = harness.run_scenario(tiny_bench, scen)[0]
        assert a.psnr_db == b.psnr_db


class TestReportAggregates:
    def test_recomputable_from_rows(self):
        r = harness.EvalReport("s", "m", [30.0, 28.0, 26.0], [0.9, 0.8, 0.7])
        assert r.mean_psnr() == pytest.approx(np.mean([30.0, 28.0, 26.0]), abs=1e-12)
        assert r.std_psnr() == pytest.approx(np.std([30.0, 28.0, 26.0]), abs=1e-12)
        assert r.median_psnr() == pytest.approx(28.0, abs=1e-12)
        assert r.mean_ssim() == pytest.approx(0.8, abs=1e-12)


class TestCsvOutputs:
    def test_run_experiment_files(self, tiny_bench, tmp_path):
        scenarios = [{"name": "clean", "kind": "none", "methods": ["vanilla", "at"]}]
        sweeps = [{"name": "eps", "kind": "pgd", "param": "epsilon",
                   "values": [0.0, 0.01], "steps": 1, "methods": ["vanilla"]}]
        harness.run_experiment(tiny_bench, scenarios, sweeps, tmp_path)
        for name in ("report_clean.csv", "summary.csv", "table.csv", "sweep_eps.csv"):
            assert (tmp_path / name).exists()
        with open(tmp_path / "report_clean.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == harness.REPORT_HEADER
        assert len(rows) == 1 + 2 * 4

    def test_empty_scenarios_header_only(self, tiny_bench, tmp_path):
        harness.run_experiment(tiny_bench, [], [], tmp_path)
        with open(tmp_path / "summary.csv") as f:
            rows = list(csv.reader(f))
        assert rows == [harness.SUMMARY_HEADER]

    def test_aggregates_match_rows_to_1e12(self, tiny_bench, tmp_path):
        scenarios = [{"name": "clean", "kind": "none", "methods": ["vanilla"]}]
        harness.run_experiment(tiny_bench, scenarios, [], tmp_path)
        with open(tmp_path / "report_clean.csv") as f:
            rows = list(csv.reader(f))[1:]
        psnrs = [float(r[3]) for r in rows]
        with open(tmp_path / "summary.csv") as f:
            srow = list(csv.reader(f))[1]
        assert abs(float(srow[2]) - np.mean(psnrs)) <= 1e-12
        assert abs(float(srow[3]) - np.std(psnrs)) <= 1e-12

    def test_table_reports_deltas_vs_vanilla(self, tiny_bench, tmp_path):
        scenarios = [{"name": "clean", "kind": "none", "methods": ["vanilla", "at"]}]
        harness.run_experiment(tiny_bench, scenarios, [], tmp_path)
        with open(tmp_path / "table.csv") as f:
            rows = {r[0]: r[1:] for r in list(csv.reader(f))[1:]}
        base = float(rows["vanilla"][0])
        delta = float(rows["at"][0])
        assert base > 0  # absolute psnr for the baseline row
        assert abs(delta) < base  # others are paired deltas


class TestTagStream:
    def test_stable_across_runs(self):
        a = harness.tag_stream(7, "attack", "pgd", 3).normal((5,))
        b = harness.tag_stream(7, "attack", "pgd", 3).normal((5,))
        assert np.array_equal(a, b)

    def test_distinct_tags_differ(self):
        a = harness.tag_stream(7, "attack", "pgd").normal((50,))
        b = harness.tag_stream(7, "attack", "momentum").normal((50,))
        assert not np.array_equal(a, b)
