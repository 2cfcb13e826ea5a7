import numpy as np
import pytest

from cklemap.bench import (
    BenchConfig,
    fit_power_law,
    read_scaling_csv,
    run_scaling,
    summarize_fits,
    write_fit_json,
    write_scaling_csv,
)
from cklemap.gpr import KernelParams
from cklemap.inverse import InverseConfig
from cklemap.synth import SynthSpec
from conftest import box_spec


def test_power_law_exact_two_points():
    a, s = fit_power_law([(10.0, 100.0), (100.0, 10_000.0)])
    assert s == pytest.approx(2.0, abs=1e-12)
    assert a == pytest.approx(1.0, rel=1e-9)


def test_power_law_constant_times():
    a, s = fit_power_law([(10.0, 5.0), (100.0, 5.0), (1000.0, 5.0)])
    assert s == pytest.approx(0.0, abs=1e-12)
    assert a == pytest.approx(5.0, rel=1e-9)


def test_power_law_with_noise(rng):
    N = np.geomspace(10, 10_000, 12)
    t = 3.0 * N**1.5 * np.exp(0.01 * rng.standard_normal(12))
    _, s = fit_power_law(list(zip(N, t)))
    assert s == pytest.approx(1.5, abs=0.05)


def test_power_law_rejects_bad_inputs():
    with pytest.raises(ValueError):
        fit_power_law([(10.0, 1.0)])
    with pytest.raises(ValueError):
        fit_power_law([(10.0, -1.0), (20.0, 1.0)])


def small_setup():
    mesh_spec = box_spec(6)
    synth_spec = SynthSpec(kernel=KernelParams(sigma=1.0, length=0.3),
                           seed=4, n_y_obs=5, n_u_obs=12)
    inv = InverseConfig(method="cklemap", max_iterations=50)
    return mesh_spec, synth_spec, inv


def test_run_scaling_row_cardinality():
    mesh_spec, synth_spec, inv = small_setup()
    cfg = BenchConfig(levels=2, replicates=1, rtol=1e-3, max_terms=20, fit_gp=False)
    rows = run_scaling(mesh_spec, synth_spec, inv, cfg)
    assert len(rows) == 2 * 3  # levels x methods
    assert {r["N"] for r in rows} == {36, 144}
    for row in rows:
        assert set(row) == {"N", "method", "replicate", "time_s", "iterations",
                            "rel_l2", "abs_linf", "status"}
        assert row["status"].startswith("converged") or row["status"] in ("max-iter",)


def test_run_scaling_replicates_differ():
    mesh_spec, synth_spec, inv = small_setup()
    cfg = BenchConfig(levels=1, replicates=2, methods=("cklemap",),
                      rtol=1e-3, max_terms=20, fit_gp=False)
    rows = run_scaling(mesh_spec, synth_spec, inv, cfg)
    assert len(rows) == 2
    assert rows[0]["rel_l2"] != rows[1]["rel_l2"]  # different draws per replicate


def test_run_scaling_time_budget_zero():
    mesh_spec, synth_spec, inv = small_setup()
    cfg = BenchConfig(levels=1, replicates=1, time_budget_s=0.0,
                      rtol=1e-3, max_terms=20, fit_gp=False)
    rows = run_scaling(mesh_spec, synth_spec, inv, cfg)
    assert all(r["status"] == "timeout" for r in rows)


def test_summarize_excludes_timeouts_and_extrapolates():
    rows = [
        {"N": 100, "method": "map", "replicate": 0, "time_s": 1.0,
         "iterations": 5, "rel_l2": 0.1, "abs_linf": 0.5, "status": "converged-ftol"},
        {"N": 400, "method": "map", "replicate": 0, "time_s": 16.0,
         "iterations": 5, "rel_l2": 0.1, "abs_linf": 0.5, "status": "converged-ftol"},
        {"N": 1600, "method": "map", "replicate": 0, "time_s": float("nan"),
         "iterations": 0, "rel_l2": float("nan"), "abs_linf": float("nan"),
         "status": "timeout"},
    ]
    fits = summarize_fits(rows)
    entry = fits["map"]
    assert entry["exponent"] == pytest.approx(2.0, abs=1e-9)
    assert entry["extrapolated"][0]["N"] == 1600
    assert entry["extrapolated"][0]["time_s_estimate"] == pytest.approx(256.0, rel=1e-6)
    assert entry["extrapolated"][0]["flag"] == "extrapolated"


def test_csv_roundtrip(tmp_path):
    mesh_spec, synth_spec, inv = small_setup()
    cfg = BenchConfig(levels=1, replicates=1, methods=("cklemap", "map"),
                      rtol=1e-3, max_terms=20, fit_gp=False)
    rows = run_scaling(mesh_spec, synth_spec, inv, cfg)
    path = tmp_path / "scaling.csv"
    write_scaling_csv(rows, path)
    back = read_scaling_csv(path)
    assert len(back) == len(rows)
    assert back[0]["method"] == rows[0]["method"]
    write_fit_json(summarize_fits(rows), tmp_path / "fit.json")
    assert (tmp_path / "fit.json").exists()


def test_paired_datasets_across_methods():
    # same replicate, same level: methods see identical observations,
    # so the y-misfit-free GP start gives identical initial costs
    mesh_spec, synth_spec, inv = small_setup()
    cfg = BenchConfig(levels=1, replicates=1, methods=("cklemap", "cklemap-accel"),
                      rtol=1e-6, max_terms=36, fit_gp=False)
    rows = run_scaling(mesh_spec, synth_spec, inv, cfg)
    a, b = rows
    assert a["rel_l2"] == pytest.approx(b["rel_l2"], abs=1e-10)
    assert a["iterations"] == b["iterations"]
