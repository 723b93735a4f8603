import json
import math
import os

import pytest

from qbdspin.cli import main


def write_config(path, doc):
    path.write_text(json.dumps(doc, indent=2))
    return str(path)


def run(args):
    return main(args)


def read_all_bytes(out_dir):
    blobs = {}
    for root, _, files in os.walk(out_dir):
        for name in sorted(files):
            p = os.path.join(root, name)
            blobs[os.path.relpath(p, out_dir)] = open(p, "rb").read()
    return blobs


# --------------------------------------------------------------------------
# kernel

def kernel_config(tmp_path, out_name="out_kernel", **over):
    doc = {
        "kernel": {"mu2": 1.0, "dim": 3, "g": 1.0},
        "scan": {"n_r": 24, "tol": 1e-8},
        "output_dir": str(tmp_path / out_name),
    }
    doc.update(over)
    return write_config(tmp_path / f"{out_name}.json", doc)


def test_kernel_scan_passes_and_is_deterministic(tmp_path):
    cfg = kernel_config(tmp_path)
    assert run(["kernel", "--config", cfg]) == 0
    out = tmp_path / "out_kernel"
    report = json.loads((out / "kernel_report.json").read_text())
    assert report["pass"] is True
    assert report["max_rel_deviation"] <= 1e-8
    assert "config_sha256" in report["provenance"]
    first = read_all_bytes(out)
    assert run(["kernel", "--config", cfg]) == 0
    assert read_all_bytes(out) == first
    csv_head = (out / "kernel_samples.csv").read_text().splitlines()[0]
    assert csv_head.startswith("# config_sha256=")


def test_kernel_divergent_low_dim_exits_2(tmp_path, capsys):
    cfg = kernel_config(tmp_path, out_name="out_div",
                        kernel={"mu2": 0.0, "dim": 2, "g": 1.0},
                        scan={"mu2_values": [0.0, 1.0], "n_r": 8})
    assert run(["kernel", "--config", cfg]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["type"] == "DivergentIntegralError"


def test_help_exits_zero():
    for sub in ("kernel", "tc", "dispersion", "memory", "sweep"):
        with pytest.raises(SystemExit) as exc:
            main([sub, "--help"])
        assert exc.value.code == 0


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", {
        "kernel": {"mu2": 1.0}, "typo_key": 1,
        "output_dir": str(tmp_path / "nope")})
    assert run(["kernel", "--config", cfg]) == 1
    assert not (tmp_path / "nope").exists()
    err = json.loads(capsys.readouterr().err)
    assert "typo_key" in err["error"]["message"]


# --------------------------------------------------------------------------
# tc

def tc_config(tmp_path, out_name, t_grid, workers=None):
    doc = {
        "lattice": {"dim": 3},
        "table": {"type": "nn", "j_bond": 1.0, "sign": 1},
        "mc": {"sweeps": 3000, "burn_in": 600},
        "tc": {"sizes": [4, 6], "t_grid": t_grid},
        "seed": 9,
        "output_dir": str(tmp_path / out_name),
    }
    if workers is not None:
        doc["workers"] = workers
    return write_config(tmp_path / f"{out_name}.json", doc)


def test_tc_crossing_run_and_worker_independence(tmp_path):
    grid = [1.2, 1.4, 1.6, 1.8]
    cfg1 = tc_config(tmp_path, "tc_w1", grid, workers=1)
    cfg2 = tc_config(tmp_path, "tc_w2", grid, workers=2)
    assert run(["tc", "--config", cfg1]) == 0
    assert run(["tc", "--config", cfg2]) == 0
    est1 = json.loads((tmp_path / "tc_w1" / "tc_estimate.json").read_text())
    assert abs(est1["T_B"] - 1.414) < 0.05
    u4_1 = (tmp_path / "tc_w1" / "binder_u4.csv").read_bytes()
    u4_2 = (tmp_path / "tc_w2" / "binder_u4.csv").read_bytes()
    assert u4_1 == u4_2
    # estimates identical apart from the provenance (configs differ in
    # output_dir/workers)
    est2 = json.loads((tmp_path / "tc_w2" / "tc_estimate.json").read_text())
    est1.pop("provenance"); est2.pop("provenance")
    assert est1 == est2


def test_tc_resume_from_cached_chains(tmp_path):
    grid = [1.2, 1.4, 1.6, 1.8]
    cfg = tc_config(tmp_path, "tc_res", grid)
    assert run(["tc", "--config", cfg]) == 0
    out = tmp_path / "tc_res"
    first = read_all_bytes(out)
    # interrupting after some chains completed leaves the cache behind;
    # emulate by removing the final outputs and one chain file
    (out / "tc_estimate.json").unlink()
    (out / "binder_u4.csv").unlink()
    chains = sorted((out / "chains").glob("*.csv"))
    chains[0].unlink()
    chains[0].with_name(chains[0].stem + ".meta.json").unlink()
    assert run(["tc", "--config", cfg]) == 0
    assert read_all_bytes(out) == first


def test_tc_no_crossing_exits_3_with_table(tmp_path, capsys):
    cfg = tc_config(tmp_path, "tc_hot", [1.8, 1.9, 2.0, 2.1])
    assert run(["tc", "--config", cfg]) == 3
    out = tmp_path / "tc_hot"
    assert (out / "binder_u4.csv").exists()
    assert not (out / "tc_estimate.json").exists()
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["type"] == "BracketError"


def test_tc_empty_grid_is_validation_error(tmp_path):
    cfg = tc_config(tmp_path, "tc_empty", [])
    assert run(["tc", "--config", cfg]) == 1
    assert not (tmp_path / "tc_empty").exists()


def test_workers_env_fallback(tmp_path, monkeypatch):
    grid = [1.2, 1.4, 1.6, 1.8]
    cfg = tc_config(tmp_path, "tc_env", grid)       # no workers key
    monkeypatch.setenv("QBDSPIN_WORKERS", "2")
    assert run(["tc", "--config", cfg]) == 0
    ref = tc_config(tmp_path, "tc_envref", grid, workers=1)
    monkeypatch.delenv("QBDSPIN_WORKERS")
    assert run(["tc", "--config", ref]) == 0
    assert (tmp_path / "tc_env" / "binder_u4.csv").read_bytes() == \
        (tmp_path / "tc_envref" / "binder_u4.csv").read_bytes()


# --------------------------------------------------------------------------
# dispersion

def test_dispersion_fm_yukawa(tmp_path):
    cfg = write_config(tmp_path / "disp_fm.json", {
        "kernel": {"mu2": 1.0, "dim": 3, "g": 4.0},
        "lattice": {"dim": 3, "lengths": [6, 6, 6]},
        "table": {"type": "kernel", "cutoff": 2.5},
        "dispersion": {"path": "G-X-M-G-R", "orders": ["fm"],
                       "points_per_segment": 12},
        "output_dir": str(tmp_path / "disp_fm"),
    })
    assert run(["dispersion", "--config", cfg]) == 0
    out = tmp_path / "disp_fm"
    report = json.loads((out / "dispersion_report.json").read_text())
    assert abs(report["smallk_exponents"]["fm"] - 2.0) <= 0.1
    assert report["goldstone_omega0"]["fm"] <= 1e-10
    assert (out / "dispersion_fm.csv").exists()


def test_dispersion_afm_nn(tmp_path):
    cfg = write_config(tmp_path / "disp_afm.json", {
        "lattice": {"dim": 3, "lengths": [8, 8, 8]},
        "table": {"type": "nn", "j_bond": 1.0},
        "dispersion": {"path": "G-X", "orders": ["afm"],
                       "points_per_segment": 12},
        "output_dir": str(tmp_path / "disp_afm"),
    })
    assert run(["dispersion", "--config", cfg]) == 0
    report = json.loads((tmp_path / "disp_afm" / "dispersion_report.json").read_text())
    assert abs(report["smallk_exponents"]["afm"] - 1.0) <= 0.1


def test_dispersion_malformed_path_is_validation_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "disp_bad.json", {
        "lattice": {"dim": 3, "lengths": [4, 4, 4]},
        "table": {"type": "nn"},
        "dispersion": {"path": "G-Q", "orders": ["fm"]},
        "output_dir": str(tmp_path / "disp_bad"),
    })
    assert run(["dispersion", "--config", cfg]) == 1
    assert not (tmp_path / "disp_bad").exists()


def test_dispersion_afm_non_bipartite_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "disp_odd.json", {
        "lattice": {"dim": 3, "lengths": [5, 5, 5]},
        "table": {"type": "nn"},
        "dispersion": {"path": "G-X", "orders": ["afm"]},
        "output_dir": str(tmp_path / "disp_odd"),
    })
    assert run(["dispersion", "--config", cfg]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["type"] == "UnsupportedOrderError"


# --------------------------------------------------------------------------
# memory

def memory_config(tmp_path, name, alpha, dt=0.01, steps=400, seed=60):
    return write_config(tmp_path / f"{name}.json", {
        "lattice": {"dim": 3, "lengths": [4, 4, 4]},
        "table": {"type": "nn", "j_bond": 1.0},
        "mc": {"sweeps": 2000, "burn_in": 500},
        "memory": {"T_store": 0.1443, "pulse_sites": [0],
                   "tilt_angle": math.pi / 4, "alpha": alpha, "dt": dt,
                   "steps": steps},
        "seed": seed,
        "output_dir": str(tmp_path / name),
    })


def test_memory_damped_recall(tmp_path):
    cfg = memory_config(tmp_path, "mem_damped", alpha=0.1)
    assert run(["memory", "--config", cfg]) == 0
    out = tmp_path / "mem_damped"
    report = json.loads((out / "memory_report.json").read_text())
    assert report["order_magnitude"] >= 0.8
    assert report["direction_fidelity"] >= 0.99
    assert report["no_decay"] is False
    assert report["decay_time"] > 0.0
    for name in ("trajectory.csv", "stored_config.json", "pulsed_config.json",
                 "final_config.json"):
        assert (out / name).exists()


def test_memory_conservative_run_reports_no_decay(tmp_path):
    cfg = memory_config(tmp_path, "mem_cons", alpha=0.0, steps=200)
    assert run(["memory", "--config", cfg]) == 0
    report = json.loads((tmp_path / "mem_cons" / "memory_report.json").read_text())
    assert report["no_decay"] is True
    assert report["decay_time"] is None


def test_memory_repeat_is_byte_identical(tmp_path):
    cfg = memory_config(tmp_path, "mem_rep", alpha=0.1, steps=150)
    assert run(["memory", "--config", cfg]) == 0
    first = read_all_bytes(tmp_path / "mem_rep")
    assert run(["memory", "--config", cfg]) == 0
    assert read_all_bytes(tmp_path / "mem_rep") == first


def test_memory_instability_exits_4_with_partial_trajectory(tmp_path, capsys):
    cfg = memory_config(tmp_path, "mem_unstable", alpha=0.5, dt=5.0, steps=200)
    assert run(["memory", "--config", cfg]) == 4
    out = tmp_path / "mem_unstable"
    assert (out / "trajectory.csv").exists()
    lines = [l for l in (out / "trajectory.csv").read_text().splitlines()
             if l and not l.startswith("#")]
    assert 2 < len(lines) < 202
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["type"] == "StepSizeError"


# --------------------------------------------------------------------------
# sweep

def test_sweep_observables(tmp_path):
    cfg = write_config(tmp_path / "sweep.json", {
        "lattice": {"dim": 3, "lengths": [4, 4, 4]},
        "table": {"type": "nn", "j_bond": 1.0},
        "mc": {"sweeps": 1500, "burn_in": 300},
        "sweep": {"t_grid": [0.8, 1.4, 2.2]},
        "seed": 5,
        "output_dir": str(tmp_path / "sweep_out"),
    })
    assert run(["sweep", "--config", cfg]) == 0
    lines = (tmp_path / "sweep_out" / "observables.csv").read_text().splitlines()
    data = [l for l in lines if l and not l.startswith("#")]
    assert data[0] == "T,m_mean,m_err,energy_per_site,chi,C,acceptance"
    assert len(data) == 4
    # magnetization decreases across the transition
    m = [float(row.split(",")[1]) for row in data[1:]]
    assert m[0] > m[1] > m[2]


def test_seed_flag_overrides_config(tmp_path):
    cfg = memory_config(tmp_path, "mem_seed", alpha=0.1, steps=150, seed=60)
    assert run(["memory", "--config", cfg, "--seed", "61"]) == 0
    run_a = read_all_bytes(tmp_path / "mem_seed")
    assert run(["memory", "--config", cfg]) == 0
    run_b = read_all_bytes(tmp_path / "mem_seed")
    assert run_a != run_b
