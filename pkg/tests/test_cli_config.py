import json
from pathlib import Path

import numpy as np
import pytest

from boltzscat import config as cfgmod
from boltzscat.cli import (EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_INFEASIBLE, EXIT_PASS,
                           expected_scattering_exponent, main)
from boltzscat.phase_field import DistributionField, energy_norm
from boltzscat.ssbe_solver import ConfigError, stationary_maxwellian

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def _run(tmp_path, scenario, cfg, *extra):
    path = cfg if isinstance(cfg, Path) else _write(tmp_path, cfg)
    out = tmp_path / "out"
    code = main([scenario, "--config", str(path), "--out", str(out), *extra])
    return code, json.loads((out / "summary.json").read_text())


def test_shipped_configs_parse():
    for path in sorted(CONFIGS.glob("*.json")):
        cfg = cfgmod.load_config(path)
        assert cfg["scenario"]["name"] in cfgmod.SCENARIOS
        if path.stem in ("strong_regime",):
            with pytest.raises(ConfigError):
                cfgmod.build_solver(cfg)
        elif cfg["scenario"]["name"] not in ("classify", "pipeline-check"):
            solver = cfgmod.build_solver(cfg)
            init = cfgmod.build_initial(cfg, solver.grid, np.random.default_rng(0))
            assert np.all(init.values >= 0)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        cfgmod.merge_defaults({"solver": {"t_end": 1.0, "typo": 3}})
    with pytest.raises(ConfigError):
        cfgmod.merge_defaults({"extras": {}})
    with pytest.raises(ConfigError):
        cfgmod.merge_defaults({"scenario": {"name": "nope"}})


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    code, summary = _run(tmp_path, "classify", path)
    assert code == EXIT_INFEASIBLE and summary["error"]["type"] == "config_error"


def test_strong_regime_exit_code(tmp_path):
    code, summary = _run(tmp_path, "collide-homogeneous", CONFIGS / "strong_regime.json")
    assert code == EXIT_INFEASIBLE and "strong" in summary["error"]["message"]


def test_infeasible_moments_exit_code(tmp_path):
    code, summary = _run(tmp_path, "classify", CONFIGS / "infeasible.json")
    assert code == EXIT_INFEASIBLE and summary["error"]["type"] == "infeasible_moments"


def test_classify_single_target(tmp_path):
    cfg = {"kernel": {"d": 2}, "grid": {"d": 2},
           "scenario": {"name": "classify", "params": {"a": 2.0, "b": 0.3, "c": 1.0,
                                                        "A": [[0, 0.1], [-0.1, 0]], "m": 1.5}}}
    code, summary = _run(tmp_path, "classify", cfg)
    assert code == EXIT_PASS and summary["params"]["m"] == pytest.approx(1.5)


def test_bad_workers(tmp_path):
    code, _ = _run(tmp_path, "classify", CONFIGS / "classify.json", "--workers", "0")
    assert code == EXIT_INFEASIBLE


def test_initial_kinds():
    cfg = cfgmod.merge_defaults({"grid": {"n_v": 8, "n_x": 8}})
    grid = cfgmod.build_grid(cfg)
    M = stationary_maxwellian(grid)
    rng = np.random.default_rng(0)
    cfg["scenario"]["initial"] = {"kind": "modulated", "amplitude": 0.1}
    mod = cfgmod.build_initial(cfg, grid, rng)
    assert np.max(np.abs(mod.values / M - 1)) <= 0.1 + 1e-12
    cfg["scenario"]["initial"] = {"kind": "bump", "center": "random"}
    a = cfgmod.build_initial(cfg, grid, np.random.default_rng(5)).values
    b = cfgmod.build_initial(cfg, grid, np.random.default_rng(5)).values
    assert np.array_equal(a, b)
    cfg["scenario"]["initial"] = {"kind": "corner_mixture"}
    with pytest.raises(ConfigError):
        cfgmod.build_initial(cfg, grid, rng)
    cfg["scenario"]["initial"] = {"kind": "bump", "energy_norm_target": 1e-3}
    cfg["solver"]["norms"] = {"order": 2}
    field = cfgmod.build_initial(cfg, grid, rng)
    en = energy_norm(DistributionField(grid, field.values - M), 0.0, cfgmod.build_norms(cfg))
    assert en == pytest.approx(1e-3, rel=1e-10)


def test_homogeneous_initial_moments():
    cfg = cfgmod.merge_defaults({"kernel": {"d": 3, "gamma": -1.0},
                                 "grid": {"d": 3, "n_v": 16, "L_v": 6.0, "n_x": 1}})
    grid = cfgmod.build_grid(cfg)
    v = grid.vgrid.points()
    for kind in ("corner_mixture", "two_temperature"):
        cfg["scenario"]["initial"] = {"kind": kind}
        f = cfgmod.build_initial(cfg, grid, np.random.default_rng(0)).values.reshape(-1)
        w = grid.vgrid.weight
        # the hot component of two_temperature feels the box edge at L = 6
        assert np.sum(f) * w == pytest.approx(1.0, abs=1e-5)
        assert np.sum(np.sum(v * v, 1) * f) * w == pytest.approx(3.0, abs=1e-3)


def test_scatter_rate_synthetic(tmp_path):
    cfg = {"scenario": {"name": "scatter-rate", "window": [10.0, 1000.0],
                        "synthetic": {"exponent": 0.5, "t_max": 1e4}}}
    code, summary = _run(tmp_path, "scatter-rate", cfg)
    assert code == EXIT_PASS and summary["fit"]["slope"] == pytest.approx(-0.5, abs=1e-9)
    cfg["scenario"]["window"] = [10.0, 50.0]
    code, summary = _run(tmp_path, "scatter-rate", cfg)
    assert code == EXIT_INCONCLUSIVE and summary["inconclusive"]


def test_expected_exponent():
    assert expected_scattering_exponent(2, -0.5) == -0.5
    assert expected_scattering_exponent(3, -1.0) == -1.0
    assert expected_scattering_exponent(3, -0.3) == -1.0


def test_simulate_small_run_and_snapshots(tmp_path):
    cfg = {"grid": {"n_v": 8, "n_x": 8, "L_v": 5.0, "L_x": 5.0},
           "solver": {"t_end": 1.0, "dt_max": 0.5},
           "scenario": {"name": "simulate", "stationary_tolerance": 1e-14,
                        "initial": {"kind": "maxwellian"}}}
    code, summary = _run(tmp_path, "simulate", cfg, "--snapshot-times", "0.5")
    assert code == EXIT_PASS, summary
    snap = tmp_path / "out" / summary["snapshots"][0]
    meta = json.loads(Path(str(snap) + ".json").read_text())
    vals = np.fromfile(snap, dtype=meta["dtype"]).reshape(meta["shape"])
    assert meta["t"] == 0.5 and vals.shape == (8, 8, 8, 8)
    header = (tmp_path / "out" / "diagnostics.csv").read_text().splitlines()[0]
    assert header.startswith("t,mass")


def test_failed_check_exit_code(tmp_path):
    cfg = {"grid": {"n_v": 8, "n_x": 8, "L_v": 5.0, "L_x": 5.0},
           "solver": {"t_end": 1.0, "dt_max": 0.5},
           "scenario": {"name": "simulate", "stationary_tolerance": 1e-3,
                        "initial": {"kind": "bump", "amplitude": 0.05}}}
    code, summary = _run(tmp_path, "simulate", cfg)
    assert code == EXIT_FAIL
    assert not summary["all_pass"]
