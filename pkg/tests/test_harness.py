import csv
import dataclasses
import io
import json
from types import SimpleNamespace

import pytest
from hypothesis import given, settings, strategies as st

from tunneltimes.harness import (
    ENERGIES, SCHEMA_VERSION, WIDTHS, PointResult, ResultBundle, SweepConfig, feasibility,
    point_row, prepare, run_point,
)

small = SweepConfig(sigma=6.0, dt_scale=8.0, n_trajectories=400, refine=40)

configs = st.builds(
    SweepConfig,
    V0=st.floats(1.0, 50.0), E0=st.floats(0.5, 40.0), sigma=st.floats(2.0, 40.0),
    d=st.floats(0.0, 10.0), plane_mode=st.sampled_from(["edges", "far", "both"]),
    axis=st.sampled_from(["none", "width", "energy"]),
    values=st.lists(st.floats(0.1, 20.0), max_size=5).map(sorted).map(tuple),
    dt_scale=st.floats(0.25, 16.0), n_trajectories=st.integers(0, 20000),
    sampling=st.sampled_from(["quantile", "pseudorandom"]),
    seed=st.integers(0, 2**64 - 1), out=st.text(min_size=1, max_size=10),
)


@settings(max_examples=50)
@given(configs)
def test_config_json_round_trip(cfg):
    back = SweepConfig.from_json(cfg.to_json())
    assert back == cfg
    assert back.hash() == cfg.hash()


def test_hash_ignores_output_directory():
    a = SweepConfig()
    assert a.hash() == a.replace(out="elsewhere").hash()
    assert a.hash() != a.replace(d=3.5).hash()


@pytest.mark.parametrize("kw", [
    {"V0": -1.0}, {"E0": 0.0}, {"sigma": float("nan")}, {"d": -0.5},
    {"values": (3.0, 1.0)}, {"sigmas": (-1.0,)}, {"axis": "angle"},
    {"plane_mode": "middle"}, {"sampling": "sobol"}, {"seed": -1}, {"seed": 2**64},
    {"n_trajectories": -5}, {"schema_version": SCHEMA_VERSION + 1},
])
def test_invalid_configs_rejected(kw):
    with pytest.raises(ValueError):
        SweepConfig(**kw)


def test_unknown_keys_rejected():
    with pytest.raises(ValueError):
        SweepConfig.from_dict({"E0": 5.0, "colour": "red"})


def test_load_from_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"d": 2.0, "dt_scale": 8.0}))
    cfg = SweepConfig.load(p)
    assert cfg.d == 2.0 and cfg.dt_scale == 8.0 and cfg.E0 == 5.0


def test_axis_points():
    cfg = SweepConfig(axis="width", values=(1.0, 2.0))
    assert cfg.at(2.0).d == 2.0 and cfg.at(2.0).axis == "none"
    assert SweepConfig(axis="energy").at(7.5).E0 == 7.5
    assert SweepConfig().at(9.0) == SweepConfig()
    assert WIDTHS[0] == 0.5 and WIDTHS[-1] == 8.0 and len(WIDTHS) == 16
    assert ENERGIES[0] == 2.5 and ENERGIES[-1] == 20.0


def test_prepare_geometry():
    s = prepare(SweepConfig())
    assert s.spec.center == pytest.approx(-78.0)
    assert s.planes == (0.0, 3.0)
    assert s.propagator.dt == pytest.approx(s.grid.dt)
    stride_t = s.propagator.dt * s.propagator.frame_stride
    assert stride_t == pytest.approx(0.05, rel=0.1)
    far = prepare(SweepConfig(plane_mode="both"))
    assert far.far_plane == pytest.approx(-60.0, abs=far.grid.dx)
    assert far.planes[0] == far.far_plane
    assert far.spec.center == pytest.approx(-138.0)
    free = prepare(SweepConfig(d=0.0))
    assert free.planes == (0.0,) and free.potential.height == 0.0


def test_mixed_schema_versions_rejected():
    cfg = SweepConfig()
    other = SweepConfig()
    object.__setattr__(other, "schema_version", SCHEMA_VERSION + 1)
    with pytest.raises(ValueError):
        ResultBundle("x", cfg, [PointResult(other)])


def test_failed_point_is_recorded(monkeypatch):
    from tunneltimes import harness

    def boom(cfg):
        raise ValueError("grid too large")

    monkeypatch.setattr(harness, "simulate", boom)
    res = run_point(small)
    assert res.error == "ValueError: grid too large"
    assert res.flags == ["error"]
    row = point_row(res)
    assert row["flags"] == "error"
    assert row["tau_T_B_fs"] == ""


@pytest.fixture(scope="module")
def small_result():
    return run_point(small)


def test_small_point(small_result):
    r = small_result
    assert r.error is None
    assert r.flags == []
    assert r.meta["converged"]
    assert r.meta["max_norm_deviation"] < 1e-8
    assert r.bohm.order_violations == 0
    assert r.identities.max() < 2e-2
    assert r.bohm.theta_T == pytest.approx(r.orr.T_prob, abs=5e-3)


def test_csv_format(small_result, tmp_path):
    b = ResultBundle("run", small, [small_result], [point_row(small_result)])
    path = b.write(tmp_path)
    raw = path.read_bytes()
    assert raw.count(b"\r\n") == 2  # header and one row, RFC-4180 line ends
    rows = list(csv.DictReader(io.StringIO(raw.decode())))
    assert rows[0]["flags"] == "ok"
    for k, v in rows[0].items():
        if k != "flags":
            float(v)
    assert b"nan" not in raw.lower() and b"np." not in raw
    man = json.loads((tmp_path / "manifest.json").read_text())
    entry = man["runs"]["run"]
    assert entry["config_hash"] == small.hash()
    assert entry["schema_version"] == SCHEMA_VERSION
    assert SweepConfig.from_dict(entry["config"]) == small
    # a second bundle merges into the same manifest
    ResultBundle("other", small, [], []).write(tmp_path)
    assert set(json.loads((tmp_path / "manifest.json").read_text())["runs"]) == {"run", "other"}


def test_far_plane_columns():
    r = run_point(small.replace(plane_mode="both", n_trajectories=0))
    row = point_row(r)
    assert "tau_R_OR_far_fs" in row and row["tau_R_OR_far_fs"] != ""
    assert row["tau_R_B_far_fs"] == "" and r.bohm is None
    # reflection measured further out takes longer
    assert r.orr_far.tau_R_OR > r.orr.tau_R_OR


def _fake(sigma, tau):
    cfg = SweepConfig(sigma=sigma)
    return PointResult(cfg, orr=SimpleNamespace(tau_T_OR=tau), meta={"converged": True})


def test_feasibility_ratio_scales_with_sigma():
    base = SweepConfig(axis="energy")
    b = ResultBundle("sweep_energy", base, [_fake(6.0, 1.0), _fake(12.0, 1.0)], [])
    rows = feasibility(base, b).rows
    r6, r12 = (float(r["ratio"]) for r in rows)
    assert r12 == 2 * r6
    assert float(rows[0]["dx_over_v0_fs"]) * 2 == float(rows[1]["dx_over_v0_fs"])


def test_feasibility_absent_time():
    base = SweepConfig(axis="energy")
    b = ResultBundle("sweep_energy", base, [_fake(6.0, None)], [])
    row = feasibility(base, b).rows[0]
    assert row["ratio"] == "" and row["tau_T_OR_fs"] == ""
    assert "no_transmission" in row["flags"]
