import csv

import numpy as np
import pytest

from msgfem import cli
from msgfem import experiments as ex
from msgfem.grid_fem import read_nodal_csv


def _small(tmp_path, **kw):
    base = dict(mesh_n=50, m=3, ell_list=[0, 2], nloc_list=[2, 3, 4, 5], s_list=[20], output_dir=str(tmp_path))
    base.update(kw)
    return ex.config_from_mapping(base).validate()


def test_parse_list():
    assert ex._parse_list("0,4, 8") == [0, 4, 8]
    assert ex._parse_list("2..5") == [2, 3, 4, 5]
    assert ex._parse_list("auto,40") == ["auto", 40]
    with pytest.raises(ValueError):
        ex._parse_list("x")


def test_load_config_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# sweep setup\nmesh_n = 50\nexample = HighContrast  # inline comment\nell_list = 0..2\n"
                    "s_list = auto\n")
    cfg = ex.load_config(path)
    assert (cfg.mesh_n, cfg.example, cfg.ell_list, cfg.s_list) == (50, "HighContrast", [0, 1, 2], ["auto"])
    over = ex.config_from_mapping({"mesh-n": "100", "seed": None}, cfg)
    assert over.mesh_n == 100 and over.example == "HighContrast" and cfg.mesh_n == 50
    assert over.resolve_s("auto", 16) == 64 and over.resolve_s("auto", 5) == 40 and over.resolve_s(12, 5) == 12


@pytest.mark.parametrize("text", ["bogus = 1\n", "mesh_n = ten\n", "no equals sign\n"])
def test_load_config_errors(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ex.ConfigError):
        ex.load_config(path)


@pytest.mark.parametrize("kw", [dict(example="Other"), dict(mesh_n=30), dict(ell_list=[]), dict(nloc_list=[0]),
                                dict(s_list=[0]), dict(m=0)])
def test_validate_rejects(kw):
    cfg = ex.ExperimentConfig(**kw)
    with pytest.raises(ex.ConfigError):
        cfg.validate()


def test_nloc_sweep_records(tmp_path):
    cfg = _small(tmp_path)
    res = ex.run_nloc_sweep(cfg)
    assert not res.failures and len(res.records) == 8
    with open(res.csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ex.RECORD_COLUMNS
    assert rows[0] == ["example", "mesh_n", "seed", "m", "ell", "H", "Hstar", "rho", "n_loc", "s", "error",
                       "kappa", "kappastar", "wall_time_ms", "dropped_cols"]
    for r in res.records:
        assert r.rho == pytest.approx(r.H / r.Hstar) and 0 < r.rho <= 1
        assert r.error >= 0 and r.s == 20
    by_ell = {e: [r.error for r in res.records if r.ell == e] for e in (0, 2)}
    assert all(b <= a + 1e-10 for a, b in zip(by_ell[0], by_ell[0][1:]))


def test_sweep_matches_standalone_solve(tmp_path):
    from msgfem.gfem import relative_energy_error, solve_msgfem

    cfg = _small(tmp_path, ell_list=[2], nloc_list=[3, 5])
    ctx = ex.ExperimentContext(cfg)
    res = ex.run_rho_sweep(cfg, ctx, write=False)
    assert res.csv_path is None
    for rec in res.records:
        sol = solve_msgfem(ctx.problem, ctx.decomposition(2), rec.n_loc, s=20)
        assert rec.error == pytest.approx(relative_energy_error(ctx.problem.K, ctx.u_h, sol.u_G), rel=1e-8)


def _strip_wall_time(path):
    lines = []
    with open(path) as fh:
        for row in csv.reader(fh):
            lines.append(row[:13] + row[14:])
    return lines


def test_reproducible_csv(tmp_path):
    a = ex.run_s_sweep(_small(tmp_path / "a", s_list=[10, 20, 30]))
    b = ex.run_s_sweep(_small(tmp_path / "b", s_list=[10, 20, 30]))
    assert len(a.records) == 3
    assert _strip_wall_time(a.csv_path) == _strip_wall_time(b.csv_path)


def test_field_dump(tmp_path):
    cfg = _small(tmp_path, ell_list=[3], nloc_list=[6], s_list=[24])
    res = ex.run_field_dump(cfg)
    rec = res.records[0]
    tag = "RandomField_m3_ell3_nloc6_s24"
    u_h = read_nodal_csv(tmp_path / f"u_h_{tag}.csv")
    u_G = read_nodal_csv(tmp_path / f"u_G_{tag}.csv")
    err = read_nodal_csv(tmp_path / f"abs_error_{tag}.csv")
    assert u_h.shape == (51 * 51, 3)
    np.testing.assert_array_equal(err[:, 2], np.abs(u_h[:, 2] - u_G[:, 2]))
    ctx = ex.ExperimentContext(cfg)
    recomputed = ex.energy_norm(ctx.problem.K, u_h[:, 2] - u_G[:, 2]) / ex.energy_norm(ctx.problem.K, u_h[:, 2])
    assert abs(recomputed - rec.error) <= 1e-10
    assert res.csv_path.exists()


def test_fit_line():
    slope, icpt, r2 = ex.fit_line([0, 1, 2, 3], [1, 3, 5, 7])
    assert (slope, icpt, r2) == pytest.approx((2.0, 1.0, 1.0))
    assert ex.fit_line([0, 1, 2], [1, 0, 1])[2] == pytest.approx(0.0)


def test_cli_sweep_and_selftest(tmp_path, capsys):
    rc = cli.main(["nloc-sweep", "--mesh-n", "50", "--m", "3", "--ell", "0", "--nloc", "2..3", "--s", "12",
                   "--out", str(tmp_path)])
    assert rc == cli.EXIT_OK
    assert (tmp_path / "nloc_sweep_RandomField.csv").exists()
    assert cli.main(["selftest"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "PASS full_space_exactness" in out and "FAIL" not in out


def test_cli_field_dump_defaults(tmp_path):
    rc = cli.main(["field-dump", "--mesh-n", "50", "--example", "HighContrast", "--out", str(tmp_path)])
    assert rc == cli.EXIT_OK
    assert (tmp_path / "u_G_HighContrast_m4_ell10_nloc20_s80.csv").exists()


def test_cli_config_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("mesh_n = 37\n")
    assert cli.main(["s-sweep", "--config", str(cfg)]) == cli.EXIT_CONFIG
    assert cli.main(["s-sweep", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_record_failure_exit_code(tmp_path, monkeypatch):
    real = ex.build_coarse_system

    def flaky(ctx, ell, s, n_max):
        if s == 12:
            raise RuntimeError("synthetic failure")
        return real(ctx, ell, s, n_max)

    monkeypatch.setattr(ex, "build_coarse_system", flaky)
    rc = cli.main(["s-sweep", "--mesh-n", "50", "--m", "3", "--ell", "1", "--nloc", "3", "--s", "12,16",
                   "--out", str(tmp_path)])
    assert rc == cli.EXIT_RECORD
    rows = ex.read_records(tmp_path / "s_sweep_RandomField.csv")
    assert [r["s"] for r in rows] == ["16"]


def test_workers_give_identical_records(tmp_path):
    serial = ex.run_nloc_sweep(_small(tmp_path / "a"), write=False).records
    threaded = ex.run_nloc_sweep(_small(tmp_path / "b", workers=3), write=False).records
    assert [r.error for r in serial] == [r.error for r in threaded]
