import logging
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lacar import simulate
from lacar.adaptive import AdaptiveConfig
from lacar.errors import ModelError, NumericalError, ParseError
from lacar.graph import lattice_graph
from lacar.inference import GridConfig
from lacar.simulate import (
    SimScenario,
    Template,
    calibrate_range,
    default_template,
    generate,
    matern_covariance,
    read_template,
    run_study,
    write_template,
)


def small_template():
    g = lattice_graph(5, 5)
    lab = np.zeros((5, 5), dtype=np.int64)
    lab[1:3, 1:3] = 1
    return Template(g, lab.ravel())


FAST = GridConfig(n_rho=7, n_tau=7, refine=False, n_draws=200)


class TestMatern:
    def test_zero_distance_is_variance(self):
        c = matern_covariance([[0, 0], [3, 4]], 2.0, variance=1.7)
        np.testing.assert_allclose(np.diag(c), 1.7)

    def test_closed_form_entry(self):
        d, ell = 5.0, 2.0
        s = np.sqrt(5) * d / ell
        c = matern_covariance([[0, 0], [3, 4]], ell, variance=2.0)
        assert c[0, 1] == pytest.approx(2.0 * (1 + s + s * s / 3) * np.exp(-s), rel=1e-14)

    def test_monotone_decay(self):
        d = np.linspace(0, 50, 200)
        r = simulate.matern_correlation(d, 3.0)
        assert np.all(np.diff(r) < 0) and r[-1] < 1e-6

    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 20.0))
    def test_positive_semidefinite(self, seed, ell):
        pts = np.random.default_rng(seed).uniform(0, 10, (5, 2))
        assert np.linalg.eigvalsh(matern_covariance(pts, ell)).min() >= -1e-10

    def test_duplicates_flagged(self, caplog):
        with caplog.at_level(logging.WARNING, logger="lacar.simulate"):
            c = matern_covariance([[0, 0], [0, 0], [1, 1]], 1.0)
        assert c[0, 1] == pytest.approx(1.0)
        assert "duplicate" in caplog.text


class TestCalibration:
    def test_two_points(self):
        ell = calibrate_range([[0, 0], [2, 0]])
        assert simulate.matern_correlation(2.0, ell) == pytest.approx(0.5, abs=1e-3)

    def test_mean_correlation_monotone_in_range(self):
        pts = np.random.default_rng(0).uniform(0, 10, (20, 2))
        vals = [simulate.mean_correlation(pts, ell) for ell in np.geomspace(0.1, 100, 30)]
        assert np.all(np.diff(vals) > 0)

    def test_unattainable(self):
        with pytest.raises(ModelError, match="unattainable"):
            calibrate_range([[0, 0], [1, 0], [5, 5]], target=1.0)

    def test_default_lattice(self):
        t = default_template()
        ell = simulate.scenario_range(t, SimScenario())
        assert simulate.mean_correlation(t.graph.coords, ell) == pytest.approx(0.5, abs=1e-3)


class TestTemplate:
    def test_default_counts(self):
        t = default_template()
        assert t.n == 400 and t.graph.m == 760
        assert t.elevated.sum() == 53
        assert t.true_boundary.sum() == 70
        assert 0.08 <= t.true_boundary.mean() <= 0.12

    def test_boundary_brute_force(self):
        t = default_template()
        brute = np.array([(t.group[k] == 0) != (t.group[j] == 0) for k, j in t.graph.edges])
        np.testing.assert_array_equal(t.true_boundary, brute)

    def test_file_round_trip(self, tmp_path):
        t = small_template()
        areas, edges = write_template(tmp_path / "t", t)
        u = read_template(areas, edges)
        np.testing.assert_array_equal(u.group, t.group)
        np.testing.assert_array_equal(u.graph.edges, t.graph.edges)
        np.testing.assert_array_equal(u.graph.coords, t.graph.coords)

    @pytest.mark.parametrize("body,line", [
        ("area_id,x,y,group\n0,0,0,0\n1,1,0\n", 3),
        ("area_id,x,y,group\n0,0,0,0\n2,1,0,1\n", 3),
        ("area_id,x,y,group\n0,0,zero,0\n", 2),
        ("id,x,y\n", 1),
    ])
    def test_bad_area_file(self, tmp_path, body, line):
        (tmp_path / "a.csv").write_text(body)
        (tmp_path / "e.edges").write_text("0 1\n")
        with pytest.raises(ParseError) as exc:
            read_template(tmp_path / "a.csv", tmp_path / "e.edges")
        assert exc.value.line == line


class TestScenario:
    def test_named(self):
        assert SimScenario.named("a").m == 1.0 and SimScenario.named("B").m == 0.0
        with pytest.raises(ValueError):
            SimScenario.named("C")
        with pytest.raises(ValueError):
            SimScenario(m=-1)


class TestGenerate:
    def test_degenerate_field(self):
        t = small_template()
        d = generate(t, SimScenario(m=0.0, include_covariate=False, variance=0.0, range=1.0), 0)
        np.testing.assert_allclose(d.mu, 40.0)
        assert d.design.shape == (25, 1) and d.beta.size == 0

    def test_seeded_bit_identical(self):
        t = small_template()
        a = generate(t, SimScenario(), np.random.default_rng(3))
        b = generate(t, SimScenario(), np.random.default_rng(3))
        for f in ("y", "phi", "mu", "design"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_linear_predictor(self):
        t = small_template()
        d = generate(t, SimScenario(), 1)
        np.testing.assert_allclose(np.log(d.mu), np.log(40) + 0.1 * d.design[:, 1] + d.phi, rtol=1e-13)
        np.testing.assert_array_equal(d.offset, 0.0)
        np.testing.assert_array_equal(d.boundary, t.true_boundary)
        assert d.boundary.any()

    def test_field_moments(self):
        t = small_template()
        sc = replace(SimScenario(m=1.0), range=simulate.scenario_range(t, SimScenario()))
        rng = np.random.default_rng(4)
        phi = np.array([generate(t, sc, rng).phi for _ in range(3000)])
        mean = np.where(t.elevated, 1.0, 0.0)
        se = phi.std(axis=0, ddof=1) / np.sqrt(len(phi))
        assert np.all(np.abs(phi.mean(axis=0) - mean) < 3 * se + 1e-12)
        cov = matern_covariance(t.graph.coords, sc.range)
        r = np.corrcoef(phi[:, 0], phi[:, 12])[0, 1]
        assert abs(r - cov[0, 12]) < 3 * (1 - cov[0, 12] ** 2) / np.sqrt(len(phi))

    def test_duplicate_coordinates_jittered(self):
        t = Template(lattice_graph(1, 2).with_coords([[0, 0], [0, 0]]), np.zeros(2))
        d = generate(t, SimScenario(range=1.0), 0)
        assert d.phi[0] == pytest.approx(d.phi[1], abs=1e-4)

    def test_no_true_boundaries_without_step(self):
        d = generate(small_template(), SimScenario.named("B"), 0)
        assert not d.boundary.any()


class TestStudy:
    def test_single_replicate_both_models(self):
        res = run_study(small_template(), SimScenario(), 1, seed=0, grid=FAST)
        assert set(res.reports) == {"global-leroux", "adaptive"}
        assert all(r.n_replicates == 1 for r in res.reports.values())
        assert sum(res.termination.values()) == 1

    def test_independent_of_workers(self):
        kw = dict(seed=5, grid=FAST, adaptive_config=AdaptiveConfig(grid=FAST))
        a = run_study(small_template(), SimScenario(), 3, **kw)
        b = run_study(small_template(), SimScenario(), 3, workers=2, **kw)
        for m in a.reports:
            assert a.reports[m].as_dict() == b.reports[m].as_dict()

    def test_scenario_b_has_no_ba(self):
        res = run_study(small_template(), SimScenario.named("B"), 1, models=("adaptive",), grid=FAST)
        rep = res.reports["adaptive"]
        assert rep.ba is None and rep.nba is not None

    def test_failures_counted(self, monkeypatch):
        def boom(*a, **k):
            raise NumericalError("forced")

        monkeypatch.setattr(simulate.adaptive, "run", boom)
        res = run_study(small_template(), SimScenario(), 2, grid=FAST)
        assert "adaptive" not in res.reports
        assert [(i, m) for i, m, _ in res.failures] == [(0, "adaptive"), (1, "adaptive")]
        assert res.reports["global-leroux"].n_replicates == 2

    def test_termination_histogram_bins(self):
        res = run_study(small_template(), SimScenario(), 1, models=("adaptive",), grid=FAST)
        text = res.termination_summary(7)
        rows = text.split("iterations\tcount\n")[1].strip().splitlines()
        assert [int(r.split("\t")[0]) for r in rows] == list(range(1, 8))
