import numpy as np
import pytest

from lacar.cli import main
from lacar.graph import lattice_graph, write_edge_list
from lacar.io import write_data


@pytest.fixture
def inputs(tmp_path):
    g = lattice_graph(5, 5)
    rng = np.random.default_rng(1)
    x = rng.normal(size=25)
    y = rng.poisson(30 * np.exp(0.2 * x)).astype(float)
    write_edge_list(tmp_path / "adj.edges", g.edges, g.n)
    write_data(tmp_path / "data.csv", y, np.log(np.full(25, 30.0)), x[:, None], ("x",))
    return tmp_path


def run(tmp, *argv):
    return main([*argv, "--adjacency", str(tmp / "adj.edges"), "--out-dir", str(tmp / "out")])


def body(path):
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]


class TestFit:
    def test_outputs(self, inputs):
        assert run(inputs, "fit", "--data", str(inputs / "data.csv"), "--n-perm", "99") == 0
        rows = body(inputs / "out" / "fit_areas.csv")
        assert rows[0] == "area_id,phi_median,phi_lo,phi_hi,mu_median,risk_median"
        assert len(rows) == 26
        assert [r.split(",")[0] for r in rows[1:]] == [str(k) for k in range(25)]
        summ = (inputs / "out" / "fit_summary.tsv").read_text()
        for key in ("dic", "p_d", "overdispersion", "moran_i", "moran_p", "rho", "tau"):
            assert f"\t{key}\t" in summ or f"{key}\t" in summ
        head = (inputs / "out" / "fit_areas.csv").read_text().splitlines()[:2]
        assert "numpy" in head[0] and "seed=0" in head[1] and "config=" in head[1]

    def test_rerun_is_byte_identical(self, inputs):
        args = ["fit", "--data", str(inputs / "data.csv"), "--n-perm", "99", "--seed", "4"]
        assert run(inputs, *args) == 0
        first = {p.name: p.read_bytes() for p in (inputs / "out").iterdir()}
        assert run(inputs, *args) == 0
        second = {p.name: p.read_bytes() for p in (inputs / "out").iterdir()}
        assert first == second

    def test_fixed_rho(self, inputs):
        assert run(inputs, "fit", "--data", str(inputs / "data.csv"), "--rho", "fixed:0.5", "--n-perm", "0") == 0
        row = [r for r in body(inputs / "out" / "fit_summary.tsv") if r.startswith("hyper\trho\t")][0]
        assert row.split("\t")[2:6] == ["0.5"] * 4

    def test_malformed_data(self, inputs, capsys):
        (inputs / "bad.csv").write_text("area_id,y,offset\n0,1,0\n1,oops,0\n")
        assert run(inputs, "fit", "--data", str(inputs / "bad.csv")) == 3
        assert "bad.csv:3" in capsys.readouterr().err

    def test_missing_file(self, inputs):
        assert run(inputs, "fit", "--data", str(inputs / "nope.csv")) == 3

    def test_binomial_trials_below_count(self, inputs, capsys):
        y = np.full(25, 3.0)
        n = np.full(25, 10.0)
        n[7] = 2.0
        write_data(inputs / "bin.csv", y, np.zeros(25), trials=n)
        assert run(inputs, "fit", "--data", str(inputs / "bin.csv"), "--family", "binomial") == 4
        assert "area 7" in capsys.readouterr().err

    @pytest.mark.parametrize("argv", [
        ["fit", "--rho", "sometimes"],
        ["fit", "--rho", "fixed:1.5"],
        ["fit", "--backend", "mcmc", "--mcmc-iter", "10", "--mcmc-burn", "10"],
        ["fit", "--n-perm", "-1"],
    ])
    def test_usage_errors(self, inputs, argv):
        with pytest.raises(SystemExit) as exc:
            run(inputs, *argv, "--data", str(inputs / "data.csv"))
        assert exc.value.code == 2


class TestBoundaries:
    def test_flat_data_has_no_boundaries(self, inputs):
        write_data(inputs / "flat.csv", np.full(25, 30.0), np.log(np.full(25, 30.0)))
        assert run(inputs, "boundaries", "--data", str(inputs / "flat.csv")) == 0
        out = inputs / "out"
        assert body(out / "boundaries.edges") == []
        assert body(out / "risk_differences.tsv") == ["k\tj\tabs_risk_difference"]
        log = body(out / "trace.log")
        assert log[-1].startswith("termination=steady_state")
        assert (out / "final_fit_areas.csv").exists()

    def test_step_is_found(self, inputs):
        g = lattice_graph(5, 5)
        y = np.where(np.arange(25) % 5 < 2, 40.0, 120.0)
        write_data(inputs / "step.csv", y, np.log(np.full(25, 40.0)))
        assert run(inputs, "boundaries", "--data", str(inputs / "step.csv")) == 0
        rows = body(inputs / "out" / "risk_differences.tsv")[1:]
        got = {tuple(map(int, r.split("\t")[:2])) for r in rows}
        cut = {tuple(e) for e in g.edges.tolist() if (e[0] % 5 < 2) != (e[1] % 5 < 2)}
        assert got == cut
        d = [float(r.split("\t")[2]) for r in rows]
        assert d == sorted(d, reverse=True)


class TestDiagnose:
    def test_runs(self, inputs):
        assert run(inputs, "diagnose", "--data", str(inputs / "data.csv"), "--n-perm", "49") == 0
        assert len(body(inputs / "out" / "diagnose_areas.csv")) == 26
        assert "moran_p" in (inputs / "out" / "diagnose_summary.tsv").read_text()


class TestSimulate:
    @pytest.fixture
    def template(self, tmp_path):
        from lacar.simulate import Template, write_template

        g = lattice_graph(6, 6)
        lab = np.zeros((6, 6), dtype=np.int64)
        lab[2:4, 2:4] = 1
        write_template(tmp_path / "tpl", Template(g, lab.ravel()))
        return tmp_path / "tpl"

    def test_scenario_a(self, template, tmp_path):
        out = tmp_path / "sa"
        code = main(["simulate", "--template", str(template), "--replicates", "2", "--max-iterations", "6",
                     "--out-dir", str(out), "--threads", "1", "--export-data"])
        assert code == 0
        metrics = body(out / "metrics.tsv")
        assert metrics[0].split("\t")[1:] == ["global-leroux", "adaptive"]
        assert len(body(out / "replicates.tsv")) == 1 + 2 * 2
        term = body(out / "termination.txt")
        hist = term[term.index("iterations\tcount") + 1:]
        assert [int(r.split("\t")[0]) for r in hist] == list(range(1, 7))
        assert sum(int(r.split("\t")[1]) for r in hist) + sum(
            1 for r in body(out / "replicates.tsv")[1:] if r.split("\t")[1] == "adaptive"
            and r.split("\t")[-1] != "NA") == 2
        assert (out / "data" / "replicate_0001.csv").exists()

    def test_scenario_b_has_no_ba(self, template, tmp_path):
        out = tmp_path / "sb"
        assert main(["simulate", "--template", str(template), "--scenario", "B", "--replicates", "1",
                     "--models", "adaptive", "--out-dir", str(out), "--threads", "1"]) == 0
        ba = [r for r in body(out / "metrics.tsv") if r.startswith("Boundary agreement")]
        assert ba and ba[0].split("\t")[1] in ("unavailable", "NA")
        nba = [r for r in body(out / "metrics.tsv") if r.startswith("Non-boundary agreement")]
        assert float(nba[0].split("\t")[1]) >= 0
