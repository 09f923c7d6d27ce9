import csv
import math
import subprocess
import sys

import pytest

from measync.cli import main
from measync.io import load_graph, load_result, read_trace


def synth(tmp_path, *extra, name="data"):
    out = tmp_path / name
    code = main(["synth", "--out-dir", str(out), *extra])
    return code, out


def read_metrics(path):
    with open(path, newline="") as fh:
        return {r["metric"]: float(r["value"]) for r in csv.DictReader(fh)}


class TestSynth:
    def test_protocol_counts(self, tmp_path, capsys):
        code, out = synth(tmp_path, "--n", "10", "--k", "3", "--mode", "he", "--sigma", "0",
                          "--completeness", "1.0", "--seed", "7")
        assert code == 0
        graph, meta = load_graph(out / "graph.json")
        assert len(graph.edges) == 45
        assert all(len(mu) == 9 for _, _, mu in graph.edges)
        assert meta["seed"] == 7
        assert "edges=45 atoms/edge=9" in capsys.readouterr().out
        truth = load_result(out / "truth.json")
        assert truth.n_cameras == 10

    def test_minimal(self, tmp_path):
        code, out = synth(tmp_path, "--n", "2", "--k", "1")
        graph, _ = load_graph(out / "graph.json")
        assert code == 0 and len(graph.edges) == 1 and len(graph.edges[0][2]) == 1

    def test_byte_identical(self, tmp_path):
        flags = ["--n", "5", "--k", "2", "--sigma", "0.02", "--completeness", "0.7", "--seed", "3"]
        _, a = synth(tmp_path, *flags, name="a")
        _, b = synth(tmp_path, *flags, name="b")
        for f in ("graph.json", "truth.json"):
            assert (a / f).read_bytes() == (b / f).read_bytes()

    def test_usage_errors(self, tmp_path):
        assert synth(tmp_path, "--mode", "mixed")[0] == 2
        assert synth(tmp_path, "--n", "ten")[0] == 2
        assert synth(tmp_path, "--n", "1")[0] == 2

    def test_impossible_completeness_is_usage_error(self, tmp_path):
        code, _ = synth(tmp_path, "--n", "10", "--k", "1", "--completeness", "0.05")
        assert code == 2


class TestSync:
    def run_sync(self, tmp_path, graph, *extra, name="run"):
        out = tmp_path / name
        return main(["sync", "--graph", str(graph), "--out-dir", str(out), *extra]), out

    def test_writes_result_and_trace(self, tmp_path):
        _, data = synth(tmp_path, "--n", "4", "--k", "2", "--seed", "1")
        code, out = self.run_sync(tmp_path, data / "graph.json", "--k", "3", "--max-iter", "23",
                                  "--trace-stride", "5", "--gauge", str(data / "truth.json"))
        assert code == 0
        res = load_result(out / "result.json")
        assert res.iterations == 23 and res.n_cameras == 4
        assert res.config["alpha"] == 0.05 and res.config["cost"]["p"] == 1.2
        assert len(res.converged_flags) == 6 and all(res.converged_flags)
        rows = read_trace(out / "trace.csv")
        assert len(rows) == 1 + math.ceil(23 / 5)
        assert rows[-1][1] == res.final_loss

    def test_classical_k1(self, tmp_path):
        _, data = synth(tmp_path, "--n", "4", "--k", "1", "--seed", "2")
        code, out = self.run_sync(tmp_path, data / "graph.json", "--k", "1", "--max-iter", "10")
        assert code == 0
        res = load_result(out / "result.json")
        assert all(len(b) == 1 for b in res.coupling.beliefs)

    def test_incompatible_flags(self, tmp_path):
        _, data = synth(tmp_path, "--n", "3", "--k", "1")
        code, _ = self.run_sync(tmp_path, data / "graph.json", "--step-rule", "invw")
        assert code == 2
        code, _ = self.run_sync(tmp_path, data / "graph.json", "--loss", "mmd", "--constrained", "false")
        assert code == 2

    def test_le_without_gauge(self, tmp_path):
        _, data = synth(tmp_path, "--n", "3", "--k", "2", "--mode", "le")
        code, _ = self.run_sync(tmp_path, data / "graph.json", "--mode", "le", "--k", "2")
        assert code == 2

    def test_missing_graph(self, tmp_path):
        code, _ = self.run_sync(tmp_path, tmp_path / "nope.json")
        assert code == 1

    def test_unconverged_exit_code(self, tmp_path):
        _, data = synth(tmp_path, "--n", "3", "--k", "2", "--seed", "4")
        code, out = self.run_sync(tmp_path, data / "graph.json", "--max-iter", "2", "--alpha", "0.01",
                                  "--gauge", str(data / "truth.json"), "--k", "4")
        flags = load_result(out / "result.json").converged_flags
        assert code == (0 if all(flags) else 3)

    def test_mmd_unconstrained(self, tmp_path):
        _, data = synth(tmp_path, "--n", "3", "--k", "2", "--seed", "5")
        code, out = self.run_sync(tmp_path, data / "graph.json", "--loss", "mmd", "--constrained", "no",
                                  "--lambda", "0.1", "--step-rule", "invw", "--max-iter", "5",
                                  "--gauge", str(data / "truth.json"))
        assert code == 0
        assert load_result(out / "result.json").config["step_rule"] == "inverse_weight"


class TestEval:
    def test_truth_against_itself(self, tmp_path, capsys):
        _, data = synth(tmp_path, "--n", "4", "--k", "3", "--seed", "6")
        out = tmp_path / "m.csv"
        code = main(["eval", "--result", str(data / "truth.json"), "--truth", str(data / "truth.json"),
                     "--out", str(out)])
        assert code == 0
        m = read_metrics(out)
        assert list(m) == ["avg_min_geo_truth2est", "avg_min_geo_est2truth", "sinkhorn_error", "final_loss"]
        assert m["avg_min_geo_truth2est"] == 0.0 and m["avg_min_geo_est2truth"] == 0.0
        assert abs(m["sinkhorn_error"]) < 1e-6

    def test_stable_and_nonnegative(self, tmp_path):
        _, data = synth(tmp_path, "--n", "4", "--k", "2", "--seed", "7")
        _, run = TestSync().run_sync(tmp_path, data / "graph.json", "--max-iter", "5",
                                     "--gauge", str(data / "truth.json"))
        args = ["eval", "--result", str(run / "result.json"), "--truth", str(data / "truth.json")]
        assert main(args) == 0
        first = read_metrics(run / "metrics.csv")
        assert main(args) == 0
        second = read_metrics(run / "metrics.csv")
        for k in first:
            assert second[k] == pytest.approx(first[k], abs=1e-12)
        assert first["avg_min_geo_truth2est"] >= 0 and first["avg_min_geo_est2truth"] >= 0

    def test_camera_mismatch(self, tmp_path):
        _, a = synth(tmp_path, "--n", "4", "--k", "2", name="a")
        _, b = synth(tmp_path, "--n", "5", "--k", "2", name="b")
        assert main(["eval", "--result", str(a / "truth.json"), "--truth", str(b / "truth.json")]) == 2


class TestSweep:
    def test_long_format(self, tmp_path):
        out = tmp_path / "sw"
        code = main(["sweep", "--axis", "noise", "--values", "0,0.01", "--repeats", "2", "--n", "3",
                     "--k-true", "1", "--k", "2", "--max-iter", "3", "--out-dir", str(out)])
        assert code == 0
        with open(out / "sweep.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 2 * 4 * 4
        assert {r["variant"] for r in rows} == {"mmd:euc", "mmd:geo", "sinkhorn:euc", "sinkhorn:geo"}
        assert all(r["metric"] != "failed" for r in rows)

    def test_single_cell_matches_sync_and_eval(self, tmp_path):
        out = tmp_path / "sw"
        common = ["--n", "4", "--mode", "he", "--sigma", "0.01", "--completeness", "1.0",
                  "--seed", "3"]
        assert main(["sweep", "--axis", "particles", "--values", "2", "--variants", "sinkhorn:geo",
                     "--k-true", "2", "--max-iter", "15", "--out-dir", str(out), *common]) == 0
        with open(out / "sweep.csv", newline="") as fh:
            swept = {r["metric"]: float(r["value"]) for r in csv.DictReader(fh)}
        _, data = synth(tmp_path, *common, "--k", "2")
        run = tmp_path / "run"
        assert main(["sync", "--graph", str(data / "graph.json"), "--k", "2", "--max-iter", "15",
                     "--seed", "3", "--gauge", str(data / "truth.json"), "--out-dir", str(run)]) == 0
        assert main(["eval", "--result", str(run / "result.json"), "--truth", str(data / "truth.json")]) == 0
        direct = read_metrics(run / "metrics.csv")
        for k in direct:
            assert swept[k] == pytest.approx(direct[k], abs=1e-12)

    def test_failed_cells_marked(self, tmp_path):
        out = tmp_path / "sw"
        code = main(["sweep", "--axis", "sparsity", "--values", "0.05", "--n", "10", "--k-true", "1",
                     "--k", "1", "--max-iter", "2", "--variants", "mmd:euc", "--out-dir", str(out)])
        assert code == 0
        with open(out / "sweep.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["metric"] for r in rows] == ["failed"]

    def test_unknown_variant(self, tmp_path):
        assert main(["sweep", "--axis", "noise", "--values", "0", "--variants", "kl:geo",
                     "--out-dir", str(tmp_path)]) == 2

    def test_threads_do_not_change_rows(self, tmp_path, monkeypatch):
        args = ["sweep", "--axis", "iters", "--values", "2,4", "--n", "3", "--k-true", "1", "--k", "2"]
        monkeypatch.setenv("MEASYNC_THREADS", "1")
        assert main([*args, "--out-dir", str(tmp_path / "one")]) == 0
        monkeypatch.setenv("MEASYNC_THREADS", "3")
        assert main([*args, "--out-dir", str(tmp_path / "three")]) == 0
        assert (tmp_path / "one" / "sweep.csv").read_bytes() == (tmp_path / "three" / "sweep.csv").read_bytes()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "measync", "synth", "--n", "2", "--k", "1",
                           "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "edges=1" in proc.stdout
    bad = subprocess.run([sys.executable, "-m", "measync", "frobnicate"], capture_output=True, text=True)
    assert bad.returncode == 2
