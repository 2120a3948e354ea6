import pytest

from hqp.cli import EXIT_CONSTRAINT, EXIT_IO, main
from hqp.report import read_report_csv
from hqp.serialize import load_model

TINY = """\
arch = convnet
width_multiplier = 0.25
train_size = 400
calib_size = 40
val_size = 100
holdout_size = 100
epochs = 2
reps = 2
warmup = 1
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    assert main(["train", "--config", str(d / "tiny.cfg"), "--out", str(d / "m.hqpm")]) == 0
    return d


def run(work, *argv):
    return main([argv[0], "--config", str(work / "tiny.cfg"), *argv[1:]])


class TestCLI:
    def test_train_writes_model(self, work, capsys):
        assert load_model(work / "m.hqpm").name .startswith("mini_convnet")

    def test_sensitivity_then_prune(self, work, capsys):
        assert run(work, "sensitivity", "--model", str(work / "m.hqpm"),
                   "--out", str(work / "s.txt")) == 0
        assert run(work, "prune", "--model", str(work / "m.hqpm"), "--sensitivity",
                   str(work / "s.txt"), "--delta-max", "0.05", "--out", str(work / "p.hqpm")) == 0
        assert "theta" in capsys.readouterr().out
        assert (work / "p.history").exists()
        assert not load_model(work / "p.hqpm").quantized

    def test_quantize_and_bench(self, work, capsys):
        assert run(work, "quantize", "--model", str(work / "m.hqpm"),
                   "--out", str(work / "q.hqpm")) == 0
        assert load_model(work / "q.hqpm").quantized
        assert run(work, "bench", "--model", str(work / "q.hqpm")) == 0
        assert "p95/p50" in capsys.readouterr().out

    def test_hqp(self, work, capsys):
        assert run(work, "hqp", "--model", str(work / "m.hqpm"), "--out", str(work / "h.hqpm")) == 0
        out = capsys.readouterr().out
        assert "int8 holdout accuracy" in out and "grad_passes=40" in out

    def test_report(self, work, capsys):
        assert run(work, "report", "--model", str(work / "m.hqpm"),
                   "--out", str(work / "r.txt")) == 0
        rows = read_report_csv(work / "r.csv")
        assert [r.method for r in rows] == ["FP32", "Q8", "P50", "HQP"]
        assert "Baseline (FP32)" in (work / "r.txt").read_text()

    def test_compare_cost(self, work, capsys):
        assert main(["compare-cost", "--c-grad", "3", "--c-inf", "1", "--t-prune", "10",
                     "--n-calib", "1000", "--n-val", "1000", "--n-train", "100000"]) == 0
        assert "C_QAT/C_HQP 115.38" in capsys.readouterr().out

    def test_compare_cost_measured(self, work, capsys):
        assert run(work, "compare-cost", "--model", str(work / "m.hqpm"), "--t-prune", "2") == 0


class TestExitCodes:
    def test_missing_model(self, work, capsys):
        assert run(work, "bench") == EXIT_IO
        assert "needs --model" in capsys.readouterr().err

    def test_corrupt_model(self, work):
        (work / "bad.hqpm").write_bytes(b"not a model")
        assert run(work, "bench", "--model", str(work / "bad.hqpm")) == EXIT_IO

    def test_bad_config(self, tmp_path):
        (tmp_path / "c.cfg").write_text("widht = 3\n")
        assert main(["train", "--config", str(tmp_path / "c.cfg")]) == EXIT_IO

    def test_bad_sensitivity_file(self, work):
        (work / "junk.txt").write_text("0 0 nan\n")
        code = run(work, "prune", "--model", str(work / "m.hqpm"),
                   "--sensitivity", str(work / "junk.txt"))
        assert code in (EXIT_CONSTRAINT, EXIT_IO)

    def test_bits_constraint(self, work):
        assert run(work, "quantize", "--model", str(work / "m.hqpm"), "--bits", "1",
                   "--out", str(work / "x.hqpm")) == EXIT_CONSTRAINT
