import csv

import numpy as np
import pytest

from otml.checkpoint import load_checkpoint
from otml.cli import main, parse_problem, read_dataset
from otml.config import KEYS
from otml.exceptions import FormatError

SMALL = [
    "--set", "model.image_size=16",
    "--set", "model.blocks=8:3:2,16:3:2",
    "--set", "model.expander=32,32",
    "--set", "model.n_tokens=4",
    "--set", "train.batch_size=8",
]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    directory = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(directory), "--n", "24", "--size", "16", "--seed", "1"]) == 0
    return directory


class TestGenData:
    def test_files_and_labels(self, tmp_path, capsys):
        code, _, _ = run(capsys, "gen-data", "--out", tmp_path, "--n", 8, "--classes", 4)
        assert code == 0
        assert len(list(tmp_path.glob("*.pgm"))) == 8
        with open(tmp_path / "labels.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["filename", "label"] and len(rows) == 9
        assert [int(r[1]) for r in rows[1:]] == [0, 1, 2, 3, 0, 1, 2, 3]

    def test_same_seed_same_bytes(self, tmp_path, capsys):
        for name in ("a", "b"):
            run(capsys, "gen-data", "--out", tmp_path / name, "--n", 4, "--seed", 9)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_headers_report_size(self, tmp_path, capsys):
        run(capsys, "gen-data", "--out", tmp_path, "--n", 3, "--size", 32)
        for f in tmp_path.glob("*.pgm"):
            assert f.read_bytes().split(b"\n")[1] == b"32 32"

    def test_read_back(self, dataset):
        images, labels = read_dataset(dataset)
        assert images.shape == (24, 1, 16, 16) and len(labels) == 24


class TestPretrain:
    def test_smoke_run_writes_ten_rows(self, dataset, tmp_path, capsys):
        code, out, _ = run(capsys, "pretrain", "--data", dataset, "--out", tmp_path / "m.ckpt",
                           *SMALL, "--set", "train.steps=10")
        assert code == 0 and "trained 10 steps" in out
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert len(lines) == 11

    def test_zero_weights_keep_initial_parameters(self, dataset, tmp_path, capsys):
        common = [*SMALL, "--set", "model.alpha=0", "--set", "model.beta=0", "--set", "model.eta=0"]
        run(capsys, "pretrain", "--data", dataset, "--out", tmp_path / "init.ckpt", *common, "--set", "train.steps=0")
        run(capsys, "pretrain", "--data", dataset, "--out", tmp_path / "final.ckpt", *common, "--set", "train.steps=5")
        initial = load_checkpoint(tmp_path / "init.ckpt").tensors
        final = load_checkpoint(tmp_path / "final.ckpt").tensors
        for name, value in initial.items():
            if "running" not in name:
                assert final[name].tobytes() == value.tobytes(), name

    def test_config_file(self, dataset, tmp_path, capsys):
        (tmp_path / "c.ini").write_text("[train]\nsteps = 2\n")
        code, out, _ = run(capsys, "pretrain", "--config", tmp_path / "c.ini", "--data", dataset,
                           "--out", tmp_path / "m.ckpt", *SMALL)
        assert code == 0 and "trained 2 steps" in out

    def test_bad_override_exits_nonzero(self, dataset, tmp_path, capsys):
        code, _, err = run(capsys, "pretrain", "--data", dataset, "--out", tmp_path / "m.ckpt",
                           "--set", "train.nothing=1")
        assert code == 2 and "unknown config key" in err

    def test_help_lists_every_key(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["pretrain", "--help"])
        out = capsys.readouterr().out
        assert info.value.code == 0
        assert all(name in out for name in KEYS)


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "m.ckpt"
    assert main(["pretrain", "--data", str(dataset), "--out", str(path), *SMALL, "--set", "train.steps=2"]) == 0
    return path


class TestProbe:
    def test_frozen_probe_output(self, checkpoint, dataset, capsys):
        code, out, _ = run(capsys, "probe", "--ckpt", checkpoint, "--data", dataset, "--fraction", 1.0)
        assert code == 0
        cells = out.strip().split(",")
        assert cells[0] == "frozen"
        assert 0 <= float(cells[2]) <= 1 and 0 <= float(cells[3]) <= 1

    def test_repeatable(self, checkpoint, dataset, capsys):
        first = run(capsys, "probe", "--ckpt", checkpoint, "--data", dataset)[1]
        assert run(capsys, "probe", "--ckpt", checkpoint, "--data", dataset)[1] == first

    def test_invalid_fraction(self, checkpoint, tmp_path, capsys):
        run(capsys, "gen-data", "--out", tmp_path, "--n", 100, "--size", 16)
        code, _, err = run(capsys, "probe", "--ckpt", checkpoint, "--data", tmp_path, "--fraction", 0.0001)
        assert code != 0 and "fraction" in err

    def test_missing_checkpoint(self, dataset, tmp_path, capsys):
        code, _, _ = run(capsys, "probe", "--ckpt", tmp_path / "none.ckpt", "--data", dataset)
        assert code == 2


ASYMMETRIC = "2\n0 2\n1 0\n0.7 0.3\n0.4 0.6\n"


class TestOtSolve:
    def test_zero_cost(self, tmp_path, capsys):
        (tmp_path / "p.txt").write_text("2\n0 0\n0 0\n0.5 0.5\n0.5 0.5\n")
        code, out, _ = run(capsys, "ot-solve", "--input", tmp_path / "p.txt")
        assert code == 0 and "cost 0\n" in out
        assert out.splitlines()[0] == "2"

    def test_oracle(self, tmp_path, capsys):
        (tmp_path / "p.txt").write_text(ASYMMETRIC)
        code, out, _ = run(capsys, "ot-solve", "--input", tmp_path / "p.txt", "--oracle")
        lines = out.splitlines()
        assert code == 0 and lines[1:3] == ["0.4 0.3", "0 0.3"]
        assert float(lines[3].split()[1]) == pytest.approx(0.6, abs=1e-12)

    def test_sinkhorn_agrees_with_oracle(self, tmp_path, capsys):
        (tmp_path / "p.txt").write_text(ASYMMETRIC + "0.001\n")
        sink = run(capsys, "ot-solve", "--input", tmp_path / "p.txt")[1]
        exact = run(capsys, "ot-solve", "--input", tmp_path / "p.txt", "--oracle")[1]

        def cost(text):
            return float(next(line for line in text.splitlines() if line.startswith("cost")).split()[1])

        assert abs(cost(sink) - cost(exact)) <= 1e-2

    def test_malformed_file(self, tmp_path, capsys):
        (tmp_path / "p.txt").write_text("2\n0 1\n0.5 0.5\n")
        assert run(capsys, "ot-solve", "--input", tmp_path / "p.txt")[0] == 2

    def test_parse_problem(self):
        cost, mu, nu, eps = parse_problem("# demo\n" + ASYMMETRIC + "0.01\n")
        np.testing.assert_array_equal(cost, [[0, 2], [1, 0]])
        assert mu.tolist() == [0.7, 0.3] and nu.tolist() == [0.4, 0.6] and eps == 0.01
        with pytest.raises(FormatError):
            parse_problem("2\n0 x\n")


class TestGradcheck:
    def test_default_seed_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck")
        assert code == 0 and "all" in out.splitlines()[-1]

    def test_corrupted_adjoint_fails(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--corrupt", "softmax")
        assert code != 0 and "softmax" in out.splitlines()[-1]


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as info:
        main(["pretrain"])
    assert info.value.code == 1
