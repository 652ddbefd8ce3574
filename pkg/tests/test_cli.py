import csv
import json

import numpy as np
import pytest

from afgen.cli import main
from afgen.meta_simplex import DenseJoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def numbers(text):
    return np.array([float(tok) for tok in text.split()])


@pytest.fixture
def toy_data(tmp_path):
    rng = np.random.default_rng(0)
    rows = rng.choice([[1, 1], [2, 2], [1, 2]], size=200, p=[0.45, 0.45, 0.1])
    path = tmp_path / "train.txt"
    path.write_text("# n=2 c=2\n" + "\n".join(f"{a} {b}" for a, b in rows) + "\n")
    return path


@pytest.fixture
def checkpoint(tmp_path, toy_data, capsys):
    out = tmp_path / "run"
    code, _, _ = run(capsys, "train", toy_data, "--steps", 40, "--batch-size", 32, "--hidden", 6,
                     "--out-dir", out)
    assert code == 0
    return out / "checkpoint.afgp"


def test_oracle_embed_barycenter(capsys):
    code, out, _ = run(capsys, "oracle", "embed", "--n", 2, "--c", 2)
    assert code == 0
    np.testing.assert_allclose(numbers(out), [0.25] * 4)


def test_oracle_toy_projection_and_kl(tmp_path, capsys):
    toy, proj = tmp_path / "toy.afgj", tmp_path / "proj.afgj"
    assert run(capsys, "oracle", "target", "--out", toy, "--out-dir", tmp_path)[0] == 0
    code, out, _ = run(capsys, "oracle", "projT", toy, "--out", proj, "--out-dir", tmp_path)
    assert code == 0
    np.testing.assert_allclose(numbers(out), [0.5] * 4)
    code, out, _ = run(capsys, "oracle", "kl", toy, proj, "--out-dir", tmp_path)
    expect = 2 * np.log(2) + 2 * (0.45 * np.log(0.45) + 0.05 * np.log(0.05))
    assert float(out) == pytest.approx(expect) and float(out) == pytest.approx(0.368, abs=1e-3)
    code, out, _ = run(capsys, "oracle", "entropy", proj, "--out-dir", tmp_path)
    assert float(out) == pytest.approx(2 * np.log(2))
    code, out, _ = run(capsys, "oracle", "marginalize", toy, "--out-dir", tmp_path)
    np.testing.assert_allclose(numbers(out), [0.5] * 4)


def test_eval_kl_on_exact_draws_is_near_noise_floor(tmp_path, capsys):
    toy = tmp_path / "toy.afgj"
    run(capsys, "oracle", "target", "--out", toy, "--out-dir", tmp_path)
    assert run(capsys, "oracle", "draw", toy, "--count", 20000, "--out-dir", tmp_path)[0] == 0
    code, _, _ = run(capsys, "eval-kl", "--target", toy, "--samples", tmp_path / "samples.txt",
                     "--out-dir", tmp_path)
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["num_samples"] == 20000
    assert report["kl_nats"] < 10 * report["noise_floor"]


def test_train_outputs_and_resume(tmp_path, toy_data, checkpoint, capsys):
    run_dir = checkpoint.parent
    with open(run_dir / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and set(rows[0]) == {"step", "wall_ms", "loss"}
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["config"]["steps"] == 40
    # a constant schedule makes a 20-step run a true prefix of a 40-step one
    a, b = tmp_path / "a", tmp_path / "b"
    common = ["--batch-size", 32, "--hidden", 6, "--lr-schedule", "constant"]
    run(capsys, "train", toy_data, "--steps", 40, *common, "--out-dir", a)
    run(capsys, "train", toy_data, "--steps", 20, *common, "--out-dir", b)
    assert run(capsys, "train", toy_data, "--steps", 40, *common, "--resume", b / "checkpoint.afgp",
               "--out-dir", b)[0] == 0
    assert (a / "checkpoint.afgp").read_bytes() == (b / "checkpoint.afgp").read_bytes()


def test_sample_is_reproducible(tmp_path, checkpoint, capsys):
    outs = []
    for name in ("s1", "s2"):
        code, _, _ = run(capsys, "sample", "--checkpoint", checkpoint, "--count", 50, "--states", "true",
                         "--out-dir", tmp_path / name)
        assert code == 0
        outs.append(tmp_path / name)
    for f in ("samples.txt", "states.afgx"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    lines = (outs[0] / "samples.txt").read_text().splitlines()
    assert lines[0] == "# n=2 c=2" and len(lines) == 51


def test_sample_count_zero_writes_header(tmp_path, checkpoint, capsys):
    assert run(capsys, "sample", "--checkpoint", checkpoint, "--count", 0, "--out-dir", tmp_path)[0] == 0
    assert (tmp_path / "samples.txt").read_text() == "# n=2 c=2\n"


def test_config_precedence(tmp_path, checkpoint, capsys):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("seed = 3\n[sample]\ncount = 7\n")
    run(capsys, "sample", "--checkpoint", checkpoint, "--config", cfg, "--out-dir", tmp_path / "f")
    assert len((tmp_path / "f" / "samples.txt").read_text().splitlines()) == 8
    manifest = json.loads((tmp_path / "f" / "manifest.json").read_text())
    assert manifest["seeds"]["seed"] == 3
    run(capsys, "sample", "--checkpoint", checkpoint, "--config", cfg, "--count", 2, "--out-dir", tmp_path / "g")
    assert len((tmp_path / "g" / "samples.txt").read_text().splitlines()) == 3
    cfg.write_text("[sample]\ncounts = 7\n")
    code, _, err = run(capsys, "sample", "--checkpoint", checkpoint, "--config", cfg, "--out-dir", tmp_path)
    assert code == 2 and "counts" in err


def test_likelihood_command(tmp_path, toy_data, checkpoint, capsys):
    test = tmp_path / "test.txt"
    test.write_text("# n=2 c=2\n1 1\n2 2\n")
    code, _, _ = run(capsys, "likelihood", "--checkpoint", checkpoint, test, "--num-proposal-samples", 8,
                     "--out-dir", tmp_path / "lik")
    assert code == 0
    summary = json.loads((tmp_path / "lik" / "likelihood_summary.json").read_text())
    assert summary["num_data"] == 2 and np.isfinite(summary["nats"])
    with open(tmp_path / "lik" / "likelihood.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_class_scaling_command(tmp_path, capsys):
    code, out, _ = run(capsys, "class-scaling", "--classes", "2,3", "--n", 2, "--num-train", 100,
                       "--steps", 5, "--hidden", 4, "--default-samples", 500, "--out-dir", tmp_path)
    assert code == 0 and "c=3" in out
    with open(tmp_path / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["c"] for r in rows] == ["2", "3"] and all(r["status"] == "ok" for r in rows)


def test_errors_exit_with_code_two(tmp_path, toy_data, checkpoint, capsys):
    code, _, err = run(capsys, "sample", "--checkpoint", tmp_path / "missing.afgp", "--out-dir", tmp_path)
    assert code == 2 and err.startswith("afgen: error:")
    bad = tmp_path / "bad.txt"
    bad.write_text("# n=2 c=2\n1 1\n1 3\n")
    code, _, err = run(capsys, "train", bad, "--steps", 1, "--out-dir", tmp_path)
    assert code == 2 and "line 3" in err
    empty = tmp_path / "empty.txt"
    empty.write_text("# n=2 c=2\n")
    assert run(capsys, "train", empty, "--steps", 1, "--out-dir", tmp_path)[0] == 2
    other = tmp_path / "other.txt"
    other.write_text("# n=3 c=2\n1 1 1\n")
    code, _, err = run(capsys, "likelihood", "--checkpoint", checkpoint, other, "--out-dir", tmp_path)
    assert code == 2 and "(n, c)" in err
    zero = tmp_path / "zero.afgj"
    DenseJoint(np.array([0.5, 0.5, 0.0, 0.0]), 2, 2).save(zero)
    assert run(capsys, "oracle", "projT", zero, "--out-dir", tmp_path)[0] == 2
    assert run(capsys, "oracle", "target", "--out-dir", tmp_path)[0] == 2
