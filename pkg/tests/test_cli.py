import csv
import filecmp
import subprocess
import sys

import pytest

from imdistill.cli import RUN_FILE, build_parser, main


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_same_tree(a / d, b / d) for d in cmp.common_dirs)


@pytest.fixture(scope="module")
def mnist_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "mnist"
    assert main(["make-mnist", "--synthetic", "--n-train", "300", "--n-test", "100", "--out", str(out)]) == 0
    return out


def test_every_subcommand_has_help(capsys):
    parser = build_parser()
    names = parser._subparsers._group_actions[0].choices
    assert set(names) == {"make-mnist", "teacher-sample", "distill", "baseline", "compose", "study-shape",
                          "eval-classifier", "params", "grid"}
    for name in names:
        assert main([name, "--help"]) == 0
        text = capsys.readouterr().out
        assert "--seed" in text
        for action in names[name]._actions:
            if action.option_strings and action.dest != "help":
                assert action.help, f"{name} {action.option_strings}"


def test_usage_errors_exit_1_without_side_effects(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("IMDISTILL_DATA", raising=False)
    out = tmp_path / "c"
    assert main(["compose", "--mask-weight", "1.5", "--out", str(out)]) == 1
    err = capsys.readouterr().err
    assert "--mask-weight" in err and "(0, 1]" in err
    assert not out.exists()
    assert main(["distill", "--bogus-flag", "--out", str(out)]) == 1
    assert "--bogus-flag" in capsys.readouterr().err
    assert main(["nonexistent"]) == 1
    assert main(["study-shape", "--transform", "noise", "--out", str(out)]) == 1
    assert "--dataset" in capsys.readouterr().err
    assert main(["study-shape", "--transform", "rotation", "--max-degrees", "-3", "--out", str(out)]) == 1
    assert not out.exists()


def test_out_collision_requires_force(mnist_run, tmp_path, capsys):
    args = ["make-mnist", "--synthetic", "--n-train", "300", "--n-test", "100", "--out", str(mnist_run)]
    assert main(args) == 1
    assert "--force" in capsys.readouterr().err
    foreign = tmp_path / "foreign"
    foreign.mkdir()
    (foreign / "keep.txt").write_text("x")
    assert main(["params", "--out", str(foreign), "--force"]) == 1
    assert (foreign / "keep.txt").exists()


def test_make_mnist_is_reproducible_from_run_copy(mnist_run, tmp_path):
    assert (mnist_run / RUN_FILE).exists()
    again = tmp_path / "again"
    assert main(["make-mnist", "--from-run", str(mnist_run / RUN_FILE), "--out", str(again)]) == 0
    assert _same_tree(mnist_run / "data", again / "data")
    assert (mnist_run / RUN_FILE).read_bytes() == (again / RUN_FILE).read_bytes()


def test_teacher_sample_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["teacher-sample", "--mechanism", "texture", "--per-class", "2", "--seed", "4", "--out", str(a)]) == 0
    assert main(["teacher-sample", "--from-run", str(a / RUN_FILE), "--out", str(b)]) == 0
    assert _same_tree(a / "data", b / "data")
    c = tmp_path / "c"
    assert main(["teacher-sample", "--mechanism", "texture", "--per-class", "2", "--seed", "5", "--out", str(c)]) == 0
    assert (a / "data" / "latents.bin").read_bytes() != (c / "data" / "latents.bin").read_bytes()


def test_distill_contract(tmp_path):
    out = tmp_path / "run1"
    code = main(["distill", "--im", "texture", "--teacher", "procedural", "--profile", "mnist28", "--epochs", "1",
                 "--per-class", "4", "--out", str(out)])
    assert code == 0
    assert (out / "config.ini").exists() and (out / RUN_FILE).exists()
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 1
    assert (out / "checkpoints" / "generator" / "manifest").exists()
    grid = tmp_path / "grid"
    assert main(["grid", "--dataset", str(out / "teacher_data"), "--checkpoint",
                 str(out / "checkpoints" / "generator"), "--count", "5", "--out", str(grid)]) == 0
    assert (grid / "grid.png").exists()
    base = tmp_path / "base"
    assert main(["baseline", "--dataset", str(out / "teacher_data"), "--epochs", "1", "--out", str(base)]) == 0
    assert list(csv.DictReader(open(base / "metrics.csv")))[0].keys() == rows[0].keys()


def test_runtime_error_exits_2(tmp_path):
    assert main(["distill", "--dataset", str(tmp_path / "missing"), "--epochs", "1", "--out", str(tmp_path / "r")]) == 2


def test_compose_and_study(mnist_run, tmp_path):
    cf = tmp_path / "cf"
    assert main(["compose", "--count", "12", "--mask-weight", "0.75", "--out", str(cf)]) == 0
    assert len(list((cf / "images").glob("*.png"))) == 12
    st = tmp_path / "study"
    code = main(["study-shape", "--transform", "transparency", "--weight", "0.75", "--dataset", str(mnist_run),
                 "--n-generated", "200", "--n-real", "100", "--epochs", "1", "--out", str(st)])
    assert code == 0
    rows = list(csv.DictReader(open(st / "study.csv")))
    assert len(rows) == 1 and rows[0]["transform"] == "transparency"
    assert rows[0]["transform_params"] == "weight=0.75"
    ev = tmp_path / "eval"
    assert main(["eval-classifier", "--real", str(mnist_run), "--generated", str(cf), "--limit", "12",
                 "--epochs", "1", "--out", str(ev)]) == 0
    assert (ev / "study.csv").exists()


def test_data_root_environment_variable(mnist_run, tmp_path, monkeypatch):
    monkeypatch.setenv("IMDISTILL_DATA", str(mnist_run.parent))
    (mnist_run.parent / "colored-mnist").symlink_to(mnist_run / "data")
    code = main(["study-shape", "--transform", "noise", "--n-generated", "100", "--n-real", "50", "--epochs", "1",
                 "--out", str(tmp_path / "s")])
    assert code == 0


def test_params_and_console_script(tmp_path):
    out = tmp_path / "p"
    assert main(["params", "--profile", "imagenet256", "--out", str(out)]) == 0
    assert '"generator"' in (out / "params.json").read_text()
    proc = subprocess.run([sys.executable, "-m", "imdistill.cli", "params"], capture_output=True, text=True)
    assert proc.returncode == 0 and "generator" in proc.stdout
