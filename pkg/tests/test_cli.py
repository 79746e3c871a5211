import subprocess
import sys

import pytest

from mixpipe.cli import dispatch, read_meta


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.cfg"
    spec.write_text("num_multicam_pids = 10\nnum_singlecam_pids = 16\nnum_eval_pids = 5\n"
                    "dim_raw = 16\nfrag_rate = 0.1\njunk_rate = 0.02\nseed = 2\n")
    cfg = root / "run.cfg"
    cfg.write_text("epochs = 1\niterations_per_epoch = 3\nn_p = 4\nn_k = 2\n")
    out = root / "data"
    assert dispatch(["gen", "--spec", str(spec), "--out", str(out), "--quiet"]) == 0
    return root, out, cfg


def _data_args(out):
    return ["--manifest", str(out / "manifest.tsv"), "--features", str(out / "raw.bin")]


def test_gen_is_deterministic(dataset, tmp_path):
    root, out, _ = dataset
    assert dispatch(["gen", "--spec", str(root / "spec.cfg"), "--out", str(tmp_path), "--quiet"]) == 0
    for name in ("manifest.tsv", "raw.bin", "truth.tsv", "spec.cfg"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        dispatch(["train", "--bogus"])
    assert exc.value.code == 2
    assert "usage_error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        dispatch(["nosuchcommand"])
    assert exc.value.code == 2


def test_missing_input_exits_3(tmp_path, capsys):
    code = dispatch(["eval", "--manifest", str(tmp_path / "nope.tsv"),
                     "--features", str(tmp_path / "nope.bin"), "--out", str(tmp_path)])
    assert code == 3 and "io_error" in capsys.readouterr().err


def test_bad_config_exits_nonzero(dataset, tmp_path, capsys):
    _, out, _ = dataset
    bad = tmp_path / "bad.cfg"
    bad.write_text("tau_bogus = 1\n")
    code = dispatch(["relabel", "--config", str(bad), *_data_args(out), "--out", str(tmp_path)])
    assert code != 0 and "config" in capsys.readouterr().err


def test_relabel_sample_bench(dataset, tmp_path):
    _, out, cfg = dataset
    rel = tmp_path / "rel"
    assert dispatch(["relabel", "--config", str(cfg), *_data_args(out), "--out", str(rel), "--quiet"]) == 0
    for name in ("manifest.tsv", "memory.bin", "memory.bin.pids", "report.txt", "run.meta"):
        assert (rel / name).is_file()
    smp = tmp_path / "smp"
    assert dispatch(["sample", "--config", str(cfg), "--manifest", str(rel / "manifest.tsv"),
                     "--features", str(out / "raw.bin"), "--memory", str(rel / "memory.bin"),
                     "--iterations", "2", "--strategy", "hard", "--out", str(smp), "--quiet"]) == 0
    lines = (smp / "plans.txt").read_text().splitlines()
    assert len(lines) == 2 and all(len(line.split("\t")) == 2 + 2 * 4 * 2 for line in lines)
    assert dispatch(["bench", *_data_args(out), "--out", str(tmp_path / "b"), "--quiet"]) == 0
    assert (tmp_path / "b" / "bench.tsv").read_text().startswith("method")


def test_train_eval_and_replay(dataset, tmp_path):
    _, out, cfg = dataset
    tr = tmp_path / "train"
    assert dispatch(["train", "--config", str(cfg), *_data_args(out), "--out", str(tr), "--quiet"]) == 0
    assert (tr / "reports" / "epoch_000.txt").is_file()
    ev = tmp_path / "eval"
    assert dispatch(["eval", *_data_args(out), "--encoder", str(tr / "momentum_encoder.bin"),
                     "--out", str(ev), "--quiet"]) == 0
    assert (ev / "eval.tsv").is_file()
    sub, args, config, _ = read_meta(tr / "run.meta")
    assert sub == "train" and config.epochs == 1
    again = tmp_path / "again"
    assert dispatch(["replay", str(tr / "run.meta"), "--out", str(again)]) == 0
    for name in ("encoder.bin", "momentum_encoder.bin", "loss_curve.tsv", "run.meta"):
        assert (again / name).read_bytes() == (tr / name).read_bytes()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mixpipe", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "replay" in proc.stdout
