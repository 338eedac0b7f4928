import json

import numpy as np
import pytest
import yaml

from lamreid import cli, network
from lamreid.checkpoint import load_checkpoint

FAST = ["--anchors", "3", "--positives", "1", "--negatives", "2"]


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump({"net": network.NetConfig.reduced().to_dict(),
                                    "train": {"train_cmc_every": 0}}))
    return path


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["synth", "--ids", "5", "--test-ids", "4", "--images-per-view", "2",
                     "--height", "24", "--width", "8", "--out", str(out), "--force"]) == 0
    return out


def test_synth_is_deterministic(tmp_path):
    args = ["synth", "--ids", "2", "--images-per-view", "1", "--height", "24", "--width", "8", "--seed", "3"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    for f in sorted((tmp_path / "a").rglob("*.png")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    assert len(list((tmp_path / "a").rglob("*.png"))) == 4


def test_synth_rejections(tmp_path, capsys):
    assert cli.main(["synth", "--ids", "1", "--out", str(tmp_path / "x")]) == cli.EXIT_INVALID
    assert "--ids" in capsys.readouterr().err
    (tmp_path / "full").mkdir()
    (tmp_path / "full" / "keep.txt").write_text("x")
    args = ["synth", "--ids", "2", "--height", "24", "--width", "8", "--out", str(tmp_path / "full")]
    assert cli.main(args) == cli.EXIT_INVALID
    assert "--force" in capsys.readouterr().err
    assert cli.main(args + ["--force"]) == 0


def test_train_zero_lr_keeps_init(config_file, data_dir, tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(out),
                   "--lr", "0", "--epochs", "2", "--seed", "4"] + FAST)
    assert rc == 0
    params, it, extra = load_checkpoint(out / "model.ckpt")
    init = network.init_params(network.NetConfig.reduced(), 4).astype(np.float32)
    for k, v in init.params.items():
        np.testing.assert_array_equal(params.params[k], v)
    assert it == 2 and extra["train_config"]["learning_rate"] == 0.0
    for name in ("config.source.yaml", "config.resolved.json", "metrics.csv", "summary.json"):
        assert (out / name).exists()
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["train"]["seed"] == 4 and resolved["net"]["input_shape"] == [3, 24, 8]


def test_train_resume_and_eval(config_file, data_dir, tmp_path):
    run = tmp_path / "run"
    base = ["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(run)] + FAST
    assert cli.main(base + ["--epochs", "3", "--checkpoint-every", "1"]) == 0
    full = (run / "metrics.csv").read_text().splitlines()
    resumed = tmp_path / "resumed"
    assert cli.main(["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(resumed),
                     "--epochs", "3", "--resume", str(run / "checkpoints" / "epoch0002.ckpt")] + FAST) == 0
    assert (resumed / "metrics.csv").read_text().splitlines()[2:] == full[4:]

    ev = tmp_path / "eval"
    assert cli.main(["eval", "--checkpoint", str(run / "model.ckpt"), "--data", str(data_dir),
                     "--out", str(ev), "--repeats", "3", "--top-k", "2"]) == 0
    cmc = (ev / "cmc.csv").read_text().splitlines()
    assert len(cmc) == 2 + 4   # header lines plus one row per test identity
    summary = json.loads((ev / "summary.json").read_text())
    assert summary["repeats"] == 3 and 0 <= summary["rank1"] <= 1
    assert len((ev / "rankings.csv").read_text().splitlines()) == 2 + 4 * 2   # single-shot: one probe per test identity


def test_config_errors_listed_together(config_file, data_dir, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"net": {"residual_blocks": 0}, "train": {"mu": -1, "bogus": 1},
                                   "extra": {}}))
    rc = cli.main(["train", "--config", str(bad), "--data", str(data_dir), "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_INVALID
    err = capsys.readouterr().err
    for needle in ("extra", "bogus", "residual_blocks", "mu"):
        assert needle in err
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    assert cli.main(["train", "--config", str(tmp_path / "list.yaml"), "--data", str(data_dir),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_INVALID


def test_io_errors(config_file, tmp_path):
    rc = cli.main(["train", "--config", str(config_file), "--data", str(tmp_path / "nowhere"),
                   "--out", str(tmp_path / "o")])
    assert rc in (cli.EXIT_INVALID, cli.EXIT_IO)
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "junk.ckpt"), "--data", str(tmp_path),
                     "--out", str(tmp_path / "e")]) == cli.EXIT_IO
    assert cli.main(["train", "--config", str(tmp_path / "missing.yaml"), "--data", str(tmp_path),
                     "--out", str(tmp_path / "o2")]) == cli.EXIT_IO


def test_gradcheck_exit_codes(monkeypatch, capsys):
    from lamreid import gradcheck

    def fake(size, seed, corrupt=None, samples=6):
        return gradcheck.Report([gradcheck.CheckResult("x", 1.0 if corrupt else 0.0, 1)], 0.1)
    monkeypatch.setattr(gradcheck, "run_gradcheck", fake)
    assert cli.main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert cli.main(["gradcheck", "--corrupt", "x"]) == cli.EXIT_NUMERIC
    assert "FAIL" in capsys.readouterr().out


def test_compare_single_loss_single_seed(config_file, data_dir, tmp_path, capsys):
    out = tmp_path / "cmp"
    rc = cli.main(["compare", "--config", str(config_file), "--data", str(data_dir), "--out", str(out),
                   "--losses", "adaptive", "--seeds", "1", "--epochs", "1", "--repeats", "2"] + FAST)
    assert rc == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0].startswith("# lamreid ablation") and len(rows) == 3
    assert "adaptive" in capsys.readouterr().out
    assert cli.main(["compare", "--config", str(config_file), "--data", str(data_dir), "--out",
                     str(tmp_path / "c2"), "--losses", "adaptive,nope"]) == cli.EXIT_INVALID
