import hashlib
import json

import pytest

from ltfuse.cli import main
from ltfuse.features import FeatureStore
from ltfuse.plotting import history_figure, read_history

TINY = {
    "dataset": {"num_classes": 3, "n_max": 40, "imbalance_ratio": 8, "image_shape": [8, 8, 1],
                "n_val": 5, "n_test": 10, "noise": 0.3, "jitter": 1.0},
    "provider": {"d_sam": 4, "grid": [4, 4], "signal_strength": 1.0},
    "fusion": {"map_fusion": True, "latent_fusion": True, "stage_channels": [4, 8], "d_tok": 4},
    "loss": {"beta": 0.01},
    "train": {"epochs": 2, "batch_size": 16, "use_proto": True},
}


def _write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def _digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


@pytest.fixture
def cfg(tmp_path):
    return _write_config(tmp_path / "tiny.json", TINY)


def _pipeline(cfg, out):
    assert main(["synth", "--config", cfg, "--out", out, "--seed", "5"]) == 0
    assert main(["extract", "--config", cfg, "--out", out, "--seed", "5"]) == 0
    assert main(["train", "--config", cfg, "--out", out, "--seed", "5"]) == 0


def test_full_pipeline_is_deterministic(cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(cfg, str(a))
    _pipeline(cfg, str(b))
    assert _digest(a / "dataset") == _digest(b / "dataset")
    assert (a / "features.ltff").read_bytes() == (b / "features.ltff").read_bytes()
    assert (a / "train" / "metrics.json").read_bytes() == (b / "train" / "metrics.json").read_bytes()
    assert (a / "train" / "history.csv").read_bytes() == (b / "train" / "history.csv").read_bytes()
    for out in (a, b):
        assert main(["eval", "--config", cfg, "--out", str(out), "--split", "val"]) == 0
    assert (a / "metrics_val.json").read_bytes() == (b / "metrics_val.json").read_bytes()


def test_synth_and_extract_outputs(cfg, tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["synth", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "dataset" / "train.json").exists()
    assert "class   0" in capsys.readouterr().out
    assert main(["extract", "--config", cfg, "--out", str(out)]) == 0
    store = FeatureStore.open(out / "features.ltff")
    ids = set()
    for split in ("train", "val", "test"):
        ids |= set(json.loads((out / "dataset" / f"{split}.json").read_text())["ids"])
    assert set(store.ids()) == ids


def test_commands_leave_inputs_untouched(cfg, tmp_path):
    out = tmp_path / "r"
    _pipeline(cfg, str(out))
    before = _digest(out / "dataset")
    assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
    assert _digest(out / "dataset") == before


def test_ratio_one_is_a_config_error(tmp_path, capsys):
    doc = json.loads(json.dumps(TINY))
    doc["dataset"]["imbalance_ratio"] = 1
    code = main(["synth", "--config", _write_config(tmp_path / "c.json", doc), "--out", str(tmp_path)])
    assert code == 2
    assert "imbalance_ratio" in capsys.readouterr().err


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    doc = json.loads(json.dumps(TINY))
    doc["train"]["bogus"] = 1
    code = main(["train", "--config", _write_config(tmp_path / "c.json", doc), "--out", str(tmp_path)])
    assert code == 2
    assert "train.bogus" in capsys.readouterr().err


def test_file_provider_missing_records(cfg, tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["synth", "--config", cfg, "--out", str(out)]) == 0
    partial = FeatureStore()
    partial.put(0, [[[1.0]]])
    partial.save(tmp_path / "partial.ltff")
    code = main(["extract", "--out", str(out), "--provider", "file", "--source", str(tmp_path / "partial.ltff"),
                 "--features", str(tmp_path / "x.ltff")])
    assert code == 3
    err = capsys.readouterr().err
    assert "lacks" in err and "1, 2" in err


def test_file_provider_bad_magic(cfg, tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["synth", "--config", cfg, "--out", str(out)]) == 0
    (tmp_path / "junk.ltff").write_bytes(b"JUNK" + bytes(8))
    code = main(["extract", "--out", str(out), "--provider", "file", "--source", str(tmp_path / "junk.ltff")])
    assert code == 3
    assert "bad magic" in capsys.readouterr().err


def test_file_provider_copies_records(cfg, tmp_path):
    out = tmp_path / "r"
    assert main(["synth", "--config", cfg, "--out", str(out)]) == 0
    assert main(["extract", "--config", cfg, "--out", str(out), "--features", str(tmp_path / "src.ltff")]) == 0
    assert main(["extract", "--out", str(out), "--provider", "file", "--source", str(tmp_path / "src.ltff")]) == 0
    assert (out / "features.ltff").read_bytes() == (tmp_path / "src.ltff").read_bytes()


def test_eval_missing_checkpoint(cfg, tmp_path):
    out = tmp_path / "r"
    assert main(["synth", "--config", cfg, "--out", str(out)]) == 0
    assert main(["eval", "--out", str(out), "--checkpoint", str(tmp_path / "nothing")]) == 3


def test_train_without_dataset(cfg, tmp_path):
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "empty")]) == 3


def test_diverged_run_exit_code(tmp_path):
    doc = json.loads(json.dumps(TINY))
    doc["train"]["lr"] = 1e100
    c = _write_config(tmp_path / "c.json", doc)
    out = tmp_path / "r"
    assert main(["synth", "--config", c, "--out", str(out)]) == 0
    assert main(["extract", "--config", c, "--out", str(out)]) == 0
    assert main(["train", "--config", c, "--out", str(out)]) == 4
    assert (out / "train" / "diverged.json").exists()


def test_ablate_beta_zero_row_matches_ce(tmp_path):
    doc = json.loads(json.dumps(TINY))
    doc["ablation"] = {"rows": [
        {"name": "baseline", "delta": {"map_fusion": False, "latent_fusion": False, "use_proto": False}},
        {"name": "beta0", "delta": {"map_fusion": False, "latent_fusion": False, "use_proto": True,
                                    "loss.beta": 0.0}},
    ]}
    c = _write_config(tmp_path / "c.json", doc)
    out = tmp_path / "r"
    assert main(["synth", "--config", c, "--out", str(out)]) == 0
    assert main(["extract", "--config", c, "--out", str(out)]) == 0
    assert main(["ablate", "--config", c, "--out", str(out)]) == 0
    rows = [line.split(",") for line in (out / "ablation.csv").read_text().splitlines()]
    assert rows[1][0] == "CE"
    assert rows[1][1:5] == rows[2][1:5]


def test_ablate_standard_grid_and_determinism(cfg, tmp_path):
    out = tmp_path / "r"
    assert main(["synth", "--config", cfg, "--out", str(out)]) == 0
    assert main(["extract", "--config", cfg, "--out", str(out)]) == 0
    assert main(["ablate", "--config", cfg, "--out", str(out)]) == 0
    first = (out / "ablation.csv").read_bytes()
    assert main(["ablate", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "ablation.csv").read_bytes() == first
    names = [line.split(",")[0] for line in first.decode().splitlines()[1:]]
    assert names == ["CE", "+map", "+latent", "+both", "+both+L_head", "+both+L_tail-std",
                     "+both+L_tail-dist", "+both+L_proto"]


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--n-seeds", "2", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["passed"] and len(report["report"]) == 8
    assert main(["gradcheck", "--selector", "proto-loss"]) == 0
    assert capsys.readouterr().out.count("PASS") == 12


HISTORY = "epoch,train_loss,overall,many,medium,few\n1,2.1,30.0,50.0,20.0,0.0\n2,1.7,40.0,60.0,30.0,\n"


def test_plot_is_byte_deterministic(tmp_path):
    src = tmp_path / "h.csv"
    src.write_text(HISTORY)
    assert main(["plot", str(src), "--out", str(tmp_path / "a.svg")]) == 0
    assert main(["plot", str(src), "--out", str(tmp_path / "b.svg")]) == 0
    a = (tmp_path / "a.svg").read_bytes()
    assert a == (tmp_path / "b.svg").read_bytes()
    assert a.lstrip().startswith(b"<?xml") and b"<svg" in a


def test_plot_single_epoch(tmp_path):
    text = HISTORY.splitlines()[0] + "\n" + HISTORY.splitlines()[1] + "\n"
    fig = history_figure(read_history(text))
    lines = [ln for ax in fig.axes[:2] for ln in ax.get_lines()]
    assert len(lines) == 5
    assert all(len(ln.get_xdata()) == 1 for ln in lines)
    src = tmp_path / "one.csv"
    src.write_text(text)
    assert main(["plot", str(src), "--out", str(tmp_path / "one.svg")]) == 0


def test_plot_missing_column(tmp_path, capsys):
    src = tmp_path / "h.csv"
    src.write_text("epoch,train_loss,overall,many,medium\n1,2.0,10,10,10\n")
    assert main(["plot", str(src), "--out", str(tmp_path / "x.svg")]) == 2
    assert "few" in capsys.readouterr().err


def test_plot_of_train_history(cfg, tmp_path):
    out = tmp_path / "r"
    _pipeline(cfg, str(out))
    assert main(["plot", str(out / "train" / "history.csv"), "--out", str(out / "plots")]) == 0
    assert (out / "plots" / "history.svg").exists()
