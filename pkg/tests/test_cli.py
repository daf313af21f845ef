import json

import pytest

from mat_caption.cli import ConfigError, RunConfig, main, parse_run_config
from mat_caption.data import Bucket
from mat_caption.model import Variant

SMALL = """\
# tiny run
hidden_size = 8
batch_size = 16
dropout = 0.0
init_scale = 0.4
max_epochs = 2
min_count = 1
num_train = 60
num_val = 20
beam_size = 2
"""


def test_defaults_and_overrides():
    cfg = parse_run_config("")
    assert cfg.train.hidden_size == 512 and cfg.min_count == 5 and cfg.beam_size == 20
    cfg = parse_run_config("variant = single-vector\nbuckets = 2x10, 4x15\nseeds = 3,4\ndata_seed = 7\n")
    assert cfg.train.variant is Variant.SINGLE_VECTOR
    assert cfg.train.buckets == (Bucket(2, 10), Bucket(4, 15))
    assert cfg.seeds == (3, 4) and cfg.synthetic.seed == 7
    assert cfg.explicit == {"variant", "buckets", "seeds", "data_seed"}


def test_echo_round_trips():
    cfg = parse_run_config(SMALL + "variant = no-attention\nnoise_std = 0.25\nout = somewhere\n")
    again = parse_run_config(cfg.dumps())
    assert again.train == cfg.train and again.synthetic == cfg.synthetic
    assert (again.num_train, again.out) == (cfg.num_train, cfg.out)
    assert parse_run_config(RunConfig().dumps()).train == RunConfig().train


@pytest.mark.parametrize("text, needle", [
    ("hidden_size = 8\nbogus = 1\n", "<config>:2: unknown key 'bogus'"),
    ("\n\nhidden_size 8\n", "<config>:3: expected"),
    ("hidden_size = eight\n", "<config>:1: bad value"),
    ("seed = 1\nseed = 2\n", "<config>:2: duplicate key 'seed' (first set on line 1)"),
    ("mode = cubic\n", "<config>:1: bad value"),
    ("buckets = 2-10\n", "<config>:1: bad value"),
    ("dropout = 1.5\n", "dropout"),
])
def test_config_errors_name_line(text, needle):
    with pytest.raises(ConfigError) as info:
        parse_run_config(text)
    assert needle in str(info.value)


def test_grad_check_command(capsys):
    assert main(["grad-check"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("max_rel_err ")
    assert float(out.split()[1]) < 1e-4


def test_grad_check_fails_on_impossible_tolerance(capsys):
    assert main(["grad-check", "--tolerance", "0"]) == 1


def test_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL)
    d1, d2 = tmp_path / "d1", tmp_path / "d2"
    assert main(["generate-data", "--spec", str(cfg), "--out", str(d1), "--seed", "4"]) == 0
    assert main(["generate-data", "--spec", str(cfg), "--out", str(d2), "--seed", "4"]) == 0
    for name in ("train/features.jsonl", "train/captions.jsonl", "val/features.jsonl", "val/captions.jsonl"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
    assert len((d1 / "val/captions.jsonl").read_text().splitlines()) == 20
    assert "data_seed = 4" in (d1 / "config.txt").read_text()

    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(d1 / "train"), "--val", str(d1 / "val"),
                 "--out", str(run)]) == 0
    for name in ("config.txt", "history.csv", "report.json", "checkpoints/best.npz"):
        assert (run / name).exists(), name
    report = json.loads((run / "report.json").read_text())
    assert {"val_loss", "exact_match", "bleu4", "cider", "best_epoch"} <= set(report)
    assert (run / "history.csv").read_text().startswith("epoch,train_loss,val_loss,lr\n")
    # the echoed config reproduces the run
    rerun = tmp_path / "rerun"
    assert main(["train", "--config", str(run / "config.txt"), "--out", str(rerun)]) == 0
    assert (rerun / "history.csv").read_text() == (run / "history.csv").read_text()

    caps = tmp_path / "caps.jsonl"
    assert main(["caption", "--checkpoint", str(run / "checkpoints/best.npz"), "--features",
                 str(d1 / "val/features.jsonl"), "--beam", "3", "--out", str(caps), "--attention"]) == 0
    rows = [json.loads(line) for line in caps.read_text().splitlines()]
    assert len(rows) == 20 and {"id", "caption", "logprob", "attention"} <= set(rows[0])
    for row in rows:
        for weights in row["attention"]:
            assert abs(sum(weights) - 1.0) < 1e-12

    rep = tmp_path / "eval.json"
    refs = str(d1 / "val/captions.jsonl")
    assert main(["evaluate", "--candidates", refs, "--references", refs, "--out", str(rep)]) == 0
    assert json.loads(rep.read_text())["bleu1"] == 1.0
    assert main(["evaluate", "--candidates", str(caps), "--references", refs, "--out", str(rep)]) == 0


def test_ablation_command(tmp_path, capsys):
    cfg = tmp_path / "abl.cfg"
    cfg.write_text(SMALL + "seeds = 0\n")
    assert main(["ablation", "--config", str(cfg), "--out", str(tmp_path / "abl")]) == 0
    lines = (tmp_path / "abl/ablation.csv").read_text().splitlines()
    assert lines[0].startswith("variant,seed,val_loss,bleu4,cider")
    assert [line.split(",")[0] for line in lines[1:]] == ["mat", "no-attention", "single-vector"]
    assert (tmp_path / "abl/config.txt").exists()


def test_failures_give_one_line_diagnostic(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("hidden_size = 8\nwhat = 1\n")
    assert main(["grad-check", "--config", str(bad)]) != 0
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "bad.cfg:2" in err
    assert main(["caption", "--checkpoint", str(tmp_path / "missing.npz"), "--features", "x",
                 "--out", str(tmp_path / "o")]) != 0
    assert capsys.readouterr().err.count("\n") == 1
    assert main(["train", "--out", str(tmp_path / "r")]) != 0
    assert "needs --data" in capsys.readouterr().err


def test_thread_env(monkeypatch, capsys):
    monkeypatch.setenv("MAT_NUM_THREADS", "1")
    assert main(["grad-check"]) == 0
    monkeypatch.setenv("MAT_NUM_THREADS", "many")
    assert main(["grad-check"]) != 0
    assert "MAT_NUM_THREADS" in capsys.readouterr().err
