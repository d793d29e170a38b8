import json
from pathlib import Path

import numpy as np
import pytest

from caddiff import cadseq
from caddiff.checkpoint import load_checkpoint
from caddiff.cli import main
from caddiff.synthetic import random_corpus


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A config, corpus and single-model input shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus = random_corpus(seed=5, n=12, min_commands=4, max_commands=8)
    (root / "corpus.json").write_text(cadseq.sequences_to_json(corpus))
    (root / "one.json").write_text(cadseq.to_json(corpus[0]))
    cfg = {
        "schedule": {"steps": 10},
        "net": {"d_model": 32, "n_blocks_cmd": 1, "n_blocks_param": 1,
                "n_heads": 4, "max_cmd_len": 10, "max_param_len": 48},
        "train": {"corpus": "corpus.json", "iterations": 8, "seed": 5,
                  "batch_size": 6, "lr": 1e-3, "checkpoint_interval": 5},
        "sample": {"n": 3, "seed": 9},
        "checkpoint_dir": str(root / "ckpts"),
        "log_path": str(root / "log.ndjson"),
    }
    (root / "run.json").write_text(json.dumps(cfg))
    return root, corpus


@pytest.fixture(scope="module")
def trained(workdir):
    root, _ = workdir
    assert main(["train", "--config", str(root / "run.json")]) == 0
    return root / "ckpts" / "checkpoint_final.npz"


def test_train_writes_checkpoints_and_log(workdir, trained):
    root, _ = workdir
    names = sorted(p.name for p in (root / "ckpts").glob("*.npz"))
    assert "checkpoint_000000.npz" in names
    assert "checkpoint_final.npz" in names
    records = [json.loads(l) for l in (root / "log.ndjson").read_text().splitlines()]
    assert len(records) == 8
    assert all({"iter", "t_mean", "loss_cmd", "loss_param", "wallclock"} <= set(r)
               for r in records)


def test_train_missing_corpus_exit_2(tmp_path):
    cfg = {
        "train": {"corpus": str(tmp_path / "nope.json"), "iterations": 1, "seed": 1},
        "sample": {"n": 1, "seed": 1},
    }
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(path)]) == 2


def test_train_zero_iterations_writes_initial_checkpoint(tmp_path, workdir):
    root, _ = workdir
    cfg = json.loads((root / "run.json").read_text())
    cfg["train"] = dict(cfg["train"], iterations=0, corpus=str(root / "corpus.json"))
    cfg["checkpoint_dir"] = str(tmp_path / "ck")
    cfg["log_path"] = str(tmp_path / "log.ndjson")
    path = tmp_path / "zero.json"
    path.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(path)]) == 0
    assert (tmp_path / "ck" / "checkpoint_000000.npz").exists()
    assert (tmp_path / "ck" / "checkpoint_final.npz").exists()


def test_sample_deterministic_bytes(workdir, trained, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        code = main(["sample", "--checkpoint", str(trained), "--n", "5",
                     "--seed", "7", "--out", str(out)])
        assert code == 0
    assert a.read_bytes() == b.read_bytes()
    seqs = cadseq.sequences_from_json(a.read_text())
    assert len(seqs) == 5


def test_sample_n_zero(workdir, trained, tmp_path):
    out = tmp_path / "zero.json"
    assert main(["sample", "--checkpoint", str(trained), "--n", "0",
                 "--seed", "1", "--out", str(out)]) == 0
    assert cadseq.sequences_from_json(out.read_text()) == []


def test_sample_length_on_unconditioned_checkpoint_rejected(workdir, trained):
    code = main(["sample", "--checkpoint", str(trained), "--n", "1",
                 "--seed", "1", "--length", "6"])
    assert code == 2


def test_sample_config_schedule_mismatch_rejected(workdir, trained, tmp_path):
    root, _ = workdir
    cfg = json.loads((root / "run.json").read_text())
    cfg["schedule"] = {"steps": 99}
    cfg["train"]["corpus"] = str(root / "corpus.json")
    other = tmp_path / "other.json"
    other.write_text(json.dumps(cfg))
    code = main(["sample", "--checkpoint", str(trained), "--n", "1",
                 "--seed", "1", "--config", str(other)])
    assert code == 2


def test_corrupt_identity_and_terminal(workdir, capsys):
    root, _ = workdir
    run = str(root / "run.json")
    one = str(root / "one.json")
    assert main(["corrupt", "--config", run, one, "--t", "0"]) == 0
    out0 = capsys.readouterr().out
    assert "<ABS>" not in out0
    assert main(["corrupt", "--config", run, one, "--t", "10"]) == 0
    out_t = capsys.readouterr().out
    lines = [l for l in out_t.splitlines() if l.startswith(("commands", "parameters"))]
    for line in lines:
        body = line.split(":", 1)[1]
        toks = body.split()
        assert all(tok == "<ABS>" for tok in toks), line


def test_corrupt_reproducible(workdir, capsys):
    root, _ = workdir
    args = ["corrupt", "--config", str(root / "run.json"), str(root / "one.json"),
            "--t", "5", "--seed", "3"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first


def test_corrupt_step_out_of_range(workdir):
    root, _ = workdir
    assert main(["corrupt", "--config", str(root / "run.json"),
                 str(root / "one.json"), "--t", "11"]) == 2


def test_validate_all_valid_exit_0(workdir):
    root, _ = workdir
    assert main(["validate", str(root / "corpus.json")]) == 0


def test_validate_invalid_exit_1(tmp_path, capsys):
    bad = {"sequences": [
        {"commands": [{"cmd": "SOL", "params": {}},
                      {"cmd": "EOS", "params": {}}]},
    ]}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert main(["validate", str(path)]) == 1
    out = capsys.readouterr().out
    assert "empty-loop" in out


def test_validate_empty_file_exit_2(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text('{"sequences": []}')
    assert main(["validate", str(path)]) == 2


def test_eval_self_consistency(workdir, capsys):
    root, _ = workdir
    corpus = str(root / "corpus.json")
    assert main(["eval", corpus, corpus, corpus, "--points", "200"]) == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert report["cov"] == 100.0
    assert report["mmd"] == 0.0
    assert report["jsd"] == 0.0
    assert report["invalidity"] == 0.0


def test_export_svg(workdir, tmp_path):
    root, _ = workdir
    out = tmp_path / "m.svg"
    assert main(["export-svg", str(root / "one.json"), "-o", str(out)]) == 0
    text = out.read_text()
    assert text.startswith("<svg")
    out2 = tmp_path / "m2.svg"
    assert main(["export-svg", str(root / "one.json"), "-o", str(out2)]) == 0
    assert out.read_bytes() == out2.read_bytes()


def test_rows_input_accepted(workdir, tmp_path, capsys):
    _, corpus = workdir
    rows = cadseq.rows_to_text(cadseq.to_rows(corpus[0]))
    path = tmp_path / "model.rows"
    path.write_text(rows)
    assert main(["validate", str(path)]) == 0


# ---------------------------------------------------------------------------
# Checkpoint round trip and resume determinism

def test_checkpoint_roundtrip(workdir, trained):
    ck = load_checkpoint(trained)
    nets = ck.build_nets()
    for name, p in nets.named_parameters():
        np.testing.assert_array_equal(p.detach().numpy(), ck.weights[name])
    sched = ck.build_schedule()
    assert sched.steps == 10


def test_resume_reproduces_unbroken_run(tmp_path, workdir):
    """Checkpoint/resume determinism: a 4+4 split run matches an 8-iteration
    run record for record and weight for weight."""
    root, _ = workdir
    base = json.loads((root / "run.json").read_text())
    base["train"]["corpus"] = str(root / "corpus.json")

    def run(tag, iters, resume=None, interval=100):
        cfg = json.loads(json.dumps(base))
        cfg["train"]["iterations"] = iters
        cfg["train"]["checkpoint_interval"] = interval
        cfg["checkpoint_dir"] = str(tmp_path / tag / "ck")
        cfg["log_path"] = str(tmp_path / tag / "log.ndjson")
        path = tmp_path / f"{tag}.json"
        path.write_text(json.dumps(cfg))
        args = ["train", "--config", str(path)]
        if resume:
            args += ["--resume", str(resume)]
        assert main(args) == 0
        recs = [json.loads(l)
                for l in (tmp_path / tag / "log.ndjson").read_text().splitlines()]
        return cfg, recs

    _, full = run("full", 8)
    cfg_a, first = run("splitA", 4)
    ck4 = Path(cfg_a["checkpoint_dir"]) / "checkpoint_final.npz"
    cfg_b = json.loads(json.dumps(base))
    cfg_b["train"]["iterations"] = 8
    cfg_b["checkpoint_dir"] = str(tmp_path / "splitB" / "ck")
    cfg_b["log_path"] = str(tmp_path / "splitB" / "log.ndjson")
    path_b = tmp_path / "splitB.json"
    path_b.write_text(json.dumps(cfg_b))
    assert main(["train", "--config", str(path_b), "--resume", str(ck4)]) == 0
    second = [json.loads(l)
              for l in (tmp_path / "splitB" / "log.ndjson").read_text().splitlines()]

    stitched = first + second
    key = lambda r: (r["iter"], r["t_mean"], r["loss_cmd"], r["loss_param"])
    assert [key(r) for r in stitched] == [key(r) for r in full]

    ck_full = load_checkpoint(tmp_path / "full" / "ck" / "checkpoint_final.npz")
    ck_split = load_checkpoint(tmp_path / "splitB" / "ck" / "checkpoint_final.npz")
    for name in ck_full.weights:
        np.testing.assert_array_equal(ck_full.weights[name], ck_split.weights[name])
