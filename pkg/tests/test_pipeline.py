import csv
import json

import pytest

from rlkv.cli import main
from rlkv.pipeline import STAGES

TINY = {
    "seed": 3,
    "model": {"n_layers": 2, "n_query_heads": 4, "n_kv_heads": 2, "head_dim": 8},
    "sft": {"batch_size": 16, "epochs": 1, "learning_rate": 0.001},
    "grpo": {"steps": 3, "queries_per_step": 2, "max_new": 30},
    "tasks": {"sft_train_size": 48, "heldout_size": 4, "pool_size": 8, "curated_size": 4, "eval_size": 4},
    "deploy": {"max_new": 30},
    "baselines": {"random_seeds": 2},
    "sparsity_grid": [0.0, 0.5, 1.0],
    "importance_fractions": [0.0, 0.25],
}


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["run", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return cfg, root / "run"


def test_outputs(tiny):
    _, run = tiny
    for stage in STAGES:
        assert (run / "stages" / f"{stage}.done").exists()
    with open(run / "reports" / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    methods = {(r["method"], r["sparsity"]) for r in rows}
    assert ("rlkv", "0.5") in methods and ("random", "0.5") in methods and ("score_evict", "0.5") in methods
    assert ("score_evict", "0.0") not in methods
    summary = json.loads((run / "reports" / "rl_summary.json").read_text())
    assert {"adaptive", "constant_beta", "pre_rl_heldout_accuracy"} <= set(summary)
    ranking = (run / "rankings" / "ranking.txt").read_text().splitlines()
    assert len(ranking) == 1 + 2 * 2
    with open(run / "reports" / "importance.csv") as fh:
        imp = list(csv.DictReader(fh))
    assert {r["method"] for r in imp} == {"mask_top", "mask_random", "mask_random_mean"}


def test_rerun_skips(tiny, capsys):
    cfg, run = tiny
    before = (run / "metrics" / "rl.jsonl").stat().st_mtime_ns
    assert main(["rl", "--config", str(cfg), "--out", str(run)]) == 0
    assert (run / "metrics" / "rl.jsonl").stat().st_mtime_ns == before


def test_corrupt_checkpoint_reports_stage(tiny, tmp_path, capsys):
    cfg, run = tiny
    import shutil
    copy = tmp_path / "run"
    shutil.copytree(run, copy)
    ck = copy / "checkpoints" / "sft.ckpt"
    ck.write_bytes(b"JUNK" + ck.read_bytes()[4:])
    code = main(["eval", "--config", str(cfg), "--out", str(copy), "--force"])
    err = capsys.readouterr().err
    assert code == 10 + STAGES.index("eval")
    assert "[eval] checkpoint error" in err and "sft.ckpt" in err and "magic" in err


def test_config_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 1, "typo": 2}))
    assert main(["gen-data", "--config", str(bad)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_init_config(tmp_path):
    p = tmp_path / "default.json"
    assert main(["init-config", str(p)]) == 0
    assert json.loads(p.read_text())["grpo"]["clip_eps"] == 0.2
