import json
import socket
import threading
import time

import numpy as np
import pytest
from click.testing import CliRunner

from fsgcd.cli import main
from fsgcd.data import SyntheticConfig, make_synthetic
from fsgcd.features_io import save_features

TINY = ["--adapter-dim", "4", "--head-hidden", "16", "--embed-dim", "8",
        "--stage1-epochs", "1", "--stage2-epochs", "1", "--eval-every", "1",
        "--batch-size", "8"]


@pytest.fixture(scope="module")
def feature_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "features.fsgf"
    fs = make_synthetic(SyntheticConfig(class_count=4, samples_per_class=10, dim=8,
                                        class_separation=8.0, seed=0))
    save_features(fs, path)
    return str(path)


def run_cli(*args, env=None):
    return CliRunner().invoke(main, list(args), env=env, catch_exceptions=False)


def test_split_writes_manifest_and_is_idempotent(feature_file, tmp_path):
    out1, out2 = str(tmp_path / "a.json"), str(tmp_path / "b.json")
    r1 = run_cli("split", "--features", feature_file, "--c-l", "0.5",
                 "--p-l", "0.3", "--seed", "1", "--out", out1)
    assert r1.exit_code == 0, r1.output
    r2 = run_cli("split", "--features", feature_file, "--c-l", "0.5",
                 "--p-l", "0.3", "--seed", "1", "--out", out2)
    assert open(out1, "rb").read() == open(out2, "rb").read()
    summary = json.loads(r1.output)
    assert summary["known_classes"] == 2


def test_split_missing_file_exits_2():
    result = run_cli("split", "--features", "/nope/f.fsgf", "--c-l", "0.5",
                     "--p-l", "0.5", "--out", "/tmp/ignored.json")
    assert result.exit_code == 2
    assert "/nope/f.fsgf" in result.output


def test_train_rerun_is_byte_identical(feature_file, tmp_path):
    split_path = str(tmp_path / "split.json")
    run_cli("split", "--features", feature_file, "--c-l", "0.5", "--p-l", "0.3",
            "--seed", "1", "--out", split_path)
    outs = []
    for name in ("r1", "r2"):
        out_dir = str(tmp_path / name)
        result = run_cli("train", "--features", feature_file, "--split", split_path,
                         "--out-dir", out_dir, "--seed", "3", *TINY)
        assert result.exit_code == 0, result.output
        outs.append(out_dir)
    m1 = open(f"{outs[0]}/metrics.jsonl", "rb").read()
    m2 = open(f"{outs[1]}/metrics.jsonl", "rb").read()
    assert m1 == m2
    c1 = open(f"{outs[0]}/final.fsgp", "rb").read()
    c2 = open(f"{outs[1]}/final.fsgp", "rb").read()
    assert c1 == c2
    t1 = open(f"{outs[0]}/trainlog.jsonl", "rb").read()
    t2 = open(f"{outs[1]}/trainlog.jsonl", "rb").read()
    assert t1 == t2


def test_eval_reproduces_logged_best(feature_file, tmp_path):
    split_path = str(tmp_path / "split.json")
    run_cli("split", "--features", feature_file, "--c-l", "0.5", "--p-l", "0.3",
            "--seed", "1", "--out", split_path)
    out_dir = str(tmp_path / "run")
    result = run_cli("train", "--features", feature_file, "--split", split_path,
                     "--out-dir", out_dir, "--seed", "3", *TINY)
    assert result.exit_code == 0, result.output
    logged = [json.loads(line) for line in open(f"{out_dir}/metrics.jsonl")]
    best_new = max(r["acc_new"] for r in logged if r["type"] == "metrics")

    result = run_cli("eval", "--features", feature_file, "--split", split_path,
                     "--checkpoint", f"{out_dir}/best.fsgp", "--seed", "3")
    assert result.exit_code == 0, result.output
    evaluated = json.loads(result.output)
    assert evaluated["metrics"]["acc_new"] == best_new


def test_eval_stage2_zero_equals_stage1_only_metrics(feature_file, tmp_path):
    split_path = str(tmp_path / "split.json")
    run_cli("split", "--features", feature_file, "--c-l", "0.5", "--p-l", "0.3",
            "--seed", "1", "--out", split_path)
    out_dir = str(tmp_path / "s1only")
    result = run_cli("train", "--features", feature_file, "--split", split_path,
                     "--out-dir", out_dir, "--seed", "3", *TINY,
                     "--stage2-epochs", "0")
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output)
    records = [json.loads(line) for line in open(f"{out_dir}/metrics.jsonl")]
    metrics = [r for r in records if r["type"] == "metrics"]
    assert len(metrics) == 1
    assert metrics[0]["stage"] == 1
    assert payload["final_metrics"]["acc_all"] == metrics[0]["acc_all"]


def test_env_seed_is_default_only(feature_file, tmp_path):
    out_env = str(tmp_path / "env.json")
    out_flag = str(tmp_path / "flag.json")
    out_plain = str(tmp_path / "plain.json")
    env = {"FSGCD_SEED": "9"}
    run_cli("split", "--features", feature_file, "--c-l", "0.5", "--p-l", "0.3",
            "--out", out_env, env=env)
    run_cli("split", "--features", feature_file, "--c-l", "0.5", "--p-l", "0.3",
            "--seed", "9", "--out", out_flag)
    run_cli("split", "--features", feature_file, "--c-l", "0.5", "--p-l", "0.3",
            "--seed", "1", "--out", out_plain, env=env)
    assert open(out_env).read() == open(out_flag).read()
    assert json.load(open(out_plain))["seed"] == 1


def test_export_row_count_and_determinism(feature_file, tmp_path):
    split_path = str(tmp_path / "split.json")
    run_cli("split", "--features", feature_file, "--c-l", "0.5", "--p-l", "0.3",
            "--seed", "1", "--out", split_path)
    out_dir = str(tmp_path / "run")
    run_cli("train", "--features", feature_file, "--split", split_path,
            "--out-dir", out_dir, "--seed", "3", *TINY)
    n_unlabeled = 40 - len(json.load(open(split_path))["labeled_ids"])

    csv1, csv2 = str(tmp_path / "e1.csv"), str(tmp_path / "e2.csv")
    for out in (csv1, csv2):
        result = run_cli("export-embeddings", "--features", feature_file,
                         "--checkpoint", f"{out_dir}/best.fsgp",
                         "--split", split_path, "--out", out, "--seed", "3")
        assert result.exit_code == 0, result.output
    assert open(csv1).read() == open(csv2).read()
    rows = open(csv1).read().strip().split("\n")[1:]
    assert len(rows) == n_unlabeled
    # full-set flag covers every sample
    csv3 = str(tmp_path / "e3.csv")
    run_cli("export-embeddings", "--features", feature_file,
            "--checkpoint", f"{out_dir}/best.fsgp", "--scope", "all",
            "--out", csv3, "--seed", "3")
    assert len(open(csv3).read().strip().split("\n")) - 1 == 40


def test_presets_listing():
    result = run_cli("presets")
    assert result.exit_code == 0
    data = json.loads(result.output)
    assert data["cifar100"]["c_l"] == 0.05


def test_eval_k_override_warns_but_runs(feature_file, tmp_path):
    split_path = str(tmp_path / "split.json")
    run_cli("split", "--features", feature_file, "--c-l", "0.5", "--p-l", "0.3",
            "--seed", "1", "--out", split_path)
    out_dir = str(tmp_path / "run")
    run_cli("train", "--features", feature_file, "--split", split_path,
            "--out-dir", out_dir, "--seed", "3", *TINY)
    result = run_cli("eval", "--features", feature_file, "--split", split_path,
                     "--checkpoint", f"{out_dir}/best.fsgp", "--seed", "3",
                     "--k", "6")
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)["k"] == 6


def _free_port():
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def test_cli_against_live_server(feature_file, tmp_path):
    import uvicorn

    from fsgcd.service import create_app

    port = _free_port()
    config = uvicorn.Config(create_app(), host="127.0.0.1", port=port, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    try:
        deadline = time.time() + 15
        while not server.started:
            if time.time() > deadline:
                pytest.fail("server did not start")
            time.sleep(0.05)
        out = str(tmp_path / "remote_split.json")
        result = run_cli("--server", f"http://127.0.0.1:{port}", "split",
                         "--features", feature_file, "--c-l", "0.5", "--p-l", "0.3",
                         "--seed", "1", "--out", out)
        assert result.exit_code == 0, result.output
        assert json.loads(result.output)["known_classes"] == 2
        assert json.load(open(out))["seed"] == 1

        # remote error mapping: missing file -> io -> exit 2
        result = run_cli("--server", f"http://127.0.0.1:{port}", "split",
                         "--features", "/nope.fsgf", "--c-l", "0.5", "--p-l", "0.3",
                         "--out", out)
        assert result.exit_code == 2
    finally:
        server.should_exit = True
        thread.join(timeout=10)
