import json
import subprocess
import sys

import numpy as np
import pytest

from rotssl import cli, config, engine, fisher, net, synth

SMALL = {
    "data": {"n_labeled": 32, "n_unlabeled": 80, "n_val": 16, "n_test": 16},
    "train": {"phase1_iters": 12, "phase2_iters": 8, "eval_every": 4},
}


def run(*argv):
    return cli.main(["-q", *map(str, argv)])


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert run("gen-data", "--config", cfg, "--out", root / "data") == 0
    assert run("train-sup", "--config", cfg, "--data", root / "data", "--out", root / "p1") == 0
    return root, cfg


def test_gen_data_deterministic(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL))
    run("gen-data", "--config", cfg, "--out", tmp_path / "a")
    first = capsys.readouterr().out
    run("gen-data", "--config", cfg, "--out", tmp_path / "b")
    second = capsys.readouterr().out
    h = cli.dataset_hash(tmp_path / "a")
    assert h == cli.dataset_hash(tmp_path / "b")
    assert f"manifest sha256 {h}" in first and h in second
    run("gen-data", "--config", cfg, "--seed", 9, "--out", tmp_path / "c")
    assert cli.dataset_hash(tmp_path / "c") != h


def test_train_sup_outputs(ws):
    root, _ = ws
    p1 = root / "p1"
    for name in ("student.bin", "teacher.bin", "log.csv", "metrics.txt", "config.json"):
        assert (p1 / name).exists()
    m = cli.read_kv(p1 / "metrics.txt")
    assert float(m["test_count"]) == 16
    assert json.loads((p1 / "config.json").read_text())["train"]["phase1_iters"] == 12


def test_zero_iterations_keep_init(ws, tmp_path):
    root, _ = ws
    cfg = tmp_path / "z.json"
    cfg.write_text(json.dumps({**SMALL, "train": {**SMALL["train"], "phase1_iters": 0}}))
    init = root / "p1" / "student.bin"
    assert run("train-sup", "--config", cfg, "--data", root / "data", "--init", init,
               "--out", tmp_path / "z") == 0
    np.testing.assert_array_equal(net.load_checkpoint(tmp_path / "z" / "student.bin").flat(),
                                  net.load_checkpoint(init).flat())


def test_train_ssl_bit_identical(ws, tmp_path):
    root, cfg = ws
    for name in ("a", "b"):
        assert run("train-ssl", "--config", cfg, "--data", root / "data",
                   "--init", root / "p1" / "student.bin", "--out", tmp_path / name) == 0
    for f in ("student.bin", "teacher.bin", "log.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    m = cli.read_kv(tmp_path / "a" / "metrics.txt")
    assert {"tau_stage1", "tau_stage4"} <= set(m)


def test_eval_matches_library(ws, tmp_path):
    root, _ = ws
    ckpt = root / "p1" / "student.bin"
    assert run("eval", "--checkpoint", ckpt, "--data", root / "data", "--split", "val",
               "--out", tmp_path) == 0
    m = cli.read_kv(tmp_path / "metrics.txt")
    ref = engine.evaluate_params(net.load_checkpoint(ckpt), synth.load_dataset(root / "data" / "val"))
    assert float(m["mean_geodesic_deg"]) == ref["mean_geodesic_deg"]


def test_filter_stats_full_keep(ws, tmp_path):
    root, _ = ws
    assert run("filter-stats", "--checkpoint", root / "p1" / "student.bin", "--data", root / "data",
               "--delta", 1.0, "--out", tmp_path) == 0
    s = cli.read_kv(tmp_path / "filter_stats.txt")
    assert int(s["kept"]) == 80 and int(s["rejected"]) == 0
    rows = (tmp_path / "entropies.csv").read_text().splitlines()
    assert rows[0] == "id,entropy,is_ood,kept" and len(rows) == 81
    hist = (tmp_path / "histogram.csv").read_text().splitlines()
    assert sum(int(r.split(",")[2]) for r in hist[1:]) == 80


def test_filter_stats_bad_delta(ws, tmp_path):
    root, _ = ws
    assert run("filter-stats", "--checkpoint", root / "p1" / "student.bin", "--data", root / "data",
               "--delta", 0.0, "--out", tmp_path) == 1


def test_grad_check(tmp_path):
    assert run("grad-check", "--out", tmp_path) == 0
    res = cli.read_kv(tmp_path / "grad_check.txt")
    assert all(float(v) < 1e-4 for v in res.values())


@pytest.mark.parametrize("argv", [
    ["eval", "--checkpoint", "missing.bin"],
    ["train-ssl", "--init", "missing.bin", "--data", "nowhere"],
    ["train-sup", "--data", "nowhere"],
])
def test_missing_inputs_exit_1(argv, tmp_path, capsys):
    assert run(*argv, "--out", tmp_path) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_bad_config_exit_1(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"phase1_iters": 5, "bogus": 1}}))
    assert run("grad-check", "--config", cfg, "--out", tmp_path) == 1


def test_corrupt_checkpoint_exit_1(ws, tmp_path):
    root, _ = ws
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint")
    assert run("eval", "--checkpoint", bad, "--data", root / "data", "--out", tmp_path) == 1


def test_non_finite_init_exit_2(ws, tmp_path):
    root, cfg = ws
    p = net.load_checkpoint(root / "p1" / "student.bin")
    p.weights[0][0, 0] = np.nan
    net.save_checkpoint(tmp_path / "nan.bin", p)
    assert run("train-ssl", "--config", cfg, "--data", root / "data", "--init", tmp_path / "nan.bin",
               "--out", tmp_path / "o") == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "rotssl", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout


def test_train_ssl_lambda_zero_matches_supervised(ws, tmp_path):
    root, _ = ws
    raw = {**SMALL, "filter": {"lam": 0.0}, "train": {**SMALL["train"], "eval_every": 1}}
    cfg = tmp_path / "lam0.json"
    cfg.write_text(json.dumps(raw))
    init = root / "p1" / "student.bin"
    assert run("train-ssl", "--config", cfg, "--data", root / "data", "--init", init,
               "--out", tmp_path / "o") == 0
    ssl_rows = (tmp_path / "o" / "log.csv").read_text().splitlines()[1:]

    # Extended supervised run from the same checkpoint on the same labeled stream.
    raw["train"]["lr_phase1"] = config.TrainConfig().lr_phase2
    c = config.from_dict(raw)
    data = {s: synth.load_dataset(root / "data" / s) for s in synth.SPLITS}
    log = engine.CsvLog()
    engine.run_phase1(c, data, init=net.load_checkpoint(init), iters=c.train.phase2_iters,
                      log_to=log, stream=2)
    assert [r.split(",")[4] for r in ssl_rows] == [r["sup_loss"] for r in log.rows]


def test_eval_invariant_to_shuffling(ws):
    root, _ = ws
    ds = synth.load_dataset(root / "data" / "test")
    pred = engine.predict(net.load_checkpoint(root / "p1" / "student.bin"), ds.images)
    modes = fisher.mode(pred)
    perm = np.random.default_rng(0).permutation(len(ds))
    a = engine.pose_metrics(modes, ds.labels)
    b = engine.pose_metrics(modes[perm], ds.labels[perm])
    for k in a:
        assert a[k] == pytest.approx(b[k], rel=1e-12, abs=1e-12)
