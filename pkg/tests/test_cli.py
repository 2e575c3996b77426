"""End-to-end tests that run the installed ``econvnext`` executable."""
import json
import os
import shutil
import subprocess
import sys

import pytest

EXE = shutil.which("econvnext")
BASE = [EXE] if EXE else [sys.executable, "-m", "econvnext.cli"]


def run(*args, env=None):
    e = dict(os.environ, **(env or {}))
    return subprocess.run(BASE + list(args), capture_output=True, text=True, env=e, timeout=600)


def test_describe_tiny_ends_with_logits():
    r = run("describe", "--preset", "e_convnext_tiny")
    assert r.returncode == 0
    lines = r.stdout.strip().splitlines()
    assert "(1024, 7, 7)" in lines[-2] and lines[-1].split()[-1] == "(1000,)"


def test_describe_json_emits_config():
    r = run("describe", "--preset", "csp_final", "--json")
    d = json.loads(r.stdout)
    assert d["config"]["stem"] == "TwoStep2" and d["trace"][-1] == ["logits", [1000]]


def test_flops_pass_line():
    r = run("flops", "--preset", "e_convnext_tiny", "--input", "224")
    assert r.returncode == 0
    assert "PASS vs 2.04G" in r.stdout


def test_flops_json_is_stable_and_integral():
    a = run("flops", "--preset", "e_convnext_tiny", "--json", "--rows")
    b = run("flops", "--preset", "e_convnext_tiny", "--json", "--rows")
    assert a.stdout == b.stdout
    d = json.loads(a.stdout)
    assert isinstance(d["total_flops"], int) and d["target"]["pass"] is True
    assert list(d)[:3] == ["model", "input_size", "convention"]


def test_flops_macs2_and_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    emitted = json.loads(run("describe", "--preset", "e_convnext_tiny", "--json").stdout)["config"]
    cfg.write_text(json.dumps(emitted))
    one = json.loads(run("flops", "--config", str(cfg), "--json").stdout)
    two = json.loads(run("flops", "--config", str(cfg), "--json", "--macs2").stdout)
    assert two["total_flops"] == 2 * one["total_flops"]
    assert two["convention"] == "2 ops per MAC"


def test_params():
    r = run("params", "--preset", "convnext_tiny_ref")
    assert r.returncode == 0 and "28.6M" in r.stdout


def test_bad_flags_give_usage():
    r = run("flops", "--preset", "nope")
    assert r.returncode != 0 and "usage" in r.stderr
    r = run()
    assert r.returncode != 0 and "usage" in r.stderr


def test_bad_input_size_is_an_error():
    r = run("flops", "--preset", "e_convnext_tiny", "--input", "100")
    assert r.returncode == 2 and "divisible" in r.stderr


@pytest.mark.parametrize("suite", ["oracle", "flops"])
def test_verify_fast_suites(suite):
    r = run("verify", "--suite", suite, "--seeds", "3")
    assert r.returncode == 0 and r.stdout.strip().endswith("PASS")


def test_verify_all_on_fresh_checkout():
    r = run("verify", "--suite", "all", env={"ECONVNEXT_THREADS": "1"})
    assert r.returncode == 0, r.stdout


def test_reproduce_table8():
    r = run("reproduce", "table8")
    assert r.returncode == 0
    assert sum(line.endswith("PASS") for line in r.stdout.splitlines()) == 4


def test_reproduce_sec311_shows_every_block():
    r = run("reproduce", "sec311", "--json")
    d = json.loads(r.stdout)
    assert [b["computed"] for b in d["blocks"]] == [218_365_952, 166_985_728, 245_962_752, 65_178_624]
    assert r.returncode == (0 if d["pass"] else 1)
    text = run("reproduce", "sec311").stdout
    assert text.count("PASS") + text.count("FAIL") == 4


def test_bench_norm_json():
    r = run("bench-norm", "--height", "8", "--width", "8", "--channels", "4", "--batch", "2", "--iters", "2", "--json")
    d = json.loads(r.stdout)
    assert r.returncode == 0 and d["ln_seconds"] > 0 and d["bn_seconds"] > 0


def test_make_dataset_then_train(tmp_path):
    data = tmp_path / "data"
    r = run("make-dataset", str(data), "--n", "24", "--size", "32")
    assert r.returncode == 0 and (data / "manifest.json").exists()
    r = run("train", "--data", str(data), "--epochs", "2", "--batch-size", "8",
            "--history", str(tmp_path / "h.csv"), "--save", str(tmp_path / "w"))
    assert r.returncode == 0, r.stderr
    assert r.stdout.splitlines()[0] == "epoch,lr,train_loss,train_acc,val_acc"
    assert len(r.stdout.strip().splitlines()) == 3
    assert (tmp_path / "h.csv").exists() and any((tmp_path / "w").iterdir())


def test_train_missing_dataset(tmp_path):
    r = run("train", "--data", str(tmp_path / "missing"))
    assert r.returncode == 2 and "error" in r.stderr
