"""Smoke tests for the python module built from the C++ core."""

import json
import math

import pytest

import metabal


def tiny_config(seed=0):
    cfg = json.loads(metabal.default_config())
    cfg["seed"] = seed
    cfg["arch"] = [2, 6, 3]
    cfg["meta_batch"] = 2
    cfg["total_iters"] = 4
    cfg["eval_every"] = 2
    cfg["val_episodes"] = 3
    cfg["variant"]["inner_steps_train"] = 1
    cfg["variant"]["inner_steps_test"] = 1
    cfg["dist"]["classes_per_episode"] = 3
    cfg["dist"]["shot_max"] = 6
    cfg["dist"]["queries_per_class"] = 4
    cfg["dist"]["source"]["classes_per_split"] = 8
    cfg["encoder"]["nn1_widths"] = [6, 6]
    cfg["encoder"]["nn2_widths"] = [8, 4]
    cfg["encoder"]["head_hidden"] = 6
    return cfg


def test_version():
    assert metabal.__version__


def test_kl_closed_form():
    assert metabal.kl_standard_normal([0.0], [1.0]) == pytest.approx(0.0, abs=1e-12)
    assert metabal.kl_standard_normal([1.0], [1.0]) == pytest.approx(0.5, abs=1e-12)
    # sum over dimensions
    assert metabal.kl_standard_normal([1.0, 1.0], [1.0, 1.0]) == pytest.approx(1.0, abs=1e-12)


def test_gradient_check():
    assert metabal.gradient_check_max_error(seed=3) < 1e-4


def test_episode_sampler_invariants():
    cfg = tiny_config(7)
    payload = json.loads(metabal.sample_episodes(json.dumps(cfg), count=20, seed=7))
    assert payload["format_version"] == 1
    assert len(payload["episodes"]) == 20
    for ep in payload["episodes"]:
        counts = ep["counts"]
        assert len(counts) == 3
        assert all(1 <= n <= 6 for n in counts)
        queries = ep["query"]["y"]
        for c in range(3):
            assert queries.count(c) == 4


def test_tiny_train_is_deterministic(tmp_path):
    cfg = json.dumps(tiny_config(11))
    a = json.loads(metabal.train(cfg))
    b = json.loads(metabal.train(cfg))
    assert a["loss_trace"] == b["loss_trace"]
    assert a["iterations"] == 4
    assert all(math.isfinite(x) for x in a["loss_trace"])


def test_train_then_evaluate(tmp_path):
    out = str(tmp_path / "run")
    summary = json.loads(metabal.train(json.dumps(tiny_config(13)), out))
    assert summary["episodes_skipped"] + 0 <= summary["episodes_attempted"]
    report = json.loads(
        metabal.evaluate(out + "/best.json", pool="test", episodes=4, mode="naive", samples=1)
    )
    assert report["evaluated"] + report["skipped"] == report["requested"] == 4
    assert 0.0 <= report["mean_accuracy"] <= 1.0
