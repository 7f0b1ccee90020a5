import json
from importlib import resources

import jsonschema
import numpy as np
import pytest

from segcert import certify, cli, lipnet, selftest
from segcert.tensor import Tensor, write_tensor

SCHEMA = json.loads(resources.files("segcert").joinpath("report_schema.json").read_text())


@pytest.fixture
def maps(tmp_path):
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((2, 3, 6, 7)).astype(np.float32)
    labels = logits.argmax(axis=1)
    labels[:, 0, :3] = (labels[:, 0, :3] + 1) % 3
    labels[1, 5, 6] = 255
    paths = {"logits": tmp_path / "logits.segt", "labels": tmp_path / "labels.segt"}
    write_tensor(Tensor.real32(logits), paths["logits"])
    write_tensor(Tensor.index(labels), paths["labels"])
    return paths, logits, labels


def run(argv):
    return cli.main([str(a) for a in argv])


def read_report(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def test_certify_two_budgets(maps, tmp_path):
    paths, logits, labels = maps
    out = tmp_path / "r.json"
    code = run(["certify", "--metric", "pixel-acc", "--logits", paths["logits"], "--labels", paths["labels"],
                "--lipschitz", "1.0", "--p", "2", "--eps", "0.1,0.17", "--out", out])
    assert code == 0
    report = read_report(out)
    jsonschema.validate(report, SCHEMA)
    assert set(report) == {"manifest", "config", "per_image", "aggregate"}
    assert len(report["per_image"]) == 2
    for img in report["per_image"]:
        assert [r["epsilon"] for r in img["epsilons"]] == [0.1, 0.17]
    cfg = certify.CertConfig(1.0, 2.0, (0.1, 0.17))
    for i, img in enumerate(report["per_image"]):
        want = certify.crpa(logits[i], labels[i], cfg)
        assert [r["crpa"] for r in img["epsilons"]] == want
    digests = {d["role"]: d["sha256"] for d in report["manifest"]["inputs"]}
    assert digests["logits"] == cli.file_digest(paths["logits"])["sha256"]


@pytest.mark.parametrize("metric", certify.METRICS)
def test_every_metric_validates(maps, tmp_path, metric):
    paths, _, _ = maps
    out = tmp_path / f"{metric}.json"
    argv = ["certify", "--metric", metric, "--logits", paths["logits"], "--labels", paths["labels"],
            "--eps", "0,0.05,0.3", "--class", "1", "--out", out]
    if metric != "class-iou":
        argv += ["--gamma", "0.1,0.5,1"]
    assert run(argv) == 0
    jsonschema.validate(read_report(out), SCHEMA)


def test_stability_without_labels(maps, tmp_path):
    paths, _, _ = maps
    out = tmp_path / "s.json"
    assert run(["certify", "--metric", "stability", "--logits", paths["logits"], "--eps", "0", "--out", out]) == 0
    report = read_report(out)
    jsonschema.validate(report, SCHEMA)
    assert all(img["epsilons"][0]["crs"] == 1.0 for img in report["per_image"])


def test_reports_are_reproducible(maps, tmp_path):
    paths, _, _ = maps
    docs = []
    for name, threads in (("a.json", 1), ("b.json", 3)):
        out = tmp_path / name
        run(["certify", "--logits", paths["logits"], "--labels", paths["labels"], "--eps", "0.1",
             "--gamma", "0.5", "--threads", threads, "--out", out])
        doc = read_report(out)
        for img in doc["per_image"]:
            img["metadata"].pop("elapsed_ms")
        docs.append((doc["per_image"], doc["aggregate"]["epsilons"], doc["aggregate"]["gammas"]))
    assert docs[0] == docs[1]


def test_config_file_and_flag_precedence(maps, tmp_path):
    paths, _, _ = maps
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"eps": [0.2, 0.3], "lipschitz": 2.0, "metric": "stability"}))
    out = tmp_path / "r.json"
    assert run(["certify", "--config", conf, "--logits", paths["logits"], "--eps", "0.4", "--out", out]) == 0
    report = read_report(out)
    assert report["config"]["epsilons"] == [0.4]
    assert report["config"]["lipschitz"] == 2.0
    assert report["config"]["metric"] == "stability"


def test_ignore_label_none(maps, tmp_path):
    paths, _, _ = maps
    # 255 becomes an out-of-range label once ignoring is disabled
    code = run(["certify", "--logits", paths["logits"], "--labels", paths["labels"], "--ignore-label", "none"])
    assert code == cli.EXIT_SHAPE


def test_bad_flags(maps):
    paths, _, _ = maps
    assert run(["certify", "--logits", paths["logits"], "--labels", paths["labels"], "--eps", "a,b"]) == 2
    assert run(["certify", "--logits", paths["logits"], "--labels", paths["labels"], "--p", "inf"]) == 2
    assert run(["certify", "--logits", paths["logits"], "--labels", paths["labels"], "--eps", "-1"]) == 2
    assert run(["certify", "--logits", paths["logits"], "--metric", "pixel-acc"]) == 2
    assert run(["certify", "--metric", "nope"]) == 2
    assert run(["frobnicate"]) == 2


def test_io_errors(maps, tmp_path):
    paths, _, _ = maps
    assert run(["certify", "--logits", tmp_path / "missing.segt", "--labels", paths["labels"]]) == 3
    bad = tmp_path / "bad.segt"
    bad.write_bytes(b"SEGX\x01\x01\x01\x00\x01\x00\x00\x00" + bytes(4))
    assert run(["certify", "--logits", bad, "--labels", paths["labels"]]) == 3


def test_shape_mismatch(maps, tmp_path):
    paths, _, _ = maps
    other = tmp_path / "other.segt"
    write_tensor(Tensor.index(np.zeros((2, 5, 5), np.uint8)), other)
    assert run(["certify", "--logits", paths["logits"], "--labels", other]) == 4
    # labels passed where logits are expected
    assert run(["certify", "--logits", paths["labels"], "--labels", paths["labels"]]) == 4


def test_fnr_without_positives_is_undefined(tmp_path):
    logits = np.zeros((2, 3, 3), np.float32)
    logits[0] += 1
    write_tensor(Tensor.real32(logits), tmp_path / "l.segt")
    write_tensor(Tensor.index(np.zeros((3, 3), np.uint8)), tmp_path / "m.segt")
    assert run(["certify", "--metric", "fnr", "--logits", tmp_path / "l.segt",
                "--labels", tmp_path / "m.segt"]) == cli.EXIT_UNDEFINED


def test_selftest_passes(tmp_path):
    out = tmp_path / "s.json"
    assert run(["selftest", "--instances", "200", "--seed", "7", "--out", out]) == 0
    summary = read_report(out)
    assert summary["passed"]
    assert {s["suite"] for s in summary["suites"]} == {"knapsack", "class_iou", "lipschitz", "gradient"}
    again = tmp_path / "t.json"
    run(["selftest", "--instances", "200", "--seed", "7", "--out", again])
    strip = lambda doc: [{k: v for k, v in s.items() if k != "seconds"} for s in doc["suites"]]
    assert strip(summary) == strip(read_report(again))


def test_selftest_catches_engine_bug(monkeypatch):
    real = certify.n_sup

    def off_by_one(sorted_radii, epsilon):
        n = real(sorted_radii, epsilon)
        return n + 1 if 0 < n < sorted_radii.size else n

    monkeypatch.setattr(certify, "n_sup", off_by_one)
    assert run(["selftest", "--instances", "100"]) == cli.EXIT_SELFTEST


def test_bench_reports_median(tmp_path):
    out = tmp_path / "b.json"
    assert run(["bench", "--size", "64x48", "--classes", "5", "--repeat", "3", "--out", out]) == 0
    result = read_report(out)
    assert result["repeat"] == 3 and len(result["times_ms"]) == 3
    assert result["min_ms"] <= result["median_ms"] <= result["max_ms"]
    assert run(["bench", "--size", "32x32", "--metric", "class-iou", "--class", "3", "--classes", "5",
                "--repeat", "2", "--out", tmp_path / "c.json"]) == 0
    assert read_report(tmp_path / "c.json")["class_index"] == 3
    assert run(["bench", "--size", "0x3"]) == 2


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = cli.main(["train", "--out", str(out), "--steps", "20", "--train-count", "16", "--test-count", "4"])
    assert code == 0
    return out


def test_train_and_predict(small_run, tmp_path):
    model = lipnet.load_model(small_run / "model")
    assert abs(model.global_lip - 1.0) < 1e-6
    out = tmp_path / "logits.segt"
    assert run(["predict", "--model", small_run / "model", "--images", small_run / "test_images.segt",
                "--out", out]) == 0
    labels = small_run / "test_masks.segt"
    assert run(["certify", "--logits", out, "--labels", labels, "--lipschitz", model.global_lip,
                "--eps", "0,0.1", "--out", tmp_path / "r.json"]) == 0
    jsonschema.validate(read_report(tmp_path / "r.json"), SCHEMA)


def test_attack_command(small_run, tmp_path):
    out = tmp_path / "a.json"
    code = run(["attack", "--model", small_run / "model", "--images", small_run / "test_images.segt",
                "--labels", small_run / "test_masks.segt", "--eps", "0,0.1", "--steps", "5",
                "--restarts", "1", "--out", out])
    assert code == 0
    report = read_report(out)
    assert report["aggregate"]["violations"] == 0
    for img in report["per_image"]:
        assert all(c <= e for c, e in zip(img["crpa"], img["empirical"]))
    agg = report["aggregate"]["epsilons"][0]
    assert agg["epsilon"] == 0.0
    # empirical at zero budget is clean accuracy, which equals CRPA at zero budget
    assert agg["empirical_mean"] == pytest.approx(agg["crpa_mean"])


def test_attack_missing_manifest(small_run, tmp_path):
    assert run(["attack", "--model", tmp_path, "--images", small_run / "test_images.segt",
                "--labels", small_run / "test_masks.segt"]) == cli.EXIT_IO


def test_attack_soundness_violation(small_run, tmp_path, monkeypatch):
    # overstating the certificate must trip the pipeline check
    real = certify.crpa
    monkeypatch.setattr(certify, "crpa", lambda *a, **k: [min(1.0, v + 0.5) for v in real(*a, **k)])
    code = run(["attack", "--model", small_run / "model", "--images", small_run / "test_images.segt",
                "--labels", small_run / "test_masks.segt", "--eps", "0.1", "--steps", "2",
                "--restarts", "1", "--limit", "2", "--out", tmp_path / "a.json"])
    assert code == cli.EXIT_UNSOUND


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "segcert", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "segcert" in proc.stdout


def test_selftest_module_run_all_small():
    results = selftest.run_all(instances=50, seed=3)
    assert all(r.passed for r in results)
