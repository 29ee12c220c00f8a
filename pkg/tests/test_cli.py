import json
import re
import time

import numpy as np
import pytest

from lipens import cli, data, nn
from lipens import experiment as exp
from lipens.ensemble import load_manifest
from lipens.nn import DenseLayer, Network, load_network

from oracles import max_corner_l1


@pytest.fixture
def blobs_manifest(tmp_path):
    path = tmp_path / "blobs.json"
    path.write_text(json.dumps({"source": "blobs", "n": 300, "noise": 0.6, "seed": 1}))
    return path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def save_linear(path, w, act=nn.IDENTITY):
    w = np.asarray(w, dtype=float)
    nn.save_network(Network([DenseLayer(w, np.zeros(w.shape[0]), act)]), path)
    return path


def test_train_base_end_to_end(tmp_path, capsys, blobs_manifest):
    args = ["train-base", "--arch", "fnn2", "--data", blobs_manifest, "--hidden", 8, "--epochs", 3, "--seed", 4]
    code, out, _ = run(capsys, *args, "--out", tmp_path / "a.lnn")
    assert code == 0
    summary = json.loads(out)
    assert summary["arch"] == "fnn2" and 0 <= summary["test_acc"] <= 1
    net = load_network(tmp_path / "a.lnn")
    assert (net.input_dim, net.output_dim, len(net.layers)) == (2, 2, 2)
    assert run(capsys, *args, "--out", tmp_path / "b.lnn")[0] == 0
    assert (tmp_path / "a.lnn").read_bytes() == (tmp_path / "b.lnn").read_bytes()


def test_usage_errors(tmp_path, capsys, blobs_manifest):
    code, _, err = run(capsys, "train-base", "--arch", "fnn3", "--data", blobs_manifest, "--out", tmp_path / "x.lnn")
    assert code == 2 and "invalid choice" in err
    assert run(capsys)[0] == 2
    assert run(capsys, "report", "--out", tmp_path / "r", "--experiment", "table9")[0] == 2


def test_data_errors(tmp_path, capsys, blobs_manifest):
    code, _, err = run(capsys, "train-base", "--arch", "fnn2", "--data", tmp_path / "nope", "--out", tmp_path / "x.lnn")
    assert code == 3 and "data error" in err
    (tmp_path / "bad.lnn").write_bytes(b"LIPNNET\x00garbage")
    assert run(capsys, "llc", "--model", tmp_path / "bad.lnn", "--data", blobs_manifest)[0] == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(tmp_path, capsys, blobs_manifest):
    code, _, err = run(
        capsys, "train-base", "--arch", "fnn4", "--data", blobs_manifest, "--out", tmp_path / "x.lnn", "--lr", 1e300
    )
    assert code == 4 and "numerical" in err


def test_llc_command_fixtures(tmp_path, capsys, blobs_manifest):
    base = ["--data", blobs_manifest, "--eps", 0.1, "--anchors", 5]
    code, out, _ = run(capsys, "llc", "--model", save_linear(tmp_path / "id.lnn", np.eye(2)), *base)
    assert code == 0
    doc = json.loads(out)
    assert doc["value"] == pytest.approx(2.0, rel=1e-12)
    assert doc["kind"] == "empirical_local" and doc["n_samples"] == 5 and doc["radius"] == 0.1

    const = Network([DenseLayer(np.zeros((2, 2)), [1.0, 2.0], nn.IDENTITY)])
    nn.save_network(const, tmp_path / "c.lnn")
    run(capsys, "llc", "--model", tmp_path / "c.lnn", *base, "--out", tmp_path / "c.json")
    assert json.loads((tmp_path / "c.json").read_text())["value"] == 0.0

    w = np.array([[1.0, -3.0], [0.5, 2.0], [-1.0, -1.0]])
    code, out, _ = run(capsys, "llc", "--model", save_linear(tmp_path / "w.lnn", w), *base, "--restarts", 64, "--witnesses")
    doc = json.loads(out)
    assert doc["value"] == pytest.approx(max_corner_l1(w, 0.1), rel=0.02)
    assert len(doc["witnesses"]) == 5


def test_build_ensemble_commands(tmp_path, capsys, blobs_manifest):
    a = save_linear(tmp_path / "a.lnn", [[1.0, 0.5], [-0.5, 1.0]])
    b = save_linear(tmp_path / "b.lnn", [[2.0, -1.0], [0.0, 3.0]])
    common = ["--data", blobs_manifest, "--anchors", 10, "--restarts", 4]

    code, out, _ = run(capsys, "build-ensemble", "--kind", "bag", "--mode", "proposed", "--members", a, a, "--out", tmp_path / "twin.json", *common)
    assert code == 0
    assert json.loads(out)["weights"] == [0.5, 0.5]

    run(capsys, "build-ensemble", "--kind", "bag", "--mode", "equal", "--members", a, b, "--out", tmp_path / "eq.json", *common)
    doc = json.loads((tmp_path / "eq.json").read_text())
    assert doc["certificate"] == pytest.approx(np.mean(doc["member_llc"]), rel=1e-12)

    for mode in ("proposed", "reverse"):
        code, _, _ = run(
            capsys, "build-ensemble", "--kind", "stack", "--mode", mode, "--members", a, b,
            "--out", tmp_path / f"st-{mode}.json", "--epochs", 2, "--meta-hidden", 8, *common,
        )
        assert code == 0
        doc = json.loads((tmp_path / f"st-{mode}.json").read_text())
        assert doc["satisfies_condition"] is (mode == "proposed")
        assert (doc["certificate"] <= min(doc["member_llc"])) is (mode == "proposed")
        model = load_manifest(tmp_path / f"st-{mode}.json")
        assert model.satisfies_stacking_condition() is (mode == "proposed")

    code, _, err = run(capsys, "build-ensemble", "--kind", "stack", "--mode", "equal", "--members", a, b, "--out", tmp_path / "x.json", *common)
    assert code == 2 and "stacking mode" in err


@pytest.fixture
def tiny_idx(tmp_path):
    # values on the 1/255 grid so the IDX round trip is exact
    x = np.array([[255, 0], [153, 102], [51, 255], [102, 153], [255, 0]]) / 255.0
    ds = data.LabeledDataset(x, [0, 0, 1, 1, 1], 10)
    d = tmp_path / "idx"
    d.mkdir()
    for split, (img, lab) in data.MNIST_FILES.items():
        data.write_idx(ds, d / img, d / lab, image_shape=(1, 2))
    return d


def test_attack_command_hand_fixture(tmp_path, capsys, tiny_idx):
    model = save_linear(tmp_path / "id.lnn", np.eye(2))
    base = ["attack", "--model", model, "--data", tiny_idx, "--samples", 5]
    # logits are the inputs; FGSM moves each point 0.2 towards the other class
    code, out, _ = run(capsys, *base, "--kind", "fgsm", "--eps", 0.2, "--out", tmp_path / "f.jsonl")
    assert code == 0
    doc = json.loads(out)
    assert doc["clean_accuracy"] == pytest.approx(0.8)
    assert doc["accuracy"] == pytest.approx(0.4)
    assert doc["max_linf"] <= 0.2 + 1e-12
    recs = [json.loads(line) for line in (tmp_path / "f.jsonl").read_text().splitlines()]
    assert [r["adv_pred"] for r in recs] == [0, 1, 1, 0, 0]
    assert [r["clean_pred"] for r in recs] == [0, 0, 1, 1, 0]

    code, out, _ = run(capsys, *base, "--kind", "pgd", "--eps", 1e-12)
    assert json.loads(out)["accuracy"] == json.loads(out)["clean_accuracy"]


def test_report_blobs_smoke(tmp_path, capsys):
    start = time.perf_counter()
    code, md, _ = run(capsys, "report", "--experiment", "blobs-smoke", "--out", tmp_path / "a", "--seed", 3)
    assert time.perf_counter() - start < 60
    assert code == 0
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert [r["name"] for r in rep["rows"]] == list(exp.ROW_NAMES)
    assert rep["schema_version"] == exp.SCHEMA_VERSION and rep["seed"] == 3
    for row in rep["rows"]:
        for key in ("clean_acc", "fgsm_acc", "pgd_acc"):
            assert 0.0 <= row[key] <= 1.0
        assert row["llc_estimate"] >= 0
    assert rep["configs"]["ascent"]["steps"] == 20
    assert not (tmp_path / "a" / "partial.json").exists()

    # every number in the Markdown table comes from the JSON report
    table = (tmp_path / "a" / "report.md").read_text()
    assert table == md
    body = [line for line in table.splitlines() if line.startswith("| ") and "Network" not in line]
    assert len(body) == len(rep["rows"])
    for line, row in zip(body, rep["rows"]):
        cells = [c.strip() for c in line.strip("|").split("|")]
        assert cells[0] == exp.PRETTY[row["name"]]
        assert cells[1:] == [
            exp.fmt_llc(row["llc_estimate"]),
            exp.fmt_pct(row["clean_acc"]),
            exp.fmt_pct(row["fgsm_acc"]),
            exp.fmt_pct(row["pgd_acc"]),
        ]
        assert all(re.fullmatch(r"\d+\.\d\d", c) for c in cells[1:])

    # same seed, same bytes
    run(capsys, "report", "--experiment", "blobs-smoke", "--out", tmp_path / "b", "--seed", 3)
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    # saved manifests reload to the same models
    for name in ("bag-proposed", "stack-proposed", "stack-reverse"):
        model = load_manifest(tmp_path / "a" / f"{name}.json")
        assert model.certificate == pytest.approx(rep["ensembles"][name]["certificate"], rel=1e-12)


def test_config_precedence(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"llc": {"anchors": 7}, "train": {"epochs": 2}}))
    base = ["report", "--experiment", "blobs-smoke", "--config", tmp_path / "cfg.json"]
    run(capsys, *base, "--out", tmp_path / "a")
    cfg = json.loads((tmp_path / "a" / "report.json").read_text())["configs"]
    assert cfg["llc"]["anchors"] == 7 and cfg["sizes"]["anchors"] == 7
    assert cfg["train"]["epochs"] == 2
    run(capsys, *base, "--anchors", 9, "--out", tmp_path / "b")
    cfg = json.loads((tmp_path / "b" / "report.json").read_text())["configs"]
    assert cfg["llc"]["anchors"] == 9 and cfg["train"]["epochs"] == 2
    assert cfg["llc"]["steps"] == exp.DEFAULTS["blobs-smoke"]["llc"]["steps"]


def test_multi_seed_summary(tmp_path, capsys):
    code, out, _ = run(capsys, "report", "--experiment", "blobs-smoke", "--seeds", 0, 1, 2, "--out", tmp_path)
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["seeds"] == [0, 1, 2]
    assert set(summary["median"]) == set(exp.ROW_NAMES)
    assert summary["trends"]["d_bag_certificate_order"]["passed"]
    for s in (0, 1, 2):
        assert (tmp_path / f"seed{s}" / "report.json").exists()


def test_failure_leaves_partial_results(tmp_path, capsys, monkeypatch):
    calls = {"n": 0}
    real = exp.run_attack

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 8:
            raise FloatingPointError("injected")
        return real(*args, **kwargs)

    monkeypatch.setattr(exp, "run_attack", flaky)
    code, _, err = run(capsys, "report", "--experiment", "blobs-smoke", "--out", tmp_path)
    assert code == 4 and "injected" in err
    partial = json.loads((tmp_path / "partial.json").read_text())
    assert [r["name"] for r in partial["rows"]] == list(exp.ROW_NAMES[:4])
