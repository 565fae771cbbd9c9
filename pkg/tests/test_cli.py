import json

import pytest

from cordseg.cli import main
from cordseg.io import load_manifest, load_volume, read_metrics

TINY = {"model": {"base_dim": 8, "heads": [2, 2, 4], "patch": 2, "window": 2},
        "train": {"epochs": 1, "batch_size": 8, "warmup_steps": 1}}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--subjects", "4", "--machines", "2", "--seed", "3", "--out", str(root / "data")]) == 0
    return root


def test_synth_writes_manifest(dataset):
    m = load_manifest(dataset / "data")
    assert [s.id for s in m.subjects] == ["sub-000", "sub-001", "sub-002", "sub-003"]
    assert {s.machine for s in m.subjects} == {"A", "B"}
    assert len(m.subjects[0].dwi) == 13
    truth = json.loads((dataset / "data" / "sub-000" / "truth.json").read_text())
    assert len(truth["levels"]) == 7


def test_quantify_dti_correlate_on_reference_labels(dataset, capsys):
    data, out = dataset / "data", dataset / "metrics.csv"
    assert main(["quantify", "--labels", str(data), "--out", str(out)]) == 0
    assert main(["dti", "--dwi", str(data), "--labels", str(data), "--out", str(out)]) == 0
    rows = read_metrics(out)
    assert len(rows) == 4 * 7
    truth = json.loads((data / "sub-001" / "truth.json").read_text())["levels"]
    for r in (r for r in rows if r.subject == "sub-001"):
        t = truth[r.level - 1]
        assert r.csa_mm2 == pytest.approx(t["csa_mm2"], rel=0.15)
        assert r.fa == pytest.approx(t["fa"], abs=0.05)
    comp = dataset / "comparisons.csv"
    assert main(["correlate", "--metrics", str(out), "--group-by", "machine", "--out", str(comp)]) == 0
    assert comp.read_text().splitlines()[0] == "stratumA,stratumB,rA,nA,rB,nB,z,p"
    assert "machine=A" in capsys.readouterr().out


def test_train_and_segment_dataset(dataset):
    cfg = dataset / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    ckpt = dataset / "model.ckpt"
    assert main(["--strict", "train", "--manifest", str(dataset / "data"), "--config", str(cfg),
                 "--out", str(ckpt)]) == 0
    assert main(["segment", "--ckpt", str(ckpt), "--in", str(dataset / "data"), "--out", str(dataset / "seg")]) == 0
    seg = load_manifest(dataset / "seg")
    lab = load_volume(seg.resolve(seg.subjects[0].label))
    assert lab.labels.shape == (14, 64, 64) and lab.labels.max() < 5
    single = dataset / "one.vol"
    assert main(["segment", "--ckpt", str(ckpt), "--in", str(dataset / "data" / "sub-000" / "image.vol"),
                 "--out", str(single)]) == 0
    assert load_volume(single).labels.tobytes() == lab.labels.tobytes()


@pytest.mark.parametrize("argv", [
    ["bench", "--attention", "foo", "--tokens", "16"],
    ["quantify", "--labels", "/nonexistent", "--out", "/tmp/x.csv"],
    ["correlate", "--metrics", "/nonexistent.csv", "--group-by", "gender", "--out", "/tmp/x.csv"],
])
def test_validation_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_bad_config_exits_1(dataset, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"heads": [5, 5, 5]}}))
    assert main(["train", "--manifest", str(dataset / "data"), "--config", str(bad),
                 "--out", str(tmp_path / "m.ckpt")]) == 1


def test_gradcheck_ops_only(capsys):
    assert main(["gradcheck", "--ops-only"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS" in out


def test_bench_small(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--tokens", "16,32", "--dim", "16", "--heads", "2", "--repeats", "1",
                 "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "attention,tokens,dim,heads,seconds" and len(lines) == 5


def test_run_pipeline_helper_is_deterministic(tmp_path):
    from cordseg.experiments import run_pipeline, tree_digest

    cfg = {**TINY, "train": {**TINY["train"], "epochs": 1}}
    a = tree_digest(run_pipeline(tmp_path / "a", subjects=3, seed=1, config=cfg))
    b = tree_digest(run_pipeline(tmp_path / "b", subjects=3, seed=1, config=cfg))
    assert a == b and "corr_level.csv" in a and "seg/manifest.json" in a
