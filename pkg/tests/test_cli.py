import json

import numpy as np
import pytest

from adaptq.cli import RunManifest, main
from adaptq.net import Net, desk_spec
from adaptq.store import QuantizedLayer, dumps, load_model, model_size_bytes


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["pretrain", "--out", str(d / "fp.qnnw")]) == 0
    return d


def test_pretrain_defaults(work, capsys):
    net = Net.from_model(load_model(work / "fp.qnnw"))
    from adaptq.data import desk_task

    assert net.evaluate(desk_task(0).test)[1] >= 0.97
    lines = (work / "fp.qnnw.metrics.jsonl").read_text().splitlines()
    recs = [json.loads(l) for l in lines]
    assert {r["split"] for r in recs} == {"train", "val", "test"}
    assert max(r["epoch"] for r in recs) == 80
    m = RunManifest.from_json((work / "fp.qnnw.manifest.json").read_text())
    assert m.command == "pretrain" and m.seed == 0 and m.config["epochs"] == 80


def test_pretrain_is_byte_identical(work, tmp_path):
    assert main(["pretrain", "--out", str(tmp_path / "again.qnnw")]) == 0
    assert (tmp_path / "again.qnnw").read_bytes() == (work / "fp.qnnw").read_bytes()
    a = (tmp_path / "again.qnnw.metrics.jsonl").read_text()
    assert a == (work / "fp.qnnw.metrics.jsonl").read_text()


def test_zero_epochs_saves_initial_model(tmp_path):
    assert main(["pretrain", "--out", str(tmp_path / "init.qnnw"), "--epochs", "0", "--seed", "3"]) == 0
    assert (tmp_path / "init.qnnw").read_bytes() == dumps(Net(desk_spec(3)).to_model())


def test_bad_paths_exit_2(tmp_path, capsys):
    assert main(["pretrain", "--out", str(tmp_path / "missing" / "m.qnnw")]) == 2
    assert "does not exist" in capsys.readouterr().err
    assert main(["report", str(tmp_path / "nope.qnnw")]) == 2
    (tmp_path / "junk.qnnw").write_bytes(b"junk")
    assert main(["report", str(tmp_path / "junk.qnnw")]) == 2
    assert main(["quantize"]) == 2
    assert main(["quantize", str(tmp_path / "junk.qnnw"), "--out", str(tmp_path / "x"), "--bits", "9"]) == 2
    assert not (tmp_path / "x").exists()


def test_quantize_pass_through(work, tmp_path):
    out = tmp_path / "same.qnnw"
    assert main(["quantize", str(work / "fp.qnnw"), "--out", str(out), "--bits", "32"]) == 0
    assert out.read_bytes() == (work / "fp.qnnw").read_bytes()


def test_quantize_defaults_and_one_bit(work, tmp_path):
    out = tmp_path / "k4.qnnw"
    assert main(["quantize", str(work / "fp.qnnw"), "--out", str(out), "--qat-epochs", "1"]) == 0
    m = RunManifest.from_json((tmp_path / "k4.qnnw.manifest.json").read_text())
    assert (m.config["method"], m.config["bits"], m.config["retention"], m.config["rescale"]) == ("kmeans", 4, 0.9, "sym")
    assert str(work / "fp.qnnw") in m.inputs
    layer = load_model(out)["dense1.weight"]
    assert isinstance(layer, QuantizedLayer) and layer.codebook.size == 16
    out1 = tmp_path / "k1.qnnw"
    assert main(["quantize", str(work / "fp.qnnw"), "--out", str(out1), "--bits", "1", "--qat-epochs", "1"]) == 0
    assert load_model(out1)["dense1.weight"].codebook.size == 2


def test_quantize_rejects_bad_method_bits(work, tmp_path):
    assert main(["quantize", str(work / "fp.qnnw"), "--out", str(tmp_path / "a"), "--method", "apot", "--bits", "3"]) == 2
    assert main(["quantize", str(work / "fp.qnnw"), "--out", str(tmp_path / "a"), "--method", "uniform", "--bits", "1"]) == 2


def test_failed_run_leaves_output_untouched(work, tmp_path):
    out = tmp_path / "keep.qnnw"
    out.write_bytes(b"previous")
    rc = main(["quantize", str(work / "fp.qnnw"), "--out", str(out), "--retention", "0", "--qat-epochs", "1"])
    assert rc == 1
    assert out.read_bytes() == b"previous"


@pytest.fixture(scope="module")
def profiled(work):
    assert main(["profile", str(work / "fp.qnnw"), "--out", str(work / "prof.txt"), "--probes", "8"]) == 0
    return work / "prof.txt"


def test_search_feasibility_boundary(work, profiled, tmp_path):
    from adaptq.search import uniform_plan
    from adaptq.sensitivity import SensitivityProfile

    prof = SensitivityProfile.load(profiled)
    smallest = uniform_plan(prof, 1).total_size_bytes
    assert main(["search", str(profiled), "--out", str(tmp_path / "p.txt"), "--target-bytes", str(smallest)]) == 0
    assert set(l.split("\t")[1] for l in (tmp_path / "p.txt").read_text().splitlines() if not l.startswith("#")) == {"1"}
    rc = main(["search", str(profiled), "--out", str(tmp_path / "q.txt"), "--target-bytes", str(smallest - 1)])
    assert rc == 1 and not (tmp_path / "q.txt").exists()
    assert main(["search", str(profiled), "--out", str(tmp_path / "q.txt")]) == 2


def test_msft_with_checkpoints(work, profiled, tmp_path):
    plan = tmp_path / "plan.txt"
    assert main(["search", str(profiled), "--out", str(plan), "--target-bits", "2"]) == 0
    ck = tmp_path / "ck"
    ck.mkdir()
    out = tmp_path / "ms.qnnw"
    assert main(["msft", str(work / "fp.qnnw"), str(plan), "--out", str(out), "--epochs", "4", "--checkpoints", str(ck)]) == 0
    assert sorted(p.name for p in ck.iterdir()) == [f"stage{j}.qnnw" for j in (1, 2, 3, 4)]
    stages = {json.loads(l).get("stage") for l in (tmp_path / "ms.qnnw.metrics.jsonl").read_text().splitlines()}
    assert stages == {1, 2, 3, 4}
    model = load_model(out)
    assert all(isinstance(model[f"{n}.weight"], QuantizedLayer) for n in Net.from_model(model).names)


def test_binarize(work, tmp_path):
    out = tmp_path / "ad.qnnw"
    assert main(["binarize", str(work / "fp.qnnw"), "--scheme", "adaptive", "--out", str(out), "--qat-epochs", "1"]) == 0
    layer = load_model(out)["dense0.weight"]
    assert layer.codebook.scheme.value == "adaptive_binary" and layer.codebook.alpha == 1.0


def test_report_ratio_matches_size_accounting(work, tmp_path, capsys):
    out = tmp_path / "k4.qnnw"
    main(["quantize", str(work / "fp.qnnw"), "--out", str(out), "--qat-epochs", "1"])
    capsys.readouterr()
    assert main(["report", str(out), "--baseline", str(work / "fp.qnnw")]) == 0
    text = capsys.readouterr().out
    rep = model_size_bytes(load_model(out))
    assert f"compression ratio    {rep.ratio:.2f}x" in text
    assert f"total bytes          {rep.total_bytes}" in text


def test_hist_first_layer_wider_than_last(work, tmp_path):
    out = tmp_path / "h.jsonl"
    assert main(["hist", str(work / "fp.qnnw"), "--out", str(out), "--method", "adaptive"]) == 0
    recs = [json.loads(l) for l in out.read_text().splitlines()]
    assert [r["layer"] for r in recs] == [f"dense{i}" for i in range(8)]
    assert all(len(r["counts"]) == 64 and len(r["edges"]) == 65 for r in recs)
    assert sum(recs[0]["counts"]) == recs[0]["count"]
    assert recs[0]["std"] > recs[-1]["std"]
    # adaptive binary sets: first layer wider than last
    spread = lambda r: r["levels"][1] - r["levels"][0]
    assert spread(recs[0]) > spread(recs[-1])


def test_rerun_reproduces_bytes(work, tmp_path):
    out = tmp_path / "r.qnnw"
    assert main(["quantize", str(work / "fp.qnnw"), "--out", str(out), "--bits", "2", "--qat-epochs", "2"]) == 0
    first = out.read_bytes(), (tmp_path / "r.qnnw.metrics.jsonl").read_bytes()
    manifest = (tmp_path / "r.qnnw.manifest.json").read_bytes()
    out.unlink()
    assert main(["rerun", str(tmp_path / "r.qnnw.manifest.json")]) == 0
    assert (out.read_bytes(), (tmp_path / "r.qnnw.metrics.jsonl").read_bytes()) == first
    assert (tmp_path / "r.qnnw.manifest.json").read_bytes() == manifest
