import json
import subprocess
import sys

import pytest

from scenegcn.cli import load_config, main
from scenegcn.graph import graph_to_dict, load_graphs
from scenegcn.scene import save_scenes

from conftest import make_scene, vehicle

SMALL_MODEL = ["--layer-dims", "8,8,6", "--embedding-dim", "8"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--scenes-per-class", "6", "--seed", "3"]) == 0
    assert main(["graph", "--scenes", str(root / "data"), "--out", str(root / "graphs")]) == 0
    assert main(["train", "--graphs", str(root / "graphs"), "--out", str(root / "run"), "--seeds", "1",
                 "--epochs", "2", "--model", "rel-att-gcn", *SMALL_MODEL]) == 0
    return root


def test_default_synth_writes_2400_scenes(tmp_path):
    assert main(["synth", "--out", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["scenes"] == 2400
    assert manifest["splits"] == {"train": 1680, "val": 360, "test": 360}
    assert json.loads((tmp_path / "config.json").read_text())["synth"]["scenes_per_class"] == 400


def test_synth_same_seed_same_files(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--seed", "7", "--scenes-per-class", "3"]) == 0
    for part in ("train", "val", "test"):
        assert (tmp_path / "a" / f"{part}.jsonl").read_bytes() == (tmp_path / "b" / f"{part}.jsonl").read_bytes()


def test_synth_bad_ratios_exit_2(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--ratios", "0.5,0.5,0.5"]) == 2
    assert "sum" in capsys.readouterr().err


def test_graph_output_reloads_and_deadband_zero_matches_on_clean_scenes(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--scenes-per-class", "4",
                 "--noise-sigma", "0", "--dropout", "0"]) == 0
    assert main(["graph", "--scenes", str(tmp_path / "d"), "--out", str(tmp_path / "g1")]) == 0
    assert main(["graph", "--scenes", str(tmp_path / "d"), "--out", str(tmp_path / "g0"), "--deadband", "0"]) == 0
    for part in ("train", "val", "test"):
        a = (tmp_path / "g1" / f"{part}.jsonl").read_text()
        assert a == (tmp_path / "g0" / f"{part}.jsonl").read_text()
        graphs = load_graphs(tmp_path / "g1" / f"{part}.jsonl")
        assert "".join(json.dumps(graph_to_dict(g), sort_keys=True) + "\n"
                       for g in graphs) == a


def test_graph_reports_degenerate_scene(tmp_path):
    good = make_scene([vehicle("a", (0, -3), (0, 10)), vehicle("b", (3, 3), (0, 0))], "good")
    bad = make_scene([vehicle("a", (0, -3), (0, 10))], "lonely")
    save_scenes([good, bad], tmp_path / "s.jsonl")
    assert main(["graph", "--scenes", str(tmp_path / "s.jsonl"), "--out", str(tmp_path / "g")]) == 1
    errors = json.loads((tmp_path / "g" / "errors.json").read_text())
    assert [e["scene"] for e in errors] == ["lonely"]
    assert len(load_graphs(tmp_path / "g" / "s.jsonl")) == 1


def test_rules_and_eval_emit_same_schema(corpus, tmp_path):
    assert main(["rules", "--graphs", str(corpus / "graphs"), "--out", str(tmp_path / "r")]) == 0
    assert main(["eval", "--graphs", str(corpus / "graphs"), "--checkpoint", str(corpus / "run" / "seed1.ckpt.json"),
                 "--out", str(tmp_path / "e")]) == 0
    r = json.loads((tmp_path / "r" / "report.json").read_text())
    e = json.loads((tmp_path / "e" / "report.json").read_text())
    assert set(r) == set(e) and set(r["per_class"]) == set(e["per_class"])
    assert (r["method"], e["method"]) == ("rules", "rel-att-gcn")
    assert (tmp_path / "r" / "report.csv").read_text().splitlines()[0] == "class,precision,recall,f1,support"


def test_eval_with_conflicting_dims_exit_2(corpus, capsys):
    code = main(["eval", "--graphs", str(corpus / "graphs"), "--checkpoint", str(corpus / "run" / "seed1.ckpt.json"),
                 "--layer-dims", "64,32,6"])
    assert code == 2
    assert "config conflict" in capsys.readouterr().err


def test_eval_missing_checkpoint_exit_2(corpus):
    assert main(["eval", "--graphs", str(corpus / "graphs"), "--checkpoint", str(corpus / "nope.json")]) == 2


def test_train_echoes_config_and_reruns_identically(corpus, tmp_path):
    echoed = corpus / "run" / "config.json"
    cfg = json.loads(echoed.read_text())
    assert cfg["model"]["layer_dims"] == [8, 8, 6] and cfg["train"]["epochs"] == 2
    cfg["paths"]["out"] = str(tmp_path / "again")
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "cfg.json")]) == 0
    assert (tmp_path / "again" / "report.json").read_text() == (corpus / "run" / "report.json").read_text()


def test_train_without_splits_exit_2(tmp_path):
    save_scenes([make_scene([vehicle("a", (0, -3), (0, 10)), vehicle("b", (3, 3), (0, 0))])], tmp_path / "x.jsonl")
    assert main(["train", "--scenes", str(tmp_path / "x.jsonl"), "--out", str(tmp_path / "o")]) == 2


def test_attn_exports_class_by_relation_csv(corpus, tmp_path):
    assert main(["attn", "--graphs", str(corpus / "graphs"), "--checkpoint", str(corpus / "run" / "seed1.ckpt.json"),
                 "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "attention.csv").read_text().splitlines()
    assert lines[0] == "class,node,move_forward,move_backward,left_to_right,right_to_left,no_change"
    assert [l.split(",")[0] for l in lines[1:]] == ["MAU", "MTU", "PRK", "LCL", "LCR", "OVT"]


def test_attn_on_plain_model_exit_2(corpus, tmp_path):
    assert main(["train", "--graphs", str(corpus / "graphs"), "--out", str(tmp_path), "--seeds", "1",
                 "--epochs", "1", "--model", "mrgcn", *SMALL_MODEL]) == 0
    assert main(["attn", "--graphs", str(corpus / "graphs"), "--checkpoint", str(tmp_path / "seed1.ckpt.json")]) == 2


def test_scarcity_and_transfer_commands(corpus, tmp_path):
    assert main(["scarcity", "--scenes", str(corpus / "data"), "--out", str(tmp_path / "s"), "--seeds", "1",
                 "--epochs", "1", "--fractions", "0.5,1.0", *SMALL_MODEL]) == 0
    assert len((tmp_path / "s" / "scarcity.csv").read_text().splitlines()) == 1 + 2 * 2 * 6
    assert main(["transfer", "--scenes", str(corpus / "data"), "--out", str(tmp_path / "t"), "--seeds", "1",
                 "--epochs", "1", "--regime", "no-overtake", "--scenes-per-class", "10", *SMALL_MODEL]) == 0
    out = json.loads((tmp_path / "t" / "transfer.json").read_text())
    assert set(out) == {"source", "no-overtake"}
    assert "OVT" not in out["no-overtake"]["per_class"]
    with pytest.warns(UserWarning, match="fewer than split parts"):
        code = main(["transfer", "--scenes", str(corpus / "data"), "--seeds", "1", "--epochs", "1",
                     "--regime", "no-overtake", "--scenes-per-class", "2", *SMALL_MODEL])
    assert code == 2


def test_gradcheck_passes_and_fails_on_tolerance(capsys):
    assert main(["gradcheck", *SMALL_MODEL]) == 0
    assert main(["gradcheck", *SMALL_MODEL, "--model", "mrgcn", "--tol", "1e-15"]) == 1
    assert "FAIL" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["nonsense"],
    ["train", "--bogus-flag"],
    ["rules"],
    ["gradcheck", "--layer-dims", "8,8,5"],
    ["synth", "--out", "/tmp/x", "--noise-sigma", "-1"],
])
def test_usage_errors_exit_2(argv):
    assert main(argv) == 2


def test_unknown_config_key_exit_2(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"epochz": 3}}))
    assert main(["gradcheck", "--config", str(tmp_path / "c.json")]) == 2


def test_environment_overrides_config_and_flags_override_environment(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"epochs": 7}, "seed": 4}))
    env = {"SCENEGCN_TRAIN_EPOCHS": "9", "SCENEGCN_SYNTH_NOISE_SIGMA": "0.1", "HOME": "/x"}
    cfg = load_config(str(tmp_path / "c.json"), env)
    assert cfg["train"]["epochs"] == 9 and cfg["synth"]["noise_sigma"] == 0.1 and cfg["seed"] == 4
    with pytest.raises(Exception):
        load_config(None, {"SCENEGCN_TRAIN_NOPE": "1"})


def test_module_entry_point_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "scenegcn", "synth", "--out", str(tmp_path), "--ratios", "1,1,1"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
