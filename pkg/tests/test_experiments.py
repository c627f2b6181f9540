import json

import numpy as np
import pytest
import yaml

from syncanim import experiments as ex
from syncanim.metrics import MetricReport

TINY = {
    "model": {"d_model": 16, "n_heads": 2, "n_blocks": 1, "audio_heads": 2, "audio_width": 8},
    "taps": [{"encoder": "semantic", "layers": [11]}],
    "prior": {"n_clips": 8, "steps": 4, "batch_size": 4},
    "bench": {"pretrain_size": 12, "finetune_pool_per_class": 2, "k_shots": [1], "test_per_class": 1},
    "pretrain": {"epochs": 1, "batch_size": 8},
    "finetune": {"epochs": 1, "batch_size": 4, "K": 1},
    "eval": {"test_per_class": 1, "windows": 1, "ddim_steps": 2},
    "seeds": [1],
}


def tiny_cfg(tmp_path, **extra):
    return ex.validate_config({**TINY, "run_dir": str(tmp_path / "runs"), **extra})


def test_defaults_fill_in():
    cfg = ex.validate_config({})
    assert cfg["window"]["radius_frames"] == 1.5 and cfg["seeds"] == [1, 2, 3]
    assert ex.model_config(cfg).window.radius_frames == 1.5


@pytest.mark.parametrize("raw, msg", [
    ({"modle": {}}, "unknown config key"),
    ({"model": {"depth": 3}}, "model.depth"),
    ({"schema_version": 2}, "schema_version"),
    ({"seeds": []}, "seed"),
    ({"window": {"radius_frames": -1.0}}, "radius"),
    ({"model": {"d_model": 15}}, "divisible"),
    ({"guidance": {"audio": "high"}}, "number"),
    ({"pretrain": {"curated": 1}}, "true or false"),
    ({"bench": {"k_shots": [20]}}, "exceeds"),
])
def test_config_errors(raw, msg):
    with pytest.raises(ex.ConfigError, match=msg):
        ex.validate_config(raw)


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"schema_version": 1, "window": {"radius_frames": 2.0}}))
    raw = ex.apply_overrides(ex.load_config_file(p), ["seeds=[4,5]", "guidance.audio=3"])
    cfg = ex.validate_config(raw)
    assert cfg["window"]["radius_frames"] == 2.0 and cfg["seeds"] == [4, 5] and cfg["guidance"]["audio"] == 3.0
    with pytest.raises(ex.ConfigError):
        ex.apply_overrides({}, ["nokey"])
    with pytest.raises(ex.ConfigError):
        ex.apply_overrides({}, ["model.depth=3"])
    q = tmp_path / "c.json"
    q.write_text(json.dumps({"window": {}}))
    with pytest.raises(ex.ConfigError, match="schema_version"):
        ex.load_config_file(q)
    q.write_text("{not json")
    with pytest.raises(ex.ConfigError):
        ex.load_config_file(q)


def test_config_hash_is_order_free():
    assert ex.config_hash({"a": 1, "b": [1, 2]}) == ex.config_hash({"b": [1, 2], "a": 1})
    assert ex.config_hash({"a": 1}) != ex.config_hash({"a": 2})


def test_runlog_appends(tmp_path):
    for i in range(3):
        ex.append_runlog(tmp_path, ex.RunRecord("eval", f"h{i}", i, None, {"x": i}, 0.1, {}))
    recs = ex.read_runlog(tmp_path)
    assert [r.config_hash for r in recs] == ["h0", "h1", "h2"]
    assert ex.read_runlog(tmp_path / "none") == []


@pytest.fixture(scope="module")
def runner(tmp_path_factory):
    return ex.Runner(tiny_cfg(tmp_path_factory.mktemp("exp")))


def test_stage_runs_are_cached_and_frozen_base_kept(runner):
    base = runner.fresh_model(1)
    frozen = base.state_hash(trainable=False)
    p1 = runner.pretrained(1)
    assert p1.exists()
    assert runner.load(p1).state_hash(trainable=False) == frozen
    mtime = p1.stat().st_mtime_ns
    assert runner.pretrained(1) == p1 and p1.stat().st_mtime_ns == mtime
    ft = runner.finetuned(1, 1, "pretrain")
    sc = runner.finetuned(1, 1, "scratch")
    assert ft != sc and ft.exists() and sc.exists()
    kinds = [r.kind for r in ex.read_runlog(runner.run_dir)]
    assert kinds.count("pretrain") == 1 and kinds.count("finetune") == 2


def test_evaluate_is_cached_and_deterministic(runner):
    a = runner.evaluate(None, 1, "base")
    b = runner.evaluate(None, 1, "base")
    assert a.to_json() == b.to_json()
    assert a.n_clips == len(runner.test_windows()) == 4
    assert 0 <= a.relsync <= 100


def test_missing_checkpoint(runner, tmp_path):
    with pytest.raises(ex.DependencyError):
        runner.load(tmp_path / "nope.ckpt")
    with pytest.raises(ex.ConfigError):
        runner.finetuned(1, 1, "sideways")


def test_variant_shares_caches(runner):
    v = runner.variant(window__radius_frames=2.0)
    assert v.cfg["window"]["radius_frames"] == 2.0 and v._bench is runner._bench
    w = runner.variant(bench__seed=5)
    assert w._bench is None


def test_paradigm_preset_and_report(runner, tmp_path):
    cells = ex.run_preset("paradigm", runner)
    assert [c.labels for c in cells] == [{"pretrain": p, "K": k} for p in (False, True) for k in (0, 1)]
    paths = ex.write_report("paradigm", [1], cells, tmp_path / "rep")
    rows = paths["csv"].read_text().splitlines()
    assert rows[0].startswith("pretrain,K,n_seeds,sync_mean") and len(rows) == 5
    assert paths["svg"].read_text().lstrip().startswith("<?xml")
    preset, seeds, back = ex.results_from_json(paths["json"].read_text())
    assert preset == "paradigm" and seeds == [1] and ex.results_table(back) == ex.results_table(cells)
    with pytest.raises(ex.ConfigError):
        ex.run_preset("nonsense", runner)


def test_results_table_with_sd():
    def rep(s):
        return MetricReport(0.0, 0.5, 0.5, 50.0, 25.0, s, 0.3, 4)

    cells = [ex.CellResult({"radius_frames": 0.5}, [rep(0.1), rep(0.3)])]
    head, row = ex.results_table(cells).splitlines()
    h = head.split(",")
    vals = dict(zip(h, row.split(",")))
    assert float(vals["sync_mean"]) == pytest.approx(0.2)
    assert float(vals["sync_sd"]) == pytest.approx(np.std([0.1, 0.3], ddof=1), abs=1e-6)


def test_override_parses_exponent_floats():
    cfg = ex.validate_config(ex.apply_overrides({}, ["pretrain.lr=1e-3", "run_dir=out"]))
    assert cfg["pretrain"]["lr"] == 1e-3 and cfg["run_dir"] == "out"
