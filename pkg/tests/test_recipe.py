"""Stated recipe values and the shape of the experiment grids."""

import pytest

from syncanim import audiofront as af
from syncanim import synthbench as sb
from syncanim.denoiser import ModelConfig
from syncanim.diffusion import DropoutPolicy, GuidanceScales
from syncanim.experiments import DEFAULTS, RADII, CellResult, Runner, TAP_SETS, preset_cells, results_table, \
    validate_config
from syncanim.metrics import MetricReport


def test_audio_front_end_recipe():
    # 16 kHz audio, 128 mel bins, 25 ms windows with 10 ms hops
    assert af.SAMPLE_RATE == 16000 and af.N_MELS == 128
    assert af.WIN / af.SAMPLE_RATE == pytest.approx(0.025)
    assert af.HOP / af.SAMPLE_RATE == pytest.approx(0.010)


def test_clip_and_sampling_recipe():
    cfg = ModelConfig()
    assert (cfg.K, cfg.fps) == (12, 6.0)  # 2 s clips at 6 fps
    assert DEFAULTS["eval"]["ddim_steps"] == 20
    assert GuidanceScales() == GuidanceScales(2.0, 2.0, 4.0)
    assert DropoutPolicy() == DropoutPolicy(0.05, 0.05, 0.05)
    assert DEFAULTS["window"]["radius_frames"] == 1.5


def test_single_layer_tap_gives_one_source():
    layout = af.tap_layout([af.FeatureTapConfig("semantic", (11,))])
    assert len(layout) == 1 and layout[0][:2] == ("semantic", 11)
    assert TAP_SETS["semantic[11]"] == [{"encoder": "semantic", "layers": [11]}]


def test_kshot_splits():
    bench = sb.build_benchmark(sb.BenchmarkConfig(pretrain_size=4, k_shots=(0, 1, 5, 10), finetune_pool_per_class=10,
                                                  test_per_class=1), seed=0)
    splits = bench.manifest.splits
    assert splits["finetune_K0"] == []
    for k in (1, 5, 10):
        labels = [bench.clips[i].labels["class"] for i in splits[f"finetune_K{k}"]]
        assert sorted(labels) == sorted(list(sb.CLASSES) * k)


def test_grid_structure(tmp_path):
    runner = Runner(validate_config({**DEFAULTS, "run_dir": str(tmp_path)}))
    paradigm = [labels for labels, _ in preset_cells("paradigm", runner)]
    assert len(paradigm) == 8
    assert {(c["pretrain"], c["K"]) for c in paradigm} == {(p, k) for p in (False, True) for k in (0, 1, 5, 10)}
    radius = [labels["radius_frames"] for labels, _ in preset_cells("radius", runner)]
    assert radius == list(RADII) and 0.5 in radius and 1.5 in radius


def test_radius_table_has_one_row_per_radius():
    rep = MetricReport(n_clips=1, sync=0.2, sync_gt=0.3, relsync=80.0, alignsync=40.0, ia=0.5, it=0.5, fvd_like=1.0)
    cells = [CellResult({"radius_frames": r}, [rep, rep, rep]) for r in RADII]
    lines = results_table(cells).strip().splitlines()
    assert len(lines) == 1 + len(RADII)
    header = lines[0].split(",")
    assert header[:4] == ["radius_frames", "n_seeds", "sync_mean", "sync_sd"]
    assert [float(line.split(",")[0]) for line in lines[1:]] == list(RADII)
