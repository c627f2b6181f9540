import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from syncanim import synthbench as sb
from syncanim.clips import ClipFormatError, read_clip, read_corpus, write_clip, write_corpus
from syncanim.synthbench import Corruption, SceneSpec


def spec(cls="strike", events=(0.55, 1.35), **kw):
    return SceneSpec(cls, events, texture_seed=4, **kw)


def test_scene_spec_validation():
    with pytest.raises(sb.SpecError):
        SceneSpec("dance", (0.5,))
    with pytest.raises(sb.SpecError):
        SceneSpec("flash", ())
    with pytest.raises(sb.SpecError):
        SceneSpec("flash", (2.5,))
    s = spec()
    assert SceneSpec.from_dict(s.to_dict()) == s


def test_corruption_validation_and_defaults():
    assert Corruption("temporal_offset").params["delta"] == 0.25
    with pytest.raises(sb.SpecError):
        Corruption("temporal_offset", {"delta": 2.0})
    with pytest.raises(sb.SpecError):
        Corruption("sepia")


def test_clip_shapes_and_determinism():
    a = sb.generate_clip(spec(), 6.0, seed=3)
    b = sb.generate_clip(spec(), 6.0, seed=3)
    assert a.frames.shape == (12, 32, 32) and a.frames.dtype == np.uint8
    assert a.audio.samples.shape == (32000,)
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.audio.samples, b.audio.samples)
    assert a.labels["class"] == "strike" and a.corruption_kinds == set()


@pytest.mark.parametrize("cls", sb.CLASSES)
def test_audio_onsets_match_events(cls):
    c = sb.generate_clip(spec(cls), 6.0, seed=1)
    on = sb.detect_audio_onsets(c.audio)
    assert len(on) == 2
    np.testing.assert_allclose(on, [0.55, 1.35], atol=0.01)


@pytest.mark.parametrize("cls", sb.CLASSES)
def test_visual_impulse_in_event_frame(cls):
    c = sb.generate_clip(spec(cls, (0.7,)), 6.0, seed=1)
    imp = sb.detect_visual_impulses(c.frames, 6.0)
    # the frame whose sampling instant first follows the event lights up
    assert imp[0] == pytest.approx((np.ceil(0.7 * 6 - 0.5) + 0.5) / 6)


def test_temporal_offset_moves_picture_only():
    c = sb.generate_clip(spec(events=(0.6,)), 6.0, seed=2)
    d = sb.corrupt(c, Corruption("temporal_offset", {"delta": 0.5}))
    assert np.array_equal(c.audio.samples, d.audio.samples)
    assert d.labels["visual_events"] == [pytest.approx(1.1)]
    assert sb.detect_visual_impulses(d.frames, 6.0)[0] > sb.detect_visual_impulses(c.frames, 6.0)[0]
    with pytest.raises(sb.SpecError):
        sb.corrupt(c, Corruption("temporal_offset", {"delta": -0.7}))


def test_corruptions_compose_in_fixed_order():
    c = sb.generate_clip(spec(), 6.0, seed=5)
    x = sb.corrupt(sb.corrupt(c, Corruption("camera_shake")), Corruption("text_overlay"))
    y = sb.corrupt(sb.corrupt(c, Corruption("text_overlay")), Corruption("camera_shake"))
    assert np.array_equal(x.frames, y.frames)
    with pytest.raises(sb.SpecError):
        sb.corrupt(x, Corruption("camera_shake"))


def test_pixel_corruptions():
    c = sb.generate_clip(spec(), 6.0, seed=5)
    low = sb.corrupt(c, Corruption("low_res"))
    assert low.resolution == sb.LOW_RESOLUTION
    txt = sb.corrupt(c, Corruption("text_overlay", {"area": 0.25}))
    assert np.array_equal(txt.frames[:, :24], c.frames[:, :24])
    assert not np.array_equal(txt.frames[:, 24:], c.frames[:, 24:])
    cut = sb.corrupt(c, Corruption("shot_cut", {"t": 1.0}))
    assert np.array_equal(cut.frames[:6], c.frames[:6])
    jump = abs(cut.float_frames()[6].mean() - cut.float_frames()[5].mean())
    assert jump > 0.2


def test_ambient_noise_snr():
    c = sb.generate_clip(spec(), 6.0, seed=5)
    n = sb.corrupt(c, Corruption("ambient_noise", {"snr_db": 10.0}))
    noise = n.audio.samples - c.audio.samples
    snr = 10 * np.log10(np.mean(c.audio.samples ** 2) / np.mean(noise ** 2))
    assert snr == pytest.approx(10.0, abs=0.5)


def test_shift_video():
    c = sb.generate_clip(spec(), 6.0, seed=5)
    s = sb.shift_video(c, 2)
    assert np.array_equal(s.frames[2:], c.frames[:-2]) and np.array_equal(s.frames[0], c.frames[0])
    assert np.array_equal(sb.shift_video(c, 0).frames, c.frames)


def test_evaluation_windows():
    c = sb.generate_clip(spec(events=(0.5, 1.5, 3.2), duration=4.0), 6.0, seed=5)
    ws = sb.evaluation_windows(c, 3, 2.0)
    assert [w.labels["window_start"] for w in ws] == [0.0, 1.0, 2.0]
    assert all(w.n_frames == 12 and w.audio.samples.size == 32000 for w in ws)
    assert ws[2].labels["events"] == [pytest.approx(1.2)]
    with pytest.raises(sb.SpecError):
        sb.evaluation_windows(c, 1, 5.0)


def test_clip_container_round_trip(tmp_path):
    c = sb.corrupt(sb.generate_clip(spec(), 6.0, seed=5), Corruption("ambient_noise"))
    write_clip(tmp_path, c)
    back = read_clip(tmp_path / c.id)
    assert np.array_equal(back.frames, c.frames)
    np.testing.assert_allclose(back.audio.samples, c.audio.samples, atol=1 / 32767)
    assert back.labels["corruptions"] == c.labels["corruptions"] and back.resolution == c.resolution
    assert SceneSpec.from_dict(back.labels["spec"]) == SceneSpec.from_dict(c.labels["spec"])
    (tmp_path / c.id / "frames.bin").write_bytes(b"garbage")
    with pytest.raises(ClipFormatError):
        read_clip(tmp_path / c.id)


def test_clip_frame_count_checked():
    c = sb.generate_clip(spec(), 6.0, seed=5)
    c.frames = c.frames[:-1]
    with pytest.raises(ClipFormatError):
        c.check()


def small_cfg(**kw):
    return sb.BenchmarkConfig(pretrain_size=24, finetune_pool_per_class=3, k_shots=(1, 3),
                              test_per_class=2, **kw)


def test_benchmark_is_reproducible_across_workers():
    a = sb.build_benchmark(small_cfg(workers=1), seed=7)
    b = sb.build_benchmark(small_cfg(workers=2), seed=7)
    assert a.manifest.to_json() == b.manifest.to_json()
    for i in a.clips:
        assert np.array_equal(a.clips[i].frames, b.clips[i].frames)


def test_benchmark_splits_and_manifest(tmp_path):
    bench = sb.build_benchmark(small_cfg(), seed=7)
    m = bench.manifest
    assert len(m.splits["pretrain"]) == 24 and len(m.splits["test"]) == 8
    k1 = bench.split("finetune_K1")
    assert sorted(c.labels["class"] for c in k1) == sorted(sb.CLASSES)
    assert all(not c.corruption_kinds for c in bench.split("finetune_pool") + bench.split("test"))
    assert all(c.duration == 4.0 for c in bench.split("test"))
    assert 0.3 < m.corruption_rates["pretrain"] < 0.9
    back = sb.DatasetManifest.from_json(m.to_json())
    assert back.splits == m.splits
    write_corpus(tmp_path, bench.split("finetune_K1"))
    assert [c.id for c in read_corpus(tmp_path)] == sorted(c.id for c in k1)


def test_benchmark_config_errors():
    with pytest.raises(sb.BenchConfigError):
        sb.BenchmarkConfig(classes=("bounce",))
    with pytest.raises(sb.BenchConfigError):
        sb.BenchmarkConfig(k_shots=(11,))
    with pytest.raises(sb.BenchConfigError):
        sb.DatasetManifest.from_json('{"schema_version": 9}')


_POOL: dict = {}


def _pool():
    if not _POOL:
        _POOL.update({f"c{i}": sb.generate_clip(spec(sb.CLASSES[i % 4]), 6.0, seed=i, clip_id=f"c{i}")
                      for i in range(20)})
    return _POOL


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 5))
def test_kshot_subset_per_class(seed, K):
    clips = _pool()
    ids = sb.kshot_subset(sorted(clips), clips, K, seed)
    assert len(ids) == 4 * K and len(set(ids)) == len(ids)
    assert ids == sb.kshot_subset(sorted(clips), clips, K, seed)
    with pytest.raises(sb.BenchConfigError):
        sb.kshot_subset(sorted(clips), clips, 6, seed)
