import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from syncanim import windowcond as wc
from syncanim.audiofront import FeatureTapConfig, tap_layout
from syncanim.windowcond import WindowSpec

FPS = 6.0
K = 12


def test_frame_timestamps_are_bin_centers():
    tl = wc.frame_timestamps(K, FPS)
    np.testing.assert_allclose(tl.frame_times, (np.arange(1, 13) - 0.5) / 6)
    assert tl.duration == pytest.approx(2.0)


def test_small_handworked_mask():
    tl = wc.frame_timestamps(2, 2.0)  # frames at 0.25 s and 0.75 s
    m = wc.build_window_mask(tl, [0.0, 0.25, 0.5, 1.0], WindowSpec(0.5))  # radius 0.25 s
    assert m.visible.tolist() == [[True, True, True, False], [False, False, True, True]]


def test_uncovered_frame_raises():
    tl = wc.frame_timestamps(3, 1.0)
    with pytest.raises(wc.CoverageError):
        wc.build_window_mask(tl, [0.5], WindowSpec(0.5))


def test_invalid_inputs():
    with pytest.raises(wc.WindowConfigError):
        WindowSpec(0.0)
    with pytest.raises(wc.WindowConfigError):
        wc.frame_timestamps(0, 6.0)
    with pytest.raises(wc.WindowConfigError):
        wc.build_window_mask(wc.frame_timestamps(2, 1.0), [3.0], WindowSpec(1.0))
    with pytest.raises(wc.WindowConfigError):
        wc.chunk_mask(4, 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(0, 60))
def test_chunk_mask_partitions_tokens(k, extra):
    T = k + extra
    m = wc.chunk_mask(k, T).visible
    assert np.all(m.sum(axis=0) == 1)
    sizes = m.sum(axis=1)
    assert sizes.max() - sizes.min() <= 1
    assert np.all(np.diff(sizes) <= 0)
    first = m.argmax(axis=1)
    assert np.all(np.diff(first) > 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 2.0), min_size=12, max_size=60),
       st.floats(0.5, 3.0), st.floats(0.0, 2.0))
def test_monotone_in_radius(times, r, dr):
    times = sorted(times)
    tl = wc.frame_timestamps(K, FPS)
    try:
        small = wc.build_window_mask(tl, times, WindowSpec(r)).visible
    except wc.CoverageError:
        return
    big = wc.build_window_mask(tl, times, WindowSpec(r + dr)).visible
    assert np.all(big >= small)


def _layout():
    taps = (FeatureTapConfig("semantic"), FeatureTapConfig("masked-pred"))
    return [t for _, _, t in tap_layout(taps)]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(1, 12))
def test_radius_half_frame_equals_chunks(m, k):
    tl = wc.frame_timestamps(k, FPS)
    T = m * k
    times = (np.arange(T) + 0.5) * tl.duration / T
    win = wc.build_window_mask(tl, times, WindowSpec(0.5)).visible
    assert np.array_equal(win, wc.chunk_mask(k, T).visible)


def test_chunk_sizes_example():
    assert wc.chunk_mask(3, 7).visible.sum(axis=1).tolist() == [3, 2, 2]


def test_adjacent_frames_overlap_at_one_and_a_half():
    tl = wc.frame_timestamps(K, FPS)
    m = wc.build_source_masks(tl, _layout(), WindowSpec(1.5)).visible
    for i in range(K - 1):
        assert np.any(m[i] & m[i + 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_text_round_trip(k, t, seed):
    vis = np.random.default_rng(seed).random((k, t)) < 0.5
    m = wc.AttentionMask(vis)
    back = wc.mask_from_text(m.to_text())
    assert np.array_equal(back.visible, vis)


def test_text_rejects_garbage():
    with pytest.raises(ValueError):
        wc.mask_from_text("MASK 2 2\n10\n")
    with pytest.raises(ValueError):
        wc.mask_from_text("NOPE 1 1\n1\n")
