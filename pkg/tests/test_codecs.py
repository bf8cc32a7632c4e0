import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtsh import codecs
from mtsh.codecs import DepthQuantizer, HeatmapParams
from mtsh.vocab import CameraIntrinsics, TaskKind, all_task_sets, output_shape


def test_gaussian_values_at_and_next_to_peak():
    j = np.zeros((16, 2))
    j[3] = [41.0, 18.0]  # stride 4 -> cell (10, 4)
    hm = codecs.encode_pose2d(j, resolution=64, input_resolution=256)
    ch = hm[:, :, 3]
    assert ch[4, 10] == 1.0
    assert math.isclose(ch[4, 11], math.exp(-0.5), rel_tol=1e-6)
    assert math.isclose(ch[5, 11], math.exp(-1.0), rel_tol=1e-6)
    assert math.isclose(ch[4, 12], math.exp(-2.0), rel_tol=1e-6)


def test_invisible_joint_has_empty_channel():
    j = np.full((16, 2), 100.0)
    vis = np.ones(16, bool)
    vis[5] = False
    hm = codecs.encode_pose2d(j, vis)
    assert hm[:, :, 5].max() == 0 and hm[:, :, 4].max() == 1


def test_decode_tie_break_is_smallest_row_major_index():
    hm = np.zeros((8, 8, 1))
    hm[2, 5, 0] = hm[2, 3, 0] = hm[6, 0, 0] = 1.0
    xy, conf = codecs.decode_pose2d(hm, 32)
    assert xy[0].tolist() == [3 * 4 + 2, 2 * 4 + 2] and conf[0] == 1.0


def test_decode_supports_batches():
    hm = np.zeros((3, 8, 8, 2))
    hm[1, 7, 6, 1] = 1
    xy, _ = codecs.decode_pose2d(hm, 16)
    assert xy.shape == (3, 2, 2) and xy[1, 1].tolist() == [13.0, 15.0]


def test_quantizer_binning():
    q = DepthQuantizer(1000.0, 2900.0, 19)  # width 100
    assert q.bin_width == 100.0 and q.background_bin == 19
    assert q.quantize([1000.0, 1099.999, 1100.0, 2900.0, 5000.0, 0.0]).tolist() == [0, 0, 1, 18, 18, 0]
    assert q.quantize([np.inf, np.nan]).tolist() == [19, 19]
    assert q.dequantize([0, 18, 19]).tolist() == [1050.0, 2850.0, np.inf]
    assert np.allclose(q.edges, np.arange(1000, 2901, 100))


def test_quantizer_fitting_and_record():
    depth = np.array([[np.inf, 2000.0], [2500.0, np.inf]])
    mask = np.array([[0, 1], [2, 0]])
    q = codecs.fit_depth_quantizer(depth, mask)
    assert (q.d_min, q.d_max) == (2000.0, 2500.0)
    flat = codecs.fit_depth_quantizer(np.full((2, 2), 3000.0), np.ones((2, 2), int))
    assert (flat.d_min, flat.d_max) == (2999.0, 3001.0)
    assert DepthQuantizer.from_record(q.to_record()) == q
    with pytest.raises(ValueError):
        codecs.fit_depth_quantizer(depth, np.zeros((2, 2), int))
    with pytest.raises(ValueError):
        DepthQuantizer(5.0, 5.0)
    with pytest.raises(ValueError):
        DepthQuantizer.from_record("d_min=1\n")


def test_pose3d_quantizer_covers_joints():
    depth = np.full((4, 4), 3000.0)
    j3 = np.zeros((16, 3))
    j3[:, 2] = 3000.0
    j3[2, 2] = 3500.0
    q = codecs.fit_pose3d_quantizer(depth, np.ones((4, 4), int), j3)
    assert q.d_max == 3500.0


def test_parts_one_hot():
    mask = np.random.default_rng(0).integers(0, 15, (64, 64))
    oh = codecs.encode_parts(mask, 16)
    assert oh.shape == (16, 16, 15)
    assert np.all(oh.sum(-1) == 1)
    assert np.array_equal(codecs.decode_parts(oh), mask[2::4, 2::4])
    with pytest.raises(ValueError):
        codecs.encode_parts(np.full((8, 8), 15), 4)


def test_depth_one_hot_and_background():
    rng = np.random.default_rng(1)
    mask = rng.integers(0, 3, (32, 32))
    depth = np.where(mask > 0, rng.uniform(2000, 3000, (32, 32)), np.inf)
    q = codecs.fit_depth_quantizer(depth, mask)
    oh = codecs.encode_depth(depth, mask, q, 8)
    assert oh.shape == (8, 8, 20) and np.all(oh.sum(-1) == 1)
    bg = codecs.downsample_labels(mask, 8) == 0
    assert np.all(oh[..., 19][bg] == 1) and np.all(oh[..., 19][~bg] == 0)
    d, bgmask = codecs.decode_depth(oh, q)
    assert np.array_equal(bgmask, bg) and np.all(np.isinf(d[bg]))


def test_pose3d_channel_layout():
    cam = CameraIntrinsics(200.0, 200.0, 32.0, 32.0)
    q = DepthQuantizer(2000.0, 3900.0, 19)
    j3 = np.tile([[0.0, 0.0, 2950.0]], (16, 1))
    j3[7] = [102.5, -102.5, 2050.0]  # projects to (42, 22) at z bin 0
    vol = codecs.encode_pose3d(j3, cam, q, resolution=16, input_resolution=64)
    assert vol.shape == (16, 16, 304)
    y, x, c = np.unravel_index(np.argmax(vol[..., 7 * 19 : 8 * 19]), (16, 16, 19))
    assert (y, x, c) == (5, 10, 0)
    out = codecs.decode_pose3d(vol, cam, q, 64)
    assert abs(out[7, 2] - 2050.0) <= q.bin_width / 2


def test_encode_sample_shapes(small_samples):
    s = small_samples[0]
    for ts in all_task_sets():
        b = codecs.encode_sample(s, ts, 16)
        for t in ts:
            assert b[t].shape == output_shape(t, 16)
            if t in (TaskKind.PARTSEG, TaskKind.DEPTH):
                assert np.all(b[t].sum(-1) == 1)
        assert (b.depth_quantizer is not None) == (TaskKind.DEPTH in ts or TaskKind.POSE3D in ts)


@given(st.floats(0, 255.999), st.floats(0, 255.999))
def test_pose2d_round_trip_property(x, y):
    j = np.array([[x, y]] * 16)
    xy, _ = codecs.decode_pose2d(codecs.encode_pose2d(j), 256)
    assert np.all(np.abs(xy - j) <= 2.0)


@given(st.floats(500, 9000), st.floats(1, 3000), st.floats(0, 1))
def test_depth_round_trip_property(lo, span, frac):
    q = DepthQuantizer(lo, lo + span)
    d = lo + frac * span
    assert abs(q.dequantize(q.quantize(d)) - d) <= q.bin_width / 2 * (1 + 1e-9)


def test_params_validated():
    with pytest.raises(ValueError):
        HeatmapParams(0.0)
    with pytest.raises(ValueError):
        codecs.encode_pose2d(np.zeros((16, 2)), resolution=60, input_resolution=256)
