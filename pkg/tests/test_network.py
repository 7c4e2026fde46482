import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mlcam.autodiff import Tensor, no_grad
from mlcam.errors import ConfigError, DimensionError
from mlcam.network import (
    LayerMaps,
    NetworkConfig,
    cam_tap,
    classify,
    forward,
    forward_batch,
    inception_block,
    init_network,
    layer_scores,
    parameter_count,
    total_loss,
)
from conftest import network_gradient_error
from oracles import loop_conv

SMALL = NetworkConfig(input_size=(16, 16), stem_pool=False, pool_between=(True, False))


def test_default_parameter_count():
    net = init_network(NetworkConfig())
    assert net.n_parameters() == parameter_count(NetworkConfig()) == 4668


@given(
    st.integers(1, 6),
    st.lists(st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)), min_size=3, max_size=3),
    st.sampled_from(["mlcam", "mlgap", "cam"]),
)
def test_parameter_count_matches_allocation(stem, blocks, head):
    cfg = NetworkConfig(stem_channels=stem, inception_channels=tuple(blocks), head=head)
    assert init_network(cfg).n_parameters() == parameter_count(cfg)


def test_init_is_seed_deterministic():
    a, b = init_network(NetworkConfig(seed=3)), init_network(NetworkConfig(seed=3))
    c = init_network(NetworkConfig(seed=4))
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params if n.endswith(".w"))


def test_config_rejects_bad_layouts():
    with pytest.raises(ConfigError):
        NetworkConfig(head="resnet")
    with pytest.raises(ConfigError):
        NetworkConfig(input_size=(16, 16))  # taps shrink below 5x5
    with pytest.raises(ConfigError):
        NetworkConfig(inception_channels=((4, 4, 4),) * 2)


def test_tap_shapes_follow_pooling():
    assert NetworkConfig().tap_shapes() == [(32, 32), (16, 16), (8, 8)]
    net = init_network(NetworkConfig())
    with no_grad():
        maps, feats = forward(net, np.zeros((1, 64, 64)))
    assert [m.dfm.shape for m in maps] == [(32, 32), (16, 16), (8, 8)]
    assert [f.shape for f in feats] == [(12, 32, 32), (12, 16, 16), (12, 8, 8)]


def _block_params(rng, c_in, widths=(4, 4, 4)):
    p = {}
    for k, w in zip((1, 3, 5), widths):
        p[f"b.{k}x{k}.w"] = Tensor(rng.normal(size=(w, c_in, k, k)))
        p[f"b.{k}x{k}.b"] = Tensor(rng.normal(size=w))
    return p


def test_inception_shape_and_zero_input(rng):
    p = _block_params(rng, 8)
    assert inception_block(Tensor(rng.normal(size=(8, 16, 16))), p, "b").shape == (12, 16, 16)
    for k in (1, 3, 5):
        p[f"b.{k}x{k}.b"] = Tensor(np.zeros(4))
    np.testing.assert_array_equal(inception_block(Tensor(np.zeros((8, 16, 16))), p, "b").data, 0.0)


def test_inception_matches_branch_composition(rng):
    p = _block_params(rng, 3, (2, 3, 1))
    x = rng.normal(size=(3, 7, 6))
    expected = np.concatenate(
        [np.maximum(loop_conv(x, p[f"b.{k}x{k}.w"].data, p[f"b.{k}x{k}.b"].data, 1, k // 2), 0) for k in (1, 3, 5)]
    )
    np.testing.assert_allclose(inception_block(Tensor(x), p, "b").data, expected, atol=1e-12)


def test_inception_rejects_small_maps(rng):
    with pytest.raises(DimensionError):
        inception_block(Tensor(rng.normal(size=(8, 4, 9))), _block_params(rng, 8), "b")


def test_cam_tap_one_hot_selects_plane(rng):
    f = rng.normal(size=(5, 6, 6))
    w = np.zeros((2, 5, 1, 1))
    w[0, 2], w[1, 4] = 1.0, 1.0
    dfm, nfm = cam_tap(Tensor(f), Tensor(w))
    np.testing.assert_array_equal(dfm.data, f[2])
    np.testing.assert_array_equal(nfm.data, f[4])


@given(st.integers(0, 2**31), st.floats(-5, 5))
def test_cam_tap_homogeneous_and_swap(seed, lam):
    rng = np.random.default_rng(seed)
    f = Tensor(rng.normal(size=(4, 5, 5)))
    w = rng.normal(size=(2, 4, 1, 1))
    dfm, nfm = cam_tap(f, Tensor(w))
    sd, sn = cam_tap(f, Tensor(lam * w))
    np.testing.assert_allclose(sd.data, lam * dfm.data, atol=1e-9)
    np.testing.assert_allclose(sn.data, lam * nfm.data, atol=1e-9)
    swapped_d, swapped_n = cam_tap(f, Tensor(w[::-1].copy()))
    np.testing.assert_array_equal(swapped_d.data, nfm.data)
    np.testing.assert_array_equal(swapped_n.data, dfm.data)


def test_cam_tap_checks_channels(rng):
    with pytest.raises(DimensionError) as exc:
        cam_tap(Tensor(rng.normal(size=(4, 5, 5))), Tensor(rng.normal(size=(2, 3, 1, 1))))
    assert exc.value.axis == "channels"


def test_layer_scores_example():
    s_d, s_n, (p_d, p_n) = layer_scores(Tensor(np.ones((3, 3))), Tensor(np.zeros((3, 3))))
    assert (s_d.item(), s_n.item()) == (1.0, 0.0)
    assert p_d == pytest.approx(math.e / (math.e + 1), abs=1e-12)
    assert p_d + p_n == pytest.approx(1.0, abs=1e-15)


def test_symmetric_maps_give_three_ln2():
    net = init_network(SMALL)
    for j in (1, 2, 3):
        net.params[f"cam{j}.w"].data[:] = 0.0
    maps, _ = forward(net, np.random.default_rng(0).uniform(size=(1, 16, 16)))
    for label in ("D", "ND"):
        assert total_loss(maps, label).item() == pytest.approx(3 * math.log(2), abs=1e-12)


def _maps(probs):
    z = Tensor(np.zeros((2, 2)))
    return [LayerMaps(j, z, z, z[0, 0], z[0, 0], p) for j, p in enumerate(probs, start=1)]


def test_classify_examples():
    label, conf = classify(_maps([(0.8, 0.2)] * 3))
    assert label == "D" and conf == pytest.approx(0.8)
    assert classify(_maps([(0.9, 0.1), (0.2, 0.8), (0.3, 0.7)]))[0] == "ND"
    assert classify(_maps([(0.5, 0.5)] * 3))[0] == "ND"


@pytest.mark.parametrize("head,n_taps,n_scores", [("mlcam", 3, 3), ("mlgap", 3, 1), ("cam", 1, 1)])
def test_heads_outputs(head, n_taps, n_scores, rng):
    net = init_network(NetworkConfig(input_size=(16, 16), stem_pool=False, pool_between=(True, False), head=head))
    with no_grad():
        out = forward_batch(net, rng.uniform(size=(3, 1, 16, 16)))
    assert len(out.taps) == n_taps and len(out.scores) == n_scores
    assert out.probabilities().shape == (3, 2)
    np.testing.assert_allclose(out.probabilities().sum(axis=1), 1.0)


def test_cam_head_maps_use_classifier_rows(rng):
    net = init_network(NetworkConfig(input_size=(16, 16), stem_pool=False, pool_between=(True, False), head="cam"))
    with no_grad():
        out = forward_batch(net, rng.uniform(size=(1, 1, 16, 16)))
    feats = out.taps[0].features.data[0]
    w = net.cam_weights(3)
    np.testing.assert_allclose(out.taps[0].dfm.data[0], np.tensordot(w[0], feats, axes=1), atol=1e-12)
    # GAP of the map equals the classifier score
    assert out.taps[0].dfm.data[0].mean() == pytest.approx(out.scores[0].data[0, 0], abs=1e-12)


def test_batch_matches_single_forward(rng):
    net = init_network(SMALL)
    x = rng.uniform(size=(4, 1, 16, 16))
    with no_grad():
        out = forward_batch(net, x)
        for b in range(4):
            maps, _ = forward(net, x[b])
            for t, lm in zip(out.taps, maps):
                np.testing.assert_allclose(t.dfm.data[b], lm.dfm.data, atol=1e-12)


def test_input_size_errors_name_axis():
    net = init_network(SMALL)
    with pytest.raises(DimensionError) as exc:
        forward(net, np.zeros((1, 16, 17)))
    assert exc.value.axis == "width"
    with pytest.raises(DimensionError) as exc:
        forward(net, np.zeros((2, 16, 16)))
    assert exc.value.axis == "channels"


@pytest.mark.parametrize("head", ["mlgap", "cam"])
def test_other_heads_pass_gradient_check(head):
    assert network_gradient_error(seed=11, head=head, per_tensor=15) < 1e-4
