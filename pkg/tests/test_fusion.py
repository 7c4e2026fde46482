import json
import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from mlcam.errors import ConfigError, DimensionError, NumericInputError
from mlcam.fusion import (
    THRESHOLDS,
    collateral_integrate,
    fuse,
    heatmap_pixels,
    lateral_inhibit,
    normalize_map,
    resolve_threshold,
    save_fusion,
    threshold_mask,
    upsample,
)
from oracles import scalar_fuse_pixel, scalar_minmax

seeds = st.integers(0, 2**31)


def random_layers(rng, shapes=((8, 8), (4, 4), (2, 2))):
    return [(rng.normal(size=s), rng.normal(size=s)) for s in shapes]


def test_thresholds():
    assert THRESHOLDS == {"intermediate": 0.03, "restrictive": 0.2}
    assert resolve_threshold("restrictive", 0.5) == 0.5
    with pytest.raises(ConfigError):
        resolve_threshold("intermediate", 1.5)
    with pytest.raises(ConfigError):
        resolve_threshold("loose")


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_map(np.array([[0.0, 5.0, 10.0]])).values, [[0.0, 0.5, 1.0]])
    np.testing.assert_array_equal(normalize_map(np.full((3, 3), 7.0)).values, np.zeros((3, 3)))
    with pytest.raises(NumericInputError):
        normalize_map(np.array([[0.0, np.nan]]))


def test_inhibition_and_integration_examples():
    assert lateral_inhibit(np.array(0.8), np.array(0.5)) == pytest.approx(0.4)
    maps = [np.array([[1.0]]), np.array([[0.5]]), np.array([[0.8]])]
    assert collateral_integrate(maps)[0, 0] == pytest.approx(1.7, abs=1e-15)
    assert collateral_integrate(maps, ordered=True)[0, 0] == pytest.approx(3.4, abs=1e-15)


def test_threshold_example():
    fdfm = np.array([0.01, 0.05, 0.5])
    assert threshold_mask(fdfm, "intermediate").tolist() == [False, True, True]
    assert threshold_mask(fdfm, "restrictive").tolist() == [False, False, True]
    assert threshold_mask(np.array([0.2]), "restrictive").tolist() == [True]


def test_fuse_matches_per_pixel_oracle(rng):
    layers = [(rng.normal(size=(3, 4)), rng.normal(size=(3, 4))) for _ in range(3)]
    primed = [(scalar_minmax(d.ravel().tolist()), scalar_minmax(n.ravel().tolist())) for d, n in layers]
    raw = [scalar_fuse_pixel([(primed[t][0][p], primed[t][1][p]) for t in range(3)]) for p in range(12)]
    expected = np.array(scalar_minmax(raw)).reshape(3, 4)
    result = fuse(layers, (3, 4))
    np.testing.assert_allclose(result.fdfm.values, expected, rtol=0, atol=1e-12)
    assert result.tap_shapes == [(3, 4)] * 3


def test_fuse_output_fields(rng):
    result = fuse(random_layers(rng), (8, 8), "restrictive")
    assert result.fdfm.values.shape == (8, 8)
    assert result.threshold_used == 0.2
    assert len(result.inhibited_maps) == 3
    assert result.tap_shapes == [(8, 8), (4, 4), (2, 2)]
    np.testing.assert_array_equal(result.mask, result.fdfm.values >= 0.2)
    assert result.fdfm.values.min() >= 0.0 and result.fdfm.values.max() <= 1.0


@given(seeds, st.floats(0, 1), st.floats(0, 1))
def test_masks_nest_as_threshold_rises(seed, a, b):
    fdfm = fuse(random_layers(np.random.default_rng(seed)), (8, 8)).fdfm
    lo, hi = min(a, b), max(a, b)
    assert not np.any(threshold_mask(fdfm, threshold=hi) & ~threshold_mask(fdfm, threshold=lo))
    assert not np.any(threshold_mask(fdfm, "restrictive") & ~threshold_mask(fdfm, "intermediate"))


@given(seeds)
def test_full_nondiagnostic_response_suppresses(seed):
    rng = np.random.default_rng(seed)
    layers = random_layers(rng, ((6, 6),) * 3)
    # one pixel is the NFM maximum of every tap
    for _, n in layers:
        n[2, 3] = n.max() + 1.0
    result = fuse(layers, (6, 6))
    for m in result.inhibited_maps:
        assert m[2, 3] == 0.0
    assert result.fdfm.values[2, 3] == 0.0


@given(seeds, st.permutations([0, 1, 2]))
def test_tap_order_does_not_matter(seed, perm):
    layers = random_layers(np.random.default_rng(seed))
    a = fuse(layers, (8, 8)).fdfm.values
    b = fuse([layers[i] for i in perm], (8, 8)).fdfm.values
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@given(seeds, st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 10), st.floats(-5, 5))
def test_positive_affine_rescaling_is_invisible(seed, a, b, c, d):
    layers = random_layers(np.random.default_rng(seed))
    scaled = [(a * dm + b, c * nm + d) for dm, nm in layers]
    np.testing.assert_allclose(fuse(layers, (8, 8)).fdfm.values, fuse(scaled, (8, 8)).fdfm.values, atol=1e-9)


@given(seeds)
def test_ordered_integration_doubles(seed):
    rng = np.random.default_rng(seed)
    maps = [rng.uniform(size=(4, 4)) for _ in range(3)]
    ordered, unordered = collateral_integrate(maps, ordered=True), collateral_integrate(maps)
    np.testing.assert_allclose(ordered, 2 * unordered, atol=1e-14)
    np.testing.assert_allclose(normalize_map(ordered).values, normalize_map(unordered).values, atol=1e-12)


def test_integration_brute_force(rng):
    maps = [rng.uniform(size=(3, 3)) for _ in range(4)]
    expected = sum(maps[i] * maps[j] for i, j in itertools.combinations(range(4), 2))
    np.testing.assert_allclose(collateral_integrate(maps), expected, atol=1e-14)


def test_upsample_errors(rng):
    with pytest.raises(DimensionError):
        upsample(rng.normal(size=(4, 4)), (2, 8))
    with pytest.raises(DimensionError):
        fuse([(np.zeros((4, 4)), np.zeros((4, 5)))] * 3, (8, 8))


def test_save_fusion_outputs(tmp_path, rng):
    result = fuse(random_layers(rng), (8, 8))
    sidecar = save_fusion(result, tmp_path / "h.png", tmp_path / "m.png")
    heat = np.asarray(Image.open(tmp_path / "h.png"))
    np.testing.assert_array_equal(heat, np.rint(255 * result.fdfm.values).astype(np.uint8))
    np.testing.assert_array_equal(heatmap_pixels(result.fdfm), heat)
    mask = np.asarray(Image.open(tmp_path / "m.png").convert("L")) > 0
    np.testing.assert_array_equal(mask, result.mask)
    meta = json.loads(sidecar.read_text())
    assert meta["threshold"] == 0.03 and meta["tap_shapes"] == [[8, 8], [4, 4], [2, 2]]
