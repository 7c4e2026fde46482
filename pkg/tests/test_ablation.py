import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mlcam import ablation
from mlcam.ablation import GROUND_TRUTH, VARIANTS, collect_maps, head_for, parse_variants, run_ablation, variant_map
from mlcam.data import SegSample, SynthConfig, generate
from mlcam.errors import ConfigError, DataError
from mlcam.fusion import collateral_integrate, fuse, lateral_inhibit, normalize_map, primed_maps, upsample
from mlcam.network import NetworkConfig, init_network


def layers(seed):
    rng = np.random.default_rng(seed)
    return [(rng.normal(size=s), rng.normal(size=s)) for s in ((8, 8), (4, 4), (2, 2))]


def net16(head):
    return init_network(NetworkConfig(input_size=(16, 16), stem_pool=False, pool_between=(True, False), head=head))


@pytest.fixture(scope="module")
def eval_sets():
    samples = [s for s in generate(SynthConfig(image_size=16, n_groups=2, images_per_group=4)) if s.label == "D"]
    return {"val": samples[:2], "test": samples[2:]}


@pytest.fixture(scope="module")
def nets():
    return {h: net16(h) for h in ("mlcam", "mlgap", "cam")}


def test_heads_and_parsing():
    assert [head_for(v) for v in VARIANTS] == ["mlgap"] + ["mlcam"] * 8 + ["cam"]
    assert parse_variants("M2, M7") == ["M2", "M7"]
    assert parse_variants(None) == list(VARIANTS)
    with pytest.raises(ConfigError):
        parse_variants("M11")
    with pytest.raises(ConfigError):
        parse_variants(" , ")


@given(st.integers(0, 2**31))
def test_variant_definitions(seed):
    lm = layers(seed)
    size = (8, 8)
    primed = primed_maps(lm, size)
    np.testing.assert_array_equal(variant_map("M2", lm, size).values, fuse(lm, size).fdfm.values)
    np.testing.assert_allclose(
        variant_map("M3", lm, size).values,
        normalize_map(collateral_integrate([d.values for d, _ in primed])).values,
        atol=1e-15,
    )
    for j in range(3):
        np.testing.assert_array_equal(variant_map(f"M{7 + j}", lm, size).values, primed[j][0].values)
        np.testing.assert_array_equal(
            variant_map(f"M{4 + j}", lm, size).values, normalize_map(lateral_inhibit(*primed[j])).values
        )
    total = sum(upsample(d, size) for d, _ in lm)
    np.testing.assert_allclose(variant_map("M1", lm, size).values, normalize_map(total).values, atol=1e-15)
    np.testing.assert_array_equal(
        variant_map("M10", lm[-1:], size).values, normalize_map(upsample(lm[-1][0], size)).values
    )


def test_all_maps_are_normalized():
    lm = layers(0)
    for v in VARIANTS:
        values = variant_map(v, lm, (8, 8)).values
        assert values.min() >= 0.0 and values.max() <= 1.0


def test_ground_truth_row_scores_one(eval_sets):
    report = run_ablation(eval_sets, {}, variants=[GROUND_TRUTH])
    for mode in ablation.MODES:
        for subset in eval_sets:
            assert tuple(report.cell(GROUND_TRUTH, mode, subset)) == (1.0, 1.0, 1.0)


def test_grid_is_complete(eval_sets, nets, tmp_path):
    report = run_ablation(eval_sets, nets)
    assert report.is_complete()
    assert len(report.rows) == sum(len(s) for s in eval_sets.values()) * len(VARIANTS) * 2
    report.to_csv(tmp_path / "a.csv")
    rows = list(csv.reader((tmp_path / "a.csv").open()))
    assert rows[0] == ["metric", "subset", "mode", *VARIANTS]
    assert len(rows) == 1 + 3 * 2 * 2
    text = report.to_text().splitlines()
    assert text[0].split() == ["Set", *VARIANTS]
    assert text[1].split()[:2] == ["mean_acc", "val-I"]


def test_cells_are_means_of_rows(eval_sets, nets):
    report = run_ablation(eval_sets, nets, modes=["restrictive"], variants=["M2", "M5"])
    for v in ("M2", "M5"):
        rows = [r[4].mean_IU for r in report.rows if r[0] == "test" and r[2] == v]
        assert report.cell(v, "restrictive", "test").mean_IU == pytest.approx(np.mean(rows), abs=1e-15)


def test_errors(eval_sets, nets):
    unlabeled = [SegSample(np.zeros((1, 16, 16)), "D", None, "g", "s1")]
    with pytest.raises(DataError, match="ground-truth"):
        run_ablation({"test": unlabeled}, nets)
    with pytest.raises(ConfigError):
        run_ablation(eval_sets, {"mlcam": nets["mlcam"]}, variants=["M1"])
    with pytest.raises(ConfigError):
        run_ablation(eval_sets, {"mlcam": nets["cam"]}, variants=["M2"])


def test_collect_maps_one_pass_per_chunk(eval_sets, nets, monkeypatch):
    calls = []
    real = ablation.network.forward_batch
    monkeypatch.setattr(ablation.network, "forward_batch", lambda net, x: calls.append(len(x)) or real(net, x))
    samples = eval_sets["val"] + eval_sets["test"]
    maps = collect_maps(nets["mlcam"], samples, chunk=3)
    assert calls == [3, 1]
    assert len(maps) == 4 and [d.shape for d, _ in maps[0]] == [(16, 16), (8, 8), (8, 8)]
