"""Map-generation variants M1..M10 and the segmentation benchmark grid.

========  ======  =====================================================
variant   head    map
========  ======  =====================================================
M1        mlgap   normalize(sum_j upsample(DFM_j))
M2        mlcam   full fuse(): inhibition + integration
M3        mlcam   integration over DFM' without inhibition
M4-M6     mlcam   normalize(DFM'_j * (1 - NFM'_j)), j = 1, 2, 3
M7-M9     mlcam   DFM'_j, j = 1, 2, 3
M10       cam     DFM' of tap 3 from the classic CAM network
========  ======  =====================================================
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from mlcam import network
from mlcam.autodiff import no_grad
from mlcam.data import SegSample, stack_images
from mlcam.errors import ConfigError, DataError
from mlcam.fusion import (
    NormalizedMap,
    collateral_integrate,
    fuse,
    lateral_inhibit,
    normalize_map,
    primed_maps,
    raw_maps,
    threshold_mask,
    upsample,
)
from mlcam.metrics import SegScores, mean_scores, score

VARIANTS = tuple(f"M{i}" for i in range(1, 11))
MODES = ("intermediate", "restrictive")
GROUND_TRUTH = "GT"  # sanity column: the ground-truth mask used as the map
METRIC_NAMES = ("mean_acc", "mean_IU", "fw_IU")


def head_for(variant: str) -> str:
    if variant == "M1":
        return "mlgap"
    if variant == "M10":
        return "cam"
    if variant in VARIANTS:
        return "mlcam"
    raise ConfigError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")


def parse_variants(text: str | Sequence[str] | None) -> list[str]:
    if text is None:
        return list(VARIANTS)
    items = [v.strip() for v in text.split(",")] if isinstance(text, str) else list(text)
    items = [v for v in items if v]
    if not items:
        raise ConfigError("empty variant list")
    for v in items:
        if v != GROUND_TRUTH:
            head_for(v)
    return items


def variant_map(variant: str, layer_maps, input_size: tuple[int, int]) -> NormalizedMap:
    """Diagnostic map for one image under ``variant``.

    ``layer_maps`` must come from a network with the head :func:`head_for`
    names; for M10 only the last (deepest) entry is used.
    """
    head_for(variant)
    if variant == "M2":
        return fuse(layer_maps, input_size).fdfm
    if variant == "M1":
        pairs = raw_maps(layer_maps)
        total = sum(upsample(d, input_size) for d, _ in pairs)
        return normalize_map(total)
    if variant == "M10":
        d, _ = raw_maps(layer_maps)[-1]
        return normalize_map(upsample(d, input_size), 3)
    primed = primed_maps(layer_maps, input_size)
    if variant == "M3":
        return normalize_map(collateral_integrate([d.values for d, _ in primed]))
    k = int(variant[1:])
    if 4 <= k <= 6:
        d, n = primed[k - 4]
        return normalize_map(lateral_inhibit(d, n), k - 3)
    return primed[k - 7][0]


def collect_maps(net: network.Network, samples: Sequence[SegSample], chunk: int = 64) -> list[list[tuple[np.ndarray, np.ndarray]]]:
    """Per-image ``[(dfm, nfm), ...]`` per tap, one forward pass per image."""
    maps: list[list[tuple[np.ndarray, np.ndarray]]] = []
    with no_grad():
        for start in range(0, len(samples), chunk):
            batch = samples[start : start + chunk]
            out = network.forward_batch(net, stack_images(batch))
            for b in range(len(batch)):
                maps.append([(t.cam.data[b, 0].copy(), t.cam.data[b, 1].copy()) for t in out.taps])
    return maps


@dataclass
class AblationReport:
    variants: list[str]
    modes: list[str]
    subsets: list[str]
    cells: dict[tuple[str, str, str], SegScores] = field(default_factory=dict)
    # (subset, sample_id, variant, mode, scores)
    rows: list[tuple[str, str, str, str, SegScores]] = field(default_factory=list)

    def cell(self, variant: str, mode: str, subset: str) -> SegScores:
        return self.cells[(variant, mode, subset)]

    def is_complete(self) -> bool:
        return all(
            (v, m, s) in self.cells for v in self.variants for m in self.modes for s in self.subsets
        )

    def grid_rows(self) -> list[tuple[str, str, str, list[float]]]:
        out = []
        for metric_i, metric in enumerate(METRIC_NAMES):
            for subset in self.subsets:
                for mode in self.modes:
                    out.append(
                        (metric, subset, mode, [self.cells[(v, mode, subset)][metric_i] for v in self.variants])
                    )
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "subset", "mode", *self.variants])
            for metric, subset, mode, values in self.grid_rows():
                w.writerow([metric, subset, mode, *(repr(v) for v in values)])

    def to_text(self) -> str:
        header = ["", "Set", *self.variants]
        lines = [header]
        for metric, subset, mode, values in self.grid_rows():
            lines.append([metric, f"{subset}-{mode[0].upper()}", *(f"{v:.2f}" for v in values)])
        widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
        return "\n".join("  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in lines) + "\n"


def run_ablation(
    eval_sets: Mapping[str, Sequence[SegSample]],
    nets: Mapping[str, network.Network],
    modes: Sequence[str] = MODES,
    variants: Sequence[str] = VARIANTS,
) -> AblationReport:
    """Score every (variant, mode, subset) cell as the mean of per-image metrics.

    ``nets`` maps head name (``mlcam``, ``mlgap``, ``cam``) to a trained network.
    """
    variants = list(variants)
    missing = [f"{name}:{s.sample_id}" for name, subset in eval_sets.items() for s in subset if s.gt_mask is None]
    if missing:
        raise DataError("evaluation samples without ground-truth masks", missing)
    empty = [name for name, subset in eval_sets.items() if len(subset) == 0]
    if empty:
        raise DataError("empty evaluation subsets", empty)
    heads = sorted({head_for(v) for v in variants if v != GROUND_TRUTH})
    absent = [h for h in heads if h not in nets]
    if absent:
        raise ConfigError(f"no trained network for head(s) {absent}")
    for h in heads:
        if nets[h].config.head != h:
            raise ConfigError(f"network supplied for {h!r} has head {nets[h].config.head!r}")

    report = AblationReport(variants, list(modes), list(eval_sets))
    for subset_name, subset in eval_sets.items():
        maps = {h: collect_maps(nets[h], subset) for h in heads}
        per_cell: dict[tuple[str, str], list[SegScores]] = {}
        for i, sample in enumerate(subset):
            size = sample.gt_mask.shape
            for v in variants:
                if v == GROUND_TRUTH:
                    values = sample.gt_mask.astype(np.float64)
                else:
                    values = variant_map(v, maps[head_for(v)][i], size).values
                for mode in modes:
                    s = score(threshold_mask(values, mode), sample.gt_mask)
                    per_cell.setdefault((v, mode), []).append(s)
                    report.rows.append((subset_name, sample.sample_id, v, mode, s))
        for (v, mode), scores in per_cell.items():
            report.cells[(v, mode, subset_name)] = mean_scores(scores)
    return report
