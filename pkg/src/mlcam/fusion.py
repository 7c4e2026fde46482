"""Lateral inhibition and collateral integration of per-tap CAMs.

Pipeline for one image: upsample every tap's DFM and NFM to the input size,
min-max normalize each, inhibit (``d * (1 - n)``), sum pairwise products over
the three taps, normalize again, threshold.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from mlcam.autodiff import Tensor, interpolation_matrix
from mlcam.errors import ConfigError, DimensionError, NumericInputError

THRESHOLDS = {"intermediate": 0.03, "restrictive": 0.2}
DIAGNOSTIC = "diagnostic"
NONDIAGNOSTIC = "nondiagnostic"


@dataclass(frozen=True)
class NormalizedMap:
    values: np.ndarray
    source_tap: int | None = None
    kind: str = DIAGNOSTIC


@dataclass
class FusionResult:
    fdfm: NormalizedMap
    inhibited_maps: list[np.ndarray]
    mask: np.ndarray
    threshold_used: float
    tap_shapes: list[tuple[int, int]] = field(default_factory=list)


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def upsample(raw, size: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear resize of a 2-D map (numpy path, no graph)."""
    m = _array(raw)
    h, w = m.shape
    th, tw = size
    if th < 1 or tw < 1:
        raise DimensionError("target extent must be positive", axis="height" if th < 1 else "width")
    if (h, w) == (th, tw):
        return m.copy()
    if th < h or tw < w:
        raise DimensionError(f"cannot upsample {h}x{w} to smaller {th}x{tw}", axis="height" if th < h else "width")
    return interpolation_matrix(h, th) @ m @ interpolation_matrix(w, tw).T


def normalize_map(raw, source_tap: int | None = None, kind: str = DIAGNOSTIC) -> NormalizedMap:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    m = _array(raw)
    if not np.all(np.isfinite(m)):
        raise NumericInputError("normalize_map received non-finite values")
    lo, hi = m.min(), m.max()
    if hi > lo:
        values = (m - lo) / (hi - lo)
    else:
        values = np.zeros_like(m)
    return NormalizedMap(values, source_tap, kind)


def lateral_inhibit(dfm: NormalizedMap, nfm: NormalizedMap) -> np.ndarray:
    d, n = _values(dfm), _values(nfm)
    if d.shape != n.shape:
        raise DimensionError(f"dfm {d.shape} vs nfm {n.shape}", axis="height")
    return d - d * n


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, NormalizedMap) else _array(m)


def collateral_integrate(inhibited: Sequence[np.ndarray], ordered: bool = False) -> np.ndarray:
    """Sum of elementwise products over tap pairs (raw, unnormalized).

    With ``ordered=True`` both (i, j) and (j, i) are counted, giving exactly
    twice the default unordered sum.
    """
    maps = [_values(m) for m in inhibited]
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise DimensionError(f"inhibited maps differ in shape: {m.shape} vs {shape}", axis="height")
    pairs = itertools.permutations(range(len(maps)), 2) if ordered else itertools.combinations(range(len(maps)), 2)
    out = np.zeros(shape)
    for i, j in pairs:
        out += maps[i] * maps[j]
    return out


def resolve_threshold(mode: str = "intermediate", threshold: float | None = None) -> float:
    if threshold is not None:
        t = float(threshold)
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {t}")
        return t
    if mode not in THRESHOLDS:
        raise ConfigError(f"unknown mode {mode!r}; expected intermediate, restrictive or a threshold")
    return THRESHOLDS[mode]


def threshold_mask(fdfm, mode: str = "intermediate", threshold: float | None = None) -> np.ndarray:
    """Boolean superlevel set ``fdfm >= t``."""
    t = resolve_threshold(mode, threshold)
    return _values(fdfm) >= t


def raw_maps(layer_maps) -> list[tuple[np.ndarray, np.ndarray]]:
    """(dfm, nfm) arrays from ``LayerMaps`` objects or pairs."""
    out = []
    for lm in layer_maps:
        if isinstance(lm, tuple):
            out.append((_array(lm[0]), _array(lm[1])))
        else:
            out.append((_array(lm.dfm), _array(lm.nfm)))
        d, n = out[-1]
        if d.shape != n.shape:
            raise DimensionError(f"tap {len(out)}: dfm {d.shape} vs nfm {n.shape}", axis="height")
    return out


def primed_maps(layer_maps, input_size: tuple[int, int]) -> list[tuple[NormalizedMap, NormalizedMap]]:
    """Upsampled, normalized (DFM', NFM') per tap."""
    primed = []
    for tap, (d, n) in enumerate(raw_maps(layer_maps), start=1):
        primed.append(
            (
                normalize_map(upsample(d, input_size), tap, DIAGNOSTIC),
                normalize_map(upsample(n, input_size), tap, NONDIAGNOSTIC),
            )
        )
    return primed


def fuse(
    layer_maps,
    input_size: tuple[int, int],
    mode: str = "intermediate",
    threshold: float | None = None,
) -> FusionResult:
    """Full LI + CI pipeline from per-tap maps to a thresholded mask.

    ``layer_maps`` holds ``LayerMaps`` objects or ``(dfm, nfm)`` pairs.
    """
    t = resolve_threshold(mode, threshold)
    raw = raw_maps(layer_maps)
    primed = primed_maps(raw, input_size)
    inhibited = [lateral_inhibit(d, n) for d, n in primed]
    fdfm = normalize_map(collateral_integrate(inhibited))
    return FusionResult(
        fdfm=fdfm,
        inhibited_maps=inhibited,
        mask=fdfm.values >= t,
        threshold_used=t,
        tap_shapes=[tuple(d.shape) for d, _ in raw],
    )


def heatmap_pixels(fdfm) -> np.ndarray:
    """8-bit heatmap values ``round(255 * FDFM)``."""
    return np.rint(255.0 * _values(fdfm)).astype(np.uint8)


def save_fusion(result: FusionResult, heatmap_path: str | Path, mask_path: str | Path) -> Path:
    """Write the heatmap (8-bit gray), mask (1-bit) and a JSON sidecar next to the heatmap."""
    heatmap_path, mask_path = Path(heatmap_path), Path(mask_path)
    Image.fromarray(heatmap_pixels(result.fdfm), mode="L").save(heatmap_path)
    Image.fromarray(result.mask.astype(bool)).convert("1").save(mask_path)
    sidecar = heatmap_path.with_suffix(".json")
    meta = {
        "threshold": result.threshold_used,
        "tap_shapes": [list(s) for s in result.tap_shapes],
        "size": list(result.fdfm.values.shape),
        "mask": mask_path.name,
    }
    sidecar.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return sidecar
