"""Inception backbone with three class-activation-map taps.

Layout (defaults): 3x3 stem conv + relu + 2x2 max-pool, then three inception
blocks separated by 2x2 max-pools. Block ``j`` output is tap ``j``.

Three head types share that backbone:

``mlcam``
    One bias-free 2-output 1x1 conv per tap (channel 0 = DFM, 1 = NFM). Each
    tap's GAP scores feed its own softmax loss; the losses are summed.
``mlgap``
    Same per-tap CAM convs, but the three CAMs are upsampled to the input size
    and summed before a single GAP -> softmax loss.
``cam``
    Classic CAM: GAP of tap-3 features -> 2-way linear classifier. DFM/NFM are
    computed afterwards by weighting the tap-3 feature planes with the
    classifier rows.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from mlcam.autodiff import (
    Tensor,
    bilinear_upsample,
    concat_channels,
    conv2d,
    global_avg_pool,
    linear,
    max_pool2d,
    relu,
    softmax,
    softmax_cross_entropy,
    stack,
)
from mlcam.errors import ConfigError, DimensionError

D = "D"
ND = "ND"
# position in the score vector [s_d, s_n]
CLASS_INDEX = {D: 0, ND: 1}
HEADS = ("mlcam", "mlgap", "cam")
BRANCH_KERNELS = (1, 3, 5)


@dataclass(frozen=True)
class NetworkConfig:
    input_size: tuple[int, int] = (64, 64)
    input_channels: int = 1
    stem_channels: int = 8
    inception_channels: tuple[tuple[int, int, int], ...] = ((4, 4, 4), (4, 4, 4), (4, 4, 4))
    stem_pool: bool = True
    pool_between: tuple[bool, bool] = (True, True)
    head: str = "mlcam"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(
            self, "inception_channels", tuple(tuple(int(c) for c in b) for b in self.inception_channels)
        )
        object.__setattr__(self, "pool_between", tuple(bool(v) for v in self.pool_between))
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigError(f"input_size must be (H, W) with positive extents, got {self.input_size}")
        if self.input_channels < 1 or self.stem_channels < 1:
            raise ConfigError("input_channels and stem_channels must be >= 1")
        if len(self.inception_channels) != 3:
            raise ConfigError(f"exactly 3 inception blocks required, got {len(self.inception_channels)}")
        for block in self.inception_channels:
            if len(block) != 3 or min(block) < 1:
                raise ConfigError(f"each block needs three positive branch widths, got {block}")
        if len(self.pool_between) != 2:
            raise ConfigError("pool_between needs one flag per block gap (2)")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; expected one of {HEADS}")
        for j, (h, w) in enumerate(self.tap_shapes(), start=1):
            if h < 5 or w < 5:
                raise ConfigError(f"tap {j} would be {h}x{w}; inception blocks need at least 5x5")

    def tap_shapes(self) -> list[tuple[int, int]]:
        """Spatial extent of each tap implied by the pooling layout."""
        h, w = self.input_size
        if self.stem_pool:
            h, w = h // 2, w // 2
        shapes = [(h, w)]
        for pool in self.pool_between:
            if pool:
                h, w = h // 2, w // 2
            shapes.append((h, w))
        return shapes

    def tap_channels(self) -> list[int]:
        return [sum(b) for b in self.inception_channels]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        return cls(**d)


@dataclass
class Network:
    config: NetworkConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> Network:
        return Network(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()},
        )

    def cam_weights(self, tap: int) -> np.ndarray:
        """``[2, C]`` array of (diagnostic, nondiagnostic) weights for tap 1..3."""
        if self.config.head == "cam":
            if tap != 3:
                raise ConfigError("the classic CAM head only exposes tap 3")
            return self.params["fc.w"].data
        w = self.params[f"cam{tap}.w"].data
        return w[:, :, 0, 0]


@dataclass
class LayerMaps:
    tap_id: int
    dfm: Tensor
    nfm: Tensor
    s_d: Tensor
    s_n: Tensor
    probs: tuple[float, float]


@dataclass
class TapBatch:
    """Batched maps for one tap: ``dfm``/``nfm`` are ``[B, H, W]``."""

    tap_id: int
    cam: Tensor  # [B, 2, H, W]
    features: Tensor  # [B, C, H, W]

    @property
    def dfm(self) -> Tensor:
        return self.cam[:, 0]

    @property
    def nfm(self) -> Tensor:
        return self.cam[:, 1]


@dataclass
class ForwardOutput:
    taps: list[TapBatch]
    scores: list[Tensor]  # each [B, 2], one per loss term

    def probabilities(self) -> np.ndarray:
        """Mean softmax over the loss heads, shape ``[B, 2]`` as (p_D, p_ND)."""
        return np.mean([softmax(s.data) for s in self.scores], axis=0)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_network(config: NetworkConfig) -> Network:
    """Fan-in scaled uniform weights, zero biases, deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    c = config.input_channels
    params["stem.w"] = _uniform(rng, (config.stem_channels, c, 3, 3), c * 9)
    params["stem.b"] = Tensor(np.zeros(config.stem_channels), requires_grad=True)
    c = config.stem_channels
    for j, block in enumerate(config.inception_channels, start=1):
        for k, width in zip(BRANCH_KERNELS, block):
            params[f"block{j}.{k}x{k}.w"] = _uniform(rng, (width, c, k, k), c * k * k)
            params[f"block{j}.{k}x{k}.b"] = Tensor(np.zeros(width), requires_grad=True)
        c = sum(block)
        if config.head != "cam":
            # CAM weights: linear readout, so Xavier-style bound rather than He
            bound = np.sqrt(3.0 / c)
            params[f"cam{j}.w"] = Tensor(rng.uniform(-bound, bound, size=(2, c, 1, 1)), requires_grad=True)
    if config.head == "cam":
        bound = np.sqrt(3.0 / c)
        params["fc.w"] = Tensor(rng.uniform(-bound, bound, size=(2, c)), requires_grad=True)
    return Network(config, params)


def parameter_count(config: NetworkConfig) -> int:
    """Closed-form parameter count from the config arithmetic."""
    total = config.stem_channels * (config.input_channels * 9 + 1)
    c = config.stem_channels
    for block in config.inception_channels:
        total += sum(width * (c * k * k + 1) for k, width in zip(BRANCH_KERNELS, block))
        c = sum(block)
        if config.head != "cam":
            total += 2 * c
    if config.head == "cam":
        total += 2 * c
    return total


def inception_block(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Parallel 1x1 / 3x3 / 5x5 conv + relu branches, channel-concatenated."""
    h, w = x.shape[-2:]
    if h < 5 or w < 5:
        raise DimensionError(f"inception block needs spatial dims >= 5, got {h}x{w}", axis="height" if h < 5 else "width")
    branches = []
    for k in BRANCH_KERNELS:
        y = conv2d(x, params[f"{prefix}.{k}x{k}.w"], params[f"{prefix}.{k}x{k}.b"], stride=1, pad=k // 2)
        branches.append(relu(y))
    return concat_channels(branches)


def cam_tap(features: Tensor, weights: Tensor) -> tuple[Tensor, Tensor]:
    """DFM and NFM as channel-weighted sums of the feature planes.

    ``weights`` is the ``[2, C, 1, 1]`` 1x1 conv kernel (row 0 diagnostic).
    Works for ``[C, H, W]`` (returns ``[H, W]`` maps) or batched input.
    """
    c = features.shape[-3]
    if weights.shape != (2, c, 1, 1):
        raise DimensionError(
            f"cam weights {weights.shape} do not match {c} feature channels", axis="channels"
        )
    cam = conv2d(features, weights)
    if features.ndim == 3:
        return cam[0], cam[1]
    return cam[:, 0], cam[:, 1]


def layer_scores(dfm: Tensor, nfm: Tensor) -> tuple[Tensor, Tensor, tuple[float, float]]:
    """GAP class scores (s_d, s_n) and their softmax (p_D, p_ND)."""
    if dfm.shape != nfm.shape:
        raise DimensionError(f"dfm {dfm.shape} and nfm {nfm.shape} differ", axis="height")
    if dfm.ndim != 2:
        raise DimensionError("layer_scores expects single [H, W] maps", axis="rank")
    s_d = global_avg_pool(dfm.reshape(1, *dfm.shape))[0]
    s_n = global_avg_pool(nfm.reshape(1, *nfm.shape))[0]
    p = softmax(np.array([s_d.item(), s_n.item()]))
    return s_d, s_n, (float(p[0]), float(p[1]))


def _check_input(config: NetworkConfig, images: Tensor) -> None:
    if images.ndim != 4:
        raise DimensionError(f"expected [B, C, H, W] images, got {images.shape}", axis="rank")
    _, c, h, w = images.shape
    if c != config.input_channels:
        raise DimensionError(f"image has {c} channels, network expects {config.input_channels}", axis="channels")
    if (h, w) != config.input_size:
        raise DimensionError(
            f"image is {h}x{w}, network expects {config.input_size[0]}x{config.input_size[1]}",
            axis="height" if h != config.input_size[0] else "width",
        )


def backbone(net: Network, images: Tensor) -> list[Tensor]:
    """Tap features after each inception block, shallowest first."""
    cfg = net.config
    p = net.params
    x = relu(conv2d(images, p["stem.w"], p["stem.b"], stride=1, pad=1))
    if cfg.stem_pool:
        x = max_pool2d(x, 2)
    taps = []
    for j in range(1, 4):
        if j > 1 and cfg.pool_between[j - 2]:
            x = max_pool2d(x, 2)
        x = inception_block(x, p, f"block{j}")
        taps.append(x)
    return taps


def forward_batch(net: Network, images: Tensor | np.ndarray) -> ForwardOutput:
    """One forward pass over ``[B, C, H, W]`` images."""
    images = images if isinstance(images, Tensor) else Tensor(images)
    _check_input(net.config, images)
    feats = backbone(net, images)
    head = net.config.head
    if head == "cam":
        fc = net.params["fc.w"]
        scores = [linear(global_avg_pool(feats[2]), fc)]
        kernel = Tensor(fc.data[:, :, None, None])
        taps = [TapBatch(3, conv2d(feats[2], kernel), feats[2])]
        return ForwardOutput(taps, scores)

    taps = [TapBatch(j, conv2d(f, net.params[f"cam{j}.w"]), f) for j, f in enumerate(feats, start=1)]
    if head == "mlcam":
        scores = [global_avg_pool(t.cam) for t in taps]
    else:
        h, w = net.config.input_size
        merged = None
        for t in taps:
            up = bilinear_upsample(t.cam, h, w)
            merged = up if merged is None else merged + up
        scores = [global_avg_pool(merged)]
    return ForwardOutput(taps, scores)


def forward(net: Network, image: Tensor | np.ndarray) -> tuple[list[LayerMaps], list[Tensor]]:
    """Single-image forward: per-tap ``LayerMaps`` and the tap features."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim != 3:
        raise DimensionError(f"expected a [C, H, W] image, got {image.shape}", axis="rank")
    out = forward_batch(net, image.reshape(1, *image.shape))
    maps = []
    for t in out.taps:
        dfm, nfm = t.cam[0, 0], t.cam[0, 1]
        s = global_avg_pool(t.cam)
        p = softmax(s.data[0])
        maps.append(LayerMaps(t.tap_id, dfm, nfm, s[0, 0], s[0, 1], (float(p[0]), float(p[1]))))
    return maps, [t.features[0] for t in out.taps]


def label_indices(labels: Sequence[str]) -> np.ndarray:
    try:
        return np.array([CLASS_INDEX[lab] for lab in labels], dtype=np.int64)
    except KeyError as exc:
        raise ConfigError(f"label must be 'D' or 'ND', got {exc.args[0]!r}") from None


def total_loss(layer_maps: Sequence[LayerMaps], label: str) -> Tensor:
    """Sum over taps of the softmax cross-entropy of [s_d, s_n]."""
    target = CLASS_INDEX[label]
    loss = None
    for lm in layer_maps:
        term = softmax_cross_entropy(stack([lm.s_d, lm.s_n]), target)
        loss = term if loss is None else loss + term
    return loss


def batch_loss(out: ForwardOutput, labels: np.ndarray) -> Tensor:
    """Sum over loss heads of the batch-mean cross-entropy."""
    loss = None
    for s in out.scores:
        term = softmax_cross_entropy(s, labels)
        loss = term if loss is None else loss + term
    return loss


def classify(layer_maps: Sequence[LayerMaps]) -> tuple[str, float]:
    """Average the per-tap (p_D, p_ND) pairs; exact ties go to ND."""
    p_d = float(np.mean([lm.probs[0] for lm in layer_maps]))
    p_n = float(np.mean([lm.probs[1] for lm in layer_maps]))
    return (D, p_d) if p_d > p_n else (ND, p_n)


def classify_probs(probs: np.ndarray) -> list[str]:
    """Labels from ``[B, 2]`` averaged probabilities, with the ND tie rule."""
    return [D if row[0] > row[1] else ND for row in probs]
