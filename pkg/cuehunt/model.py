"""The one-shot localizer: a shared fully convolutional tower applied to the
adaptation and target images, attention pooling over the adaptation feature
map, per-pixel scoring of the target feature map and softargmax keypoints
feeding a linear output head.
"""

from __future__ import annotations

import hashlib
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from typing import Dict, NamedTuple, Optional, Tuple, Union

import numpy as np

from .autograd import (
    Tape,
    Tensor,
    broadcast_mul,
    conv1x1,
    conv2d_valid,
    expected_coordinates,
    linear,
    relu,
    reshape,
    spatial_softmax,
    stack3x3,
    weighted_pool,
)
from .config import check_keys
from .errors import ConfigurationError, ShapeError

LAYER_KINDS = ("conv", "stack3x3")


@dataclass(frozen=True)
class LayerSpec:
    kind: str = "conv"
    kernel: int = 1
    channels: int = 0
    relu: bool = True

    def to_dict(self):
        return {"kind": self.kind, "kernel": self.kernel, "channels": self.channels, "relu": self.relu}

    @classmethod
    def from_dict(cls, data):
        check_keys("tower layer", data, ("kind", "kernel", "channels", "relu"))
        return cls(**data)


def _tower(widths, final_relu=False):
    c1, c2, c3, c4 = widths
    return (
        LayerSpec("conv", 5, c1),
        LayerSpec("conv", 3, c2),
        LayerSpec("stack3x3", 3, 0, False),
        LayerSpec("conv", 1, c3),
        LayerSpec("conv", 1, c4, final_relu),
    )


@dataclass(frozen=True)
class ArchitectureConfig:
    height: int = 150
    width: int = 150
    in_channels: int = 3
    tower: Tuple[LayerSpec, ...] = _tower((16, 32, 64, 64))
    attention_widths: Tuple[int, ...] = (32,)
    scorer_widths: Tuple[int, ...] = (32,)
    num_maps: int = 16
    temperature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "tower", tuple(self.tower))
        object.__setattr__(self, "attention_widths", tuple(self.attention_widths))
        object.__setattr__(self, "scorer_widths", tuple(self.scorer_widths))
        if not self.tower:
            raise ConfigurationError("Architecture needs at least one tower layer")
        for idx, layer in enumerate(self.tower):
            if layer.kind not in LAYER_KINDS:
                raise ConfigurationError(f"Tower layer {idx}: unknown kind '{layer.kind}'")
            if layer.kind == "conv" and (layer.kernel < 1 or layer.channels < 1):
                raise ConfigurationError(f"Tower layer {idx}: kernel and channels must be positive")
        if self.tower[-1].kind != "conv":
            raise ConfigurationError("The tower must end with a convolution")
        if self.in_channels < 1 or self.num_maps < 1:
            raise ConfigurationError("in_channels and num_maps must be positive")
        if any(w < 1 for w in self.attention_widths + self.scorer_widths):
            raise ConfigurationError("Bottleneck widths must be positive")
        if self.temperature <= 0:
            raise ConfigurationError(f"Softmax temperature must be positive, got {self.temperature}")
        fh, fw = self.feature_size()
        if fh < 1 or fw < 1:
            raise ConfigurationError(
                f"Input {self.height}×{self.width} is smaller than the receptive field {self.receptive_field}"
            )

    @property
    def feature_channels(self) -> int:
        return self.tower[-1].channels

    @property
    def receptive_field(self) -> int:
        reduction = 0
        for layer in self.tower:
            reduction += 2 if layer.kind == "stack3x3" else layer.kernel - 1
        return reduction + 1

    def feature_size(self, height=None, width=None) -> Tuple[int, int]:
        shrink = self.receptive_field - 1
        return (height or self.height) - shrink, (width or self.width) - shrink

    def layer_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Parameter names and shapes in initialization order."""
        shapes: Dict[str, Tuple[int, ...]] = {}
        channels = self.in_channels
        for idx, layer in enumerate(self.tower):
            if layer.kind == "stack3x3":
                channels *= 9
                continue
            shapes[f"tower.{idx}.weight"] = (layer.channels, channels, layer.kernel, layer.kernel)
            shapes[f"tower.{idx}.bias"] = (layer.channels,)
            channels = layer.channels
        for prefix, widths in (("attention", self.attention_widths + (1,)),
                               ("scorer", self.scorer_widths + (self.num_maps,))):
            channels = self.feature_channels
            for idx, width in enumerate(widths):
                shapes[f"{prefix}.{idx}.weight"] = (width, channels, 1, 1)
                shapes[f"{prefix}.{idx}.bias"] = (width,)
                channels = width
        shapes["head.weight"] = (2, 2 * self.num_maps)
        shapes["head.bias"] = (2,)
        return shapes

    def scaled(self, factor: float) -> "ArchitectureConfig":
        """Same layer ledger with every channel width multiplied by ``factor``."""

        def scale(n):
            return max(1, int(round(n * factor)))

        tower = tuple(
            replace(layer, channels=scale(layer.channels)) if layer.kind == "conv" else layer
            for layer in self.tower
        )
        return replace(
            self,
            tower=tower,
            attention_widths=tuple(scale(w) for w in self.attention_widths),
            scorer_widths=tuple(scale(w) for w in self.scorer_widths),
        )

    def with_size(self, height: int, width: int) -> "ArchitectureConfig":
        return replace(self, height=height, width=width)

    def to_dict(self):
        return {
            "height": self.height,
            "width": self.width,
            "in_channels": self.in_channels,
            "tower": [layer.to_dict() for layer in self.tower],
            "attention_widths": list(self.attention_widths),
            "scorer_widths": list(self.scorer_widths),
            "num_maps": self.num_maps,
            "temperature": self.temperature,
        }

    @classmethod
    def from_dict(cls, data):
        check_keys("architecture", data, cls.__dataclass_fields__)
        data = dict(data)
        if "tower" in data:
            data["tower"] = tuple(LayerSpec.from_dict(layer) for layer in data["tower"])
        return cls(**data)

    @classmethod
    def ledger(cls) -> "ArchitectureConfig":
        return cls()

    @classmethod
    def desk(cls) -> "ArchitectureConfig":
        return cls.ledger().scaled(0.5).with_size(64, 64)

    @classmethod
    def tiny(cls) -> "ArchitectureConfig":
        return cls(
            height=24,
            width=24,
            tower=_tower((4, 8, 8, 8)),
            attention_widths=(4,),
            scorer_widths=(4,),
            num_maps=4,
        )


@dataclass(eq=False)
class ParameterSet(Mapping):
    """All trainable weights of a localizer, by name."""

    tensors: Dict[str, np.ndarray]
    scheme: str = "he-normal"
    seed: Optional[int] = None

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> "ParameterSet":
        return replace(self, tensors=dict(tensors))

    def copy(self) -> "ParameterSet":
        return self.with_tensors({name: value.copy() for name, value in self.tensors.items()})

    def astype(self, dtype) -> "ParameterSet":
        return self.with_tensors({name: value.astype(dtype) for name, value in self.tensors.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self.tensors:
            value = np.ascontiguousarray(self.tensors[name])
            h.update(name.encode())
            h.update(str(value.shape).encode())
            h.update(value.tobytes())
        return h.hexdigest()

    def check_shapes(self, config: ArchitectureConfig):
        expected = config.layer_shapes()
        if list(expected) != list(self.tensors):
            raise ShapeError(f"Parameter names {sorted(self.tensors)} do not match the architecture {sorted(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"Parameter '{name}' has shape {self.tensors[name].shape}, architecture expects {shape}")


def init_params(config: ArchitectureConfig, seed: int = 0) -> ParameterSet:
    """Fan-in scaled Gaussian weights, zero biases, keypoint-averaging head."""
    if not isinstance(config, ArchitectureConfig):
        raise ConfigurationError("init_params needs an ArchitectureConfig")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.layer_shapes().items():
        if name == "head.weight":
            w = np.zeros(shape)
            w[0, 0::2] = 1.0 / config.num_maps
            w[1, 1::2] = 1.0 / config.num_maps
            tensors[name] = w
        elif name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return ParameterSet(tensors=tensors, scheme="he-normal", seed=seed)


class Pooling(NamedTuple):
    pooled: Tensor
    attention: Tensor


class Localization(NamedTuple):
    alphas: Tensor
    keypoints: Tensor
    prediction: Tensor


@dataclass
class ForwardTrace:
    adapt_features: Tensor
    target_features: Tensor
    attention_scores: Tensor
    attention: Tensor
    pooled: Tensor
    score_maps: Tensor
    score_alphas: Tensor
    keypoints: Tensor
    prediction: Tensor
    tape: Tape = field(repr=False)

    @property
    def point(self) -> Tuple[float, float]:
        x, y = self.prediction.data
        return float(x), float(y)


Theta = Mapping[str, Tensor]


def _bottleneck(x: Tensor, theta: Theta, prefix: str, depth: int) -> Tensor:
    for idx in range(depth):
        x = conv1x1(x, theta[f"{prefix}.{idx}.weight"], theta[f"{prefix}.{idx}.bias"])
        if idx < depth - 1:
            x = relu(x)
    return x


def tower_forward(image: Tensor, theta: Theta, config: ArchitectureConfig) -> Tensor:
    """Feature map of one image. Any size at least the receptive field works."""
    if image.data.ndim != 3 or image.shape[0] != config.in_channels:
        raise ShapeError(f"Expected a {config.in_channels}×H×W image, got {image.shape}")
    rf = config.receptive_field
    if image.shape[1] < rf or image.shape[2] < rf:
        raise ShapeError(f"Image {image.shape[1]}×{image.shape[2]} is smaller than the receptive field {rf}×{rf}")
    x = image
    for idx, layer in enumerate(config.tower):
        if layer.kind == "stack3x3":
            x = stack3x3(x)
            continue
        weight, bias = theta[f"tower.{idx}.weight"], theta[f"tower.{idx}.bias"]
        x = conv1x1(x, weight, bias) if layer.kernel == 1 else conv2d_valid(x, weight, bias)
        if layer.relu:
            x = relu(x)
    return x


def attention_scores(feature_map: Tensor, theta: Theta, config: ArchitectureConfig) -> Tensor:
    """Single-channel score per feature pixel."""
    return _bottleneck(feature_map, theta, "attention", len(config.attention_widths) + 1)


def attend_pool(feature_map: Tensor, scores: Tensor, temperature: float = 1.0) -> Pooling:
    attention = spatial_softmax(scores, temperature)
    return Pooling(weighted_pool(feature_map, attention), attention)


def combine_and_score(pooled: Tensor, target_map: Tensor, theta: Theta, config: ArchitectureConfig) -> Tensor:
    """k score maps; every output pixel depends only on its own target pixel and the pooled vector."""
    return _bottleneck(broadcast_mul(pooled, target_map), theta, "scorer", len(config.scorer_widths) + 1)


def localize(score_maps: Tensor, theta: Theta, config: ArchitectureConfig) -> Localization:
    alphas = spatial_softmax(score_maps, config.temperature)
    keypoints = expected_coordinates(alphas)
    prediction = linear(reshape(keypoints, (-1,)), theta["head.weight"], theta["head.bias"])
    return Localization(alphas, keypoints, prediction)


def predict(
    adapt_image: Union[np.ndarray, Tensor],
    target_image: Union[np.ndarray, Tensor],
    params: Union[ParameterSet, Theta],
    config: ArchitectureConfig,
    tape: Optional[Tape] = None,
    dtype="float64",
) -> ForwardTrace:
    """Full forward pass for one episode.

    ``params`` is either a ParameterSet (watched on a fresh or given tape) or
    a mapping of tensors already watched on ``tape``.
    """
    if isinstance(params, ParameterSet):
        tape = tape or Tape(dtype)
        theta = tape.watch_all(params.tensors)
    else:
        theta = params
        tape = tape or next(iter(theta.values())).tape
    xc = adapt_image if isinstance(adapt_image, Tensor) else tape.constant(adapt_image)
    x = target_image if isinstance(target_image, Tensor) else tape.constant(target_image)
    if xc.shape != x.shape:
        raise ShapeError(f"Adaptation image {xc.shape} and target image {x.shape} differ in size")

    fc = tower_forward(xc, theta, config)
    f = tower_forward(x, theta, config)
    scores = attention_scores(fc, theta, config)
    pooled, attention = attend_pool(fc, scores, config.temperature)
    score_maps = combine_and_score(pooled, f, theta, config)
    alphas, keypoints, prediction = localize(score_maps, theta, config)
    return ForwardTrace(
        adapt_features=fc,
        target_features=f,
        attention_scores=scores,
        attention=attention,
        pooled=pooled,
        score_maps=score_maps,
        score_alphas=alphas,
        keypoints=keypoints,
        prediction=prediction,
        tape=tape,
    )


def feature_to_image(row: int, col: int, config: ArchitectureConfig) -> Tuple[int, int]:
    """Image pixel at the centre of a feature pixel's receptive field."""
    offset = (config.receptive_field - 1) // 2
    return row + offset, col + offset
