"""Frozen VGG-19 feature service.

Weights
-------
The backbone expects torchvision's ImageNet VGG-19 parameters.  To produce a
weights file on a machine with internet access::

    import torch, torchvision
    m = torchvision.models.vgg19(weights=torchvision.models.VGG19_Weights.IMAGENET1K_V1)
    torch.save(m.state_dict(), "vgg19_imagenet.pth")

Point ``backbone.weights`` (or ``ERRNET_VGG19_WEIGHTS``) at that file.  Keys may be
either ``features.<i>.weight`` (full model) or ``<i>.weight`` (features only);
classifier entries are ignored.

The literal value ``"random"`` (or ``"random:<seed>"``) builds a seeded,
randomly initialised surrogate instead.  It exercises every code path but its
features carry no ImageNet semantics.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import MIN_NETWORK_SIZE, DimensionError

WEIGHTS_ENV = "ERRNET_VGG19_WEIGHTS"

# torchvision vgg19().features layout
_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]

# index of the ReLU following each named conv
LAYER_INDEX = {
    "conv1_1": 1, "conv1_2": 3,
    "conv2_1": 6, "conv2_2": 8,
    "conv3_1": 11, "conv3_2": 13, "conv3_3": 15, "conv3_4": 17,
    "conv4_1": 20, "conv4_2": 22, "conv4_3": 24, "conv4_4": 26,
    "conv5_1": 29, "conv5_2": 31, "conv5_3": 33, "conv5_4": 35,
}
LAYER_CHANNELS = {name: (64, 128, 256, 512, 512)[int(name[4]) - 1] for name in LAYER_INDEX}

HYPERCOLUMN_LAYERS = ("conv1_2", "conv2_2", "conv3_2")
FEATURE_LOSS_LAYERS = ("conv2_2", "conv3_2", "conv4_2", "conv5_2")
INVARIANT_LAYER = "conv5_2"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class BackboneInitError(RuntimeError):
    pass


def _build_features(depth: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    in_ch = 3
    for v in _CFG:
        if len(layers) > depth:
            break
        if v == "M":
            # ceil_mode keeps spatial dims at ceil(H / 2^k) for odd sizes
            layers.append(nn.MaxPool2d(2, 2, ceil_mode=True))
        else:
            layers += [nn.Conv2d(in_ch, v, 3, padding=1), nn.ReLU(inplace=False)]
            in_ch = v
    return nn.Sequential(*layers[: depth + 1])


def _random_init(features: nn.Sequential, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for m in features:
        if isinstance(m, nn.Conv2d):
            fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_out) ** 0.5)
                m.bias.zero_()


def _load_state(features: nn.Sequential, path: Path) -> None:
    if not path.is_file():
        raise BackboneInitError(f"backbone weights not found: {path} (see errnet.backbone docstring)")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt or foreign file
        raise BackboneInitError(f"could not read backbone weights {path}: {exc}") from exc
    if isinstance(state, nn.Module):
        state = state.state_dict()
    state = {k[len("features."):] if k.startswith("features.") else k: v for k, v in state.items()}
    own = features.state_dict()
    missing = [k for k in own if k not in state]
    if missing:
        raise BackboneInitError(f"{path} lacks parameters {missing[:4]}...")
    for k, v in own.items():
        if state[k].shape != v.shape:
            raise BackboneInitError(f"{path}: {k} has shape {tuple(state[k].shape)}, expected {tuple(v.shape)}")
    features.load_state_dict({k: state[k] for k in own})


def resolve_weights(weights: str | os.PathLike | None) -> str:
    if weights is None or weights == "":
        weights = os.environ.get(WEIGHTS_ENV)
    if not weights:
        raise BackboneInitError(
            f"no backbone weights configured; set backbone.weights or ${WEIGHTS_ENV} "
            "(use 'random' for an untrained surrogate)")
    return str(weights)


class Backbone:
    """VGG-19 truncated after ``deepest`` layer, frozen.

    Not an ``nn.Module`` on purpose: models hold a reference to it without the
    backbone parameters leaking into their state dicts or optimizers.
    """

    def __init__(self, weights: str | os.PathLike | None = None, deepest: str = INVARIANT_LAYER,
                 dtype: torch.dtype = torch.float32):
        spec = resolve_weights(weights)
        self.features = _build_features(LAYER_INDEX[deepest])
        if spec == "random" or spec.startswith("random:"):
            seed = int(spec.split(":", 1)[1]) if ":" in spec else 0
            _random_init(self.features, seed)
            self.pretrained = False
        else:
            _load_state(self.features, Path(spec))
            self.pretrained = True
        self.source = spec
        self.deepest = deepest
        self.features.eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        self.std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        self.to(dtype=dtype)

    def to(self, device=None, dtype=None) -> "Backbone":
        self.features.to(device=device, dtype=dtype)
        self.mean = self.mean.to(device=device, dtype=dtype)
        self.std = self.std.to(device=device, dtype=dtype)
        return self

    @property
    def dtype(self) -> torch.dtype:
        return self.mean.dtype

    def parameters(self):
        return self.features.parameters()

    def channels(self, layer: str) -> int:
        idx = LAYER_INDEX[layer]
        for m in reversed(self.features[:idx]):
            if isinstance(m, nn.Conv2d):
                return m.out_channels
        raise KeyError(layer)

    def extract(self, image: torch.Tensor, layers: Iterable[str]) -> dict[str, torch.Tensor]:
        """Activations (post-ReLU) of the requested layers for a ``(B, 3, H, W)`` batch in [0, 1]."""
        layers = set(layers)
        unknown = layers - LAYER_INDEX.keys()
        if unknown:
            raise KeyError(f"unknown layers {sorted(unknown)}")
        if image.ndim != 4 or image.shape[1] != 3:
            raise DimensionError(f"expected (B, 3, H, W), got {tuple(image.shape)}")
        if min(image.shape[-2:]) < MIN_NETWORK_SIZE:
            raise DimensionError(f"input {tuple(image.shape[-2:])} below {MIN_NETWORK_SIZE}px")
        if not layers:
            return {}
        stop = max(LAYER_INDEX[l] for l in layers)
        if stop > LAYER_INDEX[self.deepest]:
            raise KeyError(f"backbone truncated at {self.deepest}")
        wanted = {LAYER_INDEX[l]: l for l in layers}
        h = (image - self.mean) / self.std
        out = {}
        for i, module in enumerate(self.features):
            h = module(h)
            if i in wanted:
                out[wanted[i]] = h
            if i == stop:
                break
        return out

    __call__ = extract

    def hypercolumn(self, image: torch.Tensor, layers: Iterable[str] = HYPERCOLUMN_LAYERS) -> torch.Tensor:
        """Concatenate ``image`` with bilinearly upsampled activations of ``layers``."""
        layers = [l for l in LAYER_INDEX if l in set(layers)]
        if not layers:
            if image.ndim != 4 or image.shape[1] != 3:
                raise DimensionError(f"expected (B, 3, H, W), got {tuple(image.shape)}")
            return image
        feats = self.extract(image, layers)
        size = image.shape[-2:]
        ups = [F.interpolate(feats[l], size=size, mode="bilinear", align_corners=False) for l in layers]
        return torch.cat([image, *ups], dim=1)


def hypercolumn_channels(layers: Iterable[str]) -> int:
    return 3 + sum(LAYER_CHANNELS[l] for l in set(layers))


_CACHE: dict[tuple, Backbone] = {}


def get_backbone(weights=None, deepest: str = INVARIANT_LAYER, dtype=torch.float32) -> Backbone:
    """Shared, lazily built instance per (weights, depth, dtype)."""
    key = (resolve_weights(weights), deepest, dtype)
    if key not in _CACHE:
        _CACHE[key] = Backbone(key[0], deepest, dtype)
    return _CACHE[key]
