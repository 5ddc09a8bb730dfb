"""Generator (BaseNet + channel-wise context + pyramid pooling) and patch discriminator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import HYPERCOLUMN_LAYERS, Backbone, hypercolumn_channels
from .imaging import MIN_NETWORK_SIZE, DimensionError

ARMS = ("BaseNet", "BaseNet+CWC", "BaseNet+MSC", "ERRNet")


@dataclass
class GeneratorConfig:
    width: int = 256
    num_blocks: int = 13
    use_cwc: bool = True
    use_msc: bool = True
    cwc_reduction: int = 16
    pyramid_scales: list[int] = field(default_factory=lambda: [4, 8, 16, 32])
    msc_channels: int | None = None  # per-scale reduced channels; default width // len(scales)
    hypercolumn_layers: tuple[str, ...] = HYPERCOLUMN_LAYERS
    res_scale: float = 0.1
    global_skip: bool = True
    identity_init: bool = True  # zero the output conv so an untrained model returns its input
    pad_multiple: int = 32

    def __post_init__(self):
        self.pyramid_scales = list(self.pyramid_scales)
        self.hypercolumn_layers = tuple(self.hypercolumn_layers)
        if self.width < 1 or self.num_blocks < 0:
            raise ValueError("width must be >= 1 and num_blocks >= 0")
        if self.use_cwc and not 1 <= self.cwc_reduction < self.width:
            raise ValueError(f"cwc_reduction must lie in [1, {self.width}), got {self.cwc_reduction}")
        s = self.pyramid_scales
        if not s or any(v < 1 for v in s) or any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError(f"pyramid_scales must be strictly increasing positive ints, got {s}")

    @property
    def reduced_channels(self) -> int:
        return self.msc_channels or max(1, self.width // len(self.pyramid_scales))

    @property
    def arm(self) -> str:
        return {(False, False): "BaseNet", (True, False): "BaseNet+CWC",
                (False, True): "BaseNet+MSC", (True, True): "ERRNet"}[(self.use_cwc, self.use_msc)]

    def with_arm(self, arm: str) -> "GeneratorConfig":
        if arm not in ARMS:
            raise ValueError(f"unknown arm {arm!r}; choose from {ARMS}")
        d = asdict(self)
        d["use_cwc"] = "CWC" in arm or arm == "ERRNet"
        d["use_msc"] = "MSC" in arm or arm == "ERRNet"
        return GeneratorConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hypercolumn_layers"] = list(d["hypercolumn_layers"])
        return d


@dataclass
class DiscriminatorConfig:
    num_layers: int = 4
    base_width: int = 64
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.num_layers < 3:
            raise ValueError("discriminator needs at least 3 layers")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# channel-wise context

def channel_attention(u: torch.Tensor, w_down: torch.Tensor, w_up: torch.Tensor,
                      b_down: torch.Tensor | None = None, b_up: torch.Tensor | None = None,
                      return_gate: bool = False):
    """Recalibrate ``u`` (B, C, H, W) by ``sigmoid(W_U relu(W_D z))`` with ``z`` the channel means.

    ``w_down`` is (R, C), ``w_up`` is (C, R).
    """
    if u.ndim != 4:
        raise DimensionError(f"expected (B, C, H, W), got {tuple(u.shape)}")
    c = u.shape[1]
    r = w_down.shape[0]
    if w_down.shape != (r, c) or w_up.shape != (c, r):
        raise DimensionError(
            f"gate weights {tuple(w_down.shape)}/{tuple(w_up.shape)} do not fit {c} channels")
    z = u.mean(dim=(2, 3))
    s = torch.sigmoid(F.linear(F.relu(F.linear(z, w_down, b_down)), w_up, b_up))
    out = u * s[:, :, None, None]
    return (out, s) if return_gate else out


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduced: int):
        super().__init__()
        self.down = nn.Linear(channels, reduced)
        self.up = nn.Linear(reduced, channels)

    def forward(self, u, return_gate: bool = False):
        return channel_attention(u, self.down.weight, self.up.weight, self.down.bias, self.up.bias,
                                 return_gate=return_gate)


# ---------------------------------------------------------------------------
# multi-scale spatial context

class PyramidPooling(nn.Module):
    def __init__(self, channels: int, scales=(4, 8, 16, 32), reduced_channels: int | None = None):
        super().__init__()
        self.scales = list(scales)
        self.reduced_channels = reduced_channels or max(1, channels // len(self.scales))
        self.stages = nn.ModuleList(
            nn.Sequential(nn.AdaptiveAvgPool2d(s), nn.Conv2d(channels, self.reduced_channels, 1), nn.ReLU())
            for s in self.scales
        )

    @property
    def out_channels(self) -> int:
        return self.stages[0][1].in_channels + len(self.scales) * self.reduced_channels

    def forward(self, x):
        h, w = x.shape[-2:]
        top = max(self.scales)
        if h % top or w % top:
            raise DimensionError(f"feature map {h}x{w} not divisible by pyramid scale {top}; pad first")
        size = (h, w)
        pooled = [F.interpolate(stage(x), size=size, mode="bilinear", align_corners=False) for stage in self.stages]
        return torch.cat([x, *pooled], dim=1)


def pyramid_pool(features: torch.Tensor, scales, reduced_channels: int) -> torch.Tensor:
    """Stateless convenience wrapper: a freshly initialised pyramid module applied once."""
    return PyramidPooling(features.shape[1], scales, reduced_channels).to(features)(features)


# ---------------------------------------------------------------------------
# generator

class ResidualBlock(nn.Module):
    """conv-relu-conv (+ channel attention), scaled residual add; no normalisation layers."""

    def __init__(self, width: int, cwc_reduction: int | None, res_scale: float = 1.0):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.attention = ChannelAttention(width, cwc_reduction) if cwc_reduction else None
        self.res_scale = res_scale

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        if self.attention is not None:
            y = self.attention(y)
        return x + self.res_scale * y


def edsr_init(module: nn.Module) -> None:
    """Conv/linear weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) (variance 1/(3 fan_in)), same for biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))
            if m.bias is not None:
                bound = 1 / math.sqrt(nn.init._calculate_fan_in_and_fan_out(m.weight)[0])
                nn.init.uniform_(m.bias, -bound, bound)


def pad_to_multiple(x: torch.Tensor, multiple: int):
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    # reflect padding needs pad < dim; fall back to replicate for tiny inputs
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None, backbone: Backbone | None = None):
        super().__init__()
        self.config = config = config or GeneratorConfig()
        self.backbone = backbone
        if config.hypercolumn_layers and backbone is None:
            raise ValueError("hypercolumn input requires a backbone")
        in_ch = hypercolumn_channels(config.hypercolumn_layers)
        w = config.width
        self.head = nn.Conv2d(in_ch, w, 3, padding=1)
        reduction = config.cwc_reduction if config.use_cwc else None
        self.blocks = nn.Sequential(*(ResidualBlock(w, reduction, config.res_scale) for _ in range(config.num_blocks)))
        self.body_tail = nn.Conv2d(w, w, 3, padding=1)
        self.pyramid = PyramidPooling(w, config.pyramid_scales, config.reduced_channels) if config.use_msc else None
        fused = self.pyramid.out_channels if self.pyramid is not None else w
        self.fuse = nn.Conv2d(fused, w, 3, padding=1)
        self.out = nn.Conv2d(w, 3, 3, padding=1)
        edsr_init(self)
        if config.identity_init:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    # the backbone is a shared, frozen service; keep it out of module bookkeeping
    def __setattr__(self, name, value):
        if name == "backbone":
            object.__setattr__(self, name, value)
        else:
            super().__setattr__(name, value)

    def forward(self, image: torch.Tensor, clamp: bool | None = None) -> torch.Tensor:
        """Predict the transmission layer for a (B, 3, H, W) batch.

        Output is clamped to [0, 1] only when ``clamp`` is true; by default that
        happens in eval mode, so training losses see the raw prediction.
        """
        if image.ndim != 4 or image.shape[1] != 3:
            raise DimensionError(f"expected (B, 3, H, W), got {tuple(image.shape)}")
        if min(image.shape[-2:]) < MIN_NETWORK_SIZE:
            raise DimensionError(f"input {tuple(image.shape[-2:])} below {MIN_NETWORK_SIZE}px")
        multiple = math.lcm(self.config.pad_multiple, max(self.config.pyramid_scales)) if self.pyramid else \
            self.config.pad_multiple
        x, (h, w) = pad_to_multiple(image, multiple)
        if self.config.hypercolumn_layers:
            x_in = self.backbone.hypercolumn(x, self.config.hypercolumn_layers)
        else:
            x_in = x
        f = F.relu(self.head(x_in))
        f = f + self.body_tail(self.blocks(f))
        if self.pyramid is not None:
            f = self.pyramid(f)
        y = self.out(F.relu(self.fuse(f)))
        if self.config.global_skip:
            y = y + x
        y = y[..., :h, :w]
        if clamp is None:
            clamp = not self.training
        return y.clamp(0, 1) if clamp else y


def generator_forward(image: torch.Tensor, model: Generator, clamp: bool | None = None) -> torch.Tensor:
    return model(image, clamp=clamp)


# ---------------------------------------------------------------------------
# discriminator

class Discriminator(nn.Module):
    """Strided patch discriminator; ``forward`` returns one raw score per image (mean over patches)."""

    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = config = config or DiscriminatorConfig()
        layers: list[nn.Module] = []
        in_ch, ch = 3, config.base_width
        for i in range(config.num_layers - 1):
            layers += [nn.Conv2d(in_ch, ch, 4, stride=2, padding=1), nn.LeakyReLU(config.negative_slope)]
            in_ch, ch = ch, min(ch * 2, config.base_width * 8)
        layers.append(nn.Conv2d(in_ch, 1, 3, stride=1, padding=1))
        self.net = nn.Sequential(*layers)
        self.min_size = 2 ** (config.num_layers - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected (B, 3, H, W), got {tuple(x.shape)}")
        if min(x.shape[-2:]) < self.min_size:
            raise DimensionError(f"discriminator needs inputs of at least {self.min_size}px")
        return self.net(x).mean(dim=(1, 2, 3))


def discriminator_score(x: torch.Tensor, disc: Discriminator) -> torch.Tensor:
    return disc(x)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
