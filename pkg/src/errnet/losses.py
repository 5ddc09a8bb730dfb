"""Training objectives.

All norms are mean-reduced, so the default weights mean the same thing at any
image size.  Losses are computed on the unclamped generator output.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import FEATURE_LOSS_LAYERS, INVARIANT_LAYER, Backbone
from .imaging import DimensionError, MIN_NETWORK_SIZE

LOG_FLOOR = 1e-12


class NumericError(FloatingPointError):
    pass


@dataclass
class LossWeights:
    alpha: float = 0.2
    beta: float = 0.4
    lambda_l: dict[str, float] = field(default_factory=lambda: {l: 0.25 for l in FEATURE_LOSS_LAYERS})
    omega1: float = 1.0
    omega2: float = 0.1
    omega3: float = 0.01
    omega4: float = 0.1
    omega5: float = 0.01

    def __post_init__(self):
        self.lambda_l = dict(self.lambda_l)
        scalars = [self.alpha, self.beta, self.omega1, self.omega2, self.omega3, self.omega4, self.omega5]
        if any(v < 0 for v in scalars) or any(v < 0 for v in self.lambda_l.values()):
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def image_gradients(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward differences along width and height; the replicated last row/column gives zero."""
    gx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    gy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return gx, gy


def pixel_loss(t_hat: torch.Tensor, t: torch.Tensor, w: LossWeights | None = None) -> torch.Tensor:
    w = w or LossWeights()
    _same_shape(t_hat, t)
    gx_h, gy_h = image_gradients(t_hat)
    gx, gy = image_gradients(t)
    mse = (t_hat - t).pow(2).mean()
    grad = (gx_h - gx).abs().mean() + (gy_h - gy).abs().mean()
    return w.alpha * mse + w.beta * grad


def feature_loss(t_hat: torch.Tensor, t: torch.Tensor, backbone: Backbone,
                 w: LossWeights | None = None) -> torch.Tensor:
    w = w or LossWeights()
    _same_shape(t_hat, t)
    layers = [l for l, lam in w.lambda_l.items() if lam != 0]
    if not layers:
        return t_hat.new_zeros(())
    f_hat = backbone.extract(t_hat, layers)
    with torch.no_grad():
        f_ref = backbone.extract(t, layers)
    return sum(w.lambda_l[l] * (f_hat[l] - f_ref[l]).abs().mean() for l in layers)


def relativistic_losses(score_real: torch.Tensor, score_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Generator and discriminator losses from raw scores ``C(T)`` and ``C(T_hat)``.

    With ``D(a, b) = sigmoid(C(a) - C(b))``::

        l_G = -log D(T, T_hat) - log(1 - D(T_hat, T))
        l_D = -log(1 - D(T, T_hat)) - log D(T_hat, T)

    Pairs are formed per sample and averaged over the batch.
    """
    if not (torch.isfinite(score_real).all() and torch.isfinite(score_fake).all()):
        raise NumericError("non-finite discriminator scores")
    d_rf = torch.sigmoid(score_real - score_fake)
    d_fr = torch.sigmoid(score_fake - score_real)
    log = lambda v: torch.log(v.clamp_min(LOG_FLOOR))
    l_g = -log(d_rf) - log(1 - d_fr)
    l_d = -log(1 - d_rf) - log(d_fr)
    return l_g.mean(), l_d.mean()


def adversarial_losses(t_hat: torch.Tensor, t: torch.Tensor, disc) -> tuple[torch.Tensor, torch.Tensor]:
    return relativistic_losses(disc(t), disc(t_hat))


def _center_crop_to(a: torch.Tensor, h: int, w: int) -> torch.Tensor:
    top = (a.shape[-2] - h) // 2
    left = (a.shape[-1] - w) // 2
    return a[..., top:top + h, left:left + w]


def invariant_loss(t_hat: torch.Tensor, t: torch.Tensor, backbone: Backbone,
                   layer: str = INVARIANT_LAYER) -> torch.Tensor:
    """Mean |phi(T) - phi(T_hat)| on the deepest feature; sizes of the two images may differ."""
    for x in (t_hat, t):
        if min(x.shape[-2:]) < MIN_NETWORK_SIZE:
            raise DimensionError(f"input {tuple(x.shape[-2:])} below {MIN_NETWORK_SIZE}px")
    f_hat = backbone.extract(t_hat, [layer])[layer]
    with torch.no_grad():
        f_ref = backbone.extract(t, [layer])[layer]
    h = min(f_hat.shape[-2], f_ref.shape[-2])
    w = min(f_hat.shape[-1], f_ref.shape[-1])
    return (_center_crop_to(f_hat, h, w) - _center_crop_to(f_ref, h, w)).abs().mean()


def aligned_total(t_hat, t, disc, backbone: Backbone, w: LossWeights | None = None, return_parts: bool = False):
    w = w or LossWeights()
    zero = t_hat.new_zeros(())
    parts = {
        "pixel": pixel_loss(t_hat, t, w) if w.omega1 else zero,
        "feat": feature_loss(t_hat, t, backbone, w) if w.omega2 else zero,
        "adv": adversarial_losses(t_hat, t, disc)[0] if w.omega3 else zero,
    }
    total = w.omega1 * parts["pixel"] + w.omega2 * parts["feat"] + w.omega3 * parts["adv"]
    return (total, parts) if return_parts else total


def unaligned_total(t_hat, t, disc, backbone: Backbone, w: LossWeights | None = None, return_parts: bool = False):
    w = w or LossWeights()
    zero = t_hat.new_zeros(())
    parts = {
        "inv": invariant_loss(t_hat, t, backbone) if w.omega4 else zero,
        "adv": _adv_unaligned(t_hat, t, disc) if w.omega5 else zero,
    }
    total = w.omega4 * parts["inv"] + w.omega5 * parts["adv"]
    return (total, parts) if return_parts else total


def _adv_unaligned(t_hat, t, disc):
    # reference may differ in size; scores are per image so this is fine
    return relativistic_losses(disc(t), disc(t_hat))[0]


# ---------------------------------------------------------------------------
# layer sensitivity to misalignment

@dataclass
class SensitivityTable:
    shift: int
    layers: list[str]
    ratios: np.ndarray  # (pairs, layers)
    pixel_ratios: np.ndarray  # (pairs,)

    @property
    def mean(self) -> dict[str, float]:
        return {l: float(self.ratios[:, i].mean()) for i, l in enumerate(self.layers)}

    def fraction_below(self, deep: str, shallow: str) -> float:
        i, j = self.layers.index(deep), self.layers.index(shallow)
        return float((self.ratios[:, i] < self.ratios[:, j]).mean())


def layer_sensitivity_study(images: Sequence[np.ndarray], backbone: Backbone,
                            layers: Sequence[str] = FEATURE_LOSS_LAYERS, shift: int = 10,
                            others: Sequence[np.ndarray] | None = None) -> SensitivityTable:
    """Per layer: mean |phi(T) - phi(shift(T))| over mean |phi(T) - phi(T')| with T' an unrelated image.

    ``others[i]`` is the unrelated partner of ``images[i]``; by default the corpus
    rotated by half its length.
    """
    from .imaging import shift_image, to_tensor

    if len(images) < 10:
        raise ValueError("sensitivity study needs at least 10 images")
    n = len(images)
    if others is None:
        others = [images[(i + n // 2) % n] for i in range(n)]
    layers = list(layers)
    ratios = np.zeros((n, len(layers)))
    pix = np.zeros(n)
    dtype = backbone.dtype
    with torch.no_grad():
        for i, (img, other) in enumerate(zip(images, others)):
            t = to_tensor(img, dtype)
            s = to_tensor(shift_image(img, shift, shift), dtype)
            o = to_tensor(other, dtype)
            ft, fs, fo = backbone.extract(t, layers), backbone.extract(s, layers), backbone.extract(o, layers)
            for j, l in enumerate(layers):
                num = (ft[l] - fs[l]).abs().mean().item()
                den = (ft[l] - fo[l]).abs().mean().item()
                ratios[i, j] = num / den if den > 0 else math.nan
            den = (t - o).abs().mean().item()
            pix[i] = (t - s).abs().mean().item() / den if den > 0 else math.nan
    return SensitivityTable(shift, layers, ratios, pix)
