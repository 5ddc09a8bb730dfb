"""Image I/O, synthetic reflection compositing and misalignment simulation.

Images on this side of the package are numpy ``float32`` arrays of shape
``(H, W, 3)`` with values in ``[0, 1]``.  ``to_tensor`` / ``to_image`` convert
to and from the ``(B, 3, H, W)`` torch layout used by the network.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
import torch
from scipy import ndimage

MAX_SUPPORTED_SHIFT = 20
MIN_NETWORK_SIZE = 32


class DimensionError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


class MisalignmentPolicyWarning(UserWarning):
    pass


@dataclass
class SynthesisParams:
    blur_sigma_range: tuple[float, float] = (2.0, 5.0)
    reflection_weight_range: tuple[float, float] = (0.6, 1.0)
    crop_size: int = 224
    clip_mode: str = "subtract-adapt"
    # overrides the gaussian when set; must be a 2-D array
    blur_kernel: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        lo, hi = self.blur_sigma_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad blur_sigma_range {self.blur_sigma_range}")
        lo, hi = self.reflection_weight_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"reflection_weight_range must lie in (0, 1], got {self.reflection_weight_range}")
        if self.clip_mode not in ("subtract-adapt", "hard-clip"):
            raise ValueError(f"unknown clip_mode {self.clip_mode!r}")
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")


@dataclass
class TrainingSample:
    input: np.ndarray
    transmission: np.ndarray
    reflection: np.ndarray | None = None
    aligned: bool = True
    name: str = ""

    def __post_init__(self):
        if self.aligned and self.input.shape != self.transmission.shape:
            raise DimensionError(
                f"aligned sample needs equal shapes, got {self.input.shape} vs {self.transmission.shape}")


def check_image(img: np.ndarray, min_size: int = 1) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected an HxWx3 image, got shape {img.shape}")
    if img.shape[0] < min_size or img.shape[1] < min_size:
        raise DimensionError(f"image {img.shape[:2]} smaller than {min_size}x{min_size}")
    return img


# ---------------------------------------------------------------------------
# I/O

def load_image(path, target_range: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """Read an 8- or 16-bit RGB(A) raster and map it linearly onto ``target_range``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"could not decode image: {path}")
    if raw.ndim != 3 or raw.shape[2] not in (3, 4):
        raise ImageFormatError(f"{path} is not an RGB image (shape {raw.shape})")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageFormatError(f"{path}: unsupported bit depth {raw.dtype}")
    rgb = cv2.cvtColor(raw[..., :3], cv2.COLOR_BGR2RGB)
    lo, hi = target_range
    return (rgb.astype(np.float64) / scale * (hi - lo) + lo).astype(np.float32)


def save_image(path, img: np.ndarray) -> None:
    """Write an 8-bit PNG, clipping to [0, 1] first."""
    img = check_image(np.asarray(img))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    u8 = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(u8, cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write {path}")


def save_tensor(path, arr: np.ndarray) -> None:
    """Lossless float container (``.npy``) for intermediate results."""
    np.save(Path(path), np.asarray(arr), allow_pickle=False)


def load_tensor(path) -> np.ndarray:
    return np.load(Path(path), allow_pickle=False)


@dataclass
class ManifestEntry:
    input_path: Path
    target_path: Path
    aligned: bool


def read_manifest(path) -> list[ManifestEntry]:
    """Parse ``input<TAB>target<TAB>aligned`` lines; paths are relative to the manifest."""
    path = Path(path)
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        flag = parts[2].lower()
        if flag not in ("1", "0", "true", "false"):
            raise ValueError(f"{path}:{lineno}: bad aligned flag {parts[2]!r}")
        entries.append(ManifestEntry(root / parts[0], root / parts[1], flag in ("1", "true")))
    return entries


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    path = Path(path)
    root = path.parent
    lines = ["# input\ttarget\taligned"]
    for e in entries:
        lines.append(f"{os.path.relpath(e.input_path, root)}\t{os.path.relpath(e.target_path, root)}\t{int(e.aligned)}")
    path.write_text("\n".join(lines) + "\n")


def load_samples(manifest_path) -> list[TrainingSample]:
    return [
        TrainingSample(load_image(e.input_path), load_image(e.target_path), aligned=e.aligned,
                       name=e.input_path.stem)
        for e in read_manifest(manifest_path)
    ]


# ---------------------------------------------------------------------------
# tensor conversion

def to_tensor(img: np.ndarray | Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    if isinstance(img, np.ndarray) and img.ndim == 3:
        img = [img]
    batch = np.stack([check_image(np.asarray(i)) for i in img])
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2))).to(dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    """First image of a ``(B, 3, H, W)`` tensor (or a ``(3, H, W)`` tensor) as HxWx3."""
    t = t.detach().cpu()
    if t.ndim == 4:
        t = t[0]
    return t.permute(1, 2, 0).numpy().astype(np.float32)


# ---------------------------------------------------------------------------
# synthesis

def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img.copy()
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")


def convolve_image(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2-D convolution with symmetric (reflect) boundary."""
    kernel = np.asarray(kernel, dtype=np.float64)
    out = np.empty_like(img, dtype=np.float64)
    for c in range(img.shape[2]):
        out[..., c] = ndimage.convolve(img[..., c].astype(np.float64), kernel, mode="reflect")
    return out


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise DimensionError(f"source {h}x{w} smaller than crop {size}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return img[y:y + size, x:x + size]


def composite(transmission: np.ndarray, reflection: np.ndarray, mode: str = "subtract-adapt"):
    """Blend a (pre-blurred, pre-scaled) reflection onto the transmission.

    Returns ``(input, reflection_used)``.  In ``subtract-adapt`` mode the mean
    per-channel overflow above 1 is removed from the reflection before clipping.
    """
    t = transmission.astype(np.float64)
    r = reflection.astype(np.float64)
    if mode == "subtract-adapt":
        mix = t + r
        over = mix > 1
        for c in range(3):
            mask = over[..., c]
            if mask.any():
                r[..., c] = r[..., c] - (mix[..., c][mask] - 1).mean()
        r = np.clip(r, 0, 1)
    elif mode != "hard-clip":
        raise ValueError(f"unknown clip mode {mode!r}")
    return np.clip(t + r, 0, 1), r


def synthesize_pair(T_src: np.ndarray, R_src: np.ndarray, params: SynthesisParams | None = None,
                    seed: int = 0) -> TrainingSample:
    params = params or SynthesisParams()
    check_image(T_src, params.crop_size)
    check_image(R_src, params.crop_size)
    rng = np.random.default_rng(seed)
    t = random_crop(T_src, params.crop_size, rng).astype(np.float64)
    r = random_crop(R_src, params.crop_size, rng).astype(np.float64)
    sigma = rng.uniform(*params.blur_sigma_range)
    weight = rng.uniform(*params.reflection_weight_range)
    if params.blur_kernel is not None:
        r = convolve_image(r, params.blur_kernel)
    else:
        r = gaussian_blur(r, sigma)
    mixed, r_used = composite(t, weight * r, params.clip_mode)
    return TrainingSample(
        input=mixed.astype(np.float32),
        transmission=t.astype(np.float32),
        reflection=r_used.astype(np.float32),
        aligned=True,
    )


# ---------------------------------------------------------------------------
# misalignment

def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation: ``out[y, x] = img[y - dy, x - dx]`` with edge replication."""
    h, w = img.shape[:2]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[ys[:, None], xs[None, :]]


def sample_shift(max_shift: int, seed: int) -> tuple[int, int]:
    rng = np.random.default_rng(seed)
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    return int(dy), int(dx)


def random_misalign(T: np.ndarray, max_shift: int = 10, seed: int = 0, strict: bool = False) -> np.ndarray:
    if max_shift < 0:
        raise ValueError("max_shift must be non-negative")
    if max_shift > MAX_SUPPORTED_SHIFT:
        msg = f"max_shift={max_shift} exceeds the supported bound of {MAX_SUPPORTED_SHIFT} px"
        if strict:
            raise ValueError(msg)
        warnings.warn(msg, MisalignmentPolicyWarning, stacklevel=2)
    dy, dx = sample_shift(max_shift, seed)
    return shift_image(T, dy, dx)


# ---------------------------------------------------------------------------
# procedural source scenes (no natural-image corpus ships with the package)

def procedural_scene(size: int | tuple[int, int] = 224, seed: int = 0) -> np.ndarray:
    """Random piecewise-smooth RGB scene: gradient backdrop, shapes, stripes, and fine texture."""
    h, w = (size, size) if isinstance(size, int) else size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = c0 + (c1 - c0) * ramp[..., None]

    for _ in range(int(rng.integers(4, 10))):
        color = rng.uniform(0, 1, size=3)
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.05, 0.35, size=2)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[mask] = color

    freq = rng.uniform(8, 30)
    phase = rng.uniform(0, 2 * np.pi)
    theta = rng.uniform(0, np.pi)
    stripes = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    sy, sx = rng.uniform(0, 0.6, size=2)
    band = (yy >= sy) & (yy <= sy + 0.4) & (xx >= sx) & (xx <= sx + 0.4)
    img[band] += 0.15 * stripes[band][:, None]

    img += 0.03 * ndimage.gaussian_filter(rng.standard_normal((h, w, 3)), sigma=(0.7, 0.7, 0))
    return np.clip(img, 0, 1).astype(np.float32)


def synthetic_corpus(n: int, size: int = 64, seed: int = 0, params: SynthesisParams | None = None,
                     source_size: int | None = None) -> list[TrainingSample]:
    """``n`` aligned synthetic pairs composited from procedural scenes."""
    params = params or SynthesisParams(crop_size=size)
    src = source_size or size + 16
    samples = []
    for i in range(n):
        t_src = procedural_scene(src, seed=seed * 100003 + 2 * i)
        r_src = procedural_scene(src, seed=seed * 100003 + 2 * i + 1)
        s = synthesize_pair(t_src, r_src, params, seed=seed * 100003 + i)
        s.name = f"syn{i:04d}"
        samples.append(s)
    return samples


def misalign_sample(sample: TrainingSample, max_shift: int = 10, seed: int = 0) -> TrainingSample:
    """Turn an aligned pair into an unaligned one by translating its target."""
    return TrainingSample(
        input=sample.input,
        transmission=random_misalign(sample.transmission, max_shift, seed),
        reflection=None,
        aligned=False,
        name=sample.name,
    )
