"""Optimisation loop, checkpoints, unaligned fine-tuning and ablation drivers."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import Backbone
from .imaging import TrainingSample, load_samples, to_image, to_tensor
from .losses import LossWeights, NumericError, aligned_total, pixel_loss, relativistic_losses, unaligned_total
from .metrics import MetricReport, evaluate_samples, format_table
from .network import ARMS, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig

log = logging.getLogger(__name__)

DEFAULT_MILESTONES = ((30, "scale", 0.5), (50, "set", 1e-5))


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    base_lr: float = 1e-4
    # (epoch, "scale" | "set", value), applied in order from that epoch on
    lr_milestones: list = field(default_factory=lambda: [list(m) for m in DEFAULT_MILESTONES])
    batch_size: int = 1
    seed: int = 0
    arm: str = "ERRNet"
    unaligned_fraction: float | None = None  # None: natural share of unaligned samples
    crop_size: int | None = None
    steps_per_epoch: int | None = None  # None: one pass over the data
    disc_lr_scale: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    unaligned_loss: str = "inv"  # "inv" or "pixel" (comparison arm)
    deterministic: bool = True
    checkpoint_every: int = 1  # epochs; 0 disables per-epoch files

    def __post_init__(self):
        self.lr_milestones = [list(m) for m in self.lr_milestones]
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        for ep, kind, _ in self.lr_milestones:
            if not 0 <= ep < self.epochs:
                raise ValueError(f"lr milestone at epoch {ep} outside [0, {self.epochs})")
            if kind not in ("scale", "set"):
                raise ValueError(f"unknown milestone kind {kind!r}")
        if self.arm not in ARMS:
            raise ValueError(f"unknown arm {self.arm!r}")
        if self.unaligned_fraction is not None and not 0 <= self.unaligned_fraction <= 1:
            raise ValueError("unaligned_fraction must lie in [0, 1]")
        if self.unaligned_loss not in ("inv", "pixel"):
            raise ValueError(f"unknown unaligned_loss {self.unaligned_loss!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    lr = config.base_lr
    for ep, kind, value in sorted(config.lr_milestones, key=lambda m: m[0]):
        if epoch >= ep:
            lr = lr * value if kind == "scale" else value
    return lr


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# checkpoints

def atomic_save(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    required = {"generator", "discriminator", "generator_config", "train_config", "loss_weights"}
    if not isinstance(ckpt, dict) or not required <= ckpt.keys():
        raise CheckpointError(f"{path} is not a training checkpoint (missing {required - set(ckpt or {})})")
    return ckpt


def _load_state(module: torch.nn.Module, state: dict, what: str) -> None:
    own = module.state_dict()
    problems = [f"{k}: missing" for k in own if k not in state]
    problems += [f"{k}: checkpoint {tuple(state[k].shape)} vs model {tuple(v.shape)}"
                 for k, v in own.items() if k in state and state[k].shape != v.shape]
    problems += [f"{k}: unexpected" for k in state if k not in own]
    if problems:
        raise CheckpointError(f"{what} parameters do not match:\n  " + "\n  ".join(problems[:10]))
    module.load_state_dict(state)


def load_generator(path_or_ckpt, backbone: Backbone | None = None) -> Generator:
    ckpt = load_checkpoint(path_or_ckpt) if isinstance(path_or_ckpt, (str, Path)) else path_or_ckpt
    gcfg = GeneratorConfig(**ckpt["generator_config"])
    if gcfg.hypercolumn_layers and backbone is None:
        from .backbone import get_backbone
        backbone = get_backbone(ckpt.get("backbone"))
    gen = Generator(gcfg, backbone)
    _load_state(gen, ckpt["generator"], "generator")
    return gen.eval()


def predictor(model: Generator):
    """numpy HxWx3 -> numpy HxWx3 inference closure (clamped output)."""
    def predict(img: np.ndarray) -> np.ndarray:
        model.eval()
        with torch.no_grad():
            return to_image(model(to_tensor(img, next(model.parameters()).dtype), clamp=True))
    return predict


# ---------------------------------------------------------------------------
# trainer

def _crop_pair(s: TrainingSample, size: int | None, rng: np.random.Generator):
    a, b = s.input, s.transmission
    if size is None:
        return a, b
    if a.shape == b.shape:
        h, w = a.shape[:2]
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        return a[y:y + size, x:x + size], b[y:y + size, x:x + size]

    def center(img):
        h, w = img.shape[:2]
        y, x = (h - size) // 2, (w - size) // 2
        return img[y:y + size, x:x + size]
    return center(a), center(b)


class Trainer:
    def __init__(self, config: TrainConfig, gen_config: GeneratorConfig, backbone: Backbone,
                 weights: LossWeights | None = None, disc_config: DiscriminatorConfig | None = None,
                 run_dir=None):
        self.config = config
        self.weights = weights or LossWeights()
        self.backbone = backbone
        if config.deterministic:
            set_deterministic(config.seed)
        else:
            torch.manual_seed(config.seed)
        self.gen_config = gen_config.with_arm(config.arm)
        self.disc_config = disc_config or DiscriminatorConfig()
        self.generator = Generator(self.gen_config, backbone)
        self.discriminator = Discriminator(self.disc_config)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=config.base_lr, betas=config.betas,
                                      eps=config.eps)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=config.base_lr * config.disc_lr_scale,
                                      betas=config.betas, eps=config.eps)
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.step = 0
        self.history: list[dict] = []
        self.run_dir = Path(run_dir) if run_dir else None

    # -- schedule ----------------------------------------------------------
    def set_lr(self, epoch: int) -> float:
        lr = lr_at(min(epoch, self.config.epochs - 1), self.config)
        for g in self.opt_g.param_groups:
            g["lr"] = lr
        for g in self.opt_d.param_groups:
            g["lr"] = lr * self.config.disc_lr_scale
        return lr

    # -- single updates ----------------------------------------------------
    def _adv_weight(self, aligned: bool) -> float:
        return self.weights.omega3 if aligned else self.weights.omega5

    def discriminator_step(self, inp: torch.Tensor, target: torch.Tensor) -> float:
        self.generator.train()
        with torch.no_grad():
            fake = self.generator(inp, clamp=False)
        try:
            _, l_d = relativistic_losses(self.discriminator(target), self.discriminator(fake))
        except NumericError:
            l_d = fake.new_tensor(float("nan"))
        self._check(l_d, {"adv_D": l_d}, inp, target)
        self.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        self.opt_d.step()
        return l_d.item()

    def _generator_objective(self, t_hat, target, aligned: bool):
        if aligned:
            return aligned_total(t_hat, target, self.discriminator, self.backbone, self.weights, return_parts=True)
        w = self.weights
        if self.config.unaligned_loss == "pixel":
            parts = {"pixel": pixel_loss(t_hat, target, w)}
            parts["adv"] = relativistic_losses(self.discriminator(target), self.discriminator(t_hat))[0] \
                if w.omega5 else t_hat.new_zeros(())
            return w.omega1 * parts["pixel"] + w.omega5 * parts["adv"], parts
        return unaligned_total(t_hat, target, self.discriminator, self.backbone, w, return_parts=True)

    def generator_step(self, inp: torch.Tensor, target: torch.Tensor, aligned: bool) -> dict[str, float]:
        self.generator.train()
        for p in self.discriminator.parameters():
            p.requires_grad_(False)
        try:
            t_hat = self.generator(inp, clamp=False)
            try:
                total, parts = self._generator_objective(t_hat, target, aligned)
            except NumericError:
                total = t_hat.new_tensor(float("nan"))
                parts = {"total": total}
            self._check(total, parts, inp, target)
            self.opt_g.zero_grad(set_to_none=True)
            total.backward()
            self.opt_g.step()
        finally:
            for p in self.discriminator.parameters():
                p.requires_grad_(True)
        out = {k: float(v.detach()) for k, v in parts.items()}
        out["total"] = total.item()
        return out

    def train_step(self, inp, target, aligned: bool) -> dict[str, float]:
        rec = {"epoch": self.epoch, "step": self.step, "aligned": int(aligned)}
        if self._adv_weight(aligned) > 0:
            rec["adv_D"] = self.discriminator_step(inp, target)
        rec.update(self.generator_step(inp, target, aligned))
        self.step += 1
        self.history.append(rec)
        return rec

    def _check(self, total, parts, inp, target):
        if torch.isfinite(total).all():
            return
        dump = {"step": self.step, "epoch": self.epoch, "input": inp.detach().cpu(), "target": target.detach().cpu(),
                "parts": {k: float(v) for k, v in parts.items()}}
        where = ""
        if self.run_dir is not None:
            path = self.run_dir / f"nonfinite_step{self.step}.pt"
            atomic_save(dump, path)
            where = f"; diagnostics in {path}"
        raise NumericError(f"non-finite loss at step {self.step}: {dump['parts']}{where}")

    # -- data ----------------------------------------------------------------
    def _batches(self, samples: Sequence[TrainingSample], force_unaligned: bool = False):
        pools = {True: [], False: []}
        for s in samples:
            pools[bool(s.aligned) and not force_unaligned].append(s)
        n = len(samples)
        frac = self.config.unaligned_fraction
        if frac is None:
            frac = len(pools[False]) / n
        queues = {True: [], False: []}
        steps = self.config.steps_per_epoch or math.ceil(n / self.config.batch_size)
        for _ in range(steps):
            if not pools[True]:
                aligned = False
            elif not pools[False]:
                aligned = True
            else:
                aligned = bool(self.rng.random() >= frac)
            batch = []
            for _ in range(self.config.batch_size):
                if not queues[aligned]:
                    queues[aligned] = [pools[aligned][i] for i in self.rng.permutation(len(pools[aligned]))]
                batch.append(queues[aligned].pop())
            crops = [_crop_pair(s, self.config.crop_size, self.rng) for s in batch]
            yield to_tensor([c[0] for c in crops]), to_tensor([c[1] for c in crops]), aligned

    # -- loops ---------------------------------------------------------------
    def fit(self, samples: Sequence[TrainingSample], epochs: int | None = None, force_unaligned: bool = False,
            max_steps: int | None = None) -> "Trainer":
        if not samples:
            raise ValueError("training set is empty")
        if not force_unaligned and self.config.unaligned_fraction not in (None, 1.0) \
                and not any(s.aligned for s in samples):
            raise ValueError("no aligned samples although unaligned_fraction < 1")
        end = self.epoch + (epochs if epochs is not None else self.config.epochs - self.epoch)
        while self.epoch < end:
            self.set_lr(self.epoch)
            for inp, target, aligned in self._batches(samples, force_unaligned):
                if max_steps is not None and self.step >= max_steps:
                    return self
                self.train_step(inp, target, aligned)
            self.epoch += 1
            if self.run_dir is not None and self.config.checkpoint_every and \
                    self.epoch % self.config.checkpoint_every == 0:
                self.save(self.run_dir / "checkpoints" / f"epoch_{self.epoch:03d}.pt")
                self.write_history(self.run_dir / "losses.csv")
        return self

    # -- persistence ---------------------------------------------------------
    def state(self) -> dict:
        return {
            "generator": copy.deepcopy(self.generator.state_dict()),
            "discriminator": copy.deepcopy(self.discriminator.state_dict()),
            "opt_g": copy.deepcopy(self.opt_g.state_dict()),
            "opt_d": copy.deepcopy(self.opt_d.state_dict()),
            "epoch": self.epoch,
            "step": self.step,
            "train_config": self.config.to_dict(),
            "generator_config": self.gen_config.to_dict(),
            "disc_config": self.disc_config.to_dict(),
            "loss_weights": self.weights.to_dict(),
            "history": list(self.history),
            "rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "backbone": self.backbone.source,
        }

    def save(self, path) -> Path:
        atomic_save(self.state(), path)
        return Path(path)

    @classmethod
    def from_checkpoint(cls, ckpt, backbone: Backbone, config: TrainConfig | None = None,
                        weights: LossWeights | None = None, run_dir=None) -> "Trainer":
        if isinstance(ckpt, (str, Path)):
            ckpt = load_checkpoint(ckpt)
        config = config or TrainConfig(**ckpt["train_config"])
        weights = weights or LossWeights.from_dict(ckpt["loss_weights"])
        gcfg = GeneratorConfig(**ckpt["generator_config"])
        config = replace(config, arm=gcfg.arm)
        tr = cls(config, gcfg, backbone, weights, DiscriminatorConfig(**ckpt.get("disc_config", {})), run_dir)
        _load_state(tr.generator, ckpt["generator"], "generator")
        _load_state(tr.discriminator, ckpt["discriminator"], "discriminator")
        tr.opt_g.load_state_dict(ckpt["opt_g"])
        tr.opt_d.load_state_dict(ckpt["opt_d"])
        tr.epoch = ckpt["epoch"]
        tr.step = ckpt["step"]
        tr.history = list(ckpt.get("history", []))
        if "rng" in ckpt:
            tr.rng.bit_generator.state = ckpt["rng"]
        if "torch_rng" in ckpt:
            torch.set_rng_state(ckpt["torch_rng"])
        return tr

    def write_history(self, path) -> None:
        if not self.history:
            return
        keys = sorted({k for r in self.history for k in r}, key=lambda k: (k not in ("epoch", "step"), k))
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=keys)
            wr.writeheader()
            wr.writerows(self.history)

    def predict(self, img: np.ndarray) -> np.ndarray:
        return predictor(self.generator)(img)

    def evaluate(self, samples: Sequence[TrainingSample], dataset: str = "") -> MetricReport:
        return evaluate_samples(samples, self.predict, dataset, self.gen_config.arm)[0]


def _as_samples(data) -> list[TrainingSample]:
    if isinstance(data, (str, Path)):
        return load_samples(data)
    return list(data)


def train(config: TrainConfig, data, weights: LossWeights | None = None, backbone: Backbone | None = None,
          gen_config: GeneratorConfig | None = None, disc_config: DiscriminatorConfig | None = None,
          run_dir=None) -> dict:
    """Train from scratch; returns the final checkpoint dict."""
    if backbone is None:
        from .backbone import get_backbone
        backbone = get_backbone()
    samples = _as_samples(data)
    tr = Trainer(config, gen_config or GeneratorConfig(), backbone, weights, disc_config, run_dir)
    tr.fit(samples)
    if run_dir is not None:
        tr.write_history(Path(run_dir) / "losses.csv")
    return tr.state()


def finetune_unaligned(checkpoint, data, weights: LossWeights | None = None, backbone: Backbone | None = None,
                       epochs: int = 1, steps: int | None = None, run_dir=None) -> dict:
    """Continue training with the unaligned objective only, optimizer state carried over."""
    if backbone is None:
        from .backbone import get_backbone
        backbone = get_backbone()
    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    tr = Trainer.from_checkpoint(ckpt, backbone, weights=weights, run_dir=run_dir)
    samples = _as_samples(data)
    if steps == 0 or epochs == 0:
        return tr.state()
    start = tr.step
    tr.config = replace(tr.config, epochs=max(tr.config.epochs, tr.epoch + epochs), unaligned_loss="inv")
    tr.fit(samples, epochs=epochs, force_unaligned=True, max_steps=None if steps is None else start + steps)
    return tr.state()


# ---------------------------------------------------------------------------
# ablations

@dataclass
class AblationResult:
    arm: str
    report: MetricReport | None
    checkpoint: dict | None = None
    error: str | None = None


def run_ablation(arms: Sequence[str], config: TrainConfig, train_data, eval_data, backbone: Backbone,
                 gen_config: GeneratorConfig | None = None, weights: LossWeights | None = None,
                 dataset: str = "synthetic", run_dir=None) -> list[AblationResult]:
    """Train each architecture arm under the same config and evaluate it on ``eval_data``."""
    train_samples = _as_samples(train_data)
    eval_samples = _as_samples(eval_data)
    results = []
    for arm in arms:
        sub = Path(run_dir) / arm.replace("+", "_") if run_dir else None
        try:
            tr = Trainer(replace(config, arm=arm), gen_config or GeneratorConfig(), backbone, weights,
                         run_dir=sub)
            tr.fit(train_samples)
            rep = tr.evaluate(eval_samples, dataset)
            rep.method = arm
            results.append(AblationResult(arm, rep, tr.state()))
        except Exception as exc:  # one failing arm must not sink the comparison
            log.exception("arm %s failed", arm)
            results.append(AblationResult(arm, None, error=f"{type(exc).__name__}: {exc}"))
    return results


UNALIGNED_ARMS = ("aligned-only", "unaligned-l_pixel", "unaligned-l_inv")


def run_unaligned_ablation(pretrained: dict, aligned: Sequence[TrainingSample], unaligned: Sequence[TrainingSample],
                           eval_data: Sequence[TrainingSample], backbone: Backbone, steps: int,
                           weights: LossWeights | None = None, arms: Sequence[str] = UNALIGNED_ARMS,
                           dataset: str = "held-out") -> list[AblationResult]:
    """Continue a pretrained checkpoint on aligned data with/without extra unaligned pairs.

    The unaligned pairs are supervised either by the pixel loss or by the
    alignment-invariant objective.
    """
    results = []
    for arm in arms:
        try:
            tr = Trainer.from_checkpoint(pretrained, backbone, weights=weights)
            data = list(aligned) if arm == "aligned-only" else list(aligned) + list(unaligned)
            loss = "pixel" if arm == "unaligned-l_pixel" else "inv"
            tr.config = replace(tr.config, epochs=tr.epoch + 1, lr_milestones=[], unaligned_fraction=None,
                                unaligned_loss=loss, steps_per_epoch=steps)
            tr.fit(data, epochs=1)
            rep = tr.evaluate(eval_data, dataset)
            rep.method = arm
            results.append(AblationResult(arm, rep, tr.state()))
        except Exception as exc:
            log.exception("arm %s failed", arm)
            results.append(AblationResult(arm, None, error=f"{type(exc).__name__}: {exc}"))
    return results


def ablation_table(results: Sequence[AblationResult]) -> str:
    reports = [r.report for r in results if r.report is not None]
    text = format_table(reports) if reports else "(no successful arms)"
    failed = [f"{r.arm}: {r.error}" for r in results if r.error]
    if failed:
        text += "\nfailed arms:\n  " + "\n  ".join(failed)
    return text
