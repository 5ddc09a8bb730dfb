"""Desk-scale experiment recipes shared by ``scripts/`` and the acceptance suite.

Everything runs on procedural 64x64 scenes with a reduced generator so a single
CPU finishes in minutes.  They check orderings, not the published numbers.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import Backbone
from .imaging import misalign_sample, procedural_scene, synthetic_corpus
from .losses import SensitivityTable, layer_sensitivity_study
from .metrics import psnr
from .network import GeneratorConfig
from .training import (
    AblationResult,
    TrainConfig,
    Trainer,
    run_ablation,
    run_unaligned_ablation,
)

log = logging.getLogger(__name__)

DESK_SIZE = 64
DESK_LR = 3e-4


def desk_generator(width: int = 64, num_blocks: int = 6) -> GeneratorConfig:
    return GeneratorConfig(width=width, num_blocks=num_blocks, cwc_reduction=16)


def mean_psnr(predict, samples) -> float:
    return float(np.mean([psnr(predict(s.input) if predict else s.input, s.transmission) for s in samples]))


@dataclass
class OverfitResult:
    identity_psnr: float
    trained_psnr: float
    losses: list[float] = field(repr=False)
    seconds: float = 0.0

    @property
    def gain(self) -> float:
        return self.trained_psnr - self.identity_psnr


def overfit_smoke(backbone: Backbone, n_pairs: int = 8, steps: int = 200, seed: int = 1,
                  lr: float = DESK_LR) -> OverfitResult:
    data = synthetic_corpus(n_pairs, DESK_SIZE, seed=seed)
    cfg = TrainConfig(epochs=-(-steps // n_pairs), lr_milestones=[], base_lr=lr, steps_per_epoch=n_pairs, seed=seed)
    tr = Trainer(cfg, desk_generator(), backbone)
    t0 = time.time()
    tr.fit(data, max_steps=steps)
    return OverfitResult(mean_psnr(None, data), mean_psnr(tr.predict, data),
                         [h["total"] for h in tr.history], time.time() - t0)


def desk_schedule(steps: int, lr: float = DESK_LR, seed: int = 0, epochs: int = 6) -> TrainConfig:
    """The full-length recipe compressed into ``steps``: halve at half way, lr/10 for the last sixth."""
    return TrainConfig(epochs=epochs, base_lr=lr, steps_per_epoch=max(1, steps // epochs), seed=seed,
                       lr_milestones=[[epochs // 2, "scale", 0.5], [epochs * 5 // 6, "set", lr / 10]])


def desk_architecture_study(backbone: Backbone, arms=("BaseNet", "ERRNet"), n_train: int = 64, n_eval: int = 16,
                            steps: int = 1200, seed: int = 2, lr: float = DESK_LR) -> list[AblationResult]:
    """Architecture arms trained with identical budgets, evaluated on held-out synthetic pairs."""
    train_set = synthetic_corpus(n_train, DESK_SIZE, seed=seed)
    eval_set = synthetic_corpus(n_eval, DESK_SIZE, seed=seed + 1000)
    cfg = replace(desk_schedule(steps, lr, seed), checkpoint_every=0)
    return run_ablation(arms, cfg, train_set, eval_set, backbone, desk_generator(), dataset="synthetic")


@dataclass
class UnalignedStudy:
    pretrained_psnr: float
    results: list[AblationResult]

    def psnr(self, arm: str) -> float:
        for r in self.results:
            if r.arm == arm and r.report is not None:
                return r.report.aggregate["psnr"]
        raise KeyError(arm)


def desk_misalignment_study(backbone: Backbone, n_total: int = 200, n_unaligned: int = 80, n_eval: int = 20,
                pretrain_steps: int = 400, finetune_steps: int = 400, max_shift: int = 10, seed: int = 3,
                lr: float = DESK_LR) -> UnalignedStudy:
    """Pretrain on the aligned part, then continue with the misaligned part under l_pixel vs l_inv."""
    corpus = synthetic_corpus(n_total, DESK_SIZE, seed=seed)
    aligned = corpus[: n_total - n_unaligned]
    unaligned = [misalign_sample(s, max_shift, seed=seed * 7919 + i) for i, s in enumerate(corpus[len(aligned):])]
    eval_set = synthetic_corpus(n_eval, DESK_SIZE, seed=seed + 1000)
    cfg = TrainConfig(epochs=1, lr_milestones=[], base_lr=lr, steps_per_epoch=pretrain_steps, seed=seed)
    tr = Trainer(cfg, desk_generator(), backbone)
    tr.fit(aligned)
    pre = tr.evaluate(eval_set).aggregate["psnr"]
    results = run_unaligned_ablation(tr.state(), aligned, unaligned, eval_set, backbone, finetune_steps)
    return UnalignedStudy(pre, results)


def sensitivity_corpus(n: int = 50, size: int = 128, seed: int = 0) -> list[np.ndarray]:
    return [procedural_scene(size, seed=seed * 10007 + i) for i in range(n)]


def sensitivity_sweep(backbone: Backbone, images, shifts=(0, 5, 10, 20), layers=None) -> dict[int, SensitivityTable]:
    kwargs = {} if layers is None else {"layers": layers}
    return {s: layer_sensitivity_study(images, backbone, shift=s, **kwargs) for s in shifts}
