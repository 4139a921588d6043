"""Ablation arms on a synthetic dataset: train one configuration, score it."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, hfi_lfi_transform
from .model import ModelConfig
from .openset import EvalReport, evaluate_logits
from .train import TrainConfig, TrainResult, train_loop

log = logging.getLogger(__name__)

# desk-scale configuration used by the ablation checks
MICRO_MODEL = ModelConfig(image_size=64, backbone_widths=(8, 16, 16), upsample=2, nc=8, nt=20, nf=4,
                          classes=6)
MICRO_TRAIN = TrainConfig(optimizer="sgd", lr=3e-3, weight_decay=1e-4, momentum=0.9, batch_size=32,
                          epochs=12, model=MICRO_MODEL)


@dataclass
class ArmResult:
    ablation: str
    seed: int
    fixed_p: float | None
    reports: dict[str, EvalReport]
    train: TrainResult
    seconds: float

    def auroc(self, view: str = "test") -> float:
        return self.reports[view].auroc


def eval_run(model, data: Dataset, views=("test",), cutoff: float = 0.25) -> dict[str, EvalReport]:
    """Calibrate on validation knowns, score test images in eval mode.

    ``views`` may include ``"HFI"`` and ``"LFI"``. They filter the normalized
    test tensor, so HFI inputs stay zero-mean instead of being shifted by the
    removed DC term; LFI is the same either way since normalization is affine
    per channel and LFI keeps DC.
    """
    val_x, _, _ = data.arrays("val", known=True, dtype=model.dtype)
    if len(val_x) == 0:
        raise ValueError("dataset has no validation split")
    val_logits = model.predict_logits(val_x)
    reports = {}
    for view in views:
        x, labels, known = data.arrays("test", dtype=model.dtype)
        if len(x) == 0:
            raise ValueError("dataset has no test split")
        if view != "test":
            x = hfi_lfi_transform(x, cutoff, view).astype(model.dtype)
        reports[view] = evaluate_logits(model.predict_logits(x), labels, known, val_logits)
    return reports


def run_arm(data: Dataset, ablation: str = "none", seed: int = 0, fixed_p: float | None = None,
            base: TrainConfig = MICRO_TRAIN, views=("test",)) -> ArmResult:
    cfg = replace(base, seed=seed, fixed_p=fixed_p,
                  model=replace(base.model, ablation=ablation, classes=len(data.known_classes)))
    x, y, _ = data.arrays("train", known=True)
    t0 = time.time()
    result = train_loop(cfg, x, y)
    reports = eval_run(result.model, data, views)
    seconds = time.time() - t0
    log.info("arm %s seed %d fixed_p %s: auroc %.4f (%.1fs)", ablation, seed, fixed_p,
             reports["test"].auroc, seconds)
    return ArmResult(ablation, seed, fixed_p, reports, result, seconds)


def median_auroc(arms: list[ArmResult], view: str = "test") -> float:
    return float(np.median([a.auroc(view) for a in arms]))
