"""SI-SNR objective, optimisation loop and held-out evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import ToyScene
from .dsp.stft import Waveform
from .errors import InvalidInput, ShapeError, TrainingDiverged
from .model import DCUCNet, enhance

log = logging.getLogger(__name__)

VARIANTS = ("scale_invariant", "plain_snr")
SI_SNR_CAP_DB = 60.0
LOSS_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    grad_clip: float = 5.0
    seed: int = 0
    checkpoint_dir: str | None = None
    eval_every: int = 0
    si_snr_variant: str = "scale_invariant"
    crop_s: float | None = None
    threads: int = 1

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidInput("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise InvalidInput("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise InvalidInput(f"unknown optimizer {self.optimizer!r}")
        if self.si_snr_variant not in VARIANTS:
            raise InvalidInput(f"unknown si_snr_variant {self.si_snr_variant!r}")


@dataclass
class EvalResult:
    si_snr_db: float
    si_snr_std_db: float
    si_snr_improvement_db: float
    noisy_si_snr_db: float
    num_utterances: int

    def as_lines(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.__dict__.items())


def _check_pair(estimate, target):
    if estimate.shape != target.shape:
        raise ShapeError(f"estimate {estimate.shape} and target {target.shape} differ in shape")


def si_snr(estimate, target, variant: str = "scale_invariant") -> float:
    """SI-SNR (or plain SNR) in dB, capped at +60 dB for a vanishing error."""
    s_hat = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    s = np.asarray(getattr(target, "samples", target), dtype=np.float64)
    _check_pair(s_hat, s)
    if variant == "scale_invariant":
        s_hat = s_hat - s_hat.mean()
        s = s - s.mean()
        if not np.any(s):
            raise InvalidInput("target is zero (after mean removal)")
        s_t = (np.dot(s_hat, s) / np.dot(s, s)) * s
        e = s_hat - s_t
    elif variant == "plain_snr":
        if not np.any(s):
            raise InvalidInput("target is zero")
        s_t = s
        e = s_hat - s
    else:
        raise InvalidInput(f"unknown variant {variant!r}")
    num, den = np.dot(s_t, s_t), np.dot(e, e)
    if den < 1e-12 * num:
        return SI_SNR_CAP_DB
    if num == 0.0:
        return 10.0 * math.log10(LOSS_EPS)
    return float(10.0 * np.log10(num / den))


def si_snr_batch(estimate: torch.Tensor, target: torch.Tensor, variant: str = "scale_invariant"):
    """Differentiable per-example SI-SNR in dB over the last axis (uncapped)."""
    _check_pair(estimate, target)
    if variant == "scale_invariant":
        estimate = estimate - estimate.mean(-1, keepdim=True)
        target = target - target.mean(-1, keepdim=True)
        energy = (target * target).sum(-1, keepdim=True)
        if torch.any(energy == 0):
            raise InvalidInput("target is zero (after mean removal)")
        s_t = (estimate * target).sum(-1, keepdim=True) / energy * target
    elif variant == "plain_snr":
        if torch.any((target * target).sum(-1) == 0):
            raise InvalidInput("target is zero")
        s_t = target
    else:
        raise InvalidInput(f"unknown variant {variant!r}")
    e = estimate - s_t
    ratio = (s_t * s_t).sum(-1) / ((e * e).sum(-1) + LOSS_EPS)
    return 10.0 * torch.log10(ratio + LOSS_EPS)


def si_snr_loss(estimate, target, variant: str = "scale_invariant"):
    return -si_snr_batch(estimate, target, variant).mean()


def _stack_batch(scenes: list[ToyScene], rng, crop_s, dtype):
    noisy, clean, frames = [], [], []
    for sc in scenes:
        x, s, v = sc.noisy.samples, sc.clean.samples, sc.video.frames
        if crop_s:
            spf = sc.noisy.sample_rate / sc.video.fps
            nf = max(1, int(round(crop_s * sc.video.fps)))
            if nf < v.shape[0]:
                f0 = int(rng.integers(0, v.shape[0] - nf + 1))
                a, b = int(round(f0 * spf)), int(round((f0 + nf) * spf))
                x, s, v = x[a:b], s[a:b], v[f0 : f0 + nf]
        noisy.append(x)
        clean.append(s)
        frames.append(v)
    n = min(len(x) for x in noisy)
    nv = min(v.shape[0] for v in frames)
    return (
        torch.from_numpy(np.stack([x[:n] for x in noisy])).to(dtype),
        torch.from_numpy(np.stack([s[:n] for s in clean])).to(dtype),
        torch.from_numpy(np.stack([v[:nv] for v in frames])),
    )


def _grad_norm(params) -> float:
    return math.sqrt(sum(float((p.grad.double() ** 2).sum()) for p in params if p.grad is not None))


def train(model: DCUCNet, scenes: list[ToyScene], cfg: TrainConfig = TrainConfig(),
          history_path=None, on_checkpoint=None):
    """Minimise negative SI-SNR of enhanced vs. clean speech.

    Returns (model, history) where history is a list of dicts with keys
    ``step``, ``loss`` and ``grad_norm``.  ``on_checkpoint(model, step)`` is
    called every ``eval_every`` steps and after the last step.
    """
    if not scenes:
        raise InvalidInput("training corpus is empty")
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    else:
        opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)
    dtype = model.fuse_in.weight.dtype
    history = []
    hist_file = open(history_path, "w", encoding="utf-8") if history_path else None
    model.train()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(scenes))
            for start in range(0, len(order), cfg.batch_size):
                batch = [scenes[i] for i in order[start : start + cfg.batch_size]]
                noisy, clean, frames = _stack_batch(batch, rng, cfg.crop_s, dtype)
                t0 = time.perf_counter()
                opt.zero_grad(set_to_none=True)
                loss = si_snr_loss(model(noisy, frames), clean, cfg.si_snr_variant)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise TrainingDiverged(step, value)
                loss.backward()
                gnorm = _grad_norm(params)
                if cfg.grad_clip and cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                step += 1
                rec = {"step": step, "epoch": epoch, "loss": value, "grad_norm": gnorm}
                history.append(rec)
                if hist_file:
                    hist_file.write(json.dumps(rec) + "\n")
                    hist_file.flush()
                log.info("step %d epoch %d loss %.4f grad_norm %.3f (%.0f ms)", step, epoch,
                         value, gnorm, 1000 * (time.perf_counter() - t0))
                if on_checkpoint and cfg.eval_every and step % cfg.eval_every == 0:
                    on_checkpoint(model, step)
        if on_checkpoint:
            on_checkpoint(model, step)
    finally:
        if hist_file:
            hist_file.close()
        torch.set_num_threads(prev_threads)
    model.eval()
    return model, history


def evaluate(model: DCUCNet, scenes: list[ToyScene], variant: str = "scale_invariant",
             details: list | None = None) -> EvalResult:
    """Mean SI-SNR of enhanced vs. clean speech and its gain over the noisy input.

    If ``details`` is a list, one ``(scene, enhanced waveform, noisy dB, enhanced dB)``
    tuple per utterance is appended to it.
    """
    if not scenes:
        raise InvalidInput("evaluation split is empty")
    enhanced, baseline = [], []
    for sc in scenes:
        out = enhance(sc.noisy, sc.video, model)
        enhanced.append(si_snr(out, sc.clean, variant))
        baseline.append(si_snr(sc.noisy, sc.clean, variant))
        if details is not None:
            details.append((sc, out, baseline[-1], enhanced[-1]))
    enhanced, baseline = np.array(enhanced), np.array(baseline)
    return EvalResult(
        si_snr_db=float(enhanced.mean()),
        si_snr_std_db=float(enhanced.std()),
        si_snr_improvement_db=float((enhanced - baseline).mean()),
        noisy_si_snr_db=float(baseline.mean()),
        num_utterances=len(scenes),
    )
