"""Rate-distortion losses and the four-stage progressive training schedule."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence

import torch
from torch import Tensor

from .bottleneck import RateEstimate, rate_bits
from .flow import warp
from .metrics import max_scales, msssim
from .model import (FINETUNE_PAIRS, STAGES, CodecModel, check_lambda, clone_model,
                    normalize_metric, save_checkpoint)

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "stage", "lr", "loss", "distortion", "rate_m_bpp", "rate_y_bpp")


class TrainingDiverged(RuntimeError):
    """Raised when a loss becomes NaN or infinite."""


# -- losses -------------------------------------------------------------------

def distortion(x: Tensor, x_hat: Tensor, metric: str = "mse", scales: Optional[int] = None) -> Tensor:
    """MSE, or ``1 - MS-SSIM`` with as many scales as the frame size allows (max 5)."""
    metric = normalize_metric(metric)
    if metric == "mse":
        if x.shape != x_hat.shape:
            raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
        return torch.mean((x - x_hat) ** 2)
    if scales is None:
        scales = max_scales(*x.shape[-2:])
    return 1.0 - msssim(x, x_hat, scales=scales)


def _bpp(rate, x: Tensor) -> Tensor:
    if isinstance(rate, RateEstimate):
        b = x.shape[0] if x.dim() == 4 else 1
        return rate.total_bits / (b * x.shape[-2] * x.shape[-1])
    return torch.as_tensor(rate, dtype=x.dtype)


def loss_me(x_t: Tensor, x_ref: Tensor, flow: Tensor) -> Tensor:
    """Warping loss for motion estimation: MSE between ``x_t`` and the warped reference."""
    return distortion(x_t, warp(x_ref, flow), "mse")


def loss_m(x_t: Tensor, x_ref: Tensor, flow_hat: Tensor, rate_m, lam: float,
           metric: str = "mse") -> Tensor:
    """``lam * D(x_t, warp(x_ref, flow_hat)) + R(m_hat)``.

    Rates may be a :class:`RateEstimate` (converted to bits per pixel of
    ``x_t``) or an already-normalized bpp value.
    """
    return lam * distortion(x_t, warp(x_ref, flow_hat), metric) + _bpp(rate_m, x_t)


def loss_mc(x_t: Tensor, x_bar: Tensor, rate_m, lam: float, metric: str = "mse") -> Tensor:
    return lam * distortion(x_t, x_bar, metric) + _bpp(rate_m, x_t)


def loss_total(x_t: Tensor, x_hat: Tensor, rate_m, rate_y, lam: float, metric: str = "mse",
               scales: Optional[int] = None) -> Tensor:
    return lam * distortion(x_t, x_hat, metric, scales) + _bpp(rate_m, x_t) + _bpp(rate_y, x_t)


# -- schedule -----------------------------------------------------------------

@dataclass
class TrainingSchedule:
    """Learning rates, convergence rule and step budgets for each stage.

    A stage has converged when the mean loss over the latest ``window``
    steps improves on the previous window's mean by less than
    ``min_rel_improvement`` (relative). Stage ``ALL`` then divides the
    learning rate by 10 and continues until it converges at ``min_lr``.
    ``max_steps`` caps each stage; in stage ``ALL`` it caps every
    learning-rate level separately. ``prior_lr_scale`` multiplies the
    learning rate of the two factorized priors (1.0 keeps one shared rate).
    """

    lr: float = 1e-4
    min_lr: float = 1e-6
    window: int = 500
    min_rel_improvement: float = 1e-3
    max_steps: Dict[str, int] = field(
        default_factory=lambda: {s: 200_000 for s in STAGES})
    stages: Sequence[str] = STAGES
    lr_overrides: Dict[str, float] = field(default_factory=dict)
    prior_lr_scale: float = 1.0

    def __post_init__(self):
        order = [STAGES.index(s) for s in self.stages]
        if order != sorted(order) or len(set(order)) != len(order):
            raise ValueError(f"stages must follow the order {STAGES}, got {tuple(self.stages)}")

    def stage_lr(self, stage: str) -> float:
        return self.lr_overrides.get(stage, self.lr)

    def lr_levels(self, stage: str) -> List[float]:
        lr = self.stage_lr(stage)
        if stage != "ALL":
            return [lr]
        levels = [lr]
        while levels[-1] / 10 >= self.min_lr * (1 - 1e-9):
            levels.append(levels[-1] / 10)
        return levels


def converged(losses: Sequence[float], window: int, min_rel_improvement: float) -> bool:
    if len(losses) < 2 * window:
        return False
    prev = sum(losses[-2 * window:-window]) / window
    cur = sum(losses[-window:]) / window
    if prev == 0:
        return True
    return (prev - cur) / abs(prev) < min_rel_improvement


@dataclass
class TrainingResult:
    model: CodecModel
    log: List[dict]

    def stage_order(self) -> List[str]:
        return [k for k, _ in itertools.groupby(r["stage"] for r in self.log)]

    def losses(self, stage: str) -> List[float]:
        return [r["loss"] for r in self.log if r["stage"] == stage]

    def write_csv(self, path) -> None:
        write_log_csv(self.log, path)


def write_log_csv(rows: Iterable[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in LOG_FIELDS})


def _as_pair(clip) -> tuple:
    frames = clip.frames if hasattr(clip, "frames") else clip
    if isinstance(frames, Tensor):
        frames = list(frames.unbind(0)) if frames.dim() == 4 else [frames]
    if len(frames) < 2:
        raise ValueError("training clips need at least two frames")
    return frames


def _batches(clips: Iterator, batch_size: int) -> Iterator[tuple]:
    """Turn a clip stream into (reference, target) batches of consecutive pairs."""
    pending_ref, pending_tgt = [], []
    for clip in clips:
        frames = _as_pair(clip)
        for ref, tgt in zip(frames[:-1], frames[1:]):
            pending_ref.append(ref)
            pending_tgt.append(tgt)
            if len(pending_ref) == batch_size:
                yield torch.stack(pending_ref), torch.stack(pending_tgt)
                pending_ref, pending_tgt = [], []


def stage_loss(model: CodecModel, stage: str, ref: Tensor, tgt: Tensor,
               generator: torch.Generator, scales: Optional[int] = None):
    """Forward pass and loss for one stage; returns ``(loss, distortion, bpp_m, bpp_y)``."""
    out = model(ref, tgt, stage=stage, generator=generator)
    zero = tgt.new_zeros(())
    if stage == "ME":
        d = distortion(tgt, out["warped"], "mse")
        return d, d, zero, zero
    lam, metric = model.lam, model.metric
    r_m = rate_bits(out["p_m"])
    bpp_m = _bpp(r_m, tgt)
    if stage == "M":
        d = distortion(tgt, out["warped"], metric, scales)
        return lam * d + bpp_m, d, bpp_m, zero
    if stage == "MC":
        d = distortion(tgt, out["mc"], metric, scales)
        return lam * d + bpp_m, d, bpp_m, zero
    r_y = rate_bits(out["p_y"])
    bpp_y = _bpp(r_y, tgt)
    d = distortion(tgt, out["recon"], metric, scales)
    return lam * d + bpp_m + bpp_y, d, bpp_m, bpp_y


def train_progressive(clips: Iterable, lam: float = 1024.0, metric: str = "mse",
                      schedule: Optional[TrainingSchedule] = None, seed: int = 0,
                      init: Optional[CodecModel] = None, batch_size: int = 1,
                      msssim_scales: Optional[int] = None,
                      checkpoint_path=None,
                      on_stage_end: Optional[Callable[[str, CodecModel], None]] = None,
                      callback: Optional[Callable[[dict, CodecModel], bool]] = None) -> TrainingResult:
    """Train a codec stage by stage (ME, M, MC, ALL).

    Args:
        clips: Iterable of training clips (objects with ``frames`` or lists of
            ``(3, C, C)`` frames). Cycled if it runs out.
        lam: Rate-distortion trade-off.
        metric: ``"mse"`` trains from scratch (or from ``init``);
            ``"ms-ssim"`` requires ``init``, a trained MSE model, and by
            default only runs stage ``ALL``.
        schedule: Learning rates, convergence rule and step budgets.
        seed: Seeds weight init, noise quantization and nothing else.
        init: Optional starting model (copied, never mutated).
        msssim_scales: MS-SSIM scale count; defaults to the largest that
            fits the crop.
        checkpoint_path: Where to dump the model if the loss diverges.
        on_stage_end: Called with the stage name and model after each stage.
        callback: Called after each step with the log row and the model;
            returning True ends the current stage early.

    Returns:
        The trained model and one log row per step.

    Raises:
        TrainingDiverged: when a loss becomes NaN or Inf.
    """
    metric = normalize_metric(metric)
    torch.manual_seed(seed)
    if metric == "ms-ssim":
        if init is None:
            raise ValueError("MS-SSIM training fine-tunes a pretrained MSE model; pass init=")
        paired = FINETUNE_PAIRS.get(float(lam))
        if paired is None:
            warnings.warn(f"lambda {lam} has no standard MSE pairing", stacklevel=2)
        elif init.metric != "mse" or init.lam != paired:
            raise ValueError(
                f"MS-SSIM lambda {lam} must start from the MSE lambda={paired:g} model, "
                f"got {init.metric} lambda={init.lam:g}")
        if schedule is None:
            schedule = TrainingSchedule(stages=("ALL",))
    schedule = schedule or TrainingSchedule()
    check_lambda(lam, metric)
    if init is not None:
        model = clone_model(init, lam=lam, metric=metric)
    else:
        model = CodecModel(lam, metric)
    model.train()
    gen = torch.Generator().manual_seed(seed)
    batches = _batches(itertools.cycle(clips) if isinstance(clips, (list, tuple)) else clips,
                       batch_size)

    rows: List[dict] = []
    step = 0
    for stage in schedule.stages:
        params = model.stage_parameters(stage)
        frozen = [p for p in model.parameters() if all(p is not q for q in params)]
        for p in frozen:
            p.requires_grad_(False)
        for p in params:
            p.requires_grad_(True)
        prior_ids = {id(p) for p in itertools.chain(model.mv_prior.parameters(),
                                                    model.res_prior.parameters())}
        groups = [{"params": [p for p in params if id(p) not in prior_ids], "scale": 1.0},
                  {"params": [p for p in params if id(p) in prior_ids],
                   "scale": schedule.prior_lr_scale}]
        opt = torch.optim.Adam([g for g in groups if g["params"]], lr=schedule.stage_lr(stage))
        stop = False
        for lr in schedule.lr_levels(stage):
            if stop:
                break
            for g in opt.param_groups:
                g["lr"] = lr * g["scale"]
            history: List[float] = []
            for _ in range(schedule.max_steps[stage]):
                ref, tgt = next(batches)
                try:
                    loss, d, bpp_m, bpp_y = stage_loss(model, stage, ref, tgt, gen, msssim_scales)
                except FloatingPointError:
                    loss = torch.tensor(math.nan)
                if not torch.isfinite(loss):
                    if checkpoint_path is not None:
                        save_checkpoint(model, checkpoint_path, {"stage": stage, "step": step})
                    raise TrainingDiverged(f"non-finite loss at step {step} in stage {stage}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                step += 1
                row = {"step": step, "stage": stage, "lr": lr, "loss": loss.item(),
                       "distortion": d.item(), "rate_m_bpp": bpp_m.item(),
                       "rate_y_bpp": bpp_y.item()}
                rows.append(row)
                history.append(row["loss"])
                stop = callback(row, model) if callback is not None else False
                if stop:
                    break
                if (len(history) % schedule.window == 0
                            and converged(history, schedule.window, schedule.min_rel_improvement)):
                    break
            log.info("stage %s lr %.0e finished after %d steps, loss %.5f",
                     stage, lr, len(history), history[-1] if history else math.nan)
        if on_stage_end is not None:
            model.eval()
            on_stage_end(stage, model)
            model.train()
    for p in model.parameters():
        p.requires_grad_(True)
    model.invalidate_tables()
    model.eval()
    return TrainingResult(model, rows)
