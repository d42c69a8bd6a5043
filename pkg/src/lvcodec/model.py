"""The full weight bundle for one (lambda, metric) operating point."""

from __future__ import annotations

import hashlib
import io
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch
from torch import Tensor, nn

from .bottleneck import CdfTable, FactorizedPrior, build_cdf_tables, likelihood, quantize
from .flow import PyramidFlow, warp
from .motion_comp import MotionCompensation
from .transforms import LATENT_CHANNELS, motion_transforms, residual_transforms

CHECKPOINT_VERSION = 1
METRICS = ("mse", "ms-ssim")
LAMBDAS = {"mse": (256.0, 512.0, 1024.0, 2048.0), "ms-ssim": (8.0, 16.0, 32.0, 64.0)}
# MS-SSIM models are fine-tuned from the MSE model at the paired lambda
FINETUNE_PAIRS = {8.0: 256.0, 16.0: 512.0, 32.0: 1024.0, 64.0: 2048.0}
# I-frame quality per lambda: BPG QP for MSE models, learned-codec level for MS-SSIM models
BPG_QP = {256.0: 37, 512.0: 32, 1024.0: 27, 2048.0: 22}
LEARNED_IFRAME_QUALITY = {8.0: 2, 16.0: 3, 32.0: 5, 64.0: 7}

STAGES = ("ME", "M", "MC", "ALL")
STAGE_GROUPS = {
    "ME": ("flow",),
    "M": ("flow", "motion"),
    "MC": ("flow", "motion", "mc"),
    "ALL": ("flow", "motion", "mc", "residual"),
}


def normalize_metric(metric: str) -> str:
    m = metric.lower().replace("_", "-")
    if m in ("mse", "psnr"):
        return "mse"
    if m in ("ms-ssim", "msssim"):
        return "ms-ssim"
    raise ValueError(f"unknown distortion metric {metric!r}")


def check_lambda(lam: float, metric: str) -> None:
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if float(lam) not in LAMBDAS[metric]:
        warnings.warn(f"lambda {lam} is not one of the standard {metric} values {LAMBDAS[metric]}",
                      stacklevel=3)


class CodecModel(nn.Module):
    """Motion estimation, motion/residual coding and motion compensation.

    Attributes mirror the coding chain: ``flow_net`` estimates motion,
    ``mv_encoder``/``mv_decoder`` and ``mv_prior`` code it, ``mc_net``
    refines the warped reference, and ``res_encoder``/``res_decoder`` with
    ``res_prior`` code the remaining residual.
    """

    def __init__(self, lam: float = 1024.0, metric: str = "mse"):
        super().__init__()
        self.metric = normalize_metric(metric)
        check_lambda(lam, self.metric)
        self.lam = float(lam)
        self.flow_net = PyramidFlow()
        self.mv_encoder, self.mv_decoder = motion_transforms()
        self.mv_prior = FactorizedPrior(LATENT_CHANNELS)
        self.mc_net = MotionCompensation()
        self.res_encoder, self.res_decoder = residual_transforms()
        self.res_prior = FactorizedPrior(LATENT_CHANNELS)
        self._tables: Optional[Dict[str, CdfTable]] = None

    # parameter groups used for stage gating
    def groups(self) -> Dict[str, nn.Module]:
        return {
            "flow": self.flow_net,
            "motion": nn.ModuleList([self.mv_encoder, self.mv_decoder, self.mv_prior]),
            "mc": self.mc_net,
            "residual": nn.ModuleList([self.res_encoder, self.res_decoder, self.res_prior]),
        }

    def stage_parameters(self, stage: str):
        groups = self.groups()
        params = []
        for name in STAGE_GROUPS[stage]:
            params.extend(groups[name].parameters())
        return params

    def forward(self, ref: Tensor, target: Tensor, stage: str = "ALL",
                generator: Optional[torch.Generator] = None) -> Dict[str, Tensor]:
        """Training-mode pass up to ``stage``; latents get uniform noise.

        Returns a dict of intermediates named after the coding chain
        (``flow``, ``warped``, ``flow_hat``, ``mc``, ``recon``) plus the
        likelihood tensors ``p_m`` and ``p_y`` where they exist.
        """
        out: Dict[str, Tensor] = {}
        v = self.flow_net(ref, target)
        out["flow"] = v
        if stage == "ME":
            out["warped"] = warp(ref, v)
            return out
        m = self.mv_encoder(v)
        m_hat = quantize(m, "train", generator)
        out["p_m"] = likelihood(m_hat, self.mv_prior)
        v_hat = self.mv_decoder(m_hat)
        out["flow_hat"] = v_hat
        out["warped"] = warp(ref, v_hat)
        if stage == "M":
            return out
        x_bar = self.mc_net(ref, out["warped"], v_hat)
        out["mc"] = x_bar
        if stage == "MC":
            return out
        y = self.res_encoder(target - x_bar)
        y_hat = quantize(y, "train", generator)
        out["p_y"] = likelihood(y_hat, self.res_prior)
        out["recon"] = x_bar + self.res_decoder(y_hat)
        return out

    # -- test-time helpers shared by encoder and decoder ---------------------

    def predict(self, ref: Tensor, m_hat: Tensor):
        """Decoded motion latent -> (flow_hat, warped reference, compensated frame)."""
        v_hat = self.mv_decoder(m_hat)
        warped = warp(ref, v_hat)
        return v_hat, warped, self.mc_net(ref, warped, v_hat)

    def reconstruct(self, x_bar: Tensor, y_hat: Tensor) -> Tensor:
        return torch.clamp(x_bar + self.res_decoder(y_hat), 0.0, 1.0)

    def tables(self) -> Dict[str, CdfTable]:
        if self._tables is None:
            self._tables = {"motion": build_cdf_tables(self.mv_prior),
                            "residual": build_cdf_tables(self.res_prior)}
        return self._tables

    def invalidate_tables(self) -> None:
        self._tables = None

    def fingerprint(self) -> bytes:
        """32-byte SHA-256 over architecture, metadata and every weight."""
        h = hashlib.sha256()
        h.update(f"lvcodec-v{CHECKPOINT_VERSION}|{self.metric}|{self.lam!r}".encode())
        for name, t in sorted(self.state_dict().items()):
            arr = t.detach().cpu().float().contiguous().numpy()
            h.update(f"|{name}:{tuple(arr.shape)}".encode())
            h.update(arr.tobytes())
        return h.digest()


def save_checkpoint(model: CodecModel, path, extra: Optional[dict] = None) -> Path:
    """Atomically write a versioned checkpoint (named arrays + metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "lambda": model.lam,
        "metric": model.metric,
        "weights": {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> CodecModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = CodecModel(payload["lambda"], payload["metric"])
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in payload["weights"].items()}
    model.load_state_dict(state)
    model.eval()
    return model


def clone_model(model: CodecModel, lam: Optional[float] = None, metric: Optional[str] = None) -> CodecModel:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        new = CodecModel(model.lam if lam is None else lam, model.metric if metric is None else metric)
    new.load_state_dict(model.state_dict())
    if lam is not None or metric is not None:
        check_lambda(new.lam, new.metric)
    return new
