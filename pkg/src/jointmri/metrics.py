"""Training losses and evaluation metrics (PSNR, SSIM, Dice)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from jointmri.errors import ContractError, DimensionError

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _same_shape(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# losses (torch, differentiable)


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all pixels."""
    _same_shape(pred, target)
    return (pred - target).abs().mean()


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy normalized by pixel count *and* class count.

    ``logits`` is ``(B, C, H, W)`` (or ``(C, H, W)``), ``labels`` holds class
    indices with the matching ``(B, H, W)`` shape. Returns
    ``-(1 / (N * C)) * sum_n ln p[true class of n, n]`` averaged over the batch.
    """
    if logits.ndim == 3:
        logits, labels = logits.unsqueeze(0), labels.unsqueeze(0)
    if logits.ndim != 4 or labels.shape != (logits.shape[0], *logits.shape[2:]):
        raise DimensionError(
            f"logits {tuple(logits.shape)} incompatible with labels {tuple(labels.shape)}"
        )
    C = logits.shape[1]
    labels = labels.long()
    if bool((labels < 0).any()) or bool((labels >= C).any()):
        raise ContractError(f"labels must lie in [0, {C})")
    return F.cross_entropy(logits, labels, reduction="mean") / C


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    seg: torch.Tensor
    total: torch.Tensor
    lam: float

    def as_floats(self) -> dict:
        return {
            "recon": float(self.recon.detach()),
            "seg": float(self.seg.detach()),
            "total": float(self.total.detach()),
        }


def combine(recon: torch.Tensor, seg: torch.Tensor, lam: float) -> LossBreakdown:
    return LossBreakdown(recon, seg, recon + lam * seg, lam)


def hybrid_loss(recon_pred, recon_target, seg_logits, seg_labels, lam: float) -> LossBreakdown:
    """``L1(recon) + lam * CE(seg)``."""
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    return combine(
        l1_loss(recon_pred, recon_target), cross_entropy_loss(seg_logits, seg_labels), lam
    )


# ---------------------------------------------------------------------------
# metrics (numpy)


def _np(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)


def psnr(pred, target, data_range: float = 1.0) -> float:
    """Peak SNR in dB, capped at 99 dB when the images are identical."""
    if data_range <= 0:
        raise ContractError("data_range must be positive")
    pred, target = _np(pred), _np(target)
    _same_shape(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def ssim(pred, target, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid 7x7 windows (uniform weights, sample covariance)."""
    pred, target = _np(pred), _np(target)
    _same_shape(pred, target)
    if pred.ndim != 2:
        raise DimensionError("ssim expects 2D images")
    if min(pred.shape) < SSIM_WINDOW:
        raise DimensionError(f"image {pred.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = (SSIM_WINDOW, SSIM_WINDOW)
    npix = SSIM_WINDOW * SSIM_WINDOW
    wx = np.lib.stride_tricks.sliding_window_view(pred, win)
    wy = np.lib.stride_tricks.sliding_window_view(target, win)
    ux, uy = wx.mean(axis=(-2, -1)), wy.mean(axis=(-2, -1))
    cov = npix / (npix - 1.0)
    vx = cov * ((wx**2).mean(axis=(-2, -1)) - ux**2)
    vy = cov * ((wy**2).mean(axis=(-2, -1)) - uy**2)
    vxy = cov * ((wx * wy).mean(axis=(-2, -1)) - ux * uy)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    return float(s.mean())


@dataclass
class DiceResult:
    per_class: dict
    mean: float
    present: list


def dice(pred_labels, true_labels, C: int, include_background: bool = False) -> DiceResult:
    """Per-class Dice and the mean over classes present in either map.

    A class absent from both maps scores 1.0 but is left out of the mean.
    Class 0 is treated as background and excluded from the mean unless
    ``include_background`` is set.
    """
    p = np.asarray(pred_labels)
    t = np.asarray(true_labels)
    _same_shape(p, t)
    if p.size and (p.min() < 0 or p.max() >= C or t.min() < 0 or t.max() >= C):
        raise ContractError(f"labels must lie in [0, {C})")
    per_class = {}
    present = []
    for c in range(C):
        pc, tc = p == c, t == c
        denom = int(pc.sum() + tc.sum())
        if denom == 0:
            per_class[c] = 1.0
            continue
        per_class[c] = 2.0 * int((pc & tc).sum()) / denom
        if c > 0 or include_background:
            present.append(c)
    mean = float(np.mean([per_class[c] for c in present])) if present else 1.0
    return DiceResult(per_class, mean, present)
