"""Loss functions for the dual-task network.

Binary cross-entropy for the segmentation heads, focal loss, and the change
detection loss (CDL) that replaces the focal modulator with separate
non-linear weights for changed and unchanged pixels:

    y = 1:  -(2 - p)^delta * log(p)
    y = 0:  -(1 + p)^theta * log(1 - p)

Every loss clamps probabilities to [EPS, 1-EPS], reduces by the mean over all
elements, and uses natural logarithms. ``cdl_grad`` is the hand-derived
elementwise gradient of ``cdl`` and is verified against central finite
differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .config import CdlParams, LossConfig, LossWeights
from .errors import ConfigurationError, ShapeError

EPS = 1e-7


def clamp_probs(p: torch.Tensor) -> torch.Tensor:
    """Clamp probabilities into [EPS, 1-EPS] so log terms stay finite."""
    return p.clamp(EPS, 1.0 - EPS)


def _check_pair(p: torch.Tensor, y: torch.Tensor) -> None:
    if p.shape != y.shape:
        raise ShapeError(f"probability map {tuple(p.shape)} vs label map {tuple(y.shape)}")


def bce(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy, natural log."""
    _check_pair(p, y)
    p = clamp_probs(p)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def focal(p: torch.Tensor, y: torch.Tensor, alpha_t: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Focal loss: cross-entropy modulated by (1 - p_t)^gamma.

    ``alpha_t`` weights positive pixels, ``1 - alpha_t`` negative ones; with
    gamma=0 and alpha_t=0.5 this reduces to 0.5 * bce.
    """
    _check_pair(p, y)
    if gamma < 0:
        raise ConfigurationError("gamma must be >= 0")
    if not 0.0 <= alpha_t <= 1.0:
        raise ConfigurationError("alpha_t must lie in [0, 1]")
    p = clamp_probs(p)
    p_t = torch.where(y > 0.5, p, 1.0 - p)
    weight = torch.where(y > 0.5, torch.full_like(p, alpha_t), torch.full_like(p, 1.0 - alpha_t))
    return (-weight * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def cdl(p: torch.Tensor, y: torch.Tensor, params: CdlParams) -> torch.Tensor:
    """Change detection loss with non-linear per-class hardness weights.

    Reduces to plain bce at delta = theta = 0: the modulating factors
    (2-p)^delta and (1+p)^theta both collapse to 1.
    """
    _check_pair(p, y)
    if torch.isnan(p).any():
        raise ShapeError("probability map contains NaN")
    p = clamp_probs(p)
    pos = -((2.0 - p) ** params.delta) * torch.log(p)
    neg = -((1.0 + p) ** params.theta) * torch.log(1.0 - p)
    return torch.where(y > 0.5, pos, neg).mean()


def cdl_grad(p: torch.Tensor, y: torch.Tensor, params: CdlParams) -> torch.Tensor:
    """Analytic d(cdl)/dp, per element, including the 1/N mean scaling.

    y = 1:  delta*(2-p)^(delta-1)*log(p) - (2-p)^delta / p
    y = 0:  -theta*(1+p)^(theta-1)*log(1-p) + (1+p)^theta / (1-p)
    """
    _check_pair(p, y)
    if ((p <= 0.0) | (p >= 1.0)).any():
        raise ShapeError("cdl_grad requires probabilities strictly inside (0, 1)")
    d, t = params.delta, params.theta
    pos = d * (2.0 - p) ** (d - 1.0) * torch.log(p) - (2.0 - p) ** d / p
    neg = -t * (1.0 + p) ** (t - 1.0) * torch.log(1.0 - p) + (1.0 + p) ** t / (1.0 - p)
    return torch.where(y > 0.5, pos, neg) / p.numel()


@dataclass
class LossReport:
    """Per-term breakdown of one combined-loss evaluation."""

    l_ss_t1: float = 0.0
    l_ss_t2: float = 0.0
    l_cd: float = 0.0
    l_aux: list[float] = field(default_factory=list)
    total: float = 0.0

    def to_dict(self) -> dict:
        return {
            "l_ss_t1": self.l_ss_t1,
            "l_ss_t2": self.l_ss_t2,
            "l_cd": self.l_cd,
            "l_aux": list(self.l_aux),
            "total": self.total,
        }


def change_loss(p: torch.Tensor, y: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Dispatch the configured change-branch loss."""
    if cfg.kind == "bce":
        return bce(p, y)
    if cfg.kind == "focal":
        return focal(p, y, alpha_t=cfg.focal_alpha, gamma=cfg.focal_gamma)
    return cdl(p, y, cfg.params)


def pool_label(y: torch.Tensor, size: int) -> torch.Tensor:
    """Max-pool a binary label down to ``size`` x ``size`` for an auxiliary head."""
    if y.shape[-1] == size and y.shape[-2] == size:
        return y
    factor = y.shape[-1] // size
    return torch.nn.functional.max_pool2d(y, kernel_size=factor)


def total_loss(out, y_cd: torch.Tensor, y_t1: torch.Tensor | None, y_t2: torch.Tensor | None,
               weights: LossWeights, cfg: LossConfig) -> tuple[torch.Tensor, LossReport]:
    """Weighted dual-task composition.

    total = alpha*(l_ss_t1 + l_ss_t2) + lambda_cd*(l_cd + mean(l_aux)); the
    segmentation terms vanish when the model has no SSN heads and the aux
    term vanishes without deep supervision. Returns the differentiable total
    and a detached per-term report.
    """
    report = LossReport()
    total = torch.zeros((), dtype=y_cd.dtype)

    l_cd = change_loss(out.change_prob, y_cd, cfg)
    report.l_cd = l_cd.detach().item()
    cd_term = l_cd
    if out.change_aux:
        aux_losses = []
        for aux in out.change_aux:
            y_aux = pool_label(y_cd, aux.shape[-1])
            aux_losses.append(change_loss(aux, y_aux, cfg))
        report.l_aux = [a.detach().item() for a in aux_losses]
        cd_term = cd_term + torch.stack(aux_losses).mean()
    total = total + weights.lambda_cd * cd_term

    if out.seg_prob_t1 is not None and out.seg_prob_t2 is not None:
        if y_t1 is None or y_t2 is None:
            raise ConfigurationError("segmentation labels required when SSN heads are enabled")
        l1 = bce(out.seg_prob_t1, y_t1)
        l2 = bce(out.seg_prob_t2, y_t2)
        report.l_ss_t1, report.l_ss_t2 = l1.detach().item(), l2.detach().item()
        total = total + weights.alpha * (l1 + l2)
    elif weights.alpha > 0 and (out.seg_prob_t1 is None or out.seg_prob_t2 is None):
        raise ConfigurationError("alpha > 0 but the model produced no segmentation outputs")

    report.total = total.detach().item()
    return total, report
