"""Training objective: best-mode regression, mode classification, ranking.

For each scene the decoder proposes N_q modes.  The proposal closest to the
ground truth among the NMS survivors (k*) receives the regression loss --
either plain MSE on the means or the negative log-likelihood of a
per-waypoint bivariate Gaussian.  A binary cross-entropy term pushes mode
confidence toward the indicator of k*, and a Plackett-Luce term (weight
lambda) trains the separate ranking scores on the full distance ordering of
all N_q proposals.  Mode selection and distance ordering happen in scene
units; the regression operates in normalized coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericsError
from .ranking import ground_truth_ranking, pl_nll_loss
from .scene import Normalizer
from .selection import NMSConfig, nms_select

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LossBreakdown:
    """Per-scene (or batch-averaged) loss terms.

    total = l_flow + l_cls + lambda_rank * l_rank; ``best_index`` is the k*
    used for the regression and classification targets (-1 for averages).
    """

    l_flow: torch.Tensor
    l_cls: torch.Tensor
    l_rank: torch.Tensor
    total: torch.Tensor
    best_index: int


def _to_numpy(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy()


def select_best(
    traj_mean: torch.Tensor,
    logits: torch.Tensor,
    gt_traj: torch.Tensor,
    nms_config: NMSConfig,
) -> int:
    """Index of the NMS-surviving proposal closest to the ground truth.

    NMS runs on endpoint distance with sigmoid(logits) confidences; among
    the survivors (padded re-entries excluded) the best mode minimizes the
    summed squared waypoint distance.  All inputs are expected in scene
    units.

    Args:
        traj_mean: [N_q, T_f, 2] proposal means.
        logits: [N_q] confidence logits.
        gt_traj: [T_f, 2] ground truth.

    Returns:
        k* as an index into the N_q proposals.
    """
    trajs = _to_numpy(traj_mean)
    conf = 1.0 / (1.0 + np.exp(-_to_numpy(logits)))
    n_q = trajs.shape[0]
    k_out = min(nms_config.k_out, n_q)
    selected = nms_select(trajs, conf, NMSConfig(radius=nms_config.radius, k_out=k_out))
    survivors = selected.source_indices[~selected.padded]
    if survivors.size == 0:  # NMS always keeps its first pick, but stay safe
        survivors = selected.source_indices
    gt = _to_numpy(gt_traj) if isinstance(gt_traj, torch.Tensor) else np.asarray(gt_traj)
    d2 = ((trajs[survivors] - gt[None]) ** 2).sum(axis=(1, 2))
    # ties resolve to the lowest original mode index
    order = np.lexsort((survivors, d2))
    return int(survivors[order[0]])


def flow_regression_loss(
    traj_params: torch.Tensor,
    gt_traj: torch.Tensor,
    best_index: int,
    mode: str = "gmm_nll",
) -> torch.Tensor:
    """Regression loss of the best mode against the ground truth.

    Args:
        traj_params: [N_q, T_f, 5] Gaussian parameters per waypoint.
        gt_traj: [T_f, 2] target, same coordinate space as the means.
        best_index: k* from select_best.
        mode: "l2" for MSE on the means, "gmm_nll" for the summed
            per-waypoint bivariate-Gaussian negative log-likelihood.

    Returns:
        Scalar tensor.
    """
    params = traj_params[best_index]  # [T_f, 5]
    if not torch.isfinite(params).all():
        raise NumericsError("trajectory head produced nonfinite parameters")
    if mode == "l2":
        return F.mse_loss(params[:, 0:2], gt_traj)
    if mode == "gmm_nll":
        mu = params[:, 0:2]
        log_sigma = params[:, 2:4]
        rho = params[:, 4]
        sigma = torch.exp(log_sigma)
        delta = (gt_traj - mu) / sigma  # [T_f, 2]
        one_minus_rho2 = 1.0 - rho**2
        quad = (delta[:, 0] ** 2 - 2.0 * rho * delta[:, 0] * delta[:, 1] + delta[:, 1] ** 2) / one_minus_rho2
        nll = LOG_2PI + log_sigma.sum(-1) + 0.5 * torch.log(one_minus_rho2) + 0.5 * quad
        return nll.sum()
    raise ConfigError(f"unknown regression mode {mode!r}")


def classification_loss(logits: torch.Tensor, best_index: int) -> torch.Tensor:
    """Mean binary cross-entropy of mode confidences against 1[k = k*]."""
    target = torch.zeros_like(logits)
    target[best_index] = 1.0
    return F.binary_cross_entropy_with_logits(logits, target)


def total_loss(
    traj_params: torch.Tensor,
    logits: torch.Tensor,
    rank_scores: torch.Tensor,
    gt_norm: torch.Tensor,
    normalizer: Normalizer,
    nms_config: NMSConfig,
    lambda_rank: float = 0.1,
    regression_mode: str = "gmm_nll",
) -> LossBreakdown:
    """Full per-scene objective for one decoder output.

    Mode selection (NMS + argmin) and the ranking target use denormalized
    scene units; the regression itself stays in normalized coordinates where
    the flow operates.

    Args:
        traj_params: [N_q, T_f, 5] in normalized coordinates.
        logits, rank_scores: [N_q].
        gt_norm: [T_f, 2] normalized ground truth.
        normalizer: coordinate normalizer of the dataset.
        lambda_rank: weight of the ranking term.

    Returns:
        LossBreakdown with total = l_flow + l_cls + lambda_rank * l_rank.
    """
    scale = torch.as_tensor(normalizer.scale, dtype=gt_norm.dtype)
    offset = torch.as_tensor(normalizer.offset, dtype=gt_norm.dtype)
    mean_scene = traj_params[..., 0:2] * scale + offset  # [N_q, T_f, 2]
    gt_scene = gt_norm * scale + offset

    k_star = select_best(mean_scene, logits, gt_scene, nms_config)
    l_flow = flow_regression_loss(traj_params, gt_norm, k_star, regression_mode)
    l_cls = classification_loss(logits, k_star)
    target_ranking = ground_truth_ranking(mean_scene.detach(), gt_scene)
    l_rank = pl_nll_loss(rank_scores, target_ranking)
    total = l_flow + l_cls + lambda_rank * l_rank
    return LossBreakdown(l_flow=l_flow, l_cls=l_cls, l_rank=l_rank, total=total, best_index=k_star)
