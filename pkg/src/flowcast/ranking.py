"""Plackett-Luce listwise ranking over predicted trajectories.

A separate score head rates every predicted mode; training pushes those
scores to reproduce the ordering of modes by distance to the ground truth.
Under the Plackett-Luce model a permutation sigma has probability

    p(sigma) = prod_k exp(r[sigma_k]) / sum_{j >= k} exp(r[sigma_j]),

i.e. modes are drawn best-first, without replacement, with softmax weights
over whatever is still unchosen.
"""

from __future__ import annotations

import torch


def ground_truth_ranking(pred_trajs: torch.Tensor, gt_traj: torch.Tensor) -> torch.Tensor:
    """Order modes by mean pointwise distance to the ground truth, best first.

    Args:
        pred_trajs: [K, T_f, 2] predicted trajectories.
        gt_traj: [T_f, 2] ground-truth trajectory.

    Returns:
        [K] int64 permutation; ties broken by the lower mode index.
    """
    dists = (pred_trajs - gt_traj.unsqueeze(0)).norm(dim=-1).mean(dim=-1)  # [K]
    return torch.argsort(dists, stable=True)


def pl_log_likelihood(scores: torch.Tensor, ranking: torch.Tensor) -> torch.Tensor:
    """Log-probability of a ranking under the Plackett-Luce model.

    Invariant to adding a constant to all scores.  Batched over any leading
    dimensions shared by ``scores`` and ``ranking``.

    Args:
        scores: [..., K] unnormalized mode scores.
        ranking: [..., K] permutation, best mode first.

    Returns:
        [...] log-likelihoods.
    """
    ordered = torch.gather(scores, -1, ranking)  # [..., K] scores in rank order
    # denominator at rank k is logsumexp over the not-yet-chosen tail k..K-1
    tail_lse = ordered.flip(-1).logcumsumexp(-1).flip(-1)
    return (ordered - tail_lse).sum(-1)


def pl_nll_loss(scores: torch.Tensor, ranking: torch.Tensor) -> torch.Tensor:
    """Negative log-likelihood of the target ranking (always >= 0)."""
    return -pl_log_likelihood(scores, ranking)


def pl_sample(scores: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Draw one ranking by sequential sampling without replacement.

    Draws the top mode from softmax(scores), removes it, renormalizes over
    the remainder, and repeats until all modes are placed.

    Args:
        scores: [K] mode scores.

    Returns:
        [K] int64 permutation, best mode first.
    """
    k = scores.shape[-1]
    active = torch.ones(k, dtype=torch.bool)
    order = torch.empty(k, dtype=torch.int64)
    for rank in range(k):
        probs = torch.softmax(scores.masked_fill(~active, float("-inf")), dim=-1)
        pick = torch.multinomial(probs, 1, generator=generator)[0]
        order[rank] = pick
        active[pick] = False
    return order


def pl_sample_many(scores: torch.Tensor, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Draw ``n`` independent rankings from the Plackett-Luce distribution.

    Uses the Gumbel argsort construction: argsort(scores + Gumbel noise)
    descending has exactly the distribution of the sequential sampler in
    ``pl_sample``, but vectorizes over draws.

    Args:
        scores: [K] mode scores.
        n: number of rankings to draw.

    Returns:
        [n, K] int64 permutations, best mode first.
    """
    u = torch.rand((n, scores.shape[-1]), generator=generator, dtype=scores.dtype)
    gumbel = -torch.log(-torch.log(u))
    return torch.argsort(scores.unsqueeze(0) + gumbel, dim=-1, descending=True)
