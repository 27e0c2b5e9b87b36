"""Scene context encoder: PointNet tokenization + local self-attention.

Every agent history and every map polyline becomes one token: a shared
per-element MLP followed by masked max-pooling over the time / point axis.
Tokens then run through stacked pre-norm multi-head self-attention where
each token only attends to its k nearest tokens (Euclidean distance between
anchor points), with a sinusoidal encoding of the anchor position added to
queries and keys but not values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .scene import AGENT_STATE_DIM, MAP_POINT_DIM, SceneContext

_PE_BASE = 10000.0


@dataclass(frozen=True)
class EncoderConfig:
    """Width/depth of the context encoder."""

    layers: int = 2
    embed_dim: int = 64
    heads: int = 4
    local_k: int = 8

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("encoder needs at least one layer")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4 != 0:
            raise ConfigError("embed_dim must be a multiple of 4 for the planar position encoding")
        if self.local_k < 1:
            raise ConfigError("local_k must be >= 1")


@dataclass
class SceneBatch:
    """Padded tensor view of a batch of scenes.

    Token layout per scene: agents first (ego at index 0, neighbors sorted by
    distance to ego with a deterministic tie-break), then map polylines.
    Padded slots carry valid=False and zeroed features.

    Attributes:
        agents: [B, A, T_p, 7] agent histories.
        agent_frame_valid: [B, A, T_p] per-frame validity.
        agent_valid: [B, A] agent has at least one valid frame.
        map_points: [B, M, D_p, 8] polyline points.
        map_point_valid: [B, M, D_p].
        map_valid: [B, M].
        anchors: [B, A + M, 2] token anchor positions.
        token_valid: [B, A + M].
    """

    agents: torch.Tensor
    agent_frame_valid: torch.Tensor
    agent_valid: torch.Tensor
    map_points: torch.Tensor
    map_point_valid: torch.Tensor
    map_valid: torch.Tensor
    anchors: torch.Tensor
    token_valid: torch.Tensor

    @property
    def n_scenes(self) -> int:
        return self.agents.shape[0]

    @property
    def n_agents(self) -> int:
        return self.agents.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.anchors.shape[1]


@dataclass
class ContextTokens:
    """Encoded scene tokens consumed by the decoder.

    Attributes:
        tokens: [B, N, D]; rows 0..n_agents-1 are agents (ego first), the
            rest map polylines.
        positions: [B, N, 2] anchor xy per token.
        valid: [B, N] mask; padded or fully-invalid tokens are False.
        n_agents: agent token count A (shared across the batch layout).
    """

    tokens: torch.Tensor
    positions: torch.Tensor
    valid: torch.Tensor
    n_agents: int

    @property
    def ego_token(self) -> torch.Tensor:
        return self.tokens[:, 0, :]  # [B, D]


def _neighbor_sort_key(history, ego_pos: np.ndarray):
    i = history.last_valid_index
    pos = history.states[i, 0:2] if i >= 0 else np.zeros(2)
    # byte-level tie-break keeps the ordering total even for equidistant twins
    return (float(np.linalg.norm(pos - ego_pos)), history.states.tobytes())


def scene_to_tensors(scene: SceneContext) -> dict:
    """Extract per-scene numpy arrays (canonical neighbor order, anchors)."""
    ego = scene.ego
    ego_pos = ego.last_position
    neighbors = sorted(scene.neighbors.histories, key=lambda h: _neighbor_sort_key(h, ego_pos))
    agent_list = [ego] + neighbors
    agents = np.stack([a.states for a in agent_list])  # [A, T_p, 7]
    agent_anchor = np.stack([a.last_position for a in agent_list])  # [A, 2]
    agent_valid = np.array([a.last_valid_index >= 0 for a in agent_list])

    polylines = scene.map_polylines
    map_points = polylines.points  # [M, D_p, 8]
    map_point_valid = polylines.valid  # [M, D_p]
    map_valid = map_point_valid.any(axis=-1)
    denom = np.maximum(map_point_valid.sum(axis=-1, keepdims=True), 1)
    map_anchor = (map_points[..., 0:2] * map_point_valid[..., None]).sum(axis=-2) / denom  # centroid

    return {
        "agents": agents,
        "agent_frame_valid": agents[..., 6] > 0.5,
        "agent_valid": agent_valid,
        "map_points": map_points,
        "map_point_valid": map_point_valid,
        "map_valid": map_valid,
        "anchors": np.concatenate([agent_anchor, map_anchor], axis=0),
    }


def stack_scenes(scenes: list[SceneContext]) -> SceneBatch:
    """Pad per-scene tensors to a common shape and stack into one batch."""
    parts = [scene_to_tensors(s) for s in scenes]
    a_max = max(p["agents"].shape[0] for p in parts)
    m_max = max(p["map_points"].shape[0] for p in parts)
    t_p = parts[0]["agents"].shape[1]
    d_p = parts[0]["map_points"].shape[1]

    b = len(parts)
    agents = np.zeros((b, a_max, t_p, AGENT_STATE_DIM))
    agent_frame_valid = np.zeros((b, a_max, t_p), dtype=bool)
    agent_valid = np.zeros((b, a_max), dtype=bool)
    map_points = np.zeros((b, m_max, d_p, MAP_POINT_DIM))
    map_point_valid = np.zeros((b, m_max, d_p), dtype=bool)
    map_valid = np.zeros((b, m_max), dtype=bool)
    anchors = np.zeros((b, a_max + m_max, 2))
    token_valid = np.zeros((b, a_max + m_max), dtype=bool)

    for i, p in enumerate(parts):
        a, m = p["agents"].shape[0], p["map_points"].shape[0]
        if p["agents"].shape[1] != t_p or p["map_points"].shape[1] != d_p:
            raise ConfigError("all scenes in a batch must share T_p and points-per-polyline")
        agents[i, :a] = p["agents"]
        agent_frame_valid[i, :a] = p["agent_frame_valid"]
        agent_valid[i, :a] = p["agent_valid"]
        map_points[i, :m] = p["map_points"]
        map_point_valid[i, :m] = p["map_point_valid"]
        map_valid[i, :m] = p["map_valid"]
        anchors[i, :a] = p["anchors"][:a]
        anchors[i, a_max : a_max + m] = p["anchors"][a:]
        token_valid[i, :a] = p["agent_valid"]
        token_valid[i, a_max : a_max + m] = p["map_valid"]

    as_t = lambda x: torch.as_tensor(x)  # noqa: E731
    return SceneBatch(
        agents=torch.as_tensor(agents, dtype=torch.float64),
        agent_frame_valid=as_t(agent_frame_valid),
        agent_valid=as_t(agent_valid),
        map_points=torch.as_tensor(map_points, dtype=torch.float64),
        map_point_valid=as_t(map_point_valid),
        map_valid=as_t(map_valid),
        anchors=torch.as_tensor(anchors, dtype=torch.float64),
        token_valid=as_t(token_valid),
    )


class PlanarPositionalEncoding(nn.Module):
    """Sinusoidal encoding of 2D positions.

    x and y are encoded independently with dim/2 sinusoids each (geometric
    frequency ladder as in standard sequence encodings), concatenated, and
    linearly projected back to dim.
    """

    def __init__(self, dim: int):
        super().__init__()
        if dim % 4 != 0:
            raise ConfigError("planar position encoding needs dim divisible by 4")
        self.dim = dim
        quarter = dim // 4
        exponents = torch.arange(quarter, dtype=torch.float64) / max(quarter - 1, 1)
        self.register_buffer("freqs", _PE_BASE ** (-exponents))  # [dim/4], 1 .. 1/base
        self.proj = nn.Linear(dim, dim, dtype=torch.float64)

    def forward(self, xy: torch.Tensor) -> torch.Tensor:
        """[..., 2] positions -> [..., dim] encodings."""
        phase = xy.unsqueeze(-1) * self.freqs  # [..., 2, dim/4]
        enc = torch.cat([torch.sin(phase), torch.cos(phase)], dim=-1)  # [..., 2, dim/2]
        return self.proj(enc.flatten(-2))


class PointNetTokenizer(nn.Module):
    """Shared per-element MLP + masked max-pool over the element axis."""

    def __init__(self, in_dim: int, dim: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, dim, dtype=torch.float64),
            nn.GELU(),
            nn.Linear(dim, dim, dtype=torch.float64),
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Pool [..., E, in_dim] with mask [..., E] to one [..., dim] token.

        Invalid elements never reach the max; rows with no valid element
        pool to zero.
        """
        h = self.mlp(x)  # [..., E, dim]
        h = h.masked_fill(~mask.unsqueeze(-1), float("-inf"))
        pooled = h.amax(dim=-2)
        any_valid = mask.any(dim=-1, keepdim=True)
        return pooled.masked_fill(~any_valid, 0.0)


def local_neighbor_indices(anchors: torch.Tensor, valid: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """k nearest valid tokens per token by anchor distance (self included).

    Distance ties resolve to the lower token index.  Tokens see only valid
    keys; when fewer than k exist, the surplus slots are masked out.

    Args:
        anchors: [B, N, 2].
        valid: [B, N].
        k: neighborhood size (capped at N).

    Returns:
        (indices [B, N, k'], key_mask [B, N, k']) with k' = min(k, N).
    """
    n = anchors.shape[1]
    k_eff = min(k, n)
    dist = torch.cdist(anchors, anchors)  # [B, N, N]
    dist = dist.masked_fill(~valid.unsqueeze(1), float("inf"))
    order = torch.argsort(dist, dim=-1, stable=True)  # ties -> lower index
    idx = order[..., :k_eff]
    key_mask = torch.gather(dist, -1, idx) < float("inf")
    return idx, key_mask


class LocalMultiheadAttention(nn.Module):
    """Multi-head attention over a per-query local key set.

    Position encodings are added to queries and keys only; values see the
    raw token features.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim, dtype=torch.float64)
        self.k_proj = nn.Linear(dim, dim, dtype=torch.float64)
        self.v_proj = nn.Linear(dim, dim, dtype=torch.float64)
        self.out_proj = nn.Linear(dim, dim, dtype=torch.float64)

    def forward(
        self,
        x: torch.Tensor,
        pe: torch.Tensor,
        knn_idx: torch.Tensor,
        key_mask: torch.Tensor,
    ) -> torch.Tensor:
        """Attend each token to its local key set.

        Args:
            x: [B, N, D] token features.
            pe: [B, N, D] position encodings (queries/keys only).
            knn_idx: [B, N, K] local key indices per query.
            key_mask: [B, N, K] which local keys are real.

        Returns:
            [B, N, D].
        """
        b, n, d = x.shape
        k = knn_idx.shape[-1]
        q = self.q_proj(x + pe)  # [B, N, D]
        k_all = self.k_proj(x + pe)
        v_all = self.v_proj(x)

        gather_idx = knn_idx.reshape(b, n * k, 1).expand(-1, -1, d)
        k_loc = torch.gather(k_all, 1, gather_idx).reshape(b, n, k, d)
        v_loc = torch.gather(v_all, 1, gather_idx).reshape(b, n, k, d)

        q = q.reshape(b, n, self.heads, self.head_dim)
        k_loc = k_loc.reshape(b, n, k, self.heads, self.head_dim)
        v_loc = v_loc.reshape(b, n, k, self.heads, self.head_dim)

        scores = torch.einsum("bnhd,bnkhd->bhnk", q, k_loc) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask.unsqueeze(1), float("-inf"))
        # queries with no valid key (padded tokens) would softmax over -inf;
        # give them a uniform row, their output is masked away downstream
        no_key = ~key_mask.any(dim=-1)  # [B, N]
        scores = scores.masked_fill(no_key.unsqueeze(1).unsqueeze(-1), 0.0)
        attn = torch.softmax(scores, dim=-1)
        out = torch.einsum("bhnk,bnkhd->bnhd", attn, v_loc).reshape(b, n, d)
        return self.out_proj(out)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block: local MHA + 4x feed-forward."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, dtype=torch.float64)
        self.attn = LocalMultiheadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, dtype=torch.float64)
        self.ffn = nn.Sequential(
            nn.Linear(dim, 4 * dim, dtype=torch.float64),
            nn.GELU(),
            nn.Linear(4 * dim, dim, dtype=torch.float64),
        )

    def forward(self, x, pe, knn_idx, key_mask):
        x = x + self.attn(self.norm1(x), pe, knn_idx, key_mask)
        x = x + self.ffn(self.norm2(x))
        return x


class ContextEncoder(nn.Module):
    """Tokenize a scene batch and contextualize the tokens.

    ``forward`` = ``encode(tokenize(batch))``; the two stages are exposed
    separately so training can reuse tokens across forward passes.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.agent_tokenizer = PointNetTokenizer(AGENT_STATE_DIM, d)
        self.map_tokenizer = PointNetTokenizer(MAP_POINT_DIM, d)
        self.position_encoding = PlanarPositionalEncoding(d)
        self.blocks = nn.ModuleList(EncoderBlock(d, config.heads) for _ in range(config.layers))

    def tokenize(self, batch: SceneBatch) -> ContextTokens:
        """One pooled token per agent and per polyline (pre-attention)."""
        agent_tokens = self.agent_tokenizer(batch.agents, batch.agent_frame_valid)  # [B, A, D]
        map_tokens = self.map_tokenizer(batch.map_points, batch.map_point_valid)  # [B, M, D]
        tokens = torch.cat([agent_tokens, map_tokens], dim=1)
        tokens = tokens * batch.token_valid.unsqueeze(-1)
        return ContextTokens(
            tokens=tokens,
            positions=batch.anchors,
            valid=batch.token_valid,
            n_agents=batch.n_agents,
        )

    def encode(self, tokens: ContextTokens) -> ContextTokens:
        """Run the stacked local-attention blocks over the tokens."""
        pe = self.position_encoding(tokens.positions)
        knn_idx, key_mask = local_neighbor_indices(tokens.positions, tokens.valid, self.config.local_k)
        x = tokens.tokens
        for block in self.blocks:
            x = block(x, pe, knn_idx, key_mask)
        x = x * tokens.valid.unsqueeze(-1)
        return ContextTokens(tokens=x, positions=tokens.positions, valid=tokens.valid, n_agents=tokens.n_agents)

    def forward(self, batch: SceneBatch) -> ContextTokens:
        return self.encode(self.tokenize(batch))
