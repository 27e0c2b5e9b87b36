"""Trajectory decoder: query tokens over the noisy trajectory + three heads.

Each of the N_q modes owns one query token built from its noisy trajectory
slice, a sinusoidal flow-time embedding, and a learnable per-mode embedding
shifted by a projection of the ego context token.  Stacked blocks alternate
inter-query self-attention and cross-attention into the context tokens
(restricted to the tokens nearest the ego), and three separate MLP heads
emit per-waypoint Gaussian parameters, mode confidence logits, and ranking
scores.  Together with the context encoder this forms the denoiser queried
by the Euler sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, DimensionError
from .encoder import ContextEncoder, ContextTokens, EncoderConfig, PlanarPositionalEncoding, SceneBatch
from .flowmatch import FlowSampleResult, ode_sample, sample_noise

TRAJ_PARAM_DIM = 5  # mu_x, mu_y, log sigma_x, log sigma_y, rho
RHO_BOUND = 1.0 - 1e-4


@dataclass(frozen=True)
class DecoderConfig:
    """Width/depth of the trajectory decoder and its query set."""

    layers: int = 2
    embed_dim: int = 128
    heads: int = 4
    n_queries: int = 8
    cross_local_k: int = 32
    t_future: int = 16
    time_embed_dim: int = 16

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("decoder needs at least one layer")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.n_queries < 1:
            raise ConfigError("n_queries must be >= 1")
        if self.cross_local_k < 1:
            raise ConfigError("cross_local_k must be >= 1")
        if self.t_future < 1:
            raise ConfigError("t_future must be >= 1")
        if self.time_embed_dim % 2 != 0:
            raise ConfigError("time_embed_dim must be even")


@dataclass
class DecoderOutput:
    """Denoiser outputs for one batch.

    Attributes:
        traj_params: [B, N_q, T_f, 5] per-waypoint bivariate-Gaussian
            parameters (mu_x, mu_y, log sigma_x, log sigma_y, rho) with
            |rho| <= 1 - 1e-4 already applied.
        logits: [B, N_q] mode confidence logits S.
        rank_scores: [B, N_q] listwise ranking scores r.
    """

    traj_params: torch.Tensor
    logits: torch.Tensor
    rank_scores: torch.Tensor

    @property
    def traj_mean(self) -> torch.Tensor:
        """[B, N_q, T_f, 2] predicted clean trajectories (Gaussian means)."""
        return self.traj_params[..., 0:2]


class FlowTimeEmbedding(nn.Module):
    """Sinusoidal embedding of the scalar flow time t in [0, 1).

    Frequencies run geometrically from 1 to max_freq; the modest top
    frequency keeps the embedding Lipschitz, so nearby times map to nearby
    embeddings.
    """

    def __init__(self, dim: int, max_freq: float = 100.0):
        super().__init__()
        half = dim // 2
        exponents = torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
        self.register_buffer("freqs", max_freq**exponents)  # [half], 1 .. max_freq

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        """[...] times -> [..., dim] embeddings."""
        phase = t.unsqueeze(-1) * self.freqs
        return torch.cat([torch.sin(phase), torch.cos(phase)], dim=-1)


def _mlp3(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    """Three-layer GELU MLP used by the output heads."""
    return nn.Sequential(
        nn.Linear(in_dim, hidden, dtype=torch.float64),
        nn.GELU(),
        nn.Linear(hidden, hidden, dtype=torch.float64),
        nn.GELU(),
        nn.Linear(hidden, out_dim, dtype=torch.float64),
    )


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int, key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Scaled dot-product attention on projected tensors.

    Args:
        q: [B, Nq, D], k/v: [B, Nk, D], key_mask: [B, Nk] or None.

    Returns:
        [B, Nq, D].
    """
    b, nq, d = q.shape
    nk = k.shape[1]
    head_dim = d // heads
    q = q.reshape(b, nq, heads, head_dim).transpose(1, 2)  # [B, H, Nq, hd]
    k = k.reshape(b, nk, heads, head_dim).transpose(1, 2)
    v = v.reshape(b, nk, heads, head_dim).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(head_dim)  # [B, H, Nq, Nk]
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.unsqueeze(1).unsqueeze(2), float("-inf"))
    attn = torch.softmax(scores, dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
    return out


class DecoderBlock(nn.Module):
    """Pre-norm block: query self-attention, context cross-attention, FFN.

    The per-mode embedding PQ joins query/key projections in self-attention
    and is concatenated to the query input of cross-attention; context keys
    carry their anchor position encoding, values stay position-free.
    """

    def __init__(self, dim: int, heads: int, context_dim: int):
        super().__init__()
        self.heads = heads
        self.norm_self = nn.LayerNorm(dim, dtype=torch.float64)
        self.self_q = nn.Linear(dim, dim, dtype=torch.float64)
        self.self_k = nn.Linear(dim, dim, dtype=torch.float64)
        self.self_v = nn.Linear(dim, dim, dtype=torch.float64)
        self.self_out = nn.Linear(dim, dim, dtype=torch.float64)

        self.norm_cross = nn.LayerNorm(dim, dtype=torch.float64)
        self.cross_q = nn.Linear(2 * dim, dim, dtype=torch.float64)
        self.cross_k = nn.Linear(2 * context_dim, dim, dtype=torch.float64)
        self.cross_v = nn.Linear(context_dim, dim, dtype=torch.float64)
        self.cross_out = nn.Linear(dim, dim, dtype=torch.float64)

        self.norm_ffn = nn.LayerNorm(dim, dtype=torch.float64)
        self.ffn = nn.Sequential(
            nn.Linear(dim, 4 * dim, dtype=torch.float64),
            nn.GELU(),
            nn.Linear(4 * dim, dim, dtype=torch.float64),
        )

    def forward(
        self,
        x: torch.Tensor,
        pq: torch.Tensor,
        context_kv: torch.Tensor,
        context_pe: torch.Tensor,
        context_mask: torch.Tensor,
    ) -> torch.Tensor:
        """Args:
            x: [B, N_q, D] query tokens.
            pq: [B, N_q, D] per-mode embeddings.
            context_kv: [B, Kc, Dc] selected context tokens.
            context_pe: [B, Kc, Dc] their position encodings.
            context_mask: [B, Kc] real-token mask.
        """
        h = self.norm_self(x)
        attn = _attend(self.self_q(h + pq), self.self_k(h + pq), self.self_v(h), self.heads)
        x = x + self.self_out(attn)

        h = self.norm_cross(x)
        q = self.cross_q(torch.cat([h, pq], dim=-1))
        k = self.cross_k(torch.cat([context_kv, context_pe], dim=-1))
        v = self.cross_v(context_kv)
        x = x + self.cross_out(_attend(q, k, v, self.heads, key_mask=context_mask))

        x = x + self.ffn(self.norm_ffn(x))
        return x


class TrajectoryDecoder(nn.Module):
    """Decode noisy trajectories + context into denoised modes and scores."""

    def __init__(self, config: DecoderConfig, context_dim: int):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.traj_embed = nn.Sequential(
            nn.Linear(config.t_future * 2, d, dtype=torch.float64),
            nn.GELU(),
            nn.Linear(d, d, dtype=torch.float64),
            # unit-scale the trajectory feature so the noisy input is not
            # drowned out by the mode/context components of the query token
            nn.LayerNorm(d, dtype=torch.float64),
        )
        self.time_embedding = FlowTimeEmbedding(config.time_embed_dim)
        # N(0,1) like an embedding table: mode identities must stay visible
        # next to the unit-scale trajectory and context features
        self.query_embed = nn.Parameter(torch.randn(config.n_queries, d, dtype=torch.float64))
        self.ego_proj = nn.Linear(context_dim, d, dtype=torch.float64)
        self.fuse = nn.Sequential(
            nn.Linear(2 * d + config.time_embed_dim, d, dtype=torch.float64),
            nn.GELU(),
            nn.Linear(d, d, dtype=torch.float64),
            # queries join a pre-norm residual stream whose increments are
            # O(1); entering at matching scale keeps them influential
            nn.LayerNorm(d, dtype=torch.float64),
        )
        self.context_pe = PlanarPositionalEncoding(context_dim)
        self.blocks = nn.ModuleList(DecoderBlock(d, config.heads, context_dim) for _ in range(config.layers))
        self.final_norm = nn.LayerNorm(d, dtype=torch.float64)
        self.traj_head = _mlp3(d, d, config.t_future * TRAJ_PARAM_DIM)
        self.score_head = _mlp3(d, d, 1)
        self.rank_head = _mlp3(d, d, 1)

    def mode_embeddings(self, ego_token: torch.Tensor) -> torch.Tensor:
        """PQ_i = learnable per-mode embedding + projected ego context token."""
        return self.query_embed.unsqueeze(0) + self.ego_proj(ego_token).unsqueeze(1)  # [B, N_q, D]

    def build_queries(self, yt: torch.Tensor, t, ego_token: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Initial query tokens from (noisy trajectory, flow time, mode id).

        Args:
            yt: [B, N_q, T_f, 2] noisy trajectories, one per mode.
            t: scalar flow time.
            ego_token: [B, Dc] encoded ego context token.

        Returns:
            (queries [B, N_q, D], pq [B, N_q, D]).
        """
        b, n_q, t_f, d_t = yt.shape
        if n_q != self.config.n_queries or t_f != self.config.t_future or d_t != 2:
            raise DimensionError(
                f"expected noisy trajectories [B, {self.config.n_queries}, {self.config.t_future}, 2], got {tuple(yt.shape)}"
            )
        traj_feat = self.traj_embed(yt.reshape(b, n_q, t_f * 2))  # [B, N_q, D]
        t = torch.as_tensor(t, dtype=yt.dtype, device=yt.device)
        time_feat = self.time_embedding(t).expand(b, n_q, -1)  # [B, N_q, Dt]
        pq = self.mode_embeddings(ego_token)
        queries = self.fuse(torch.cat([traj_feat, time_feat, pq], dim=-1))
        return queries, pq

    def _select_context(self, context: ContextTokens) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """The cross_local_k valid context tokens nearest the ego anchor."""
        positions = context.positions  # [B, N, 2]
        ego_anchor = positions[:, 0:1, :]
        dist = (positions - ego_anchor).norm(dim=-1)  # [B, N]
        dist = dist.masked_fill(~context.valid, float("inf"))
        k = min(self.config.cross_local_k, positions.shape[1])
        idx = torch.argsort(dist, dim=-1, stable=True)[:, :k]  # [B, Kc]
        mask = torch.gather(dist, 1, idx) < float("inf")
        kv = torch.gather(context.tokens, 1, idx.unsqueeze(-1).expand(-1, -1, context.tokens.shape[-1]))
        pe = self.context_pe(torch.gather(positions, 1, idx.unsqueeze(-1).expand(-1, -1, 2)))
        return kv, pe, mask

    def decode(self, queries: torch.Tensor, pq: torch.Tensor, context: ContextTokens) -> DecoderOutput:
        """Run the decoder stack and the three output heads."""
        kv, pe, mask = self._select_context(context)
        x = queries
        for block in self.blocks:
            x = block(x, pq, kv, pe, mask)
        h = self.final_norm(x)  # [B, N_q, D]

        raw = self.traj_head(h).reshape(*h.shape[:2], self.config.t_future, TRAJ_PARAM_DIM)
        rho = RHO_BOUND * torch.tanh(raw[..., 4:5])
        traj_params = torch.cat([raw[..., 0:4], rho], dim=-1)
        logits = self.score_head(h).squeeze(-1)  # [B, N_q]
        rank_scores = self.rank_head(h).squeeze(-1)
        return DecoderOutput(traj_params=traj_params, logits=logits, rank_scores=rank_scores)

    def forward(self, yt: torch.Tensor, t, context: ContextTokens) -> DecoderOutput:
        queries, pq = self.build_queries(yt, t, context.ego_token)
        return self.decode(queries, pq, context)


class Denoiser(nn.Module):
    """Full model F(Y_t, C, t): context encoder + trajectory decoder."""

    def __init__(self, encoder_config: EncoderConfig, decoder_config: DecoderConfig):
        super().__init__()
        self.encoder = ContextEncoder(encoder_config)
        self.decoder = TrajectoryDecoder(decoder_config, context_dim=encoder_config.embed_dim)

    @property
    def n_queries(self) -> int:
        return self.decoder.config.n_queries

    @property
    def t_future(self) -> int:
        return self.decoder.config.t_future

    def encode_context(self, batch: SceneBatch) -> ContextTokens:
        """Encode once, reuse across flow times (context does not see t)."""
        return self.encoder(batch)

    def denoise(self, context: ContextTokens, yt: torch.Tensor, t) -> DecoderOutput:
        return self.decoder(yt, t, context)

    def forward(self, batch: SceneBatch, yt: torch.Tensor, t) -> DecoderOutput:
        return self.denoise(self.encode_context(batch), yt, t)

    def noise_shape(self, n_scenes: int) -> tuple[int, int, int, int]:
        return (n_scenes, self.n_queries, self.t_future, 2)

    @torch.no_grad()
    def sample(
        self,
        batch: SceneBatch,
        steps: int,
        generator: torch.Generator | None = None,
        context: ContextTokens | None = None,
    ) -> tuple[DecoderOutput, FlowSampleResult]:
        """Draw noise and Euler-integrate it into trajectory predictions.

        Returns:
            (final-step DecoderOutput, full FlowSampleResult).  The output
            trajectories are the final step's denoised means.
        """
        if context is None:
            context = self.encode_context(batch)
        y0 = sample_noise(self.noise_shape(batch.n_scenes), generator)

        def denoise_fn(y, t):
            out = self.denoise(context, y, t)
            return out.traj_mean, out

        result = ode_sample(denoise_fn, y0, steps)
        return result.payload, result
