"""Training loop, checkpointing, evaluation, and the ablation driver.

One optimizer step: draw noise and a flow time, optionally run the
self-conditioning first pass (re-noising the model's own prediction), run
the main forward pass, and descend the summed loss of both passes with
AdamW under a linearly decaying learning rate.  Checkpoints are a single
versioned binary file that restores training bit-exactly, including
optimizer and RNG state.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .decoder import DecoderConfig, DecoderOutput, Denoiser
from .encoder import EncoderConfig, SceneBatch, stack_scenes
from .errors import ConfigError, DataError, NumericsError
from .flowmatch import sample_flow_time, sample_noise, self_conditioning_pass
from .losses import LossBreakdown, total_loss
from .metrics import MetricReport, evaluate
from .scene import Normalizer, SceneRecord, fit_normalizer
from .selection import NMSConfig, PredictionRecord, nms_select

CHECKPOINT_MAGIC = b"TJFL"
CHECKPOINT_VERSION = 1
_BLOCK_ARRAY = 0
_BLOCK_BYTES = 1

# hyperparameters sized for a full-scale run on a large real dataset; the
# desk-scale defaults below keep the same shape at a tractable size
FULL_SCALE_TRAIN_DEFAULTS = {
    "epochs": 40,
    "batch_size": 80,
    "peak_lr": 1e-4,
    "weight_decay": 0.01,
    "lambda_rank": 0.1,
    "sc_probability": 0.5,
}

LOG_COLUMNS = ("step", "lr", "l_flow", "l_cls", "l_rank", "total", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    """Flat training + model configuration (one key = value per config line)."""

    # optimization schedule
    epochs: int = 20
    batch_size: int = 16
    peak_lr: float = 1e-3
    weight_decay: float = 0.01
    lambda_rank: float = 0.1
    sc_probability: float = 0.5
    seed: int = 0
    regression_mode: str = "gmm_nll"
    rank_on_logits: bool = False
    time_schedule: str = "uniform"
    time_beta_a: float = 1.0
    time_beta_b: float = 1.0
    optimizer: str = "adamw"
    # encoder
    enc_layers: int = 2
    enc_dim: int = 64
    enc_heads: int = 4
    enc_local_k: int = 8
    # decoder
    dec_layers: int = 2
    dec_dim: int = 128
    dec_heads: int = 4
    n_queries: int = 8
    cross_local_k: int = 32
    time_embed_dim: int = 16
    # selection + evaluation.  The suppression radius must sit well below the
    # branch separation of the scenes (~2 units at fork scale) and below the
    # initial proposal spread: if every proposal falls inside one radius, NMS
    # keeps a single survivor, the same mode wins every step, and the
    # winner-take-all losses collapse all modes onto the branch average.
    nms_radius: float = 0.25
    k_out: int = 6
    miss_threshold: float = 2.0
    holdout_fraction: float = 0.1
    eval_steps: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.peak_lr < 0 or self.weight_decay < 0 or self.lambda_rank < 0:
            raise ConfigError("peak_lr, weight_decay, lambda_rank must be nonnegative")
        if not (0.0 <= self.sc_probability <= 1.0):
            raise ConfigError("sc_probability must lie in [0, 1]")
        if self.regression_mode not in ("l2", "gmm_nll"):
            raise ConfigError(f"regression_mode must be 'l2' or 'gmm_nll', got {self.regression_mode!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")
        if self.time_schedule not in ("uniform", "beta"):
            raise ConfigError(f"time_schedule must be 'uniform' or 'beta', got {self.time_schedule!r}")
        if self.k_out > self.n_queries:
            raise ConfigError(f"k_out ({self.k_out}) cannot exceed n_queries ({self.n_queries})")
        if not (0.0 <= self.holdout_fraction < 1.0):
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        if self.eval_steps < 1:
            raise ConfigError("eval_steps must be >= 1")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            layers=self.enc_layers, embed_dim=self.enc_dim, heads=self.enc_heads, local_k=self.enc_local_k
        )

    def decoder_config(self, t_future: int) -> DecoderConfig:
        return DecoderConfig(
            layers=self.dec_layers,
            embed_dim=self.dec_dim,
            heads=self.dec_heads,
            n_queries=self.n_queries,
            cross_local_k=self.cross_local_k,
            t_future=t_future,
            time_embed_dim=self.time_embed_dim,
        )

    def nms_config(self) -> NMSConfig:
        return NMSConfig(radius=self.nms_radius, k_out=self.k_out)


def _parse_value(raw: str, target_type: type):
    raw = raw.strip()
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return target_type(raw)


def parse_train_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse `key = value` lines (# comments allowed) into a TrainConfig."""
    known = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    type_map = {"int": int, "float": float, "str": str, "bool": bool}
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        target = type_map[known[key]] if isinstance(known[key], str) else known[key]
        try:
            overrides[key] = _parse_value(raw, target)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config line {lineno}: bad value for {key}: {exc}") from exc
    base_dict = dataclasses.asdict(base) if base is not None else {}
    base_dict.update(overrides)
    return TrainConfig(**base_dict)


def read_train_config(path, base: TrainConfig | None = None) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return parse_train_config(path.read_text(), base)


def config_to_text(config: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in dataclasses.fields(TrainConfig))


def config_hash(config: TrainConfig) -> str:
    canonical = "".join(f"{k}={v}\n" for k, v in sorted(dataclasses.asdict(config).items()))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def derived_seed(*parts: int) -> int:
    """Stable 63-bit seed derived from a tuple of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0] >> 1)


def make_model(config: TrainConfig, t_future: int) -> Denoiser:
    """Build the denoiser with weights seeded from config.seed."""
    torch.manual_seed(config.seed)
    return Denoiser(config.encoder_config(), config.decoder_config(t_future))


def make_optimizer(model: Denoiser, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adamw":
        return torch.optim.AdamW(
            model.parameters(), lr=config.peak_lr, betas=(0.9, 0.999), weight_decay=config.weight_decay
        )
    return torch.optim.SGD(model.parameters(), lr=config.peak_lr)


# ---------------------------------------------------------------------------
# Dataset tensors
# ---------------------------------------------------------------------------


@dataclass
class TrainData:
    """Whole dataset pre-stacked into one padded SceneBatch."""

    batch: SceneBatch
    gt_norm: torch.Tensor  # [N, T_f, 2] normalized futures
    records: list[SceneRecord]
    normalizer: Normalizer

    def __len__(self) -> int:
        return len(self.records)

    @property
    def t_future(self) -> int:
        return self.gt_norm.shape[1]

    @classmethod
    def from_records(cls, records: Sequence[SceneRecord], normalizer: Normalizer) -> "TrainData":
        if not records:
            raise DataError("dataset is empty")
        horizons = {r.future.horizon for r in records}
        if len(horizons) > 1:
            raise DataError(f"records disagree on future horizon: {sorted(horizons)}")
        batch = stack_scenes([r.context for r in records])
        gt = np.stack([normalizer.normalize_array(r.future.waypoints) for r in records])
        return cls(batch=batch, gt_norm=torch.as_tensor(gt, dtype=torch.float64), records=list(records), normalizer=normalizer)

    def subset(self, idx) -> tuple[SceneBatch, torch.Tensor]:
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.int64)
        fields = {f.name: getattr(self.batch, f.name)[idx] for f in dataclasses.fields(SceneBatch)}
        return SceneBatch(**fields), self.gt_norm[idx]


def split_indices(n: int, holdout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/holdout split (holdout may be empty)."""
    perm = np.random.default_rng(derived_seed(seed, 0xD1CE)).permutation(n)
    n_holdout = int(math.floor(n * holdout_fraction))
    return np.sort(perm[n_holdout:]), np.sort(perm[:n_holdout])


# ---------------------------------------------------------------------------
# Loss over a batch (shared by train_step and the gradient checks)
# ---------------------------------------------------------------------------


def _batch_terms(
    out: DecoderOutput, gt_norm: torch.Tensor, config: TrainConfig, normalizer: Normalizer
) -> LossBreakdown:
    flows, clss, ranks = [], [], []
    nms_cfg = config.nms_config()
    for i in range(gt_norm.shape[0]):
        rank_scores = out.logits[i] if config.rank_on_logits else out.rank_scores[i]
        lb = total_loss(
            out.traj_params[i],
            out.logits[i],
            rank_scores,
            gt_norm[i],
            normalizer,
            nms_cfg,
            lambda_rank=config.lambda_rank,
            regression_mode=config.regression_mode,
        )
        flows.append(lb.l_flow)
        clss.append(lb.l_cls)
        ranks.append(lb.l_rank)
    l_flow = torch.stack(flows).mean()
    l_cls = torch.stack(clss).mean()
    l_rank = torch.stack(ranks).mean()
    total = l_flow + l_cls + config.lambda_rank * l_rank
    return LossBreakdown(l_flow=l_flow, l_cls=l_cls, l_rank=l_rank, total=total, best_index=-1)


def compute_batch_loss(
    model: Denoiser,
    batch: SceneBatch,
    gt_norm: torch.Tensor,
    config: TrainConfig,
    normalizer: Normalizer,
    generator: torch.Generator,
) -> tuple[LossBreakdown, dict]:
    """One training forward pass (both passes when self-conditioning fires).

    The context tokens are encoded once and shared across the two passes.
    Returns the batch-averaged breakdown, where each term sums the main-pass
    and (if fired) first-pass contributions, so ``total`` is exactly the
    objective the optimizer descends.
    """
    context = model.encode_context(batch)
    b = gt_norm.shape[0]
    y1 = gt_norm.unsqueeze(1).expand(b, model.n_queries, gt_norm.shape[1], 2)
    y0 = sample_noise(tuple(y1.shape), generator)
    t = sample_flow_time(generator, config.time_schedule, (config.time_beta_a, config.time_beta_b))

    def denoise_fn(y, tt):
        out = model.denoise(context, y, tt)
        return out.traj_mean, out

    sc = self_conditioning_pass(denoise_fn, y0, y1, t, generator, config.sc_probability)
    out = model.denoise(context, sc.y_t, t)
    terms = _batch_terms(out, gt_norm, config, normalizer)
    if sc.fired:
        first = _batch_terms(sc.first_payload, gt_norm, config, normalizer)
        terms = LossBreakdown(
            l_flow=terms.l_flow + first.l_flow,
            l_cls=terms.l_cls + first.l_cls,
            l_rank=terms.l_rank + first.l_rank,
            total=terms.total + first.total,
            best_index=-1,
        )
    return terms, {"sc_fired": sc.fired, "t": float(t)}


def train_step(
    model: Denoiser,
    optimizer: torch.optim.Optimizer,
    batch: SceneBatch,
    gt_norm: torch.Tensor,
    config: TrainConfig,
    normalizer: Normalizer,
    generator: torch.Generator,
    lr: float | None = None,
) -> tuple[LossBreakdown, dict]:
    """One optimizer update; aborts (with diagnostics) on nonfinite loss."""
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    terms, diag = compute_batch_loss(model, batch, gt_norm, config, normalizer, generator)
    if not torch.isfinite(terms.total):
        raise NumericsError(
            "nonfinite training loss: "
            f"l_flow={float(terms.l_flow):.6g} l_cls={float(terms.l_cls):.6g} "
            f"l_rank={float(terms.l_rank):.6g} t={diag['t']:.6g} sc_fired={diag['sc_fired']}"
        )
    optimizer.zero_grad(set_to_none=True)
    terms.total.backward()
    optimizer.step()
    detached = LossBreakdown(
        l_flow=terms.l_flow.detach(),
        l_cls=terms.l_cls.detach(),
        l_rank=terms.l_rank.detach(),
        total=terms.total.detach(),
        best_index=-1,
    )
    return detached, diag


# ---------------------------------------------------------------------------
# Inference over a dataset
# ---------------------------------------------------------------------------


def predict(
    model: Denoiser,
    data: TrainData,
    idx: Sequence[int],
    steps: int,
    config: TrainConfig,
    generator: torch.Generator,
    chunk_size: int = 64,
) -> list[PredictionRecord]:
    """Sample trajectories for the given scene indices and apply NMS."""
    nms_cfg = config.nms_config()
    records: list[PredictionRecord] = []
    idx = list(idx)
    for at in range(0, len(idx), chunk_size):
        chunk = idx[at : at + chunk_size]
        batch, _ = data.subset(chunk)
        out, _ = model.sample(batch, steps, generator)
        means = out.traj_mean.numpy() * data.normalizer.scale + data.normalizer.offset
        conf = torch.sigmoid(out.logits).numpy()
        for row, scene_i in enumerate(chunk):
            selected = nms_select(means[row], conf[row], nms_cfg)
            records.append(PredictionRecord(data.records[scene_i].scene_id, selected))
    return records


def evaluate_model(
    model: Denoiser,
    data: TrainData,
    idx: Sequence[int],
    steps: int,
    config: TrainConfig,
    generator: torch.Generator,
) -> MetricReport:
    """Sample + NMS + metrics for the given scene indices."""
    predictions = predict(model, data, idx, steps, config, generator)
    entries = [
        (pred.predictions, data.records[scene_i].future, data.records[scene_i].context.ego)
        for pred, scene_i in zip(predictions, idx)
    ]
    return evaluate(entries, miss_threshold=config.miss_threshold)


# ---------------------------------------------------------------------------
# Checkpoint file: magic + version + length-prefixed named blocks
# ---------------------------------------------------------------------------


def _array_payload(tensor: torch.Tensor) -> bytes:
    arr = np.ascontiguousarray(tensor.detach().cpu().to(torch.float64).numpy(), dtype="<f8")
    dims = arr.shape
    return struct.pack("<I", arr.ndim) + b"".join(struct.pack("<Q", d) for d in dims) + arr.tobytes()


def _array_from_payload(payload: bytes) -> torch.Tensor:
    (ndim,) = struct.unpack_from("<I", payload, 0)
    dims = struct.unpack_from("<" + "Q" * ndim, payload, 4)
    data = np.frombuffer(payload, dtype="<f8", offset=4 + 8 * ndim).copy()
    return torch.as_tensor(data.reshape(dims), dtype=torch.float64)


def _write_blocks(path: Path, blocks: list[tuple[str, int, bytes]]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blocks)))
        for name, kind, payload in blocks:
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", kind))
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _read_blocks(path: Path) -> dict[str, tuple[int, bytes]]:
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<Q", raw, 8)
    blocks: dict[str, tuple[int, bytes]] = {}
    at = 16
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, at)
            at += 4
            name = raw[at : at + name_len].decode()
            at += name_len
            (kind,) = struct.unpack_from("<B", raw, at)
            at += 1
            (size,) = struct.unpack_from("<Q", raw, at)
            at += 8
            blocks[name] = (kind, raw[at : at + size])
            if len(blocks[name][1]) != size:
                raise DataError(f"{path}: truncated block {name!r}")
            at += size
    except struct.error as exc:
        raise DataError(f"{path}: truncated checkpoint ({exc})") from exc
    return blocks


@dataclass
class Checkpoint:
    """Deserialized training state."""

    config: TrainConfig
    normalizer: Normalizer
    step: int
    epoch: int
    t_future: int
    model_state: dict[str, torch.Tensor]
    opt_tensors: dict[str, torch.Tensor]
    opt_meta: dict
    rng_torch: bytes
    rng_data: bytes
    config_digest: str


def save_checkpoint(
    path,
    model: Denoiser,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    normalizer: Normalizer,
    step: int,
    epoch: int,
    data_generator: torch.Generator,
) -> None:
    """Atomically write the full training state to one binary file."""
    opt_state = optimizer.state_dict()
    opt_tensors: list[tuple[str, int, bytes]] = []
    state_steps: dict[str, float] = {}
    for idx, state in opt_state["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor) and value.ndim > 0:
                opt_tensors.append((f"opt/{idx}/{key}", _BLOCK_ARRAY, _array_payload(value)))
            else:
                state_steps[f"{idx}/{key}"] = float(value)
    meta = {
        "config": dataclasses.asdict(config),
        "config_hash": config_hash(config),
        "step": step,
        "epoch": epoch,
        "t_future": model.t_future,
        "optimizer": {"param_groups": opt_state["param_groups"], "scalars": state_steps},
    }
    blocks: list[tuple[str, int, bytes]] = [("meta", _BLOCK_BYTES, json.dumps(meta, sort_keys=True).encode())]
    blocks.append(("normalizer/offset", _BLOCK_ARRAY, _array_payload(torch.as_tensor(normalizer.offset))))
    blocks.append(("normalizer/scale", _BLOCK_ARRAY, _array_payload(torch.as_tensor(normalizer.scale))))
    for name, tensor in model.state_dict().items():
        blocks.append((f"model/{name}", _BLOCK_ARRAY, _array_payload(tensor)))
    blocks.extend(opt_tensors)
    blocks.append(("rng/torch", _BLOCK_BYTES, torch.get_rng_state().numpy().tobytes()))
    blocks.append(("rng/data", _BLOCK_BYTES, data_generator.get_state().numpy().tobytes()))
    _write_blocks(Path(path), blocks)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    blocks = _read_blocks(path)
    try:
        meta = json.loads(blocks["meta"][1].decode())
        config = TrainConfig(**meta["config"])
        normalizer = Normalizer(
            _array_from_payload(blocks["normalizer/offset"][1]).numpy(),
            _array_from_payload(blocks["normalizer/scale"][1]).numpy(),
        )
        model_state = {
            name[len("model/") :]: _array_from_payload(payload)
            for name, (kind, payload) in blocks.items()
            if name.startswith("model/")
        }
        opt_tensors = {
            name[len("opt/") :]: _array_from_payload(payload)
            for name, (kind, payload) in blocks.items()
            if name.startswith("opt/")
        }
        return Checkpoint(
            config=config,
            normalizer=normalizer,
            step=int(meta["step"]),
            epoch=int(meta["epoch"]),
            t_future=int(meta["t_future"]),
            model_state=model_state,
            opt_tensors=opt_tensors,
            opt_meta=meta["optimizer"],
            rng_torch=blocks["rng/torch"][1],
            rng_data=blocks["rng/data"][1],
            config_digest=meta["config_hash"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed checkpoint ({exc})") from exc


def restore_model(ck: Checkpoint) -> Denoiser:
    model = make_model(ck.config, ck.t_future)
    model.load_state_dict(ck.model_state)
    return model


def _restore_optimizer(model: Denoiser, ck: Checkpoint) -> torch.optim.Optimizer:
    optimizer = make_optimizer(model, ck.config)
    scalars = ck.opt_meta["scalars"]
    state: dict[int, dict] = {}
    for key, tensor in ck.opt_tensors.items():
        idx_str, _, field = key.partition("/")
        state.setdefault(int(idx_str), {})[field] = tensor
    for key, value in scalars.items():
        idx_str, _, field = key.partition("/")
        state.setdefault(int(idx_str), {})[field] = torch.tensor(value)
    optimizer.load_state_dict({"state": state, "param_groups": ck.opt_meta["param_groups"]})
    return optimizer


def load_model(path) -> tuple[Denoiser, TrainConfig, Normalizer]:
    """Rebuild just the model (inference use) from a checkpoint file."""
    ck = load_checkpoint(path)
    return restore_model(ck), ck.config, ck.normalizer


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Denoiser
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    normalizer: Normalizer
    data: TrainData
    train_idx: np.ndarray
    holdout_idx: np.ndarray
    log_rows: list[dict]
    eval_history: list[tuple[int, MetricReport]]
    steps_done: int
    total_steps: int


def _epoch_permutation(config: TrainConfig, epoch: int, n: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(derived_seed(config.seed, 1 + epoch))
    return torch.randperm(n, generator=gen)


def train(
    records: Sequence[SceneRecord],
    config: TrainConfig,
    normalizer: Normalizer | None = None,
    log_path=None,
    checkpoint_path=None,
    resume_from=None,
    max_steps: int | None = None,
    eval_every: int = 1,
    progress: Callable[[str], None] | None = None,
) -> TrainResult:
    """Run the full training loop over a scene dataset.

    Deterministic given (records, config): data order, noise, flow times,
    and the self-conditioning coin all derive from config.seed.  With
    ``resume_from`` the run continues bit-exactly where the checkpoint
    stopped (the config must hash-match).  ``max_steps`` stops early, which
    with ``checkpoint_path`` yields a resumable mid-run checkpoint.

    Args:
        eval_every: evaluate the holdout split every this many epochs
            (0 disables periodic evaluation).

    Returns:
        TrainResult; the final checkpoint is written to checkpoint_path.
    """
    torch.set_num_threads(1)  # reference mode: single-threaded determinism
    if normalizer is None:
        normalizer = fit_normalizer([r.future for r in records])
    data = TrainData.from_records(records, normalizer)
    train_idx, holdout_idx = split_indices(len(data), config.holdout_fraction, config.seed)
    if train_idx.size == 0:
        raise DataError("holdout fraction leaves no training scenes")

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.config_digest != config_hash(config):
            raise ConfigError("checkpoint was trained with a different configuration")
        model = restore_model(ck)
        optimizer = _restore_optimizer(model, ck)
        torch.set_rng_state(torch.frombuffer(bytearray(ck.rng_torch), dtype=torch.uint8).clone())
        data_generator = torch.Generator()
        data_generator.set_state(torch.frombuffer(bytearray(ck.rng_data), dtype=torch.uint8).clone())
        start_step = ck.step
    else:
        model = make_model(config, data.t_future)
        optimizer = make_optimizer(model, config)
        data_generator = torch.Generator().manual_seed(derived_seed(config.seed, 0xDA7A))
        start_step = 0

    steps_per_epoch = math.ceil(train_idx.size / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    stop_step = total_steps if max_steps is None else min(total_steps, start_step + max_steps)

    log_rows: list[dict] = []
    eval_history: list[tuple[int, MetricReport]] = []
    log_file = None
    log_writer = None
    if log_path is not None:
        log_file = Path(log_path)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        fresh = start_step == 0 or not log_file.exists()
        log_handle = log_file.open("w" if fresh else "a", newline="")
        log_writer = csv.writer(log_handle)
        if fresh:
            log_writer.writerow(LOG_COLUMNS)

    epoch = start_step // steps_per_epoch
    perm = _epoch_permutation(config, epoch, train_idx.size)
    try:
        for step in range(start_step, stop_step):
            new_epoch = step // steps_per_epoch
            if new_epoch != epoch or step == start_step:
                epoch = new_epoch
                perm = _epoch_permutation(config, epoch, train_idx.size)
            position = step % steps_per_epoch
            chosen = perm[position * config.batch_size : (position + 1) * config.batch_size]
            batch_idx = train_idx[chosen.numpy()]
            batch, gt = data.subset(batch_idx)
            lr = config.peak_lr * (1.0 - step / total_steps)
            began = time.perf_counter()
            terms, _diag = train_step(model, optimizer, batch, gt, config, normalizer, data_generator, lr=lr)
            wall_ms = 1000.0 * (time.perf_counter() - began)
            row = {
                "step": step + 1,
                "lr": lr,
                "l_flow": float(terms.l_flow),
                "l_cls": float(terms.l_cls),
                "l_rank": float(terms.l_rank),
                "total": float(terms.total),
                "wall_ms": wall_ms,
            }
            log_rows.append(row)
            if log_writer is not None:
                log_writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in LOG_COLUMNS])

            finished_epoch = (step + 1) % steps_per_epoch == 0
            if finished_epoch and eval_every and holdout_idx.size and (epoch + 1) % eval_every == 0:
                gen = torch.Generator().manual_seed(derived_seed(config.seed, 2, epoch))
                report = evaluate_model(model, data, holdout_idx, config.eval_steps, config, gen)
                eval_history.append((step + 1, report))
                if progress is not None:
                    progress(
                        f"epoch {epoch + 1}/{config.epochs} step {step + 1}/{total_steps} "
                        f"loss {row['total']:.4f} holdout minADE {report.min_ade:.4f}"
                    )
            elif progress is not None and finished_epoch:
                progress(f"epoch {epoch + 1}/{config.epochs} step {step + 1}/{total_steps} loss {row['total']:.4f}")
    finally:
        if log_writer is not None:
            log_handle.close()

    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path, model, optimizer, config, normalizer, stop_step, stop_step // steps_per_epoch, data_generator
        )
    return TrainResult(
        model=model,
        optimizer=optimizer,
        config=config,
        normalizer=normalizer,
        data=data,
        train_idx=train_idx,
        holdout_idx=holdout_idx,
        log_rows=log_rows,
        eval_history=eval_history,
        steps_done=stop_step,
        total_steps=total_steps,
    )


# ---------------------------------------------------------------------------
# Ablation driver
# ---------------------------------------------------------------------------

ABLATION_VARIANTS: tuple[tuple[str, dict], ...] = (
    ("full", {}),
    ("no_self_conditioning", {"sc_probability": 0.0}),
    ("no_ranking", {"lambda_rank": 0.0}),
)


@dataclass(frozen=True)
class AblationRow:
    variant: str
    seed: int
    ode_steps: int
    min_ade: float
    min_fde: float
    miss_rate: float
    map: float
    soft_map: float


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def aggregated(self) -> list[dict]:
        """Mean over seeds per (variant, ode_steps), in grid order."""
        out = []
        seen: dict[tuple[str, int], list[AblationRow]] = {}
        for row in self.rows:
            seen.setdefault((row.variant, row.ode_steps), []).append(row)
        for (variant, steps), group in seen.items():
            out.append(
                {
                    "variant": variant,
                    "ode_steps": steps,
                    "n_seeds": len(group),
                    "min_ade": float(np.mean([r.min_ade for r in group])),
                    "min_fde": float(np.mean([r.min_fde for r in group])),
                    "miss_rate": float(np.mean([r.miss_rate for r in group])),
                    "map": float(np.mean([r.map for r in group])),
                    "soft_map": float(np.mean([r.soft_map for r in group])),
                }
            )
        return out

    def seed_metric(self, variant: str, ode_steps: int, metric: str) -> dict[int, float]:
        return {r.seed: getattr(r, metric) for r in self.rows if r.variant == variant and r.ode_steps == ode_steps}


def write_ablation_csv(path, table: AblationTable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["variant", "ode_steps", "n_seeds", "min_ade", "min_fde", "miss_rate", "map", "soft_map"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in table.aggregated():
            writer.writerow([row[c] if not isinstance(row[c], float) else repr(row[c]) for c in columns])


def run_ablation(
    records: Sequence[SceneRecord],
    base_config: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    steps_list: Sequence[int] = (1, 5, 10),
    normalizer: Normalizer | None = None,
    out_csv=None,
    progress: Callable[[str], None] | None = None,
) -> AblationTable:
    """Train every ablation variant per seed and evaluate at several ODE steps.

    Variants: the full model, self-conditioning disabled, and the ranking
    loss removed.  Each (variant, seed) trains once; evaluation repeats on
    the holdout split at each step count.  The CSV holds one row per
    (variant, step count), averaged over seeds.
    """
    rows: list[AblationRow] = []
    for variant, overrides in ABLATION_VARIANTS:
        for seed in seeds:
            config = dataclasses.replace(base_config, seed=seed, **overrides)
            if progress is not None:
                progress(f"training variant={variant} seed={seed}")
            result = train(records, config, normalizer=normalizer, eval_every=0)
            for steps in steps_list:
                # one shared noise seed across step counts: the comparison is
                # then paired, isolating the ODE-step effect from draw noise
                gen = torch.Generator().manual_seed(derived_seed(seed, 3))
                report = evaluate_model(result.model, result.data, result.holdout_idx, steps, config, gen)
                rows.append(
                    AblationRow(
                        variant=variant,
                        seed=seed,
                        ode_steps=steps,
                        min_ade=report.min_ade,
                        min_fde=report.min_fde,
                        miss_rate=report.miss_rate,
                        map=report.map,
                        soft_map=report.soft_map,
                    )
                )
                if progress is not None:
                    progress(
                        f"variant={variant} seed={seed} steps={steps} "
                        f"minADE={report.min_ade:.4f} mAP={report.map:.4f}"
                    )
    table = AblationTable(rows)
    if out_csv is not None:
        write_ablation_csv(out_csv, table)
    return table
