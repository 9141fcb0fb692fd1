"""Pre-training loop: schedules, optimizer/EMA steps, logging, checkpoints.

Scene order, mask draws and weight init all come from counter-keyed streams
of the run seed, so a run is a pure function of its config and a resumed
run continues the uninterrupted log stream exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, FormatError, NumericsError
from .grid import GridSpec
from .model import (
    LossBreakdown,
    ModelState,
    batch_std_summary,
    ema_update,
    init_model_state,
    jepa_loss,
    total_loss,
    variance_reg_loss,
)
from .optim import AdamState, adam_step
from .pipeline import SceneSample, build_plans, forward_batch
from .rng import stream

CHECKPOINT_MAGIC = b"ADLJEPA1"
CHECKPOINT_VERSION = 1

LOG_FIELDS = (
    "loss_pretrain",
    "loss_reg",
    "loss_reg_prediction_target_voxels",
    "loss_reg_context_context_voxels",
    "loss_jepa",
    "loss_cos_jepa_target_voxels",
    "loss_cos_jepa_target_empty_voxels",
    "var_target_target_voxels",
    "var_prediction_target_voxels",
    "var_prediction_target_empty_voxels",
    "var_context_context_voxels",
    "learning_rate",
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr_peak: float = 3e-4
    lr_warmup_frac: float = 0.4
    lr_start_div: float = 10.0
    lr_final_div: float = 1000.0
    weight_decay: float = 0.01
    grad_clip: float = 0.0  # 0 disables clipping
    masking_ratio: float = 0.5
    alpha_empty: float = 0.25
    alpha_nonempty: float = 0.75
    beta_context: float = 1.0
    beta_prediction: float = 1.0
    lambda_jepa: float = 1.0
    lambda_reg: float = 1.0
    gamma: float = 0.0  # 0 resolves to 1/sqrt(embed_dim)
    var_eps: float = 1e-8
    eta_start: float = 0.996
    eta_frozen: bool = False
    seed: int = 666
    encoder_channels: tuple[int, int, int] = (32, 64, 128)
    predictor_depth: int = 3
    use_empty_token: bool = True
    use_mask_token: bool = True
    use_variance_reg: bool = True
    mask_empty_cells: bool = True
    reg_per_input: bool = True
    reg_sum_over_batch: bool = False
    target_input: str = "hidden_only"
    checkpoint_every: int = 0  # steps between periodic checkpoints; 0 = final only

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        for name in ("lr_peak", "lr_start_div", "lr_final_div", "eta_start"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.masking_ratio < 1.0:
            raise ConfigError("masking_ratio must lie in (0, 1)")
        if not 0.0 < self.lr_warmup_frac < 1.0:
            raise ConfigError("lr_warmup_frac must lie in (0, 1)")
        if self.predictor_depth not in (1, 3, 6):
            raise ConfigError("predictor_depth must be one of 1, 3, 6")
        if self.target_input not in ("hidden_only", "full"):
            raise ConfigError("target_input must be 'hidden_only' or 'full'")
        if len(self.encoder_channels) != 3:
            raise ConfigError("encoder_channels must have three stages")

    def resolve_gamma(self, embed_dim: int) -> float:
        return self.gamma if self.gamma > 0 else 1.0 / math.sqrt(embed_dim)


def lr_at(
    step: int,
    total_steps: int,
    lr_peak: float,
    warmup_frac: float = 0.4,
    start_div: float = 10.0,
    final_div: float = 1000.0,
) -> float:
    """One-cycle: linear warm-up to the peak, then cosine anneal to the floor."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm_end = warmup_frac * total_steps
    start = lr_peak / start_div
    floor = lr_peak / final_div
    if step <= warm_end:
        frac = step / warm_end if warm_end > 0 else 1.0
        return start + (lr_peak - start) * frac
    frac = (step - warm_end) / (total_steps - warm_end)
    return floor + (lr_peak - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


def eta_at(step: int, total_steps: int, eta_start: float, frozen: bool = False) -> float:
    if frozen:
        return eta_start
    return eta_start + (1.0 - eta_start) * (step / total_steps if total_steps else 1.0)


def steps_per_epoch(n_scenes: int, batch_size: int) -> int:
    return math.ceil(n_scenes / batch_size)


def train_step(
    state: ModelState,
    batch: list[SceneSample],
    config: TrainConfig,
    adam: AdamState,
    step: int,
    epoch: int,
    total_steps: int,
) -> LossBreakdown:
    """One optimization step; deterministic given (config.seed, step)."""
    if not batch:
        raise ValueError("empty batch")
    gamma = config.resolve_gamma(state.embed_dim)
    lr = lr_at(
        step, total_steps, config.lr_peak,
        config.lr_warmup_frac, config.lr_start_div, config.lr_final_div,
    )
    plans = build_plans(
        batch, state.grid, config.masking_ratio, config.seed, epoch,
        mask_empty_cells=config.mask_empty_cells,
    )
    fb = forward_batch(
        state, batch, plans,
        target_input=config.target_input,
        use_empty_token=config.use_empty_token,
        use_mask_token=config.use_mask_token,
    )
    l_jepa, comp_empty, comp_nonempty = jepa_loss(
        fb.shat_c, fb.shat_t, plans, config.alpha_empty, config.alpha_nonempty
    )
    if config.use_variance_reg:
        l_reg, comp_ctx, comp_pred = variance_reg_loss(
            fb.zhat_c, fb.shat_c, plans,
            config.beta_context, config.beta_prediction, gamma, config.var_eps,
            per_input=config.reg_per_input,
            sum_over_batch=config.reg_sum_over_batch,
        )
    else:
        l_reg = fb.tape.constant(np.asarray(0.0))
        comp_ctx = comp_pred = l_reg
    loss = total_loss(l_jepa, l_reg, config.lambda_jepa, config.lambda_reg)

    breakdown = LossBreakdown(
        loss_pretrain=loss.item(),
        loss_reg=l_reg.item(),
        loss_reg_prediction_target_voxels=comp_pred.item(),
        loss_reg_context_context_voxels=comp_ctx.item(),
        loss_jepa=l_jepa.item(),
        loss_cos_jepa_target_voxels=comp_nonempty.item(),
        loss_cos_jepa_target_empty_voxels=comp_empty.item(),
        var_target_target_voxels=batch_std_summary(
            fb.shat_t.data, plans, "masked_nonempty", config.var_eps
        ),
        var_prediction_target_voxels=batch_std_summary(
            fb.shat_c.data, plans, "masked_nonempty", config.var_eps
        ),
        var_prediction_target_empty_voxels=batch_std_summary(
            fb.shat_c.data, plans, "masked_empty", config.var_eps
        ),
        var_context_context_voxels=batch_std_summary(
            fb.zhat_c.data, plans, "unmasked_nonempty", config.var_eps
        ),
        learning_rate=lr,
    )
    if not all(math.isfinite(v) for v in breakdown.as_dict().values()):
        raise NumericsError("non-finite loss at step %d" % step, breakdown=breakdown)

    fb.tape.backward(loss)
    tensors = {f"context.{k}": t for k, t in fb.context_params.items()}
    tensors.update({f"predictor.{k}": t for k, t in fb.predictor_params.items()})
    if config.use_empty_token:
        tensors["tokens.empty"] = fb.token_params["empty"]
    if config.use_mask_token:
        tensors["tokens.mask"] = fb.token_params["mask"]
    grads = {name: t.grad for name, t in tensors.items()}
    if config.grad_clip > 0.0:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > config.grad_clip:
            factor = config.grad_clip / norm
            grads = {name: g * factor for name, g in grads.items()}

    params = state.trainable(
        use_empty_token=config.use_empty_token, use_mask_token=config.use_mask_token
    )
    adam.lr = lr
    adam_step(adam, params, grads)
    ema_update(state, eta_at(step, total_steps, config.eta_start, config.eta_frozen))
    return breakdown


@dataclass
class RunResult:
    state: ModelState
    adam: AdamState
    history: list[LossBreakdown] = field(default_factory=list)


def run_pretraining(
    scenes: list[SceneSample],
    config: TrainConfig,
    grid: GridSpec,
    *,
    state: ModelState | None = None,
    adam: AdamState | None = None,
    start_step: int = 0,
    log_fh=None,
    checkpoint_path=None,
    step_callback=None,
) -> RunResult:
    """Train for config.epochs over `scenes`, resuming from `start_step`."""
    if not scenes:
        raise ConfigError("no scenes to train on")
    if state is None:
        state = init_model_state(
            grid, config.encoder_channels, config.predictor_depth, config.seed
        )
    if adam is None:
        adam = AdamState(lr=config.lr_peak, weight_decay=config.weight_decay)
    per_epoch = steps_per_epoch(len(scenes), config.batch_size)
    total_steps = config.epochs * per_epoch
    history: list[LossBreakdown] = []

    step = start_step
    while step < total_steps:
        epoch = step // per_epoch
        order = stream("order", config.seed, epoch).permutation(len(scenes))
        within = step % per_epoch
        for b in range(within, per_epoch):
            batch_ids = order[b * config.batch_size : (b + 1) * config.batch_size]
            batch = [scenes[i] for i in batch_ids]
            breakdown = train_step(state, batch, config, adam, step, epoch, total_steps)
            history.append(breakdown)
            if log_fh is not None:
                record = {"step": step, "epoch": epoch}
                record.update(breakdown.as_dict())
                log_fh.write(json.dumps(record) + "\n")
            if step_callback is not None:
                step_callback(step, breakdown)
            step += 1
            if (
                checkpoint_path is not None
                and config.checkpoint_every > 0
                and step % config.checkpoint_every == 0
                and step < total_steps
            ):
                save_checkpoint(
                    _periodic_name(checkpoint_path, step), state, adam, config, step
                )
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state, adam, config, step)
    return RunResult(state=state, adam=adam, history=history)


def _periodic_name(path, step: int):
    import os

    stem, ext = os.path.splitext(str(path))
    return f"{stem}_{step:07d}{ext}"


def epoch_means(history: list[LossBreakdown], per_epoch: int) -> list[dict[str, float]]:
    rows = []
    for start in range(0, len(history), per_epoch):
        chunk = history[start : start + per_epoch]
        row = {"epoch": start // per_epoch}
        for name in LOG_FIELDS:
            row[name] = float(np.mean([getattr(b, name) for b in chunk]))
        rows.append(row)
    return rows


def write_metrics_csv(path, history: list[LossBreakdown], per_epoch: int) -> None:
    rows = epoch_means(history, per_epoch)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(("epoch",) + LOG_FIELDS) + "\n")
        for row in rows:
            fh.write(
                ",".join([str(row["epoch"])] + [repr(row[n]) for n in LOG_FIELDS]) + "\n"
            )


# ---------------------------------------------------------------------------
# checkpoints: magic, version, config json, step, named float64 tensors


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    head = _pack_str(name) + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + arr.astype("<f8").tobytes()


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated at byte offset {self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.string()
        ndim = struct.unpack("<B", self.take(1))[0]
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape)
        return name, data.astype(np.float64).copy()


def save_checkpoint(path, state: ModelState, adam: AdamState, config: TrainConfig,
                    step: int) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    for group, params in (
        ("context", state.context),
        ("target", state.target),
        ("predictor", state.predictor),
        ("tokens", state.tokens),
    ):
        tensors.extend((f"{group}.{k}", v) for k, v in params.items())
    tensors.extend((f"adam.m.{k}", v) for k, v in adam.m.items())
    tensors.extend((f"adam.v.{k}", v) for k, v in adam.v.items())

    meta = {
        "config": asdict(config),
        "grid": asdict(state.grid),
        "channels": list(state.channels),
        "predictor_depth": state.predictor_depth,
        "step": step,
        "adam": {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "weight_decay": adam.weight_decay, "t": adam.t,
        },
        "rng_key": {"seed": config.seed, "step": step},
    }
    blob = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
    blob += _pack_str(json.dumps(meta, sort_keys=True))
    blob += struct.pack("<Q", step) + struct.pack("<I", len(tensors))
    for name, arr in tensors:
        blob += _pack_tensor(name, arr)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> tuple[ModelState, AdamState, TrainConfig, int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    rd = _Reader(blob, path)
    if rd.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic; not a checkpoint")
    version = rd.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(rd.string())
    step = rd.u64()
    n_tensors = rd.u32()
    groups: dict[str, dict[str, np.ndarray]] = {
        "context": {}, "target": {}, "predictor": {}, "tokens": {},
        "adam.m": {}, "adam.v": {},
    }
    for _ in range(n_tensors):
        name, arr = rd.tensor()
        group, key = name.split(".", 1)
        if group == "adam":
            sub, key = key.split(".", 1)
            groups[f"adam.{sub}"][key] = arr
        else:
            groups[group][key] = arr
    if rd.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - rd.pos} trailing bytes")

    cfg_kw = dict(meta["config"])
    cfg_kw["encoder_channels"] = tuple(cfg_kw["encoder_channels"])
    config = TrainConfig(**cfg_kw)
    grid = GridSpec(**meta["grid"])
    state = ModelState(
        grid=grid,
        channels=tuple(meta["channels"]),
        predictor_depth=int(meta["predictor_depth"]),
        context=groups["context"],
        target=groups["target"],
        predictor=groups["predictor"],
        tokens=groups["tokens"],
    )
    am = meta["adam"]
    adam = AdamState(
        lr=am["lr"], beta1=am["beta1"], beta2=am["beta2"], eps=am["eps"],
        weight_decay=am["weight_decay"], t=am["t"],
        m=groups["adam.m"], v=groups["adam.v"],
    )
    return state, adam, config, step
