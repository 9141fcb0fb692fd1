"""Differentiable core: twin encoders, tokens, predictor, losses, EMA.

The encoder is three stride-2 3D convolutions (4 -> c1 -> c2 -> c3 channels,
kernel 3, padding 1, ReLU after all but the last), so a grid of
``nx*ny*nz`` voxels becomes a ``[c3, nx/8, ny/8, nz/8]`` volume. Folding
the height axis into channels yields one embedding of dimension
``E = (nz/8) * c3`` per BEV cell, laid out as ``e = d * c3 + c``.

The predictor is a stack of kernel-3 2D convolutions over the BEV plane
(E -> E channels, ReLU between layers, none after the last) followed by
per-cell L2 normalization.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import NumericsError
from .grid import GridSpec
from .masking import BevMaskPlan
from .rng import stream

log = logging.getLogger(__name__)

ENC_KERNEL = 3
ENC_STRIDE = 2
ENC_PAD = 1
ENC_STAGES = 3
INPUT_CHANNELS = 4
VAR_EPS = 1e-8


@dataclass
class ModelState:
    grid: GridSpec
    channels: tuple[int, int, int]
    predictor_depth: int
    context: dict[str, np.ndarray]
    target: dict[str, np.ndarray]
    predictor: dict[str, np.ndarray]
    tokens: dict[str, np.ndarray]

    @property
    def embed_dim(self) -> int:
        return self.grid.bev_d * self.channels[-1]

    def trainable(
        self, *, use_empty_token: bool = True, use_mask_token: bool = True
    ) -> dict[str, np.ndarray]:
        params = {f"context.{k}": v for k, v in self.context.items()}
        params.update({f"predictor.{k}": v for k, v in self.predictor.items()})
        if use_empty_token:
            params["tokens.empty"] = self.tokens["empty"]
        if use_mask_token:
            params["tokens.mask"] = self.tokens["mask"]
        return params


@dataclass
class LossBreakdown:
    """The twelve per-step tracked scalars."""

    loss_pretrain: float
    loss_reg: float
    loss_reg_prediction_target_voxels: float
    loss_reg_context_context_voxels: float
    loss_jepa: float
    loss_cos_jepa_target_voxels: float
    loss_cos_jepa_target_empty_voxels: float
    var_target_target_voxels: float
    var_prediction_target_voxels: float
    var_prediction_target_empty_voxels: float
    var_context_context_voxels: float
    learning_rate: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def init_model_state(
    grid: GridSpec,
    channels: tuple[int, int, int] = (32, 64, 128),
    predictor_depth: int = 3,
    seed: int = 0,
) -> ModelState:
    """Fan-in-scaled uniform weights, zero biases, equal tokens at start."""
    rng = stream("init", seed)

    def uniform(shape, fan_in):
        a = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-a, a, size=shape)

    context: dict[str, np.ndarray] = {}
    cin = INPUT_CHANNELS
    for i, cout in enumerate(channels, start=1):
        context[f"enc{i}.w"] = uniform((cout, cin, ENC_KERNEL, ENC_KERNEL, ENC_KERNEL),
                                       cin * ENC_KERNEL**3)
        context[f"enc{i}.b"] = np.zeros(cout)
        cin = cout

    embed = grid.bev_d * channels[-1]
    predictor: dict[str, np.ndarray] = {}
    for i in range(1, predictor_depth + 1):
        predictor[f"pred{i}.w"] = uniform((embed, embed, 3, 3), embed * 9)
        predictor[f"pred{i}.b"] = np.zeros(embed)

    token = uniform((embed,), embed)
    tokens = {"empty": token.copy(), "mask": token.copy()}
    return ModelState(
        grid=grid,
        channels=tuple(channels),
        predictor_depth=predictor_depth,
        context=context,
        target=copy.deepcopy(context),
        predictor=predictor,
        tokens=tokens,
    )


def wrap_params(tape: Tape, arrays: dict[str, np.ndarray], trainable: bool) -> dict[str, Tensor]:
    return {k: tape.leaf(v, requires_grad=trainable) for k, v in arrays.items()}


def encode_bev(params: dict[str, Tensor], features: Tensor, n_stages: int = ENC_STAGES) -> Tensor:
    """Encoder forward + BEV reshape: [B,4,X,Y,Z] -> [B,H,W,E]."""
    h = features
    for i in range(1, n_stages + 1):
        w, b = params[f"enc{i}.w"], params[f"enc{i}.b"]
        h = ad.conv3d(h, w, stride=ENC_STRIDE, padding=ENC_PAD)
        h = ad.add(h, ad.reshape(b, (1, b.shape[0], 1, 1, 1)))
        if i < n_stages:
            h = ad.relu(h)
    bsz, ch, hh, ww, dd = h.shape
    h = ad.transpose(h, (0, 2, 3, 4, 1))  # [B,H,W,D,C]; embedding index e = d*C + c
    return ad.reshape(h, (bsz, hh, ww, dd * ch))


def predict(params: dict[str, Tensor], zhat: Tensor, depth: int) -> Tensor:
    """Predictor forward with per-cell L2 normalization of the output."""
    x = ad.transpose(zhat, (0, 3, 1, 2))  # [B,E,H,W]
    for i in range(1, depth + 1):
        w, b = params[f"pred{i}.w"], params[f"pred{i}.b"]
        x = ad.conv2d(x, w, stride=1, padding=1)
        x = ad.add(x, ad.reshape(b, (1, b.shape[0], 1, 1)))
        if i < depth:
            x = ad.relu(x)
    x = ad.transpose(x, (0, 2, 3, 1))
    return ad.l2_normalize(x)


def _batch_cells(plans: list[BevMaskPlan], attr: str) -> np.ndarray:
    """Stack per-scene (h, w) cell lists into one [M, 3] (n, h, w) array."""
    rows = []
    for n, plan in enumerate(plans):
        cells = getattr(plan, attr)
        if len(cells):
            rows.append(
                np.column_stack([np.full(len(cells), n, dtype=np.int64), cells])
            )
    if not rows:
        return np.empty((0, 3), dtype=np.int64)
    return np.concatenate(rows, axis=0)


def apply_tokens(
    z_c: Tensor,
    s_t: Tensor,
    plans: list[BevMaskPlan],
    empty_token: Tensor,
    mask_token: Tensor,
    *,
    use_empty_token: bool = True,
    use_mask_token: bool = True,
) -> tuple[Tensor, Tensor]:
    """Token substitution followed by per-cell L2 normalization.

    Context branch: unmasked empty cells get the empty token, all masked
    cells get the mask token. Target branch: only unmasked empty cells get
    the empty token; masked cells keep the target encoder's output (they are
    the prediction targets).
    """
    u_idx = _batch_cells(plans, "unmasked_empty")
    pq_idx = np.concatenate(
        [_batch_cells(plans, "masked_empty"), _batch_cells(plans, "masked_nonempty")],
        axis=0,
    )
    z = z_c
    if use_empty_token and len(u_idx):
        z = ad.replace_cells(z, u_idx, empty_token)
    if use_mask_token and len(pq_idx):
        z = ad.replace_cells(z, pq_idx, mask_token)
    s = s_t
    if use_empty_token and len(u_idx):
        s = ad.replace_cells(s, u_idx, empty_token)
    return ad.l2_normalize(z), ad.l2_normalize(s)


def jepa_loss(
    shat_c: Tensor,
    shat_t: Tensor,
    plans: list[BevMaskPlan],
    alpha_empty: float = 0.25,
    alpha_nonempty: float = 0.75,
) -> tuple[Tensor, Tensor, Tensor]:
    """Masked-cell cosine prediction loss, pooled over the whole batch.

    Returns (loss, empty_component, nonempty_component); the components are
    the unweighted means of (1 - cos) over masked empty / masked non-empty
    cells, and the loss is their alpha-weighted sum. A class with no masked
    cells anywhere in the batch contributes zero.
    """
    tape = shat_c.tape
    p_idx = _batch_cells(plans, "masked_empty")
    q_idx = _batch_cells(plans, "masked_nonempty")

    def term(idx):
        if len(idx) == 0:
            return tape.constant(np.asarray(0.0))
        cos = ad.cosine_similarity(
            ad.take_cells(shat_c, idx), ad.take_cells(shat_t, idx)
        )
        return ad.mean_all(ad.add_scalar(ad.scale(cos, -1.0), 1.0))

    comp_empty = term(p_idx)
    comp_nonempty = term(q_idx)
    loss = ad.add(
        ad.scale(comp_empty, alpha_empty), ad.scale(comp_nonempty, alpha_nonempty)
    )
    return loss, comp_empty, comp_nonempty


def variance_hinge(y: Tensor, gamma: float, eps: float = VAR_EPS) -> Tensor:
    """Mean over columns of max(0, gamma - sqrt(pop-variance + eps))."""
    if y.data.ndim != 2:
        raise ValueError(f"variance_hinge expects a [M, E] matrix, got {y.data.shape}")
    if y.data.shape[0] == 0:
        log.debug("variance_hinge on empty matrix; returning 0")
        return y.tape.constant(np.asarray(0.0))
    mu = ad.mean_axis(y, 0)
    d = ad.sub(y, mu)
    var = ad.mean_axis(ad.mul(d, d), 0)
    std = ad.sqrt(ad.add_scalar(var, eps))
    hinge = ad.relu(ad.add_scalar(ad.scale(std, -1.0), gamma))
    return ad.mean_all(hinge)


def variance_reg_loss(
    zhat_c: Tensor,
    shat_c: Tensor,
    plans: list[BevMaskPlan],
    beta_context: float = 1.0,
    beta_prediction: float = 1.0,
    gamma: float = 1.0 / 16.0,
    eps: float = VAR_EPS,
    *,
    per_input: bool = True,
    sum_over_batch: bool = False,
) -> tuple[Tensor, Tensor, Tensor]:
    """Variance floor on context embeddings at unmasked non-empty cells and
    predicted embeddings at masked non-empty cells.

    Each scene's cells form their own matrix (``per_input=True``); the
    per-scene hinges are summed and divided by the batch size unless
    ``sum_over_batch`` keeps the bare sum. ``per_input=False`` pools all
    scenes' cells into one matrix, which tolerates the degenerate solution
    of one constant embedding per scene.
    """
    tape = zhat_c.tape
    n_scenes = len(plans)

    def component(source: Tensor, attr: str) -> Tensor:
        if per_input:
            terms = []
            for n, plan in enumerate(plans):
                cells = getattr(plan, attr)
                if len(cells) == 0:
                    continue
                idx = np.column_stack([np.full(len(cells), n, dtype=np.int64), cells])
                terms.append(variance_hinge(ad.take_cells(source, idx), gamma, eps))
            if not terms:
                return tape.constant(np.asarray(0.0))
            total = terms[0]
            for t in terms[1:]:
                total = ad.add(total, t)
            if not sum_over_batch:
                total = ad.scale(total, 1.0 / n_scenes)
            return total
        idx = _batch_cells(plans, attr)
        if len(idx) == 0:
            return tape.constant(np.asarray(0.0))
        return variance_hinge(ad.take_cells(source, idx), gamma, eps)

    comp_ctx = component(zhat_c, "unmasked_nonempty")
    comp_pred = component(shat_c, "masked_nonempty")
    loss = ad.add(ad.scale(comp_ctx, beta_context), ad.scale(comp_pred, beta_prediction))
    return loss, comp_ctx, comp_pred


def total_loss(jepa: Tensor, reg: Tensor, lambda_jepa: float, lambda_reg: float) -> Tensor:
    for name, t in (("jepa", jepa), ("reg", reg)):
        if not np.isfinite(t.data).all():
            raise NumericsError(f"non-finite {name} loss component")
    return ad.add(ad.scale(jepa, lambda_jepa), ad.scale(reg, lambda_reg))


def ema_update(state: ModelState, eta: float) -> None:
    """Target <- eta * target + (1 - eta) * context, elementwise."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    for key, tgt in state.target.items():
        tgt *= eta
        tgt += (1.0 - eta) * state.context[key]


# ---------------------------------------------------------------------------
# diagnostics-side scalar summaries (plain numpy, no tape)


def std_summary(rows: np.ndarray, eps: float = VAR_EPS) -> float:
    """Mean over embedding dims of sqrt(population variance + eps)."""
    rows = np.asarray(rows)
    if rows.shape[0] == 0:
        return 0.0
    return float(np.sqrt(rows.var(axis=0) + eps).mean())


def batch_std_summary(
    source: np.ndarray, plans: list[BevMaskPlan], attr: str, eps: float = VAR_EPS,
    min_rows: int = 2,
) -> float:
    """Per-scene std summaries averaged over scenes with enough cells."""
    vals = []
    for n, plan in enumerate(plans):
        cells = getattr(plan, attr)
        if len(cells) < min_rows:
            continue
        vals.append(std_summary(source[n, cells[:, 0], cells[:, 1], :], eps))
    return float(np.mean(vals)) if vals else 0.0


def pooled_std_summary(
    source: np.ndarray, plans: list[BevMaskPlan], attr: str, eps: float = VAR_EPS
) -> float:
    idx = _batch_cells(plans, attr)
    if len(idx) == 0:
        return 0.0
    return std_summary(source[idx[:, 0], idx[:, 1], idx[:, 2], :], eps)
