"""Scene preparation and the full two-branch forward pass.

Shared by the training loop and the diagnostics so both drive the exact
same computation: voxelize the visible/hidden point clouds, encode them
with the context/target encoders, substitute tokens, and predict. The
target branch runs on a throwaway tape with non-trainable leaves, so no
gradient can ever reach the target encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .grid import GridSpec, bev_occupancy, voxelize
from .masking import BevMaskPlan, partition_points, sample_mask
from .model import ModelState, apply_tokens, encode_bev, predict, wrap_params
from .scenes import PointCloud, SceneAnnotation, crop_to_range


@dataclass
class SceneSample:
    index: int
    cloud: PointCloud  # cropped to the grid range
    occupancy: np.ndarray  # [H, W] bool
    annotation: SceneAnnotation | None = None


def prepare_scene(
    cloud: PointCloud,
    grid: GridSpec,
    index: int,
    annotation: SceneAnnotation | None = None,
) -> SceneSample:
    cropped = crop_to_range(cloud, grid.ranges)
    occ = bev_occupancy(voxelize(cropped, grid), grid)
    return SceneSample(index=index, cloud=cropped, occupancy=occ, annotation=annotation)


def unmasked_plan(occupancy: np.ndarray) -> BevMaskPlan:
    """Evaluation plan with nothing masked (all non-empty in K, empty in U)."""
    occupancy = np.asarray(occupancy, dtype=bool)
    h, w = occupancy.shape
    grid_cells = np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij"), -1)
    cells = grid_cells.reshape(-1, 2)
    flat = occupancy.reshape(-1)
    return BevMaskPlan(
        masked=np.zeros((h, w), dtype=bool),
        occupancy=occupancy,
        unmasked_nonempty=cells[flat],
        masked_nonempty=np.empty((0, 2), dtype=np.int64),
        masked_empty=np.empty((0, 2), dtype=np.int64),
        unmasked_empty=cells[~flat],
    )


def build_plans(
    samples: list[SceneSample],
    grid: GridSpec,
    ratio: float,
    seed: int,
    epoch: int,
    *,
    mask_empty_cells: bool = True,
) -> list[BevMaskPlan]:
    """One mask plan per scene, keyed by (seed, epoch, scene index)."""
    plans = []
    for s in samples:
        if ratio == 0.0:
            plan = unmasked_plan(s.occupancy)
            plan.visible_points = s.cloud
            plan.hidden_points = PointCloud(np.empty((0, 4)), s.cloud.scene_id)
        else:
            plan = sample_mask(
                s.occupancy, ratio, (seed, epoch, s.index),
                mask_empty_cells=mask_empty_cells,
            )
            partition_points(s.cloud, plan, grid)
        plans.append(plan)
    return plans


@dataclass
class ForwardBundle:
    tape: Tape
    plans: list[BevMaskPlan]
    z_c: Tensor  # context embeddings before tokens, [B,H,W,E]
    zhat_c: Tensor  # after tokens + normalization
    shat_t: Tensor  # target embeddings after tokens + normalization (constant)
    shat_c: Tensor  # predictor output, unit-normalized
    context_params: dict[str, Tensor]
    predictor_params: dict[str, Tensor]
    token_params: dict[str, Tensor]


def forward_batch(
    state: ModelState,
    samples: list[SceneSample],
    plans: list[BevMaskPlan],
    *,
    target_input: str = "hidden_only",
    use_empty_token: bool = True,
    use_mask_token: bool = True,
) -> ForwardBundle:
    grid = state.grid
    ctx_feats = np.stack([voxelize(p.visible_points, grid) for p in plans])
    if target_input == "hidden_only":
        tgt_feats = np.stack([voxelize(p.hidden_points, grid) for p in plans])
    elif target_input == "full":
        tgt_feats = np.stack([voxelize(s.cloud, grid) for s in samples])
    else:
        raise ValueError(f"unknown target_input mode: {target_input!r}")

    # target branch: separate tape, no trainable leaves
    t_tape = Tape()
    t_params = wrap_params(t_tape, state.target, trainable=False)
    s_t_data = encode_bev(t_params, t_tape.constant(tgt_feats)).data

    tape = Tape()
    ctx_params = wrap_params(tape, state.context, trainable=True)
    pred_params = wrap_params(tape, state.predictor, trainable=True)
    tok_params = {
        "empty": tape.leaf(state.tokens["empty"], requires_grad=use_empty_token),
        "mask": tape.leaf(state.tokens["mask"], requires_grad=use_mask_token),
    }
    z_c = encode_bev(ctx_params, tape.constant(ctx_feats))
    zhat_c, shat_t = apply_tokens(
        z_c,
        tape.constant(s_t_data),
        plans,
        tok_params["empty"],
        tok_params["mask"],
        use_empty_token=use_empty_token,
        use_mask_token=use_mask_token,
    )
    shat_c = predict(pred_params, zhat_c, state.predictor_depth)
    return ForwardBundle(
        tape=tape,
        plans=plans,
        z_c=z_c,
        zhat_c=zhat_c,
        shat_t=shat_t,
        shat_c=shat_c,
        context_params=ctx_params,
        predictor_params=pred_params,
        token_params=tok_params,
    )
