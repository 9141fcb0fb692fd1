"""BEV-guided masking over both empty and non-empty grid cells.

A mask plan classifies every BEV cell into four disjoint index sets:

* ``K`` unmasked non-empty (context content the encoder keeps),
* ``Q`` masked non-empty (prediction targets holding real points),
* ``P`` masked empty (prediction targets with no points),
* ``U`` unmasked empty (replaced by the empty token downstream).

Masking picks exactly the rounded per-class share of cells, uniformly
without replacement, from a counter-keyed stream, so the plan for a scene
depends only on (occupancy, ratio, seed).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .grid import GridSpec, bev_cells_of_points
from .rng import stream
from .scenes import PointCloud

log = logging.getLogger(__name__)


@dataclass
class BevMaskPlan:
    masked: np.ndarray  # [H, W] bool
    occupancy: np.ndarray  # [H, W] bool
    unmasked_nonempty: np.ndarray  # K: [k, 2] int (h, w), row-sorted
    masked_nonempty: np.ndarray  # Q
    masked_empty: np.ndarray  # P
    unmasked_empty: np.ndarray  # U
    visible_points: PointCloud | None = field(default=None)
    hidden_points: PointCloud | None = field(default=None)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _round_half_down(x: float) -> int:
    return int(np.ceil(x - 0.5))


def _cells(hw_flat: np.ndarray, width: int) -> np.ndarray:
    out = np.column_stack([hw_flat // width, hw_flat % width])
    return out[np.lexsort((out[:, 1], out[:, 0]))]


def sample_mask(occupancy: np.ndarray, ratio: float, rng_seed, *,
                mask_empty_cells: bool = True) -> BevMaskPlan:
    """Mask the rounded `ratio` share of non-empty and of empty cells.

    Ties at .5 round up for the non-empty class and down for the empty one,
    so non-empty cells are never left without both a masked and an unmasked
    representative when avoidable. ``rng_seed`` is an int or tuple of ints.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"masking ratio must lie in (0, 1), got {ratio}")
    occupancy = np.asarray(occupancy, dtype=bool)
    h, w = occupancy.shape
    flat = occupancy.reshape(-1)
    nonempty = np.flatnonzero(flat)
    empty = np.flatnonzero(~flat)
    if nonempty.size == 0:
        log.warning("scene has no non-empty BEV cells; mask plan has empty Q")

    n_q = min(_round_half_up(ratio * nonempty.size), nonempty.size)
    n_p = min(_round_half_down(ratio * empty.size), empty.size) if mask_empty_cells else 0

    path = rng_seed if isinstance(rng_seed, tuple) else (rng_seed,)
    rng = stream("mask", *path)
    q_cells = rng.choice(nonempty, size=n_q, replace=False) if n_q else np.empty(0, dtype=np.int64)
    p_cells = rng.choice(empty, size=n_p, replace=False) if n_p else np.empty(0, dtype=np.int64)

    masked = np.zeros(h * w, dtype=bool)
    masked[q_cells] = True
    masked[p_cells] = True
    k_cells = np.setdiff1d(nonempty, q_cells, assume_unique=True)
    u_cells = np.setdiff1d(empty, p_cells, assume_unique=True)
    return BevMaskPlan(
        masked=masked.reshape(h, w),
        occupancy=occupancy,
        unmasked_nonempty=_cells(k_cells, w),
        masked_nonempty=_cells(np.sort(q_cells), w),
        masked_empty=_cells(np.sort(p_cells), w),
        unmasked_empty=_cells(u_cells, w),
    )


def partition_points(
    cloud: PointCloud, plan: BevMaskPlan, spec: GridSpec
) -> tuple[PointCloud, PointCloud]:
    """Split the cloud into (visible, hidden) point clouds.

    Visible points live in unmasked cells; hidden points live in masked
    non-empty cells. Every input point lands in exactly one side.
    """
    if len(cloud) == 0:
        vis = PointCloud(np.empty((0, 4)), cloud.scene_id)
        hid = PointCloud(np.empty((0, 4)), cloud.scene_id)
        plan.visible_points, plan.hidden_points = vis, hid
        return vis, hid
    cells = bev_cells_of_points(cloud.points, spec)
    if cells[:, 0].max() >= plan.occupancy.shape[0] or cells[:, 1].max() >= plan.occupancy.shape[1]:
        raise ContractError("plan grid is smaller than the cloud's BEV extent")
    occupied_here = plan.occupancy[cells[:, 0], cells[:, 1]]
    if not occupied_here.all():
        bad = int(np.flatnonzero(~occupied_here)[0])
        raise ContractError(
            f"point {bad} falls in BEV cell {tuple(cells[bad])} marked empty; "
            "the plan was built from a different cloud"
        )
    hidden = plan.masked[cells[:, 0], cells[:, 1]]
    vis = PointCloud(cloud.points[~hidden], cloud.scene_id)
    hid = PointCloud(cloud.points[hidden], cloud.scene_id)
    plan.visible_points, plan.hidden_points = vis, hid
    return vis, hid
