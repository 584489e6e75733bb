"""Ego-centric occupancy rasterization and the observation record.

Channel semantics (a documented stand-in; the two channels of the sensor
grid are not otherwise pinned down anywhere): channel 0 marks static
scene occupancy (off-road cells plus static obstacle boxes), channel 1
marks dynamic vehicles. The grid is ego-centric with the ego at the
center anchor cell and +x (rows) pointing forward.

The inner loops exist twice: a numba kernel (default) and a vectorized
numpy equivalent, selected by ``DRIVERIG_NO_NUMBA``. Both compute the
same IEEE arithmetic per cell and must agree exactly; tests assert it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backend import NUMBA_ENABLED, jit_kernel
from .world import EGO_HALF_EXTENT, WorldState

LIGHT_STATES = ("none", "green", "yellow", "red")

NODE_ROAD_RADIUS = 9.0   # intersection pavement disk, m
AT_LIGHT_DISTANCE = 30.0


@dataclass(frozen=True)
class RasterConfig:
    grid_size: int = 200
    meters_per_cell: float = 0.25

    def __post_init__(self):
        if self.grid_size < 8 or self.grid_size % 8:
            raise ValueError("grid_size must be a multiple of 8 and >= 8")


DEFAULT_RASTER = RasterConfig()


@dataclass
class Observation:
    visual_features: np.ndarray   # (C, C, 2) float32 in [0, 1]
    velocity: float
    is_at_traffic_light: bool
    traffic_light_state: str


# ---------------------------------------------------------------------------
# Kernels: loop form (numba) and vectorized form (numpy)
# ---------------------------------------------------------------------------


def _static_loop(grid, px, py, cos_h, sin_h, anchor, mpc,
                 seg_sx, seg_sy, seg_dx, seg_dy, seg_len, half_w2,
                 node_x, node_y, node_r2):
    size = grid.shape[0]
    for r in range(size):
        f = (r - anchor) * mpc
        for c in range(size):
            l = (c - anchor) * mpc
            wx = px + f * cos_h - l * sin_h
            wy = py + f * sin_h + l * cos_h
            on_road = False
            for k in range(seg_sx.shape[0]):
                rx = wx - seg_sx[k]
                ry = wy - seg_sy[k]
                t = rx * seg_dx[k] + ry * seg_dy[k]
                if t < 0.0:
                    t = 0.0
                elif t > seg_len[k]:
                    t = seg_len[k]
                ex = rx - t * seg_dx[k]
                ey = ry - t * seg_dy[k]
                if ex * ex + ey * ey <= half_w2:
                    on_road = True
                    break
            if not on_road:
                for k in range(node_x.shape[0]):
                    ex = wx - node_x[k]
                    ey = wy - node_y[k]
                    if ex * ex + ey * ey <= node_r2:
                        on_road = True
                        break
            if not on_road:
                grid[r, c] = 1.0


def _boxes_loop(grid, px, py, cos_h, sin_h, anchor, mpc, boxes):
    size = grid.shape[0]
    for b in range(boxes.shape[0]):
        cx, cy, bh, hx, hy = boxes[b, 0], boxes[b, 1], boxes[b, 2], boxes[b, 3], boxes[b, 4]
        cb, sb = math.cos(bh), math.sin(bh)
        # grid-frame bounding range of the box, padded one cell
        reach = (abs(hx * cb) + abs(hy * sb) + abs(hx * sb) + abs(hy * cb)) + mpc
        dxw = cx - px
        dyw = cy - py
        f0 = dxw * cos_h + dyw * sin_h
        l0 = -dxw * sin_h + dyw * cos_h
        r_lo = max(0, int(math.floor((f0 - reach) / mpc)) + anchor)
        r_hi = min(size - 1, int(math.ceil((f0 + reach) / mpc)) + anchor)
        c_lo = max(0, int(math.floor((l0 - reach) / mpc)) + anchor)
        c_hi = min(size - 1, int(math.ceil((l0 + reach) / mpc)) + anchor)
        for r in range(r_lo, r_hi + 1):
            f = (r - anchor) * mpc
            for c in range(c_lo, c_hi + 1):
                l = (c - anchor) * mpc
                wx = px + f * cos_h - l * sin_h
                wy = py + f * sin_h + l * cos_h
                rx = wx - cx
                ry = wy - cy
                bx = rx * cb + ry * sb
                by = -rx * sb + ry * cb
                if abs(bx) <= hx and abs(by) <= hy:
                    grid[r, c] = 1.0


_static_numba = jit_kernel(_static_loop)
_boxes_numba = jit_kernel(_boxes_loop)


def _cell_centers(size, anchor, mpc, px, py, cos_h, sin_h):
    idx = (np.arange(size) - anchor) * mpc
    f = idx[:, None]
    l = idx[None, :]
    wx = px + f * cos_h - l * sin_h
    wy = py + f * sin_h + l * cos_h
    return wx, wy


def _static_numpy(grid, px, py, cos_h, sin_h, anchor, mpc,
                  seg_sx, seg_sy, seg_dx, seg_dy, seg_len, half_w2,
                  node_x, node_y, node_r2):
    size = grid.shape[0]
    wx, wy = _cell_centers(size, anchor, mpc, px, py, cos_h, sin_h)
    on_road = np.zeros((size, size), dtype=bool)
    for k in range(len(seg_sx)):
        rx = wx - seg_sx[k]
        ry = wy - seg_sy[k]
        t = np.clip(rx * seg_dx[k] + ry * seg_dy[k], 0.0, seg_len[k])
        ex = rx - t * seg_dx[k]
        ey = ry - t * seg_dy[k]
        on_road |= ex * ex + ey * ey <= half_w2
    for k in range(len(node_x)):
        ex = wx - node_x[k]
        ey = wy - node_y[k]
        on_road |= ex * ex + ey * ey <= node_r2
    grid[~on_road] = 1.0


def _boxes_numpy(grid, px, py, cos_h, sin_h, anchor, mpc, boxes):
    size = grid.shape[0]
    wx, wy = _cell_centers(size, anchor, mpc, px, py, cos_h, sin_h)
    for b in range(boxes.shape[0]):
        cx, cy, bh, hx, hy = boxes[b]
        cb, sb = math.cos(bh), math.sin(bh)
        rx = wx - cx
        ry = wy - cy
        bx = rx * cb + ry * sb
        by = -rx * sb + ry * cb
        grid[(np.abs(bx) <= hx) & (np.abs(by) <= hy)] = 1.0


def get_kernels(backend: str | None = None):
    """(static_fill, boxes_fill) for 'numba', 'numpy', or the active default."""
    if backend is None:
        backend = "numba" if NUMBA_ENABLED else "numpy"
    if backend == "numba":
        if _static_numba is None:
            raise RuntimeError("numba backend requested but numba is unavailable")
        return _static_numba, _boxes_numba
    if backend == "numpy":
        return _static_numpy, _boxes_numpy
    raise ValueError(f"unknown backend {backend!r}")


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def render_observation(world: WorldState, config: RasterConfig = DEFAULT_RASTER,
                       backend: str | None = None) -> Observation:
    """Rasterize the scene around the ego and fill the low-dim signals."""
    static_fill, boxes_fill = get_kernels(backend)
    town = world.town
    ego = world.ego
    size = config.grid_size
    anchor = size // 2
    mpc = config.meters_per_cell
    cos_h, sin_h = math.cos(ego.heading), math.sin(ego.heading)

    grid = np.zeros((size, size, 2), dtype=np.float32)
    half_w2 = (town.lane_width / 2.0) ** 2
    static_fill(
        grid[:, :, 0], ego.position[0], ego.position[1], cos_h, sin_h,
        anchor, mpc,
        np.ascontiguousarray(town.edge_start[:, 0]),
        np.ascontiguousarray(town.edge_start[:, 1]),
        np.ascontiguousarray(town.edge_dir[:, 0]),
        np.ascontiguousarray(town.edge_dir[:, 1]),
        town.edge_len, half_w2,
        np.ascontiguousarray(town.nodes[:, 0]),
        np.ascontiguousarray(town.nodes[:, 1]),
        NODE_ROAD_RADIUS ** 2,
    )
    if len(world.pedestrians):
        boxes_fill(grid[:, :, 0], ego.position[0], ego.position[1],
                   cos_h, sin_h, anchor, mpc,
                   np.ascontiguousarray(world.pedestrians))
    if len(world.actor_rail):
        pos, headings = world.actor_poses()
        boxes = np.column_stack([
            pos, headings,
            np.full(len(pos), EGO_HALF_EXTENT[0]),
            np.full(len(pos), EGO_HALF_EXTENT[1]),
        ])
        boxes_fill(grid[:, :, 1], ego.position[0], ego.position[1],
                   cos_h, sin_h, anchor, mpc, np.ascontiguousarray(boxes))

    is_at = False
    state = "none"
    hit = town.nearest_edge(ego.position, ego.heading, max_lateral=town.lane_width)
    if hit is not None:
        eidx, _, along = hit
        li = town.light_for_edge.get(eidx)
        if li is not None and town.edges[eidx].length - along < AT_LIGHT_DISTANCE:
            is_at = True
            state = town.lights[li].state_at(world.time)

    return Observation(
        visual_features=grid,
        velocity=float(ego.speed),
        is_at_traffic_light=is_at,
        traffic_light_state=state,
    )
