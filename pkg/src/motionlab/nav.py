"""Occupancy-grid navigation: map building, A*, and intermediate targets.

The walkable map is a binary grid (0 free, 1 obstacle) rasterized from the
scene's box footprints. A* runs 8-connected with a collision-aware edge cost
and a goal heuristic that weights the collision term by 10; intermediate
targets for long-range goals are picked on the segment or path and optionally
refined against the collision loss with a yaw/distance reparameterization.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalFault, Tensor, backward
from .guidance import _grid_offsets
from .params import AdamState, ParamSet, adam_step_from_grads
from .world import ObstacleField


class NoPath(RuntimeError):
    pass


@dataclass
class WalkableMap:
    grid: np.ndarray  # (rows, cols) uint8; 0 free, 1 obstacle
    origin: np.ndarray  # world xy of cell (0, 0)'s lower corner
    resolution: float

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.uint8)
        self.origin = np.asarray(self.origin, dtype=float)

    @property
    def shape(self):
        return self.grid.shape

    def cell_of(self, xy):
        rel = (np.asarray(xy, float) - self.origin) / self.resolution
        return int(np.floor(rel[1])), int(np.floor(rel[0]))  # (row, col)

    def center_of(self, cell):
        r, c = cell
        return self.origin + (np.array([c, r]) + 0.5) * self.resolution

    def in_bounds(self, cell):
        r, c = cell
        return 0 <= r < self.grid.shape[0] and 0 <= c < self.grid.shape[1]

    def occupied_at(self, points) -> np.ndarray:
        """Occupancy lookup for world points (N, 2); outside counts occupied."""
        pts = np.atleast_2d(np.asarray(points, float))
        rel = (pts - self.origin) / self.resolution
        cols = np.floor(rel[:, 0]).astype(int)
        rows = np.floor(rel[:, 1]).astype(int)
        inside = (rows >= 0) & (rows < self.grid.shape[0]) & (cols >= 0) & (cols < self.grid.shape[1])
        out = np.ones(len(pts), dtype=bool)
        out[inside] = self.grid[rows[inside], cols[inside]] > 0
        return out

    def save_pgm(self, path):
        """Plain-text graymap: 255 = free, 0 = obstacle."""
        rows, cols = self.grid.shape
        with open(path, "w") as f:
            f.write("P2\n")
            f.write(f"# origin {self.origin[0]} {self.origin[1]} resolution {self.resolution}\n")
            f.write(f"{cols} {rows}\n255\n")
            for r in range(rows - 1, -1, -1):  # top row first, image convention
                f.write(" ".join("0" if v else "255" for v in self.grid[r]) + "\n")

    @classmethod
    def load_pgm(cls, path):
        with open(path) as f:
            lines = [ln.strip() for ln in f if ln.strip()]
        assert lines[0] == "P2"
        meta = lines[1]
        parts = meta.split()
        origin = np.array([float(parts[2]), float(parts[3])])
        resolution = float(parts[5])
        cols, rows = map(int, lines[2].split())
        data = " ".join(lines[4:]).split()
        img = np.array(data, dtype=int).reshape(rows, cols)
        grid = (img[::-1] == 0).astype(np.uint8)
        return cls(grid, origin, resolution)


def build_walkable_map(field: ObstacleField, resolution: float) -> WalkableMap:
    """Rasterize box footprints: a cell is occupied iff its center is inside
    some box."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    xmin, ymin, xmax, ymax = field.bounds
    cols = int(np.ceil((xmax - xmin) / resolution))
    rows = int(np.ceil((ymax - ymin) / resolution))
    grid = np.zeros((rows, cols), dtype=np.uint8)
    if len(field.boxes):
        cx = xmin + (np.arange(cols) + 0.5) * resolution
        cy = ymin + (np.arange(rows) + 0.5) * resolution
        X, Y = np.meshgrid(cx, cy)
        for bx, by, hx, hy in field.boxes:
            grid |= ((np.abs(X - bx) <= hx) & (np.abs(Y - by) <= hy)).astype(np.uint8)
    return WalkableMap(grid, np.array([xmin, ymin]), resolution)


# -- collision cost per cell -------------------------------------------------


def cell_obstacle_cost(wmap: WalkableMap, xy, grid_extent=0.6, grid_n=10) -> float:
    """Single-point collision loss: 1 - d_min/b on the point's grid footprint."""
    offsets = _grid_offsets(grid_extent, grid_n)
    pts = np.asarray(xy, float)[None, :] + offsets
    occ = wmap.occupied_at(pts)
    if not occ.any():
        return 0.0
    if occ.all():
        return 1.0
    b = np.sqrt(2.0) * grid_extent
    free = pts[~occ]
    inter = pts[occ]
    d = np.linalg.norm(free[:, None, :] - inter[None, :, :], axis=-1)
    return float(1.0 - d.min() / b)


def obstacle_cost_grid(wmap: WalkableMap, grid_extent=0.6, grid_n=10) -> np.ndarray:
    """cell_obstacle_cost evaluated at every cell center."""
    rows, cols = wmap.grid.shape
    out = np.zeros((rows, cols))
    for r in range(rows):
        for c in range(cols):
            out[r, c] = cell_obstacle_cost(wmap, wmap.center_of((r, c)), grid_extent, grid_n)
    return out


# -- A* ----------------------------------------------------------------------

_NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass
class PathPlan:
    points: np.ndarray  # (N, 2) world xy, cell centers
    cost: float


def astar(wmap: WalkableMap, start, goal, collision_weight: float = 1.0,
          heuristic_obstacle_weight: float = 10.0, cost_grid: np.ndarray | None = None) -> PathPlan:
    """8-connected A*.

    Edge cost: step length + collision_weight * cell collision loss of the
    entered cell. Heuristic: Euclidean distance to goal plus the weighted
    collision loss of the candidate cell. With collision_weight 0 both reduce
    to the plain metric forms and the result is Dijkstra-optimal.
    """
    start_cell = wmap.cell_of(start)
    goal_cell = wmap.cell_of(goal)
    for cell, name in ((start_cell, "start"), (goal_cell, "goal")):
        if not wmap.in_bounds(cell):
            raise ValueError(f"{name} outside map")
    if wmap.grid[start_cell] or wmap.grid[goal_cell]:
        raise NoPath("start or goal cell occupied")
    if collision_weight != 0.0 and cost_grid is None:
        cost_grid = obstacle_cost_grid(wmap)

    res = wmap.resolution
    goal_xy = wmap.center_of(goal_cell)

    def obst(cell):
        return 0.0 if collision_weight == 0.0 else collision_weight * cost_grid[cell]

    def heuristic(cell):
        return float(np.linalg.norm(wmap.center_of(cell) - goal_xy)) + heuristic_obstacle_weight * obst(cell)

    g = {start_cell: 0.0}
    parent = {}
    open_heap = [(heuristic(start_cell), start_cell)]
    closed = set()
    while open_heap:
        _, cell = heapq.heappop(open_heap)
        if cell in closed:
            continue
        if cell == goal_cell:
            path = [cell]
            while path[-1] in parent:
                path.append(parent[path[-1]])
            pts = np.array([wmap.center_of(c) for c in reversed(path)])
            return PathPlan(pts, g[cell])
        closed.add(cell)
        for dr, dc in _NEIGHBORS:
            nxt = (cell[0] + dr, cell[1] + dc)
            if not wmap.in_bounds(nxt) or wmap.grid[nxt] or nxt in closed:
                continue
            step = res * (np.sqrt(2.0) if dr and dc else 1.0)
            cand = g[cell] + step + obst(nxt)
            if cand < g.get(nxt, np.inf) - 1e-15:
                g[nxt] = cand
                parent[nxt] = cell
                heapq.heappush(open_heap, (cand + heuristic(nxt), nxt))
    raise NoPath("goal unreachable")


# -- intermediate targets ----------------------------------------------------


def next_intermediate_target(agent_xy, target_xy, radius: float = 1.2,
                             plan: PathPlan | None = None, lookahead: float = 1.0):
    """Next waypoint: the target itself once inside the radius, otherwise a
    segment point at the radius, or the path point ~lookahead meters ahead."""
    agent_xy = np.asarray(agent_xy, float)
    target_xy = np.asarray(target_xy, float)
    d = np.linalg.norm(target_xy - agent_xy)
    if d <= radius:
        return target_xy.copy()
    if plan is None:
        return agent_xy + (target_xy - agent_xy) * (radius / d)
    dists = np.linalg.norm(plan.points - agent_xy, axis=1)
    nearest = int(np.argmin(dists))
    walked = 0.0
    for i in range(nearest, len(plan.points) - 1):
        walked += np.linalg.norm(plan.points[i + 1] - plan.points[i])
        if walked >= lookahead:
            return plan.points[i + 1].copy()
    return plan.points[-1].copy()


def optimize_intermediate_target(agent_xy, target_xy, initial_xy, wmap: WalkableMap,
                                 steps: int = 200, lr: float = 0.01,
                                 grid_extent=0.6, grid_n=10):
    """Refine an intermediate target against the collision loss.

    The point is reparameterized as agent + R(yaw) d [0,1]^T and (yaw, d) are
    optimized with Adam; d is projected into [0.5, 1] every step.
    """
    agent_xy = np.asarray(agent_xy, float)
    target_xy = np.asarray(target_xy, float)
    delta = np.asarray(initial_xy, float) - agent_xy
    yaw0 = float(np.arctan2(-delta[0], delta[1]))  # angle from [0,1] axis
    d0 = float(np.clip(np.linalg.norm(delta), 0.5, 1.0))

    params = ParamSet()
    params.add("yaw", np.array(yaw0))
    params.add("d", np.array(d0))
    adam = AdamState(lr=lr)
    offsets = _grid_offsets(grid_extent, grid_n)
    b = np.sqrt(2.0) * grid_extent

    def point_of(yaw, d):
        # R(yaw) @ (d * [0,1]) = d * (-sin yaw, cos yaw)
        return ad.stack(
            [ad.sub(agent_xy[0], ad.mul(d, ad.sin(yaw))), ad.add(agent_xy[1], ad.mul(d, ad.cos(yaw)))]
        )

    last_finite = np.asarray(point_of(params["yaw"].data, params["d"].data))
    for _ in range(steps):
        yaw, d = params["yaw"], params["d"]
        p = point_of(yaw, d)
        p_num = p.data
        occ = wmap.occupied_at(p_num[None, :] + offsets)
        if occ.any() and not occ.all():
            pts_free = np.nonzero(~occ)[0]
            pts_inter = np.nonzero(occ)[0]
            grid = ad.add(ad.reshape(p, (1, 2)), offsets)
            diff = ad.sub(
                ad.reshape(grid[pts_free], (-1, 1, 2)),
                ad.reshape(ad.detach(grid[pts_inter]), (1, -1, 2)),
            )
            obst = ad.sub(1.0, ad.div(ad.tmin(ad.norm(diff, axis=-1)), b))
        elif occ.all():
            obst = 1.0
        else:
            obst = 0.0
        objective = ad.add(obst, ad.mul(ad.norm(ad.sub(p, target_xy)), 0.1))
        if not isinstance(objective, Tensor):
            break  # flat objective: nothing to optimize
        try:
            backward(objective)
        except NumericalFault:
            return last_finite
        adam_step_from_grads(params, adam)
        params.zero_grads()
        params["d"].data = np.clip(params["d"].data, 0.5, 1.0)
        cand = np.asarray(point_of(params["yaw"].data, params["d"].data))
        if np.isfinite(cand).all():
            last_finite = cand
    return last_finite
