import heapq

import numpy as np
import pytest

from motionlab.nav import (
    NoPath,
    PathPlan,
    WalkableMap,
    astar,
    build_walkable_map,
    cell_obstacle_cost,
    next_intermediate_target,
    obstacle_cost_grid,
    optimize_intermediate_target,
)
from motionlab.rng import RngStream
from motionlab.world import ObstacleField

BOUNDS = np.array([-2.0, -2.0, 2.0, 2.0])


def field_of(boxes, bounds=BOUNDS):
    return ObstacleField(np.asarray(boxes, float).reshape(-1, 4), bounds)


def dijkstra_oracle(wmap, start_cell, goal_cell):
    """Independent shortest-path reference: plain Dijkstra over the same
    8-connected free-cell graph with metric edge lengths."""
    res = wmap.resolution
    dist = {start_cell: 0.0}
    heap = [(0.0, start_cell)]
    done = set()
    while heap:
        d, cell = heapq.heappop(heap)
        if cell in done:
            continue
        if cell == goal_cell:
            return d
        done.add(cell)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                nxt = (cell[0] + dr, cell[1] + dc)
                if not wmap.in_bounds(nxt) or wmap.grid[nxt]:
                    continue
                cand = d + res * (np.sqrt(2.0) if dr and dc else 1.0)
                if cand < dist.get(nxt, np.inf) - 1e-15:
                    dist[nxt] = cand
                    heapq.heappush(heap, (cand, nxt))
    return None


class TestRasterization:
    def test_empty_scene_all_free(self):
        wmap = build_walkable_map(field_of(np.zeros((0, 4))), 0.5)
        assert wmap.shape == (8, 8)
        assert not wmap.grid.any()

    def test_cell_center_rule(self):
        # box [0.9, 1.1] x [-2, 2]: only the column whose centers land inside
        wmap = build_walkable_map(field_of([[1.0, 0.0, 0.1, 2.0]]), 0.5)
        occupied_cols = sorted(set(np.nonzero(wmap.grid)[1]))
        # centers at x = -1.75, -1.25, ..., 1.75; only 0.75..1.25 col has 1.25? no:
        # centers inside [0.9, 1.1] -> none of -1.75..1.75 except... none!
        assert occupied_cols == []
        # finer grid picks up the box
        wmap = build_walkable_map(field_of([[1.0, 0.0, 0.1, 2.0]]), 0.1)
        cols = sorted(set(np.nonzero(wmap.grid)[1]))
        centers = -2.0 + (np.array(cols) + 0.5) * 0.1
        assert np.all(np.abs(centers - 1.0) <= 0.1 + 1e-12)
        assert len(cols) == 2  # centers 0.95 and 1.05

    def test_occupied_rows_full_height(self):
        wmap = build_walkable_map(field_of([[0.0, 0.0, 0.3, 2.0]]), 0.25)
        rows_at_occ = wmap.grid[:, wmap.grid.any(axis=0)]
        assert rows_at_occ.all()  # wall spans the whole y range

    def test_cell_of_center_of_round_trip(self):
        wmap = build_walkable_map(field_of(np.zeros((0, 4))), 0.3)
        for cell in [(0, 0), (3, 7), (12, 1)]:
            assert wmap.cell_of(wmap.center_of(cell)) == cell

    def test_outside_points_count_occupied(self):
        wmap = build_walkable_map(field_of(np.zeros((0, 4))), 0.5)
        occ = wmap.occupied_at([[0.0, 0.0], [5.0, 0.0], [0.0, -2.5]])
        assert list(occ) == [False, True, True]

    def test_rejects_bad_resolution(self):
        with pytest.raises(ValueError):
            build_walkable_map(field_of(np.zeros((0, 4))), 0.0)


class TestPgm:
    def test_round_trip(self, tmp_path):
        wmap = build_walkable_map(field_of([[0.5, -0.5, 0.4, 0.3]]), 0.25)
        path = tmp_path / "map.pgm"
        wmap.save_pgm(path)
        back = WalkableMap.load_pgm(path)
        np.testing.assert_array_equal(back.grid, wmap.grid)
        np.testing.assert_allclose(back.origin, wmap.origin)
        assert back.resolution == wmap.resolution

    def test_text_layout_top_row_first(self, tmp_path):
        grid = np.zeros((2, 3), dtype=np.uint8)
        grid[0, 0] = 1  # bottom-left cell is an obstacle
        wmap = WalkableMap(grid, np.zeros(2), 1.0)
        path = tmp_path / "tiny.pgm"
        wmap.save_pgm(path)
        lines = [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]
        assert lines[0] == "P2"
        assert lines[1] == "3 2"
        assert lines[3] == "255 255 255"  # top row: all free
        assert lines[4] == "0 255 255"  # bottom row: obstacle first


class TestCellCost:
    def test_free_and_saturated(self):
        wmap = build_walkable_map(field_of([[0.0, 0.0, 1.0, 1.0]]), 0.1)
        assert cell_obstacle_cost(wmap, [-1.7, -1.7]) == 0.0
        assert cell_obstacle_cost(wmap, [0.0, 0.0]) == 1.0

    def test_intermediate_in_open_interval(self):
        wmap = build_walkable_map(field_of([[0.0, 0.0, 0.5, 2.0]]), 0.1)
        c = cell_obstacle_cost(wmap, [0.7, 0.0])
        assert 0.0 < c < 1.0

    def test_grid_matches_pointwise(self):
        wmap = build_walkable_map(field_of([[0.5, 0.5, 0.4, 0.4]]), 0.5)
        grid = obstacle_cost_grid(wmap)
        for cell in [(0, 0), (4, 4), (5, 2)]:
            assert grid[cell] == cell_obstacle_cost(wmap, wmap.center_of(cell))


class TestAstar:
    def test_start_equals_goal(self):
        wmap = build_walkable_map(field_of(np.zeros((0, 4))), 0.5)
        plan = astar(wmap, [0.1, 0.1], [0.1, 0.1])
        assert plan.cost == 0.0
        assert plan.points.shape == (1, 2)

    def test_straight_line_cost_in_free_space(self):
        wmap = build_walkable_map(field_of(np.zeros((0, 4))), 0.5)
        plan = astar(wmap, [-1.9, 0.1], [1.9, 0.1], collision_weight=0.0)
        assert plan.cost == pytest.approx(7 * 0.5)
        # path stays on one row
        assert len(set(plan.points[:, 1])) == 1

    def test_diagonal_cost(self):
        wmap = build_walkable_map(field_of(np.zeros((0, 4))), 0.5)
        plan = astar(wmap, [-1.9, -1.9], [1.9, 1.9], collision_weight=0.0)
        assert plan.cost == pytest.approx(7 * 0.5 * np.sqrt(2.0))

    @pytest.mark.parametrize("seed", range(8))
    def test_zero_collision_weight_matches_dijkstra(self, seed):
        rng = RngStream(900 + seed)
        boxes = np.column_stack([
            rng.uniform(-1.5, 1.5, (3,)),
            rng.uniform(-1.5, 1.5, (3,)),
            rng.uniform(0.1, 0.5, (3,)),
            rng.uniform(0.1, 0.5, (3,)),
        ])
        wmap = build_walkable_map(field_of(boxes), 0.25)
        start, goal = [-1.9, -1.9], [1.9, 1.9]
        if wmap.grid[wmap.cell_of(start)] or wmap.grid[wmap.cell_of(goal)]:
            pytest.skip("corner blocked by random boxes")
        oracle = dijkstra_oracle(wmap, wmap.cell_of(start), wmap.cell_of(goal))
        if oracle is None:
            with pytest.raises(NoPath):
                astar(wmap, start, goal, collision_weight=0.0)
            return
        plan = astar(wmap, start, goal, collision_weight=0.0)
        assert plan.cost == pytest.approx(oracle, abs=1e-9)

    def test_path_never_enters_occupied_cells(self):
        wmap = build_walkable_map(field_of([[0.0, 0.5, 0.3, 1.5], [0.8, -1.0, 0.5, 0.4]]), 0.2)
        plan = astar(wmap, [-1.8, 0.0], [1.8, 0.0])
        assert not wmap.occupied_at(plan.points).any()

    def test_collision_term_prefers_clearance(self):
        # narrow gap straight ahead vs a wide detour: with the collision cost
        # the path keeps more distance from the wall than the metric shortest
        wmap = build_walkable_map(field_of([[0.0, 0.5, 0.2, 1.5]]), 0.2)
        grid_cost = obstacle_cost_grid(wmap)
        short = astar(wmap, [-1.5, 0.9], [1.5, 0.9], collision_weight=0.0)
        safe = astar(wmap, [-1.5, 0.9], [1.5, 0.9], collision_weight=5.0, cost_grid=grid_cost)

        def exposure(plan):
            return sum(grid_cost[wmap.cell_of(p)] for p in plan.points)

        assert exposure(safe) < exposure(short)
        assert not wmap.occupied_at(safe.points).any()

    def test_walled_off_goal_raises(self):
        wmap = build_walkable_map(field_of([[0.0, 0.0, 0.3, 2.0]]), 0.25)
        with pytest.raises(NoPath):
            astar(wmap, [-1.5, 0.0], [1.5, 0.0])

    def test_occupied_start_raises(self):
        wmap = build_walkable_map(field_of([[0.0, 0.0, 0.5, 0.5]]), 0.25)
        with pytest.raises(NoPath):
            astar(wmap, [0.0, 0.0], [1.5, 1.5])

    def test_out_of_bounds_goal_rejected(self):
        wmap = build_walkable_map(field_of(np.zeros((0, 4))), 0.25)
        with pytest.raises(ValueError):
            astar(wmap, [0.0, 0.0], [5.0, 0.0])


class TestIntermediateTarget:
    def test_close_target_returned_verbatim(self):
        target = np.array([0.7, -0.9])
        out = next_intermediate_target([0.0, 0.0], target)
        np.testing.assert_array_equal(out, target)

    def test_far_target_projected_to_radius(self):
        out = next_intermediate_target([1.0, 1.0], [1.0, 6.0])
        np.testing.assert_allclose(out, [1.0, 2.2], atol=1e-12)
        assert np.linalg.norm(out - [1.0, 1.0]) == pytest.approx(1.2)

    def test_idempotent_once_inside_radius(self):
        out = next_intermediate_target([0.0, 0.0], [3.0, 0.0])
        again = next_intermediate_target(out, [3.0, 0.0], radius=np.linalg.norm([3.0, 0.0] - out) + 0.1)
        np.testing.assert_array_equal(again, [3.0, 0.0])

    def test_path_lookahead(self):
        pts = np.array([[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [1.5, 0.0], [2.0, 0.0]])
        plan = PathPlan(pts, 2.0)
        out = next_intermediate_target([0.1, 0.0], [2.0, 0.0], plan=plan, lookahead=1.0)
        np.testing.assert_array_equal(out, [1.0, 0.0])

    def test_short_path_returns_last_point(self):
        plan = PathPlan(np.array([[0.0, 0.0], [0.4, 0.0]]), 0.4)
        out = next_intermediate_target([0.0, 0.0], [5.0, 0.0], plan=plan, lookahead=1.0)
        np.testing.assert_array_equal(out, [0.4, 0.0])


class TestOptimizeTarget:
    def test_free_space_converges_to_unit_step_toward_target(self):
        wmap = build_walkable_map(field_of(np.zeros((0, 4))), 0.25)
        agent = np.array([-1.0, -1.0])
        target = np.array([1.0, 1.0])
        out = optimize_intermediate_target(agent, target, [-0.8, -0.2], wmap)
        expected = agent + (target - agent) / np.linalg.norm(target - agent)
        np.testing.assert_allclose(out, expected, atol=0.02)

    def test_distance_respects_box_constraint(self):
        wmap = build_walkable_map(field_of(np.zeros((0, 4))), 0.25)
        agent = np.array([0.0, 0.0])
        for init in ([0.1, 0.0], [0.0, 1.9]):
            out = optimize_intermediate_target(agent, [0.0, 1.9], init, wmap)
            assert 0.5 - 1e-9 <= np.linalg.norm(out - agent) <= 1.0 + 1e-9

    def test_steers_off_obstacle(self):
        wmap = build_walkable_map(field_of([[0.9, 0.0, 0.25, 0.25]]), 0.1)
        agent = np.array([0.0, 0.0])
        target = np.array([1.8, 0.0])
        naive = agent + (target - agent) / np.linalg.norm(target - agent)
        assert wmap.occupied_at(naive[None])[0]
        out = optimize_intermediate_target(agent, target, naive, wmap)
        assert not wmap.occupied_at(out[None])[0]
        assert 0.5 - 1e-9 <= np.linalg.norm(out - agent) <= 1.0 + 1e-9

    def test_deterministic(self):
        wmap = build_walkable_map(field_of([[0.9, 0.0, 0.25, 0.25]]), 0.1)
        a = optimize_intermediate_target([0.0, 0.0], [1.8, 0.0], [0.9, 0.0], wmap)
        b = optimize_intermediate_target([0.0, 0.0], [1.8, 0.0], [0.9, 0.0], wmap)
        np.testing.assert_array_equal(a, b)
