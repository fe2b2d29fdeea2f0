"""End-to-end acceptance properties.

Each class checks one pipeline-level guarantee: gradient correctness of every
guidance loss and both guidance update rules, diffusion sampling identities,
rotation-recovery exactness, path-planning optimality, the signal-vs-latent
guidance cost claim, adaptation ablation orderings, goal-reach scaling,
metric exactness on analytic traces, and whole-pipeline determinism.
"""

import csv
import heapq
import json

import numpy as np
import pytest
import yaml

from motionlab import controller as C
from motionlab import evalkit as E
from motionlab import p2r as P
from motionlab import tta as T
from motionlab.autodiff import Tensor, backward
from motionlab.config import default_config
from motionlab.diffusion import (
    cfg_predict,
    cosine_schedule,
    forward_noise,
    init_denoiser,
    reverse_step,
    sample,
)
from motionlab.guidance import (
    GuidanceConfig,
    GuidanceTerm,
    _grid_offsets,
    guide_latent_space,
    guide_signal_space,
    loss_hand_up,
    loss_head,
    loss_jerk,
    loss_obst,
    loss_pos,
    loss_smooth,
    loss_weighted_pos,
    sample_guided,
)
from motionlab.motionrep import FEAT_DIM, Anchor, Condition, Standardizer, decode
from motionlab.nav import WalkableMap, astar, build_walkable_map
from motionlab.nets import raw
from motionlab.rng import RngStream
from motionlab.tta import PlannerHandle
from motionlab.world import K, N_JOINTS, ObstacleField

N_INSTANCES = 100
GRAD_RTOL = 1e-4


# -- shared helpers ----------------------------------------------------------


def random_kpts(seed, frames=5):
    rng = RngStream(seed)
    kpts = rng.normal((frames, K, 3)) * 0.3
    kpts[:, :, 2] += 1.0
    kpts[:, 1, 1] += 0.4  # spread hips/shoulders so headings are generic
    kpts[:, 2, 1] -= 0.4
    kpts[:, 3, 1] += 0.4
    kpts[:, 4, 1] -= 0.4
    return kpts


def finite_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def directional_fd(f, x, v, h=1e-6):
    return (f(x + h * v) - f(x - h * v)) / (2 * h)


def tiny_planner(width=32, layers=2, ffn=48, window=8, context=4, T=20, seed=11):
    cfg = default_config()["planner"]
    cfg.update(width=width, layers=layers, ffn_width=ffn, window=window,
               context=context, diffusion_steps=T)
    params = init_denoiser(RngStream(seed), cfg)
    return cfg, params, cosine_schedule(T)


# -- criterion: gradient correctness ----------------------------------------


class TestGradientSuite:
    """All seven guidance losses and both update rules against finite
    differences, 100 random instances each (< 1 min)."""

    def check_loss(self, make_loss, seed):
        kpts = random_kpts(seed)
        loss = make_loss(seed)
        t = Tensor(kpts, requires_grad=True)
        backward(loss(t))
        expected = finite_diff(lambda x: float(np.asarray(loss(x))), kpts)
        np.testing.assert_allclose(t.grad, expected, rtol=GRAD_RTOL, atol=1e-7)

    def test_pos(self):
        for s in range(N_INSTANCES):
            target = RngStream(9000 + s).normal((3,))
            self.check_loss(lambda _: (lambda x: loss_pos(x, s % K, target)), s)

    def test_weighted_pos(self):
        for s in range(N_INSTANCES):
            target = RngStream(9100 + s).normal((2,))
            self.check_loss(
                lambda _: (lambda x: loss_weighted_pos(x, s % K, target)), s)

    def test_head(self):
        for s in range(N_INSTANCES):
            heading = RngStream(9500 + s).normal((2,))
            self.check_loss(
                lambda _: (lambda x: loss_head(x, heading)), s)

    def test_smooth(self):
        for s in range(N_INSTANCES):
            self.check_loss(lambda _: loss_smooth, s)

    def test_jerk(self):
        for s in range(N_INSTANCES):
            self.check_loss(lambda _: loss_jerk, s)

    def test_hand_up(self):
        # the head position is a frozen pull target, so the oracle pins the
        # head column at its base value while differencing the wrists
        from motionlab.config import HEAD

        for s in range(N_INSTANCES):
            kpts = random_kpts(s)
            head_base = kpts[:, HEAD].copy()

            def oracle(x):
                frozen = x.copy()
                frozen[:, HEAD] = head_base
                return float(np.asarray(loss_hand_up(frozen)))

            t = Tensor(kpts, requires_grad=True)
            backward(loss_hand_up(t))
            expected = finite_diff(oracle, kpts)
            np.testing.assert_allclose(t.grad, expected, rtol=GRAD_RTOL,
                                       atol=1e-7)

    def test_obst(self):
        # The occupied grid points are constants of the loss, so the oracle
        # freezes them at the base joint position and differentiates only the
        # free points.
        field = ObstacleField(np.array([[1.0, 0.0, 0.3, 2.0]]),
                              np.array([-4.0, -4.0, 4.0, 4.0]))
        wmap = build_walkable_map(field, 0.1)
        offsets = _grid_offsets(0.6, 10)
        b = np.sqrt(2.0) * 0.6
        checked = 0
        s = 0
        while checked < N_INSTANCES:
            s += 1
            center = np.array([0.55, 0.0]) + RngStream(9200 + s).normal((2,)) * 0.05
            occ = wmap.occupied_at(center[None] + offsets)
            if not occ.any() or occ.all():
                continue
            frozen = center[None] + offsets[occ]

            def oracle(xy):
                free = xy[None] + offsets[~occ]
                d = np.linalg.norm(free[:, None] - frozen[None, :], axis=-1)
                return 1.0 - d.min() / b

            kpts = np.zeros((1, K, 3))
            kpts[0, 0, :2] = center
            t = Tensor(kpts, requires_grad=True)
            backward(loss_obst(t, wmap, joints=(0,)))
            expected = finite_diff(oracle, center)
            np.testing.assert_allclose(t.grad[0, 0, :2], expected,
                                       rtol=GRAD_RTOL, atol=1e-7)
            checked += 1

    def test_signal_space_update_rule(self):
        eta = 0.5
        for s in range(N_INSTANCES):
            rng = RngStream(9300 + s)
            x0 = rng.normal((8, FEAT_DIM)) * 0.1
            target = rng.normal((3,))
            w = 0.5 + float(rng.uniform(0.0, 1.5, ()))
            terms = [GuidanceTerm("Pos", w, target=target, joint=s % K)]
            gcfg = GuidanceConfig(iterations=1, step_size=eta)
            out, warned = guide_signal_space(x0, terms, gcfg, Anchor.origin())
            assert not warned

            def objective(x):
                _, _, kpts = decode(x, Anchor.origin())
                return w * float(np.asarray(loss_pos(kpts, s % K, target)))

            v = rng.normal(x0.shape)
            v /= np.linalg.norm(v)
            fd = directional_fd(objective, x0, v)
            analytic = float(np.sum((x0 - out) / eta * v))
            np.testing.assert_allclose(analytic, fd, rtol=GRAD_RTOL, atol=1e-8)

    def test_latent_space_update_rule(self):
        cfg, params, sched = tiny_planner()
        p = raw(params)
        eta = 0.3
        for s in range(N_INSTANCES):
            rng = RngStream(9400 + s)
            x_t = rng.normal((cfg["window"], FEAT_DIM))
            ctx = rng.normal((1, cfg["context"], FEAT_DIM))
            target = rng.normal((2,))
            cond = Condition(style=s % 4)
            t_step = 1 + s % sched.steps
            terms = [GuidanceTerm("Pos", 1.0, target=target, joint=0)]
            gcfg = GuidanceConfig(iterations=1, step_size=eta, mode="latent-space")
            out, warned = guide_latent_space(x_t, t_step, params, sched, ctx,
                                             cond, 1.0, terms, gcfg,
                                             Anchor.origin(), cfg)
            assert not warned

            def objective(x):
                x0 = cfg_predict(p, sched, x[None], t_step, ctx, cond, 1.0, cfg)
                _, _, kpts = decode(x0[0], Anchor.origin())
                return float(np.asarray(loss_pos(kpts, 0, target)))

            v = rng.normal(x_t.shape)
            v /= np.linalg.norm(v)
            fd = directional_fd(objective, x_t, v, h=1e-5)
            analytic = float(np.sum((x_t - out) / eta * v))
            np.testing.assert_allclose(analytic, fd, rtol=GRAD_RTOL, atol=1e-7)


# -- criterion: diffusion sampling identities --------------------------------


class TestDiffusionSuite:
    """Round trip with the oracle denoised estimate, guidance-scale
    shortcuts, and guided-equals-plain equivalence, all at T=50 (< 2 min)."""

    T = 50

    def test_oracle_round_trip(self):
        sched = cosine_schedule(self.T)
        rng = RngStream(1)
        x0 = rng.normal((FEAT_DIM,))
        trials = 1000
        x = forward_noise(sched, np.tile(x0, (trials, 1)), self.T,
                          rng.normal((trials, FEAT_DIM)))
        for t in range(self.T, 0, -1):
            eps = (rng.normal(x.shape) if sched.sigmas[t] > 0
                   else np.zeros_like(x))
            x = reverse_step(sched, x, np.tile(x0, (trials, 1)), t, eps)
        assert np.abs(x.mean(axis=0) - x0).mean() < 1e-2

    def test_cfg_scale_shortcuts_exact(self):
        cfg, params, sched = tiny_planner(T=self.T)
        p = raw(params)
        rng = RngStream(2)
        x_t = rng.normal((2, cfg["window"], FEAT_DIM))
        ctx = rng.normal((2, cfg["context"], FEAT_DIM))
        cond = Condition(style=1, target=np.array([2.0, 0.5]), target_joint=0)
        from motionlab.diffusion import NULL_STYLE, denoise

        B = x_t.shape[0]
        tb = np.full(B, 7)
        g_cond = denoise(p, x_t, tb, ctx, np.full(B, 1),
                         np.tile(cond.target, (B, 1)), np.full(B, 0), cfg)
        g_null = denoise(p, x_t, tb, ctx, np.full(B, NULL_STYLE),
                         np.zeros((B, 2)), np.full(B, -1), cfg)
        np.testing.assert_array_equal(
            cfg_predict(p, sched, x_t, 7, ctx, cond, 1.0, cfg), g_cond)
        np.testing.assert_array_equal(
            cfg_predict(p, sched, x_t, 7, ctx, cond, 0.0, cfg), g_null)

    def test_empty_guidance_bitwise_equals_plain_sampling(self):
        cfg, params, sched = tiny_planner(T=self.T)
        ctx = RngStream(12).normal((1, cfg["context"], FEAT_DIM))
        for style in (0, 2):
            cond = Condition(style=style)
            plain = sample(raw(params), sched, ctx, cond, RngStream(55), cfg)
            guided, warnings = sample_guided(params, sched, ctx, cond, [],
                                             GuidanceConfig(), RngStream(55),
                                             cfg, Anchor.origin())
            assert warnings == 0
            np.testing.assert_array_equal(guided, plain[0])


# -- criterion: rotation recovery exactness ----------------------------------


class TestRotationRecovery:
    """Twist-swing recomposition to 1e-9 on 10^4 pairs; trained recovery
    network reproduces held-out poses to < 2 cm (< 5 min incl training)."""

    def test_recomposition_error(self):
        rng = RngStream(3)
        axes = rng.normal((10_000, 3))
        angles = rng.uniform(-np.pi + 1e-3, np.pi - 1e-3, (10_000,))
        bones = rng.normal((10_000, 3))
        worst = 0.0
        for i in range(10_000):
            rot = P.axis_angle(axes[i] / np.linalg.norm(axes[i]), angles[i])
            bone = bones[i] / np.linalg.norm(bones[i])
            swing, twist_rot, _ = P.twist_swing(rot, bone)
            worst = max(worst, np.linalg.norm(swing @ twist_rot - rot))
        assert worst < 1e-9

    def test_trained_recovery_fk_round_trip(self):
        cfg = default_config()["p2r"]
        X, Phi, R6 = P.build_dataset(RngStream(1), 1024)
        params, losses = P.train_twistnet(X, Phi, R6, cfg, seed=0)
        assert losses[-1] < losses[0]
        X_held, _, _ = P.build_dataset(RngStream(77), 200)
        errs = []
        for i in range(len(X_held)):
            canon = X_held[i].reshape(-1, 3)
            rels = P.infer_rotations(params, canon)
            errs.append(np.linalg.norm(P.fk_rotations(rels) - canon,
                                       axis=-1).mean())
        assert float(np.mean(errs)) < 0.02


# -- criterion: path planning optimality -------------------------------------


class TestPathPlanning:
    """A* equals an independent Dijkstra on 50 random 64x64 maps at zero
    collision weight; with the shaped cost, paths avoid occupied cells
    (< 1 min)."""

    @staticmethod
    def dijkstra(wmap, start_cell, goal_cell):
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

    def random_maps(self, n=50):
        maps = []
        seed = 0
        while len(maps) < n:
            seed += 1
            grid = (RngStream(4000 + seed).uniform(0.0, 1.0, (64, 64))
                    < 0.25).astype(np.uint8)
            grid[0, 0] = grid[63, 63] = 0
            wmap = WalkableMap(grid, np.zeros(2), 1.0)
            if self.dijkstra(wmap, (0, 0), (63, 63)) is not None:
                maps.append(wmap)
        return maps

    def test_zero_weight_matches_dijkstra(self):
        for wmap in self.random_maps():
            plan = astar(wmap, wmap.center_of((0, 0)), wmap.center_of((63, 63)),
                         collision_weight=0.0)
            oracle = self.dijkstra(wmap, (0, 0), (63, 63))
            assert abs(plan.cost - oracle) <= 1e-9

    def test_shaped_cost_paths_avoid_occupied_cells(self):
        for wmap in self.random_maps(10):
            plan = astar(wmap, wmap.center_of((0, 0)), wmap.center_of((63, 63)),
                         collision_weight=1.0)
            for point in plan.points:
                assert not wmap.grid[wmap.cell_of(point)]


# -- criterion: guidance efficiency ------------------------------------------


@pytest.mark.slow
class TestGuidanceEfficiency:
    """Signal-space guidance >= 1.5x faster and <= 0.7x the peak transient
    memory of latent-space guidance on an identical 100-window workload
    (< 10 min)."""

    def test_speed_and_memory_ratios(self):
        cfg, params, sched = tiny_planner(T=50, window=16, context=8)
        handle = PlannerHandle(params, sched, Standardizer.identity(), cfg,
                               GuidanceConfig())
        terms = [GuidanceTerm("Pos", 1.0, target=np.array([1.0, 0.0]), joint=0)]
        sig = E.measure_guidance_cost(handle, terms, "signal-space", 100, seed=0)
        lat = E.measure_guidance_cost(handle, terms, "latent-space", 100, seed=0)
        assert lat["seconds"] / sig["seconds"] >= 1.5
        assert sig["peak_bytes"] / lat["peak_bytes"] <= 0.7


# -- criterion: metric exactness ---------------------------------------------


class TestMetricExactness:
    """Three hand-constructed analytic traces whose metrics are forced by
    the formulas, matched with zero tolerance (< 1 s)."""

    def test_constant_velocity(self):
        frames = 10
        kpts = np.zeros((frames, K, 3))
        kpts[:, :, 0] = 0.125 * np.arange(frames)[:, None]
        kpts[:, :, 2] = 0.5
        markers = np.zeros((frames, 2, 3))
        markers[:, :, 2] = 0.005
        trace = E.EpisodeTrace(frames, frames, kpts, markers,
                               np.zeros(frames), [True], [])
        assert E.execution_rate(trace) == 1.0
        assert E.physics_metrics(trace, tolerance=0.005) == (0.0, 0.0, 0.0)
        assert E.jerk_metrics(trace) == (0.0, 0.0)
        assert E.weighted_metric(0.0, E.execution_rate(trace)) == 0.0

    def test_single_jump(self):
        frames, t0, h = 12, 6, 0.25
        kpts = np.zeros((frames, K, 3))
        kpts[:, :, 2] = 0.5
        kpts[t0, 2, 2] += h
        trace = E.EpisodeTrace(frames, frames, kpts, np.zeros((frames, 2, 3)),
                               np.zeros(frames), [True], [t0])
        pj, auj = E.jerk_metrics(trace, window=10)
        assert pj == 3 * h
        series = [0.0, 0.0, 0.0, h, 3 * h, 3 * h, h, 0.0, 0.0]
        assert auj == sum((a + b) / 2 for a, b in zip(series, series[1:]))
        assert E.physics_metrics(trace, tolerance=0.005) == (0.0, 0.0, 0.0)

    def test_grounded_stationary(self):
        frames, executed = 8, 4
        kpts = np.zeros((executed, K, 3))
        kpts[:, :, 2] = -0.13
        markers = np.zeros((executed, 2, 3))
        markers[:, :, 2] = 0.03
        trace = E.EpisodeTrace(frames, executed, kpts, markers,
                               np.full(executed, 0.004), [False], [])
        rate = E.execution_rate(trace)
        assert rate == 0.5
        pen, flt, skate = E.physics_metrics(trace, tolerance=0.005)
        assert pen == 0.13 - 0.005
        assert flt == 0.03 - 0.005
        assert skate == 0.004
        assert E.jerk_metrics(trace) == (0.0, 0.0)
        assert E.weighted_metric(pen, rate) == (0.13 - 0.005) * 2
        assert E.weighted_metric(skate, rate) == 0.008


# -- criterion: pipeline determinism -----------------------------------------


@pytest.mark.slow
class TestPipelineDeterminism:
    """The full pipeline (corpus -> train -> adapt -> eval) under fixed seeds
    reproduces every artifact and metric report bit-exactly."""

    CFG = {
        "planner": {"width": 32, "layers": 2, "ffn_width": 48, "window": 12,
                    "context": 4, "diffusion_steps": 6, "train_steps": 20,
                    "batch": 8},
        "corpus": {"windows": 48, "interaction_windows": 12},
        "controller": {"hidden": 32, "minibatch": 256, "pretrain_bc_steps": 30,
                       "pretrain_ppo_epochs": 1, "horizon": 8},
        "tta": {"epochs": 2},
        "eval": {"trials": 2, "time_limit": 30},
    }

    def run_pipeline(self, root):
        from motionlab.cli import EXIT_OK, main

        root.mkdir(parents=True, exist_ok=True)
        cfg_path = root / "cfg.yaml"
        cfg_path.write_text(yaml.safe_dump(self.CFG))
        out = root / "run"
        base = ["--config", str(cfg_path), "--seed", "0", "--out", str(out)]
        assert main(["gen-corpus", *base]) == EXIT_OK
        assert main(["train", "planner", *base]) == EXIT_OK
        assert main(["train", "policy", *base]) == EXIT_OK
        assert main(["adapt", *base, "--envs", "4", "--epochs", "2",
                     "--planner", str(out / "planner.pset"),
                     "--policy", str(out / "policy.pset")]) == EXIT_OK
        ev = root / "eval"
        assert main(["eval", "--config", str(cfg_path), "--out", str(ev),
                     "--seeds", "0,1", "--trials", "2",
                     "--planner", str(out / "planner.pset"),
                     "--policy", str(out / "adapted.pset")]) == EXIT_OK
        return out, ev

    def test_two_runs_bit_exact(self, tmp_path):
        out_a, ev_a = self.run_pipeline(tmp_path / "a")
        out_b, ev_b = self.run_pipeline(tmp_path / "b")
        for name in ("corpus.npz", "planner.pset", "policy.pset",
                     "adapted.pset", "history.csv"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name
        for name in ("summary.json", "metrics.csv"):
            assert (ev_a / name).read_bytes() == (ev_b / name).read_bytes(), name
