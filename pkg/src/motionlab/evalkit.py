"""Tasks, success criteria, the sequential-subtask executor, and metrics.

An episode is a sequence of subtasks (reach / sit / getup / touch / compose)
executed against the physics world with the planner-policy stack. The trace
records keypoints, contact markers, and skate per frame; metrics follow the
execution-rate-weighted convention: a raw physics metric divided by the
fraction of frames the simulation survived.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import yaml

from . import controller as ctrl
from .config import K, PELVIS, RIGHT_WRIST, STYLE_TOKENS
from .nav import WalkableMap
from .rng import RngStream
from .tta import PlannerHandle, TtaPool, TtaTask
from .world import (
    AgentState,
    ObstacleField,
    SimulationFault,
    keypoints_batch,
    markers_batch,
    step_batch,
)

KINDS = ("REACH", "SIT", "GETUP", "TOUCH", "COMPOSE")


@dataclass
class Subtask:
    kind: str
    style: int
    target: np.ndarray | None = None  # world xy
    target_joint: int = 0
    time_limit: int = 500
    obstacle_weight: float = 0.0
    target_weight: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown subtask kind: {self.kind}")
        if self.time_limit <= 0:
            raise ValueError("time limit must be positive")
        if self.target is not None:
            self.target = np.asarray(self.target, float)


@dataclass
class TaskPlan:
    subtasks: list

    def __post_init__(self):
        if not self.subtasks:
            raise ValueError("task plan must hold at least one subtask")


@dataclass
class EpisodeTrace:
    planned_frames: int
    executed_frames: int
    kpts: np.ndarray  # (F, K, 3)
    markers: np.ndarray  # (F, 2, 3)
    skate: np.ndarray  # (F,)
    subtask_success: list
    transitions: list  # frame indices where a subtask completed
    faulted: bool = False

    def __post_init__(self):
        if self.planned_frames <= 0:
            raise ValueError("planned frame count must be positive")
        if self.executed_frames > self.planned_frames:
            raise ValueError("executed cannot exceed planned frames")


@dataclass
class MetricReport:
    execution_rate: float
    success_rate: float
    pen: float
    float_: float
    skate: float
    pj: float
    auj: float
    weighted: dict
    excluded: int = 0  # zero-execution episodes left out of weighted averages

    def as_dict(self):
        out = {
            "execution_rate": self.execution_rate,
            "success_rate": self.success_rate,
            "pen": self.pen,
            "float": self.float_,
            "skate": self.skate,
            "pj": self.pj,
            "auj": self.auj,
            "excluded": self.excluded,
        }
        out.update({f"weighted_{k}": v for k, v in self.weighted.items()})
        return out


# -- metric primitives -------------------------------------------------------


def execution_rate(trace: EpisodeTrace) -> float:
    return trace.executed_frames / trace.planned_frames


def weighted_metric(raw: float, rate: float) -> float:
    """Execution-rate weighting: the metric a full episode would have shown."""
    if rate <= 0.0:
        raise ValueError("weighted metrics need a positive execution rate")
    return raw / rate


def physics_metrics(trace: EpisodeTrace, tolerance: float = 0.005):
    """(Pen, Float, Skate) means over executed frames.

    Pen measures keypoint depth below ground beyond the tolerance; Float the
    clearance of the lowest contact marker beyond the tolerance; Skate the
    recorded per-frame contact-marker slide.
    """
    if trace.executed_frames == 0:
        return 0.0, 0.0, 0.0
    kz = trace.kpts[: trace.executed_frames, :, 2].min(axis=1)
    pen = np.maximum(0.0, -kz - tolerance).mean()
    mz = trace.markers[: trace.executed_frames, :, 2].min(axis=1)
    flt = np.maximum(0.0, mz - tolerance).mean()
    skate = trace.skate[: trace.executed_frames].mean()
    return float(pen), float(flt), float(skate)


def jerk_series(kpts: np.ndarray) -> np.ndarray:
    """Per-frame max-joint jerk magnitude by third-order finite differences."""
    if len(kpts) < 4:
        raise ValueError("jerk needs at least 4 frames")
    j = np.diff(kpts, n=3, axis=0)
    return np.linalg.norm(j, axis=-1).max(axis=-1)


def jerk_metrics(trace: EpisodeTrace, window: int = 10):
    """(PJ, AUJ): the peak of the jerk curve and the trapezoidal area under
    it inside +/- `window` frames of each subtask transition (the whole curve
    when the trace has no transitions)."""
    if trace.executed_frames < 4:
        raise ValueError("jerk metrics need at least 4 executed frames")
    series = jerk_series(trace.kpts[: trace.executed_frames])
    pj = float(series.max())
    if trace.transitions:
        auj = 0.0
        for t in trace.transitions:
            lo = max(0, t - window)
            hi = min(len(series), t + window + 1)
            if hi - lo >= 2:
                auj += float(np.trapezoid(series[lo:hi]))
    else:
        auj = float(np.trapezoid(series)) if len(series) >= 2 else 0.0
    return pj, auj


def subtask_success(kind: str, kpts_tail: np.ndarray, params: dict) -> bool:
    """Did any frame of the tail satisfy the subtask's success predicate?"""
    if kind == "REACH" or kind == "GETUP":
        target = np.asarray(params["target"], float)
        d = np.linalg.norm(kpts_tail[:, PELVIS, :2] - target, axis=-1)
        return bool((d <= params.get("reach_threshold", 0.3)).any())
    if kind == "TOUCH":
        target = np.asarray(params["target"], float)
        joint = params.get("target_joint", RIGHT_WRIST)
        d = np.linalg.norm(kpts_tail[:, joint, :2] - target, axis=-1)
        return bool((d <= params.get("touch_threshold", 0.1)).any())
    if kind == "SIT":
        lo, hi = params.get("sit_band", (0.25, 0.55))
        z = kpts_tail[:, PELVIS, 2]
        return bool(((z >= lo) & (z <= hi)).any())
    if kind == "COMPOSE":
        return True  # style following: surviving the window is the criterion
    raise ValueError(f"unknown subtask kind: {kind}")


def aggregate(traces: list[EpisodeTrace], cfg_eval: dict) -> MetricReport:
    """MetricReport over a batch of episodes."""
    rates = np.array([execution_rate(t) for t in traces])
    success = np.array([all(t.subtask_success) and not t.faulted for t in traces])
    raws = {"pen": [], "float": [], "skate": [], "pj": [], "auj": []}
    weighted = {k: [] for k in raws}
    excluded = 0
    for t, rate in zip(traces, rates):
        if t.executed_frames < 4:
            excluded += 1
            continue
        pen, flt, skate = physics_metrics(t, cfg_eval["pen_tolerance"])
        pj, auj = jerk_metrics(t, cfg_eval["auj_window"])
        vals = {"pen": pen, "float": flt, "skate": skate, "pj": pj, "auj": auj}
        for k, v in vals.items():
            raws[k].append(v)
            weighted[k].append(weighted_metric(v, rate))
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0
    return MetricReport(
        execution_rate=float(rates.mean()),
        success_rate=float(success.mean()),
        pen=mean(raws["pen"]),
        float_=mean(raws["float"]),
        skate=mean(raws["skate"]),
        pj=mean(raws["pj"]),
        auj=mean(raws["auj"]),
        weighted={k: mean(v) for k, v in weighted.items()},
        excluded=excluded,
    )


# -- scene / plan configuration ----------------------------------------------


def load_scene_plan(path):
    """Scene plan file -> (TaskPlan, ObstacleField).

    Three sections: `rooms` gives the visiting order and which objects each
    room interacts with; `objects` carries footprint boxes and named target
    points; `sequences` lists each object's subtask recipe.
    """
    with open(path) as f:
        doc = yaml.safe_load(f)
    objects = doc.get("objects", {})
    sequences = doc.get("sequences", {})
    bounds = np.asarray(doc.get("bounds", [-10, -10, 10, 10]), float)
    boxes = [
        [*spec["footprint"][:2], *spec["footprint"][2:]]
        for spec in objects.values()
        if spec.get("footprint")
    ]
    field_ = ObstacleField(np.asarray(boxes, float).reshape(-1, 4), bounds)

    subtasks = []
    for room in doc.get("rooms", []):
        for obj_name in room.get("objects", []):
            spec = objects[obj_name]
            for step in sequences[obj_name]:
                target_name = step.get("target")
                target = spec["targets"][target_name] if target_name else None
                subtasks.append(
                    Subtask(
                        kind=step["kind"],
                        style=STYLE_TOKENS.index(step["style"]),
                        target=target,
                        target_joint=step.get("target_joint", 0),
                        time_limit=step.get("time_limit", 500),
                        obstacle_weight=step.get("obstacle_weight", 0.0),
                        target_weight=step.get("target_weight", 0.0),
                    )
                )
    return TaskPlan(subtasks), field_


# -- execution ---------------------------------------------------------------


@dataclass
class Stack:
    """Everything run_sequence needs: frozen planner, policy, scene, config."""

    planner: PlannerHandle
    policy_raw: dict
    cfg: dict
    field: ObstacleField
    walkable: WalkableMap | None = None
    p2r: object = None


def run_sequence(plan: TaskPlan, stack: Stack, seed: int,
                 start: AgentState | None = None) -> EpisodeTrace:
    """Execute the subtasks in order with the frozen policy.

    On subtask success the next condition is fed immediately; on simulator
    fault or tracking divergence the sequence terminates as a failure.
    """
    cfg = stack.cfg
    rng = RngStream(seed)
    planned = sum(s.time_limit for s in plan.subtasks)
    state = start.copy() if start is not None else AgentState.rest(cfg["world"]["stand_height"])

    # reuse the pool machinery for history/replanning with a single env
    task0 = plan.subtasks[0]
    pool_task = TtaTask(
        style=task0.style,
        target_xy=task0.target if task0.target is not None else state.pos[:2].copy(),
        field=stack.field,
        walkable=stack.walkable,
        target_joint=task0.target_joint,
        obstacle_weight=task0.obstacle_weight,
        target_weight=task0.target_weight,
        intermediate_radius=cfg["nav"]["intermediate_radius"],
    )
    pool = TtaPool(1, pool_task, cfg, seed=seed)
    pool.states.set(0, state)
    pool.history[0] = pool._seed_history(state)

    kpts_log, markers_log, skate_log = [], [], []
    successes, transitions = [], []
    faulted = False
    frame = 0
    replan_period = cfg["planner"]["window"]
    fail_error = cfg["controller"]["fail_error"]
    eval_params = {
        "reach_threshold": cfg["eval"]["reach_threshold"],
        "touch_threshold": cfg["eval"]["touch_threshold"],
        "sit_band": tuple(cfg["eval"]["sit_band"]),
    }

    for sub in plan.subtasks:
        pool.task = TtaTask(
            style=sub.style,
            target_xy=sub.target if sub.target is not None else pool.states.pos[0, :2].copy(),
            field=stack.field,
            walkable=stack.walkable,
            target_joint=sub.target_joint,
            obstacle_weight=sub.obstacle_weight,
            target_weight=sub.target_weight,
            intermediate_radius=cfg["nav"]["intermediate_radius"],
        )
        pool.plans[0] = None  # new condition -> replan immediately
        done = False
        params = dict(eval_params, target=sub.target, target_joint=sub.target_joint)
        for _ in range(sub.time_limit):
            stale = pool.plans[0] is not None and (
                frame - pool.plan_start[0] >= replan_period
                or pool.plan_cursor(0) + 2 >= len(pool.plans[0]["yaw"])
            )
            if pool.plans[0] is None or stale:
                pool.h_global[0] = frame
                pool.replan(0, stack.planner, rng)
            cursor = pool.plan_cursor(0)
            kpts = keypoints_batch(pool.states)
            kpt_vel = np.tile(pool.states.vel[:, None, :], (1, K, 1))
            obs = ctrl.observe_batch(
                pool.states, kpts, kpt_vel,
                pool.plans[0]["kpts"][cursor][None], pool.plans[0]["kpt_vel"][cursor][None],
            )
            actions, _ = ctrl.act(stack.policy_raw, obs, rng, cfg["controller"]["sigma"],
                                  deterministic=True)
            try:
                pool.states, rep = step_batch(pool.states, actions, cfg["world"]["dt"],
                                              cfg["world"], stack.field)
            except SimulationFault:
                faulted = True
                break
            pool.h_global[0] = frame + 1
            pool._push_history(0)
            frame += 1
            k_now = keypoints_batch(pool.states)[0]
            kpts_log.append(k_now)
            markers_log.append(markers_batch(pool.states, k_now[None], cfg["world"])[0])
            skate_log.append(float(rep["skate"][0]))

            err = np.mean(np.linalg.norm(k_now - pool.plans[0]["kpts"][cursor], axis=-1))
            if err > fail_error:
                faulted = True
                break
            if sub.kind != "COMPOSE" and subtask_success(sub.kind, k_now[None], params):
                done = True
                break
        if faulted:
            successes.append(False)
            break
        if sub.kind == "COMPOSE":
            done = True
        successes.append(done)
        transitions.append(frame)
        if not done:
            break  # subtask timed out: sequence failure

    executed = len(kpts_log)
    return EpisodeTrace(
        planned_frames=planned,
        executed_frames=executed,
        kpts=np.stack(kpts_log) if kpts_log else np.zeros((1, K, 3)),
        markers=np.stack(markers_log) if markers_log else np.zeros((1, 2, 3)),
        skate=np.asarray(skate_log) if skate_log else np.zeros(1),
        subtask_success=successes + [False] * (len(plan.subtasks) - len(successes)),
        transitions=transitions,
        faulted=faulted,
    )


def mean_reports(reports: list[MetricReport]) -> MetricReport:
    """Field-wise arithmetic mean over per-seed reports (excluded counts sum)."""
    if not reports:
        raise ValueError("need at least one report to aggregate")
    mean = lambda key: float(np.mean([getattr(r, key) for r in reports]))
    return MetricReport(
        execution_rate=mean("execution_rate"),
        success_rate=mean("success_rate"),
        pen=mean("pen"),
        float_=mean("float_"),
        skate=mean("skate"),
        pj=mean("pj"),
        auj=mean("auj"),
        weighted={k: float(np.mean([r.weighted[k] for r in reports]))
                  for k in reports[0].weighted},
        excluded=sum(r.excluded for r in reports),
    )


def measure_guidance_cost(planner: PlannerHandle, terms, mode: str,
                          n_windows: int, seed: int) -> dict:
    """Wallclock and peak transient allocation for one guidance mode on a
    fixed sampling workload. Both modes consume identical inputs so the
    numbers are directly comparable."""
    import time
    import tracemalloc

    from dataclasses import replace

    from .guidance import sample_guided
    from .motionrep import Anchor, Condition, FEAT_DIM

    gcfg = replace(planner.gcfg, mode=mode)
    rng = RngStream(seed)
    context = rng.normal((1, planner.cfg["context"], FEAT_DIM))
    cond = Condition(style=0, target=np.array([1.0, 0.0]), target_joint=0)
    anchor = Anchor(np.zeros(2), 0.0)

    tracemalloc.start()
    tracemalloc.reset_peak()
    t0 = time.perf_counter()
    for i in range(n_windows):
        sample_guided(planner.raw, planner.sched, context, cond, terms, gcfg,
                      RngStream(seed + 1 + i), planner.cfg, anchor,
                      standardizer=planner.stats)
    seconds = time.perf_counter() - t0
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return {"seconds": seconds, "peak_bytes": peak, "windows": n_windows}


def goal_reach_plan(rng: RngStream, scale: float, cfg, style: int = 0) -> TaskPlan:
    """Goal-reach sampling: base distance 1-3 m scaled, time limit scaled."""
    distance = float(rng.uniform(1.0, 3.0, ())) * scale
    angle = float(rng.uniform(-np.pi, np.pi, ()))
    target = distance * np.array([np.cos(angle), np.sin(angle)])
    limit = int(cfg["eval"]["time_limit"] * scale)
    return TaskPlan([Subtask("REACH", style, target, time_limit=limit, target_weight=0.0)])
