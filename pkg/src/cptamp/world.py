"""Deterministic box micro-world that evaluates binding vectors against a task.

Scenes are boxes on a table at z = 0. Inverse kinematics is a reach-box plus
approach-clearance test, motion planning is a three-segment swept-box test
(lift to the clearance height, translate, lower). Every evaluation reports
each executed constraint check and, on failure, the causal trace of the
failing operator.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import geometry as geo
from .skeleton import (DECISION, CONTINUOUS, DISCRETE, DecisionVar, Operator, Skeleton,
                       chain_constants, chain_decisions, chain_operators)

TASK_FORMAT_VERSION = 1
TASK_IDS = ("desk", "deskP", "regrasp", "pack", "packP1", "packP2", "packP3")
GRASP_DIRS = ("front", "right", "top", "back", "left")
_DIR_AXES = {"front": (1, -1), "back": (1, 1), "left": (0, -1), "right": (0, 1), "top": (2, 1)}

REACH = "reach"
INJECTED = "injected"

# operator names with geometric checks
GRASP_OP = "Inv-kin"
MOTION_OP = "Plan-motion"
PLACE_OP = "Move-Place"
PICK_OP = "Move-Pick"
SAMPLE_GRASP_OP = "Sample-grasp"
SAMPLE_POSE_OP = "Sample-pose"


class WorldError(ValueError):
    pass


class BindingError(ValueError):
    """A binding value outside its decision domain (not a geometric failure)."""


@dataclass(frozen=True)
class Pose:
    u: float
    v: float
    w: float = 0.0

    def __post_init__(self):
        for c in (self.u, self.v, self.w):
            if not 0.0 <= c <= 1.0:
                raise BindingError(f"pose coordinate {c} outside [0, 1]")


@dataclass(frozen=True)
class WorldPose:
    x: float
    y: float
    z: float
    yaw: float = 0.0
    region: str | None = None


@dataclass(frozen=True)
class Box:
    name: str
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    tag: str = "obstacle"

    def __post_init__(self):
        if any(h <= 0 for h in self.half_extents):
            raise WorldError(f"{self.name}: half extents must be positive")

    @property
    def aabb(self) -> geo.AABB:
        return geo.AABB.from_center(self.center, self.half_extents)

    @property
    def shape_class(self) -> str:
        return "x".join(str(int(round(200 * h))) for h in self.half_extents)


@dataclass(frozen=True)
class Region:
    name: str
    center: tuple[float, float]
    half_size: tuple[float, float]
    z: float = 0.0

    @property
    def lo(self):
        return (self.center[0] - self.half_size[0], self.center[1] - self.half_size[1])

    @property
    def hi(self):
        return (self.center[0] + self.half_size[0], self.center[1] + self.half_size[1])

    @property
    def shape_class(self) -> str:
        return "x".join(str(int(round(200 * h))) for h in self.half_size)


@dataclass
class WorldState:
    bodies: dict[str, Box]
    obstacles: dict[str, Box]
    regions: dict[str, Region]
    body_poses: dict[str, WorldPose]
    robot_reach: geo.AABB
    approach_depth: float = 0.10
    clearance: float = 0.01
    clearance_height: float = 0.05
    use_yaw: bool = False

    def pose_on(self, region: str, body: str, pose: Pose | Sequence[float]) -> WorldPose:
        """Map a unit-box pose on `region` to a world pose for `body`."""
        if region not in self.regions:
            raise WorldError(f"unknown region {region!r}")
        if body not in self.bodies:
            raise WorldError(f"unknown body {body!r}")
        if not isinstance(pose, Pose):
            pose = Pose(*pose)
        r = self.regions[region]
        lo, hi = r.lo, r.hi
        yaw = 2 * math.pi * pose.w if self.use_yaw else 0.0
        return WorldPose(lo[0] + (hi[0] - lo[0]) * pose.u, lo[1] + (hi[1] - lo[1]) * pose.v,
                         r.z + self.bodies[body].half_extents[2], yaw, region)

    def body_box(self, body: str, pose: WorldPose) -> geo.AABB:
        half = self.bodies[body].half_extents
        center, hxy = geo.rect_aabb((pose.x, pose.y), half[:2], pose.yaw)
        return geo.AABB.from_center((center[0], center[1], pose.z), (hxy[0], hxy[1], half[2]))

    def body_footprint(self, body: str, pose: WorldPose) -> np.ndarray:
        return geo.rect_corners((pose.x, pose.y), self.bodies[body].half_extents[:2], pose.yaw)

    def approach_box(self, body_box: geo.AABB, direction: str) -> geo.AABB:
        if direction not in _DIR_AXES:
            raise WorldError(f"unknown grasp direction {direction!r}")
        axis, sign = _DIR_AXES[direction]
        c = body_box.center.copy()
        h = body_box.half_extents + self.clearance
        c[axis] += sign * (body_box.half_extents[axis] + self.approach_depth / 2)
        h[axis] = self.approach_depth / 2
        return geo.AABB.from_center(c, h)

    def type_tag(self, name: str) -> str:
        """Instance-free type label: tag plus quantized shape (centimetres)."""
        if name in self.obstacles:
            o = self.obstacles[name]
            return f"{o.tag}:{o.shape_class}"
        if name in self.bodies:
            return f"body:{self.bodies[name].shape_class}"
        if name in self.regions:
            return f"region-surface:{self.regions[name].shape_class}"
        raise WorldError(f"unknown object {name!r}")


@dataclass(frozen=True)
class ConstraintResult:
    satisfied: bool
    y_cp: int
    colliding_obstacles: tuple[str, ...] = ()
    failure_op: str | None = None
    limit: str | None = None
    penetration: float = 0.0
    op_index: int | None = None

    @property
    def violated(self) -> frozenset[str]:
        """Culprit keys: colliding object names plus the reach/containment limit."""
        keys = set(self.colliding_obstacles)
        if self.limit:
            keys.add(self.limit)
        return frozenset(keys)


def _result(colliding, limit, default_op, penetration=0.0) -> ConstraintResult:
    colliding = tuple(sorted(colliding))
    if colliding or limit:
        return ConstraintResult(False, 0, colliding, default_op, limit, penetration)
    return ConstraintResult(True, -1)


@dataclass(frozen=True)
class FailureTrace:
    failure_op: str
    op_index: int
    responsible_decisions: tuple[str, ...]
    context_objects: tuple[tuple[str, str], ...]
    connection_ops: tuple[str, ...]
    culprits: tuple[tuple[str, str, str | None], ...] = ()
    # skeleton indices behind `connection_ops`; labels repeat in longer skeletons
    connection_indices: tuple[int, ...] = ()


@dataclass(frozen=True)
class SimOutcome:
    feasible: bool
    d_end: int
    per_constraint: tuple[ConstraintResult, ...]
    failure_trace: FailureTrace | None
    violated: bool = False


@dataclass(frozen=True)
class Candidate:
    """One constraint primitive a check can violate: an operator plus a culprit."""
    op_index: int
    culprit: str
    kind: str  # obstacle | reach | region | body
    source: str | None = None  # decision var positioning a movable culprit


# ---------------------------------------------------------------- checks

def check_grasp(world: WorldState, body: str, pose: WorldPose, dir: str) -> ConstraintResult:
    if body not in world.bodies:
        raise WorldError(f"unknown body {body!r}")
    app = world.approach_box(world.body_box(body, pose), dir)
    colliding = [n for n, o in world.obstacles.items() if app.intersects(o.aabb)]
    pen = max((app.penetration(world.obstacles[n].aabb) for n in colliding), default=0.0)
    limit = None if app.inside(world.robot_reach) else REACH
    return _result(colliding, limit, GRASP_OP, pen)


def check_place(world: WorldState, body: str, target: WorldPose, region: str,
                others: dict[str, WorldPose] | None = None) -> ConstraintResult:
    if region not in world.regions:
        raise WorldError(f"unknown region {region!r}")
    if body not in world.bodies:
        raise WorldError(f"unknown body {body!r}")
    if others is None:
        others = {b: p for b, p in world.body_poses.items() if b != body and p is not None}
    r = world.regions[region]
    quad = world.body_footprint(body, target)
    limit = None if geo.rect_inside(quad, r.lo, r.hi) else region
    hz = world.bodies[body].half_extents[2]
    z0, z1 = target.z - hz, target.z + hz
    colliding = []
    for n, o in world.obstacles.items():
        ob = o.aabb
        if ob.lo[2] < z1 - geo.EPS and z0 < ob.hi[2] - geo.EPS:
            oq = geo.rect_corners(o.center[:2], o.half_extents[:2], 0.0)
            if geo.rects_overlap(quad, oq):
                colliding.append(n)
    for n, p in others.items():
        if p is None or n == body:
            continue
        if abs(p.z - target.z) < hz + world.bodies[n].half_extents[2] - geo.EPS:
            if geo.rects_overlap(quad, world.body_footprint(n, p)):
                colliding.append(n)
    return _result(colliding, limit, PLACE_OP)


def motion_boxes(world: WorldState, body: str, pose: WorldPose, dir: str) -> list[geo.AABB]:
    bb = world.body_box(body, pose)
    return [bb, world.approach_box(bb, dir)]


def check_motion(world: WorldState, body: str, frm: WorldPose, to: WorldPose, dir: str) -> ConstraintResult:
    if body not in world.bodies:
        raise WorldError(f"unknown body {body!r}")
    if (frm.x, frm.y, frm.z, frm.yaw) == (to.x, to.y, to.z, to.yaw):
        return ConstraintResult(True, -1)
    hz = world.bodies[body].half_extents[2]
    lifted_z = max(world.clearance_height + hz, frm.z, to.z)
    up = replace(frm, z=lifted_z)
    over = replace(to, z=lifted_z)
    start = motion_boxes(world, body, frm, dir)
    top_start = motion_boxes(world, body, up, dir)
    top_end = motion_boxes(world, body, over, dir)
    end = motion_boxes(world, body, to, dir)
    delta = (over.x - up.x, over.y - up.y, 0.0)
    colliding = []
    for n, o in world.obstacles.items():
        ob = o.aabb
        hit = False
        for k in range(len(start)):
            if (start[k].union(top_start[k]).intersects(ob)
                    or geo.sweep_hits(top_start[k], delta, ob)
                    or top_end[k].union(end[k]).intersects(ob)):
                hit = True
                break
        if hit:
            colliding.append(n)
    return _result(colliding, None, MOTION_OP)


# ---------------------------------------------------------------- tasks

@dataclass(frozen=True)
class _Config:
    body: str
    pose: WorldPose
    dir: str | None


@dataclass(frozen=True)
class _Traj:
    a: Any
    b: Any


@dataclass
class Task:
    task_id: str
    world: WorldState
    skeleton: Skeleton
    fixed_poses: dict[str, str]
    fixed_grasps: dict[str, str]
    home_configs: tuple[str, ...]
    failure_rate: float = 0.0
    source: dict = field(default_factory=dict, repr=False)

    @property
    def decision_vars(self) -> list[DecisionVar]:
        return self.skeleton.decision_vars

    @property
    def d_total(self) -> int:
        return self.skeleton.total_depth

    def constant_type(self, ident: str) -> str:
        if ident in self.fixed_poses:
            return "fixed-pose"
        if ident in self.fixed_grasps:
            return f"fixed-grasp:{self.fixed_grasps[ident]}"
        if ident in self.home_configs:
            return "home-config"
        return self.world.type_tag(ident)

    def check_kind(self, op_index: int) -> str | None:
        return self._check_kinds()[op_index]

    def _check_kinds(self) -> dict[int, str | None]:
        cached = self.__dict__.get("_kinds")
        if cached is not None:
            return cached
        kinds: dict[int, str | None] = {}
        held = None
        for i, op in enumerate(self.skeleton.operators):
            kind = None
            if op.name == GRASP_OP:
                kind = "grasp"
            elif op.name == MOTION_OP and held is not None:
                kind = "motion"
            elif op.name == PLACE_OP:
                kind = "place"
                held = None
            elif op.name == PICK_OP:
                held = op.inputs[0]
            kinds[i] = kind
        self.__dict__["_kinds"] = kinds
        return kinds

    def check_ops(self) -> list[int]:
        return [i for i, k in self._check_kinds().items() if k]

    def candidates(self, op_index: int) -> list[Candidate]:
        """Every culprit the check at `op_index` could report."""
        kind = self.check_kind(op_index)
        if kind is None:
            return []
        obstacles = [Candidate(op_index, n, "obstacle") for n in sorted(self.world.obstacles)]
        if kind == "grasp":
            return obstacles + [Candidate(op_index, REACH, "reach")]
        if kind == "motion":
            return obstacles
        op = self.skeleton.operators[op_index]
        body = op.inputs[0]
        region = self._place_region(op_index)
        out = obstacles + [Candidate(op_index, region, "region")]
        placed = self._placement_sources(op_index)
        for other in sorted(self.world.bodies):
            if other == body:
                continue
            src = placed.get(other)
            pose = self.world.body_poses.get(other)
            if src is not None:
                out.append(Candidate(op_index, other, "body", src))
            elif pose is not None and pose.region == region:
                out.append(Candidate(op_index, other, "body"))
        return out

    def _place_region(self, op_index: int) -> str:
        sk = self.skeleton
        for i in reversed(chain_operators(sk, op_index)):
            op = sk.operators[i]
            if op.name == SAMPLE_POSE_OP:
                return op.inputs[1]
        raise WorldError(f"{sk.operators[op_index].label}: no sampled placement pose upstream")

    def _placement_sources(self, op_index: int) -> dict[str, str]:
        """Bodies already placed before `op_index`, mapped to their pose decision."""
        out = {}
        sk = self.skeleton
        for i in range(op_index):
            op = sk.operators[i]
            if op.name == PLACE_OP:
                decs = [d for d in chain_decisions(sk, i) if not sk.var(d).is_discrete]
                if decs:
                    out[op.inputs[0]] = decs[-1]
            elif op.name == PICK_OP:
                out.pop(op.inputs[0], None)
        return out

    def trace_for(self, op_index: int, culprits: Sequence[Candidate]) -> FailureTrace:
        """Causal trace of a failure at `op_index` caused by `culprits`."""
        sk = self.skeleton
        ops = chain_operators(sk, op_index)
        decisions = chain_decisions(sk, op_index)
        context = [(c, self.constant_type(c)) for c in chain_constants(sk, op_index)]
        culprit_rows = []
        for c in culprits:
            if c.kind == "reach":
                continue
            tag = self.world.type_tag(c.culprit)
            culprit_rows.append((c.culprit, tag, c.source))
            if (c.culprit, tag) not in context:
                context.append((c.culprit, tag))
            if c.source is not None:
                if c.source not in decisions:
                    decisions.append(c.source)
                src_op = sk.producer(c.source)
                if src_op not in ops:
                    ops.append(src_op)
                for ident in sk.operators[src_op].inputs:
                    if ident in sk.constants and (ident, self.constant_type(ident)) not in context:
                        context.append((ident, self.constant_type(ident)))
        order = [v.name for v in sk.decision_vars]
        decisions.sort(key=order.index)
        return FailureTrace(
            failure_op=sk.operators[op_index].label,
            op_index=op_index,
            responsible_decisions=tuple(decisions),
            context_objects=tuple(context),
            connection_ops=tuple(sk.operators[i].label for i in sorted(set(ops))),
            culprits=tuple(culprit_rows),
            connection_indices=tuple(sorted(set(ops))),
        )

    def without_obstacles(self) -> "Task":
        src = copy.deepcopy(self.source)
        src["obstacles"] = []
        src["task_id"] = self.task_id + "-free"
        return task_from_dict(src)


def evaluate_bindings(task: Task, x: Sequence, rng: np.random.Generator | None = None,
                      inject_from: int = 0) -> SimOutcome:
    """Run the skeleton on a (possibly partial) binding vector.

    Stops at the first unsatisfied check. `feasible` means a complete vector
    with every check satisfied; `violated` marks a geometric failure.
    Injected failures only hit checks at operator index >= `inject_from`.
    """
    sk = task.skeleton
    world = task.world
    if len(x) > sk.total_depth:
        raise BindingError(f"{len(x)} bindings for {sk.total_depth} decisions")
    for var, val in zip(sk.decision_vars, x):
        if not var.contains(val):
            raise BindingError(f"{val!r} is outside the domain of {var.name}")
    values: dict[str, Any] = {}
    for ident in sk.constants:
        if ident in task.fixed_poses:
            values[ident] = world.body_poses[task.fixed_poses[ident]]
        elif ident in task.fixed_grasps:
            values[ident] = task.fixed_grasps[ident]
        else:
            values[ident] = ident
    poses = dict(world.body_poses)
    held: str | None = None
    results: list[ConstraintResult] = []
    depth = 0
    for i, op in enumerate(sk.operators):
        if op.layer == DECISION:
            if depth >= len(x):
                break
            var = sk.decision_vars[depth]
            val = x[depth]
            if op.name == SAMPLE_POSE_OP:
                values[var.name] = world.pose_on(op.inputs[1], op.inputs[0], Pose(*val))
            else:
                values[var.name] = val
            depth += 1
            continue
        args = [values[a] for a in op.inputs]
        res = None
        if op.name == GRASP_OP:
            body, pose, gdir = args
            res = check_grasp(world, body, pose, gdir)
            values[op.outputs[0]] = _Config(body, pose, gdir)
        elif op.name == MOTION_OP:
            a, b = args
            if held is not None and isinstance(a, _Config) and isinstance(b, _Config):
                res = check_motion(world, held, a.pose, b.pose, a.dir)
            for out in op.outputs:
                values[out] = _Traj(a, b)
        elif op.name == PICK_OP:
            held = args[0]
            poses[held] = None
        elif op.name == PLACE_OP:
            body, via = args
            cfg = via.b if isinstance(via, _Traj) else via
            others = {b: p for b, p in poses.items() if b != body and p is not None}
            res = check_place(world, body, cfg.pose, cfg.pose.region, others)
            if res.satisfied:
                poses[body] = cfg.pose
                held = None
        else:
            for out in op.outputs:
                values[out] = tuple(args)
        if res is None:
            continue
        if (res.satisfied and task.failure_rate > 0 and rng is not None and i >= inject_from
                and rng.random() < task.failure_rate):
            res = ConstraintResult(False, 0, (), op.name, INJECTED)
        res = replace(res, op_index=i, failure_op=None if res.satisfied else op.label)
        results.append(res)
        if not res.satisfied:
            culprits = [c for c in task.candidates(i) if c.culprit in res.violated]
            trace = task.trace_for(i, culprits)
            return SimOutcome(False, depth - 1, tuple(results), trace, True)
    return SimOutcome(depth == sk.total_depth, depth, tuple(results), None, False)


# ---------------------------------------------------------------- task files

def task_from_dict(spec: dict) -> Task:
    if spec.get("format_version") != TASK_FORMAT_VERSION:
        raise WorldError(f"task file version {spec.get('format_version')!r} != {TASK_FORMAT_VERSION}")
    g = spec.get("gripper", {})
    bodies = {b["name"]: Box(b["name"], tuple(b["center"]), tuple(b["half_extents"]), "body")
              for b in spec["bodies"]}
    obstacles = {o["name"]: Box(o["name"], tuple(o["center"]), tuple(o["half_extents"]), o.get("tag", "obstacle"))
                 for o in spec.get("obstacles", [])}
    regions = {r["name"]: Region(r["name"], tuple(r["center"]), tuple(r["half_size"]), r.get("z", 0.0))
               for r in spec["regions"]}
    body_poses = {}
    for b in spec["bodies"]:
        c = b["center"]
        body_poses[b["name"]] = WorldPose(c[0], c[1], c[2], 0.0, b.get("region"))
    reach = spec["robot_reach"]
    world = WorldState(bodies, obstacles, regions, body_poses, geo.AABB(tuple(reach["min"]), tuple(reach["max"])),
                       g.get("approach_depth", 0.10), g.get("clearance", 0.01),
                       spec.get("clearance_height", 0.05), spec.get("use_yaw", False))
    dvars = []
    for d in spec["decision_vars"]:
        if d["kind"] == DISCRETE:
            dvars.append(DecisionVar(d["name"], DISCRETE, tuple(d["domain"]), 0, d["type_tag"]))
        else:
            dvars.append(DecisionVar(d["name"], CONTINUOUS, (), int(d["dim"]), d["type_tag"]))
    for d in dvars:
        if d.is_discrete and d.var_type_tag == "grasp-dir":
            bad = set(d.discrete_domain) - set(GRASP_DIRS)
            if bad:
                raise WorldError(f"{d.name}: unknown grasp directions {sorted(bad)}")
    fixed_poses = dict(spec.get("fixed_poses", {}))
    fixed_grasps = dict(spec.get("fixed_grasps", {}))
    homes = tuple(spec.get("home_configs", []))
    constants = set(bodies) | set(regions) | set(fixed_poses) | set(fixed_grasps) | set(homes)
    ops = [Operator(o["name"], tuple(o["inputs"]), tuple(o.get("outputs", [])), o["layer"])
           for o in spec["operators"]]
    skeleton = Skeleton(ops, dvars, frozenset(constants))
    return Task(spec["task_id"], world, skeleton, fixed_poses, fixed_grasps, homes,
                spec.get("failure_rate", 0.0), spec)


def load_task(path: str | Path) -> Task:
    with open(path) as fh:
        return task_from_dict(json.load(fh))


def build_task(task_id: str) -> Task:
    if task_id not in TASK_IDS:
        raise WorldError(f"unknown task {task_id!r}; expected one of {', '.join(TASK_IDS)}")
    text = resources.files("cptamp").joinpath("tasks", f"{task_id}.json").read_text()
    return task_from_dict(json.loads(text))
