import itertools
import json
import math

import numpy as np
import pytest
from shapely.geometry import Polygon

from cptamp import geometry as geo
from cptamp.world import (GRASP_DIRS, INJECTED, REACH, BindingError, Pose, WorldError, WorldPose,
                          build_task, check_grasp, check_motion, check_place, evaluate_bindings,
                          task_from_dict, TASK_IDS)

GRID = np.linspace(0.0, 1.0, 11)


# ---------------------------------------------------------------- oracles

def approach_oracle(world, body, pose, direction):
    """Gripper approach box written out per direction."""
    b = world.body_box(body, pose)
    lo, hi = np.array(b.lo), np.array(b.hi)
    c = world.clearance
    lo, hi = lo - c, hi + c
    depth = world.approach_depth
    axis, sign = {"front": (1, -1), "back": (1, 1), "left": (0, -1), "right": (0, 1), "top": (2, 1)}[direction]
    if sign > 0:
        lo[axis], hi[axis] = b.hi[axis], b.hi[axis] + depth
    else:
        lo[axis], hi[axis] = b.lo[axis] - depth, b.lo[axis]
    return lo, hi


def strictly_overlap(lo1, hi1, lo2, hi2):
    return all(lo1[i] < hi2[i] - 1e-9 and lo2[i] < hi1[i] - 1e-9 for i in range(3))


def desk_oracle(task, d, p):
    """Compose the desk checks directly: grasp at pose0, grasp at target, transfer motion, place."""
    w = task.world
    start = w.body_poses["body"]
    target = w.pose_on("region2", "body", Pose(*p))
    for op_index, pose in ((1, start), (5, target)):
        if not check_grasp(w, "body", pose, d).satisfied:
            return False, op_index
    if not check_motion(w, "body", start, target, d).satisfied:
        return False, 6
    if not check_place(w, "body", target, "region2", {}).satisfied:
        return False, 7
    return True, None


# ---------------------------------------------------------------- checks

@pytest.mark.parametrize("direction", GRASP_DIRS)
def test_grasp_at_pose0_matches_box_oracle(desk, direction):
    w = desk.world
    pose = w.body_poses["body"]
    lo, hi = approach_oracle(w, "body", pose, direction)
    hits = sorted(n for n, o in w.obstacles.items() if strictly_overlap(lo, hi, o.aabb.lo, o.aabb.hi))
    reach = w.robot_reach
    in_reach = all(lo[i] >= reach.lo[i] - 1e-9 and hi[i] <= reach.hi[i] + 1e-9 for i in range(3))
    res = check_grasp(w, "body", pose, direction)
    assert list(res.colliding_obstacles) == hits
    assert res.satisfied == (not hits and in_reach)
    assert (REACH in res.violated) == (not in_reach)
    assert res.y_cp == (-1 if res.satisfied else 0)


def test_desk_blocked_directions(desk):
    blocked = {d: sorted(check_grasp(desk.world, "body", desk.world.body_poses["body"], d).violated)
               for d in GRASP_DIRS}
    assert blocked["right"] == ["obstacle2"]
    assert blocked["back"] == ["obstacle1"]
    assert blocked["top"] == [] and blocked["front"] == [] and blocked["left"] == []


def test_place_overlap_matrix_matches_shapely(pack):
    w = pack.world
    other = WorldPose(0.2, 0.0, 0.05, 0.3, "region5")
    others = {"body2": other}
    other_poly = Polygon(w.body_footprint("body2", other))
    r = w.regions["region5"]
    region_poly = Polygon([(r.lo[0], r.lo[1]), (r.hi[0], r.lo[1]), (r.hi[0], r.hi[1]), (r.lo[0], r.hi[1])])
    for u, v in itertools.product(GRID, GRID):
        target = w.pose_on("region5", "body1", Pose(u, v, 0.1))
        poly = Polygon(w.body_footprint("body1", target))
        res = check_place(w, "body1", target, "region5", others)
        overlap = poly.intersection(other_poly).area > 1e-9
        inside = region_poly.buffer(1e-9).contains(poly)
        assert ("body2" in res.violated) == overlap, (u, v)
        assert ("region5" in res.violated) == (not inside), (u, v)


def test_motion_matches_sampled_sweep(desk):
    w = desk.world
    start = w.body_poses["body"]
    rng = np.random.default_rng(1)
    for _ in range(150):
        d = GRASP_DIRS[rng.integers(5)]
        target = w.pose_on("region2", "body", Pose(*rng.random(3)))
        res = check_motion(w, "body", start, target, d)
        lift = max(w.clearance_height + w.bodies["body"].half_extents[2], start.z, target.z)
        waypoints = [(start.x, start.y, start.z), (start.x, start.y, lift),
                     (target.x, target.y, lift), (target.x, target.y, target.z)]
        hit = set()
        for a, b in zip(waypoints, waypoints[1:]):
            for s in np.linspace(0, 1, 101):
                p = WorldPose(*(np.array(a) + s * (np.array(b) - np.array(a))), start.yaw)
                bb = w.body_box("body", p)
                for box in (bb, w.approach_box(bb, d)):
                    for n, o in w.obstacles.items():
                        if box.intersects(o.aabb):
                            hit.add(n)
        # sampling may miss grazing contact but never invents it
        assert hit <= set(res.colliding_obstacles)
        for n in set(res.colliding_obstacles) - hit:
            o = w.obstacles[n].aabb.expanded(-0.003)
            assert not any(box.intersects(o) for box in [w.body_box("body", start)]), n


def test_motion_without_translation_is_free(desk):
    p = desk.world.body_poses["body"]
    assert check_motion(desk.world, "body", p, p, "top").satisfied


def test_unknown_names_rejected(desk):
    w = desk.world
    with pytest.raises(WorldError):
        check_grasp(w, "ghost", w.body_poses["body"], "top")
    with pytest.raises(WorldError):
        check_place(w, "body", w.body_poses["body"], "nowhere")
    with pytest.raises(WorldError):
        w.approach_box(w.body_box("body", w.body_poses["body"]), "down")


# ---------------------------------------------------------------- evaluation

def test_desk_grid_matches_composition_oracle(desk):
    mismatches = []
    for d in GRASP_DIRS:
        for p in itertools.product(GRID, GRID, GRID):
            out = evaluate_bindings(desk, [d, p])
            ok, op = desk_oracle(desk, d, p)
            first = next((r.op_index for r in out.per_constraint if not r.satisfied), None)
            if out.feasible != ok or first != op:
                mismatches.append((d, p))
    assert mismatches == []


def test_feasible_fraction_is_small_but_nonzero(desk):
    hits = sum(evaluate_bindings(desk, [d, p]).feasible
               for d in GRASP_DIRS for p in itertools.product(GRID, GRID, GRID))
    frac = hits / (5 * 11 ** 3)
    assert 0.0 < frac < 0.2


@pytest.mark.parametrize("task_id", ["regrasp", "pack", "deskP"])
def test_feasible_fraction_monte_carlo(task_id):
    task = build_task(task_id)
    rng = np.random.default_rng(0)
    hits = 0
    n = 3000
    for _ in range(n):
        x = [v.discrete_domain[rng.integers(len(v.discrete_domain))] if v.is_discrete
             else tuple(rng.random(v.continuous_dim)) for v in task.decision_vars]
        hits += evaluate_bindings(task, x).feasible
    assert hits / n < 0.2


def test_partial_vector_and_trace(desk):
    out = evaluate_bindings(desk, ["right"])
    assert out.violated and not out.feasible
    assert out.d_end == 0
    tr = out.failure_trace
    assert tr.failure_op == "Inv-kin(body,pose0,#dir1)"
    assert tr.responsible_decisions == ("#dir1",)
    assert ("obstacle2", "obstacle:4x8x4") in tr.context_objects
    ok = evaluate_bindings(desk, ["top"])
    assert not ok.violated and not ok.feasible and ok.d_end == 1


def test_out_of_domain_binding_raises(desk):
    with pytest.raises(BindingError):
        evaluate_bindings(desk, ["down"])
    with pytest.raises(BindingError):
        evaluate_bindings(desk, ["top", (0.5, 1.5, 0.0)])
    with pytest.raises(BindingError):
        evaluate_bindings(desk, ["top", (0.5, 0.5, 0.5), "extra"])


def test_injected_failures_respect_inject_from(desk):
    src = json.loads(json.dumps(desk.source))
    src["failure_rate"] = 1.0
    noisy = task_from_dict(src)
    rng = np.random.default_rng(0)
    out = evaluate_bindings(noisy, ["top"], rng)
    assert out.violated and INJECTED in out.per_constraint[-1].violated
    # checks before inject_from stay deterministic
    out = evaluate_bindings(noisy, ["top"], rng, inject_from=5)
    assert not out.violated
    # no rng, no injection
    assert not evaluate_bindings(noisy, ["top"]).violated


@pytest.mark.parametrize("task_id", TASK_IDS)
def test_shipped_tasks_load(task_id):
    t = build_task(task_id)
    assert t.task_id == task_id
    assert t.d_total >= 1
    for op in t.check_ops():
        assert t.candidates(op)


def test_task_file_errors(desk):
    with pytest.raises(WorldError):
        build_task("kitchen")
    bad = json.loads(json.dumps(desk.source))
    bad["format_version"] = 99
    with pytest.raises(WorldError, match="version"):
        task_from_dict(bad)
    bad = json.loads(json.dumps(desk.source))
    bad["decision_vars"][0]["domain"] = ["top", "sideways"]
    with pytest.raises(WorldError, match="sideways"):
        task_from_dict(bad)


def test_pose_mapping_corners(desk):
    w = desk.world
    r = w.regions["region2"]
    lo = w.pose_on("region2", "body", (0, 0, 0))
    hi = w.pose_on("region2", "body", (1, 1, 0))
    assert (lo.x, lo.y) == pytest.approx(r.lo)
    assert (hi.x, hi.y) == pytest.approx(r.hi)
    assert lo.z == pytest.approx(r.z + w.bodies["body"].half_extents[2])
    assert lo.yaw == 0.0
    with pytest.raises(BindingError):
        Pose(1.2, 0, 0)


def test_pack_yaw_is_used(pack):
    p = pack.world.pose_on("region5", "body1", (0.5, 0.5, 0.25))
    assert p.yaw == pytest.approx(math.pi / 2)
