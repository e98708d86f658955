import json
import math

import numpy as np
import pytest

from cptamp import cp, uct
from cptamp.skeleton import CONTINUOUS, DISCRETE, DecisionVar
from cptamp.uct import (CPBO, QuasiRandom, SampleContext, SamplerError, SearchConfig, SearchError,
                        TreeNode, back_propagate, compute_reward, expandable_by_pw,
                        get_feasible_bindings, make_sampler, pw_cap, search, select_child_by_ucb)
from cptamp.world import evaluate_bindings, task_from_dict

DIR = DecisionVar("#dir1", DISCRETE, ("front", "right", "top", "back", "left"), 0, "grasp-dir")
POSE = DecisionVar("#pose12", CONTINUOUS, (), 3, "place-pose")


@pytest.fixture(scope="module")
def impossible(desk):
    src = json.loads(json.dumps(desk.source))
    src["bodies"][0]["half_extents"] = [0.2, 0.25, 0.06]
    src["task_id"] = "impossible"
    return task_from_dict(src)


def audit(root, config):
    violations = []
    for n in root.walk():
        if len(n.children) > pw_cap(n.visits, config):
            violations.append(("pw", n.uid))
        if n.visits != sum(c.visits for c in n.children) + n.terminal_count:
            violations.append(("visits", n.uid))
        if n.domain is not None and n.domain.is_discrete:
            b = [c.binding for c in n.children]
            if len(b) != len(set(b)):
                violations.append(("dup", n.uid))
    return violations


# ---------------------------------------------------------------- tree rules

def test_reward_table():
    assert compute_reward(2, 2, True) == 1.1
    assert compute_reward(1, 2, False) == 0.05
    assert compute_reward(0, 2, False) == 0.0
    with pytest.raises(SearchError):
        compute_reward(0, 0, False)
    with pytest.raises(SearchError):
        compute_reward(3, 2, False)


def node_with(n_children, visits, domain=POSE):
    n = TreeNode(0, None, domain, visits=visits)
    n.children = [TreeNode(1, i, None, parent=n) for i in range(n_children)]
    return n


def test_progressive_widening_rule():
    cfg = SearchConfig()
    assert not expandable_by_pw(node_with(2, 4), cfg)
    assert expandable_by_pw(node_with(2, 9), cfg)
    full = node_with(5, 10_000, DIR)
    assert not expandable_by_pw(full, cfg)
    assert pw_cap(0, cfg) == 0 and pw_cap(1, cfg) == 1 and pw_cap(10, cfg) == 4
    with pytest.raises(SearchError):
        expandable_by_pw(TreeNode(2), cfg)


def test_ucb_selection():
    cfg = SearchConfig()
    n = node_with(2, 4)
    for c, v in zip(n.children, (0.6, 0.4)):
        c.visits, c.value_sum = 2, 2 * v
    assert select_child_by_ucb(n, cfg) is n.children[0]
    n.children[1].visits = 0
    assert select_child_by_ucb(n, cfg) is n.children[1]
    n = node_with(2, 12)
    n.children[0].visits, n.children[0].value_sum = 10, 5.0
    n.children[1].visits, n.children[1].value_sum = 2, 0.9
    s0 = 0.5 + math.sqrt(math.log(12) / 10)
    s1 = 0.45 + math.sqrt(math.log(12) / 2)
    assert s1 > s0
    assert select_child_by_ucb(n, cfg) is n.children[1]
    with pytest.raises(SearchError):
        select_child_by_ucb(node_with(0, 3), cfg)


def test_ucb_ties_go_to_lowest_index():
    n = node_with(3, 9)
    for c in n.children:
        c.visits, c.value_sum = 3, 1.5
    assert select_child_by_ucb(n, SearchConfig()) is n.children[0]


def test_back_propagation():
    root = TreeNode(0, None, DIR)
    a = TreeNode(1, "top", POSE, parent=root)
    b = TreeNode(2, (0.1, 0.2, 0.3), None, parent=a)
    back_propagate(b, 1.1)
    assert [x.value_sum for x in (root, a, b)] == [1.1, 1.1, 1.1]
    back_propagate(b, 0.0)
    assert root.value_sum == 1.1
    r = TreeNode(0, None, DIR)
    for reward in (0.05, 1.1):
        r.visits += 1
        back_propagate(r, reward)
    assert r.mean == pytest.approx(0.575)


def test_get_feasible_bindings():
    root = TreeNode(0, None, DIR)
    assert get_feasible_bindings(root) is None
    a = TreeNode(1, "front", POSE, parent=root)
    root.children.append(a)
    leaf = TreeNode(2, (0.6, 0.3, 0.9), None, parent=a)
    a.children.append(leaf)
    assert get_feasible_bindings(root) is None
    leaf.success = True
    assert get_feasible_bindings(root) == ("front", (0.6, 0.3, 0.9))


def test_config_validation():
    for kw in (dict(n_rollout=0), dict(pw_c=0), dict(ucb_c=-1), dict(pw_alpha=1.0), dict(beta=-1)):
        with pytest.raises(SearchError):
            SearchConfig(**kw)
    with pytest.raises(SearchError):
        make_sampler("voronoi")


# ---------------------------------------------------------------- search

def test_obstacle_free_desk_is_quick(desk):
    free = desk.without_obstacles()
    for seed in range(20):
        r = search(free, QuasiRandom(), SearchConfig(seed=seed))
        assert r.feasible_bindings is not None and r.rollouts_used <= 3


def test_exhaustion_on_impossible_task(impossible):
    cfg = SearchConfig(n_rollout=60, seed=1)
    r = search(impossible, QuasiRandom(), cfg)
    assert r.feasible_bindings is None and r.rollouts_used == 60
    assert audit(r.root, cfg) == []


def test_pw_audit_after_500_rollouts(impossible):
    cfg = SearchConfig(n_rollout=500, seed=2)
    r = search(impossible, QuasiRandom(), cfg)
    assert r.rollouts_used == 500
    assert audit(r.root, cfg) == []
    assert all(0.0 <= x <= 1.1 for x in r.rewards)


@pytest.mark.parametrize("kind", ["quasi-random", "mcts-bo", "cp-bo"])
def test_search_finds_desk_and_returns_early(desk, kind):
    d = cp.CPDictionary()
    r = search(desk, make_sampler(kind), SearchConfig(seed=4), d)
    assert r.feasible_bindings is not None
    assert evaluate_bindings(desk, r.feasible_bindings).feasible
    assert r.rewards[-1] == 1.1 and all(x < 1.1 for x in r.rewards[:-1])
    assert len(r.rewards) == r.rollouts_used
    assert r.cp_points_recorded == d.n_points > 0
    assert audit(r.root, SearchConfig()) == []


@pytest.mark.parametrize("kind", ["quasi-random", "mcts-bo", "cp-bo"])
def test_search_is_reproducible(regrasp, kind):
    runs = [search(regrasp, make_sampler(kind), SearchConfig(seed=7, n_rollout=40), cp.CPDictionary())
            for _ in range(2)]
    assert runs[0].rewards == runs[1].rewards
    assert runs[0].feasible_bindings == runs[1].feasible_bindings


def test_cp_bo_without_store_matches_quasi_random(regrasp):
    a = search(regrasp, QuasiRandom(), SearchConfig(seed=3, n_rollout=40))
    b = search(regrasp, CPBO(), SearchConfig(seed=3, n_rollout=40), None)
    assert a.rewards == b.rewards
    assert [n.binding for n in a.root.walk()] == [n.binding for n in b.root.walk()]


def test_quasi_random_draws(desk):
    s = QuasiRandom()
    cfg = SearchConfig(seed=0)
    s.reset(desk, cfg)
    node = TreeNode(1, "top", POSE, uid=1)
    pts = [s.sample_new_child(node, POSE) for _ in range(4)]
    assert all(POSE.contains(p) for p in pts) and len(set(pts)) == 4
    root = TreeNode(0, None, DIR)
    picks = []
    for _ in range(5):
        v = s.sample_new_child(root, DIR)
        picks.append(v)
        root.children.append(TreeNode(1, v, POSE, parent=root))
    assert sorted(picks) == sorted(DIR.discrete_domain)
    with pytest.raises(SamplerError):
        s.sample_new_child(root, DIR)


def test_cp_bo_avoids_observed_grasp_failures(desk):
    d = cp.CPDictionary()
    for _ in range(3):
        for g in DIR.discrete_domain:
            out = evaluate_bindings(desk, [g])
            cp.record_outcome(d, desk, [g], out.per_constraint)
    s = CPBO()
    cfg = SearchConfig(seed=0)
    s.reset(desk, cfg)
    root = TreeNode(0, None, DIR)
    ctx = SampleContext(desk, (), 0, d, cfg, np.random.default_rng(0))
    cs = s.constraint_set(ctx, DIR)
    assert len(cs) > 0
    pick = s.sample_new_child(root, DIR, ctx)
    assert pick not in ("right", "back")
    from cptamp.acquisition import mpf
    probs = {g: mpf(cs, {"#dir1": g}) for g in DIR.discrete_domain}
    assert min(probs[g] for g in ("front", "top", "left")) > max(probs["right"], probs["back"])


class Broken(QuasiRandom):
    name = "broken"

    def sample_new_child(self, node, var, context=None):
        if var.is_discrete:
            raise SamplerError("nothing left")
        return super().sample_new_child(node, var, context)


def test_sampler_failure_aborts_rollout_only(desk):
    r = search(desk, Broken(), SearchConfig(n_rollout=5))
    assert r.rollouts_used == 5 and r.rewards == [0.0] * 5
