"""PW-UCT binding search over a skeleton's decision tree.

Each rollout descends from the root. A node either grows a new child through
the sampler (while progressive widening allows it) or hands over to its best
child by UCB. Every entered node gets a visit, the partial binding is
checked against the world, and the rollout ends at the first failing layer
or at a complete feasible binding. The search returns at the first success.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np
from scipy.stats import qmc

from . import cp as cpmod
from .acquisition import (ActiveConstraintSet, ConstraintModel, MixedDomain, cp_bo_step,
                          maximize, ucb)
from .skeleton import DecisionVar
from .surrogate import (GPClassifier, GPRegressor, KernelParams, SurrogateError, encode,
                        fit_classifier, fit_regression)
from .world import Task, evaluate_bindings

MAX_REWARD = 1.1
FAILURE_ONLY_LENGTHSCALE = 0.15
FAILURE_ONLY_MEAN = 1.0


class SearchError(ValueError):
    pass


class SamplerError(RuntimeError):
    """The sampler could not produce an in-domain value."""


@dataclass(eq=False)
class TreeNode:
    depth: int
    binding: Any = None
    domain: DecisionVar | None = None
    parent: "TreeNode | None" = field(default=None, repr=False)
    children: list["TreeNode"] = field(default_factory=list, repr=False)
    visits: int = 0
    value_sum: float = 0.0
    terminal_count: int = 0
    success: bool = False
    uid: int = 0

    @property
    def mean(self) -> float:
        return self.value_sum / self.visits if self.visits else 0.0

    def prefix(self) -> tuple:
        out = []
        node = self
        while node.parent is not None:
            out.append(node.binding)
            node = node.parent
        return tuple(reversed(out))

    def walk(self):
        stack = [self]
        while stack:
            n = stack.pop()
            yield n
            stack.extend(reversed(n.children))


@dataclass(frozen=True)
class SearchConfig:
    n_rollout: int = 500
    pw_c: float = 1.0
    pw_alpha: float = 0.5
    ucb_c: float = 1.0
    seed: int = 0
    beta: float = 4.0
    ga_budget: int = 512
    acq_tol: float = 0.05

    def __post_init__(self):
        if self.n_rollout < 1:
            raise SearchError("n_rollout must be positive")
        if self.pw_c <= 0 or self.ucb_c <= 0:
            raise SearchError("pw_c and ucb_c must be positive")
        if not 0 < self.pw_alpha < 1:
            raise SearchError("pw_alpha must lie in (0, 1)")
        if self.beta < 0 or self.acq_tol < 0:
            raise SearchError("beta and acq_tol must be non-negative")


@dataclass
class SearchResult:
    feasible_bindings: tuple | None
    rollouts_used: int
    rewards: list[float]
    cp_points_recorded: int
    root: TreeNode = field(repr=False, default=None)


# ---------------------------------------------------------------- tree rules

def compute_reward(d_end: int, d_total: int, success: bool) -> float:
    if d_total < 1:
        raise SearchError("d_total must be at least 1")
    if not 0 <= d_end <= d_total:
        raise SearchError(f"d_end {d_end} outside [0, {d_total}]")
    return 0.1 * (d_end / d_total) + (1.0 if success else 0.0)


def pw_cap(visits: int, config: SearchConfig) -> int:
    return math.ceil(config.pw_c * visits ** config.pw_alpha)


def expandable_by_pw(node: TreeNode, config: SearchConfig) -> bool:
    if node.domain is None:
        raise SearchError("node has no decision variable below it")
    if node.domain.is_discrete and len(node.children) >= len(node.domain.discrete_domain):
        return False
    return len(node.children) < pw_cap(node.visits, config)


def select_child_by_ucb(node: TreeNode, config: SearchConfig) -> TreeNode:
    if not node.children:
        raise SearchError("cannot select among zero children")
    best, best_score = None, -math.inf
    log_n = math.log(max(node.visits, 1))
    for child in node.children:
        if child.visits == 0:
            return child
        score = child.value_sum / child.visits + config.ucb_c * math.sqrt(log_n / child.visits)
        if score > best_score:
            best, best_score = child, score
    return best


def back_propagate(node: TreeNode, reward: float) -> None:
    while node is not None:
        node.value_sum += reward
        node = node.parent


def get_feasible_bindings(root: TreeNode) -> tuple | None:
    for node in root.walk():
        if node.success:
            return node.prefix()
    return None


# ---------------------------------------------------------------- samplers

@dataclass
class SampleContext:
    task: Task
    prefix: tuple
    var_index: int
    cp_dict: cpmod.CPDictionary | None
    config: SearchConfig
    rng: np.random.Generator


class Sampler(Protocol):
    name: str

    def reset(self, task: Task, config: SearchConfig) -> None: ...

    def sample_new_child(self, node: TreeNode, var: DecisionVar, context: SampleContext): ...

    def observe(self, path: list[TreeNode], reward: float) -> None: ...


def _unused(node: TreeNode, var: DecisionVar) -> tuple:
    taken = {c.binding for c in node.children}
    free = tuple(s for s in var.discrete_domain if s not in taken)
    if not free:
        raise SamplerError(f"{var.name}: discrete domain exhausted at this node")
    return free


class QuasiRandom:
    """Scrambled Halton draws per node; least-sampled-first for symbols.

    Each node owns its own sequence, seeded from the search seed and the
    node's creation index, so siblings spread out in the unit box.
    """

    name = "quasi-random"

    def __init__(self):
        self._engines: dict[int, qmc.Halton] = {}
        self._counts: dict[str, dict[str, int]] = {}
        self._seed = 0
        self._rng = np.random.default_rng(0)

    def reset(self, task: Task, config: SearchConfig) -> None:
        self._engines.clear()
        self._counts = {v.name: {s: 0 for s in v.discrete_domain}
                        for v in task.decision_vars if v.is_discrete}
        self._seed = config.seed
        self._rng = np.random.default_rng([config.seed, 7])

    def sample_new_child(self, node: TreeNode, var: DecisionVar, context: SampleContext | None = None):
        if var.is_discrete:
            free = _unused(node, var)
            counts = self._counts.setdefault(var.name, {s: 0 for s in var.discrete_domain})
            low = min(counts[s] for s in free)
            pool = [s for s in free if counts[s] == low]
            pick = pool[int(self._rng.integers(len(pool)))]
            counts[pick] += 1
            return pick
        eng = self._engines.get(node.uid)
        if eng is None:
            eng = qmc.Halton(var.continuous_dim, scramble=True, seed=np.random.default_rng([self._seed, node.uid]))
            self._engines[node.uid] = eng
        return tuple(float(v) for v in eng.random(1)[0])

    def observe(self, path, reward) -> None:
        pass


class MCTSBO:
    """GP-UCB on the rollout reward, one regression model per tree depth.

    Inputs are the full binding vector encoded with bound prefix values and
    domain midpoints (uniform one-hots) for variables below the depth.
    """

    name = "mcts-bo"

    def __init__(self, refit_every: int = 10, restarts: int = 5, max_fit_points: int = 200):
        self.fallback = QuasiRandom()
        self.refit_every = refit_every
        self.restarts = restarts
        self.max_fit_points = max_fit_points

    def reset(self, task: Task, config: SearchConfig) -> None:
        self.fallback.reset(task, config)
        self.vars = list(task.decision_vars)
        self.encodings = [cpmod.var_encoding(v) for v in self.vars]
        self.data: dict[int, list[tuple[np.ndarray, float]]] = {}
        self.params: dict[int, tuple[int, KernelParams]] = {}
        self.rng = np.random.default_rng([config.seed, 11])

    def _encode(self, prefix) -> np.ndarray:
        vals = list(prefix) + [v.midpoint() for v in self.vars[len(prefix):]]
        return encode(vals, self.encodings)

    def observe(self, path, reward) -> None:
        for node in path[1:]:
            self.data.setdefault(node.depth - 1, []).append((self._encode(node.prefix()), reward))

    def _model(self, k: int) -> GPRegressor | None:
        data = self.data.get(k, [])
        if len(data) < 2:
            return None
        X = np.array([d[0] for d in data])
        y = np.array([d[1] for d in data])
        last = self.params.get(k)
        if last is None or len(data) - last[0] >= self.refit_every:
            Xf, yf = X, y
            if len(y) > self.max_fit_points:
                idx = np.sort(self.rng.choice(len(y), self.max_fit_points, replace=False))
                Xf, yf = X[idx], y[idx]
            model = fit_regression(Xf, yf, restarts=self.restarts, rng=self.rng,
                                   init=last[1] if last else None)
            self.params[k] = (len(data), model.params)
            if len(yf) == len(y):
                return model
        return GPRegressor(self.params[k][1], X, y)

    def sample_new_child(self, node: TreeNode, var: DecisionVar, context: SampleContext):
        k = context.var_index
        try:
            model = self._model(k)
        except SurrogateError:
            model = None
        if model is None:
            return self.fallback.sample_new_child(node, var, context)
        enc = self.encodings
        pre = encode(list(context.prefix), enc[:k]) if k else np.zeros(0)
        post = encode([v.midpoint() for v in self.vars[k + 1:]], enc[k + 1:]) if k + 1 < len(enc) else np.zeros(0)
        if var.is_discrete:
            dom = MixedDomain((var.name,), (tuple(var.discrete_domain),), (_unused(node, var),))
        else:
            dom = MixedDomain((var.name,), (var.continuous_dim,))

        def acq(Z):
            n = len(Z)
            full = np.hstack([np.broadcast_to(pre, (n, len(pre))), Z, np.broadcast_to(post, (n, len(post)))])
            return ucb(model, full, context.config.beta)

        anchor = dom.encode([self.fallback.sample_new_child(node, var, context)])
        value, _ = maximize(acq, dom, context.config.ga_budget, context.rng, [anchor], context.config.acq_tol)
        return value[0]


@dataclass
class _ClassifierCache:
    entry: cpmod.CPEntry
    n_points: int
    n_hyper: int
    params: KernelParams
    model: GPClassifier


class CPBO:
    """Maximizes the minimum feasibility probability over the active CP models.

    A model is active for a variable when its projection includes that
    variable. The search is joint over the variable and any later variables
    the active projections also touch; earlier variables are fixed to the
    node's prefix. Single-class datasets give no usable model and are skipped.
    """

    name = "cp-bo"

    def __init__(self, refit_every: int = 10, restarts: int = 2, max_points: int = 120,
                 failure_only: bool = True, prior_mean: float = -0.5, smote_min: int = 5,
                 refit_growth: float = 1.5):
        self.refit_growth = refit_growth
        self.fallback = QuasiRandom()
        self.smote_min = smote_min
        self.prior_mean = prior_mean
        self.failure_only = failure_only
        self.refit_every = refit_every
        self.restarts = restarts
        self.max_points = max_points
        self._cache: dict[str, _ClassifierCache] = {}

    def reset(self, task: Task, config: SearchConfig) -> None:
        self.fallback.reset(task, config)
        self.rng = np.random.default_rng([config.seed, 13])

    def observe(self, path, reward) -> None:
        pass

    def classifier(self, entry: cpmod.CPEntry, type_id: str) -> GPClassifier | None:
        pts = entry.points
        n = len(pts)
        c = self._cache.get(type_id)
        if c is not None and c.entry is not entry:
            c = None
        if c is not None and c.n_points == n:
            return c.model
        labels = np.array([1.0 if p.y == -1 else -1.0 for p in pts])
        if labels.min() > 0 or (labels.max() < 0 and not self.failure_only):
            return None
        X = np.array([encode(p.x, entry.encoding) for p in pts])
        if labels.max() < 0 and self.failure_only:
            # failures only: an optimistic prior with local dips around each failure
            X = np.unique(X, axis=0)[-self.max_points:]
            params = KernelParams(np.full(X.shape[1], FAILURE_ONLY_LENGTHSCALE), 1.0, 0.0, FAILURE_ONLY_MEAN)
            model = GPClassifier(params, X, -np.ones(len(X)))
            self._cache[type_id] = _ClassifierCache(entry, n, 0, None, model)
            return model
        if c is not None and c.params is None:
            c = None
        optimize_hypers = c is None or (n - c.n_hyper >= self.refit_every
                                        and n >= self.refit_growth * c.n_hyper)
        # warm refits polish the cached optimum instead of restarting
        model = fit_classifier(X, labels, params=c.params if c else None, optimize_hypers=optimize_hypers,
                               restarts=self.restarts if c is None else 1, rng=self.rng, encodings=entry.encoding,
                               max_points=self.max_points, prior_mean=self.prior_mean, smote_min=self.smote_min)
        if model.fallback:
            return None
        self._cache[type_id] = _ClassifierCache(entry, n, n if optimize_hypers else c.n_hyper, model.params, model)
        return model

    def constraint_set(self, context: SampleContext, var: DecisionVar) -> ActiveConstraintSet:
        if context.cp_dict is None:
            return ActiveConstraintSet()
        acts = cpmod.activate(context.cp_dict, context.task).get(var.name, [])
        models = []
        for act in acts:
            model = self.classifier(act.entry, act.type_id)
            if model is not None:
                models.append(ConstraintModel(act.type_id, model, tuple(act.var_names), tuple(
                    tuple(e) if isinstance(e, list) else e for e in act.entry.encoding)))
        return ActiveConstraintSet(models)

    def sample_new_child(self, node: TreeNode, var: DecisionVar, context: SampleContext):
        cs = self.constraint_set(context, var)
        if not cs.models:
            return self.fallback.sample_new_child(node, var, context)
        task_vars = list(context.task.decision_vars)
        k = context.var_index
        bound = {v.name: val for v, val in zip(task_vars, context.prefix)}
        free = [v for v in task_vars[k:] if v.name in set(cs.var_names())]
        names, kinds, allowed = [], [], []
        for v in free:
            names.append(v.name)
            if v.is_discrete:
                kinds.append(tuple(v.discrete_domain))
                allowed.append(_unused(node, v) if v.name == var.name else None)
            else:
                kinds.append(v.continuous_dim)
                allowed.append(None)
        dom = MixedDomain(tuple(names), tuple(kinds), tuple(allowed))
        fixed = {v.name: encode([bound[v.name]], [cpmod.var_encoding(v)]) for v in task_vars[:k]}
        # the node's next quasi-random draw anchors the search and wins near-ties
        anchor = [self.fallback.sample_new_child(node, var, context)]
        for v in free[1:]:
            anchor.append(v.discrete_domain[int(context.rng.integers(len(v.discrete_domain)))]
                          if v.is_discrete else v.midpoint())
        values, _ = cp_bo_step(cs, dom, context.config.ga_budget, context.rng, fixed,
                               [dom.encode(anchor)], context.config.acq_tol)
        return values[0]


SAMPLERS = {"quasi-random": QuasiRandom, "mcts-bo": MCTSBO, "cp-bo": CPBO}


def make_sampler(kind: str) -> Sampler:
    try:
        return SAMPLERS[kind]()
    except KeyError:
        raise SearchError(f"unknown sampler {kind!r}") from None


# ---------------------------------------------------------------- search

def search(task: Task, sampler: Sampler, config: SearchConfig,
           cp_dict: cpmod.CPDictionary | None = None) -> SearchResult:
    """Run PW-UCT rollouts until the first feasible binding or the budget runs out."""
    sk = task.skeleton
    d_total = sk.total_depth
    if d_total < 1:
        raise SearchError("task has no decision variables")
    sampler.reset(task, config)
    rng = np.random.default_rng([config.seed, 3])
    inject_rng = np.random.default_rng([config.seed, 5])
    vars_ = list(task.decision_vars)
    uid = 0
    root = TreeNode(0, None, vars_[0], uid=uid)
    rewards: list[float] = []
    recorded = 0
    for _ in range(config.n_rollout):
        node = root
        node.visits += 1
        path = [root]
        reward = None
        while node.depth < d_total:
            var = vars_[node.depth]
            created = False
            if expandable_by_pw(node, config):
                ctx = SampleContext(task, node.prefix(), node.depth, cp_dict, config, rng)
                try:
                    value = sampler.sample_new_child(node, var, ctx)
                except SamplerError:
                    reward = 0.0
                    break
                if not var.contains(value):
                    reward = 0.0
                    break
                uid += 1
                child = TreeNode(node.depth + 1, value, vars_[node.depth + 1] if node.depth + 1 < d_total else None,
                                 parent=node, uid=uid)
                node.children.append(child)
                created = True
            else:
                child = select_child_by_ucb(node, config)
            node = child
            node.visits += 1
            path.append(node)
            layer = sk.transition_ops(node.depth - 1)
            outcome = evaluate_bindings(task, node.prefix(), inject_rng, inject_from=layer[0] if layer else 0)
            if created and cp_dict is not None:
                recorded += cpmod.record_outcome(cp_dict, task, node.prefix(), outcome.per_constraint, set(layer))
            if outcome.violated:
                reward = compute_reward(outcome.d_end, d_total, False)
                break
            if outcome.feasible:
                node.success = True
                reward = compute_reward(d_total, d_total, True)
                break
        if reward is None:
            reward = 0.0
        node.terminal_count += 1
        back_propagate(node, reward)
        sampler.observe(path, reward)
        rewards.append(reward)
        if node.success:
            return SearchResult(get_feasible_bindings(root), len(rewards), rewards, recorded, root)
    return SearchResult(None, len(rewards), rewards, recorded, root)
