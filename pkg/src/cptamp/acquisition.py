"""Acquisition functions and the evolutionary maximizer over mixed domains.

Candidates are handled in encoded form: a row concatenates raw unit-box
coordinates for continuous variables and one-hot blocks for discrete ones,
so every acquisition is evaluated on a whole population at once.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import qmc

from .surrogate import GPClassifier, GPRegressor, blocks, encode

POPULATION = 32
ELITES = 2
DEFAULT_BUDGET = 512
EXHAUSTIVE_LIMIT = 64


class AcquisitionError(ValueError):
    pass


@dataclass(frozen=True)
class MixedDomain:
    """Named variables, each a tuple of symbols or a continuous dimension.

    `allowed` optionally narrows a discrete variable to a subset of its
    symbols while keeping the full one-hot width of its encoding.
    """
    names: tuple[str, ...]
    kinds: tuple  # tuple[str, ...] for discrete, int for continuous
    allowed: tuple = ()

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise AcquisitionError("names and kinds differ in length")
        if self.allowed and len(self.allowed) != len(self.kinds):
            raise AcquisitionError("allowed must list one entry per variable")
        for i, k in enumerate(self.kinds):
            if isinstance(k, tuple) and not self.choices(i):
                raise AcquisitionError(f"{self.names[i]}: empty discrete domain")

    def choices(self, i: int) -> tuple:
        """Allowed symbols of discrete variable i."""
        kind = self.kinds[i]
        if self.allowed and self.allowed[i] is not None:
            return tuple(s for s in kind if s in self.allowed[i])
        return kind

    @functools.cached_property
    def blocks(self):
        return blocks(self.kinds)

    @functools.cached_property
    def _gene_masks(self):
        """Per gene a boolean column mask, plus the continuous-column mask."""
        genes = np.zeros((len(self.kinds), self.dim), dtype=bool)
        for i, (s, e, _) in enumerate(self.blocks):
            genes[i, s:e] = True
        cont = np.zeros(self.dim, dtype=bool)
        for s, e, onehot in self.blocks:
            cont[s:e] = not onehot
        return genes, cont

    @property
    def dim(self) -> int:
        return self.blocks[-1][1] if self.kinds else 0

    @property
    def all_discrete(self) -> bool:
        return all(isinstance(k, tuple) for k in self.kinds)

    def n_combinations(self) -> int:
        return math.prod(len(self.choices(i)) for i in range(len(self.kinds)))

    def encode(self, values: Sequence) -> np.ndarray:
        return encode(values, self.kinds)

    def decode(self, row: np.ndarray) -> tuple:
        out = []
        for (start, stop, onehot), kind in zip(self.blocks, self.kinds):
            seg = row[start:stop]
            out.append(kind[int(np.argmax(seg))] if onehot else tuple(float(v) for v in seg))
        return tuple(out)

    def contains(self, values: Sequence) -> bool:
        for i, (v, k) in enumerate(zip(values, self.kinds)):
            if isinstance(k, tuple):
                if v not in self.choices(i):
                    return False
            elif len(v) != k or not all(0.0 <= c <= 1.0 for c in v):
                return False
        return len(values) == len(self.kinds)


# ---------------------------------------------------------------- acquisitions

def ucb(model: GPRegressor, x, beta: float) -> np.ndarray | float:
    """mu + sqrt(beta) * sigma, for one encoded point or a batch."""
    X = np.asarray(x, dtype=float)
    mean, var = model.predict(np.atleast_2d(X))
    val = mean + math.sqrt(beta) * np.sqrt(var)
    return float(val[0]) if X.ndim == 1 else val


@dataclass(frozen=True)
class ConstraintModel:
    type_id: str
    model: GPClassifier
    var_names: tuple[str, ...]
    encodings: tuple  # per variable: symbol tuple or continuous dimension

    def prob(self, x: Mapping) -> float:
        z = encode([x[v] for v in self.var_names], self.encodings)
        return float(self.model.predict_prob(z[None, :])[0])


@dataclass
class ActiveConstraintSet:
    """Fitted CP classifiers and the decision variables each one projects onto."""
    models: list[ConstraintModel] = field(default_factory=list)

    def __len__(self):
        return len(self.models)

    def var_names(self) -> list[str]:
        seen = []
        for m in self.models:
            for v in m.var_names:
                if v not in seen:
                    seen.append(v)
        return seen

    def probabilities(self, domain: MixedDomain, Z: np.ndarray,
                      fixed: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        """(n_points, n_models) feasibility probabilities of encoded rows Z."""
        Z = np.atleast_2d(Z)
        fixed = fixed or {}
        cols = {n: (s, e) for n, (s, e, _) in zip(domain.names, domain.blocks)}
        out = np.empty((len(Z), len(self.models)))
        for j, cm in enumerate(self.models):
            parts = []
            for v in cm.var_names:
                if v in cols:
                    s, e = cols[v]
                    parts.append(Z[:, s:e])
                elif v in fixed:
                    parts.append(np.broadcast_to(fixed[v], (len(Z), len(fixed[v]))))
                else:
                    raise AcquisitionError(f"{cm.type_id}: variable {v!r} is neither free nor fixed")
            out[:, j] = cm.model.predict_prob(np.hstack(parts))
        return out


def mpf(constraints: ActiveConstraintSet, x: Mapping) -> float:
    """Minimum probability of feasibility of a named binding; 1.0 when no constraints."""
    try:
        return min((cm.prob(x) for cm in constraints.models), default=1.0)
    except (KeyError, ValueError) as exc:
        raise AcquisitionError(f"cannot project binding: {exc}") from exc


def mpf_batch(constraints: ActiveConstraintSet, domain: MixedDomain, Z: np.ndarray,
              fixed: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    if not constraints.models:
        return np.ones(len(np.atleast_2d(Z)))
    return constraints.probabilities(domain, Z, fixed).min(axis=1)


# ---------------------------------------------------------------- maximizer

def _random_population(domain: MixedDomain, n: int, rng: np.random.Generator) -> np.ndarray:
    Z = np.zeros((n, domain.dim))
    for i, (s, e, onehot) in enumerate(domain.blocks):
        if onehot:
            idx = _choice_index(domain, i)
            Z[np.arange(n), s + idx[rng.integers(len(idx), size=n)]] = 1.0
        else:
            Z[:, s:e] = rng.random((n, e - s))
    return Z


def _choice_index(domain: MixedDomain, i: int) -> np.ndarray:
    kind = domain.kinds[i]
    return np.array([kind.index(c) for c in domain.choices(i)])


def _exhaustive(domain: MixedDomain) -> np.ndarray:
    rows = []
    for combo in itertools.product(*(domain.choices(i) for i in range(len(domain.kinds)))):
        rows.append(domain.encode(combo))
    return np.array(rows)


def _crossover(A, B, domain, rng, eta=15.0):
    """SBX on continuous columns, uniform block swap on one-hot genes, row-wise."""
    genes, cont = domain._gene_masks
    n = len(A)
    swap = (rng.random((n, len(genes))) < 0.5) @ genes & ~cont
    C1, C2 = np.where(swap, B, A), np.where(swap, A, B)
    u = rng.random((n, domain.dim))
    beta = np.where(u <= 0.5, (2 * u) ** (1 / (eta + 1)), (1 / (2 * (1 - u) + 1e-300)) ** (1 / (eta + 1)))
    sbx = cont & (rng.random((n, domain.dim)) <= 0.5) & (np.abs(A - B) >= 1e-12)
    C1 = np.where(sbx, 0.5 * ((1 + beta) * A + (1 - beta) * B), C1)
    C2 = np.where(sbx, 0.5 * ((1 - beta) * A + (1 + beta) * B), C2)
    return C1, C2


def _mutate(Z, domain, rng, sigma=0.1):
    """Each gene mutates with probability 1/n_genes: Gaussian or a discrete resample."""
    genes, cont = domain._gene_masks
    n = len(Z)
    hit = rng.random((n, len(genes))) < 1.0 / len(genes)
    Z = Z + ((hit @ genes) & cont) * rng.normal(0.0, sigma, Z.shape)
    for i, (s, e, onehot) in enumerate(domain.blocks):
        rows = np.flatnonzero(hit[:, i])
        if onehot and len(rows):
            idx = _choice_index(domain, i)
            Z[rows, s:e] = 0.0
            Z[rows, s + idx[rng.integers(len(idx), size=len(rows))]] = 1.0
    Z[:, cont] = np.clip(Z[:, cont], 0.0, 1.0)
    return Z


def maximize(acq: Callable[[np.ndarray], np.ndarray], domain: MixedDomain,
             budget: int = DEFAULT_BUDGET, seed: int | np.random.Generator = 0,
             initial: Sequence[np.ndarray] = (), tol: float = 0.0) -> tuple[tuple, float]:
    """Maximize a batched acquisition over encoded rows of `domain`.

    Returns (decoded binding, acquisition value). Purely discrete domains
    with at most 64 combinations are enumerated; otherwise a generational
    GA runs for budget // 32 generations. `initial` rows join the first
    generation. A later candidate replaces the incumbent only when it beats
    it by more than `tol`, so near-flat acquisitions keep the earliest point.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if domain.all_discrete and domain.n_combinations() <= EXHAUSTIVE_LIMIT:
        Z = _exhaustive(domain)
        if len(initial):
            Z = np.vstack([np.atleast_2d(initial), Z])
        vals = np.asarray(acq(Z), dtype=float)
        i = _first_within(vals, tol)
        return domain.decode(Z[i]), float(vals[i])
    if budget < POPULATION:
        raise AcquisitionError(f"budget {budget} is below the population size {POPULATION}")
    pop = _random_population(domain, POPULATION, rng)
    for k, z in enumerate(list(initial)[:POPULATION // 2]):
        pop[k] = z
    fit = np.asarray(acq(pop), dtype=float)
    best_i = _first_within(fit, tol)
    best_z, best_v = pop[best_i].copy(), float(fit[best_i])
    for _ in range(budget // POPULATION - 1):
        elites = pop[np.argsort(-fit, kind="stable")[:ELITES]]
        n_pairs = (POPULATION - ELITES + 1) // 2
        i, j = rng.integers(POPULATION, size=(2, 2, n_pairs))
        winners = np.where(fit[i] >= fit[j], i, j)
        A, B = pop[winners[0]], pop[winners[1]]
        C1, C2 = _crossover(A, B, domain, rng)
        keep = rng.random(n_pairs) >= 0.9
        C1[keep], C2[keep] = A[keep], B[keep]
        kids = _mutate(np.vstack([C1, C2]), domain, rng)[:POPULATION - ELITES]
        pop = np.vstack([elites, kids])
        fit = np.asarray(acq(pop), dtype=float)
        i = int(np.argmax(fit))
        if fit[i] > best_v + tol:
            best_z, best_v = pop[i].copy(), float(fit[i])
    return domain.decode(best_z), best_v


def _first_within(vals: np.ndarray, tol: float) -> int:
    """Index of the first value within `tol` of the maximum."""
    return int(np.flatnonzero(vals >= vals.max() - tol)[0])


def quasi_random_point(domain: MixedDomain, seed: int) -> tuple:
    """First scrambled Halton draw mapped onto the domain."""
    d = max(domain.dim, 1)
    u = qmc.Halton(d, scramble=True, seed=seed).random(1)[0]
    out = []
    k = 0
    for i, kind in enumerate(domain.kinds):
        if isinstance(kind, tuple):
            ch = domain.choices(i)
            out.append(ch[min(int(u[k] * len(ch)), len(ch) - 1)])
            k += 1
        else:
            out.append(tuple(float(c) for c in u[k:k + kind]))
            k += kind
    return tuple(out)


def cp_bo_step(constraints: ActiveConstraintSet, domain: MixedDomain, budget: int = DEFAULT_BUDGET,
               seed: int | np.random.Generator = 0,
               fixed: Mapping[str, np.ndarray] | None = None,
               initial: Sequence[np.ndarray] = (), tol: float = 0.0) -> tuple[tuple, float]:
    """Argmax of MPF over `domain`; a quasi-random point when nothing constrains it."""
    if not constraints.models:
        s = seed if isinstance(seed, int) else int(seed.integers(2**31))
        return quasi_random_point(domain, s), 1.0
    return maximize(lambda Z: mpf_batch(constraints, domain, Z, fixed), domain, budget, seed,
                    initial, tol)
