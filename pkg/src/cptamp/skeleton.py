"""Task skeletons: alternating decision/transition layers of typed operators.

A skeleton is a fixed operator sequence with open motion parameters. Every
decision-layer operator produces exactly one decision variable; transition
layers hold the operators whose geometric checks depend on those decisions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

DISCRETE = "discrete"
CONTINUOUS = "continuous"
DECISION = "decision"
TRANSITION = "transition"


class SkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class DecisionVar:
    name: str
    kind: str
    discrete_domain: tuple[str, ...] = ()
    continuous_dim: int = 0
    var_type_tag: str = ""

    def __post_init__(self):
        if self.kind == DISCRETE:
            if not self.discrete_domain or self.continuous_dim:
                raise SkeletonError(f"{self.name}: discrete var needs a domain and no dimension")
            if len(set(self.discrete_domain)) != len(self.discrete_domain):
                raise SkeletonError(f"{self.name}: duplicate symbols in domain")
        elif self.kind == CONTINUOUS:
            if self.discrete_domain or self.continuous_dim < 1:
                raise SkeletonError(f"{self.name}: continuous var needs a positive dimension")
        else:
            raise SkeletonError(f"{self.name}: unknown kind {self.kind!r}")

    @property
    def is_discrete(self) -> bool:
        return self.kind == DISCRETE

    def contains(self, value) -> bool:
        if self.is_discrete:
            return value in self.discrete_domain
        try:
            vals = [float(v) for v in value]
        except TypeError:
            return False
        return len(vals) == self.continuous_dim and all(0.0 <= v <= 1.0 for v in vals)

    def midpoint(self):
        if self.is_discrete:
            return None
        return (0.5,) * self.continuous_dim


@dataclass(frozen=True)
class Operator:
    name: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    layer: str

    @property
    def label(self) -> str:
        return f"{self.name}({','.join(self.inputs)})"


@dataclass
class Skeleton:
    operators: list[Operator]
    decision_vars: list[DecisionVar]
    constants: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        self.constants = frozenset(self.constants)
        by_name = {v.name: v for v in self.decision_vars}
        if len(by_name) != len(self.decision_vars):
            raise SkeletonError("duplicate decision variable names")
        layers = _group_layers(self.operators)
        for i, (kind, ops) in enumerate(layers):
            expected = DECISION if i % 2 == 0 else TRANSITION
            if kind != expected:
                raise SkeletonError(
                    f"layer {i} is {kind}; layers must alternate starting with a decision")
            if kind == DECISION and len(ops) != 1:
                raise SkeletonError(f"decision layer {i} holds {len(ops)} operators, expected 1")
        self._producer: dict[str, int] = {}
        order = []
        for idx, op in enumerate(self.operators):
            for arg in op.inputs:
                if arg not in self.constants and arg not in self._producer:
                    raise SkeletonError(f"{op.label}: input {arg!r} is neither a constant nor produced earlier")
            if op.layer == DECISION:
                if len(op.outputs) != 1 or op.outputs[0] not in by_name:
                    raise SkeletonError(f"{op.label}: decision operator must output one declared decision var")
                order.append(op.outputs[0])
            for out in op.outputs:
                if out in self._producer or out in self.constants:
                    raise SkeletonError(f"{op.label}: identifier {out!r} produced twice")
                self._producer[out] = idx
        if sorted(order) != sorted(by_name):
            raise SkeletonError("decision variables and decision operators disagree")
        # tree-layer order follows the decision operators, not the declaration order
        self.decision_vars = [by_name[n] for n in order]
        self._layers = layers

    @property
    def total_depth(self) -> int:
        return len(self.decision_vars)

    def var(self, name: str) -> DecisionVar:
        for v in self.decision_vars:
            if v.name == name:
                return v
        raise KeyError(name)

    def var_index(self, name: str) -> int:
        for i, v in enumerate(self.decision_vars):
            if v.name == name:
                return i
        raise KeyError(name)

    def producer(self, ident: str) -> int | None:
        """Index of the operator producing `ident`, None for constants."""
        if ident in self.constants:
            return None
        return self._producer[ident]

    def transition_ops(self, depth: int) -> list[int]:
        """Operator indices of the transition layer following decision `depth`."""
        start = 2 * depth + 1
        if start >= len(self._layers):
            return []
        idx = self.operators.index(self._layers[start][1][0])
        return list(range(idx, idx + len(self._layers[start][1])))

    def find_operator(self, op_name: str | int) -> int:
        """Resolve an operator by index, full label, or unique name."""
        if isinstance(op_name, int):
            if not 0 <= op_name < len(self.operators):
                raise SkeletonError(f"operator index {op_name} out of range")
            return op_name
        hits = [i for i, op in enumerate(self.operators) if op.label == op_name]
        if not hits:
            hits = [i for i, op in enumerate(self.operators) if op.name == op_name]
        if not hits:
            raise SkeletonError(f"unknown operator {op_name!r}")
        if len(hits) > 1:
            raise SkeletonError(f"operator name {op_name!r} is ambiguous; use its full label")
        return hits[0]


def _group_layers(operators: Sequence[Operator]) -> list[tuple[str, list[Operator]]]:
    layers: list[tuple[str, list[Operator]]] = []
    for op in operators:
        if op.layer not in (DECISION, TRANSITION):
            raise SkeletonError(f"{op.label}: unknown layer {op.layer!r}")
        # consecutive decision operators are separate layers, so two in a row fail alternation
        if layers and layers[-1][0] == op.layer and op.layer == TRANSITION:
            layers[-1][1].append(op)
        else:
            layers.append((op.layer, [op]))
    return layers


def decision_vars(skeleton: Skeleton) -> list[DecisionVar]:
    return list(skeleton.decision_vars)


def dependency_chain(skeleton: Skeleton, op_name: str | int) -> set[tuple[str | None, str]]:
    """Transitive producers and constants feeding an operator's inputs.

    Returns (producer label, identifier) pairs; constants have producer None.
    """
    idx = skeleton.find_operator(op_name)
    chain: set[tuple[str | None, str]] = set()
    stack = list(skeleton.operators[idx].inputs)
    seen = set()
    while stack:
        ident = stack.pop()
        if ident in seen:
            continue
        seen.add(ident)
        p = skeleton.producer(ident)
        if p is None:
            chain.add((None, ident))
            continue
        op = skeleton.operators[p]
        chain.add((op.label, ident))
        stack.extend(op.inputs)
    return chain


def chain_operators(skeleton: Skeleton, op_index: int) -> list[int]:
    """Indices of all operators upstream of `op_index`, in skeleton order."""
    out = set()
    stack = [op_index]
    while stack:
        i = stack.pop()
        for ident in skeleton.operators[i].inputs:
            p = skeleton.producer(ident)
            if p is not None and p not in out:
                out.add(p)
                stack.append(p)
    return sorted(out)


def chain_constants(skeleton: Skeleton, op_index: int) -> list[str]:
    idents = []
    for i in chain_operators(skeleton, op_index) + [op_index]:
        for ident in skeleton.operators[i].inputs:
            if ident in skeleton.constants and ident not in idents:
                idents.append(ident)
    return idents


def chain_decisions(skeleton: Skeleton, op_index: int) -> list[str]:
    """Decision variables feeding an operator, in tree-layer order."""
    names = set()
    for i in chain_operators(skeleton, op_index) + [op_index]:
        op = skeleton.operators[i]
        if op.layer == DECISION:
            names.add(op.outputs[0])
    return [v.name for v in skeleton.decision_vars if v.name in names]
