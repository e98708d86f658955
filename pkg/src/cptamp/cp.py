"""Constraint primitives: causal graphs, Weisfeiler-Lehman type IDs, the CP store.

A failure is backtracked into a directed graph of typed vertices (failing
operator, responsible decisions, context objects, connecting operators).
The graph's WL hash is the CP type ID; labelled bindings under one ID form
that primitive's dataset. Labels carry type tags only, so isomorphic
constraints in different tasks share an ID and their data transfers.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .skeleton import DECISION, Skeleton

STORE_VERSION = 1
HASH_ALGO = "blake2b-128"
WL_ITERATIONS = 3

FAILURE = "failure-op"
DECISION_V = "decision"
CONTEXT = "context"
CONNECTION = "connection"


class CausalGraphError(ValueError):
    pass


class CPStoreError(ValueError):
    pass


@dataclass(frozen=True)
class CausalGraph:
    vertices: tuple[tuple[str, tuple[str, str]], ...]
    edges: tuple[tuple[str, str], ...]
    # decision vertex ids in canonical order, with the domain encoding of each
    decisions: tuple[str, ...] = ()
    encodings: tuple = ()
    # skeleton variable names behind `decisions`; not part of the type identity
    decision_names: tuple[str, ...] = field(default=(), compare=False)

    def labels(self) -> dict[str, tuple[str, str]]:
        return dict(self.vertices)

    def decision_tags(self) -> tuple[str, ...]:
        lab = self.labels()
        return tuple(lab[d][1] for d in self.decisions)

    def context_tags(self) -> tuple[str, ...]:
        return tuple(sorted(t for _, (k, t) in self.vertices if k == CONTEXT))

    def validate(self) -> None:
        kinds = [k for _, (k, _) in self.vertices]
        if kinds.count(FAILURE) != 1:
            raise CausalGraphError("a causal graph has exactly one failure vertex")
        if DECISION_V not in kinds:
            raise CausalGraphError("a causal graph needs at least one decision vertex")
        ids = {v for v, _ in self.vertices}
        if len(ids) != len(self.vertices):
            raise CausalGraphError("duplicate vertex ids")
        for a, b in self.edges:
            if a not in ids or b not in ids:
                raise CausalGraphError(f"edge ({a}, {b}) references an unknown vertex")
        if _components(ids, self.edges) != 1:
            raise CausalGraphError("causal graph is not weakly connected")


def _components(ids, edges) -> int:
    parent = {v: v for v in ids}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for a, b in edges:
        parent[find(a)] = find(b)
    return len({find(v) for v in ids})


def _digest(text: str) -> str:
    return hashlib.blake2b(text.encode("utf-8"), digest_size=16).hexdigest()


def wl_colors(graph: CausalGraph, iterations: int = WL_ITERATIONS) -> dict[str, list[str]]:
    """Per-vertex label history over `iterations` rounds of directed refinement."""
    if iterations < 1:
        raise ValueError("WL refinement needs at least one iteration")
    ins: dict[str, list[str]] = {v: [] for v, _ in graph.vertices}
    outs: dict[str, list[str]] = {v: [] for v, _ in graph.vertices}
    for a, b in set(graph.edges):
        outs[a].append(b)
        ins[b].append(a)
    cur = {v: _digest(f"{k}|{t}") for v, (k, t) in graph.vertices}
    hist = {v: [c] for v, c in cur.items()}
    for _ in range(iterations):
        nxt = {}
        for v in cur:
            i = ",".join(sorted(cur[u] for u in ins[v]))
            o = ",".join(sorted(cur[u] for u in outs[v]))
            nxt[v] = _digest(f"{cur[v]};in:{i};out:{o}")
        cur = nxt
        for v, c in cur.items():
            hist[v].append(c)
    return hist


def wl_hash(graph: CausalGraph, iterations: int = WL_ITERATIONS) -> str:
    """128-bit hex type ID, invariant under vertex renaming."""
    hist = wl_colors(graph, iterations)
    return _digest("|".join(sorted(",".join(h) for h in hist.values())))


def backtrack_causal_graph(trace, skeleton: Skeleton) -> CausalGraph:
    """Build the causal graph of a failure trace from the skeleton's wiring."""
    label_to_op = {}
    for i, op in enumerate(skeleton.operators):
        label_to_op.setdefault(op.label, i)
    if trace.failure_op not in label_to_op:
        raise CausalGraphError(f"failure operator {trace.failure_op!r} not in skeleton")
    f_idx = trace.op_index if trace.op_index is not None else label_to_op[trace.failure_op]
    if skeleton.operators[f_idx].label != trace.failure_op:
        raise CausalGraphError("failure op index and label disagree")
    indices = getattr(trace, "connection_indices", ())
    if indices:
        if len(indices) != len(trace.connection_ops) or any(
                not 0 <= i < len(skeleton.operators) or skeleton.operators[i].label != lab
                for i, lab in zip(indices, trace.connection_ops)):
            raise CausalGraphError("connection op indices and labels disagree")
        conn_idx = list(indices)
    else:
        try:
            conn_idx = [label_to_op[c] for c in trace.connection_ops]
        except KeyError as exc:
            raise CausalGraphError(f"unknown connection operator {exc.args[0]!r}") from None
    if not trace.responsible_decisions:
        raise CausalGraphError("a failure needs at least one responsible decision")
    for d in trace.responsible_decisions:
        try:
            skeleton.var(d)
        except KeyError:
            raise CausalGraphError(f"unknown decision {d!r}") from None

    vid = {}
    vertices = []

    def add(key, label):
        if key not in vid:
            vid[key] = f"v{len(vid)}"
            vertices.append((vid[key], label))
        return vid[key]

    f = add(("op", f_idx), (FAILURE, skeleton.operators[f_idx].name))
    for i in conn_idx:
        if i != f_idx:
            add(("op", i), (CONNECTION, skeleton.operators[i].name))
    for d in trace.responsible_decisions:
        add(("dec", d), (DECISION_V, skeleton.var(d).var_type_tag))
    for name, tag in trace.context_objects:
        add(("ctx", name), (CONTEXT, tag))

    edges = set()
    for key in list(vid):
        if key[0] != "op":
            continue
        op = skeleton.operators[key[1]]
        for ident in op.inputs:
            if ("dec", ident) in vid:
                edges.add((vid[("dec", ident)], vid[key]))
                continue
            p = skeleton.producer(ident)
            if p is not None and ("op", p) in vid:
                edges.add((vid[("op", p)], vid[key]))
            elif ("ctx", ident) in vid:
                edges.add((vid[("ctx", ident)], vid[key]))
        if op.layer == DECISION and ("dec", op.outputs[0]) in vid:
            edges.add((vid[key], vid[("dec", op.outputs[0])]))
    for name, tag, source in trace.culprits:
        if ("ctx", name) not in vid:
            raise CausalGraphError(f"culprit {name!r} missing from context objects")
        edges.add((vid[("ctx", name)], f))
        if source is not None:
            if ("dec", source) not in vid:
                raise CausalGraphError(f"culprit source {source!r} is not a responsible decision")
            edges.add((vid[("dec", source)], vid[("ctx", name)]))

    # whatever the wiring left detached is still a cause of the failure
    for comp in _detached(vertices, edges, f):
        edges.add((comp, f))

    graph = CausalGraph(tuple(vertices), tuple(sorted(edges)))
    colors = wl_colors(graph)
    order = [v.name for v in skeleton.decision_vars]
    decs = sorted(trace.responsible_decisions, key=lambda d: (colors[vid[("dec", d)]][-1], order.index(d)))
    graph = CausalGraph(graph.vertices, graph.edges, tuple(vid[("dec", d)] for d in decs),
                        tuple(var_encoding(skeleton.var(d)) for d in decs), tuple(decs))
    graph.validate()
    return graph


def _detached(vertices, edges, root) -> list[str]:
    """One representative vertex per weak component not containing `root`."""
    adj: dict[str, set[str]] = {v: set() for v, _ in vertices}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen = set()
    reps = []
    for start in [root] + [v for v, _ in vertices]:
        if start in seen:
            continue
        if start != root:
            reps.append(start)
        stack = [start]
        while stack:
            v = stack.pop()
            if v in seen:
                continue
            seen.add(v)
            stack.extend(adj[v] - seen)
    return reps


def var_encoding(var):
    return list(var.discrete_domain) if var.is_discrete else var.continuous_dim


@dataclass(frozen=True)
class CPPoint:
    x: tuple
    context: tuple[str, ...]
    y: int

    def __post_init__(self):
        if self.y not in (-1, 0):
            raise ValueError(f"CP severity must be -1 or 0, got {self.y}")


@dataclass
class CPEntry:
    signature: tuple[str, ...]
    encoding: tuple
    context_tags: tuple[str, ...]
    points: list[CPPoint] = field(default_factory=list)


class CPDictionary:
    """Append-only map from CP type ID to its labelled dataset."""

    def __init__(self, version: int = STORE_VERSION):
        self.version = version
        self.entries: dict[str, CPEntry] = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, CPDictionary):
            return NotImplemented
        return self.version == other.version and self.entries == other.entries

    @property
    def n_points(self) -> int:
        return sum(len(e.points) for e in self.entries.values())


def record_point(d: CPDictionary, graph: CausalGraph, point: CPPoint, type_id: str | None = None) -> str:
    """Insert `point` under the graph's type ID, creating the entry when new."""
    if len(point.x) != len(graph.decisions):
        raise CPStoreError(f"point arity {len(point.x)} != {len(graph.decisions)} decisions")
    tid = type_id or wl_hash(graph)
    sig = graph.decision_tags()
    enc = tuple(tuple(e) if isinstance(e, list) else e for e in graph.encodings)
    with d._lock:
        entry = d.entries.get(tid)
        if entry is None:
            entry = d.entries[tid] = CPEntry(sig, enc, graph.context_tags())
        elif entry.signature != sig or entry.encoding != enc:
            raise CPStoreError(f"type {tid}: decision signature mismatch")
        entry.points.append(point)
    return tid


# ---------------------------------------------------------------- task candidates

@dataclass(frozen=True)
class TaskCandidate:
    op_index: int
    culprit: str
    type_id: str
    var_names: tuple[str, ...]
    graph: CausalGraph


def task_candidates(task) -> list[TaskCandidate]:
    """Every (check operator, culprit) constraint primitive a task can produce."""
    cached = task.__dict__.get("_cp_candidates")
    if cached is not None:
        return cached
    out = []
    for op_index in task.check_ops():
        for cand in task.candidates(op_index):
            trace = task.trace_for(op_index, [cand])
            if not trace.responsible_decisions:
                continue
            g = backtrack_causal_graph(trace, task.skeleton)
            out.append(TaskCandidate(op_index, cand.culprit, wl_hash(g), g.decision_names, g))
    task.__dict__["_cp_candidates"] = out
    return out


@dataclass(frozen=True)
class Activation:
    type_id: str
    entry: CPEntry
    var_names: tuple[str, ...]


def activate(d: CPDictionary, task) -> dict[str, list[Activation]]:
    """Stored CP datasets matching the task's candidate graphs, keyed by decision var."""
    out: dict[str, list[Activation]] = {}
    seen = set()
    for c in task_candidates(task):
        entry = d.entries.get(c.type_id)
        if entry is None or (c.type_id, c.var_names) in seen:
            continue
        if entry.signature != c.graph.decision_tags():
            continue
        seen.add((c.type_id, c.var_names))
        act = Activation(c.type_id, entry, c.var_names)
        for v in c.var_names:
            out.setdefault(v, []).append(act)
    return out


def record_outcome(d: CPDictionary, task, prefix: Sequence, results, ops: set[int] | None = None) -> int:
    """Record one CP point per candidate of every executed check in `results`.

    A culprit named by a failed check is labelled 0, every other candidate of
    that check -1. `ops` restricts recording to the given operator indices.
    """
    names = [v.name for v in task.decision_vars]
    bound = dict(zip(names, prefix))
    by_op: dict[int, list[TaskCandidate]] = {}
    for c in task_candidates(task):
        by_op.setdefault(c.op_index, []).append(c)
    n = 0
    for res in results:
        if res.op_index is None or (ops is not None and res.op_index not in ops):
            continue
        violated = res.violated
        for c in by_op.get(res.op_index, []):
            if any(v not in bound for v in c.var_names):
                continue
            x = tuple(_freeze(bound[v]) for v in c.var_names)
            y = 0 if c.culprit in violated else -1
            record_point(d, c.graph, CPPoint(x, c.graph.context_tags(), y), c.type_id)
            n += 1
    return n


def _freeze(val):
    if isinstance(val, str):
        return val
    return tuple(float(v) for v in val)


# ---------------------------------------------------------------- persistence

def _dump(d: CPDictionary) -> str:
    doc = {
        "version": d.version,
        "hash_algo": HASH_ALGO,
        "wl_iterations": WL_ITERATIONS,
        "entries": [
            {
                "type_id": tid,
                "signature": list(e.signature),
                "encoding": [list(x) if isinstance(x, tuple) else x for x in e.encoding],
                "context_tags": list(e.context_tags),
                "points": [{"x": [p if isinstance(p, str) else list(p) for p in pt.x],
                            "context": list(pt.context), "y": pt.y} for pt in e.points],
            }
            for tid, e in d.entries.items()
        ],
    }
    return json.dumps(doc, indent=1) + "\n"


def save_dict(d: CPDictionary, path: str | Path) -> None:
    Path(path).write_text(_dump(d))


def load_dict(path: str | Path) -> CPDictionary:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CPStoreError(f"cannot read CP store {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CPStoreError(f"{path}: top level must be an object")
    if doc.get("version") != STORE_VERSION:
        raise CPStoreError(f"{path}: store version {doc.get('version')!r}, expected {STORE_VERSION}")
    if doc.get("hash_algo") != HASH_ALGO or doc.get("wl_iterations") != WL_ITERATIONS:
        raise CPStoreError(f"{path}: hashed with {doc.get('hash_algo')}/{doc.get('wl_iterations')} iterations, "
                           f"expected {HASH_ALGO}/{WL_ITERATIONS}")
    d = CPDictionary(STORE_VERSION)
    try:
        for e in doc["entries"]:
            entry = CPEntry(tuple(e["signature"]),
                            tuple(tuple(x) if isinstance(x, list) else x for x in e["encoding"]),
                            tuple(e["context_tags"]))
            for p in e["points"]:
                x = tuple(v if isinstance(v, str) else tuple(float(c) for c in v) for v in p["x"])
                entry.points.append(CPPoint(x, tuple(p["context"]), int(p["y"])))
                if len(x) != len(entry.signature):
                    raise CPStoreError(f"{path}: point arity mismatch under {e['type_id']}")
            d.entries[e["type_id"]] = entry
    except (KeyError, TypeError, ValueError) as exc:
        raise CPStoreError(f"{path}: malformed entry ({exc})") from exc
    return d
