"""Comparison policies: flow graph, behavior cloning, user-only classifier.

* Flow: a finite state machine over intents; each node replies with a fixed
  strategy. No learning, no user conditioning.
* Behavior cloning: picks the strategy a human collector would most likely
  use, via the trained usage head alone; it never looks at the predicted
  outcome.
* User-only classifier: logistic regression on one-hot/raw profile
  features; the ceiling of what user features alone can predict.
* Random scorer: the stand-in score stream for policies that predict no
  outcome probability at all.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import inference as inf
from .errors import ContractError, ParseError, ValidationError


@dataclass(frozen=True)
class FlowNode:
    node_id: str
    strategy_id: int
    terminal: bool = False


class FlowGraph:
    """Intent-keyed transitions between strategy nodes, with per-node defaults."""

    def __init__(self, nodes, edges, default_edges, start):
        self.nodes = {n.node_id: n for n in nodes}
        if len(self.nodes) != len(nodes):
            raise ValidationError("duplicate node id in flow graph")
        if start not in self.nodes:
            raise ValidationError(f"start node {start!r} is not a node")
        for (src, _intent), dst in edges.items():
            if src not in self.nodes or dst not in self.nodes:
                raise ValidationError(f"edge ({src!r} -> {dst!r}) references unknown node")
        for src, dst in default_edges.items():
            if src not in self.nodes or dst not in self.nodes:
                raise ValidationError(f"default edge ({src!r} -> {dst!r}) references unknown node")
        missing = [nid for nid in self.nodes if nid not in default_edges]
        if missing:
            raise ValidationError(f"nodes {missing} have no default edge")
        self.edges = dict(edges)
        self.default_edges = dict(default_edges)
        self.start = start


def flow_step(graph, node_id, intent):
    """Next node id: the explicit (node, intent) edge, else the node's default."""
    if node_id not in graph.nodes:
        raise ContractError(f"unknown flow node {node_id!r}")
    return graph.edges.get((node_id, intent), graph.default_edges[node_id])


class FlowPolicy:
    """Session-per-call wrapper turning a FlowGraph into a simulator policy."""

    name = "flow"

    def __init__(self, graph, candidates):
        self.graph = graph
        self.candidates = candidates
        for node in graph.nodes.values():
            candidates.get(node.strategy_id)  # every node strategy must exist

    def new_session(self, profile, rng=None):
        return {"node": self.graph.start}

    def act(self, session, intent):
        nxt = flow_step(self.graph, session["node"], intent)
        session["node"] = nxt
        node = self.graph.nodes[nxt]
        cand = self.candidates.get(node.strategy_id)
        return inf.StepResult(
            strategy_id=node.strategy_id,
            script=None,
            outcome_probs={},
            usage_scores={},
            usage_probs=None,
            terminal=node.terminal or cand.terminal,
        )


def _bc_chooser(scored, theta):
    """argmax usage score; same tie-break (lowest id) as the target policy."""
    best = None
    for cand, _y, s_star in scored:
        if best is None or s_star > best[1]:
            best = (cand, s_star)
    return best[0]


def bc_step(session, intent, params, candidates, templates=None, rules=None):
    """One behavior-cloning turn: imitate, ignore predicted effectiveness."""
    return inf._advance(session, intent, params, candidates, _bc_chooser, templates, rules)


class CloningPolicy(inf.StrategyEngine):
    """Behavior cloning on top of the same trained model and masking."""

    name = "cloning"

    def act(self, session, intent):
        return bc_step(session, intent, self.params, self.candidates, self.templates, self.rules)


class RandomPolicy:
    """Uniform choice over unmasked candidates; the floor for comparisons."""

    name = "random"

    def __init__(self, candidates, rules=None, seed=0):
        self.candidates = candidates
        self.rules = rules
        self._seed = seed

    def new_session(self, profile, rng=None):
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(self._seed))
        return {"tracker": inf.TrackerState(), "rng": rng, "terminated": False}

    def act(self, session, intent):
        if session["terminated"]:
            raise ContractError("session is terminated")
        tracker = session["tracker"]
        allowed = inf.mask(self.candidates, tracker, self.rules)
        pool = [c for c, ok in zip(self.candidates, allowed) if ok]
        chosen = pool[int(session["rng"].integers(0, len(pool)))]
        tracker.history.append((chosen.strategy_id, intent))
        tracker.atom_history.append(chosen.atoms)
        if self.rules is not None:
            self.rules.apply_slots(intent, tracker.slots)
        if chosen.terminal:
            session["terminated"] = True
        return inf.StepResult(
            strategy_id=chosen.strategy_id,
            script=None,
            outcome_probs={},
            usage_scores={},
            usage_probs=None,
            terminal=chosen.terminal,
        )


def profile_features(profile, sparse_vocab_sizes, n_numeric):
    """One-hot sparse categories plus raw numeric values, fixed layout."""
    dim = int(sum(sparse_vocab_sizes)) + n_numeric
    x = np.zeros(dim)
    offsets = np.concatenate([[0], np.cumsum(sparse_vocab_sizes)]).astype(int)
    for fid, cid in profile.sparse:
        if fid >= len(sparse_vocab_sizes) or cid >= sparse_vocab_sizes[fid]:
            raise ValidationError(f"sparse feature ({fid},{cid}) outside declared vocab")
        x[offsets[fid] + cid] = 1.0
    for fid, value in profile.numeric:
        if fid >= n_numeric:
            raise ValidationError(f"numeric feature id {fid} out of range")
        x[int(sum(sparse_vocab_sizes)) + fid] = value
    return x


class UserOnlyModel:
    """Logistic regression over profile features; scores whole dialogues."""

    def __init__(self, weights, bias, sparse_vocab_sizes, n_numeric):
        self.weights = weights
        self.bias = bias
        self.sparse_vocab_sizes = tuple(sparse_vocab_sizes)
        self.n_numeric = n_numeric

    def predict(self, profile):
        x = profile_features(profile, self.sparse_vocab_sizes, self.n_numeric)
        z = float(x @ self.weights + self.bias)
        return 1.0 / (1.0 + np.exp(-z))


def train_user_only(dialogues, meta, learning_rate=0.05, epochs=300, seed=0):
    """Full-batch Adam on the logistic user-only baseline."""
    from .training import Adam

    x = np.stack(
        [profile_features(d.user, meta.sparse_vocab_sizes, meta.n_numeric) for d in dialogues]
    )
    y = np.asarray([d.label for d in dialogues], dtype=float)
    rng = np.random.Generator(np.random.PCG64(seed))
    arrays = {"w": rng.normal(scale=0.01, size=x.shape[1]), "b": np.zeros(1)}
    optimizer = Adam({n: a.shape for n, a in arrays.items()}, learning_rate=learning_rate)
    n = len(dialogues)
    for _ in range(epochs):
        z = x @ arrays["w"] + arrays["b"][0]
        p = 1.0 / (1.0 + np.exp(-z))
        grad_z = (p - y) / n
        optimizer.update(arrays, {"w": x.T @ grad_z, "b": np.asarray([grad_z.sum()])})
    return UserOnlyModel(arrays["w"], float(arrays["b"][0]), meta.sparse_vocab_sizes, meta.n_numeric)


def random_scorer(n, seed):
    """n i.i.d. scores uniform on [0.5, 1); deterministic per seed."""
    if n < 0:
        raise ContractError("n must be >= 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.uniform(0.5, 1.0, size=n)


def flow_to_dict(graph):
    return {
        "start": graph.start,
        "nodes": [
            {"id": n.node_id, "strategy": n.strategy_id, "terminal": n.terminal}
            for n in graph.nodes.values()
        ],
        "edges": [
            {"from": src, "intent": intent, "to": dst}
            for (src, intent), dst in sorted(graph.edges.items())
        ],
        "default_edges": graph.default_edges,
    }


def flow_from_dict(blob):
    try:
        nodes = [
            FlowNode(
                node_id=str(r["id"]),
                strategy_id=int(r["strategy"]),
                terminal=bool(r.get("terminal", False)),
            )
            for r in blob["nodes"]
        ]
        edges = {
            (str(r["from"]), int(r["intent"])): str(r["to"]) for r in blob.get("edges", ())
        }
        defaults = {str(k): str(v) for k, v in blob["default_edges"].items()}
        return FlowGraph(nodes, edges, defaults, start=str(blob["start"]))
    except KeyError as exc:
        raise ParseError(f"missing field {exc} in flow config") from exc


def load_flow_config(path, candidates):
    """Flow graph config: nodes with strategies, intent edges, defaults."""
    with open(path, encoding="utf-8") as fh:
        try:
            blob = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON in flow config: {exc.msg}", line=exc.lineno) from exc
    return FlowPolicy(flow_from_dict(blob), candidates)


def save_flow_config(path, graph):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(flow_to_dict(graph), fh, indent=2)
