"""Streaming per-turn strategy selection with an explicit context tracker.

Each call owns a :class:`SessionState`. Per turn the engine advances the
usage head once, branches the outcome head one step for every unmasked
candidate from the committed hidden state, gates candidates by their usage
score against the threshold, and commits the winner. Tracker memory:

* block 1 - history of (chosen strategy id, intent id) per turn,
* block 2 - hidden vectors of both recurrent heads,
* block 3 - slot table written by intent-triggered rules.

The history block drives occurrence-limit masking and round-robin script
selection; the slot table drives scenario mask rules.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .corpus import MAX_TURNS, AtomSet
from .errors import ConfigurationError, ContractError, ParseError, StateError, ValidationError


@dataclass(frozen=True)
class Candidate:
    strategy_id: int
    atoms: AtomSet
    limit: int | None = None  # max occurrences per session; None = unlimited
    terminal: bool = False


class CandidateSet:
    """Online strategy candidates; must contain an unlimited terminal one."""

    def __init__(self, candidates):
        candidates = sorted(candidates, key=lambda c: c.strategy_id)
        ids = [c.strategy_id for c in candidates]
        if len(ids) != len(set(ids)):
            raise ValidationError("duplicate strategy id in candidate set")
        if not any(c.terminal and c.limit is None for c in candidates):
            raise ValidationError("candidate set needs at least one unlimited terminal strategy")
        self.candidates = tuple(candidates)
        self._by_id = {c.strategy_id: c for c in candidates}

    def __iter__(self):
        return iter(self.candidates)

    def __len__(self):
        return len(self.candidates)

    def get(self, strategy_id):
        try:
            return self._by_id[strategy_id]
        except KeyError:
            raise ContractError(f"unknown strategy id {strategy_id}") from None


@dataclass(frozen=True)
class MaskRule:
    """Scenario precondition: the strategy is allowed only if the slot check holds."""

    strategy_id: int
    slot: str
    require: str  # "absent" | "present" | "equals"
    value: object = None

    def allows(self, slots):
        if self.require == "absent":
            return self.slot not in slots
        if self.require == "present":
            return self.slot in slots
        if self.require == "equals":
            return slots.get(self.slot) == self.value
        raise ConfigurationError(f"unknown mask-rule requirement {self.require!r}")


@dataclass(frozen=True)
class SlotRule:
    """When the user emits ``intent``, write ``value`` into ``slot``."""

    intent: int
    slot: str
    value: object


@dataclass(frozen=True)
class RuleSet:
    mask_rules: tuple = ()
    slot_rules: tuple = ()

    def rules_for(self, strategy_id):
        return [r for r in self.mask_rules if r.strategy_id == strategy_id]

    def apply_slots(self, intent, slots):
        for rule in self.slot_rules:
            if rule.intent == intent:
                slots[rule.slot] = rule.value


class ScriptTemplates:
    """Reply scripts per strategy; selection is round-robin per session."""

    def __init__(self, by_strategy):
        self._by_strategy = {int(k): tuple(v) for k, v in by_strategy.items()}
        for sid, templates in self._by_strategy.items():
            if not templates:
                raise ValidationError(f"strategy {sid} has no templates")

    def validate_candidates(self, candidates):
        missing = [c.strategy_id for c in candidates if c.strategy_id not in self._by_strategy]
        if missing:
            raise ValidationError(f"strategies {missing} have no templates")

    def pick(self, strategy_id, occurrence):
        templates = self._by_strategy.get(strategy_id)
        if not templates:
            raise ValidationError(f"strategy {strategy_id} has no templates")
        return templates[occurrence % len(templates)]


@dataclass
class TrackerState:
    """The three read-writeable memory blocks carried across turns.

    ``atom_history`` mirrors block 1 with the atoms of each chosen strategy
    so the previous turn's aggregated vector can be rebuilt exactly.
    """

    history: list = field(default_factory=list)  # block 1: (strategy_id, intent)
    h_outcome: np.ndarray = None  # block 2
    h_usage: np.ndarray = None  # block 2
    slots: dict = field(default_factory=dict)  # block 3
    atom_history: list = field(default_factory=list)

    def occurrences(self, strategy_id):
        return sum(1 for sid, _ in self.history if sid == strategy_id)


@dataclass
class SessionState:
    """Per-conversation streaming state; single-owner, one writer."""

    profile: object
    theta: float
    tracker: TrackerState
    t: int = 0
    terminated: bool = False

    @classmethod
    def start(cls, profile, theta, hidden_dim):
        tracker = TrackerState(
            h_outcome=np.zeros(hidden_dim), h_usage=np.zeros(hidden_dim)
        )
        return cls(profile=profile, theta=theta, tracker=tracker)

    def terminate(self):
        self.terminated = True


@dataclass
class StepResult:
    strategy_id: int
    script: str | None
    outcome_probs: dict  # strategy_id -> predicted completion probability
    usage_scores: dict  # strategy_id -> usage log-likelihood score
    usage_probs: np.ndarray  # per-atom usage probabilities for this turn
    terminal: bool


def default_theta(n_atoms):
    """Chance-level usage score: every atom probability at 0.5, scaled by K."""
    return -0.7 * n_atoms


def usage_score(usage_probs, atoms):
    """Log-likelihood of a candidate's atom indicators under the usage head."""
    p = np.asarray(usage_probs, dtype=float)
    if p.ndim != 1 or np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ContractError("usage probabilities must lie strictly inside (0, 1)")
    s = np.zeros(p.shape[0])
    for a in atoms:
        if a >= p.shape[0]:
            raise ContractError(f"atom {a} outside usage vector of length {p.shape[0]}")
        s[a] = 1.0
    return float(np.sum(s * np.log(p) + (1.0 - s) * np.log1p(-p)))


def mask(candidates, tracker, rules=None):
    """Feasibility per candidate: occurrence limits and slot preconditions.

    An unlimited terminal candidate is never masked, so a session always has
    a way to end the call.
    """
    flags = []
    for cand in candidates:
        if cand.terminal and cand.limit is None:
            flags.append(True)
            continue
        ok = True
        if cand.limit is not None and tracker.occurrences(cand.strategy_id) >= cand.limit:
            ok = False
        if ok and rules is not None:
            ok = all(rule.allows(tracker.slots) for rule in rules.rules_for(cand.strategy_id))
        flags.append(ok)
    return np.asarray(flags, dtype=bool)


def _prev_strategy_vector(session, bound, config, u):
    """R_{t-1} rebuilt from the history block (zero vector on the first turn)."""
    if not session.tracker.history:
        return ad.as_tensor(np.zeros(config.embed_dim))
    _, prev_intent = session.tracker.history[-1]
    prev_atoms = session.tracker.atom_history[-1]
    i_vec = ad.flatten(ad.gather(bound["intent_emb"], [prev_intent]))
    return mdl._aggregate(prev_atoms, i_vec, u, bound, config)


def _advance(session, intent, params, candidates, chooser, templates=None, rules=None):
    """Shared per-turn engine: score candidates, let ``chooser`` pick, commit."""
    if session.terminated:
        raise StateError("session is terminated; no further steps accepted")
    config = params.config
    if not 0 <= intent < config.intent_vocab:
        raise ValidationError(f"intent {intent} outside vocab")
    bound = params.bind(None)
    u = mdl._user_vector(session.profile, bound, config)
    i_vec = ad.flatten(ad.gather(bound["intent_emb"], [intent]))

    usage_probs = None
    h_usage_next = session.tracker.h_usage
    if not config.single_task:
        r_prev = _prev_strategy_vector(session, bound, config, u)
        x_usage = ad.concat([r_prev, i_vec, u])
        h_usage_next = ad.gru_cell(x_usage, ad.as_tensor(session.tracker.h_usage), bound.gru("gru2"))
        raw = ad.sigmoid(ad.affine(h_usage_next, bound["head_s_w"], bound["head_s_b"])).value
        usage_probs = np.clip(raw, 1e-12, 1.0 - 1e-12)
        h_usage_next = h_usage_next.value

    allowed = mask(candidates, session.tracker, rules)
    if session.t + 1 >= MAX_TURNS:  # the call must end on the 50th turn
        allowed &= np.asarray([c.terminal for c in candidates], dtype=bool)

    h_prev = ad.as_tensor(session.tracker.h_outcome)
    gru1 = bound.gru("gru1")
    scored = []
    outcome_probs = {}
    usage_scores = {}
    branches = {}
    for cand, ok in zip(candidates, allowed):
        if not ok:
            continue
        r_t = mdl._aggregate(cand.atoms, i_vec, u, bound, config)
        h1 = ad.gru_cell(ad.concat([r_t, i_vec, u]), h_prev, gru1)
        y = float(ad.sigmoid(ad.affine(h1, bound["head_y_w"], bound["head_y_b"])).value[0])
        s_star = usage_score(usage_probs, cand.atoms) if usage_probs is not None else 0.0
        outcome_probs[cand.strategy_id] = y
        usage_scores[cand.strategy_id] = s_star
        branches[cand.strategy_id] = h1.value
        scored.append((cand, y, s_star))
    if not scored:
        raise ContractError("all candidates masked; candidate-set invariant violated")

    chosen = chooser(scored, session.theta)

    occurrence = session.tracker.occurrences(chosen.strategy_id)
    script = templates.pick(chosen.strategy_id, occurrence) if templates is not None else None
    session.tracker.h_outcome = branches[chosen.strategy_id]
    if usage_probs is not None:
        session.tracker.h_usage = h_usage_next
    session.tracker.history.append((chosen.strategy_id, intent))
    session.tracker.atom_history.append(chosen.atoms)
    if rules is not None:
        rules.apply_slots(intent, session.tracker.slots)
    session.t += 1
    if chosen.terminal:
        session.terminated = True
    return StepResult(
        strategy_id=chosen.strategy_id,
        script=script,
        outcome_probs=outcome_probs,
        usage_scores=usage_scores,
        usage_probs=usage_probs,
        terminal=chosen.terminal,
    )


def _target_chooser(scored, theta):
    """argmax of outcome probability gated by the usage-score threshold.

    If no candidate passes the gate, fall back to plain argmax of the
    outcome probability. Ties keep the lowest strategy id (scored is
    id-sorted and comparisons are strict).
    """
    best = None
    for cand, y, s_star in scored:
        score = y if s_star > theta else 0.0
        if best is None or score > best[1]:
            best = (cand, score)
    if best[1] > 0.0:
        return best[0]
    fallback = None
    for cand, y, _ in scored:
        if fallback is None or y > fallback[1]:
            fallback = (cand, y)
    return fallback[0]


def step(session, intent, params, candidates, templates=None, rules=None):
    """Select and commit the most effective feasible strategy for this turn."""
    return _advance(session, intent, params, candidates, _target_chooser, templates, rules)


def forced_step(session, intent, strategy_id, params, candidates, templates=None, rules=None):
    """Advance the session with a caller-chosen strategy (teacher forcing)."""
    candidates.get(strategy_id)  # fail fast on unknown ids

    def chooser(scored, theta):
        for cand, _, _ in scored:
            if cand.strategy_id == strategy_id:
                return cand
        raise ContractError(f"forced strategy {strategy_id} is masked")

    return _advance(session, intent, params, candidates, chooser, templates, rules)


def replay_consistency(dialogue, params, tol=1e-12):
    """Streaming outputs over a recorded dialogue must match the batch forward.

    Replays the dialogue's own strategy sequence turn by turn through the
    streaming engine (teacher forcing) and compares every per-step output
    against :func:`targetdial.model.forward_sequence`.
    """
    outputs = mdl.forward_sequence(dialogue, params)
    batch_y = outputs.y_values()
    batch_s = outputs.s_values()
    sentinel = Candidate(strategy_id=0, atoms=AtomSet((0,)), terminal=True)
    session = SessionState.start(dialogue.user, theta=0.0, hidden_dim=params.config.hidden_dim)
    last = len(dialogue.turns) - 1
    for t, turn in enumerate(dialogue.turns):
        forced = Candidate(strategy_id=t + 1, atoms=turn.strategy, terminal=(t == last))
        cand_set = CandidateSet([sentinel, forced])
        result = forced_step(session, turn.intent, forced.strategy_id, params, cand_set)
        if abs(result.outcome_probs[forced.strategy_id] - batch_y[t]) > tol:
            return False
        if batch_s is not None:
            if np.max(np.abs(result.usage_probs - np.clip(batch_s[t], 1e-12, 1 - 1e-12))) > tol:
                return False
    return True


class StrategyEngine:
    """Bundles a trained model with its online configuration.

    Doubles as the model-driven policy for the simulator: ``new_session``
    then ``act`` per turn. Distinct sessions may run concurrently against
    the same engine; a single session has one writer.
    """

    name = "target-driven"

    def __init__(self, params, candidates, templates=None, rules=None, theta=None):
        self.params = params
        self.candidates = candidates
        self.templates = templates
        self.rules = rules
        self.theta = default_theta(params.config.n_atoms) if theta is None else theta

    def new_session(self, profile, rng=None):
        return SessionState.start(profile, self.theta, self.params.config.hidden_dim)

    def act(self, session, intent):
        return step(session, intent, self.params, self.candidates, self.templates, self.rules)


def candidates_to_dict(candidates, rules=None, templates=None):
    rules = rules or RuleSet()
    return {
        "strategies": [
            {
                "id": c.strategy_id,
                "atoms": list(c.atoms),
                "limit": c.limit,
                "terminal": c.terminal,
                "templates": list(templates._by_strategy.get(c.strategy_id, ()))
                if templates is not None
                else [],
            }
            for c in candidates
        ],
        "mask_rules": [
            {"strategy": r.strategy_id, "slot": r.slot, "require": r.require, "value": r.value}
            for r in rules.mask_rules
        ],
        "slot_rules": [
            {"intent": r.intent, "slot": r.slot, "value": r.value} for r in rules.slot_rules
        ],
    }


def candidates_from_dict(blob):
    try:
        cands = []
        templates = {}
        for rec in blob["strategies"]:
            cands.append(
                Candidate(
                    strategy_id=int(rec["id"]),
                    atoms=AtomSet(tuple(rec["atoms"])),
                    limit=rec.get("limit"),
                    terminal=bool(rec.get("terminal", False)),
                )
            )
            templates[int(rec["id"])] = tuple(rec.get("templates", ()))
        mask_rules = tuple(
            MaskRule(
                strategy_id=int(r["strategy"]),
                slot=str(r["slot"]),
                require=str(r["require"]),
                value=r.get("value"),
            )
            for r in blob.get("mask_rules", ())
        )
        slot_rules = tuple(
            SlotRule(intent=int(r["intent"]), slot=str(r["slot"]), value=r.get("value", True))
            for r in blob.get("slot_rules", ())
        )
    except KeyError as exc:
        raise ParseError(f"missing field {exc} in candidates config") from exc
    candidate_set = CandidateSet(cands)
    script_templates = ScriptTemplates(templates)
    script_templates.validate_candidates(candidate_set)
    return candidate_set, RuleSet(mask_rules=mask_rules, slot_rules=slot_rules), script_templates


def load_candidates_config(path):
    """Read strategies/rules/templates from one JSON config file."""
    with open(path, encoding="utf-8") as fh:
        try:
            blob = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON in candidates config: {exc.msg}", line=exc.lineno) from exc
    return candidates_from_dict(blob)


def save_candidates_config(path, candidates, rules, templates):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(candidates_to_dict(candidates, rules, templates), fh, indent=2)
