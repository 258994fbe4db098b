"""Default planted scenario: atoms, candidates, segments, flow graph, scripts.

The environment is built so every comparison the package makes has known
ground truth:

* two collector "styles" of users with opposing effects for the plan/
  empathy atoms, so per-user strategy selection genuinely matters,
* a strong, occurrence-limited pressure atom, so tracker masking matters,
* exact-tie candidate pairs inside each style family, so equally good
  strategies exist and path diversity is not bought with worse outcomes,
* base-rate separation between tiers, so user-only scoring looks strong on
  plain AUC and falls back to chance within bins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .corpus import AtomSet
from .errors import ParseError
from .inference import (
    Candidate,
    CandidateSet,
    MaskRule,
    RuleSet,
    ScriptTemplates,
    SlotRule,
    candidates_from_dict,
    candidates_to_dict,
)
from .baselines import FlowGraph, FlowNode, FlowPolicy, flow_from_dict, flow_to_dict
from .simulator import SegmentModel, UserModel
from .synth import SyntheticConfig

N_ATOMS = 8
INTENT_VOCAB = 8

ATOM_NAMES = ("greet", "verify", "inform", "probe", "press", "offer", "empathize", "goodbye")
INTENT_NAMES = (
    "acknowledge",
    "promise-to-pay",
    "refuse",
    "ask-details",
    "dispute-amount",
    "stall",
    "complain",
    "hang-up",
)
HANGUP_INTENT = 7
PROMISE_INTENT = 1

# Planted per-atom outcome-logit weights. The four "neutral" conversation
# atoms share one small weight, so every pairing of a style atom with a
# neutral atom has the same total effect: each style has four exactly tied
# best strategies, and equally good paths genuinely exist.
_NEUTRAL_WEIGHT = 0.08
_COMMON_WEIGHTS = {
    "greet": _NEUTRAL_WEIGHT,
    "verify": _NEUTRAL_WEIGHT,
    "inform": _NEUTRAL_WEIGHT,
    "probe": _NEUTRAL_WEIGHT,
    "press": 0.55,
}
_STYLE_WEIGHTS = {
    "plan": {"offer": 0.35, "empathize": -0.30},
    "empathy": {"offer": -0.30, "empathize": 0.35},
}

# Intent distribution shape over the non-hangup intents (renormalized).
_INTENT_SHAPE = (0.20, 0.12, 0.14, 0.16, 0.10, 0.16, 0.12)
_BASE_HANGUP = 0.10
_PRESS_HANGUP_BUMP = 0.05

PRESSURE_STRATEGY = 3
CLOSE_STRATEGY = 12

_STRATEGIES = (
    # (id, name, atoms, limit, terminal)
    (0, "verify-identity", ("greet", "verify"), None, False),
    (1, "inform-amount", ("inform",), None, False),
    (2, "ask-reason", ("probe",), None, False),
    (3, "pressure", ("press",), 1, False),
    (4, "offer-plan", ("inform", "offer"), None, False),
    (5, "payment-offer", ("probe", "offer"), None, False),
    (6, "confirm-plan", ("verify", "offer"), None, False),
    (7, "friendly-offer", ("greet", "offer"), None, False),
    (8, "reassure", ("inform", "empathize"), None, False),
    (9, "comfort", ("probe", "empathize"), None, False),
    (10, "acknowledge-concern", ("verify", "empathize"), None, False),
    (11, "soften", ("greet", "empathize"), None, False),
    (12, "close-call", ("goodbye",), None, True),
)

STRATEGY_NAMES = {sid: name for sid, name, *_ in _STRATEGIES}
PLAN_FAMILY = (4, 5, 6, 7)
EMPATHY_FAMILY = (8, 9, 10, 11)

# Human collectors mostly fall back on a small generic repertoire, keyed by
# the intent; uniform exploration covers the rest of the candidate list.
PREFERRED = {
    0: 0,  # acknowledge      -> verify-identity
    1: 1,  # promise-to-pay   -> inform-amount
    2: 3,  # refuse           -> pressure
    3: 1,  # ask-details      -> inform-amount
    4: 2,  # dispute-amount   -> ask-reason
    5: 2,  # stall            -> ask-reason
    6: 2,  # complain         -> ask-reason
    7: 12,  # hang-up         -> close-call
}

_TEMPLATES = {
    0: (
        "Hello, this is the service team. Am I speaking with the account holder?",
        "Good afternoon. Could you confirm your name for verification, please?",
    ),
    1: (
        "Our records show an outstanding balance of 1,240 on your account.",
        "You currently have an overdue amount of 1,240 due since last month.",
    ),
    2: (
        "May I ask what has made the payment difficult this time?",
        "Could you tell me the reason the balance is still open?",
    ),
    3: (
        "Please note continued non-payment will be escalated and may affect your credit record.",
        "If the balance stays unpaid we will have to start the formal escalation process.",
    ),
    4: (
        "About the open amount: we can split it into three monthly installments.",
        "Regarding the balance, I can set up a plan that spreads it over months.",
    ),
    5: (
        "What is holding the payment back? A smaller first installment could work.",
        "May I ask what happened? We could start with a partial payment today.",
    ),
    6: (
        "Just to confirm your details first, and then I can set up a payment plan.",
        "Once we verify the account I can arrange the installment plan for you.",
    ),
    7: (
        "Thanks for taking the call. We have flexible installment options for you.",
        "Good to speak with you. A payment plan could make this much easier.",
    ),
    8: (
        "The balance is 1,240, and I understand this is stressful. We will sort it out.",
        "About the amount due: I hear you, and we will find a way together.",
    ),
    9: (
        "What has made things difficult? I completely understand your situation.",
        "May I ask what happened? That sounds genuinely hard, I am sorry.",
    ),
    10: (
        "Let me confirm your details. I know these calls are not easy.",
        "Just verifying the account. I do understand how stressful this is.",
    ),
    11: (
        "Thanks for picking up. I know this is a hard topic, and I am here to help.",
        "Good to reach you. These situations happen, and we will work it out.",
    ),
    12: (
        "Thank you for your time today. Goodbye.",
        "We will follow up as agreed. Have a good day.",
    ),
}


def atom_id(name):
    return ATOM_NAMES.index(name)


def default_candidates():
    cands = [
        Candidate(
            strategy_id=sid,
            atoms=AtomSet(tuple(atom_id(a) for a in atoms)),
            limit=limit,
            terminal=terminal,
        )
        for sid, _name, atoms, limit, terminal in _STRATEGIES
    ]
    return CandidateSet(cands)


def default_rules():
    return RuleSet(
        mask_rules=(
            MaskRule(strategy_id=PRESSURE_STRATEGY, slot="promised_payment", require="absent"),
        ),
        slot_rules=(SlotRule(intent=PROMISE_INTENT, slot="promised_payment", value=True),),
    )


def default_templates():
    return ScriptTemplates(_TEMPLATES)


def _atom_weights(style):
    weights = [0.0] * N_ATOMS
    for name, w in _COMMON_WEIGHTS.items():
        weights[atom_id(name)] = w
    for name, w in _STYLE_WEIGHTS[style].items():
        weights[atom_id(name)] = w
    return tuple(weights)


def _intent_row(hangup_prob):
    scale = (1.0 - hangup_prob) / sum(_INTENT_SHAPE)
    row = [p * scale for p in _INTENT_SHAPE]
    row.append(hangup_prob)
    return tuple(row)


def _segment(style, base_logit, hangup_prob, tier_mean):
    transitions = {PRESSURE_STRATEGY: _intent_row(min(hangup_prob + _PRESS_HANGUP_BUMP, 0.9))}
    style_flag = 0 if style == "plan" else 1
    style_probs = [0.15, 0.15]
    style_probs[style_flag] = 0.85
    return SegmentModel(
        base_logit=base_logit,
        atom_weights=_atom_weights(style),
        sparse_probs=(
            (1.0 / 3, 1.0 / 3, 1.0 / 3),  # region: uninformative
            tuple(style_probs),  # noisy style flag
        ),
        numeric_mean=(tier_mean, 0.0),
        numeric_std=(0.55, 1.0),
        init_intent_probs=_intent_row(hangup_prob),
        transitions=transitions,
        default_transition=_intent_row(hangup_prob),
    )


def make_user_model(segment_specs, discount=0.95, t_max=6):
    """segment_specs: iterable of (style, base_logit); equal mixture."""
    segments = []
    for style, base in segment_specs:
        hangup = _BASE_HANGUP if base >= 0 else _BASE_HANGUP + 0.03
        tier_mean = 0.9 if base >= 0 else -0.9
        segments.append(_segment(style, base, hangup, tier_mean))
    n = len(segments)
    return UserModel(
        segments=tuple(segments),
        segment_probs=tuple(1.0 / n for _ in segments),
        hangup_intents=frozenset({HANGUP_INTENT}),
        intent_vocab=INTENT_VOCAB,
        n_atoms=N_ATOMS,
        discount=discount,
        t_max=t_max,
    )


def default_flow_graph():
    """Hand-built call flow: inform, probe or pressure, offer, close."""
    nodes = [
        FlowNode("start", strategy_id=0),
        FlowNode("verify", strategy_id=0),
        FlowNode("inform", strategy_id=1),
        FlowNode("reason", strategy_id=2),
        FlowNode("press", strategy_id=PRESSURE_STRATEGY),
        FlowNode("offer", strategy_id=4),
        FlowNode("close", strategy_id=CLOSE_STRATEGY, terminal=True),
    ]
    edges = {
        ("start", 2): "press",
        ("inform", 2): "press",
        ("inform", 4): "reason",
        ("inform", 6): "reason",
        ("reason", 2): "press",
        ("press", 2): "close",
        ("offer", 2): "close",
        ("offer", 5): "offer",
    }
    defaults = {
        "start": "inform",
        "verify": "inform",
        "inform": "reason",
        "reason": "offer",
        "press": "offer",
        "offer": "close",
        "close": "close",
    }
    return FlowGraph(nodes, edges, defaults, start="start")


def default_flow_policy(candidates=None):
    return FlowPolicy(default_flow_graph(), candidates or default_candidates())


@dataclass
class Scenario:
    """Everything a run needs: environment, online config, logging policy."""

    user_model: UserModel
    candidates: CandidateSet
    rules: RuleSet
    templates: ScriptTemplates
    preferred: dict
    epsilon: float
    flow_graph: FlowGraph

    def synthetic_config(self, n_dialogues, bin_noise=0.02, intent_noise=0.0):
        return SyntheticConfig(
            user_model=self.user_model,
            candidates=self.candidates,
            preferred=self.preferred,
            epsilon=self.epsilon,
            rules=self.rules,
            n_dialogues=n_dialogues,
            bin_noise=bin_noise,
            intent_noise=intent_noise,
        )


def corpus_scenario(t_max=5, discount=0.95, epsilon=0.45):
    """Two segments mixing user-driven and strategy-driven label signal."""
    user_model = make_user_model(
        [("plan", 0.6), ("empathy", -1.1)], discount=discount, t_max=t_max
    )
    return Scenario(
        user_model=user_model,
        candidates=default_candidates(),
        rules=default_rules(),
        templates=default_templates(),
        preferred=dict(PREFERRED),
        epsilon=epsilon,
        flow_graph=default_flow_graph(),
    )


def simulator_scenario(t_max=5, discount=0.95, epsilon=0.45):
    """Four segments (two styles x two tiers) with opposing atom effects."""
    user_model = make_user_model(
        [("plan", 0.5), ("empathy", 0.5), ("plan", -1.2), ("empathy", -1.2)],
        discount=discount,
        t_max=t_max,
    )
    return Scenario(
        user_model=user_model,
        candidates=default_candidates(),
        rules=default_rules(),
        templates=default_templates(),
        preferred=dict(PREFERRED),
        epsilon=epsilon,
        flow_graph=default_flow_graph(),
    )


def _user_model_to_dict(um):
    return {
        "intent_vocab": um.intent_vocab,
        "n_atoms": um.n_atoms,
        "discount": um.discount,
        "t_max": um.t_max,
        "hangup_intents": sorted(um.hangup_intents),
        "segment_probs": list(um.segment_probs),
        "segments": [
            {
                "base_logit": s.base_logit,
                "atom_weights": list(s.atom_weights),
                "sparse_probs": [list(p) for p in s.sparse_probs],
                "numeric_mean": list(s.numeric_mean),
                "numeric_std": list(s.numeric_std),
                "init_intent_probs": list(s.init_intent_probs),
                "transitions": {str(k): list(v) for k, v in s.transitions.items()},
                "default_transition": list(s.default_transition),
            }
            for s in um.segments
        ],
    }


def _user_model_from_dict(blob):
    try:
        segments = tuple(
            SegmentModel(
                base_logit=float(s["base_logit"]),
                atom_weights=tuple(s["atom_weights"]),
                sparse_probs=tuple(tuple(p) for p in s.get("sparse_probs", ())),
                numeric_mean=tuple(s.get("numeric_mean", ())),
                numeric_std=tuple(s.get("numeric_std", ())),
                init_intent_probs=tuple(s["init_intent_probs"]),
                transitions={int(k): tuple(v) for k, v in s.get("transitions", {}).items()},
                default_transition=tuple(s["default_transition"]),
            )
            for s in blob["segments"]
        )
        return UserModel(
            segments=segments,
            segment_probs=tuple(blob["segment_probs"]),
            hangup_intents=frozenset(blob["hangup_intents"]),
            intent_vocab=int(blob["intent_vocab"]),
            n_atoms=int(blob["n_atoms"]),
            discount=float(blob.get("discount", 1.0)),
            t_max=int(blob.get("t_max", 8)),
        )
    except KeyError as exc:
        raise ParseError(f"missing field {exc} in environment config") from exc


def scenario_to_dict(scenario):
    return {
        "environment": _user_model_to_dict(scenario.user_model),
        "candidates": candidates_to_dict(scenario.candidates, scenario.rules, scenario.templates),
        "logging": {
            "preferred": {str(k): v for k, v in scenario.preferred.items()},
            "epsilon": scenario.epsilon,
        },
        "flow": flow_to_dict(scenario.flow_graph),
    }


def scenario_from_dict(blob):
    try:
        candidates, rules, templates = candidates_from_dict(blob["candidates"])
        logging_blob = blob["logging"]
        return Scenario(
            user_model=_user_model_from_dict(blob["environment"]),
            candidates=candidates,
            rules=rules,
            templates=templates,
            preferred={int(k): int(v) for k, v in logging_blob["preferred"].items()},
            epsilon=float(logging_blob.get("epsilon", 0.4)),
            flow_graph=flow_from_dict(blob["flow"]),
        )
    except KeyError as exc:
        raise ParseError(f"missing field {exc} in scenario config") from exc


def save_scenario(path, scenario):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(scenario), fh, indent=2, sort_keys=True)


def load_scenario(path):
    with open(path, encoding="utf-8") as fh:
        try:
            blob = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON in scenario config: {exc.msg}", line=exc.lineno) from exc
    return scenario_from_dict(blob)
