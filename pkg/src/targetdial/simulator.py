"""Parametric user simulator, episode runner, and an exact enumeration oracle.

The environment is segment-structured: a latent segment drives the profile
distribution, the intent dynamics, and the planted outcome effects. The
outcome of an episode is Bernoulli on a logit that is the segment base
plus, for every turn t (1-based) and atom k used, weight[z, k] * gamma^t.
The same closed form backs corpus generation, episode outcomes, and the
brute-force optimal-return oracle, so offline labels and online episodes
are distributionally identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Turn, UserProfile
from .errors import ConfigurationError, ValidationError


def sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class SegmentModel:
    """One latent user segment: profile sampler, dynamics, planted effects."""

    base_logit: float  # outcome logit with no strategy effects
    atom_weights: tuple  # planted per-atom effect on the outcome logit
    sparse_probs: tuple = ()  # per sparse field: category distribution
    numeric_mean: tuple = ()
    numeric_std: tuple = ()
    init_intent_probs: tuple = ()
    transitions: dict = field(default_factory=dict)  # strategy_id -> intent distribution
    default_transition: tuple = ()

    def intent_distribution(self, prev_strategy_id):
        if prev_strategy_id is None:
            return np.asarray(self.init_intent_probs)
        row = self.transitions.get(prev_strategy_id)
        return np.asarray(row if row is not None else self.default_transition)


@dataclass(frozen=True)
class UserModel:
    """Full environment: segment mixture plus shared vocab/limits."""

    segments: tuple
    segment_probs: tuple
    hangup_intents: frozenset
    intent_vocab: int
    n_atoms: int
    discount: float = 1.0  # gamma; turn t multiplies effects by gamma^t
    t_max: int = 8

    def __post_init__(self):
        if not self.segments:
            raise ConfigurationError("user model needs at least one segment")
        if len(self.segments) != len(self.segment_probs):
            raise ConfigurationError("segment_probs length mismatch")
        if abs(sum(self.segment_probs) - 1.0) > 1e-9:
            raise ConfigurationError("segment probabilities must sum to 1")
        if not 0.0 < self.discount <= 1.0:
            raise ConfigurationError("discount must be in (0, 1]")
        if not 1 <= self.t_max <= 50:
            raise ConfigurationError("t_max must be in [1, 50]")
        for seg in self.segments:
            if len(seg.atom_weights) != self.n_atoms:
                raise ConfigurationError("segment atom_weights length != n_atoms")
            for name, row in (("init", seg.init_intent_probs), ("default", seg.default_transition)):
                if len(row) != self.intent_vocab or abs(sum(row) - 1.0) > 1e-9:
                    raise ConfigurationError(f"{name} intent distribution must sum to 1")
            for sid, row in seg.transitions.items():
                if len(row) != self.intent_vocab or abs(sum(row) - 1.0) > 1e-9:
                    raise ConfigurationError(f"transition row for strategy {sid} must sum to 1")

    def sample_segment(self, rng):
        return int(rng.choice(len(self.segments), p=np.asarray(self.segment_probs)))

    def sample_profile(self, z, rng):
        seg = self.segments[z]
        sparse = tuple(
            (f, int(rng.choice(len(p), p=np.asarray(p)))) for f, p in enumerate(seg.sparse_probs)
        )
        numeric = tuple(
            (f, float(rng.normal(m, s)))
            for f, (m, s) in enumerate(zip(seg.numeric_mean, seg.numeric_std))
        )
        return UserProfile(sparse=sparse, numeric=numeric)

    def turn_effect(self, z, atoms, turn_number):
        w = self.segments[z].atom_weights
        return sum(w[a] for a in atoms) * self.discount**turn_number

    def outcome_logit(self, z, strategy_sequence):
        """Closed-form outcome logit for a sequence of AtomSets (turn 1 first)."""
        logit = self.segments[z].base_logit
        for t, atoms in enumerate(strategy_sequence, start=1):
            logit += self.turn_effect(z, atoms, t)
        return logit

    def propensity(self, z):
        """Segment repayment propensity with no strategy effects applied."""
        return sigmoid(self.segments[z].base_logit)


@dataclass
class EpisodeLog:
    """One simulated conversation and its outcome."""

    turns: list  # Turn objects in order
    path: tuple  # chosen strategy ids, first turn to last
    outcome: int
    policy_name: str
    segment: int
    profile: UserProfile

    @property
    def rounds(self):
        return len(self.turns)


def run_episode(user_model, policy, seed, segment=None, profile=None):
    """Alternate user intent and policy strategy until hangup/terminal/t_max.

    Deterministic per (user_model, policy, seed). The policy is any object
    with ``new_session(profile, rng)`` and ``act(session, intent)``
    returning a result with ``strategy_id``, ``atoms`` via the candidate
    set, and a ``terminal`` flag.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    z = user_model.sample_segment(rng) if segment is None else segment
    if profile is None:
        profile = user_model.sample_profile(z, rng)
    session = policy.new_session(profile, rng=rng)
    seg = user_model.segments[z]
    turns = []
    path = []
    effect = seg.base_logit
    prev_sid = None
    for t in range(1, user_model.t_max + 1):
        probs = seg.intent_distribution(prev_sid)
        intent = int(rng.choice(user_model.intent_vocab, p=probs))
        result = policy.act(session, intent)
        atoms = policy.candidates.get(result.strategy_id).atoms
        turns.append(Turn(intent=intent, strategy=atoms))
        path.append(result.strategy_id)
        effect += user_model.turn_effect(z, atoms, t)
        if intent in user_model.hangup_intents or result.terminal:
            break
        prev_sid = result.strategy_id
    outcome = int(rng.random() < sigmoid(effect))
    return EpisodeLog(
        turns=turns,
        path=tuple(path),
        outcome=outcome,
        policy_name=getattr(policy, "name", type(policy).__name__),
        segment=z,
        profile=profile,
    )


@dataclass
class SimulationStats:
    repayment_rate: float
    mean_rounds: float
    diversity: float
    n_episodes: int
    repayment_se: float
    diversity_se: float
    policy_name: str = ""


def _diversity(paths):
    return len(set(paths)) / len(paths)


def _bootstrap_diversity_se(paths, rng, n_resamples=200):
    n = len(paths)
    values = []
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        values.append(len({paths[i] for i in idx}) / n)
    return float(np.std(values))


def estimate_return(user_model, policy, n_episodes, seed, keep_logs=False):
    """Monte-Carlo estimate of the expected outcome plus dialogue statistics.

    Diversity is the share of distinct strategy paths among the episodes;
    its standard error comes from a seeded bootstrap over episodes.
    """
    if n_episodes <= 0:
        raise ConfigurationError("n_episodes must be positive")
    seeds = np.random.SeedSequence(seed).generate_state(n_episodes, dtype=np.uint64)
    logs = [run_episode(user_model, policy, int(s)) for s in seeds]
    outcomes = np.asarray([log.outcome for log in logs], dtype=float)
    rounds = np.asarray([log.rounds for log in logs], dtype=float)
    paths = [log.path for log in logs]
    rate = float(outcomes.mean())
    boot_rng = np.random.Generator(np.random.PCG64(seed + 1))
    stats = SimulationStats(
        repayment_rate=rate,
        mean_rounds=float(rounds.mean()),
        diversity=_diversity(paths),
        n_episodes=n_episodes,
        repayment_se=math.sqrt(max(rate * (1.0 - rate), 1e-12) / n_episodes),
        diversity_se=_bootstrap_diversity_se(paths, boot_rng),
        policy_name=getattr(policy, "name", type(policy).__name__),
    )
    return (stats, logs) if keep_logs else stats


def _hangup_prob(user_model, z, prev_sid):
    probs = user_model.segments[z].intent_distribution(prev_sid)
    return float(sum(probs[i] for i in user_model.hangup_intents))


def expected_return_open_loop(user_model, z, candidate_sequence):
    """Exact expected outcome of playing a fixed candidate sequence in segment z.

    The episode ends after turn t when the turn's intent was a hangup, the
    strategy was terminal, or the sequence is exhausted; intents matter only
    through the hangup probability, so the expectation is a short sum.
    """
    total = 0.0
    survive = 1.0
    cum = user_model.segments[z].base_logit
    prev = None
    for t, cand in enumerate(candidate_sequence, start=1):
        q = _hangup_prob(user_model, z, prev)
        cum_t = cum + user_model.turn_effect(z, cand.atoms, t)
        if cand.terminal or t == len(candidate_sequence):
            total += survive * sigmoid(cum_t)
            break
        total += survive * q * sigmoid(cum_t)
        survive *= 1.0 - q
        cum = cum_t
        prev = cand.strategy_id
    return total


def brute_force_optimal(user_model, candidates, depth):
    """Exhaustive open-loop optimum per segment, exact via the closed form.

    Respects per-candidate occurrence limits and stops branches at terminal
    strategies. Returns (overall optimal return, per-segment dict with the
    best sequence of strategy ids and its return).
    """
    n_branches = len(candidates) ** depth
    if n_branches > 10**6:
        raise ConfigurationError(
            f"{len(candidates)}^{depth} = {n_branches} sequences exceed the 1e6 budget"
        )
    cand_list = list(candidates)
    per_segment = {}
    overall = 0.0
    for z in range(len(user_model.segments)):
        base = user_model.segments[z].base_logit

        def search(t, prev_sid, cum, survive, remaining):
            best_val, best_seq = -1.0, ()
            q = _hangup_prob(user_model, z, prev_sid)
            for cand in cand_list:
                if remaining.get(cand.strategy_id, 1) <= 0:
                    continue
                cum_t = cum + user_model.turn_effect(z, cand.atoms, t)
                if cand.terminal or t == depth:
                    val = survive * sigmoid(cum_t)
                    seq = (cand.strategy_id,)
                else:
                    ended = survive * q * sigmoid(cum_t)
                    if cand.limit is not None:
                        remaining[cand.strategy_id] -= 1
                    sub_val, sub_seq = search(
                        t + 1, cand.strategy_id, cum_t, survive * (1.0 - q), remaining
                    )
                    if cand.limit is not None:
                        remaining[cand.strategy_id] += 1
                    val = ended + sub_val
                    seq = (cand.strategy_id,) + sub_seq
                if val > best_val:
                    best_val, best_seq = val, seq
            return best_val, best_seq

        remaining = {c.strategy_id: (c.limit if c.limit is not None else depth + 1) for c in cand_list}
        val, seq = search(1, None, base, 1.0, remaining)
        per_segment[z] = {"return": val, "sequence": seq}
        overall += user_model.segment_probs[z] * val
    return overall, per_segment
