"""Synthetic corpus generation with planted, oracle-checkable effects.

A corpus is just a batch of simulator episodes driven by a stochastic
"human collector" logging policy, so offline training labels and online
simulator outcomes come from one generative process. Every dialogue's
bin key is its latent segment's outcome propensity plus noise, which makes
quantile bins line up with segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import inference as inf
from .corpus import MAX_ATOMS, MAX_TURNS, CorpusMeta, Dialogue, Turn
from .errors import ConfigurationError
from .simulator import UserModel, run_episode


class LoggingPolicy:
    """Intent-keyed human behavior: preferred strategy with uniform exploration.

    With probability ``epsilon`` the collector picks uniformly among the
    unmasked candidates, otherwise the intent's preferred strategy (falling
    back to uniform when that strategy is masked). Respects the same
    occurrence limits and slot rules as the online engine.
    """

    name = "logging"

    def __init__(self, candidates, preferred, epsilon, rules=None):
        self.candidates = candidates
        self.preferred = dict(preferred)
        self.epsilon = float(epsilon)
        self.rules = rules
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError("epsilon must be in [0, 1]")
        for intent, sid in self.preferred.items():
            candidates.get(sid)

    def new_session(self, profile, rng=None):
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(0))
        return {"tracker": inf.TrackerState(), "rng": rng}

    def act(self, session, intent):
        tracker = session["tracker"]
        rng = session["rng"]
        allowed = inf.mask(self.candidates, tracker, self.rules)
        pool = [c for c, ok in zip(self.candidates, allowed) if ok]
        chosen = None
        if rng.random() >= self.epsilon:
            sid = self.preferred.get(intent)
            if sid is not None:
                for c in pool:
                    if c.strategy_id == sid:
                        chosen = c
                        break
        if chosen is None:
            chosen = pool[int(rng.integers(0, len(pool)))]
        tracker.history.append((chosen.strategy_id, intent))
        tracker.atom_history.append(chosen.atoms)
        if self.rules is not None:
            self.rules.apply_slots(intent, tracker.slots)
        return inf.StepResult(
            strategy_id=chosen.strategy_id,
            script=None,
            outcome_probs={},
            usage_scores={},
            usage_probs=None,
            terminal=chosen.terminal,
        )


@dataclass
class SyntheticConfig:
    """Everything needed to manufacture a corpus with known ground truth."""

    user_model: UserModel
    candidates: object  # CandidateSet the logging policy draws from
    preferred: dict  # intent -> preferred strategy id
    epsilon: float = 0.4
    rules: object = None
    n_dialogues: int = 1000
    bin_noise: float = 0.05
    intent_noise: float = 0.0  # label-independent corruption of recorded intents

    def validate(self):
        um = self.user_model
        if len(um.segments) < 1:
            raise ConfigurationError("need at least one segment")
        if um.n_atoms > MAX_ATOMS:
            raise ConfigurationError(f"n_atoms {um.n_atoms} exceeds cap {MAX_ATOMS}")
        if um.t_max > MAX_TURNS:
            raise ConfigurationError(f"t_max {um.t_max} exceeds cap {MAX_TURNS}")
        if self.n_dialogues < 1:
            raise ConfigurationError("n_dialogues must be >= 1")
        if not 0.0 <= self.intent_noise <= 1.0:
            raise ConfigurationError("intent_noise must be in [0, 1]")
        if self.bin_noise < 0:
            raise ConfigurationError("bin_noise must be >= 0")


def generate_corpus(config, seed):
    """Sample a corpus; byte-identical output for identical (config, seed)."""
    config.validate()
    um = config.user_model
    policy = LoggingPolicy(config.candidates, config.preferred, config.epsilon, config.rules)
    meta = CorpusMeta(
        intent_vocab=um.intent_vocab,
        n_atoms=um.n_atoms,
        sparse_vocab_sizes=tuple(len(p) for p in um.segments[0].sparse_probs),
        n_numeric=len(um.segments[0].numeric_mean),
        generator={
            "seed": seed,
            "epsilon": config.epsilon,
            "bin_noise": config.bin_noise,
            "intent_noise": config.intent_noise,
            "discount": um.discount,
            "segments": [
                {"base_logit": s.base_logit, "atom_weights": list(s.atom_weights)}
                for s in um.segments
            ],
        },
    )
    episode_seeds = np.random.SeedSequence(seed).generate_state(config.n_dialogues, dtype=np.uint64)
    noise_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
    dialogues = []
    for i, ep_seed in enumerate(episode_seeds):
        log = run_episode(um, policy, int(ep_seed))
        turns = log.turns
        if config.intent_noise > 0.0:
            noisy = []
            for turn in turns:
                if noise_rng.random() < config.intent_noise:
                    noisy.append(Turn(int(noise_rng.integers(0, um.intent_vocab)), turn.strategy))
                else:
                    noisy.append(turn)
            turns = noisy
        bin_key = um.propensity(log.segment) + config.bin_noise * noise_rng.normal()
        dialogues.append(
            Dialogue(
                id=f"d{i:06d}",
                user=log.profile,
                turns=tuple(turns),
                label=log.outcome,
                bin_key=float(bin_key),
            )
        )
    return meta, dialogues
