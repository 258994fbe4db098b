"""Standardized dialogue corpus: data model, file format, splits, bins.

A dialogue is a labeled sequence of (intent, strategy) turns plus a user
profile. Turns carry only ids: the upstream transcription/standardization
pipeline that produces them is out of scope here. The on-disk format is
UTF-8 JSON lines: one meta record, then one record per dialogue.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError

MAX_TURNS = 50
MAX_ATOMS = 10

_FORMAT_VERSION = 1

_META_FIELDS = {"version", "intent_vocab", "n_atoms", "sparse_vocab_sizes", "n_numeric", "generator"}
_DIALOGUE_FIELDS = {"id", "user", "turns", "label", "bin_key"}
_USER_FIELDS = {"sparse", "numeric"}
_TURN_FIELDS = {"intent", "atoms"}


@dataclass(frozen=True)
class UserProfile:
    """Sparse (feature-id, category-id) pairs and numeric (feature-id, value) pairs."""

    sparse: tuple = ()
    numeric: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "sparse", tuple((int(f), int(c)) for f, c in self.sparse))
        object.__setattr__(self, "numeric", tuple((int(f), float(v)) for f, v in self.numeric))
        for name, pairs in (("sparse", self.sparse), ("numeric", self.numeric)):
            fids = [f for f, _ in pairs]
            if len(fids) != len(set(fids)):
                raise ValidationError(f"duplicate feature id in {name} profile features")
        for _, v in self.numeric:
            if v != v or v in (float("inf"), float("-inf")):
                raise ValidationError("numeric profile value is not finite")


@dataclass(frozen=True)
class AtomSet:
    """Non-empty sorted set of atom-policy ids used in one collector turn."""

    atoms: tuple

    def __post_init__(self):
        atoms = tuple(sorted(int(a) for a in self.atoms))
        if not atoms:
            raise ValidationError("strategy must contain at least one atom policy")
        if len(set(atoms)) != len(atoms):
            raise ValidationError("duplicate atom id in strategy")
        if len(atoms) > MAX_ATOMS:
            raise ValidationError(f"strategy has {len(atoms)} atoms, cap is {MAX_ATOMS}")
        if atoms[0] < 0:
            raise ValidationError("atom ids must be non-negative")
        object.__setattr__(self, "atoms", atoms)

    def indicator(self, n_atoms):
        """0/1 vector of length n_atoms."""
        vec = [0.0] * n_atoms
        for a in self.atoms:
            vec[a] = 1.0
        return vec

    def __len__(self):
        return len(self.atoms)

    def __iter__(self):
        return iter(self.atoms)


@dataclass(frozen=True)
class Turn:
    intent: int
    strategy: AtomSet


@dataclass(frozen=True)
class Dialogue:
    id: str
    user: UserProfile
    turns: tuple
    label: int
    bin_key: float

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))
        if not 1 <= len(self.turns) <= MAX_TURNS:
            raise ValidationError(
                f"dialogue {self.id!r} has {len(self.turns)} turns, must be in [1, {MAX_TURNS}]"
            )
        if self.label not in (0, 1):
            raise ValidationError(f"dialogue {self.id!r} label must be 0 or 1")


@dataclass(frozen=True)
class CorpusMeta:
    """Vocabulary sizes every dialogue in the file must respect."""

    intent_vocab: int
    n_atoms: int
    sparse_vocab_sizes: tuple = ()
    n_numeric: int = 0
    generator: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "sparse_vocab_sizes", tuple(int(v) for v in self.sparse_vocab_sizes))
        if self.intent_vocab < 1 or self.n_atoms < 1:
            raise ValidationError("vocab sizes must be >= 1")
        if any(v < 1 for v in self.sparse_vocab_sizes):
            raise ValidationError("sparse vocab sizes must be >= 1")

    def validate_dialogue(self, dialogue):
        for f, c in dialogue.user.sparse:
            if f >= len(self.sparse_vocab_sizes) or c >= self.sparse_vocab_sizes[f]:
                raise ValidationError(
                    f"dialogue {dialogue.id!r}: sparse feature ({f},{c}) outside declared vocab"
                )
        for f, _ in dialogue.user.numeric:
            if f >= self.n_numeric:
                raise ValidationError(f"dialogue {dialogue.id!r}: numeric feature id {f} out of range")
        for turn in dialogue.turns:
            if not 0 <= turn.intent < self.intent_vocab:
                raise ValidationError(
                    f"dialogue {dialogue.id!r}: intent {turn.intent} outside vocab of {self.intent_vocab}"
                )
            if turn.strategy.atoms[-1] >= self.n_atoms:
                raise ValidationError(
                    f"dialogue {dialogue.id!r}: atom {turn.strategy.atoms[-1]} outside {self.n_atoms} atoms"
                )


def _check_fields(record, allowed, line, kind):
    unknown = set(record) - allowed
    if unknown:
        raise ParseError(f"unknown field(s) {sorted(unknown)} in {kind} record", line=line)


def _dialogue_to_record(d):
    return {
        "id": d.id,
        "user": {
            "sparse": [[f, c] for f, c in d.user.sparse],
            "numeric": [[f, v] for f, v in d.user.numeric],
        },
        "turns": [{"intent": t.intent, "atoms": list(t.strategy.atoms)} for t in d.turns],
        "label": d.label,
        "bin_key": d.bin_key,
    }


def _dialogue_from_record(rec, line):
    _check_fields(rec, _DIALOGUE_FIELDS, line, "dialogue")
    try:
        user_rec = rec["user"]
        _check_fields(user_rec, _USER_FIELDS, line, "user")
        turns = []
        for t in rec["turns"]:
            _check_fields(t, _TURN_FIELDS, line, "turn")
            turns.append(Turn(intent=int(t["intent"]), strategy=AtomSet(tuple(t["atoms"]))))
        return Dialogue(
            id=str(rec["id"]),
            user=UserProfile(
                sparse=tuple((f, c) for f, c in user_rec.get("sparse", ())),
                numeric=tuple((f, v) for f, v in user_rec.get("numeric", ())),
            ),
            turns=tuple(turns),
            label=int(rec["label"]),
            bin_key=float(rec["bin_key"]),
        )
    except KeyError as exc:
        raise ParseError(f"missing field {exc} in dialogue record", line=line) from exc


def save_corpus(path, meta, dialogues):
    """Write meta + dialogues as JSON lines. Floats keep full precision."""
    for d in dialogues:
        meta.validate_dialogue(d)
    meta_rec = {
        "version": _FORMAT_VERSION,
        "intent_vocab": meta.intent_vocab,
        "n_atoms": meta.n_atoms,
        "sparse_vocab_sizes": list(meta.sparse_vocab_sizes),
        "n_numeric": meta.n_numeric,
    }
    if meta.generator is not None:
        meta_rec["generator"] = meta.generator
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta_rec, sort_keys=True) + "\n")
        for d in dialogues:
            fh.write(json.dumps(_dialogue_to_record(d), sort_keys=True) + "\n")


def load_corpus(path):
    """Read a corpus file back to (CorpusMeta, list of Dialogue)."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty corpus file (missing meta record)", line=1)
    try:
        meta_rec = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=1) from exc
    _check_fields(meta_rec, _META_FIELDS, 1, "meta")
    if meta_rec.get("version") != _FORMAT_VERSION:
        raise ParseError(f"unsupported format version {meta_rec.get('version')!r}", line=1)
    try:
        meta = CorpusMeta(
            intent_vocab=int(meta_rec["intent_vocab"]),
            n_atoms=int(meta_rec["n_atoms"]),
            sparse_vocab_sizes=tuple(meta_rec["sparse_vocab_sizes"]),
            n_numeric=int(meta_rec["n_numeric"]),
            generator=meta_rec.get("generator"),
        )
    except KeyError as exc:
        raise ParseError(f"missing field {exc} in meta record", line=1) from exc
    dialogues = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            raise ParseError("blank line inside corpus", line=lineno)
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from exc
        d = _dialogue_from_record(rec, lineno)
        meta.validate_dialogue(d)
        dialogues.append(d)
    return meta, dialogues


def split(dialogues, fractions, seed):
    """Split by dialogue id into (train, test); deterministic per seed.

    Fractions must be non-negative and sum to 1. A zero fraction yields an
    empty part.
    """
    train_frac, test_frac = fractions
    if min(train_frac, test_frac) < 0 or abs(train_frac + test_frac - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions {fractions} must be >= 0 and sum to 1")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(dialogues))
    n_train = round(train_frac * len(dialogues))
    train_idx = sorted(order[:n_train])
    test_idx = sorted(order[n_train:])
    return [dialogues[i] for i in train_idx], [dialogues[i] for i in test_idx]


def assign_bins(dialogues, n_bins):
    """Quantile-bin dialogues by bin_key.

    Bin sizes differ by at most one when keys are distinct; equal keys always
    share the lower bin.
    """
    if n_bins < 1:
        raise ConfigurationError("n_bins must be >= 1")
    n = len(dialogues)
    if n_bins > n:
        raise ValidationError(f"n_bins={n_bins} exceeds {n} dialogues")
    keys = np.asarray([d.bin_key for d in dialogues], dtype=float)
    if not np.all(np.isfinite(keys)):
        raise ValidationError("bin_key must be finite for every dialogue")
    sorted_keys = np.sort(keys)
    # rank of the first occurrence of each key value decides the bin, so ties
    # always land together in the lower bin
    first_rank = np.searchsorted(sorted_keys, keys, side="left")
    return [int(r) * n_bins // n for r in first_rank]
