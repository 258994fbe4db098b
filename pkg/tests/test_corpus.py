import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from targetdial import presets
from targetdial.corpus import (
    AtomSet,
    CorpusMeta,
    Dialogue,
    Turn,
    UserProfile,
    assign_bins,
    load_corpus,
    save_corpus,
    split,
)
from targetdial.errors import ConfigurationError, ParseError, ValidationError
from targetdial.synth import SyntheticConfig, generate_corpus
from targetdial.simulator import SegmentModel, UserModel


def tiny_meta(**kw):
    defaults = dict(intent_vocab=4, n_atoms=3, sparse_vocab_sizes=(2,), n_numeric=1)
    defaults.update(kw)
    return CorpusMeta(**defaults)


def make_dialogue(i=0, turns=None, label=1, bin_key=0.0):
    turns = turns or (Turn(0, AtomSet((0,))),)
    return Dialogue(
        id=f"d{i}",
        user=UserProfile(sparse=((0, 1),), numeric=((0, 0.25),)),
        turns=turns,
        label=label,
        bin_key=bin_key,
    )


def random_dialogue(rng, i, meta):
    turns = tuple(
        Turn(
            int(rng.integers(0, meta.intent_vocab)),
            AtomSet(tuple(rng.choice(meta.n_atoms, size=rng.integers(1, meta.n_atoms + 1), replace=False))),
        )
        for _ in range(rng.integers(1, 8))
    )
    return Dialogue(
        id=f"d{i}",
        user=UserProfile(
            sparse=((0, int(rng.integers(0, 2))),),
            numeric=((0, float(rng.normal())),),
        ),
        turns=turns,
        label=int(rng.integers(0, 2)),
        bin_key=float(rng.normal()),
    )


class TestTypes:
    def test_atomset_sorts_and_dedups(self):
        assert AtomSet((3, 1, 2)).atoms == (1, 2, 3)
        with pytest.raises(ValidationError):
            AtomSet((1, 1))
        with pytest.raises(ValidationError):
            AtomSet(())

    def test_atomset_cap(self):
        with pytest.raises(ValidationError):
            AtomSet(tuple(range(11)))

    def test_dialogue_turn_cap(self):
        with pytest.raises(ValidationError):
            make_dialogue(turns=tuple(Turn(0, AtomSet((0,))) for _ in range(51)))

    def test_label_binary(self):
        with pytest.raises(ValidationError):
            make_dialogue(label=2)

    def test_profile_rejects_duplicate_feature_ids(self):
        with pytest.raises(ValidationError):
            UserProfile(sparse=((0, 1), (0, 0)))

    def test_profile_rejects_non_finite(self):
        with pytest.raises(ValidationError):
            UserProfile(numeric=((0, float("nan")),))

    def test_meta_validates_dialogue(self):
        meta = tiny_meta()
        with pytest.raises(ValidationError):
            meta.validate_dialogue(make_dialogue(turns=(Turn(9, AtomSet((0,))),)))
        with pytest.raises(ValidationError):
            meta.validate_dialogue(make_dialogue(turns=(Turn(0, AtomSet((5,))),)))


class TestFileFormat:
    def test_empty_corpus_is_header_only(self, tmp_path):
        path = tmp_path / "c.jsonl"
        save_corpus(path, tiny_meta(), [])
        assert len(path.read_text().splitlines()) == 1
        meta, dialogues = load_corpus(path)
        assert dialogues == []
        assert meta.intent_vocab == 4

    def test_single_dialogue_two_lines(self, tmp_path):
        path = tmp_path / "c.jsonl"
        save_corpus(path, tiny_meta(), [make_dialogue()])
        assert len(path.read_text().splitlines()) == 2

    def test_round_trip_random_corpus(self, tmp_path):
        rng = np.random.default_rng(0)
        meta = tiny_meta()
        dialogues = [random_dialogue(rng, i, meta) for i in range(100)]
        path = tmp_path / "c.jsonl"
        save_corpus(path, meta, dialogues)
        meta2, loaded = load_corpus(path)
        assert loaded == dialogues
        assert meta2 == meta

    def test_floats_round_trip_at_full_precision(self, tmp_path):
        d = make_dialogue(bin_key=0.1 + 0.2)  # classic non-representable sum
        path = tmp_path / "c.jsonl"
        save_corpus(path, tiny_meta(), [d])
        _, loaded = load_corpus(path)
        assert loaded[0].bin_key == d.bin_key
        assert loaded[0].user.numeric == d.user.numeric

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "c.jsonl"
        save_corpus(path, tiny_meta(), [make_dialogue(0), make_dialogue(1)])
        lines = path.read_text().splitlines()
        lines[2] = "{broken"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as err:
            load_corpus(path)
        assert err.value.line == 3

    def test_unknown_field_rejected(self, tmp_path):
        path = tmp_path / "c.jsonl"
        save_corpus(path, tiny_meta(), [make_dialogue()])
        lines = path.read_text().splitlines()
        lines[1] = lines[1].replace('"label"', '"surprise": 1, "label"')
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match="surprise"):
            load_corpus(path)

    def test_out_of_vocab_intent_rejected_on_load(self, tmp_path):
        path = tmp_path / "c.jsonl"
        save_corpus(path, tiny_meta(intent_vocab=8), [make_dialogue(turns=(Turn(7, AtomSet((0,))),))])
        lines = path.read_text().splitlines()
        lines[0] = lines[0].replace('"intent_vocab": 8', '"intent_vocab": 4')
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError):
            load_corpus(path)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_round_trip_property(self, tmp_path_factory, seed):
        rng = np.random.default_rng(seed)
        meta = tiny_meta()
        dialogues = [random_dialogue(rng, i, meta) for i in range(5)]
        path = tmp_path_factory.mktemp("rt") / "c.jsonl"
        save_corpus(path, meta, dialogues)
        _, loaded = load_corpus(path)
        assert loaded == dialogues


class TestSplit:
    def _dialogues(self, n=100):
        rng = np.random.default_rng(1)
        meta = tiny_meta()
        return [random_dialogue(rng, i, meta) for i in range(n)]

    def test_all_train(self):
        ds = self._dialogues(10)
        train, test = split(ds, (1.0, 0.0), seed=0)
        assert test == [] and len(train) == 10

    def test_sizes(self):
        train, test = split(self._dialogues(100), (0.8, 0.2), seed=3)
        assert len(train) == 80 and len(test) == 20

    def test_disjoint_union(self):
        ds = self._dialogues(50)
        train, test = split(ds, (0.6, 0.4), seed=2)
        ids = {d.id for d in train} | {d.id for d in test}
        assert len(ids) == 50
        assert not ({d.id for d in train} & {d.id for d in test})

    def test_deterministic(self):
        ds = self._dialogues(40)
        assert split(ds, (0.5, 0.5), seed=9) == split(ds, (0.5, 0.5), seed=9)

    def test_negative_fraction_rejected(self):
        with pytest.raises(ConfigurationError):
            split(self._dialogues(10), (1.2, -0.2), seed=0)

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ConfigurationError):
            split(self._dialogues(10), (0.5, 0.4), seed=0)


class TestAssignBins:
    def test_single_bin(self):
        ds = [make_dialogue(i, bin_key=float(i)) for i in range(5)]
        assert assign_bins(ds, 1) == [0] * 5

    def test_two_bins_quantile_split(self):
        ds = [make_dialogue(i, bin_key=k) for i, k in enumerate([1.0, 2.0, 3.0, 4.0])]
        assert assign_bins(ds, 2) == [0, 0, 1, 1]

    def test_equal_sizes_for_distinct_keys(self):
        rng = np.random.default_rng(4)
        keys = rng.permutation(1000).astype(float)
        ds = [make_dialogue(i, bin_key=float(k)) for i, k in enumerate(keys)]
        bins = assign_bins(ds, 10)
        counts = np.bincount(bins, minlength=10)
        assert np.array_equal(counts, np.full(10, 100))

    def test_ties_share_the_lower_bin(self):
        ds = [make_dialogue(i, bin_key=k) for i, k in enumerate([1.0, 2.0, 2.0, 3.0])]
        bins = assign_bins(ds, 2)
        assert bins[1] == bins[2] == 0
        assert bins[3] == 1

    def test_partition_covers_everything(self):
        rng = np.random.default_rng(5)
        ds = [make_dialogue(i, bin_key=float(rng.normal())) for i in range(137)]
        bins = assign_bins(ds, 7)
        assert len(bins) == 137
        assert set(bins) <= set(range(7))

    def test_more_bins_than_dialogues_rejected(self):
        with pytest.raises(ValidationError):
            assign_bins([make_dialogue(0)], 2)


def flat_config(n_dialogues, weights=None, base=0.0, discount=1.0):
    """One segment, uniform intents, configurable planted effects."""
    n_atoms = presets.N_ATOMS
    w = [0.0] * n_atoms
    for k, v in (weights or {}).items():
        w[k] = v
    intents = presets.INTENT_VOCAB
    uniform = tuple(1.0 / intents for _ in range(intents))
    segment = SegmentModel(
        base_logit=base,
        atom_weights=tuple(w),
        sparse_probs=((0.5, 0.5),),
        numeric_mean=(0.0,),
        numeric_std=(1.0,),
        init_intent_probs=uniform,
        transitions={},
        default_transition=uniform,
    )
    user_model = UserModel(
        segments=(segment,),
        segment_probs=(1.0,),
        hangup_intents=frozenset(),
        intent_vocab=intents,
        n_atoms=n_atoms,
        discount=discount,
        t_max=3,
    )
    return SyntheticConfig(
        user_model=user_model,
        candidates=presets.default_candidates(),
        preferred=dict(presets.PREFERRED),
        epsilon=0.5,
        rules=presets.default_rules(),
        n_dialogues=n_dialogues,
        bin_noise=0.05,
    )


class TestGenerator:
    def test_zero_effects_give_half_label_rate(self):
        config = flat_config(10_000)
        _, dialogues = generate_corpus(config, seed=1)
        mean = np.mean([d.label for d in dialogues])
        assert 0.48 <= mean <= 0.52

    def test_determinism_is_byte_identical(self, tmp_path):
        config = flat_config(200)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        meta1, d1 = generate_corpus(config, seed=42)
        meta2, d2 = generate_corpus(config, seed=42)
        save_corpus(a, meta1, d1)
        save_corpus(b, meta2, d2)
        assert a.read_bytes() == b.read_bytes()

    def test_different_seed_differs(self):
        config = flat_config(50)
        _, d1 = generate_corpus(config, seed=1)
        _, d2 = generate_corpus(config, seed=2)
        assert d1 != d2

    def test_planted_effect_matches_closed_form(self):
        # one atom with weight +3, gamma=1: dialogues using it at turn 1
        # must repay at sigmoid(3) ~ 0.953
        press_atom = presets.atom_id("press")
        config = flat_config(10_000, weights={press_atom: 3.0}, discount=1.0)
        _, dialogues = generate_corpus(config, seed=7)
        used, total = 0, 0
        only_first = []
        for d in dialogues:
            uses = [press_atom in t.strategy.atoms for t in d.turns]
            if uses[0] and not any(uses[1:]):
                only_first.append(d.label)
        expected = 1.0 / (1.0 + math.exp(-3.0))
        observed = np.mean(only_first)
        se = math.sqrt(expected * (1 - expected) / len(only_first))
        assert len(only_first) > 300
        assert abs(observed - expected) < max(3 * se, 0.01)

    def test_invalid_config_rejected(self):
        config = flat_config(10)
        config.n_dialogues = 0
        with pytest.raises(ConfigurationError):
            generate_corpus(config, seed=0)

    def test_label_rate_tracks_sigmoid_for_fixed_sequences(self):
        # generator invariant: conditioned on a strategy sequence, the label
        # frequency approaches the closed-form Bernoulli parameter
        offer = presets.atom_id("offer")
        config = flat_config(10_000, weights={offer: 1.0}, base=-0.5, discount=1.0)
        _, dialogues = generate_corpus(config, seed=3)
        groups = {}
        for d in dialogues:
            uses = sum(offer in t.strategy.atoms for t in d.turns)
            groups.setdefault((uses, len(d.turns)), []).append(d.label)
        checked = 0
        for (uses, _n_turns), labels in groups.items():
            if len(labels) < 400:
                continue
            p = 1.0 / (1.0 + math.exp(0.5 - uses))
            se = math.sqrt(p * (1 - p) / len(labels))
            assert abs(np.mean(labels) - p) < 3.5 * se
            checked += 1
        assert checked >= 2


class TestGeneratedCorpusShape:
    def test_bin_key_tracks_segment_propensity(self):
        scenario = presets.corpus_scenario()
        config = scenario.synthetic_config(n_dialogues=400)
        _, dialogues = generate_corpus(config, seed=5)
        keys = np.array([d.bin_key for d in dialogues])
        lows = keys[keys < 0.45]
        highs = keys[keys >= 0.45]
        # two propensity clusters, one per segment
        assert len(lows) > 100 and len(highs) > 100
        assert np.std(lows) < 0.1 and np.std(highs) < 0.1

    def test_respects_turn_caps(self):
        scenario = presets.corpus_scenario()
        config = scenario.synthetic_config(n_dialogues=200)
        meta, dialogues = generate_corpus(config, seed=6)
        for d in dialogues:
            assert 1 <= len(d.turns) <= scenario.user_model.t_max
            meta.validate_dialogue(d)
