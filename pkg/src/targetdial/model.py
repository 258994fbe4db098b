"""Attention-based dual-head sequence model over dialogue strategies.

One shared front end (user tower + per-turn strategy aggregation) drives
two recurrent heads:

* outcome head: GRU over [R_t, I_t, u] emitting a per-step completion
  probability for the call's target (e.g. repayment),
* usage head: GRU over [R_{t-1}, I_t, u] emitting per-atom usage
  probabilities for the strategy of the *current* step, so a candidate can
  be scored online before that strategy is committed (R_0 is zero).

The whole-call binary label is broadcast to every step of the outcome
loss; the usage head is trained against the atom indicators of each turn.
Total loss is outcome loss plus ``loss_weight`` times usage loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import MAX_ATOMS
from .errors import ContractError, DimensionError, ValidationError

_PROB_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    n_atoms: int
    intent_vocab: int
    sparse_vocab_sizes: tuple = ()
    n_numeric: int = 0
    embed_dim: int = 16
    hidden_dim: int = 32
    n_buckets: int = 8
    loss_weight: float = 1.0
    no_user_features: bool = False
    single_task: bool = False
    no_attention_aggregation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sparse_vocab_sizes", tuple(int(v) for v in self.sparse_vocab_sizes))
        if min(self.embed_dim, self.hidden_dim, self.n_buckets) < 1:
            raise ValidationError("embed_dim, hidden_dim and n_buckets must be >= 1")
        if self.loss_weight < 0:
            raise ValidationError("loss_weight must be >= 0")
        if not 1 <= self.n_atoms <= MAX_ATOMS:
            raise ValidationError(f"n_atoms must be in [1, {MAX_ATOMS}]")
        if self.intent_vocab < 1:
            raise ValidationError("intent_vocab must be >= 1")

    @classmethod
    def for_corpus(cls, meta, **overrides):
        return cls(
            n_atoms=meta.n_atoms,
            intent_vocab=meta.intent_vocab,
            sparse_vocab_sizes=meta.sparse_vocab_sizes,
            n_numeric=meta.n_numeric,
            **overrides,
        )

    def to_dict(self):
        d = asdict(self)
        d["sparse_vocab_sizes"] = list(self.sparse_vocab_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "sparse_vocab_sizes": tuple(d.get("sparse_vocab_sizes", ()))})


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _gru_shapes(prefix, in_dim, hidden):
    shapes = {}
    for gate in ("z", "r", "h"):
        shapes[f"{prefix}_w_{gate}"] = (in_dim, hidden)
        shapes[f"{prefix}_u_{gate}"] = (hidden, hidden)
        shapes[f"{prefix}_b_{gate}"] = (hidden,)
    return shapes


def param_shapes(config):
    """Every learnable array, by name. Insertion order fixes init order."""
    e, hid, k = config.embed_dim, config.hidden_dim, config.n_atoms
    d = 3 * e  # concat(P_k, I_t, u)
    shapes = {
        "atom_emb": (k, e),
        "intent_emb": (config.intent_vocab, e),
    }
    for f, vocab in enumerate(config.sparse_vocab_sizes):
        shapes[f"sparse_emb_{f}"] = (vocab, e)
    for f in range(config.n_numeric):
        shapes[f"numeric_proj_w_{f}"] = (config.n_buckets,)
        shapes[f"numeric_proj_b_{f}"] = (config.n_buckets,)
        shapes[f"numeric_emb_{f}"] = (config.n_buckets, e)
    shapes.update(
        {
            "user_w": (2 * e, e),
            "user_b": (e,),
            "attn_w1": (d, e),
            "attn_b1": (e,),
            "attn_w2": (e, 1),
            "attn_b2": (1,),
            "gate_w1": (d, d),
            "gate_b1": (d,),
            "gate_w2": (d, d),
            "gate_b2": (d,),
            "gate_w3": (d, e),
            "gate_b3": (e,),
        }
    )
    shapes.update(_gru_shapes("gru1", d, hid))
    shapes.update(_gru_shapes("gru2", d, hid))
    shapes.update(
        {
            "head_y_w": (hid, 1),
            "head_y_b": (1,),
            "head_s_w": (hid, k),
            "head_s_b": (k,),
        }
    )
    return shapes


def _init_array(name, shape, rng):
    if "emb" in name:
        return rng.uniform(-0.05, 0.05, size=shape)
    if name.endswith(("_b", "_b1", "_b2", "_b3")) or "_b_" in name:
        return np.zeros(shape)
    fan_in = shape[0] if len(shape) > 1 else 1
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ModelParams:
    """Named float64 arrays for every learnable parameter."""

    def __init__(self, config, arrays):
        self.config = config
        self.arrays = arrays

    @classmethod
    def init(cls, config, seed):
        """Embeddings uniform(-0.05, 0.05), weights scaled by fan-in, biases zero."""
        rng = np.random.Generator(np.random.PCG64(seed))
        arrays = {
            name: _init_array(name, shape, rng) for name, shape in param_shapes(config).items()
        }
        return cls(config, arrays)

    @classmethod
    def zeros(cls, config):
        arrays = {name: np.zeros(shape) for name, shape in param_shapes(config).items()}
        return cls(config, arrays)

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def bind(self, tape=None):
        return _Bound(self.arrays, tape)

    def __eq__(self, other):
        return (
            isinstance(other, ModelParams)
            and self.config == other.config
            and self.arrays.keys() == other.arrays.keys()
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )


class _Bound:
    """Per-forward cache mapping param name -> Tensor (taped or constant)."""

    def __init__(self, arrays, tape):
        self._arrays = arrays
        self._tape = tape
        self._cache = {}

    def __getitem__(self, name):
        t = self._cache.get(name)
        if t is None:
            arr = self._arrays[name]
            t = self._tape.leaf(arr) if self._tape is not None else Tensor(arr)
            self._cache[name] = t
        return t

    def gru(self, prefix):
        names = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")
        return {n: self[f"{prefix}_{n}"] for n in names}


def _softmax_all(x):
    return ad.softmax_masked(x, np.ones(x.value.shape, dtype=bool))


def _mean_tensors(vecs):
    total = vecs[0]
    for v in vecs[1:]:
        total = ad.add(total, v)
    if len(vecs) == 1:
        return total
    return ad.mul(total, ad.as_tensor(1.0 / len(vecs)))


def _user_vector(profile, bound, config):
    e = config.embed_dim
    if config.no_user_features:
        return ad.as_tensor(np.zeros(e))
    if profile.sparse:
        rows = []
        for fid, cid in profile.sparse:
            if fid >= len(config.sparse_vocab_sizes) or cid >= config.sparse_vocab_sizes[fid]:
                raise ValidationError(f"sparse feature ({fid},{cid}) outside model vocab")
            rows.append(ad.flatten(ad.gather(bound[f"sparse_emb_{fid}"], [cid])))
        u1 = _mean_tensors(rows)
    else:
        u1 = ad.as_tensor(np.zeros(e))
    if profile.numeric:
        vecs = []
        for fid, value in profile.numeric:
            if fid >= config.n_numeric:
                raise ValidationError(f"numeric feature id {fid} outside model range")
            logits = ad.add(
                ad.mul(bound[f"numeric_proj_w_{fid}"], ad.as_tensor(value)),
                bound[f"numeric_proj_b_{fid}"],
            )
            vecs.append(ad.matmul(_softmax_all(logits), bound[f"numeric_emb_{fid}"]))
        u2 = _mean_tensors(vecs)
    else:
        u2 = ad.as_tensor(np.zeros(e))
    return ad.relu(ad.affine(ad.concat([u1, u2]), bound["user_w"], bound["user_b"]))


def _atom_context(atoms, intent_vec, user_vec, bound):
    """Gathered atom embeddings and the per-atom [P_k, I_t, u] matrix."""
    idx = list(atoms)
    p_sel = ad.gather(bound["atom_emb"], idx)
    n = len(idx)
    d = ad.concat_cols([p_sel, ad.repeat_rows(intent_vec, n), ad.repeat_rows(user_vec, n)])
    return p_sel, d


def _attention_from_context(p_sel, d, bound):
    hidden = ad.tanh(ad.affine(d, bound["attn_w1"], bound["attn_b1"]))
    scores = ad.flatten(ad.affine(hidden, bound["attn_w2"], bound["attn_b2"]))
    alpha = _softmax_all(scores)
    return ad.matmul(alpha, p_sel)


def _gated_from_context(d, bound):
    inner = ad.sigmoid(ad.affine(d, bound["gate_w1"], bound["gate_b1"]))
    scale = ad.affine(inner, bound["gate_w2"], bound["gate_b2"])
    f = ad.affine(ad.mul(d, scale), bound["gate_w3"], bound["gate_b3"])
    return ad.mean0(f)


def _aggregate(atoms, intent_vec, user_vec, bound, config):
    if len(atoms) == 0:
        raise ContractError("cannot aggregate an empty strategy")
    if config.no_attention_aggregation:
        return ad.mean0(ad.gather(bound["atom_emb"], list(atoms)))
    p_sel, d = _atom_context(atoms, intent_vec, user_vec, bound)
    return ad.add(_attention_from_context(p_sel, d, bound), _gated_from_context(d, bound))


def user_vector(profile, params, tape=None):
    """Processed user feature vector u (zero vector under the no-user ablation)."""
    return _user_vector(profile, params.bind(tape), params.config)


def intent_vector(intent, params, tape=None):
    if not 0 <= intent < params.config.intent_vocab:
        raise ValidationError(f"intent {intent} outside vocab")
    return ad.flatten(ad.gather(params.bind(tape)["intent_emb"], [intent]))


def aggregate_attention(atoms, intent_vec, user_vec, params, tape=None):
    """Attention-pooled strategy vector: masked softmax over per-atom scores."""
    if len(atoms) == 0:
        raise ContractError("cannot aggregate an empty strategy")
    bound = params.bind(tape)
    p_sel, d = _atom_context(atoms, intent_vec, user_vec, bound)
    return _attention_from_context(p_sel, d, bound)


def aggregate_gated(atoms, intent_vec, user_vec, params, tape=None):
    """Gated strategy vector: per-atom feature rescaling, then mean."""
    if len(atoms) == 0:
        raise ContractError("cannot aggregate an empty strategy")
    bound = params.bind(tape)
    _, d = _atom_context(atoms, intent_vec, user_vec, bound)
    return _gated_from_context(d, bound)


def combine(r_attn, r_gate):
    """Element-wise sum of the two aggregated strategy vectors."""
    if r_attn.value.shape != r_gate.value.shape:
        raise DimensionError(
            f"aggregated vectors disagree: {r_attn.value.shape} vs {r_gate.value.shape}"
        )
    return ad.add(r_attn, r_gate)


def aggregate_strategy(atoms, intent_vec, user_vec, params, tape=None):
    """Final strategy vector R_t (plain atom-embedding mean under the ablation)."""
    return _aggregate(atoms, intent_vec, user_vec, params.bind(tape), params.config)


@dataclass
class SequenceOutputs:
    """Per-step head outputs; tensors so a loss can be built on top."""

    ys: list  # T tensors of shape (1,)
    ss: list | None  # T tensors of shape (K,), None under single_task

    def y_values(self):
        return np.array([t.value[0] for t in self.ys])

    def s_values(self):
        if self.ss is None:
            return None
        return np.stack([t.value for t in self.ss])


def forward_sequence(dialogue, params, tape=None):
    """Run both heads over a whole dialogue; returns per-step outputs."""
    if len(dialogue.turns) == 0:
        raise ContractError("forward_sequence requires at least one turn")
    config = params.config
    bound = params.bind(tape)
    u = _user_vector(dialogue.user, bound, config)
    gru1 = bound.gru("gru1")
    gru2 = None if config.single_task else bound.gru("gru2")
    h1 = ad.as_tensor(np.zeros(config.hidden_dim))
    h2 = ad.as_tensor(np.zeros(config.hidden_dim))
    r_prev = ad.as_tensor(np.zeros(config.embed_dim))
    ys = []
    ss = None if config.single_task else []
    for turn in dialogue.turns:
        if not 0 <= turn.intent < config.intent_vocab:
            raise ValidationError(f"intent {turn.intent} outside vocab")
        i_t = ad.flatten(ad.gather(bound["intent_emb"], [turn.intent]))
        r_t = _aggregate(turn.strategy, i_t, u, bound, config)
        h1 = ad.gru_cell(ad.concat([r_t, i_t, u]), h1, gru1)
        ys.append(ad.sigmoid(ad.affine(h1, bound["head_y_w"], bound["head_y_b"])))
        if gru2 is not None:
            h2 = ad.gru_cell(ad.concat([r_prev, i_t, u]), h2, gru2)
            ss.append(ad.sigmoid(ad.affine(h2, bound["head_s_w"], bound["head_s_b"])))
        r_prev = r_t
    return SequenceOutputs(ys=ys, ss=ss)


def _bce_scalar(p, label):
    clamped = ad.clip(p, _PROB_EPS, 1.0 - _PROB_EPS)
    if label == 1:
        return ad.sub(ad.as_tensor(0.0), ad.sum_all(ad.log(clamped)))
    return ad.sub(ad.as_tensor(0.0), ad.sum_all(ad.log(ad.sub(ad.as_tensor(1.0), clamped))))


def _bce_vector(p, indicator):
    clamped = ad.clip(p, _PROB_EPS, 1.0 - _PROB_EPS)
    pos = ad.mul(ad.as_tensor(indicator), ad.log(clamped))
    neg = ad.mul(ad.as_tensor(1.0 - indicator), ad.log(ad.sub(ad.as_tensor(1.0), clamped)))
    return ad.sub(ad.as_tensor(0.0), ad.sum_all(ad.add(pos, neg)))


def sequence_loss(dialogue, outputs, loss_weight):
    """Joint loss: label-broadcast outcome BCE plus weighted usage BCE.

    Returns (loss tensor, outcome-loss value, usage-loss value).
    """
    la = None
    for y_t in outputs.ys:
        term = _bce_scalar(y_t, dialogue.label)
        la = term if la is None else ad.add(la, term)
    lb = None
    if outputs.ss is not None:
        k = outputs.ss[0].value.shape[0]
        for turn, s_t in zip(dialogue.turns, outputs.ss):
            indicator = np.asarray(turn.strategy.indicator(k))
            term = _bce_vector(s_t, indicator)
            lb = term if lb is None else ad.add(lb, term)
    if lb is None:
        return la, float(la.value), 0.0
    total = ad.add(la, ad.mul(ad.as_tensor(loss_weight), lb))
    return total, float(la.value), float(lb.value)


def dialogue_loss(dialogue, params, tape=None):
    """Forward + loss in one call; the shape training and tests want."""
    outputs = forward_sequence(dialogue, params, tape)
    return sequence_loss(dialogue, outputs, params.config.loss_weight)


def save_params(path, params):
    """Checkpoint: config header plus every named array at full precision."""
    body = [
        {"name": name, "shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
        for name, arr in sorted(params.arrays.items())
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"config": params.config.to_dict(), "params": body}, fh)


def load_params(path):
    with open(path, encoding="utf-8") as fh:
        blob = json.load(fh)
    config = ModelConfig.from_dict(blob["config"])
    expected = param_shapes(config)
    arrays = {}
    for rec in blob["params"]:
        name, shape = rec["name"], tuple(rec["shape"])
        if name not in expected:
            raise ValidationError(f"checkpoint has unexpected parameter {name!r}")
        if shape != expected[name]:
            raise ValidationError(
                f"checkpoint parameter {name!r} has shape {shape}, config implies {expected[name]}"
            )
        values = np.asarray(rec["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValidationError(f"checkpoint parameter {name!r} has wrong value count")
        arrays[name] = values.reshape(shape)
    missing = set(expected) - set(arrays)
    if missing:
        raise ValidationError(f"checkpoint is missing parameters {sorted(missing)}")
    return ModelParams(config, arrays)
