"""Minibatch Adam training for the dual-head model.

Dialogues keep their own lengths: gradients are accumulated per dialogue
in batch order (no padding), so runs are bit-reproducible per seed.
"""

from __future__ import annotations

import logging
import math
import time

import numpy as np

from . import model as mdl
from .autodiff import Tape
from .errors import NumericError

log = logging.getLogger(__name__)


class Adam:
    """Standard Adam with bias correction over a dict of named arrays."""

    def __init__(self, shapes, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros(shape) for name, shape in shapes.items()}
        self._v = {name: np.zeros(shape) for name, shape in shapes.items()}

    def update(self, arrays, grads):
        self.step_count += 1
        correct1 = 1.0 - self.beta1**self.step_count
        correct2 = 1.0 - self.beta2**self.step_count
        for name, g in grads.items():
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            arrays[name] -= self.learning_rate * (m / correct1) / (
                np.sqrt(v / correct2) + self.eps
            )


def clip_gradients(grads, max_norm):
    """Scale all gradients down so their global L2 norm is <= max_norm."""
    if max_norm is None or max_norm <= 0:
        return grads
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return grads


def _batch_gradients(batch, params):
    """Summed gradients over a batch of dialogues, plus loss bookkeeping."""
    acc = None
    loss_sum = la_sum = lb_sum = 0.0
    n_turns = 0
    for dialogue in batch:
        tape = Tape()
        loss, la, lb = mdl.dialogue_loss(dialogue, params, tape)
        tape.backward(loss)
        loss_sum += float(loss.value)
        la_sum += la
        lb_sum += lb
        n_turns += len(dialogue.turns)
        if acc is None:
            acc = {name: tape.grad(arr).copy() for name, arr in params.arrays.items()}
        else:
            for name, arr in params.arrays.items():
                acc[name] += tape.grad(arr)
    scale = 1.0 / len(batch)
    for g in acc.values():
        g *= scale
    return acc, loss_sum, la_sum, lb_sum, n_turns


def train(dialogues, model_config, train_config, initial=None):
    """Train on whole dialogues; returns (params, per-epoch loss history).

    Deterministic for a fixed (config, seed): parameter init and epoch
    shuffles both derive from ``train_config.seed``. If the loss ever goes
    non-finite the run aborts with a :class:`NumericError` carrying the
    params from the last completed epoch in ``last_params``.
    """
    if not dialogues:
        raise NumericError("cannot train on an empty corpus")
    params = initial.copy() if initial is not None else mdl.ModelParams.init(
        model_config, train_config.seed
    )
    optimizer = Adam(
        {n: a.shape for n, a in params.arrays.items()},
        learning_rate=train_config.learning_rate,
        beta1=train_config.beta1,
        beta2=train_config.beta2,
        eps=train_config.adam_eps,
    )
    rng = np.random.Generator(np.random.PCG64(train_config.seed))
    history = []
    last_good = params.copy()
    for epoch in range(train_config.epochs):
        start = time.perf_counter()
        order = rng.permutation(len(dialogues))
        loss_sum = la_sum = lb_sum = 0.0
        n_turns = 0
        try:
            for lo in range(0, len(order), train_config.batch_size):
                batch = [dialogues[i] for i in order[lo : lo + train_config.batch_size]]
                grads, bl, bla, blb, bt = _batch_gradients(batch, params)
                clip_gradients(grads, train_config.clip_norm)
                optimizer.update(params.arrays, grads)
                loss_sum += bl
                la_sum += bla
                lb_sum += blb
                n_turns += bt
        except NumericError as exc:
            exc.last_params = last_good
            raise
        # wall time stays out of the history so logs are reproducible byte
        # for byte across runs
        entry = {
            "epoch": epoch,
            "loss": loss_sum / len(dialogues),
            "outcome_loss_per_turn": la_sum / n_turns,
            "usage_loss_per_turn": lb_sum / n_turns,
        }
        history.append(entry)
        last_good = params.copy()
        log.info(
            "epoch %d: loss=%.4f outcome/turn=%.4f usage/turn=%.4f (%.1fs)",
            epoch,
            entry["loss"],
            entry["outcome_loss_per_turn"],
            entry["usage_loss_per_turn"],
            time.perf_counter() - start,
        )
    return params, history
