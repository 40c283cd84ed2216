"""Memorization training: teach the micro LM every fact in a synthetic world."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .evalkit import accuracy, memorization_table
from .microlm import Adam, ModelConfig, ModelState, init_model, lm_loss
from .worldgen import Dataset, encode_items

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message, summary):
        self.summary = summary
        super().__init__(message)


@dataclass
class TrainSummary:
    epochs: int = 0
    base_accuracy: float = 0.0
    corpus_accuracy: float = 0.0
    reached_target: bool = False
    trace: list = field(default_factory=list)


def _batches_by_length(items):
    groups = {}
    for it in items:
        groups.setdefault(len(it.question), []).append(it)
    return list(groups.values())


def train_memorization(
    dataset: Dataset,
    model: ModelState | None = None,
    *,
    model_config: ModelConfig | None = None,
    target: float = 95.0,
    max_epochs: int = 200,
    lr: float = 3e-3,
    batch_size: int = 64,
    eval_every: int = 5,
    extra_epochs: int = 5,
    seed: int = 0,
    raise_on_failure: bool = False,
):
    """Adam on the NLL of every distinct fact until memorization >= ``target``.

    Stops once both the base questions and the whole corpus reach ``target``
    percent candidate accuracy, then trains ``extra_epochs`` more so the
    answers are not on a knife edge.  Resuming from ``model`` keeps its step
    counter.
    """
    if model is None:
        cfg = model_config or ModelConfig(vocab_size=len(dataset.vocab), seed=seed)
        model = init_model(cfg)
    corpus = dataset.training_items()
    base = dataset.items("base")
    summary = TrainSummary()

    def measure():
        table = memorization_table(model, corpus, dataset.vocab)
        table.update(memorization_table(model, base, dataset.vocab))
        return accuracy(table, base), accuracy(table, corpus)

    summary.base_accuracy, summary.corpus_accuracy = measure()
    if target <= 0 or (summary.base_accuracy >= target and summary.corpus_accuracy >= target):
        summary.reached_target = True
        return model, summary

    groups = [encode_items(dataset.vocab, g) for g in _batches_by_length(corpus)]
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x747261,)))
    opt = Adam(model.params, lr=lr)
    remaining_extra = None
    for epoch in range(max_epochs):
        batches = []
        for g in groups:
            perm = rng.permutation(len(g))
            batches.extend(g.subset(perm[i:i + batch_size]) for i in range(0, len(g), batch_size))
        for j in rng.permutation(len(batches)):
            b = batches[j]
            model.zero_grad()
            ag.backward(lm_loss(model, b.ids, b.answers))
            opt.step()
            model.step += 1
        model.zero_grad()
        summary.epochs = epoch + 1
        if remaining_extra is not None:
            remaining_extra -= 1
            if remaining_extra <= 0:
                break
            continue
        if (epoch + 1) % eval_every == 0 or epoch + 1 == max_epochs:
            summary.base_accuracy, summary.corpus_accuracy = measure()
            summary.trace.append((epoch + 1, summary.base_accuracy, summary.corpus_accuracy))
            log.info("epoch %d base=%.2f corpus=%.2f", epoch + 1, summary.base_accuracy, summary.corpus_accuracy)
            if summary.base_accuracy >= target and summary.corpus_accuracy >= target:
                summary.reached_target = True
                remaining_extra = extra_epochs
                if extra_epochs <= 0:
                    break
    if summary.reached_target:
        summary.base_accuracy, summary.corpus_accuracy = measure()
    if not summary.reached_target and raise_on_failure:
        raise ConvergenceError(
            f"memorization {summary.base_accuracy:.2f}% below target {target}% after {summary.epochs} epochs", summary
        )
    return model, summary
