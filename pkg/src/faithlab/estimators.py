"""scikit-learn style wrappers around memorization training and unlearning.

``MemorizingLM`` fits a micro LM to a synthetic world; ``Unlearner`` takes a
fitted model and removes the world's forget split.  Both follow the usual
estimator contract: hyperparameters live in ``__init__``, learned state gets
a trailing underscore, and ``get_params``/``set_params`` come from
``BaseEstimator``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evalkit import EvalReport, classify_superficial, evaluate, memorization_table, predict_ids
from .microlm import ModelConfig, ModelState, candidate_logprobs
from .training import train_memorization
from .unlearn import UnlearnConfig, unlearn_run
from .worldgen import Dataset, QAItem, Vocab, encode_items


def check_dataset(dataset) -> Dataset:
    if not isinstance(dataset, Dataset):
        raise TypeError(f"expected a Dataset, got {type(dataset).__name__}")
    if dataset.vocab is None:
        raise ValueError("dataset has no vocabulary")
    if not dataset.clusters:
        raise ValueError("dataset has no clusters")
    return dataset


def check_items(items, vocab: Vocab) -> list:
    """Items as a list, checked to be QAItems built from ``vocab`` tokens."""
    if isinstance(items, QAItem):
        items = [items]
    items = list(items)
    if not items:
        raise ValueError("no items given")
    for it in items:
        if not isinstance(it, QAItem):
            raise TypeError(f"expected QAItem, got {type(it).__name__}")
        for tok in it.question + (it.answer,) + tuple(it.candidates):
            if tok not in vocab:
                raise ValueError(f"item {it.id}: token {tok!r} not in vocabulary")
    return items


def check_model(model) -> ModelState:
    if not isinstance(model, ModelState):
        raise TypeError(f"expected a ModelState, got {type(model).__name__}")
    return model


def _candidate_probs(model, vocab, items):
    out = np.empty((len(items), max(len(it.candidates) for it in items)))
    out.fill(np.nan)
    by_len = {}
    for i, it in enumerate(items):
        by_len.setdefault((len(it.question), len(it.candidates)), []).append(i)
    for idx in by_len.values():
        enc = encode_items(vocab, [items[i] for i in idx])
        lp = candidate_logprobs(model, enc.ids, enc.candidates)
        p = np.exp(lp - lp.max(axis=1, keepdims=True))
        out[idx, : p.shape[1]] = p / p.sum(axis=1, keepdims=True)
    return out


def _predict(model, vocab, items):
    answers = [None] * len(items)
    by_len = {}
    for i, it in enumerate(items):
        by_len.setdefault(len(it.question), []).append(i)
    for idx in by_len.values():
        pred = predict_ids(model, encode_items(vocab, [items[i] for i in idx]))
        for i, p in zip(idx, pred):
            answers[i] = vocab.tokens[p]
    return np.array(answers, dtype=object)


class MemorizingLM(BaseEstimator):
    """Micro transformer trained until it memorizes a synthetic world."""

    def __init__(self, d_model=64, n_layers=3, n_heads=4, d_ffn=256, dtype="float32", target=95.0,
                 max_epochs=200, lr=3e-3, batch_size=64, extra_epochs=5, seed=0):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ffn = d_ffn
        self.dtype = dtype
        self.target = target
        self.max_epochs = max_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.extra_epochs = extra_epochs
        self.seed = seed

    def fit(self, dataset, y=None, model: ModelState | None = None):
        """Train on every distinct fact of ``dataset``; ``model`` resumes training."""
        dataset = check_dataset(dataset)
        cfg = ModelConfig(vocab_size=len(dataset.vocab), d_model=self.d_model, n_layers=self.n_layers,
                          n_heads=self.n_heads, d_ffn=self.d_ffn, seed=self.seed, dtype=self.dtype)
        if model is not None:
            model = check_model(model).copy()
        self.model_, self.summary_ = train_memorization(
            dataset, model, model_config=cfg, target=self.target, max_epochs=self.max_epochs, lr=self.lr,
            batch_size=self.batch_size, extra_epochs=self.extra_epochs, seed=self.seed)
        self.vocab_ = dataset.vocab
        return self

    def predict(self, items):
        check_is_fitted(self, "model_")
        return _predict(self.model_, self.vocab_, check_items(items, self.vocab_))

    def predict_proba(self, items):
        """Candidate-renormalized answer probabilities, one row per item in candidate order."""
        check_is_fitted(self, "model_")
        return _candidate_probs(self.model_, self.vocab_, check_items(items, self.vocab_))

    def score(self, items, y=None):
        """Fraction of ``items`` memorized."""
        check_is_fitted(self, "model_")
        items = check_items(items, self.vocab_)
        table = memorization_table(self.model_, items, self.vocab_)
        return float(np.mean([table[it.id] for it in items]))


class Unlearner(BaseEstimator):
    """Removes a dataset's forget split from a memorized model.

    ``fit(dataset, model)`` leaves ``model`` untouched and stores the
    unlearned copy in ``model_`` together with ``history_``, the metric
    reports before and after (``baseline_``, ``report_``) and the per-cluster
    ``verdicts_``.
    """

    def __init__(self, method="klue", lr=None, forget_weight=0.7, retain_weight=1.0, batch_size=4,
                 max_epochs=150, ua_stop_threshold=33.34, alpha=10.0, n_mismatch=5, neuron_ratio=0.05,
                 neuron_selection="attribution", regularization=True, localization=True,
                 sample_selection=None, beta_pref=0.1, rmu_c=20.0, rmu_layer=1, rmu_alpha=1.0,
                 momentum=0.0, seed=0):
        self.method = method
        self.lr = lr
        self.forget_weight = forget_weight
        self.retain_weight = retain_weight
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.ua_stop_threshold = ua_stop_threshold
        self.alpha = alpha
        self.n_mismatch = n_mismatch
        self.neuron_ratio = neuron_ratio
        self.neuron_selection = neuron_selection
        self.regularization = regularization
        self.localization = localization
        self.sample_selection = sample_selection
        self.beta_pref = beta_pref
        self.rmu_c = rmu_c
        self.rmu_layer = rmu_layer
        self.rmu_alpha = rmu_alpha
        self.momentum = momentum
        self.seed = seed

    def to_config(self) -> UnlearnConfig:
        return UnlearnConfig(**self.get_params())

    def fit(self, dataset, model):
        dataset = check_dataset(dataset)
        model = model.model_ if isinstance(model, MemorizingLM) else check_model(model)
        cfg = self.to_config()
        self.model_, self.history_ = unlearn_run(model, dataset, cfg)
        self.baseline_ = evaluate(model, dataset)
        self.report_ = evaluate(self.model_, dataset)
        forget_ids = dataset.splits.forget
        self.verdicts_ = classify_superficial(self.baseline_.memorization, self.report_.memorization,
                                              dataset.clusters, forget_ids, dataset.vocab)
        self.vocab_ = dataset.vocab
        return self

    def transform(self, model):
        """The unlearned model (``model`` is only checked for type)."""
        check_is_fitted(self, "model_")
        check_model(model)
        return self.model_

    def predict(self, items):
        check_is_fitted(self, "model_")
        return _predict(self.model_, self.vocab_, check_items(items, self.vocab_))

    def score(self, dataset, y=None) -> float:
        """Total Score of the unlearned model on ``dataset`` (0-100)."""
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_dataset(dataset)).score

    @property
    def superficial_fraction(self):
        check_is_fitted(self, "verdicts_")
        if not self.verdicts_:
            return 0.0
        return sum(v.is_superficial for v in self.verdicts_) / len(self.verdicts_)


__all__ = ["MemorizingLM", "Unlearner", "check_dataset", "check_items", "check_model", "EvalReport"]
