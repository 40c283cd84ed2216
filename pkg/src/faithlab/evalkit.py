"""Knowledge memorization, faithfulness metrics and superficial-unlearning verdicts.

All metrics are accuracies on a 0-100 scale:

=========  ==========================================================
UA         forget-cluster base questions
UA_ext     forget-cluster paraphrases
TA         test-cluster base questions
SA         same-answer questions of forget and test clusters (per item)
MA_f/MA_t  multi-hop questions of forget / test clusters
MA         ((100 - MA_f) + MA_t) / 2
Score      mean of (100 - UA_ext), TA, SA, MA
=========  ==========================================================
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .microlm import ModelState, candidate_logprobs
from .worldgen import Dataset, QAItem, Vocab, encode_items

SCORE_COLUMNS = ("method", "UA", "UA_ext", "TA", "SA", "MA_f", "MA_t", "MA", "Score")


class MetricError(ValueError):
    pass


def _choose(candidates, logprobs):
    """Argmax over candidates; exact ties go to the lowest token id."""
    best = logprobs.max(axis=1, keepdims=True)
    tied = np.where(logprobs == best, candidates, np.iinfo(np.int64).max)
    return tied.min(axis=1)


def predict_ids(model: ModelState, encoded, batch_size: int = 1024) -> np.ndarray:
    out = []
    for i in range(0, len(encoded), batch_size):
        enc = encoded.subset(slice(i, i + batch_size))
        out.append(_choose(enc.candidates, candidate_logprobs(model, enc.ids, enc.candidates)))
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def memorization(model: ModelState, item: QAItem, vocab: Vocab) -> int:
    """1 when the candidate-restricted argmax is the gold answer, else 0."""
    enc = encode_items(vocab, [item])
    return int(predict_ids(model, enc)[0] == enc.answers[0])


def memorization_table(model: ModelState, items, vocab: Vocab) -> dict:
    """``item.id -> 0/1`` for many items, grouped by question length."""
    items = list(items)
    by_len: dict = {}
    for it in items:
        by_len.setdefault(len(it.question), []).append(it)
    table = {}
    for group in by_len.values():
        enc = encode_items(vocab, group)
        hits = predict_ids(model, enc) == enc.answers
        table.update((it.id, int(h)) for it, h in zip(group, hits))
    return {it.id: table[it.id] for it in items}


def accuracy(table: dict, items) -> float | None:
    items = list(items)
    if not items:
        return None
    return 100.0 * sum(table[it.id] for it in items) / len(items)


@dataclass
class SuperficialVerdict:
    cluster_id: str
    condition1_hits: list = field(default_factory=list)
    condition2_hits: list = field(default_factory=list)

    @property
    def is_superficial(self):
        return bool(self.condition1_hits or self.condition2_hits)

    def to_record(self):
        return {"record": "verdict", "cluster_id": self.cluster_id, "condition1_hits": list(self.condition1_hits),
                "condition2_hits": list(self.condition2_hits), "is_superficial": self.is_superficial}


@dataclass
class EvalReport:
    ua: float | None
    ua_ext: float | None
    ta: float | None
    sa: float | None
    ma_f: float | None
    ma_t: float | None
    ma: float | None
    score: float | None
    sa_f: float | None = None
    sa_t: float | None = None
    memorization: dict = field(default_factory=dict, repr=False)

    def row(self, method=""):
        return {"method": method, "UA": self.ua, "UA_ext": self.ua_ext, "TA": self.ta, "SA": self.sa,
                "MA_f": self.ma_f, "MA_t": self.ma_t, "MA": self.ma, "Score": self.score}

    def to_record(self, method=""):
        rec = {"record": "report", "method": method}
        rec.update({k: v for k, v in asdict(self).items()})
        return rec


def combine_ma(ma_f, ma_t):
    return ((100.0 - ma_f) + ma_t) / 2.0


def total_score(ua_ext, ta, sa, ma):
    return ((100.0 - ua_ext) + ta + sa + ma) / 4.0


def report_from_table(table: dict, dataset: Dataset, require_score: bool = True) -> EvalReport:
    forget, test = dataset.split_clusters("forget"), dataset.split_clusters("test")
    ua = accuracy(table, [c.base for c in forget])
    ua_ext = accuracy(table, [p for c in forget for p in c.paraphrases])
    ta = accuracy(table, [c.base for c in test])
    sa_items_f = [s for c in forget for s in c.same_answers]
    sa_items_t = [s for c in test for s in c.same_answers]
    sa = accuracy(table, sa_items_f + sa_items_t)
    ma_f = accuracy(table, [m for c in forget for m in c.multihops])
    ma_t = accuracy(table, [m for c in test for m in c.multihops])
    ma = None if ma_f is None or ma_t is None else combine_ma(ma_f, ma_t)
    parts = (ua_ext, ta, sa, ma)
    if any(p is None for p in parts):
        if require_score:
            raise MetricError("score undefined: an evaluation split is empty")
        score = None
    else:
        score = total_score(*parts)
    return EvalReport(ua, ua_ext, ta, sa, ma_f, ma_t, ma, score,
                      accuracy(table, sa_items_f), accuracy(table, sa_items_t), dict(table))


def evaluation_items(dataset: Dataset):
    """Every item that enters some metric (retain clusters and test paraphrases excluded)."""
    out = []
    for c in dataset.split_clusters("forget"):
        out.extend(c.items())
    for c in dataset.split_clusters("test"):
        out.extend((c.base,) + c.multihops + c.same_answers)
    return out


def evaluate(model: ModelState, dataset: Dataset, require_score: bool = True) -> EvalReport:
    table = memorization_table(model, evaluation_items(dataset), dataset.vocab)
    return report_from_table(table, dataset, require_score)


def metric_suite(model_before: ModelState, model_after: ModelState, dataset: Dataset):
    """Report for ``model_after`` plus the pre-unlearning baseline report.

    Returns ``(after, before)``.
    """
    before = evaluate(model_before, dataset)
    after = before if model_after is model_before else evaluate(model_after, dataset)
    return after, before


def _as_table(model_or_table, items, vocab):
    if isinstance(model_or_table, dict):
        return model_or_table
    return memorization_table(model_or_table, items, vocab)


def classify_superficial(model_before, model_after, clusters, forget_ids, vocab: Vocab | None = None,
                         include_paraphrases: bool = False) -> list:
    """Per forget cluster, the items that make the unlearning superficial.

    Condition 1: an item sharing knowledge with the forget set is still
    memorized.  Condition 2: an item with disjoint knowledge was forgotten.
    Only items memorized before unlearning are considered.  Either model may
    be given as a precomputed ``item.id -> 0/1`` table.
    """
    by_id = {c.id: c for c in clusters}
    forget = [by_id[cid] for cid in forget_ids]
    kappa_f = frozenset().union(*(c.base.knowledge for c in forget)) if forget else frozenset()
    pool = []
    for c in forget:
        pool.extend((c.paraphrases if include_paraphrases else ()) + c.multihops + c.same_answers)
    before = _as_table(model_before, pool, vocab)
    after = _as_table(model_after, pool, vocab)

    verdicts = []
    for c in forget:
        v = SuperficialVerdict(c.id)
        for it in (c.paraphrases if include_paraphrases else ()) + c.multihops + c.same_answers:
            if before[it.id] != 1:
                continue
            if it.knowledge & kappa_f:
                if after[it.id] == 1:
                    v.condition1_hits.append(it.id)
            elif after[it.id] == 0:
                v.condition2_hits.append(it.id)
        verdicts.append(v)
    return verdicts


# -- report files ----------------------------------------------------------------
def _fmt(x):
    return "" if x is None else f"{x:.2f}"


def write_score_table(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for row in rows:
            w.writerow([row.get("method", "")] + [_fmt(row.get(c)) for c in SCORE_COLUMNS[1:]])


def emit_report(report: EvalReport, verdicts, path, method: str = "", baseline: EvalReport | None = None):
    """Write ``path`` (JSON lines, full precision), ``<stem>.csv`` (2-decimal
    score table) and ``<stem>_verdicts.csv``.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(report.to_record(method), sort_keys=True) + "\n")
            if baseline is not None:
                rec = baseline.to_record("default")
                rec["record"] = "baseline"
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            for v in verdicts:
                fh.write(json.dumps(v.to_record(), sort_keys=True) + "\n")
        rows = ([baseline.row("default")] if baseline is not None else []) + [report.row(method)]
        write_score_table(rows, path.with_suffix(".csv"))
        with open(path.with_name(path.stem + "_verdicts.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("cluster_id", "is_superficial", "n_condition1", "n_condition2"))
            for v in verdicts:
                w.writerow((v.cluster_id, int(v.is_superficial), len(v.condition1_hits), len(v.condition2_hits)))
    except OSError as exc:
        raise MetricError(f"cannot write report to {path}: {exc}") from exc


def read_report(path):
    """Inverse of :func:`emit_report`: ``(report, verdicts, method, baseline)``."""
    report = baseline = None
    method = ""
    verdicts = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            kind = rec.pop("record")
            if kind in ("report", "baseline"):
                m = rec.pop("method")
                r = EvalReport(**rec)
                if kind == "report":
                    report, method = r, m
                else:
                    baseline = r
            elif kind == "verdict":
                rec.pop("is_superficial")
                verdicts.append(SuperficialVerdict(**rec))
    return report, verdicts, method, baseline


def check_identities(report: EvalReport, tol: float = 1e-9) -> bool:
    """MA and Score arithmetic identities, plus the 0-100 range."""
    vals = [report.ua, report.ua_ext, report.ta, report.sa, report.ma_f, report.ma_t, report.ma, report.score]
    if any(v is not None and not (0.0 <= v <= 100.0) for v in vals):
        return False
    if report.ma is not None and not math.isclose(report.ma, combine_ma(report.ma_f, report.ma_t), abs_tol=tol):
        return False
    if report.score is not None and not math.isclose(
        report.score, total_score(report.ua_ext, report.ta, report.sa, report.ma), abs_tol=tol
    ):
        return False
    return True
