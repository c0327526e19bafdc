"""Caption quality metrics: corpus BLEU, ROUGE-L, CIDEr, plus the synthetic
world's oracle metrics (attribute accuracy, style marker rate).

Candidates and references are tokenized with the same closed grammar
tokenizer used for generation, lowercased; metrics operate on word
sequences. CIDEr here is the plain tf-idf cosine variant (not the
penalized CIDEr-D), with idf document frequency counted per candidate
entry over its reference set, averaged over n = 1..4 and scaled by 10.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .world import Caption, Grammar, attributes_of, contains_style_marker, normalize

METRIC_NAMES = ("bleu1", "bleu4", "rouge_l", "cider",
                "attribute_accuracy", "style_marker_rate")


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReport:
    scores: dict[str, float]
    per_sample: dict = field(default_factory=dict)
    config_fingerprint: str = ""

    def __post_init__(self):
        missing = [m for m in METRIC_NAMES if m not in self.scores]
        if missing:
            raise MetricsError(f"report is missing metrics: {missing}")
        for name in ("bleu1", "bleu4", "rouge_l", "attribute_accuracy",
                     "style_marker_rate"):
            v = self.scores[name]
            if not (0.0 <= v <= 1.0 + 1e-9):
                raise MetricsError(f"{name}={v} outside [0, 1]")
        if self.scores["cider"] < 0:
            raise MetricsError(f"cider={self.scores['cider']} negative")

    def __getitem__(self, name):
        return self.scores[name]


def _words(entry, grammar: Grammar) -> tuple[str, ...]:
    if isinstance(entry, Caption):
        return tuple(normalize(entry.text).split())
    if isinstance(entry, str):
        return tuple(normalize(entry).split())
    return tuple(grammar.vocab.detokenize(entry).split())


def _ngram_counts(words, n) -> Counter:
    return Counter(tuple(words[i: i + n]) for i in range(len(words) - n + 1))


def _bleu(cands, refs_list, max_n):
    matched = np.zeros(max_n)
    attempted = np.zeros(max_n)
    cand_len = 0
    eff_ref_len = 0
    for cand, refs in zip(cands, refs_list):
        cand_len += len(cand)
        eff_ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            cc = _ngram_counts(cand, n)
            if not cc:
                continue
            cap = Counter()
            for r in refs:
                rc = _ngram_counts(r, n)
                for g in cc:
                    cap[g] = max(cap[g], rc.get(g, 0))
            matched[n - 1] += sum(min(c, cap[g]) for g, c in cc.items())
            attempted[n - 1] += sum(cc.values())
    if (attempted == 0).any() or (matched == 0).any():
        return 0.0
    precision = (np.log(matched) - np.log(attempted)).mean()
    bp = 1.0 if cand_len > eff_ref_len else math.exp(1.0 - eff_ref_len / max(cand_len, 1))
    return float(bp * math.exp(precision))


def _lcs(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def _rouge_l(cand, refs, beta=1.2):
    precs, recs = [], []
    for r in refs:
        lcs = _lcs(cand, r)
        precs.append(lcs / len(cand) if cand else 0.0)
        recs.append(lcs / len(r) if r else 0.0)
    p, r = max(precs), max(recs)
    if p + r == 0:
        return 0.0
    return ((1 + beta * beta) * p * r) / (r + beta * beta * p)


class _CiderScorer:
    """tf-idf n-gram cosine consensus over the evaluation reference corpus."""

    def __init__(self, refs_list, max_n=4):
        self.max_n = max_n
        self.n_docs = len(refs_list)
        self.doc_freq = [Counter() for _ in range(max_n)]
        self.ref_vecs = []
        for refs in refs_list:
            per_ref = [[_ngram_counts(r, n) for n in range(1, max_n + 1)] for r in refs]
            self.ref_vecs.append(per_ref)
            for n in range(max_n):
                grams = set()
                for counts in per_ref:
                    grams.update(counts[n])
                for g in grams:
                    self.doc_freq[n][g] += 1
        self.log_docs = math.log(self.n_docs) if self.n_docs else 0.0

    def _tfidf(self, counts, n):
        vec = {g: c * (self.log_docs - math.log(max(self.doc_freq[n][g], 1.0)))
               for g, c in counts.items()}
        norm = math.sqrt(sum(v * v for v in vec.values()))
        return vec, norm

    def score(self, idx, cand_words) -> float:
        per_n = []
        for n in range(self.max_n):
            cv, cn = self._tfidf(_ngram_counts(cand_words, n + 1), n)
            sims = []
            for ref_counts in self.ref_vecs[idx]:
                rv, rn = self._tfidf(ref_counts[n], n)
                if cn == 0 or rn == 0:
                    sims.append(0.0)
                    continue
                dot = sum(v * rv[g] for g, v in cv.items() if g in rv)
                sims.append(dot / (cn * rn))
            per_n.append(float(np.mean(sims)))
        return 10.0 * float(np.mean(per_n))


def compute_metrics(candidates: dict, references: dict, grammar: Grammar,
                    expected_attributes: dict | None = None,
                    config_fingerprint: str = "") -> MetricsReport:
    """Score candidate captions against per-id reference sets.

    candidates: id -> caption (Caption | str | token ids). references:
    id -> list of captions. Attribute accuracy compares each candidate's
    parsed attributes against expected_attributes[id] when given,
    otherwise against the attributes asserted by the id's first
    reference.
    """
    missing = [k for k in candidates if not references.get(k)]
    if missing:
        raise MetricsError(f"missing references for ids: {sorted(missing)[:10]}")
    ids = sorted(candidates)
    cands = [_words(candidates[k], grammar) for k in ids]
    refs_list = [[_words(r, grammar) for r in references[k]] for k in ids]

    cider = _CiderScorer(refs_list)
    per_sample = {}
    attr_hits, marker_hits = [], []
    rouge_scores, cider_scores = [], []
    for i, k in enumerate(ids):
        cand_text = " ".join(cands[i])
        if expected_attributes is not None:
            want = expected_attributes[k]
        else:
            want = attributes_of(" ".join(refs_list[i][0]), grammar)
        got = attributes_of(cand_text, grammar)
        attr_ok = got is not None and want is not None and got == want
        marker = contains_style_marker(cand_text)
        rl = _rouge_l(cands[i], refs_list[i])
        cd = cider.score(i, cands[i])
        attr_hits.append(attr_ok)
        marker_hits.append(marker)
        rouge_scores.append(rl)
        cider_scores.append(cd)
        per_sample[k] = {"text": cand_text, "rouge_l": rl, "cider": cd,
                         "attributes_match": attr_ok, "style_marker": marker}

    scores = {
        "bleu1": _bleu(cands, refs_list, 1),
        "bleu4": _bleu(cands, refs_list, 4),
        "rouge_l": float(np.mean(rouge_scores)),
        "cider": float(np.mean(cider_scores)),
        "attribute_accuracy": float(np.mean(attr_hits)),
        "style_marker_rate": float(np.mean(marker_hits)),
    }
    return MetricsReport(scores=scores, per_sample=per_sample,
                         config_fingerprint=config_fingerprint)
