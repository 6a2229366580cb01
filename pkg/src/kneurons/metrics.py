"""Caption comparison metrics: BLEU, ROUGE-N/L and an embedding-match F1.

``embed_match_f1`` greedily matches token embeddings by cosine similarity.
It is a lightweight stand-in for contextual-encoder scores and is reported
under its own name.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import _kernels

BLEU_EPS = 1e-9


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Sequence, references: Sequence[Sequence], max_n: int = 4) -> float:
    """Sentence BLEU with clipped n-gram precisions and brevity penalty.

    Orders longer than the candidate are left out of the geometric mean;
    an order with no clipped matches contributes ``BLEU_EPS``.
    """
    cand = list(candidate)
    refs = [list(r) for r in references]
    if not cand or not refs:
        return 0.0
    logs = []
    for n in range(1, min(max_n, len(cand)) + 1):
        c_counts = _ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, k in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], k)
        clipped = sum(min(k, max_ref[g]) for g, k in c_counts.items())
        total = sum(c_counts.values())
        p = clipped / total if clipped else BLEU_EPS
        logs.append(math.log(p))
    c = len(cand)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(sum(logs) / len(logs))


def _prf(overlap: float, n_cand: int, n_ref: int) -> tuple[float, float, float]:
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def rouge(candidate: Sequence, reference: Sequence, variant: str = "N1") -> tuple[float, float, float]:
    """(precision, recall, F1) for ROUGE-1 ("N1"), ROUGE-2 ("N2") or ROUGE-L ("L")."""
    cand, ref = list(candidate), list(reference)
    if variant == "L":
        if not cand or not ref:
            return 0.0, 0.0, 0.0
        vocab = {t: i for i, t in enumerate(dict.fromkeys(cand + ref))}
        a = np.array([vocab[t] for t in cand], dtype=np.int64)
        b = np.array([vocab[t] for t in ref], dtype=np.int64)
        return _prf(int(_kernels.lcs_length(a, b)), len(cand), len(ref))
    if variant not in ("N1", "N2"):
        raise ValueError(f"unknown ROUGE variant {variant!r}")
    n = int(variant[1])
    c, r = _ngrams(cand, n), _ngrams(ref, n)
    overlap = sum(min(k, r[g]) for g, k in c.items())
    return _prf(overlap, sum(c.values()), sum(r.values()))


def embed_match_f1(candidate: Sequence[int], reference: Sequence[int], E: np.ndarray) -> float:
    """Greedy cosine matching F1 between token embedding rows of ``E``."""
    cand, ref = list(candidate), list(reference)
    if not cand or not ref:
        return 0.0
    E = np.asarray(E, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1)
    A, B = E[cand], E[ref]
    denom = np.outer(norms[cand], norms[ref])
    sim = np.divide(A @ B.T, denom, out=np.zeros_like(denom), where=denom > 0)
    sim = np.clip(sim, 0.0, 1.0)
    same = np.equal.outer(np.array(cand), np.array(ref))
    sim[same] = 1.0
    p = float(sim.max(axis=1).mean())
    r = float(sim.max(axis=0).mean())
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class MetricReport:
    bleu: float
    rouge1_p: float
    rouge1_r: float
    rouge1_f: float
    rougeL_p: float
    rougeL_r: float
    rougeL_f: float
    embed_f1: float

    def as_dict(self) -> dict:
        return asdict(self)


def compare(candidate: Sequence[int], reference: Sequence[int], E: np.ndarray) -> MetricReport:
    r1 = rouge(candidate, reference, "N1")
    rl = rouge(candidate, reference, "L")
    return MetricReport(bleu(candidate, [reference]), *r1, *rl,
                        embed_match_f1(candidate, reference, E))


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("no reports to average")
    keys = list(asdict(reports[0]))
    return MetricReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})
