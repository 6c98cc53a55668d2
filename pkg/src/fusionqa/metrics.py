"""Answer and retrieval metrics.

Answer normalization follows the standard extractive-QA convention:
lowercase, strip punctuation and articles, collapse whitespace.
"""

from __future__ import annotations

import re
import string
from collections import Counter


def normalize_answer(s: str) -> str:
    """Lower text and remove punctuation, articles, and extra whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in string.punctuation)
    s = re.sub(r"\b(a|an|the)\b", " ", s)
    return " ".join(s.split())


def metric_em(pred: str, golds) -> int:
    """1 iff the normalized prediction equals any normalized gold answer."""
    norm = normalize_answer(pred)
    return int(any(norm == normalize_answer(g) for g in golds))


def _f1_single(pred: str, gold: str) -> float:
    pred_tokens = normalize_answer(pred).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    n_same = sum(common.values())
    if n_same == 0:
        return 0.0
    precision = n_same / len(pred_tokens)
    recall = n_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def metric_f1(pred: str, golds) -> float:
    """Max token-multiset F1 over the gold answers."""
    return max(_f1_single(pred, g) for g in golds)


def metric_retr_f1(selected_ids, gold_ids) -> float:
    """Set F1 between retrieved and gold supporting document ids."""
    gold = set(gold_ids)
    if not gold:
        raise ValueError("metric_retr_f1: gold supporting set is empty")
    sel = set(selected_ids)
    if not sel:
        return 0.0
    overlap = len(sel & gold)
    if overlap == 0:
        return 0.0
    precision = overlap / len(sel)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)
