"""Independent brute-force scorer used as an oracle for the metrics module."""

from __future__ import annotations


def expand(counts):
    """Enumerate (actual, predicted) pairs for every cell of a 2x2 matrix."""
    pairs = []
    for actual in (0, 1):
        for pred in (0, 1):
            pairs.extend([(actual, pred)] * counts[actual][pred])
    return pairs


def score(pairs, zero_division=0.0):
    out = {}
    n = len(pairs)
    out["accuracy"] = sum(1 for a, p in pairs if a == p) / n
    for k in (0, 1):
        tp = sum(1 for a, p in pairs if a == k and p == k)
        predicted = sum(1 for _, p in pairs if p == k)
        actual = sum(1 for a, _ in pairs if a == k)
        prec = tp / predicted if predicted else zero_division
        rec = tp / actual if actual else zero_division
        out[f"precision_{k}"] = prec
        out[f"recall_{k}"] = rec
        out[f"f1_{k}"] = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    for m in ("precision", "recall", "f1"):
        out[f"macro_{m}"] = (out[f"{m}_0"] + out[f"{m}_1"]) / 2
    return out
