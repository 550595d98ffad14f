"""Offline evaluation: Recall@K, order density OD@K, their product, and the
preference sweep that traces the model's operating front.

OD@K is the empirical probability that a clicked item was ordered given
the model ranked it within the top K; an empty denominator is an error
("OD undefined"), deliberately distinct from a measured zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import Batch, ModelParams, score_batch
from .sessions import Dataset
from .training import build_examples

_CHUNK = 2048


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class FrontPoint:
    pi_click: float
    pi_order: float
    recall: float
    od: float
    product: float
    n_clicks_evaluated: int


def rank_of_target(scores: np.ndarray, target: int) -> int:
    """Competition rank of the target, ties broken by smaller item id."""
    c = scores.shape[0]
    if target < 0 or target >= c:
        raise MetricsError(f"target {target} outside catalog of size {c}")
    s_t = scores[target]
    greater = int((scores > s_t).sum())
    tied_before = int(((scores == s_t) & (np.arange(c) < target)).sum())
    return 1 + greater + tied_before


def _target_ranks(p: ModelParams, examples: Batch, preference) -> np.ndarray:
    """Vectorized rank_of_target over all evaluation instances."""
    n = len(examples)
    ranks = np.empty(n, dtype=np.int64)
    ids = None
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        scores = score_batch(p, examples.prefixes[lo:hi], examples.lengths[lo:hi], preference)
        if ids is None:
            ids = np.arange(scores.shape[1])
        t = examples.targets[lo:hi]
        s_t = scores[np.arange(hi - lo), t][:, None]
        greater = (scores > s_t).sum(axis=1)
        tied_before = ((scores == s_t) & (ids[None, :] < t[:, None])).sum(axis=1)
        ranks[lo:hi] = 1 + greater + tied_before
    return ranks


def _eval_instances(test_set: Dataset, max_prefix_len: int) -> Batch:
    examples = build_examples(test_set, max_prefix_len)
    if examples is None:
        raise MetricsError("test set has no evaluable next-item instances")
    return examples


def recall_at_k(p: ModelParams, test_set: Dataset, preference, k: int,
                max_prefix_len: int = 20) -> float:
    """Fraction of next-click targets ranked within the top k."""
    examples = _eval_instances(test_set, max_prefix_len)
    ranks = _target_ranks(p, examples, preference)
    return float((ranks <= k).mean())


def order_density_at_k(p: ModelParams, test_set: Dataset, preference, k: int,
                       max_prefix_len: int = 20) -> float:
    """Among targets ranked within top k, the fraction that were ordered."""
    examples = _eval_instances(test_set, max_prefix_len)
    ranks = _target_ranks(p, examples, preference)
    hit = ranks <= k
    if not hit.any():
        raise MetricsError("OD undefined: no clicks ranked within top k")
    return float(examples.orders[hit].mean())


def sweep_front(p: ModelParams, test_set: Dataset, k: int, preferences,
                max_prefix_len: int = 20) -> list[FrontPoint]:
    """One FrontPoint per preference vector, all on identical test instances."""
    if k < 1:
        raise MetricsError("k must be >= 1")
    prefs = [np.asarray(pref, dtype=np.float64) for pref in preferences]
    if len(prefs) < 1:
        raise MetricsError("need at least one preference vector")
    examples = _eval_instances(test_set, max_prefix_len)
    points: list[FrontPoint] = []
    for pref in prefs:
        ranks = _target_ranks(p, examples, pref)
        hit = ranks <= k
        recall = float(hit.mean())
        if not hit.any():
            raise MetricsError(
                f"OD undefined at preference {pref.tolist()}: no clicks ranked within top k")
        od = float(examples.orders[hit].mean())
        points.append(FrontPoint(
            pi_click=float(pref[0]),
            pi_order=float(pref[1]),
            recall=recall,
            od=od,
            product=recall * od,
            n_clicks_evaluated=len(examples),
        ))
    return points


FRONT_HEADER = ["pi_click", "pi_order", "recall_at_k", "od_at_k", "product", "n_clicks"]


def write_front(points: list[FrontPoint], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FRONT_HEADER)
        for pt in points:
            writer.writerow([
                repr(pt.pi_click), repr(pt.pi_order), repr(pt.recall),
                repr(pt.od), repr(pt.product), pt.n_clicks_evaluated,
            ])


def read_front(path: str) -> list[FrontPoint]:
    points = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FRONT_HEADER:
            raise MetricsError(f"{path}: unexpected front table header {reader.fieldnames}")
        for row in reader:
            points.append(FrontPoint(
                pi_click=float(row["pi_click"]),
                pi_order=float(row["pi_order"]),
                recall=float(row["recall_at_k"]),
                od=float(row["od_at_k"]),
                product=float(row["product"]),
                n_clicks_evaluated=int(row["n_clicks"]),
            ))
    if not points:
        raise MetricsError(f"{path}: empty front table")
    return points
