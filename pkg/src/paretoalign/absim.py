"""Simulated online experiment.

Traffic is split into groups by salted hashing of user ids; every group is
served by the same model conditioned on that group's preference vector.
Impression outcomes (click, order, units) come from the ground-truth
world: a position-discounted click probability driven by the affinity of
shown items to the user's context, and per-item order propensities.

The position model's bias term is calibrated on a pilot run so overall
CTR lands near a configurable target; the same bias is shared by all
groups, so group differences reflect only serving quality.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .model import ModelParams, score_batch
from .world import World, markov_walk

logger = logging.getLogger(__name__)

_CHUNK = 8192
_U64 = np.uint64


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class GroupAssignment:
    n_groups: int
    salt: int
    shares: tuple[float, ...]

    def __post_init__(self):
        if self.n_groups < 1 or len(self.shares) != self.n_groups:
            raise SimError("shares must have one entry per group")
        if any(s < 0 for s in self.shares):
            raise SimError("shares must be non-negative")
        if abs(sum(self.shares) - 1.0) > 1e-9:
            raise SimError(f"shares sum to {sum(self.shares)}, expected 1")

    @classmethod
    def uniform(cls, n_groups: int, salt: int) -> "GroupAssignment":
        return cls(n_groups=n_groups, salt=salt, shares=tuple([1.0 / n_groups] * n_groups))


@dataclass(frozen=True)
class Impression:
    impression_id: int
    user_id: int
    group: int
    pi_click: float
    pi_order: float
    clicked: int
    ordered: int
    units: int


@dataclass(frozen=True)
class GroupKpis:
    group: int
    n: int
    ctr: float
    cvr: Optional[float]  # None when the group saw no clicks
    units_total: int


class ImpressionLog:
    """Array-backed impression log; iterates as Impression records."""

    def __init__(self, impression_ids, user_ids, groups, group_prefs, clicked, ordered, units):
        self.impression_ids = np.asarray(impression_ids, dtype=np.int64)
        self.user_ids = np.asarray(user_ids, dtype=np.int64)
        self.groups = np.asarray(groups, dtype=np.int64)
        self.group_prefs = np.asarray(group_prefs, dtype=np.float64)
        self.clicked = np.asarray(clicked, dtype=np.int64)
        self.ordered = np.asarray(ordered, dtype=np.int64)
        self.units = np.asarray(units, dtype=np.int64)
        if np.any(self.ordered > self.clicked):
            raise SimError("impression log violates ordered => clicked")
        if np.any((self.units >= 1) & (self.ordered == 0)):
            raise SimError("impression log violates units => ordered")

    def __len__(self) -> int:
        return len(self.impression_ids)

    def __iter__(self) -> Iterator[Impression]:
        for i in range(len(self)):
            g = int(self.groups[i])
            yield Impression(
                impression_id=int(self.impression_ids[i]),
                user_id=int(self.user_ids[i]),
                group=g,
                pi_click=float(self.group_prefs[g, 0]),
                pi_order=float(self.group_prefs[g, 1]),
                clicked=int(self.clicked[i]),
                ordered=int(self.ordered[i]),
                units=int(self.units[i]),
            )


# ---------------------------------------------------------------------------
# traffic splitting

def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + _U64(0x9E3779B97F4A7C15)).astype(_U64)
    x = (x ^ (x >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> _U64(27))) * _U64(0x94D049BB133111EB)
    return x ^ (x >> _U64(31))


def assign_groups(user_ids, ga: GroupAssignment) -> np.ndarray:
    """Stable hash bucket per user under the cumulative share boundaries."""
    uids = np.atleast_1d(np.asarray(user_ids)).astype(_U64)
    salt_mix = _splitmix64(np.array([ga.salt], dtype=_U64))[0]
    h = _splitmix64(uids ^ salt_mix)
    u = h.astype(np.float64) * 2.0**-64
    cum = np.cumsum(ga.shares)
    idx = np.searchsorted(cum, u, side="right")
    return np.minimum(idx, ga.n_groups - 1).astype(np.int64)


def assign_group(user_id: int, ga: GroupAssignment) -> int:
    return int(assign_groups(np.array([user_id]), ga)[0])


# ---------------------------------------------------------------------------
# serving

def topk_reference(scores: np.ndarray, k: int) -> np.ndarray:
    """Full-sort oracle: top-k by score, ties to the smaller item id."""
    c = scores.shape[-1]
    k = min(k, c)
    if scores.ndim == 1:
        order = np.lexsort((np.arange(c), -scores))
        return order[:k]
    return np.stack([topk_reference(row, k) for row in scores])


def topk_batch(scores: np.ndarray, k: int) -> np.ndarray:
    """Fast batched top-k with the same tie rule as topk_reference.

    argpartition preselects k+pad candidates; rows where a boundary tie
    group straddles the candidate cut fall back to the exact sort.
    """
    n, c = scores.shape
    k = min(k, c)
    if k == c:
        return topk_reference(scores, k)
    pad = min(c, k + 8)
    part = np.argpartition(-scores, pad - 1, axis=1)[:, :pad]
    part = np.sort(part, axis=1)  # ascending ids so a stable sort breaks ties by id
    cand_scores = np.take_along_axis(scores, part, axis=1)
    order = np.argsort(-cand_scores, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(part, order, axis=1)
    kth_score = np.take_along_axis(scores, top[:, -1:], axis=1)
    full_eq = (scores == kth_score).sum(axis=1)
    cand_eq = (cand_scores == kth_score).sum(axis=1)
    for row in np.flatnonzero(full_eq > cand_eq):
        top[row] = topk_reference(scores[row], k)
    return top


def serve(p: ModelParams, preference, prefix, k: int, max_prefix_len: int = 20) -> list[int]:
    """Top-k recommendation for one session prefix at one preference."""
    prefix = list(prefix)
    if not prefix:
        raise SimError("empty session prefix")
    arr = np.asarray(prefix[-max_prefix_len:], dtype=np.int64)[None, :]
    lengths = np.array([len(arr[0])], dtype=np.int64)
    scores = score_batch(p, arr, lengths, preference)[0]
    return [int(i) for i in topk_reference(scores, k)]


# ---------------------------------------------------------------------------
# user behavior

def position_weights(k: int, exponent: float = 1.0) -> np.ndarray:
    ranks = np.arange(1, k + 1, dtype=np.float64)
    return 1.0 / np.log2(ranks + 1.0) ** exponent


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def simulate_impression(world: World, shown, context_item: int, rng: np.random.Generator,
                        click_scale: float = 1.0, click_bias: float = 0.0,
                        position_exponent: float = 1.0):
    """Outcome of one impression: first-success click scan down the ranked
    list, then an order draw from the clicked item's propensity.

    Returns (clicked, ordered, units, clicked_item or None).
    """
    shown = np.asarray(shown, dtype=np.int64)
    if shown.size == 0:
        raise SimError("impression with empty recommendation list")
    aff = world.latents[shown] @ world.latents[context_item]
    probs = _sigmoid(click_scale * aff + click_bias) * position_weights(len(shown), position_exponent)
    u = rng.random(len(shown))
    hits = u < probs
    if not hits.any():
        return 0, 0, 0, None
    slot = int(np.argmax(hits))
    item = int(shown[slot])
    ordered = int(rng.random() < world.convert[item])
    return 1, ordered, ordered, item


# ---------------------------------------------------------------------------
# experiment engine

def _draw_context_lengths(n: int, mean_len: float, max_len: int, rng) -> np.ndarray:
    lengths = rng.geometric(p=1.0 / max(mean_len, 1.0), size=n)
    return np.clip(lengths, 1, max_len)


def _gen_contexts(world: World, n: int, rng, mean_len: float, max_len: int):
    """Fresh serving contexts drawn from the world's session process."""
    lengths = _draw_context_lengths(n, mean_len, max_len, rng)
    p_start = world.attract / world.attract.sum()
    starts = rng.choice(world.catalog_size, size=n, p=p_start)
    items = markov_walk(world, starts, lengths, rng)
    last = items[np.arange(n), lengths - 1]
    return items, lengths, last


def _serve_grouped(p: ModelParams, prefixes, lengths, groups, group_prefs, k: int,
                   override_pref=None) -> np.ndarray:
    n = len(lengths)
    shown = np.empty((n, k), dtype=np.int64)
    if override_pref is not None:
        scores = score_batch(p, prefixes, lengths, override_pref)
        return topk_batch(scores, k)
    for g in range(group_prefs.shape[0]):
        rows = np.flatnonzero(groups == g)
        if len(rows) == 0:
            continue
        scores = score_batch(p, prefixes[rows], lengths[rows], group_prefs[g])
        shown[rows] = topk_batch(scores, k)
    return shown


def _impression_ctr(aff: np.ndarray, click_scale: float, bias: float,
                    pos: np.ndarray) -> float:
    probs = _sigmoid(click_scale * aff + bias) * pos[None, :]
    return float((1.0 - np.prod(1.0 - probs, axis=1)).mean())


def calibrate_click_bias(world: World, p: ModelParams, group_prefs: np.ndarray,
                         ga: GroupAssignment, k: int, seed: int,
                         click_scale: float = 1.0, target_ctr: float = 0.05,
                         n_pilot: int = 4000, position_exponent: float = 1.0,
                         mean_context_len: float = 5.0, max_context_len: int = 12,
                         override_pref=None) -> tuple[float, float]:
    """Bisect the click bias so pilot CTR hits the target; returns (bias, pilot_ctr)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    user_ids = rng.integers(0, 2**53, size=n_pilot)
    groups = assign_groups(user_ids, ga)
    prefixes, lengths, last = _gen_contexts(world, n_pilot, rng, mean_context_len, max_context_len)
    shown = _serve_grouped(p, prefixes, lengths, groups, group_prefs, k, override_pref)
    aff = np.einsum("nkd,nd->nk", world.latents[shown], world.latents[last])
    pos = position_weights(k, position_exponent)
    lo, hi = -30.0, 10.0
    if _impression_ctr(aff, click_scale, hi, pos) < target_ctr:
        return hi, _impression_ctr(aff, click_scale, hi, pos)
    if _impression_ctr(aff, click_scale, lo, pos) > target_ctr:
        return lo, _impression_ctr(aff, click_scale, lo, pos)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _impression_ctr(aff, click_scale, mid, pos) < target_ctr:
            lo = mid
        else:
            hi = mid
    bias = 0.5 * (lo + hi)
    return bias, _impression_ctr(aff, click_scale, bias, pos)


def simulate_experiment(world: World, p: ModelParams, group_prefs, ga: GroupAssignment,
                        n_impressions: int, seed: int, k: int = 20,
                        click_scale: float = 1.0, click_bias: Optional[float] = None,
                        target_ctr: float = 0.05, pilot_impressions: int = 4000,
                        position_exponent: float = 1.0, mean_context_len: float = 5.0,
                        max_context_len: int = 12,
                        override_pref=None) -> tuple[ImpressionLog, dict]:
    """Run the full simulated experiment; deterministic given the seed.

    ``override_pref`` serves every group with one fixed preference (A/A
    mode) while group labels and logged preferences stay as configured.
    """
    group_prefs = np.asarray(group_prefs, dtype=np.float64)
    if group_prefs.shape[0] != ga.n_groups:
        raise SimError("one preference vector per group required")
    if n_impressions < 1:
        raise SimError("n_impressions must be >= 1")
    pilot_ctr = None
    if click_bias is None:
        click_bias, pilot_ctr = calibrate_click_bias(
            world, p, group_prefs, ga, k, seed, click_scale=click_scale,
            target_ctr=target_ctr, n_pilot=pilot_impressions,
            position_exponent=position_exponent, mean_context_len=mean_context_len,
            max_context_len=max_context_len, override_pref=override_pref)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    pos = position_weights(k, position_exponent)
    user_ids = np.empty(n_impressions, dtype=np.int64)
    groups = np.empty(n_impressions, dtype=np.int64)
    clicked = np.zeros(n_impressions, dtype=np.int64)
    ordered = np.zeros(n_impressions, dtype=np.int64)
    for lo in range(0, n_impressions, _CHUNK):
        hi = min(lo + _CHUNK, n_impressions)
        b = hi - lo
        uids = rng.integers(0, 2**53, size=b)
        grp = assign_groups(uids, ga)
        prefixes, lengths, last = _gen_contexts(world, b, rng, mean_context_len, max_context_len)
        shown = _serve_grouped(p, prefixes, lengths, grp, group_prefs, k, override_pref)
        aff = np.einsum("nkd,nd->nk", world.latents[shown], world.latents[last])
        probs = _sigmoid(click_scale * aff + click_bias) * pos[None, :]
        u_click = rng.random((b, k))
        hits = u_click < probs
        any_click = hits.any(axis=1)
        first = np.argmax(hits, axis=1)
        clicked_items = shown[np.arange(b), first]
        u_order = rng.random(b)
        did_order = any_click & (u_order < world.convert[clicked_items])
        user_ids[lo:hi] = uids
        groups[lo:hi] = grp
        clicked[lo:hi] = any_click.astype(np.int64)
        ordered[lo:hi] = did_order.astype(np.int64)
    log = ImpressionLog(
        impression_ids=np.arange(n_impressions, dtype=np.int64),
        user_ids=user_ids,
        groups=groups,
        group_prefs=group_prefs,
        clicked=clicked,
        ordered=ordered,
        units=ordered.copy(),
    )
    meta = {
        "click_bias": float(click_bias),
        "click_scale": float(click_scale),
        "pilot_ctr": None if pilot_ctr is None else float(pilot_ctr),
        "n_impressions": int(n_impressions),
        "aa_mode": override_pref is not None,
    }
    return log, meta


def aggregate_kpis(log: ImpressionLog) -> list[GroupKpis]:
    """Per-group CTR, post-click CVR, and units; empty groups are omitted."""
    if len(log) == 0:
        raise SimError("empty impression log")
    kpis = []
    for g in range(log.group_prefs.shape[0]):
        mask = log.groups == g
        n = int(mask.sum())
        if n == 0:
            logger.warning("group %d has no impressions; omitted from KPIs", g)
            continue
        clicks = int(log.clicked[mask].sum())
        orders = int(log.ordered[mask].sum())
        kpis.append(GroupKpis(
            group=g,
            n=n,
            ctr=clicks / n,
            cvr=(orders / clicks) if clicks > 0 else None,
            units_total=int(log.units[mask].sum()),
        ))
    return kpis


# ---------------------------------------------------------------------------
# impression log file format

IMPRESSIONS_HEADER = ["impression_id", "user_id", "group", "pi_click", "pi_order",
                      "clicked", "ordered", "units"]


def write_impressions(log: ImpressionLog, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(IMPRESSIONS_HEADER) + "\n")
        pi_strs = [(repr(float(pc)), repr(float(po))) for pc, po in log.group_prefs]
        rows = []
        for i in range(len(log)):
            g = log.groups[i]
            rows.append(f"{log.impression_ids[i]},{log.user_ids[i]},{g},"
                        f"{pi_strs[g][0]},{pi_strs[g][1]},"
                        f"{log.clicked[i]},{log.ordered[i]},{log.units[i]}")
            if len(rows) >= 65536:
                fh.write("\n".join(rows) + "\n")
                rows = []
        if rows:
            fh.write("\n".join(rows) + "\n")


def read_impressions(path: str) -> ImpressionLog:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != IMPRESSIONS_HEADER:
            raise SimError(f"{path}: unexpected impression log header {header}")
        cols = {name: [] for name in IMPRESSIONS_HEADER}
        for row in reader:
            for name, val in zip(IMPRESSIONS_HEADER, row):
                cols[name].append(val)
    if not cols["impression_id"]:
        raise SimError(f"{path}: empty impression log")
    groups = np.asarray(cols["group"], dtype=np.int64)
    pi_click = np.asarray(cols["pi_click"], dtype=np.float64)
    pi_order = np.asarray(cols["pi_order"], dtype=np.float64)
    n_groups = int(groups.max()) + 1
    group_prefs = np.zeros((n_groups, 2))
    for g in range(n_groups):
        mask = groups == g
        if not mask.any():
            continue
        pcs, pos_ = pi_click[mask], pi_order[mask]
        if np.ptp(pcs) > 1e-12 or np.ptp(pos_) > 1e-12:
            raise SimError(f"{path}: group {g} logged with inconsistent preferences")
        group_prefs[g] = [pcs[0], pos_[0]]
    return ImpressionLog(
        impression_ids=np.asarray(cols["impression_id"], dtype=np.int64),
        user_ids=np.asarray(cols["user_id"], dtype=np.int64),
        groups=groups,
        group_prefs=group_prefs,
        clicked=np.asarray(cols["clicked"], dtype=np.int64),
        ordered=np.asarray(cols["ordered"], dtype=np.int64),
        units=np.asarray(cols["units"], dtype=np.int64),
    )
