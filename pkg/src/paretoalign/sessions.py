"""Session data model and dataset file I/O.

Raw sessions are ordered click/order event streams. For training and
evaluation they are reformulated as click/order pairs: one pair per click,
where the order flag says whether that clicked item was ordered later in
the same session.

Dataset files are line-delimited JSON, one session per line, with an
optional leading header line ``{"catalog_size": N}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

CLICK = "click"
ORDER = "order"
_ACTIONS = (CLICK, ORDER)


class SessionError(ValueError):
    """Invalid session data or dataset file."""


@dataclass(frozen=True)
class RawSession:
    """A user session as an ordered list of (item, action, ts) events."""

    session_id: int
    events: tuple[tuple[int, str, int], ...]

    def __post_init__(self):
        if len(self.events) < 2:
            raise SessionError(f"session {self.session_id}: needs at least 2 events")
        last_ts = None
        for item, action, ts in self.events:
            if action not in _ACTIONS:
                raise SessionError(f"session {self.session_id}: unknown action {action!r}")
            if item < 0:
                raise SessionError(f"session {self.session_id}: negative item id {item}")
            if last_ts is not None and ts < last_ts:
                raise SessionError(f"session {self.session_id}: events not sorted by ts")
            last_ts = ts

    @property
    def start_ts(self) -> int:
        return self.events[0][2]


@dataclass(frozen=True)
class ClickOrderSession:
    """Click/order reformulation: one (item, ordered) pair per click event.

    ``start_ts`` is the first raw event's timestamp and is what temporal
    splitting keys on.
    """

    session_id: int
    pairs: tuple[tuple[int, int], ...]
    start_ts: int = 0

    def __post_init__(self):
        if len(self.pairs) < 1:
            raise SessionError(f"session {self.session_id}: no clicks")

    @property
    def clicks(self) -> tuple[int, ...]:
        return tuple(item for item, _ in self.pairs)


@dataclass
class Dataset:
    sessions: list[ClickOrderSession]
    catalog_size: int
    split_ts: Optional[int] = None
    dropped_orphan_orders: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.sessions == other.sessions and self.catalog_size == other.catalog_size

    def __len__(self) -> int:
        return len(self.sessions)


def to_click_order(s: RawSession, _orphan_counter: Optional[list[int]] = None) -> ClickOrderSession:
    """Convert a raw event session into click/order pairs.

    An order event marks the most recent prior click of the same item.
    Order events with no prior click of their item are dropped (counted
    into ``_orphan_counter[0]`` when given).
    """
    items: list[int] = []
    flags: list[int] = []
    last_click_idx: dict[int, int] = {}
    orphans = 0
    for item, action, _ts in s.events:
        if action == CLICK:
            last_click_idx[item] = len(items)
            items.append(item)
            flags.append(0)
        else:
            idx = last_click_idx.get(item)
            if idx is None:
                orphans += 1
            else:
                flags[idx] = 1
    if _orphan_counter is not None:
        _orphan_counter[0] += orphans
    if not items:
        raise SessionError(f"session {s.session_id}: no clicks")
    return ClickOrderSession(
        session_id=s.session_id,
        pairs=tuple(zip(items, flags)),
        start_ts=s.start_ts,
    )


def _session_from_record(rec: dict, lineno: int) -> RawSession:
    try:
        session_id = int(rec["session_id"])
        events = tuple(
            (int(ev["item"]), str(ev["action"]), int(ev["ts"])) for ev in rec["events"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SessionError(f"line {lineno}: malformed session record: {exc}") from exc
    try:
        return RawSession(session_id=session_id, events=events)
    except SessionError as exc:
        raise SessionError(f"line {lineno}: {exc}") from exc


def parse_sessions(path: str) -> Dataset:
    """Parse a line-delimited session file into a click/order Dataset."""
    sessions: list[ClickOrderSession] = []
    orphan_counter = [0]
    declared_catalog: Optional[int] = None
    max_item = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SessionError(f"line {lineno}: invalid JSON: {exc}") from exc
            if lineno == 1 and isinstance(rec, dict) and "catalog_size" in rec and "session_id" not in rec:
                declared_catalog = int(rec["catalog_size"])
                continue
            raw = _session_from_record(rec, lineno)
            for item, _action, _ts in raw.events:
                if declared_catalog is not None and item >= declared_catalog:
                    raise SessionError(
                        f"line {lineno}: item id {item} >= declared catalog size {declared_catalog}"
                    )
                max_item = max(max_item, item)
            sessions.append(to_click_order(raw, orphan_counter))
    if not sessions:
        raise SessionError(f"{path}: no sessions")
    catalog_size = declared_catalog if declared_catalog is not None else max_item + 1
    return Dataset(
        sessions=sessions,
        catalog_size=catalog_size,
        dropped_orphan_orders=orphan_counter[0],
    )


def write_sessions(dataset: Dataset, path: str) -> None:
    """Write a Dataset as canonical raw events (round-trips through parse).

    Each pair becomes a click event; ordered pairs get an order event
    immediately after their click so the order re-attaches to that click.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"catalog_size": dataset.catalog_size}) + "\n")
        for s in dataset.sessions:
            ts = s.start_ts
            events = []
            if len(s.pairs) == 1 and s.pairs[0][1] == 0:
                # raw sessions need >= 2 events; a leading orphan order is
                # dropped on parse, leaving the single unordered click intact
                item = s.pairs[0][0]
                events.append({"item": item, "action": ORDER, "ts": ts})
                events.append({"item": item, "action": CLICK, "ts": ts + 1})
            else:
                for item, ordered in s.pairs:
                    events.append({"item": item, "action": CLICK, "ts": ts})
                    ts += 1
                    if ordered:
                        events.append({"item": item, "action": ORDER, "ts": ts})
                        ts += 1
            fh.write(json.dumps({"session_id": s.session_id, "events": events}) + "\n")


def temporal_split(dataset: Dataset, split_ts: int) -> tuple[Dataset, Dataset]:
    """Split sessions by their first event's timestamp: earlier goes to train."""
    train = [s for s in dataset.sessions if s.start_ts < split_ts]
    test = [s for s in dataset.sessions if s.start_ts >= split_ts]
    if not train:
        raise SessionError("empty train partition")
    if not test:
        raise SessionError("empty test partition")
    return (
        Dataset(sessions=train, catalog_size=dataset.catalog_size, split_ts=split_ts),
        Dataset(sessions=test, catalog_size=dataset.catalog_size, split_ts=split_ts),
    )
