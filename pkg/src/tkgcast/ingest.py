"""Event-table ingest pipeline: raw socio-political event rows to quadruples.

The pipeline is a fixed five-stage sequence — country/time filter, drop of
incomplete rows, actor x recipient expansion, duplicate removal, entity
filtering — followed by statistics emission and conversion to integer-coded
quadruples. Every stage is a pure function of its input, so repeated runs
produce byte-identical output.

Input is a tab-separated table with a named header row. Recognized columns
(case-insensitive, spaces/underscores interchangeable): actor name,
actor name raw, recipient name, recipient name raw, event type, event mode,
event date, actor country, recipient country, country.
"""

from __future__ import annotations

import datetime
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

from .data import Fact, TemporalKG, Vocab, build_kg

log = logging.getLogger(__name__)

_MISSING_LITERALS = {"", "none", "nan", "np.nan", "null"}


def _missing(value: str | None) -> bool:
    return value is None or value.strip().lower() in _MISSING_LITERALS


@dataclass
class RawEvent:
    actor_name: str | None = None
    actor_name_raw: str | None = None
    recipient_name: str | None = None
    recipient_name_raw: str | None = None
    event_type: str = ""
    event_mode: str | None = None
    event_date: str = ""
    actor_country: str | None = None
    recipient_country: str | None = None
    country: str | None = None

    def parsed_date(self) -> datetime.date:
        return datetime.date.fromisoformat(self.event_date.strip())


_COLUMN_ALIASES = {
    "actor name": "actor_name",
    "actor name raw": "actor_name_raw",
    "recipient name": "recipient_name",
    "recipient name raw": "recipient_name_raw",
    "event type": "event_type",
    "event mode": "event_mode",
    "event date": "event_date",
    "actor country": "actor_country",
    "recipient country": "recipient_country",
    "country": "country",
}


def read_events(path) -> list[RawEvent]:
    """Read a header-keyed TSV of raw events; unknown columns are ignored."""
    events = []
    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline().rstrip("\n")
        columns = [c.strip().lower().replace("_", " ") for c in header_line.split("\t")]
        mapping = {}
        for idx, col in enumerate(columns):
            if col in _COLUMN_ALIASES:
                mapping[idx] = _COLUMN_ALIASES[col]
        if "event_type" not in mapping.values() or "event_date" not in mapping.values():
            raise ValueError(f"{path}: header must include event type and event date")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            kwargs = {}
            for idx, name in mapping.items():
                if idx < len(fields):
                    kwargs[name] = fields[idx]
            events.append(RawEvent(**kwargs))
    return events


@dataclass
class StageCounts:
    """In/out bookkeeping for one pipeline stage."""

    stage: str
    received: int = 0
    kept: int = 0
    dropped_bad_date: int = 0
    dropped: int = 0
    expanded_to: int = 0


@dataclass
class PipelineReport:
    stages: list[StageCounts] = field(default_factory=list)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for sc in self.stages:
                fh.write(f"{sc.stage}.received={sc.received}\n")
                fh.write(f"{sc.stage}.kept={sc.kept}\n")
                if sc.dropped:
                    fh.write(f"{sc.stage}.dropped={sc.dropped}\n")
                if sc.dropped_bad_date:
                    fh.write(f"{sc.stage}.dropped_bad_date={sc.dropped_bad_date}\n")
                if sc.expanded_to:
                    fh.write(f"{sc.stage}.expanded_to={sc.expanded_to}\n")


def filter_country_time(
    events: Iterable[RawEvent],
    countries: set[str],
    start: datetime.date,
    end: datetime.date,
    counts: StageCounts | None = None,
) -> list[RawEvent]:
    """Keep events dated within [start, end] whose country fields hit the set."""
    if start > end:
        raise ValueError("start date must not be after end date")
    counts = counts if counts is not None else StageCounts("filter_country_time")
    wanted = {c.strip().lower() for c in countries}
    kept = []
    for ev in events:
        counts.received += 1
        try:
            date = ev.parsed_date()
        except ValueError:
            counts.dropped_bad_date += 1
            continue
        if not (start <= date <= end):
            counts.dropped += 1
            continue
        fields = (ev.actor_country, ev.recipient_country, ev.country)
        if not any(
            not _missing(c) and c.strip().lower() in wanted for c in fields
        ):
            counts.dropped += 1
            continue
        kept.append(ev)
    counts.kept = len(kept)
    return kept


def _incomplete(ev: RawEvent) -> bool:
    actor_gone = _missing(ev.actor_name) and _missing(ev.actor_name_raw)
    recipient_gone = _missing(ev.recipient_name) and _missing(ev.recipient_name_raw)
    return actor_gone or recipient_gone


def drop_incomplete(
    events: Iterable[RawEvent], counts: StageCounts | None = None
) -> list[RawEvent]:
    """Drop rows where a participant is missing in both name and raw fields."""
    counts = counts if counts is not None else StageCounts("drop_incomplete")
    kept = []
    for ev in events:
        counts.received += 1
        if _incomplete(ev):
            counts.dropped += 1
        else:
            kept.append(ev)
    counts.kept = len(kept)
    return kept


def _split_names(name: str | None, raw: str | None) -> list[tuple[str, str]]:
    """Resolve a possibly semicolon-separated name list against its raw twin.

    Returns (resolved_name, raw_for_that_name) pairs; elements with no
    resolvable name are dropped.
    """
    names = [] if _missing(name) else [p.strip() for p in name.split(";")]
    raws = [] if _missing(raw) else [p.strip() for p in raw.split(";")]
    if not names:
        names = [""] * len(raws)
    if len(raws) != len(names):
        raws = raws + [""] * (len(names) - len(raws)) if len(raws) < len(names) else raws[: len(names)]
    out = []
    for n, rw in zip(names, raws):
        resolved = n if not _missing(n) else rw
        if _missing(resolved):
            continue
        out.append((resolved, rw))
    return out


def expand_entities(event: RawEvent) -> list[RawEvent]:
    """One event per (actor, recipient) combination of the listed names.

    Missing names backfill from the raw fields; a row whose actor or
    recipient list resolves to nothing yields no output.
    """
    actors = _split_names(event.actor_name, event.actor_name_raw)
    recipients = _split_names(event.recipient_name, event.recipient_name_raw)
    out = []
    for actor, actor_raw in actors:
        for recipient, recipient_raw in recipients:
            out.append(
                replace(
                    event,
                    actor_name=actor,
                    actor_name_raw=actor_raw,
                    recipient_name=recipient,
                    recipient_name_raw=recipient_raw,
                )
            )
    return out


def expand_all(
    events: Iterable[RawEvent], counts: StageCounts | None = None
) -> list[RawEvent]:
    counts = counts if counts is not None else StageCounts("expand_entities")
    out = []
    for ev in events:
        counts.received += 1
        expanded = expand_entities(ev)
        if not expanded:
            counts.dropped += 1
        out.extend(expanded)
    counts.kept = counts.received - counts.dropped
    counts.expanded_to = len(out)
    return out


def _dedup_key(ev: RawEvent) -> tuple:
    return (
        ev.actor_name,
        ev.recipient_name,
        ev.event_type,
        ev.event_mode or "",
        ev.event_date,
    )


def dedup(events: Iterable[RawEvent], counts: StageCounts | None = None) -> list[RawEvent]:
    """First occurrence kept per five-field key; order stable."""
    counts = counts if counts is not None else StageCounts("dedup")
    seen = set()
    kept = []
    for ev in events:
        counts.received += 1
        key = _dedup_key(ev)
        if key in seen:
            counts.dropped += 1
            continue
        seen.add(key)
        kept.append(ev)
    counts.kept = len(kept)
    return kept


@dataclass
class EntityJudge:
    """Pluggable meaningful-entity verdict with cached, deterministic calls.

    judge returns True (keep), False (not meaningful), or raises; a raised
    judgement falls back to the frequency rule and is counted.
    """

    judge: Callable[[str], bool]
    min_freq: int = 5
    _cache: dict[str, bool | None] = field(default_factory=dict)
    failures: int = 0

    def verdict(self, entity: str) -> bool | None:
        if entity not in self._cache:
            try:
                self._cache[entity] = bool(self.judge(entity))
            except Exception:
                self.failures += 1
                self._cache[entity] = None
        return self._cache[entity]


def keep_all_judge() -> EntityJudge:
    return EntityJudge(judge=lambda name: True)


def frequency_judge(min_freq: int = 5) -> EntityJudge:
    """Heuristic stand-in for an external judge: no entity is vouched for,
    so retention is decided purely by the frequency rule."""
    return EntityJudge(judge=lambda name: False, min_freq=min_freq)


def filter_entities(
    events: Iterable[RawEvent],
    judge: EntityJudge,
    counts: StageCounts | None = None,
) -> list[RawEvent]:
    """Remove entities judged meaningless unless frequent; drop their events.

    An entity judged meaningful is kept regardless of frequency. One judged
    not meaningful (or whose judgement failed) survives only if it appears
    in more than min_freq events.
    """
    counts = counts if counts is not None else StageCounts("filter_entities")
    events = list(events)
    freq: Counter[str] = Counter()
    for ev in events:
        for name in {ev.actor_name, ev.recipient_name}:
            if not _missing(name):
                freq[name] += 1
    removed: set[str] = set()
    for entity in freq:
        verdict = judge.verdict(entity)
        if verdict is True:
            continue
        if freq[entity] <= judge.min_freq:
            removed.add(entity)
    kept = []
    for ev in events:
        counts.received += 1
        if ev.actor_name in removed or ev.recipient_name in removed:
            counts.dropped += 1
        else:
            kept.append(ev)
    counts.kept = len(kept)
    return kept


def emit_stats(events: Iterable[RawEvent], out_dir) -> None:
    """Write year-month counts, top-20 entities, and per-country counts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    events = list(events)

    by_month: Counter[tuple[int, int]] = Counter()
    for ev in events:
        d = ev.parsed_date()
        by_month[(d.year, d.month)] += 1
    with open(out_dir / "events_by_year_month.tsv", "w", encoding="utf-8") as fh:
        fh.write("year\tmonth\tcount\n")
        for (year, month), n in sorted(by_month.items()):
            fh.write(f"{year}\t{month}\t{n}\n")

    entity_freq: Counter[str] = Counter()
    for ev in events:
        for name in (ev.actor_name, ev.recipient_name):
            if not _missing(name):
                entity_freq[name] += 1
    top = sorted(entity_freq.items(), key=lambda kv: (-kv[1], kv[0]))[:20]
    with open(out_dir / "top_entities.tsv", "w", encoding="utf-8") as fh:
        fh.write("entity\tcount\n")
        for name, n in top:
            fh.write(f"{name}\t{n}\n")

    by_country: Counter[str] = Counter()
    for ev in events:
        for c in {ev.actor_country, ev.recipient_country, ev.country}:
            if not _missing(c):
                by_country[c.strip()] += 1
    with open(out_dir / "events_by_country.tsv", "w", encoding="utf-8") as fh:
        fh.write("country\tcount\n")
        for name, n in sorted(by_country.items(), key=lambda kv: (-kv[1], kv[0])):
            fh.write(f"{name}\t{n}\n")


def to_quadruples(
    events: Iterable[RawEvent], epoch_date: datetime.date | None = None
) -> tuple[TemporalKG, Vocab]:
    """Map cleaned events to integer quadruples.

    The relation is "type/mode" when a mode is present, the plain type
    otherwise; vocabularies assign ids in first-sight order.
    """
    events = list(events)
    if not events:
        raise ValueError("no events to convert")
    dates = [ev.parsed_date() for ev in events]
    epoch = epoch_date or min(dates)
    entity_ids: dict[str, int] = {}
    relation_ids: dict[str, int] = {}

    def eid(name: str) -> int:
        if name not in entity_ids:
            entity_ids[name] = len(entity_ids)
        return entity_ids[name]

    def rid(name: str) -> int:
        if name not in relation_ids:
            relation_ids[name] = len(relation_ids)
        return relation_ids[name]

    facts = []
    for ev, date in zip(events, dates):
        relation = ev.event_type if _missing(ev.event_mode) else f"{ev.event_type}/{ev.event_mode}"
        facts.append(
            Fact(
                subject=eid(ev.actor_name),
                relation=rid(relation),
                object=eid(ev.recipient_name),
                timestamp=(date - epoch).days,
            )
        )
    vocab = Vocab(
        entity_names=list(entity_ids),
        relation_names=list(relation_ids),
    )
    kg = build_kg(facts, vocab.num_entities, vocab.num_relations, epoch, dedup=False)
    return kg, vocab


def run_pipeline(
    events: list[RawEvent],
    countries: set[str],
    start: datetime.date,
    end: datetime.date,
    judge: EntityJudge,
) -> tuple[list[RawEvent], PipelineReport]:
    """Fixed-order pipeline: country/time, incomplete, expand, dedup, entities."""
    report = PipelineReport()

    def stage(name: str) -> StageCounts:
        sc = StageCounts(name)
        report.stages.append(sc)
        return sc

    events = filter_country_time(events, countries, start, end, stage("filter_country_time"))
    events = drop_incomplete(events, stage("drop_incomplete"))
    events = expand_all(events, stage("expand_entities"))
    events = dedup(events, stage("dedup"))
    events = filter_entities(events, judge, stage("filter_entities"))
    return events, report
