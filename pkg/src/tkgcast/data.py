"""Temporal knowledge graph data model and file formats.

A fact is an integer-coded quadruple (subject, relation, object, day).
Facts sharing a day form a snapshot; the ordered collection of snapshots
is a :class:`TemporalKG`. Day indices count from a dataset epoch date so
windows stay integer arithmetic while prompts can render calendar dates.

File formats (all UTF-8 text):
  quadruples: one fact per line, "s<TAB>r<TAB>o<TAB>t"
  vocab:      one entry per line, "name<TAB>id"
  split manifest: key=value lines with train_end, valid_end, epoch_date
"""

from __future__ import annotations

import datetime
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

log = logging.getLogger(__name__)

DEFAULT_EPOCH = datetime.date(2018, 1, 1)


class DataFormatError(ValueError):
    """Malformed input file (bad line, id out of range, broken vocab)."""


class Fact(NamedTuple):
    subject: int
    relation: int
    object: int
    timestamp: int


@dataclass
class Vocab:
    """Bijective id<->name maps for entities and relations."""

    entity_names: list[str]
    relation_names: list[str]
    entity_ids: dict[str, int] = field(init=False)
    relation_ids: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.entity_ids = {n: i for i, n in enumerate(self.entity_names)}
        self.relation_ids = {n: i for i, n in enumerate(self.relation_names)}
        if len(self.entity_ids) != len(self.entity_names):
            raise DataFormatError("entity names are not unique")
        if len(self.relation_ids) != len(self.relation_names):
            raise DataFormatError("relation names are not unique")

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def entity_name(self, eid: int) -> str:
        if 0 <= eid < len(self.entity_names):
            return self.entity_names[eid]
        return f"entity_{eid}"

    def relation_name(self, rid: int) -> str:
        if 0 <= rid < len(self.relation_names):
            return self.relation_names[rid]
        return f"relation_{rid}"

    @staticmethod
    def synthetic(num_entities: int, num_relations: int) -> "Vocab":
        return Vocab(
            entity_names=[f"entity_{i}" for i in range(num_entities)],
            relation_names=[f"relation_{i}" for i in range(num_relations)],
        )


@dataclass
class TemporalKG:
    """Immutable-after-load snapshot sequence plus vocabulary sizes."""

    snapshots: dict[int, list[Fact]]
    num_entities: int
    num_relations: int
    epoch_date: datetime.date = DEFAULT_EPOCH
    duplicates_dropped: int = 0

    def __post_init__(self):
        ordered = {}
        for t in sorted(self.snapshots):
            for f in self.snapshots[t]:
                if f.timestamp != t:
                    raise DataFormatError(
                        f"fact {f} filed under snapshot {t}"
                    )
            ordered[t] = list(self.snapshots[t])
        self.snapshots = ordered

    @property
    def timestamps(self) -> list[int]:
        return list(self.snapshots)

    @property
    def max_timestamp(self) -> int:
        return max(self.snapshots) if self.snapshots else -1

    @property
    def num_facts(self) -> int:
        return sum(len(v) for v in self.snapshots.values())

    def facts(self) -> Iterator[Fact]:
        for t in self.snapshots:
            yield from self.snapshots[t]

    def snapshot(self, t: int) -> list[Fact]:
        return self.snapshots.get(t, [])

    def date_of(self, t: int) -> datetime.date:
        return self.epoch_date + datetime.timedelta(days=int(t))

    def validate_ids(self) -> None:
        for f in self.facts():
            if not (0 <= f.subject < self.num_entities):
                raise DataFormatError(f"subject id {f.subject} out of range in {f}")
            if not (0 <= f.object < self.num_entities):
                raise DataFormatError(f"object id {f.object} out of range in {f}")
            if not (0 <= f.relation < self.num_relations):
                raise DataFormatError(f"relation id {f.relation} out of range in {f}")


@dataclass
class SplitSpec:
    """Temporal split boundaries: train t<=train_end, valid up to valid_end."""

    train_end: int
    valid_end: int

    def validate(self, max_timestamp: int) -> None:
        if not (0 < self.train_end < self.valid_end < max_timestamp):
            raise ValueError(
                f"need 0 < train_end ({self.train_end}) < valid_end "
                f"({self.valid_end}) < max timestamp ({max_timestamp})"
            )


def build_kg(
    facts: list[Fact],
    num_entities: int,
    num_relations: int,
    epoch_date: datetime.date = DEFAULT_EPOCH,
    dedup: bool = True,
) -> TemporalKG:
    """Group facts into snapshots, dropping duplicates with a counter."""
    snapshots: dict[int, list[Fact]] = {}
    seen: set[Fact] = set()
    dropped = 0
    for f in facts:
        if dedup:
            if f in seen:
                dropped += 1
                continue
            seen.add(f)
        snapshots.setdefault(f.timestamp, []).append(f)
    kg = TemporalKG(
        snapshots=snapshots,
        num_entities=num_entities,
        num_relations=num_relations,
        epoch_date=epoch_date,
        duplicates_dropped=dropped,
    )
    kg.validate_ids()
    return kg


def _parse_quadruple_line(line: str, lineno: int) -> Fact:
    parts = line.split("\t")
    if len(parts) == 1:
        parts = line.split()
    if len(parts) != 4:
        raise DataFormatError(
            f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}"
        )
    try:
        s, r, o, t = (int(p) for p in parts)
    except ValueError as exc:
        raise DataFormatError(f"line {lineno}: non-integer field ({exc})") from exc
    if min(s, r, o, t) < 0:
        raise DataFormatError(f"line {lineno}: negative id or timestamp")
    return Fact(s, r, o, t)


def load_vocab_file(path) -> list[str]:
    """Read a "name<TAB>id" vocab file; ids must be contiguous from 0."""
    entries: dict[int, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(
                    f"{path}: line {lineno}: expected 'name<TAB>id'"
                )
            name, raw_id = parts
            try:
                idx = int(raw_id)
            except ValueError as exc:
                raise DataFormatError(
                    f"{path}: line {lineno}: bad id '{raw_id}'"
                ) from exc
            if idx in entries:
                raise DataFormatError(f"{path}: duplicate id {idx}")
            entries[idx] = name
    names = []
    for i in range(len(entries)):
        if i not in entries:
            raise DataFormatError(f"{path}: ids not contiguous, missing {i}")
        names.append(entries[i])
    return names


def save_vocab_file(path, names: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, name in enumerate(names):
            fh.write(f"{name}\t{i}\n")


def load_quadruples(
    path,
    entity_vocab_path=None,
    relation_vocab_path=None,
    epoch_date: datetime.date = DEFAULT_EPOCH,
) -> tuple[TemporalKG, Vocab]:
    """Parse a quadruple file into a TemporalKG.

    When vocab paths are given, ids are validated against them; otherwise
    a synthetic vocabulary sized from the data (max id + 1) is built.
    Duplicate quadruples are dropped and counted.
    """
    path = Path(path)
    facts: list[Fact] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            facts.append(_parse_quadruple_line(line, lineno))
    if entity_vocab_path is not None and relation_vocab_path is not None:
        vocab = Vocab(
            entity_names=load_vocab_file(entity_vocab_path),
            relation_names=load_vocab_file(relation_vocab_path),
        )
    else:
        num_e = 1 + max((max(f.subject, f.object) for f in facts), default=-1)
        num_r = 1 + max((f.relation for f in facts), default=-1)
        vocab = Vocab.synthetic(num_e, num_r)
    kg = build_kg(facts, vocab.num_entities, vocab.num_relations, epoch_date)
    if kg.duplicates_dropped:
        log.warning(
            "%s: dropped %d duplicate quadruples", path, kg.duplicates_dropped
        )
    return kg, vocab


def save_quadruples(path, kg: TemporalKG) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in kg.facts():
            fh.write(f"{f.subject}\t{f.relation}\t{f.object}\t{f.timestamp}\n")


def save_split_manifest(path, spec: SplitSpec, epoch_date: datetime.date) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"train_end={spec.train_end}\n")
        fh.write(f"valid_end={spec.valid_end}\n")
        fh.write(f"epoch_date={epoch_date.isoformat()}\n")


def load_split_manifest(path) -> tuple[SplitSpec, datetime.date]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    try:
        spec = SplitSpec(int(values["train_end"]), int(values["valid_end"]))
        epoch = datetime.date.fromisoformat(values["epoch_date"])
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing key {exc}") from exc
    return spec, epoch


def split_by_time(
    kg: TemporalKG, spec: SplitSpec
) -> tuple[TemporalKG, TemporalKG, TemporalKG]:
    """Partition snapshots into train/valid/test views sharing vocabularies."""

    def take(lo: int, hi: int | None) -> TemporalKG:
        snaps = {
            t: facts
            for t, facts in kg.snapshots.items()
            if t > lo and (hi is None or t <= hi)
        }
        return TemporalKG(
            snapshots=snaps,
            num_entities=kg.num_entities,
            num_relations=kg.num_relations,
            epoch_date=kg.epoch_date,
        )

    train = take(-1, spec.train_end)
    valid = take(spec.train_end, spec.valid_end)
    test = take(spec.valid_end, None)
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        if part.num_facts == 0:
            log.warning("split produced an empty %s partition", name)
    return train, valid, test


def recent_entities(kg: TemporalKG, t: int, window_days: int) -> set[int]:
    """All subjects and objects of facts with timestamp in [t-window, t-1]."""
    if t < 0:
        raise ValueError("t must be >= 0")
    found: set[int] = set()
    for day in range(max(0, t - window_days), t):
        for f in kg.snapshot(day):
            found.add(f.subject)
            found.add(f.object)
    return found


def object_frequency(kg: TemporalKG) -> dict[int, int]:
    """How often each entity appears in the object slot; absent means 0."""
    counts: dict[int, int] = {}
    for f in kg.facts():
        counts[f.object] = counts.get(f.object, 0) + 1
    return counts
