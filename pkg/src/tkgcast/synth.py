"""Synthetic temporal KG generator with planted, parameterized rules.

Each step seeds random base facts; any fact whose relation matches a rule
trigger schedules the rule consequence ``lag`` steps later with the rule's
firing probability. The answer key of emitted rule consequences is the
ground truth that end-to-end runs are scored against.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DEFAULT_EPOCH, Fact, TemporalKG, build_kg


@dataclass
class RuleSpec:
    """If (s, trigger, o, t) occurs, emit a consequence at t + lag.

    direction "keep" emits (s, consequence, o); "swap" emits (o, consequence, s).
    """

    trigger: int
    consequence: int
    lag: int
    probability: float
    direction: str = "keep"

    def __post_init__(self):
        if not (0 < self.probability <= 1):
            raise ValueError("probability must be in (0, 1]")
        if self.lag < 1:
            raise ValueError("lag must be >= 1")
        if self.direction not in ("keep", "swap"):
            raise ValueError("direction must be 'keep' or 'swap'")


# Two-rule default scenario used by the end-to-end acceptance runs: a fast
# rule (lag 1) and a slow one (lag 5) whose evidence falls outside short
# history windows.
DEFAULT_RULES = (
    RuleSpec(trigger=0, consequence=1, lag=1, probability=0.9),
    RuleSpec(trigger=2, consequence=3, lag=5, probability=0.8),
)
DEFAULT_SCENARIO = dict(
    num_entities=50, num_relations=8, num_steps=200, noise_rate=20
)


def generate(
    num_entities: int,
    num_relations: int,
    num_steps: int,
    rules: list[RuleSpec] | tuple[RuleSpec, ...] = DEFAULT_RULES,
    noise_rate: int = 20,
    seed: int = 0,
    epoch_date: datetime.date = DEFAULT_EPOCH,
) -> tuple[TemporalKG, list[Fact]]:
    """Generate a KG plus the answer key of rule-implied facts.

    Deterministic per seed. Returns (kg, answer_key); every answer-key fact
    is present in the KG.
    """
    if min(num_entities, num_relations, num_steps) <= 0:
        raise ValueError("num_entities, num_relations, num_steps must be positive")
    for rule in rules:
        if not (0 <= rule.trigger < num_relations and 0 <= rule.consequence < num_relations):
            raise ValueError(f"rule references relation outside [0, {num_relations}): {rule}")
    rng = np.random.default_rng(seed)
    pending: dict[int, list[Fact]] = {}
    answer_key: list[Fact] = []
    facts: list[Fact] = []
    seen: set[Fact] = set()

    def emit(fact: Fact) -> bool:
        if fact in seen:
            return False
        seen.add(fact)
        facts.append(fact)
        return True

    for t in range(num_steps):
        todays: list[Fact] = []
        for fact in pending.pop(t, []):
            emit(fact)
            todays.append(fact)
            answer_key.append(fact)
        for _ in range(int(noise_rate)):
            s = int(rng.integers(num_entities))
            o = int(rng.integers(num_entities - 1))
            if o >= s:
                o += 1  # no self-loops
            r = int(rng.integers(num_relations))
            fact = Fact(s, r, o, t)
            if emit(fact):
                todays.append(fact)
        for fact in todays:
            for rule in rules:
                if fact.relation != rule.trigger:
                    continue
                if rng.random() >= rule.probability:
                    continue
                due = t + rule.lag
                if due >= num_steps:
                    continue
                if rule.direction == "swap":
                    cons = Fact(fact.object, rule.consequence, fact.subject, due)
                else:
                    cons = Fact(fact.subject, rule.consequence, fact.object, due)
                pending.setdefault(due, []).append(cons)

    kg = build_kg(facts, num_entities, num_relations, epoch_date, dedup=True)
    # answer key may contain scheduled facts that collided with noise; they
    # still exist in the KG, which is all the key promises. Dedup the key.
    key_seen: set[Fact] = set()
    unique_key = []
    for fact in answer_key:
        if fact not in key_seen:
            key_seen.add(fact)
            unique_key.append(fact)
    return kg, unique_key


def parse_rules_file(path) -> list[RuleSpec]:
    """Rules file: one rule per line, "trigger consequence lag prob direction"."""
    rules = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (4, 5):
                raise ValueError(f"{path}: line {lineno}: expected 4 or 5 fields")
            direction = parts[4] if len(parts) == 5 else "keep"
            rules.append(
                RuleSpec(
                    trigger=int(parts[0]),
                    consequence=int(parts[1]),
                    lag=int(parts[2]),
                    probability=float(parts[3]),
                    direction=direction,
                )
            )
    return rules


def save_answer_key(path, answer_key: list[Fact]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in answer_key:
            fh.write(f"{f.subject}\t{f.relation}\t{f.object}\t{f.timestamp}\n")


def load_answer_key(path) -> list[Fact]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            s, r, o, t = (int(x) for x in line.split("\t"))
            out.append(Fact(s, r, o, t))
    return out
