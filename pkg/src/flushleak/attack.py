"""Prime+Probe through a control-preserving flush, on a single cache set.

The attacker primes the set so that the replacement arrows single out the
way holding its last block.  Any victim activity moves those arrows; after
the flush the attacker refills, forces one eviction, and checks whether the
block an idle victim would have cost it survived.
"""

from __future__ import annotations

import csv
import enum
import io
import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from .flush import PRESERVE, FlushKind, flush, refill
from .policy import (
    HIT,
    Block,
    Control,
    Outcome,
    PolicyConfig,
    PolicyKind,
    access,
    fill_order,
    filled_set,
    find_setup_sequence,
    fresh_fill,
    plru,
    plru_ancestors,
    run_sequence,
    victim_way,
)

DEFAULT_SEQUENCE_CAP = 10**7


class Verdict(enum.Enum):
    VICTIM_ACTIVE = "active"
    VICTIM_INACTIVE = "inactive"


class Classification(enum.Enum):
    TRUE_POSITIVE = "true-positive"
    TRUE_NEGATIVE = "true-negative"
    EVASION = "evasion"
    SPURIOUS_DETECTION = "spurious-detection"


@dataclass(frozen=True)
class AttackScenario:
    policy: PolicyConfig = field(default_factory=lambda: plru(8))
    victim_sequence: tuple[Block, ...] = ()
    invalidate_before_victim: bool = False
    flush_kind: FlushKind = FlushKind.FLUSH_CMD

    def __post_init__(self) -> None:
        clash = set(self.victim_sequence) & set(self.attacker_blocks) | (
            {self.eviction_block} & set(self.victim_sequence)
        )
        if clash:
            raise ValueError(f"victim blocks overlap the attacker's: {sorted(clash)}")

    @property
    def attacker_blocks(self) -> list[Block]:
        return list(range(self.policy.assoc))

    @property
    def eviction_block(self) -> Block:
        return self.policy.assoc


@dataclass(frozen=True)
class AttackResult:
    verdict: Verdict
    probe_outcome: Outcome
    ground_truth_active: bool
    classification: Classification
    control_at_flush: Control


def victim_blocks(policy: PolicyConfig, m: int) -> list[Block]:
    """``m`` block ids disjoint from the attacker's ``I0 .. I_n``."""
    base = 10 ** len(str(policy.assoc + 1))
    return list(range(base, base + m))


@lru_cache(maxsize=None)
def primed_control(policy: PolicyConfig) -> Control:
    """Control state after priming: the arrows designate the attacker's last way."""
    n = policy.assoc
    if policy.kind is PolicyKind.PLRU:
        return (1,) * (n - 1)
    content = list(range(n))
    start = fresh_fill(policy, content)
    if victim_way(start) == n - 1:
        return start.control
    # smallest hit-only setup that puts the last way next in line
    frontier = [start.control]
    seen = {start.control}
    while frontier:
        nxt = []
        for ctl in frontier:
            for b in content:
                t, _ = access(filled_set(policy, content, ctl), b)
                if t.control in seen:
                    continue
                if victim_way(t) == n - 1:
                    return t.control
                seen.add(t.control)
                nxt.append(t.control)
        frontier = nxt
    raise ValueError(f"no reachable state of {policy} designates the last way")


@lru_cache(maxsize=None)
def _primed_state(policy: PolicyConfig):
    attacker = list(range(policy.assoc))
    setup = find_setup_sequence(policy, attacker, primed_control(policy), max_len=4 * policy.assoc)
    if setup is None:
        raise ValueError(f"cannot prime {policy}")
    return run_sequence(fresh_fill(policy, attacker), setup)[0]


def simulate_prime_probe(scenario: AttackScenario) -> AttackResult:
    policy = scenario.policy
    attacker = scenario.attacker_blocks
    # (1) prime and set the known control state
    state = _primed_state(policy)
    # (2) optional flush before the victim runs
    if scenario.invalidate_before_victim:
        state = flush(state, scenario.flush_kind, PRESERVE)
    # (3) victim
    state, _ = run_sequence(state, scenario.victim_sequence)
    # (4) flush on the way out
    at_flush = state.control
    state = flush(state, scenario.flush_kind, PRESERVE)
    # (5) refill, (6) force one eviction, (7) probe the designated block
    state = refill(state, fill_order(policy, attacker))
    state, _ = access(state, scenario.eviction_block)
    _, outcome = access(state, probe_block(policy, scenario.flush_kind))

    active = len(scenario.victim_sequence) > 0
    verdict = Verdict.VICTIM_ACTIVE if outcome is HIT else Verdict.VICTIM_INACTIVE
    if active:
        cls = Classification.TRUE_POSITIVE if outcome is HIT else Classification.EVASION
    else:
        cls = Classification.SPURIOUS_DETECTION if outcome is HIT else Classification.TRUE_NEGATIVE
    return AttackResult(verdict, outcome, active, cls, at_flush)


@lru_cache(maxsize=None)
def probe_block(policy: PolicyConfig, flush_kind: FlushKind = FlushKind.FLUSH_CMD) -> Block:
    """The attacker block that the forced eviction displaces when the victim is idle.

    For tree-PLRU this is the last block.  Policies whose refill rewrites the
    control state (QLRU) may displace a different one.
    """
    attacker = list(range(policy.assoc))
    state = flush(_primed_state(policy), flush_kind, PRESERVE)
    state = refill(state, fill_order(policy, attacker))
    return state.lines[victim_way(state)]


def plru_probe_predicts_hit(control: Control, assoc: int) -> bool:
    """The probe hits unless every arrow above the last way still points at it."""
    return not all(control[i] == 1 for i in plru_ancestors(assoc - 1, assoc))


@dataclass
class DetectionRow:
    length: int
    total: int = 0
    detected: int = 0
    evasions: int = 0
    true_negatives: int = 0
    spurious: int = 0
    evasion_examples: list[tuple[Block, ...]] = field(default_factory=list)

    @property
    def evasion_fraction(self) -> float:
        active = self.total if self.length > 0 else 0
        return self.evasions / active if active else 0.0


@dataclass
class DetectionReport:
    policy: PolicyConfig
    victim_block_count: int
    invalidate_before_victim: bool
    rows: list[DetectionRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["length", "total", "detected", "evasions", "evasion_fraction"])
        for r in self.rows:
            w.writerow([r.length, r.total, r.detected, r.evasions, f"{r.evasion_fraction:.6f}"])
        return buf.getvalue()


def analyze_detection(
    policy: PolicyConfig | None = None,
    m: int = 1,
    max_k: int = 3,
    invalidate_before_victim: bool = False,
    cap: int = DEFAULT_SEQUENCE_CAP,
    keep_examples: int = 5,
) -> DetectionReport:
    """Run the attack on every victim sequence over ``m`` blocks of length ``0 .. max_k``."""
    policy = policy or plru(8)
    if m < 1:
        raise ValueError("need at least one victim block")
    total = sum(m**k for k in range(max_k + 1))
    if total > cap:
        raise ValueError(f"{total} victim sequences exceed the cap of {cap}")
    blocks = victim_blocks(policy, m)
    rows = []
    for k in range(max_k + 1):
        row = DetectionRow(k)
        for seq in itertools.product(blocks, repeat=k):
            res = simulate_prime_probe(AttackScenario(policy, seq, invalidate_before_victim))
            row.total += 1
            c = res.classification
            if c is Classification.TRUE_POSITIVE:
                row.detected += 1
            elif c is Classification.EVASION:
                row.evasions += 1
                if len(row.evasion_examples) < keep_examples:
                    row.evasion_examples.append(seq)
            elif c is Classification.TRUE_NEGATIVE:
                row.true_negatives += 1
            else:
                row.detected += 1
                row.spurious += 1
        rows.append(row)
    return DetectionReport(policy, m, invalidate_before_victim, rows)
