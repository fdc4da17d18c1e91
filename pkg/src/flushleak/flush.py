"""Flush semantics and the flush-refill channel.

A flush invalidates lines.  Whether it also clears the replacement
metadata is a property of the modelled CPU (:class:`FlushBehavior`).
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .policy import (
    DEFAULT_STATE_CAP,
    Block,
    CacheSetState,
    Control,
    PolicyConfig,
    PolicyError,
    PolicyKind,
    default_control,
    encode_control,
    enumerate_control_states,
    filled_set,
    run_sequence,
)


class FlushKind(enum.Enum):
    WBINVD = "wbinvd"
    CLFLUSH_EACH = "clflush-each"
    FLUSH_CMD = "flushcmd"


class FlushBehavior(enum.Enum):
    PRESERVES_CONTROL = "preserve"
    RESETS_CONTROL = "reset"


PRESERVE = FlushBehavior.PRESERVES_CONTROL
RESET = FlushBehavior.RESETS_CONTROL


def _after_flush_control(state: CacheSetState, behavior: FlushBehavior) -> Control:
    if behavior is FlushBehavior.RESETS_CONTROL:
        return default_control(state.policy)
    return state.control


def clflush(state: CacheSetState, block: Block, behavior: FlushBehavior = PRESERVE) -> CacheSetState:
    """Invalidate the line holding ``block``; a no-op if it is not resident."""
    way = state.way_of(block)
    if way is None:
        return state
    lines = list(state.lines)
    lines[way] = None
    return CacheSetState(state.policy, tuple(lines), _after_flush_control(state, behavior))


def flush(state: CacheSetState, kind: FlushKind = FlushKind.WBINVD, behavior: FlushBehavior = PRESERVE) -> CacheSetState:
    if kind is FlushKind.CLFLUSH_EACH:
        for block in [b for b in state.lines if b is not None]:
            state = clflush(state, block, behavior)
        if behavior is FlushBehavior.RESETS_CONTROL:
            # an already-empty set still gets its metadata cleared
            state = CacheSetState(state.policy, state.lines, default_control(state.policy))
        return state
    return CacheSetState(
        state.policy, (None,) * state.policy.assoc, _after_flush_control(state, behavior)
    )


def refill(state: CacheSetState, blocks: Sequence[Block]) -> CacheSetState:
    """Fill a fully invalidated set with ``assoc`` fresh blocks, in the given order."""
    if any(b is not None for b in state.lines):
        raise PolicyError("refill expects a fully invalid set")
    if len(blocks) != state.policy.assoc or len(set(blocks)) != len(blocks):
        raise PolicyError(f"refill needs {state.policy.assoc} distinct blocks")
    state, _ = run_sequence(state, blocks)
    return state


def canonical_content(policy: PolicyConfig) -> list[Block]:
    return list(range(policy.assoc))


def default_refill(policy: PolicyConfig) -> list[Block]:
    """Blocks I_n .. I_{2n-1}: ascending for PLRU, descending for QLRU."""
    n = policy.assoc
    blocks = list(range(n, 2 * n))
    if policy.kind is PolicyKind.QLRU:
        blocks.reverse()
    return blocks


def refill_order(policy: PolicyConfig, spec: str | Sequence[Block] | None) -> list[Block]:
    """Resolve ``"asc"``, ``"desc"``, ``None`` (default) or an explicit block list."""
    if spec is None:
        return default_refill(policy)
    if isinstance(spec, str):
        n = policy.assoc
        if spec == "asc":
            return list(range(n, 2 * n))
        if spec == "desc":
            return list(range(2 * n - 1, n - 1, -1))
        raise PolicyError(f"refill order must be asc, desc or a block list, got {spec!r}")
    return list(spec)


@dataclass(frozen=True)
class ChannelMap:
    policy: PolicyConfig
    refill: tuple[Block, ...]
    kind: FlushKind
    behavior: FlushBehavior
    entries: dict[Control, Control] = field(hash=False)

    def image(self) -> set[Control]:
        return set(self.entries.values())

    def preimages(self) -> dict[Control, list[Control]]:
        out: dict[Control, list[Control]] = {}
        for s, o in self.entries.items():
            out.setdefault(o, []).append(s)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["initial", "final"])
        for s, o in sorted(self.entries.items()):
            w.writerow([encode_control(self.policy, s), encode_control(self.policy, o)])
        return buf.getvalue()


def flush_refill_map(
    policy: PolicyConfig,
    kind: FlushKind = FlushKind.WBINVD,
    behavior: FlushBehavior = PRESERVE,
    refill_blocks: Sequence[Block] | None = None,
    states: Iterable[Control] | None = None,
    cap: int = DEFAULT_STATE_CAP,
) -> ChannelMap:
    """Map each pre-flush control state to the control state after flush and refill."""
    blocks = list(refill_blocks) if refill_blocks is not None else default_refill(policy)
    content = canonical_content(policy)
    if states is None:
        states = enumerate_control_states(policy, cap)
    entries = {}
    for s in states:
        after = refill(flush(filled_set(policy, content, s), kind, behavior), blocks)
        entries[tuple(s)] = after.control
    return ChannelMap(policy, tuple(blocks), kind, behavior, entries)
