"""Replacement-policy automata for a single cache set.

Two policies carry control state: tree-based PLRU and the quad-age LRU
variant known as New1 / QLRU_H00_M1_R2_U1.  A third, ``OPAQUE``, has a
single control state and stands in for caches whose post-flush behaviour
does not depend on history.

Every state is an immutable :class:`CacheSetState`; :func:`access` returns a
fresh state together with the hit/miss outcome.  Blocks are plain integers
(block ``3`` prints as ``I3``) and a line is either a block id or ``None``
for an invalid line.  Control states are plain tuples so they hash cheaply:
PLRU tree bits in breadth-first order (root first), QLRU ages one per way,
and ``()`` for the opaque policy.
"""

from __future__ import annotations

import enum
import itertools
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

Block = int
Line = Optional[int]
Control = Tuple[int, ...]

DEFAULT_STATE_CAP = 2**20


class PolicyError(ValueError):
    """Invalid policy configuration or malformed state."""


class InvariantViolation(RuntimeError):
    """A state reached a configuration the model guarantees cannot happen."""


class StateSpaceTooLarge(PolicyError):
    pass


class PolicyKind(enum.Enum):
    PLRU = "plru"
    QLRU = "qlru_h00_m1_r2_u1"
    OPAQUE = "opaque"


_KIND_ALIASES = {
    "plru": PolicyKind.PLRU,
    "tree-plru": PolicyKind.PLRU,
    "qlru": PolicyKind.QLRU,
    "qlru_h00_m1_r2_u1": PolicyKind.QLRU,
    "new1": PolicyKind.QLRU,
    "opaque": PolicyKind.OPAQUE,
}


def parse_kind(name: str) -> PolicyKind:
    try:
        return _KIND_ALIASES[name.strip().lower()]
    except KeyError:
        raise PolicyError(f"unknown policy {name!r}") from None


class Outcome(enum.Enum):
    HIT = "H"
    MISS = "M"

    def __str__(self) -> str:
        return self.value


HIT = Outcome.HIT
MISS = Outcome.MISS


@dataclass(frozen=True)
class PolicyConfig:
    kind: PolicyKind
    assoc: int

    def __post_init__(self) -> None:
        if not isinstance(self.assoc, int) or self.assoc < 2:
            raise PolicyError(f"associativity must be an integer >= 2, got {self.assoc!r}")
        if self.kind is PolicyKind.PLRU and self.assoc & (self.assoc - 1):
            raise PolicyError(f"associativity {self.assoc} is not a power of two")

    @classmethod
    def of(cls, kind: str | PolicyKind, assoc: int) -> "PolicyConfig":
        if not isinstance(kind, PolicyKind):
            kind = parse_kind(kind)
        return cls(kind, assoc)

    @property
    def levels(self) -> int:
        """Depth of the PLRU tree."""
        return self.assoc.bit_length() - 1

    def __str__(self) -> str:
        return f"{self.kind.value}-{self.assoc}"


def plru(assoc: int) -> PolicyConfig:
    return PolicyConfig(PolicyKind.PLRU, assoc)


def qlru(assoc: int) -> PolicyConfig:
    return PolicyConfig(PolicyKind.QLRU, assoc)


def opaque(assoc: int) -> PolicyConfig:
    return PolicyConfig(PolicyKind.OPAQUE, assoc)


@dataclass(frozen=True)
class CacheSetState:
    policy: PolicyConfig
    lines: Tuple[Line, ...]
    control: Control

    def __post_init__(self) -> None:
        n = self.policy.assoc
        if len(self.lines) != n:
            raise PolicyError(f"expected {n} lines, got {len(self.lines)}")
        valid = [b for b in self.lines if b is not None]
        if len(set(valid)) != len(valid):
            raise PolicyError(f"block resident in more than one way: {self.lines}")
        kind = self.policy.kind
        if kind is PolicyKind.PLRU:
            if len(self.control) != n - 1 or any(b not in (0, 1) for b in self.control):
                raise PolicyError(f"bad PLRU control {self.control!r}")
        elif kind is PolicyKind.QLRU:
            if len(self.control) != n or any(a not in (0, 1, 2, 3) for a in self.control):
                raise PolicyError(f"bad QLRU control {self.control!r}")
        elif self.control != ():
            raise PolicyError("opaque policy has no control bits")

    @classmethod
    def _raw(cls, policy: PolicyConfig, lines: tuple, control: Control) -> "CacheSetState":
        # transitions produce well-formed states by construction; skip validation
        obj = object.__new__(cls)
        object.__setattr__(obj, "policy", policy)
        object.__setattr__(obj, "lines", lines)
        object.__setattr__(obj, "control", control)
        return obj

    def way_of(self, block: Block) -> Optional[int]:
        try:
            return self.lines.index(block)
        except ValueError:
            return None

    @property
    def full(self) -> bool:
        return None not in self.lines

    def __str__(self) -> str:
        content = " ".join("-" if b is None else block_name(b) for b in self.lines)
        return f"[{content}] {encode_control(self.policy, self.control, self.lines)}"


def block_name(block: Block) -> str:
    return f"I{block}"


def parse_block(token: str) -> Block:
    token = token.strip()
    if len(token) < 2 or token[0] not in "Ii" or not token[1:].isdigit():
        raise PolicyError(f"bad block name {token!r}, expected I<digits>")
    return int(token[1:])


def parse_blocks(text: str) -> list[Block]:
    return [parse_block(t) for t in text.replace(",", " ").replace("·", " ").split()]


# -- canonical text encodings ----------------------------------------------


def encode_control(policy: PolicyConfig, control: Control, lines: Sequence[Line] | None = None) -> str:
    """Canonical text for a control state.

    PLRU: the bit string, root first.  QLRU: comma-joined ages with ``*``
    on invalid ways (only when ``lines`` is given).  Opaque: ``-``.
    """
    kind = policy.kind
    if kind is PolicyKind.PLRU:
        return "".join(map(str, control))
    if kind is PolicyKind.QLRU:
        if lines is None:
            return ",".join(map(str, control))
        return ",".join(f"{a}*" if b is None else str(a) for a, b in zip(control, lines))
    return "-"


def decode_control(policy: PolicyConfig, text: str) -> Control:
    text = text.strip()
    kind = policy.kind
    if kind is PolicyKind.PLRU:
        if len(text) != policy.assoc - 1 or set(text) - {"0", "1"}:
            raise PolicyError(f"bad PLRU state {text!r} for {policy}")
        return tuple(int(c) for c in text)
    if kind is PolicyKind.QLRU:
        parts = [p.strip().rstrip("*") for p in text.split(",")]
        if len(parts) != policy.assoc or any(p not in ("0", "1", "2", "3") for p in parts):
            raise PolicyError(f"bad QLRU state {text!r} for {policy}")
        return tuple(int(p) for p in parts)
    if text not in ("", "-"):
        raise PolicyError(f"opaque policy has a single state, got {text!r}")
    return ()


# -- construction -----------------------------------------------------------


def default_control(policy: PolicyConfig) -> Control:
    if policy.kind is PolicyKind.PLRU:
        return (0,) * (policy.assoc - 1)
    if policy.kind is PolicyKind.QLRU:
        # all-3 keeps normalization a no-op while an empty set is filled
        return (3,) * policy.assoc
    return ()


def new_empty_set(policy: PolicyConfig) -> CacheSetState:
    return CacheSetState(policy, (None,) * policy.assoc, default_control(policy))


def filled_set(policy: PolicyConfig, content: Sequence[Block], control: Control) -> CacheSetState:
    """A full set holding ``content[i]`` in way ``i`` with the given control state."""
    if len(content) != policy.assoc:
        raise PolicyError(f"content must fill all {policy.assoc} ways")
    return CacheSetState(policy, tuple(content), tuple(control))


def fill_order(policy: PolicyConfig, content: Sequence[Block]) -> list[Block]:
    """Access order that places ``content[i]`` in way ``i`` on an empty set.

    PLRU and opaque sets fill invalid lines left to right, QLRU right to left.
    """
    if policy.kind is PolicyKind.QLRU:
        return list(reversed(content))
    return list(content)


def fresh_fill(policy: PolicyConfig, content: Sequence[Block]) -> CacheSetState:
    state, _ = run_sequence(new_empty_set(policy), fill_order(policy, content))
    if state.lines != tuple(content):
        raise InvariantViolation(f"fill produced {state.lines}, expected {tuple(content)}")
    return state


# -- PLRU tree helpers ------------------------------------------------------


def _plru_touch(bits: Control, way: int, assoc: int) -> Control:
    """Point every ancestor of ``way`` away from it."""
    out = list(bits)
    node = assoc - 1 + way
    while node:
        parent = (node - 1) // 2
        # left child has odd index; arrow away from the left child is 1
        out[parent] = 1 if node & 1 else 0
        node = parent
    return tuple(out)


def _plru_victim(bits: Control, assoc: int) -> int:
    node = 0
    while node < assoc - 1:
        node = 2 * node + 1 + bits[node]
    return node - (assoc - 1)


def plru_ancestors(way: int, assoc: int) -> list[int]:
    """Indices of the tree bits above ``way``, root first."""
    path = []
    node = assoc - 1 + way
    while node:
        node = (node - 1) // 2
        path.append(node)
    return path[::-1]


# -- QLRU helpers -----------------------------------------------------------


def _qlru_normalize(ages: list[int], touched: int) -> None:
    while 3 not in ages:
        for i in range(len(ages)):
            if i != touched:
                ages[i] += 1


# -- transitions ------------------------------------------------------------


def victim_way(state: CacheSetState) -> Optional[int]:
    """Way that the next miss would fill."""
    lines = state.lines
    kind = state.policy.kind
    if kind is PolicyKind.QLRU:
        for w in range(len(lines) - 1, -1, -1):
            if lines[w] is None:
                return w
        try:
            return state.control.index(3)
        except ValueError:
            raise InvariantViolation(f"full QLRU set without an age-3 way: {state}") from None
    if None in lines:
        return lines.index(None)
    if kind is PolicyKind.PLRU:
        return _plru_victim(state.control, state.policy.assoc)
    return 0


def access(state: CacheSetState, block: Block) -> tuple[CacheSetState, Outcome]:
    policy = state.policy
    lines = state.lines
    kind = policy.kind
    try:
        way = lines.index(block)
    except ValueError:
        way = -1

    if kind is PolicyKind.PLRU:
        if way >= 0:
            return CacheSetState._raw(policy, lines, _plru_touch(state.control, way, policy.assoc)), HIT
        new_lines = list(lines)
        if None in lines:
            # filling an invalid line leaves the tree untouched
            new_lines[lines.index(None)] = block
            return CacheSetState._raw(policy, tuple(new_lines), state.control), MISS
        way = _plru_victim(state.control, policy.assoc)
        new_lines[way] = block
        return CacheSetState._raw(policy, tuple(new_lines), _plru_touch(state.control, way, policy.assoc)), MISS

    if kind is PolicyKind.QLRU:
        ages = list(state.control)
        if way >= 0:
            ages[way] = 0
            _qlru_normalize(ages, way)
            return CacheSetState._raw(policy, lines, tuple(ages)), HIT
        way = victim_way(state)
        new_lines = list(lines)
        if lines[way] is None:
            ages[way] = 0 if ages[way] == 0 else 1
        else:
            ages[way] = 1
        new_lines[way] = block
        _qlru_normalize(ages, way)
        return CacheSetState._raw(policy, tuple(new_lines), tuple(ages)), MISS

    if way >= 0:
        return state, HIT
    new_lines = list(lines)
    new_lines[victim_way(state)] = block
    return CacheSetState._raw(policy, tuple(new_lines), ()), MISS


def run_sequence(state: CacheSetState, blocks: Iterable[Block]) -> tuple[CacheSetState, list[Outcome]]:
    trace = []
    for b in blocks:
        state, outcome = access(state, b)
        trace.append(outcome)
    return state, trace


def format_trace(trace: Iterable[Outcome], long: bool = False) -> str:
    if long:
        return " ".join("Hit" if o is HIT else "Miss" for o in trace)
    return " ".join(o.value for o in trace)


# -- state spaces -----------------------------------------------------------


def count_valid_states_closed_form(policy: PolicyConfig) -> int:
    n = policy.assoc
    if policy.kind is PolicyKind.PLRU:
        return 2 ** (n - 1)
    if policy.kind is PolicyKind.QLRU:
        # all vectors, minus those lacking an age-3 way, minus those lacking
        # an age-0/1 way, plus the all-2 vector removed twice
        return 4**n - 3**n - 2**n + 1
    return 1


def enumerate_control_states(policy: PolicyConfig, cap: int = DEFAULT_STATE_CAP) -> list[Control]:
    """All control states of a full set, sorted."""
    size = count_valid_states_closed_form(policy)
    if size > cap:
        raise StateSpaceTooLarge(f"{policy} has {size} control states, cap is {cap}")
    n = policy.assoc
    if policy.kind is PolicyKind.PLRU:
        return list(itertools.product((0, 1), repeat=n - 1))
    if policy.kind is PolicyKind.QLRU:
        return [
            ages
            for ages in itertools.product(range(4), repeat=n)
            if 3 in ages and (0 in ages or 1 in ages)
        ]
    return [()]


def reachable_control_states(policy: PolicyConfig, extra_blocks: int = 2) -> set[Control]:
    """Control states reachable from a freshly filled set.

    Breadth-first search over every access to ``assoc + extra_blocks``
    blocks, tracking full set states (content included).
    """
    content = list(range(policy.assoc))
    alphabet = list(range(policy.assoc + extra_blocks))
    start = fresh_fill(policy, content)
    seen = {start}
    queue = deque([start])
    while queue:
        s = queue.popleft()
        for b in alphabet:
            t, _ = access(s, b)
            if t not in seen:
                seen.add(t)
                queue.append(t)
    return {s.control for s in seen}


def find_setup_sequence(
    policy: PolicyConfig,
    content: Sequence[Block],
    target: Control,
    max_len: int,
    start: Control | None = None,
) -> Optional[list[Block]]:
    """Shortest hit-only access sequence driving a filled set to ``target``.

    Starts from the freshly filled set (or from ``start`` if given).  Among
    shortest sequences the lexicographically smallest is returned.
    """
    if len(set(content)) != len(content) or len(content) != policy.assoc:
        raise PolicyError("content must be assoc distinct blocks")
    origin = fresh_fill(policy, content) if start is None else filled_set(policy, content, start)
    target = tuple(target)
    if origin.control == target:
        return []
    alphabet = sorted(content)
    parent: dict[Control, tuple[Control, Block] | None] = {origin.control: None}
    frontier = [origin.control]
    for _ in range(max_len):
        nxt = []
        for ctl in frontier:
            s = CacheSetState._raw(policy, origin.lines, ctl)
            for b in alphabet:
                t, _ = access(s, b)
                if t.control in parent:
                    continue
                parent[t.control] = (ctl, b)
                if t.control == target:
                    seq = []
                    cur = target
                    while parent[cur] is not None:
                        cur, blk = parent[cur]
                        seq.append(blk)
                    return seq[::-1]
                nxt.append(t.control)
        frontier = nxt
        if not frontier:
            break
    return None
