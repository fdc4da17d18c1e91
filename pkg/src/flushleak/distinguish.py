"""Partitions, distinguishing sequences, state identification and reset sequences.

All searches work on a filled set whose content is fixed (``content[i]`` in
way ``i``) and whose initial control state is unknown.  An observation is the
hit/miss trace of an access sequence; since accesses to fresh blocks evict
resident ones, probing destroys the information it is trying to read.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol, Sequence, Union

from .policy import (
    HIT,
    Block,
    CacheSetState,
    Control,
    Outcome,
    PolicyConfig,
    PolicyError,
    access,
    block_name,
    encode_control,
    enumerate_control_states,
    filled_set,
    format_trace,
    run_sequence,
)

DEFAULT_SEARCH_CAP = 10**7


class SearchLimitExceeded(RuntimeError):
    pass


class OracleMismatch(RuntimeError):
    """The oracle produced an observation no remaining candidate explains."""


def default_alphabet(content: Sequence[Block], fresh: int = 1) -> list[Block]:
    start = max(content) + 1
    return sorted(content) + list(range(start, start + fresh))


def _initial(policy: PolicyConfig, content: Sequence[Block], states: Iterable[Control]) -> list[tuple[Control, CacheSetState]]:
    return [(tuple(s), filled_set(policy, content, s)) for s in states]


def _sort_key(policy: PolicyConfig):
    return lambda s: encode_control(policy, s)


# -- partitions -------------------------------------------------------------


@dataclass(frozen=True)
class Partition:
    """Initial control states grouped by the trace they produce."""

    cells: tuple[frozenset, ...]
    traces: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.cells)

    def sizes(self) -> list[int]:
        return sorted(len(c) for c in self.cells)

    def cell_of(self, state: Control) -> frozenset:
        for c in self.cells:
            if state in c:
                return c
        raise KeyError(state)

    def refines(self, other: "Partition") -> bool:
        """True if every cell of ``self`` lies inside a cell of ``other``."""
        return all(any(c <= d for d in other.cells) for c in self.cells)

    def to_json(self, policy: PolicyConfig) -> list[dict]:
        key = _sort_key(policy)
        return [
            {"trace": t, "states": [encode_control(policy, s) for s in sorted(c, key=key)]}
            for t, c in zip(self.traces, self.cells)
        ]


def partition_by_sequence(
    policy: PolicyConfig,
    content: Sequence[Block],
    states: Iterable[Control],
    seq: Sequence[Block],
) -> Partition:
    groups: dict[str, set] = {}
    for s, cfg in _initial(policy, content, states):
        _, trace = run_sequence(cfg, seq)
        groups.setdefault(format_trace(trace), set()).add(s)
    traces = sorted(groups)
    return Partition(tuple(frozenset(groups[t]) for t in traces), tuple(traces))


def _split(group: list[tuple[Control, CacheSetState]], block: Block):
    hit, miss = [], []
    for s, cfg in group:
        t, o = access(cfg, block)
        (hit if o is HIT else miss).append((s, t))
    return hit, miss


def _refinement_bound(groups) -> int:
    # inits sharing a current configuration can never be separated again
    return sum(len({cfg for _, cfg in g}) for g in groups)


def best_preset_sequence(
    policy: PolicyConfig,
    content: Sequence[Block],
    states: Iterable[Control] | None = None,
    alphabet: Sequence[Block] | None = None,
    max_len: int = 4,
    cap: int = DEFAULT_SEARCH_CAP,
) -> tuple[list[Block], Partition]:
    """Exhaustive search for the preset sequence with the finest partition.

    Ties go to the shorter, then lexicographically smaller sequence.
    Prefixes whose partition can no longer be refined, or whose refinement
    bound cannot beat the incumbent, are not extended.
    """
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    if states is None:
        states = enumerate_control_states(policy)
    states = list(states)
    alphabet = sorted(alphabet) if alphabet is not None else default_alphabet(content)
    root = [_initial(policy, content, states)]
    best: list = [1, []]  # (cells, sequence); empty sequence gives one cell
    work = 0

    def dfs(groups, prefix):
        nonlocal work
        for a in alphabet:
            work += sum(len(g) for g in groups)
            if work > cap:
                raise SearchLimitExceeded(f"preset search exceeded {cap} simulated steps")
            new = []
            for g in groups:
                h, m = _split(g, a)
                if h:
                    new.append(h)
                if m:
                    new.append(m)
            seq = prefix + [a]
            cells = len(new)
            if cells > best[0] or (cells == best[0] and (len(seq), seq) < (len(best[1]), best[1])):
                best[0], best[1] = cells, seq
            if len(seq) >= max_len:
                continue
            bound = _refinement_bound(new)
            if bound == cells or bound < best[0]:
                continue
            if bound == best[0] and len(best[1]) <= len(seq):
                continue
            dfs(new, seq)

    dfs(root, [])
    seq = best[1]
    return seq, partition_by_sequence(policy, content, states, seq)


# -- adaptive trees ---------------------------------------------------------


@dataclass(frozen=True)
class Leaf:
    states: frozenset


@dataclass(frozen=True)
class Inner:
    access: Block
    states: frozenset
    on_hit: Optional["Node"]
    on_miss: Optional["Node"]


Node = Union[Leaf, Inner]


@dataclass
class DistinguishTree:
    policy: PolicyConfig
    root: Node

    def leaves(self) -> list[Leaf]:
        out, stack = [], [self.root]
        while stack:
            n = stack.pop()
            if isinstance(n, Leaf):
                out.append(n)
            else:
                stack.extend(c for c in (n.on_miss, n.on_hit) if c is not None)
        return out

    def partition(self) -> Partition:
        cells, traces = [], []

        def walk(n, trace):
            if isinstance(n, Leaf):
                cells.append(n.states)
                traces.append(" ".join(trace))
                return
            for child, o in ((n.on_hit, "H"), (n.on_miss, "M")):
                if child is not None:
                    walk(child, trace + [o])

        walk(self.root, [])
        return Partition(tuple(cells), tuple(traces))

    def depth(self) -> int:
        def d(n):
            if isinstance(n, Leaf):
                return 0
            return 1 + max(d(c) for c in (n.on_hit, n.on_miss) if c is not None)

        return d(self.root)

    def _fmt(self, states) -> str:
        return "{" + ", ".join(encode_control(self.policy, s) for s in sorted(states, key=_sort_key(self.policy))) + "}"

    def render(self) -> str:
        lines = []

        def walk(n, indent, label):
            pad = "  " * indent
            if isinstance(n, Leaf):
                lines.append(f"{pad}{label}{self._fmt(n.states)}")
                return
            lines.append(f"{pad}{label}{block_name(n.access)}  ({len(n.states)} states)")
            for child, o in ((n.on_hit, "H"), (n.on_miss, "M")):
                if child is not None:
                    walk(child, indent + 1, f"{block_name(n.access)}/{o}: ")

        walk(self.root, 0, "")
        return "\n".join(lines)

    def to_json(self) -> dict:
        def enc(n):
            states = [encode_control(self.policy, s) for s in sorted(n.states, key=_sort_key(self.policy))]
            if isinstance(n, Leaf):
                return {"leaf": states}
            return {
                "access": block_name(n.access),
                "states": states,
                "hit": enc(n.on_hit) if n.on_hit is not None else None,
                "miss": enc(n.on_miss) if n.on_miss is not None else None,
            }

        return enc(self.root)


def best_adaptive_tree(
    policy: PolicyConfig,
    content: Sequence[Block],
    states: Iterable[Control] | None = None,
    alphabet: Sequence[Block] | None = None,
    max_depth: int = 4,
    cap: int = DEFAULT_SEARCH_CAP,
) -> DistinguishTree:
    """Decision tree maximizing the number of leaves within ``max_depth`` probes."""
    if states is None:
        states = enumerate_control_states(policy)
    alphabet = sorted(alphabet) if alphabet is not None else default_alphabet(content)
    memo: dict[tuple[frozenset, int], tuple[int, Optional[Block]]] = {}
    work = 0

    def value(cfgs: frozenset, depth: int) -> tuple[int, Optional[Block]]:
        nonlocal work
        if depth == 0 or len(cfgs) == 1:
            return 1, None
        key = (cfgs, depth)
        if key in memo:
            return memo[key]
        best, best_a = 1, None
        for a in alphabet:
            work += len(cfgs)
            if work > cap:
                raise SearchLimitExceeded(f"adaptive search exceeded {cap} simulated steps")
            hit, miss = set(), set()
            for c in cfgs:
                t, o = access(c, a)
                (hit if o is HIT else miss).add(t)
            v = (value(frozenset(hit), depth - 1)[0] if hit else 0) + (
                value(frozenset(miss), depth - 1)[0] if miss else 0
            )
            if v > best:
                best, best_a = v, a
                if best == len(cfgs):
                    break
        memo[key] = (best, best_a)
        return best, best_a

    def build(group: list[tuple[Control, CacheSetState]], depth: int) -> Node:
        inits = frozenset(s for s, _ in group)
        _, a = value(frozenset(c for _, c in group), depth)
        if a is None:
            return Leaf(inits)
        hit, miss = _split(group, a)
        return Inner(
            a,
            inits,
            build(hit, depth - 1) if hit else None,
            build(miss, depth - 1) if miss else None,
        )

    return DistinguishTree(policy, build(_initial(policy, content, states), max_depth))


# -- trace equivalence ------------------------------------------------------


def find_splitting_sequence(
    cfgs: Iterable[CacheSetState],
    alphabet: Sequence[Block],
    depth: int,
) -> Optional[list[Block]]:
    """Shortest sequence whose last access separates some of ``cfgs`` by outcome.

    Breadth-first over sets of simultaneous configurations; ``None`` if the
    configurations agree on every sequence of length ``<= depth``.
    """
    start = frozenset(cfgs)
    if len(start) < 2:
        return None
    parent: dict[frozenset, tuple[frozenset, Block] | None] = {start: None}
    frontier = [start]
    for _ in range(depth):
        nxt = []
        for node in frontier:
            for a in alphabet:
                outs = set()
                succ = set()
                for c in node:
                    t, o = access(c, a)
                    outs.add(o)
                    succ.add(t)
                if len(outs) > 1:
                    seq = [a]
                    cur = node
                    while parent[cur] is not None:
                        cur, b = parent[cur]
                        seq.append(b)
                    return seq[::-1]
                succ = frozenset(succ)
                if len(succ) > 1 and succ not in parent:
                    parent[succ] = (node, a)
                    nxt.append(succ)
        frontier = nxt
        if not frontier:
            break
    return None


def equivalence_classes(
    policy: PolicyConfig,
    content: Sequence[Block],
    states: Iterable[Control] | None = None,
    alphabet: Sequence[Block] | None = None,
    depth: int | None = None,
) -> list[frozenset]:
    """Group initial control states that no sequence of length <= depth separates."""
    if states is None:
        states = enumerate_control_states(policy)
    alphabet = sorted(alphabet) if alphabet is not None else default_alphabet(content)
    depth = 2 * policy.assoc if depth is None else depth
    todo = [frozenset(tuple(s) for s in states)]
    classes = []
    while todo:
        group = todo.pop()
        cfgs = {s: filled_set(policy, content, s) for s in group}
        seq = find_splitting_sequence(cfgs.values(), alphabet, depth)
        if seq is None:
            classes.append(group)
            continue
        todo.extend(partition_by_sequence(policy, content, group, seq).cells)
    return sorted(classes, key=lambda c: min(encode_control(policy, s) for s in c))


# -- destructive identification ---------------------------------------------


class HiddenStateOracle(Protocol):
    resets: int
    queries: int

    def reset_to_hidden(self) -> None: ...

    def access(self, block: Block) -> Outcome: ...


class SimulatorOracle:
    """A cache set whose initial control state is known only to the oracle."""

    def __init__(self, policy: PolicyConfig, content: Sequence[Block], hidden: Control):
        self._initial = filled_set(policy, content, hidden)
        self._state = self._initial
        self.resets = 0
        self.queries = 0

    def reset_to_hidden(self) -> None:
        self.resets += 1
        self._state = self._initial

    def access(self, block: Block) -> Outcome:
        self.queries += 1
        self._state, outcome = access(self._state, block)
        return outcome


@dataclass
class IdentifyResult:
    state: Control
    candidates: frozenset
    resets: int
    queries: int
    rounds: list[list[str]] = field(default_factory=list)


def identify_state(
    oracle: HiddenStateOracle,
    policy: PolicyConfig,
    content: Sequence[Block],
    strategy: str = "adaptive",
    seed: int = 0,
    candidates: Iterable[Control] | None = None,
    alphabet: Sequence[Block] | None = None,
    depth: int | None = None,
    max_queries: int = 100_000,
) -> IdentifyResult:
    """Identify the oracle's hidden control state by elimination.

    Each round restarts the oracle from the hidden state and probes it,
    dropping every candidate whose simulated outcome disagrees.  A round ends
    when the surviving candidates' current configurations can no longer be
    separated; identification ends when even a fresh round cannot separate
    them.  The result is the least encoding in the surviving class.
    """
    if strategy not in ("adaptive", "random"):
        raise ValueError(f"unknown strategy {strategy!r}")
    rng = random.Random(seed)
    alphabet = sorted(alphabet) if alphabet is not None else default_alphabet(content)
    depth = 2 * policy.assoc if depth is None else depth
    cands = set(tuple(s) for s in (candidates if candidates is not None else enumerate_control_states(policy)))
    start_resets, start_queries = oracle.resets, oracle.queries
    rounds: list[list[str]] = []

    def observe(current: dict, block: Block) -> dict:
        o = oracle.access(block)
        rounds[-1].append(f"{block_name(block)}/{o}")
        kept = {}
        for s, cfg in current.items():
            t, so = access(cfg, block)
            if so is o:
                kept[s] = t
        if not kept:
            raise OracleMismatch(f"observation {block_name(block)}/{o} rules out every candidate")
        return kept

    while len(cands) > 1:
        current = {s: filled_set(policy, content, s) for s in cands}
        probe = find_splitting_sequence(current.values(), alphabet, depth)
        if probe is None:
            break
        oracle.reset_to_hidden()
        rounds.append([])
        while probe is not None:
            if oracle.queries - start_queries > max_queries:
                raise SearchLimitExceeded(f"identification exceeded {max_queries} queries")
            before = len(current)
            if strategy == "random":
                current = observe(current, rng.choice(alphabet))
                if len(current) < before and len(current) > 1:
                    # progress was made; splittability is rechecked once probing stalls
                    continue
            else:
                for block in _best_split_prefix(current, alphabet, probe):
                    current = observe(current, block)
            probe = find_splitting_sequence(current.values(), alphabet, depth)
        cands = set(current)

    key = _sort_key(policy)
    rep = min(cands, key=key)
    return IdentifyResult(
        rep, frozenset(cands), oracle.resets - start_resets, oracle.queries - start_queries, rounds
    )


def _best_split_prefix(current: dict, alphabet: Sequence[Block], probe: list[Block]) -> list[Block]:
    """Most balanced immediately splitting access, else the searched probe."""
    if len(probe) > 1:
        return probe
    best, best_score = probe, None
    for a in alphabet:
        hits = sum(1 for cfg in current.values() if access(cfg, a)[1] is HIT)
        if 0 < hits < len(current):
            score = max(hits, len(current) - hits)
            if best_score is None or score < best_score:
                best, best_score = [a], score
    return best


# -- reset sequences --------------------------------------------------------


def verify_reset_sequence(policy: PolicyConfig, content: Sequence[Block], seq: Sequence[Block]) -> bool:
    return len(reset_targets(policy, content, seq)) == 1


def reset_targets(policy: PolicyConfig, content: Sequence[Block], seq: Sequence[Block]) -> set[Control]:
    """Control states reached by ``seq`` from every enumerated state."""
    return {run_sequence(filled_set(policy, content, s), seq)[0].control for s in enumerate_control_states(policy)}


def find_reset_sequence(policy: PolicyConfig, content: Sequence[Block], max_len: int) -> Optional[list[Block]]:
    """Shortest (then lexicographically least) hit-only synchronizing sequence."""
    if len(content) != policy.assoc or len(set(content)) != len(content):
        raise PolicyError("content must be assoc distinct blocks")
    lines = tuple(content)
    alphabet = sorted(content)
    start = frozenset(enumerate_control_states(policy))
    if len(start) == 1:
        return []
    parent: dict[frozenset, tuple[frozenset, Block] | None] = {start: None}
    frontier = [start]
    for _ in range(max_len):
        nxt = []
        for node in frontier:
            for a in alphabet:
                succ = frozenset(
                    access(CacheSetState._raw(policy, lines, c), a)[0].control for c in node
                )
                if succ in parent:
                    continue
                parent[succ] = (node, a)
                if len(succ) == 1:
                    seq = []
                    cur = succ
                    while parent[cur] is not None:
                        cur, b = parent[cur]
                        seq.append(b)
                    return seq[::-1]
                nxt.append(succ)
        frontier = nxt
        if not frontier:
            break
    return None


def enumerate_sequences(alphabet: Sequence[Block], length: int):
    return itertools.product(alphabet, repeat=length)
