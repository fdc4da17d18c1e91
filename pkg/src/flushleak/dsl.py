"""A tiny access-pattern language for scripting cache-set experiments.

Example (``.fg`` file)::

    @policy=plru @assoc=8
    I0 I1 I2 I3 I4 I5 I6 I7   # fill
    I0 I2 I4 I6               # reset sequence
    wbinvd
    I8? I9?                   # observed accesses

Tokens are whitespace separated and ``#`` starts a comment.  Pragmas
(``@key=value``) must come before any statement.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Mapping, Union

from .flush import FlushBehavior, FlushKind, clflush, flush
from .policy import (
    Block,
    CacheSetState,
    Outcome,
    PolicyConfig,
    PolicyError,
    PolicyKind,
    access,
    new_empty_set,
    parse_kind,
)

log = logging.getLogger(__name__)

PRAGMA_KEYS = ("policy", "assoc", "flush")
DEFAULTS = {"policy": "plru", "assoc": "8", "flush": "preserve"}
KEYWORDS = {"wbinvd", "flushcmd", "clflush"}

_IDENT = re.compile(r"[A-Za-z0-9_]+\Z")
_NUMBERED = re.compile(r"I(\d+)\Z")


class ScriptError(ValueError):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.line, self.col = line, col
        where = f"{line}:{col}: " if line else ""
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class Access:
    block: str
    observed: bool = False


@dataclass(frozen=True)
class Wbinvd:
    pass


@dataclass(frozen=True)
class FlushCmd:
    pass


@dataclass(frozen=True)
class Clflush:
    block: str


Statement = Union[Access, Wbinvd, FlushCmd, Clflush]


@dataclass(frozen=True)
class Program:
    pragmas: dict[str, str] = field(default_factory=dict)
    statements: tuple[Statement, ...] = ()

    def render(self) -> str:
        head = " ".join(f"@{k}={v}" for k, v in self.pragmas.items())
        body = []
        for st in self.statements:
            if isinstance(st, Access):
                body.append(st.block + ("?" if st.observed else ""))
            elif isinstance(st, Wbinvd):
                body.append("wbinvd")
            elif isinstance(st, FlushCmd):
                body.append("flushcmd")
            else:
                body.append(f"clflush {st.block}")
        return "\n".join(part for part in (head, " ".join(body)) if part) + "\n"


def _tokens(text: str):
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0]
        for m in re.finditer(r"\S+", line):
            yield m.group(), lineno, m.start() + 1


def _check_ident(tok: str, line: int, col: int) -> str:
    if not _IDENT.match(tok) or tok in KEYWORDS:
        raise ScriptError(f"invalid block identifier {tok!r}", line, col)
    return tok


def parse(text: str | bytes) -> Program:
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ScriptError(f"input is not UTF-8 (byte offset {e.start})") from None

    pragmas: dict[str, str] = {}
    statements: list[Statement] = []
    toks = list(_tokens(text))
    i = 0
    while i < len(toks):
        tok, line, col = toks[i]
        i += 1
        if tok.startswith("@"):
            if statements:
                raise ScriptError("pragma after the first statement", line, col)
            key, sep, value = tok[1:].partition("=")
            if not sep or not value:
                raise ScriptError(f"malformed pragma {tok!r}, expected @key=value", line, col)
            if key not in PRAGMA_KEYS:
                raise ScriptError(f"unknown pragma {key!r}", line, col)
            if key == "assoc" and not re.fullmatch(r"[0-9]+", value):
                raise ScriptError(f"assoc must be an integer, got {value!r}", line, col)
            if key == "flush" and value not in ("preserve", "reset"):
                raise ScriptError(f"flush must be preserve or reset, got {value!r}", line, col)
            if key == "policy":
                try:
                    parse_kind(value)
                except PolicyError as e:
                    raise ScriptError(str(e), line, col) from None
            pragmas[key] = value
        elif tok == "wbinvd":
            statements.append(Wbinvd())
        elif tok == "flushcmd":
            statements.append(FlushCmd())
        elif tok == "clflush":
            if i >= len(toks):
                raise ScriptError("clflush needs a block operand", line, col)
            operand, oline, ocol = toks[i]
            i += 1
            statements.append(Clflush(_check_ident(operand, oline, ocol)))
        else:
            observed = tok.endswith("?")
            name = tok[:-1] if observed else tok
            statements.append(Access(_check_ident(name, line, col), observed))
    return Program(pragmas, tuple(statements))


def _block_ids(program: Program) -> dict[str, Block]:
    """``I<n>`` maps to ``n``; bare names get ids above every numbered block."""
    names = [st.block for st in program.statements if isinstance(st, (Access, Clflush))]
    ids: dict[str, Block] = {}
    for name in names:
        m = _NUMBERED.match(name)
        if m:
            ids[name] = int(m.group(1))
    nxt = max(ids.values(), default=-1) + 1
    for name in names:
        if name not in ids:
            ids[name] = nxt
            nxt += 1
    return ids


@dataclass
class EvalResult:
    outcomes: list[Outcome]
    state: CacheSetState
    warnings: list[str] = field(default_factory=list)

    def observation_string(self) -> str:
        return " ".join(o.value for o in self.outcomes)


def settings(program: Program, overrides: Mapping[str, object] | None = None) -> tuple[PolicyConfig, FlushBehavior]:
    merged = {**DEFAULTS, **program.pragmas}
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = str(v)
    policy = PolicyConfig.of(merged["policy"], int(merged["assoc"]))
    return policy, FlushBehavior(merged["flush"])


def evaluate(program: Program, overrides: Mapping[str, object] | None = None) -> EvalResult:
    policy, behavior = settings(program, overrides)
    ids = _block_ids(program)
    state = new_empty_set(policy)
    outcomes: list[Outcome] = []
    warnings: list[str] = []
    for st in program.statements:
        if isinstance(st, Access):
            state, o = access(state, ids[st.block])
            if st.observed:
                outcomes.append(o)
        elif isinstance(st, Wbinvd):
            state = flush(state, FlushKind.WBINVD, behavior)
        elif isinstance(st, FlushCmd):
            if policy.kind is not PolicyKind.PLRU:
                msg = "flushcmd only exists for L1 caches; modelling it as wbinvd"
                log.warning(msg)
                warnings.append(msg)
            state = flush(state, FlushKind.FLUSH_CMD, behavior)
        else:
            state = clflush(state, ids[st.block], behavior)
    return EvalResult(outcomes, state, warnings)


def run_script(text: str | bytes, overrides: Mapping[str, object] | None = None) -> EvalResult:
    return evaluate(parse(text), overrides)
