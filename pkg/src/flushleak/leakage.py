"""Mutual information between pre-flush and post-refill control states."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

from .flush import PRESERVE, ChannelMap, FlushBehavior, FlushKind, flush_refill_map
from .policy import Control, PolicyConfig, encode_control


class PriorError(ValueError):
    pass


@dataclass(frozen=True)
class LeakageReport:
    state_count: int
    h_s: float
    h_s_given_o: float
    leakage: float
    image_size: int
    preimage_histogram: dict[str, int]

    def to_json(self) -> dict:
        return {
            "state_count": self.state_count,
            "h_s": round(self.h_s, 3),
            "h_s_given_o": round(self.h_s_given_o, 3),
            "leakage_bits": round(self.leakage, 3),
            "image_size": self.image_size,
            "preimage_histogram": dict(self.preimage_histogram),
        }


def _entropy(weights) -> float:
    return -sum(p * math.log2(p) for p in weights if p > 0)


def mutual_information(channel: ChannelMap, prior: Mapping[Control, float] | None = None) -> LeakageReport:
    """I(S;O) of a deterministic channel; uniform prior unless weights are given."""
    entries = channel.entries
    n = len(entries)
    pre = channel.preimages()
    histogram = {encode_control(channel.policy, o): len(ss) for o, ss in sorted(pre.items())}

    if prior is None:
        h_s = math.log2(n) if n else 0.0
        h_cond = sum(len(ss) / n * math.log2(len(ss)) for ss in pre.values())
    else:
        if set(prior) != set(entries):
            raise PriorError("prior must assign a weight to every state of the channel")
        if any(w < 0 for w in prior.values()):
            raise PriorError("prior weights must be nonnegative")
        if not math.isclose(sum(prior.values()), 1.0, abs_tol=1e-9):
            raise PriorError("prior weights must sum to 1")
        h_s = _entropy(prior.values())
        h_cond = 0.0
        for ss in pre.values():
            p_o = sum(prior[s] for s in ss)
            if p_o > 0:
                h_cond += p_o * _entropy(prior[s] / p_o for s in ss)

    return LeakageReport(
        state_count=n,
        h_s=h_s,
        h_s_given_o=h_cond,
        leakage=max(h_s - h_cond, 0.0),
        image_size=len(pre),
        preimage_histogram=histogram,
    )


@lru_cache(maxsize=None)
def leakage_for_cache_level(policy: PolicyConfig, behavior: FlushBehavior = PRESERVE) -> float:
    return mutual_information(flush_refill_map(policy, FlushKind.WBINVD, behavior)).leakage
