"""End-to-end acceptance checks, each under its wall-clock limit.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import csv
import io
import itertools

from flushleak.attack import (
    AttackScenario,
    Classification,
    analyze_detection,
    plru_probe_predicts_hit,
    simulate_prime_probe,
    victim_blocks,
)
from flushleak.cli import main
from flushleak.distinguish import (
    SimulatorOracle,
    best_adaptive_tree,
    best_preset_sequence,
    find_reset_sequence,
    find_splitting_sequence,
    identify_state,
    partition_by_sequence,
    reset_targets,
    verify_reset_sequence,
)
from flushleak.flush import PRESERVE, RESET, FlushKind, flush, flush_refill_map, refill
from flushleak.leakage import mutual_information
from flushleak.policy import (
    HIT,
    MISS,
    count_valid_states_closed_form,
    encode_control,
    enumerate_control_states,
    filled_set,
    fresh_fill,
    plru,
    qlru,
    reachable_control_states,
    run_sequence,
    victim_way,
)

from property_checks import PROPERTIES, run_property

P8, P4, Q4 = plru(8), plru(4), qlru(4)


def test_01_plru_replay(criterion):
    with criterion(1, "PLRU replay", 1):
        s, _ = run_sequence(fresh_fill(P8, range(8)), [0, 2, 4, 6])
        assert encode_control(P8, s.control) == "0001111"
        assert victim_way(s) == 1
        s, _ = run_sequence(s, [4, 0])
        assert encode_control(P8, s.control) == "1111111"
        assert victim_way(s) == 7


def test_02_plru_flush_survival(criterion):
    with criterion(2, "PLRU flush survival", 1):
        ch = flush_refill_map(P8, FlushKind.WBINVD, PRESERVE, list(range(8, 16)))
        assert len(ch.entries) == 128
        assert all(a == b for a, b in ch.entries.items())
        assert mutual_information(ch).leakage == 7.0


def test_03_plru_eviction_order(criterion):
    with criterion(3, "PLRU eviction order", 1):
        s = fresh_fill(P8, range(8))
        s, _ = run_sequence(s, [0, 2, 4, 6, 4, 0])
        s = refill(flush(s, FlushKind.WBINVD, PRESERVE), list(range(8, 16)))
        assert s.control == (1,) * 7
        evicted = []
        for b in range(16, 24):
            evicted.append(s.lines[victim_way(s)])
            s, o = run_sequence(s, [b])
            assert o == [MISS]
        assert evicted == [15, 11, 13, 9, 14, 10, 12, 8]


def test_04_qlru_state_space(criterion):
    with criterion(4, "QLRU state space", 5):
        states = enumerate_control_states(Q4)
        assert len(states) == 160
        assert count_valid_states_closed_form(Q4) == 4**4 - 3**4 - 2**4 + 1 == 160
        assert set(states) == reachable_control_states(Q4)


def test_05_qlru_replay(criterion):
    with criterion(5, "QLRU replay", 1):
        refill_blocks = [7, 6, 5, 4]
        a, _ = run_sequence(fresh_fill(Q4, range(4)), [0, 1, 2, 0, 1])
        assert list(a.control) == [0, 0, 0, 3]
        b = refill(flush(a, FlushKind.WBINVD, PRESERVE), refill_blocks)
        assert list(b.control) == [1, 3, 3, 3]
        assert b.lines[victim_way(b)] == 5
        c, _ = run_sequence(a, [3, 1])
        assert list(c.control) == [3, 0, 3, 0]
        d = refill(flush(c, FlushKind.WBINVD, PRESERVE), refill_blocks)
        assert list(d.control) == [1, 2, 3, 2]
        assert d.lines[victim_way(d)] == 6


def _qlru_refill_by_rules(ages):
    # hit -> 0; fill keeps 0 else 1; age the others until one reaches 3; right to left
    ages = list(ages)
    for way in (3, 2, 1, 0):
        ages[way] = 0 if ages[way] == 0 else 1
        while 3 not in ages:
            ages = [x if i == way else x + 1 for i, x in enumerate(ages)]
    return tuple(ages)


def test_06_qlru_channel(criterion):
    with criterion(6, "QLRU channel", 5):
        ch = flush_refill_map(Q4, FlushKind.WBINVD, PRESERVE, [7, 6, 5, 4])
        assert len(ch.entries) == 160
        assert len(ch.image()) == 11
        assert round(mutual_information(ch).leakage, 2) == 3.17
        assert all(out == _qlru_refill_by_rules(s) for s, out in ch.entries.items())


def test_07_clflush_equivalence(criterion):
    with criterion(7, "clflush equivalence", 5):
        for p in (P8, Q4):
            content = list(range(p.assoc))
            for behavior in (PRESERVE, RESET):
                for s in enumerate_control_states(p):
                    cfg = filled_set(p, content, s)
                    assert flush(cfg, FlushKind.CLFLUSH_EACH, behavior) == flush(cfg, FlushKind.WBINVD, behavior)


def test_08_reset_semantics(criterion):
    with criterion(8, "control-reset semantics", 5):
        for p in (P8, Q4):
            for kind in (FlushKind.WBINVD, FlushKind.CLFLUSH_EACH):
                ch = flush_refill_map(p, kind, RESET)
                assert len(ch.image()) == 1
                assert round(mutual_information(ch).leakage, 3) == 0.0


# expected leakage in bits per (microarch, level), rounded to two decimals
EXPECTED_LEAKAGE = {
    ("Nehalem", "L1"): 0, ("Nehalem", "L2"): 0, ("Nehalem", "L3"): 0,
    ("Westmere", "L1"): 0, ("Westmere", "L2"): 0, ("Westmere", "L3"): 0,
    ("Sandy Bridge", "L1"): 7, ("Sandy Bridge", "L2"): 0, ("Sandy Bridge", "L3"): 0,
    ("Ivy Bridge", "L1"): 7, ("Ivy Bridge", "L2"): 0, ("Ivy Bridge", "L3"): 0,
    ("Haswell", "L1"): 7, ("Haswell", "L2"): 0, ("Haswell", "L3"): 0,
    ("Broadwell", "L1"): 7, ("Broadwell", "L2"): 0, ("Broadwell", "L3"): 0,
    ("Skylake", "L1"): 0, ("Skylake", "L2"): 3.17, ("Skylake", "L3"): 0,
    ("Kaby Lake", "L1"): 0, ("Kaby Lake", "L2"): 3.17, ("Kaby Lake", "L3"): 0,
    ("Coffee Lake", "L1"): 0, ("Coffee Lake", "L2"): 3.17, ("Coffee Lake", "L3"): 0,
    ("Cannon Lake", "L1"): 0, ("Cannon Lake", "L2"): 0, ("Cannon Lake", "L3"): 0,
    ("Ice Lake", "L1"): 0, ("Ice Lake", "L2"): 0, ("Ice Lake", "L3"): 0,
}


def test_09_table_reproduction(criterion, capsys):
    with criterion(9, "leakage table reproduction", 10):
        assert main(["table", "--configs", "bundled"]) == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert len(rows) == 33
        got = {(r["microarch"], r["level"]): round(float(r["leakage_bits"]), 2) for r in rows}
        assert got == {k: float(v) for k, v in EXPECTED_LEAKAGE.items()}


def test_10_distinguishing_sequences(criterion):
    with criterion(10, "distinguishing sequences", 10):
        content = [0, 1, 2, 3]
        part = partition_by_sequence(P4, content, enumerate_control_states(P4), [4, 0, 1, 2])
        assert len(part) == 6 and part.sizes() == [1, 1, 1, 1, 2, 2]
        _, best = best_preset_sequence(P4, content, max_len=4)
        assert len(best) == 6
        assert len(best_adaptive_tree(P4, content, max_depth=4).leaves()) == 6


def test_11_reset_sequence(criterion):
    with criterion(11, "reset sequence", 5):
        content = list(range(8))
        assert verify_reset_sequence(P8, content, [0, 2, 4, 6])
        assert reset_targets(P8, content, [0, 2, 4, 6]) == {(0, 0, 0, 1, 1, 1, 1)}
        seq = find_reset_sequence(P8, content, max_len=8)
        assert seq is not None and len(seq) <= 4


def test_12_state_identification(criterion):
    with criterion(12, "state identification", 30):
        c8 = list(range(8))
        for hidden in enumerate_control_states(P8):
            res = identify_state(SimulatorOracle(P8, c8, hidden), P8, c8)
            assert res.state == hidden
        c4 = [0, 1, 2, 3]
        for hidden in enumerate_control_states(Q4):
            res = identify_state(SimulatorOracle(Q4, c4, hidden), Q4, c4)
            assert hidden in res.candidates
            pair = [filled_set(Q4, c4, res.state), filled_set(Q4, c4, hidden)]
            assert find_splitting_sequence(pair, [0, 1, 2, 3, 4], 8) is None


def test_13_attack_simulation(criterion):
    with criterion(13, "attack simulation", 10):
        vb = victim_blocks(P8, 8)
        assert simulate_prime_probe(AttackScenario()).probe_outcome is MISS
        for b in vb:
            assert simulate_prime_probe(AttackScenario(victim_sequence=(b,))).probe_outcome is HIT
        report = analyze_detection(P8, m=2, max_k=3)
        assert [r.total for r in report.rows] == [1, 2, 4, 8]
        for k in range(4):
            for seq in itertools.product(vb[:2], repeat=k):
                r = simulate_prime_probe(AttackScenario(victim_sequence=seq))
                assert (r.probe_outcome is HIT) == plru_probe_predicts_hit(r.control_at_flush, 8)
        for k in range(1, 9):
            r = simulate_prime_probe(AttackScenario(victim_sequence=tuple(vb[:k]), invalidate_before_victim=True))
            assert r.probe_outcome is MISS and r.classification is Classification.EVASION


def test_14_property_suites(criterion):
    with criterion(14, "property suites (10k cases each)", 60):
        for name in PROPERTIES:
            assert run_property(name, cases=10_000, seed=1) >= 10_000
