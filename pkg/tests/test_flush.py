import pytest

from flushleak.flush import (
    PRESERVE,
    RESET,
    FlushKind,
    canonical_content,
    clflush,
    default_refill,
    flush,
    flush_refill_map,
    refill,
    refill_order,
)
from flushleak.policy import (
    PolicyError,
    encode_control,
    enumerate_control_states,
    filled_set,
    fresh_fill,
    new_empty_set,
    plru,
    qlru,
    run_sequence,
    victim_way,
)


def qlru_refill_by_rules(ages):
    """Post-refill ages computed straight from the reverse-engineered rules.

    Ages survive invalidation; a block filled into a line inherits age 0 if
    the line had age 0 and gets age 1 otherwise; after each insertion the
    other lines (valid or not) are aged until one of them reaches 3.
    Lines fill from right to left.
    """
    ages = list(ages)
    for way in reversed(range(len(ages))):
        ages[way] = 0 if ages[way] == 0 else 1
        while max(ages) < 3:
            ages = [a if i == way else a + 1 for i, a in enumerate(ages)]
    return tuple(ages)


def all_ones_state():
    return run_sequence(fresh_fill(plru(8), range(8)), [0, 2, 4, 6, 4, 0])[0]


def test_wbinvd_preserves_plru_bits():
    s = flush(all_ones_state(), FlushKind.WBINVD, PRESERVE)
    assert s.lines == (None,) * 8
    assert encode_control(s.policy, s.control) == "1111111"


def test_wbinvd_preserves_qlru_ages():
    s = filled_set(qlru(4), range(4), (3, 0, 3, 0))
    s = flush(s, FlushKind.WBINVD, PRESERVE)
    assert encode_control(s.policy, s.control, s.lines) == "3*,0*,3*,0*"


@pytest.mark.parametrize("kind", list(FlushKind))
def test_reset_behavior_gives_empty_set(kind):
    for s in (all_ones_state(), filled_set(qlru(4), range(4), (3, 0, 3, 0))):
        assert flush(s, kind, RESET) == new_empty_set(s.policy)


def test_clflush_single_line_and_absent_block():
    s = all_ones_state()
    t = clflush(s, 3)
    assert t.lines == (0, 1, 2, None, 4, 5, 6, 7)
    assert t.control == s.control
    assert clflush(s, 99) is s


def test_refill_plru_keeps_all_ones():
    s = refill(flush(all_ones_state()), list(range(8, 16)))
    assert s.lines == tuple(range(8, 16))
    assert encode_control(s.policy, s.control) == "1111111"


def test_plru_eviction_order_after_refill():
    s = refill(flush(all_ones_state()), list(range(8, 16)))
    order = []
    fresh = 100
    for _ in range(8):
        order.append(s.lines[victim_way(s)])
        s, _ = run_sequence(s, [fresh])
        fresh += 1
    assert order == [15, 11, 13, 9, 14, 10, 12, 8]


@pytest.mark.parametrize(
    "before,after,first_evicted",
    [((0, 0, 0, 3), (1, 3, 3, 3), 5), ((3, 0, 3, 0), (1, 2, 3, 2), 6)],
)
def test_refill_qlru_known_states(before, after, first_evicted):
    s = flush(filled_set(qlru(4), range(4), before))
    s = refill(s, [7, 6, 5, 4])
    assert s.lines == (4, 5, 6, 7)
    assert s.control == after
    assert s.lines[victim_way(s)] == first_evicted


def test_refill_preconditions():
    with pytest.raises(PolicyError):
        refill(all_ones_state(), list(range(8, 16)))
    with pytest.raises(PolicyError):
        refill(flush(all_ones_state()), [8, 8, 9, 10, 11, 12, 13, 14])


def test_refill_orders():
    assert default_refill(plru(8)) == list(range(8, 16))
    assert default_refill(qlru(4)) == [7, 6, 5, 4]
    assert refill_order(qlru(4), "asc") == [4, 5, 6, 7]
    assert refill_order(plru(4), [9, 8, 7, 6]) == [9, 8, 7, 6]
    with pytest.raises(PolicyError):
        refill_order(plru(4), "sideways")


def test_plru_channel_is_identity():
    m = flush_refill_map(plru(8))
    assert len(m.entries) == 128
    assert all(s == o for s, o in m.entries.items())


def test_qlru_channel_image_and_rules_oracle():
    m = flush_refill_map(qlru(4))
    assert len(m.entries) == 160
    assert len(m.image()) == 11
    valid = set(enumerate_control_states(qlru(4)))
    assert m.image() <= valid
    for s, o in m.entries.items():
        assert o == qlru_refill_by_rules(s)


def test_reset_channel_is_constant():
    for p in (plru(8), qlru(4)):
        assert len(flush_refill_map(p, behavior=RESET).image()) == 1


@pytest.mark.parametrize("policy", [plru(2), plru(4), plru(8), qlru(2), qlru(3), qlru(4)])
@pytest.mark.parametrize("behavior", [PRESERVE, RESET])
def test_clflush_each_equals_wbinvd(policy, behavior):
    for c in enumerate_control_states(policy):
        s = filled_set(policy, canonical_content(policy), c)
        assert flush(s, FlushKind.CLFLUSH_EACH, behavior) == flush(s, FlushKind.WBINVD, behavior)


def test_block_identity_irrelevant_to_channel():
    # renaming the resident and refill blocks leaves the channel unchanged
    p = qlru(4)
    m = flush_refill_map(p)
    for c in enumerate_control_states(p):
        s = filled_set(p, [40, 41, 42, 43], c)
        assert refill(flush(s), [97, 96, 95, 94]).control == m.entries[c]


def test_channel_csv():
    text = flush_refill_map(qlru(4)).to_csv().splitlines()
    assert text[0] == "initial,final"
    assert len(text) == 161
    assert '"0,0,0,3","1,3,3,3"' in text
