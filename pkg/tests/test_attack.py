import json

import numpy as np
import pytest

from cascade.attack import (COLLISION, _layer0_q, INFEASIBLE, RECOVERED, PassCapExceeded, ShardObservation,
                            estimate_cost, f_direct, layer0_b_values, layer0_f_values,
                            layer0_meu_attack, layer0_view, meu_gaps, observe,
                            subset_decomposition_check, term_table, vocab_match)
from cascade.sharding import AttackBudget, build_plan

RHO3 = AttackBudget.from_rho(3)


def test_budget_fields():
    b = AttackBudget(t_max=2)
    assert b.rho == 3 and b.pass_cap == 10**7
    with pytest.raises(ValueError):
        AttackBudget(t_max=-1)


def test_full_observation_recovers(model32):
    p = [4, 17, 0, 31, 8, 8]
    r = vocab_match(model32, observe(model32, p, range(1, 7), 1), RHO3, p)
    assert r.status == RECOVERED and r.sequence() == p
    assert r.forward_pass_count == 6 * 32
    assert all(g.matched and g.margin > 0 for g in r.gaps)


def test_even_indices_recover(model32):
    p = [1, 2, 3, 4, 5, 6]
    r = vocab_match(model32, observe(model32, p, [2, 4, 6], 2), RHO3, p)
    assert r.status == RECOVERED and r.sequence() == p
    assert r.forward_pass_count <= 3 * 32**2


def test_wide_gap_is_infeasible(model32):
    p = [1, 2, 3, 4, 5]
    r = vocab_match(model32, observe(model32, p, [1, 5], 2), RHO3)
    assert r.status == INFEASIBLE
    assert r.forward_pass_count == 32  # only the first gap ran
    assert not r.gaps[-1].executed and "gap 4" in r.gaps[-1].reason


def test_budget_law(model16):
    p = [3, 3, 9, 0, 12, 1, 7]
    idx = [1, 3, 4, 7]
    r = vocab_match(model16, observe(model16, p, idx, 1), AttackBudget(t_max=2))
    executed = [g for g in r.gaps if g.executed]
    assert [len(g.indices) for g in executed] == [1, 2, 1]
    assert r.forward_pass_count == 16 + 256 + 16
    assert r.status == INFEASIBLE


def test_pass_cap_reports_partial(model16):
    p = [1, 2, 3, 4]
    with pytest.raises(PassCapExceeded) as ei:
        vocab_match(model16, observe(model16, p, [1, 3], 1), AttackBudget(t_max=2, pass_cap=100))
    assert ei.value.partial.tokens == {1: 1}
    assert ei.value.partial.forward_pass_count == 16


def test_wrong_observation_flags_mismatch(model16):
    p = [5, 6, 7]
    obs = observe(model16, p, [1, 2, 3], 1)
    noisy = ShardObservation(1, obs.indices, obs.rows + 1.0)
    r = vocab_match(model16, noisy, RHO3)
    assert r.status == COLLISION and not r.gaps[0].matched


def test_observation_validation():
    with pytest.raises(ValueError):
        ShardObservation(1, (1, 2), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        ShardObservation(1, (2, 1), np.zeros((2, 4)))


def test_result_json(model16):
    p = [1, 2]
    r = vocab_match(model16, observe(model16, p, [1, 2], 1), RHO3)
    d = json.loads(r.to_json())
    assert d["status"] == RECOVERED and d["tokens"] == {"1": 1, "2": 2}
    assert len(d["gaps"]) == 2 and d["gaps"][0]["distance"] < 1e-9


# -- layer 0 ------------------------------------------------------------------


def _prompt(n, seed):
    return np.random.default_rng(seed).integers(0, 16, n).tolist()


def test_f_values_match_direct_formula(model16):
    plan = build_plan(18, 2, 3, 2)
    p = _prompt(18, 1)
    for i in (1, 2, 3):
        v = layer0_view(model16, plan, p, i)
        fs = layer0_f_values(v)
        for k, f in fs.items():
            for row, r in enumerate(v.R):
                prefix = [s for s in v.S[k - 1] if s <= r]
                ref = f_direct(model16, p, r, prefix)
                assert np.abs(f[row] - ref).max() <= 1e-9 * max(1.0, np.abs(ref).max())
                if not prefix:
                    assert not f[row].any()


def test_f_additivity(model16):
    p = _prompt(10, 2)
    S = [2, 5]
    a = f_direct(model16, p, 9, S)
    b = f_direct(model16, p, 9, S + [7])
    term = term_table(model16, _layer0_q(model16, p[8], 9), 7)[p[6]]
    assert np.allclose(b - a, term[..., 1:], atol=1e-12)


def test_meu_gaps_enumeration():
    assert meu_gaps((1, 2, 7, 8), (3, 9, 15)) == [(1, ()), (2, ()), (7, (3,)), (8, ())]


def test_meu_recovers_size_two_gap(model16):
    # alpha=2, c=2: CompNode 1 sees S_2 = {3,4,7,8,...}; each gap holds 2 tokens
    plan = build_plan(12, 2, 2, 1)
    p = _prompt(12, 3)
    v = layer0_view(model16, plan, p, 1)
    r = layer0_meu_attack(model16, v, RHO3, p)
    assert r.status == RECOVERED
    assert r.tokens == {s: p[s - 1] for s in (3, 4, 7, 8)}
    assert r.forward_pass_count == 2 * 16**2


def test_meu_infeasible_when_all_gaps_large(model16):
    plan = build_plan(18, 3, 2, 1)
    p = _prompt(18, 4)
    r = layer0_meu_attack(model16, layer0_view(model16, plan, p, 1), RHO3, p)
    assert r.status == INFEASIBLE and r.tokens == {} and r.forward_pass_count == 0
    assert any("blocked" in g.reason for g in r.gaps)


def test_meu_skips_empty_gaps(model16):
    plan = build_plan(6, 1, 1, 1)
    p = _prompt(6, 5)
    r = layer0_meu_attack(model16, layer0_view(model16, plan, p, 1), RHO3, p)
    assert r.gaps == [] and r.tokens == {} and r.status == INFEASIBLE


def test_meu_pass_cap(model16):
    plan = build_plan(12, 2, 2, 1)
    v = layer0_view(model16, plan, _prompt(12, 6), 1)
    with pytest.raises(PassCapExceeded):
        layer0_meu_attack(model16, v, AttackBudget(t_max=2, pass_cap=300))


def test_decomposition_all_pairs(model16):
    plan = build_plan(18, 2, 3, 2)
    p = _prompt(18, 7)
    for i in (1, 2, 3):
        for k in range(1, 7):
            res = subset_decomposition_check(model16, plan, p, i, k)
            assert res.passed
            assert res.witness == {s: p[s - 1] for s in plan.S[k - 1]}


def test_decomposition_detects_perturbation(model16):
    plan = build_plan(18, 2, 3, 2)
    p = _prompt(18, 8)
    s = plan.S[4][0]
    bad = subset_decomposition_check(model16, plan, p, 1, 5, selection={s: (p[s - 1] + 1) % 16})
    assert not bad.passed and bad.max_error > 1e-6


def test_decomposition_empty_prefix_row(model16):
    # R_1 = {1,2,...}; S_6 starts at 6, so row 1 has nothing to sum
    plan = build_plan(18, 2, 3, 2)
    p = _prompt(18, 9)
    v = layer0_view(model16, plan, p, 1)
    assert not layer0_b_values(v)[6][0].any()
    assert subset_decomposition_check(model16, plan, p, 1, 6).passed


def test_decomposition_refuses_large_vocab():
    from cascade.toy_model import new_model
    from conftest import tiny_config

    big = new_model(tiny_config(V=100), 0)
    with pytest.raises(ValueError, match="too large"):
        subset_decomposition_check(big, build_plan(6, 1, 2), [1] * 6, 1, 2)


# -- cost -----------------------------------------------------------------------


def test_cost_three_gap_example():
    V = 256000
    est = estimate_cost([3, 5, 10], V, RHO3)
    assert est.cost.value == V**3 + V**2 + V**5
    assert 27.0 <= est.dominant.log10 <= 27.1
    assert not est.feasibility.feasible


def test_cost_contiguous():
    est = estimate_cost(range(1, 9), 50, AttackBudget.from_rho(2))
    assert est.cost.value == 8 * 50 and est.feasibility.feasible


def test_cost_restricted_vocab():
    V = 256000
    est = estimate_cost([5], V, RHO3, V0=V // 100)
    assert est.cost.value == 10**10 * est.restricted.value
    assert not est.feasibility.feasible
