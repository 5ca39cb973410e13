import numpy as np
import pytest

from cascade.netsim import (Envelope, MessageRecord, NetworkParams, Router, active_nodes,
                            measure_run, predicted_comm_bytes, predicted_comm_time,
                            predicted_stage_bytes, round_bound)
from cascade.protocol import cascade_forward, cascade_generate
from cascade.sharding import build_plan
from cascade.toy_model import ModelConfig

from conftest import tiny_config

BERT_BASE = ModelConfig(num_layers=12, d_emb=768, H=12, H_KV=12, d=64, V=64,
                        mlp_hidden=3072, max_seq=128)
BERT_LARGE = ModelConfig(num_layers=24, d_emb=1024, H=16, H_KV=16, d=64, V=64,
                         mlp_hidden=4096, max_seq=128)


def test_params_validation():
    with pytest.raises(ValueError):
        NetworkParams(B=0)


@pytest.mark.parametrize("cfg,want", [(BERT_BASE, 9_510_912), (BERT_LARGE, 25_362_432)])
def test_formula_beta1_bytes(cfg, want):
    _, total = predicted_comm_bytes(cfg, build_plan(128, 1, 1), NetworkParams(F=2))
    assert total == want


def test_formula_linear_in_beta():
    base = predicted_comm_bytes(BERT_BASE, build_plan(128, 1, 1), NetworkParams())[1]
    for beta in (2, 4, 8):
        assert predicted_comm_bytes(BERT_BASE, build_plan(128, 1, beta), NetworkParams())[1] \
            == beta * base


def test_stage_split_sums_to_total():
    plan = build_plan(18, 2, 3, 2)
    cfg = tiny_config()
    st = predicted_stage_bytes(cfg, plan, NetworkParams())
    assert st["A"] + st["B"] == predicted_comm_bytes(cfg, plan, NetworkParams())[0]


def test_predicted_time_formula():
    cfg = tiny_config()
    plan = build_plan(18, 2, 3, 2)
    p = NetworkParams(B=1e6, tau=1e-3, F=4)
    want = 2e-3 + 6 * 4 * 4 * (4 + 4) * 6 / 1e6 + 4 * 6 * 4 * 3 / 1e6
    assert predicted_comm_time(cfg, plan, p) == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("N,c,alpha,m", [(18, 2, 3, 2), (12, 1, 2, 1), (10, 1, 1, 1),
                                         (16, 2, 2, "auto"), (17, 1, 3, 1)])
def test_measured_bytes_equal_formula(model16, N, c, alpha, m):
    plan = build_plan(N, c, alpha, m)
    r = Router()
    cascade_forward(model16, plan, list(np.arange(N) % 16), r)
    rep = measure_run(r.trace, NetworkParams(), model16.config, plan)
    assert rep.total_bytes == rep.predicted_bytes
    assert rep.stage_bytes == rep.predicted_stage_bytes
    assert rep.excess_ratio == 0.0
    assert max(rep.rounds_per_layer) <= round_bound(plan)
    assert rep.metadata_bytes > 0


@pytest.mark.parametrize("N,c,alpha,m", [(18, 2, 3, 2), (12, 1, 2, 1), (24, 2, 2, 2),
                                         (24, 3, 2, 3), (16, 1, 4, 1)])
def test_rounds_closed_form(model16, N, c, alpha, m):
    # merged node (j, k) talks to the owners of j and k in both stages
    plan = build_plan(N, c, alpha, m)
    r = Router()
    cascade_forward(model16, plan, list(np.arange(N) % 16), r)
    rep = measure_run(r.trace, NetworkParams(), model16.config, plan)
    b = plan.beta
    assert rep.rounds_per_layer == [b * (2 * b + 1 - plan.m)] * 2


def test_time_uses_max_sender():
    recs = [MessageRecord(0, 0, "A", "C1", "A1,1", 10), MessageRecord(0, 0, "A", "C2", "A1,1", 30),
            MessageRecord(0, 0, "B", "A1,1", "C1", 5)]
    rep = measure_run(recs, NetworkParams(B=100.0, tau=1.0, F=2))
    assert rep.measured_time_s == pytest.approx((1 + 60 / 100) + (1 + 10 / 100))
    assert rep.rounds == 3 and rep.total_bytes == 90


def test_measure_rejects_bad_traces():
    with pytest.raises(ValueError):
        measure_run([], NetworkParams())
    with pytest.raises(ValueError):
        measure_run([MessageRecord(0, 0, "A", "C1", "A1,1", 1),
                     MessageRecord(1, 0, "A", "C1", "A1,1", 1)], NetworkParams())
    with pytest.raises(ValueError):
        measure_run([MessageRecord(0, 0, "Z", "C1", "A1,1", 1)], NetworkParams())


def test_router_orders_by_source():
    r = Router()
    for src in ("C2", "C10", "C1"):
        r.send(Envelope(0, 0, "A", src, "A1,1", {"x": np.zeros(2)}, {}))
    assert [e.src for e in r.collect("A1,1")] == ["C1", "C2", "C10"]
    assert r.pending() == 0
    with pytest.raises(ValueError):
        r.send(Envelope(0, 0, "Q", "C1", "A1,1", {}, {}))


def test_generation_steps_touch_few_nodes(model16):
    plan = build_plan(12, 1, 3, 1)
    res = cascade_generate(model16, plan, [1, 2, 3], 9)
    steps = sorted({r.step for r in res.trace})
    for s in steps[1:]:
        comp, attn = active_nodes(res.trace, s)
        assert len(comp) == 1 and len(attn) == plan.beta
        rep = measure_run([r for r in res.trace if r.step == s], NetworkParams())
        assert rep.total_bytes > 0


def test_report_json_roundtrip(model16):
    import json

    plan = build_plan(8, 1, 2)
    r = Router()
    cascade_forward(model16, plan, list(range(8)), r)
    rep = measure_run(r.trace, NetworkParams(), model16.config, plan)
    d = json.loads(rep.to_json())
    assert d["total_bytes"] == rep.total_bytes and d["excess_ratio"] == 0.0
