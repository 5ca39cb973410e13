"""Message routing, byte/round accounting and the analytic communication model."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .sharding import ShardPlan
from .toy_model import ModelConfig

STAGES = ("A", "B")


@dataclass(frozen=True)
class NetworkParams:
    B: float = 2.5e8  # bytes / second
    tau: float = 3.8e-4  # seconds
    F: int = 2  # bytes per element

    def __post_init__(self):
        if not (self.B > 0 and self.tau > 0 and self.F > 0):
            raise ValueError(f"network parameters must be positive: {self}")

    def to_dict(self) -> dict:
        return {"B": self.B, "tau": self.tau, "F": self.F}


@dataclass(frozen=True)
class MessageRecord:
    step: int
    layer: int
    stage: str
    src: str
    dst: str
    elements: int
    label_elements: int = 0

    def to_dict(self, F: int | None = None) -> dict:
        d = {"step": self.step, "layer": self.layer, "stage": self.stage, "src": self.src,
             "dst": self.dst, "elements": self.elements, "label_elements": self.label_elements}
        if F is not None:
            d["bytes"] = self.elements * F
        return d


@dataclass
class Envelope:
    step: int
    layer: int
    stage: str
    src: str
    dst: str
    payload: dict  # name -> float array, counted
    labels: dict  # name -> index/flag array, routing metadata only

    @property
    def elements(self) -> int:
        return int(sum(np.size(a) for a in self.payload.values()))

    @property
    def label_elements(self) -> int:
        return int(sum(np.size(a) for a in self.labels.values()))


class Router:
    """Append-only in-memory transport; every send is traced.

    Delivery order is sorted by source id so receivers see a deterministic
    sequence regardless of send order.
    """

    def __init__(self):
        self.trace: list[MessageRecord] = []
        self._inbox: dict[str, list[Envelope]] = defaultdict(list)

    def send(self, env: Envelope) -> None:
        if env.stage not in STAGES:
            raise ValueError(f"unknown stage {env.stage!r}")
        self.trace.append(MessageRecord(env.step, env.layer, env.stage, env.src, env.dst,
                                        env.elements, env.label_elements))
        self._inbox[env.dst].append(env)

    def collect(self, dst: str) -> list[Envelope]:
        msgs = self._inbox.pop(dst, [])
        return sorted(msgs, key=lambda e: _node_sort_key(e.src))

    def pending(self) -> int:
        return sum(len(v) for v in self._inbox.values())


def _node_sort_key(label: str):
    kind = label[0]
    nums = tuple(int(x) for x in label[1:].split(","))
    return (kind, nums)


# ---------------------------------------------------------------------------
# analytic model


def predicted_comm_bytes(config: ModelConfig, plan: ShardPlan, params: NetworkParams,
                         N: int | None = None) -> tuple[int, int]:
    """(per-layer, total) bytes: beta * F * (2dH + 2dH_KV + 2H) * N per layer."""
    N = plan.N if N is None else N
    per_layer = plan.beta * params.F * (2 * config.d * config.H + 2 * config.d * config.H_KV
                                        + 2 * config.H) * N
    return per_layer, per_layer * config.num_layers


def predicted_stage_bytes(config: ModelConfig, plan: ShardPlan, params: NetworkParams,
                          N: int | None = None) -> dict[str, int]:
    N = plan.N if N is None else N
    return {
        "A": plan.beta * params.F * config.d * (config.H + 2 * config.H_KV) * N,
        "B": plan.beta * params.F * (config.d + 2) * config.H * N,
    }


def predicted_comm_time(config: ModelConfig, plan: ShardPlan, params: NetworkParams) -> float:
    """Per-layer seconds under perfect parallel transport."""
    max_r = max(len(r) for r in plan.R)
    max_s = max(len(s) for s in plan.S)
    F, B, d = params.F, params.B, config.d
    return (2 * params.tau
            + plan.beta * F * d * (config.H + 2 * config.H_KV) * max_r / B
            + F * (d + 2) * config.H * max_s / B)


def round_bound(plan: ShardPlan) -> int:
    return 2 * plan.alpha * plan.beta ** 2


# ---------------------------------------------------------------------------
# measurement


@dataclass
class CommReport:
    F: int
    per_layer_bytes: list[int]
    stage_bytes: dict[str, int]
    total_bytes: int
    rounds: int
    rounds_per_layer: list[int]
    measured_time_s: float
    per_node_send_bytes: dict[str, int]
    metadata_bytes: int
    predicted_bytes: int | None = None
    predicted_per_layer_bytes: int | None = None
    predicted_stage_bytes: dict[str, int] | None = None
    predicted_time_s: float | None = None

    @property
    def excess_ratio(self) -> float | None:
        if not self.predicted_bytes:
            return None
        return self.total_bytes / self.predicted_bytes - 1.0

    @property
    def total_gb(self) -> float:
        return self.total_bytes / 1e9

    def to_dict(self) -> dict:
        return {
            "F": self.F,
            "per_layer_bytes": self.per_layer_bytes,
            "stage_bytes": self.stage_bytes,
            "total_bytes": self.total_bytes,
            "total_gb": self.total_gb,
            "rounds": self.rounds,
            "rounds_per_layer": self.rounds_per_layer,
            "measured_time_s": self.measured_time_s,
            "per_node_send_bytes": self.per_node_send_bytes,
            "metadata_bytes": self.metadata_bytes,
            "predicted_bytes": self.predicted_bytes,
            "predicted_per_layer_bytes": self.predicted_per_layer_bytes,
            "predicted_stage_bytes": self.predicted_stage_bytes,
            "predicted_time_s": self.predicted_time_s,
            "excess_ratio": self.excess_ratio,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def measure_run(trace: Sequence[MessageRecord], params: NetworkParams,
                config: ModelConfig | None = None, plan: ShardPlan | None = None,
                label_bytes: int = 8) -> CommReport:
    """Reduce a single-run trace to byte, round and time totals.

    A round is one directed src->dst transfer within a (layer, stage). Stage
    time is ``tau + max_sender(bytes) / B``. Routing labels are priced at
    ``label_bytes`` each and reported apart from the payload.
    """
    if not trace:
        raise ValueError("empty trace")
    steps = {r.step for r in trace}
    if len(steps) != 1:
        raise ValueError(f"trace mixes generation steps {sorted(steps)}")
    for r in trace:
        if r.stage not in STAGES or r.elements < 0 or r.layer < 0 or not r.src or not r.dst:
            raise ValueError(f"malformed trace record {r}")
    F = params.F
    n_layers = max(r.layer for r in trace) + 1
    per_layer = [0] * n_layers
    stage_bytes = {s: 0 for s in STAGES}
    links: dict[tuple[int, str], set] = defaultdict(set)
    sender_bytes: dict[tuple[int, str], dict[str, int]] = defaultdict(lambda: defaultdict(int))
    per_node: dict[str, int] = defaultdict(int)
    meta = 0
    for r in trace:
        b = r.elements * F
        per_layer[r.layer] += b
        stage_bytes[r.stage] += b
        links[(r.layer, r.stage)].add((r.src, r.dst))
        sender_bytes[(r.layer, r.stage)][r.src] += b
        per_node[r.src] += b
        meta += r.label_elements * label_bytes
    rounds_per_layer = [sum(len(links[(layer, s)]) for s in STAGES) for layer in range(n_layers)]
    time = sum(params.tau + max(senders.values()) / params.B
               for senders in sender_bytes.values())
    report = CommReport(
        F=F, per_layer_bytes=per_layer, stage_bytes=stage_bytes, total_bytes=sum(per_layer),
        rounds=sum(rounds_per_layer), rounds_per_layer=rounds_per_layer,
        measured_time_s=time, per_node_send_bytes=dict(sorted(per_node.items())),
        metadata_bytes=meta)
    if config is not None and plan is not None:
        per, total = predicted_comm_bytes(config, plan, params)
        report.predicted_per_layer_bytes = per
        report.predicted_bytes = per * n_layers
        report.predicted_stage_bytes = {s: v * n_layers for s, v in
                                        predicted_stage_bytes(config, plan, params).items()}
        report.predicted_time_s = predicted_comm_time(config, plan, params) * n_layers
    return report


def active_nodes(trace: Iterable[MessageRecord], step: int) -> tuple[set[str], set[str]]:
    """(CompNodes, AttnNodes) that sent or received anything in ``step``."""
    comp, attn = set(), set()
    for r in trace:
        if r.step != step:
            continue
        for n in (r.src, r.dst):
            (comp if n.startswith("C") else attn).add(n)
    return comp, attn
