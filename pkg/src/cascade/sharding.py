"""Token-index shard plans and the gap arithmetic that governs attack cost.

All shard math is 1-based: token indices live in ``[1, N]``, CompNode ids in
``[1, alpha]`` and query/key shard ids in ``[1, beta]``. The only conversion to
0-based storage is :meth:`ShardPlan.zero_based`.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

IndexSet = tuple[int, ...]


def as_index_set(values: Iterable[int], N: int | None = None) -> IndexSet:
    out = tuple(int(v) for v in values)
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ValueError(f"index set not strictly increasing: {out}")
    if out and out[0] < 1:
        raise ValueError(f"index set contains index < 1: {out}")
    if N is not None and out and out[-1] > N:
        raise ValueError(f"index set exceeds N={N}: {out}")
    return out


@dataclass(frozen=True)
class CDeltaSpec:
    c: int
    delta: int
    start: int = 1

    def __post_init__(self):
        if self.c < 1:
            raise ValueError(f"c must be >= 1, got {self.c}")
        if self.delta < self.c:
            raise ValueError(f"delta ({self.delta}) must be >= c ({self.c})")
        if self.start < 1:
            raise ValueError(f"start must be >= 1, got {self.start}")


def c_delta_sequence(spec: CDeltaSpec, N: int) -> IndexSet:
    """Clusters of ``c`` consecutive indices repeating every ``delta``, truncated to N."""
    if spec.start > N:
        raise ValueError(f"start {spec.start} > N {N}")
    out = []
    base = spec.start
    while base <= N:
        out.extend(i for i in range(base, min(base + spec.c, N + 1)))
        base += spec.delta
    return tuple(out)


@dataclass(frozen=True)
class AttackBudget:
    """Adversary budget: ``V**t_max`` forward passes; threshold ``rho = t_max + 1``."""

    t_max: int
    pass_cap: int = 10**7

    def __post_init__(self):
        if self.t_max < 0:
            raise ValueError("t_max must be >= 0")
        if self.pass_cap < 1:
            raise ValueError("pass_cap must be >= 1")

    @property
    def rho(self) -> int:
        return self.t_max + 1

    @classmethod
    def from_rho(cls, rho: int, pass_cap: int = 10**7) -> "AttackBudget":
        return cls(t_max=rho - 1, pass_cap=pass_cap)


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class ShardPlan:
    N: int
    alpha: int
    beta: int
    m: int
    c: int
    delta: int
    R: tuple[IndexSet, ...]
    S: tuple[IndexSet, ...]
    attn_pairs: tuple[tuple[int, int], ...]
    padded: bool = False

    # -- lookups ----------------------------------------------------------
    def comp_set(self, i: int) -> IndexSet:
        return self.R[i - 1]

    def shard_set(self, j: int) -> IndexSet:
        return self.S[j - 1]

    def pair_set(self, j: int, k: int) -> IndexSet:
        return tuple(sorted(set(self.S[j - 1]) | set(self.S[k - 1])))

    def owner_of(self, index: int) -> int:
        for i, r in enumerate(self.R, start=1):
            if index in r:
                return i
        raise KeyError(index)

    def shard_of(self, index: int) -> int:
        for j, s in enumerate(self.S, start=1):
            if index in s:
                return j
        raise KeyError(index)

    def pairs_with(self, j: int) -> list[tuple[int, int]]:
        return [p for p in self.attn_pairs if j in p]

    def zero_based(self) -> tuple[list[list[int]], list[list[int]]]:
        return [[x - 1 for x in r] for r in self.R], [[x - 1 for x in s] for s in self.S]

    def restrict(self, n: int) -> "ShardPlan":
        """The plan seen by the first ``n`` tokens (shards may become empty)."""
        if n > self.N:
            raise ValueError(f"cannot restrict a plan for N={self.N} to {n} tokens")
        cut = lambda s: tuple(x for x in s if x <= n)  # noqa: E731
        return ShardPlan(N=n, alpha=self.alpha, beta=self.beta, m=self.m, c=self.c,
                         delta=self.delta, R=tuple(cut(r) for r in self.R),
                         S=tuple(cut(s) for s in self.S), attn_pairs=self.attn_pairs,
                         padded=self.padded)

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "N": self.N, "c": self.c, "delta": self.delta, "alpha": self.alpha,
            "beta": self.beta, "m": self.m, "padded": self.padded,
            "R": [list(r) for r in self.R], "S": [list(s) for s in self.S],
            "attn_pairs": [list(p) for p in self.attn_pairs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShardPlan":
        R = tuple(as_index_set(r) for r in d["R"])
        S = tuple(as_index_set(s) for s in d["S"])
        alpha = int(d.get("alpha", len(R)))
        beta = int(d.get("beta", len(S)))
        pairs = tuple(tuple(int(x) for x in p) for p in d["attn_pairs"])
        return cls(N=int(d["N"]), alpha=alpha, beta=beta, m=int(d["m"]), c=int(d["c"]),
                   delta=int(d["delta"]), R=R, S=S, attn_pairs=pairs,
                   padded=bool(d.get("padded", False)))

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> "ShardPlan":
        return cls.from_dict(json.loads(text))


def _split_by_position(indices: IndexSet, m: int) -> list[IndexSet]:
    # piece x takes sorted positions x, x+m, x+2m, ... (1-based)
    return [tuple(indices[x::m]) for x in range(m)]


def build_plan(N: int, c: int, alpha: int, m: int | str = 1) -> ShardPlan:
    """(c, delta)-sharding with delta = c*alpha, then an m-split into beta = m*alpha shards.

    ``m="auto"`` selects m = c: piece x of R_i holds the elements of R_i
    congruent to its x-th cluster offset, i.e. stride delta in index space.
    An integer m splits sorted R_i at stride m in position space (identical to
    the auto rule when m == c). When N is not a multiple of delta the trailing
    partial period is dealt round-robin to R_1, R_2, ... in index order.
    """
    if N < 1 or c < 1 or alpha < 1:
        raise ValueError(f"N, c, alpha must be >= 1 (got N={N}, c={c}, alpha={alpha})")
    if m == "auto":
        m = c
    m = int(m)
    if m < 1:
        raise ValueError(f"m must be >= 1 or 'auto', got {m}")
    delta = c * alpha
    full = (N // delta) * delta
    padded = full != N
    if full:
        R = [list(c_delta_sequence(CDeltaSpec(c, delta, (i - 1) * c + 1), full))
             for i in range(1, alpha + 1)]
    else:
        R = [[] for _ in range(alpha)]
    for x, idx in enumerate(range(full + 1, N + 1)):
        R[x % alpha].append(idx)
    R = [tuple(r) for r in R]
    if any(len(r) == 0 for r in R):
        raise ValueError(f"N={N} too small to give each of {alpha} CompNodes an index")
    for i, r in enumerate(R, start=1):
        if m > len(r):
            raise ValueError(f"m={m} exceeds |R_{i}|={len(r)}")
    S = []
    for r in R:
        S.extend(_split_by_position(r, m))
    beta = m * alpha
    pairs = tuple((j, k) for j in range(1, beta + 1) for k in range(j, beta + 1))
    return ShardPlan(N=N, alpha=alpha, beta=beta, m=m, c=c, delta=delta,
                     R=tuple(R), S=tuple(S), attn_pairs=pairs, padded=padded)


def min_alpha(c: int, delta: int) -> int:
    """Fewest CompNodes whose (c, delta)-sequences cover every index."""
    return -(-delta // c)


def validate_plan(plan: ShardPlan) -> list[str]:
    """Return a list of violations; empty means the plan is sound."""
    out: list[str] = []
    universe = set(range(1, plan.N + 1))

    def check_partition(name, sets):
        seen: set[int] = set()
        disjoint = True
        for s in sets:
            if list(s) != sorted(set(s)):
                out.append(f"{name} shard not strictly increasing: {list(s)}")
            if seen & set(s):
                disjoint = False
            seen |= set(s)
        if not disjoint:
            out.append(f"{name} not disjoint")
        if seen - universe:
            out.append(f"{name} has indices outside [1, {plan.N}]: {sorted(seen - universe)}")
        if universe - seen:
            out.append(f"{name} not covering: missing {sorted(universe - seen)}")

    if len(plan.R) != plan.alpha:
        out.append(f"len(R)={len(plan.R)} != alpha={plan.alpha}")
    if len(plan.S) != plan.beta:
        out.append(f"len(S)={len(plan.S)} != beta={plan.beta}")
    if plan.beta != plan.m * plan.alpha:
        out.append(f"beta={plan.beta} != m*alpha={plan.m * plan.alpha}")
    if plan.delta != plan.c * plan.alpha:
        out.append(f"delta={plan.delta} != c*alpha={plan.c * plan.alpha}")
    check_partition("R", plan.R)
    check_partition("S", plan.S)

    seen_pairs: set[tuple[int, int]] = set()
    for j, k in plan.attn_pairs:
        if not (1 <= j <= plan.beta and 1 <= k <= plan.beta):
            out.append(f"attn pair ({j},{k}) references unknown shard")
            continue
        if j > k:
            out.append(f"attn pair ({j},{k}) not in j <= k form")
        key = (min(j, k), max(j, k))
        if key in seen_pairs:
            out.append(f"duplicate attn pair {key}")
        seen_pairs.add(key)
    # every index pair (x, y) must share an AttnNode; since S partitions [N]
    # this is coverage of every unordered shard pair with both shards nonempty
    missing = [(j, k) for j in range(1, plan.beta + 1) for k in range(j, plan.beta + 1)
               if (j, k) not in seen_pairs
               and j <= len(plan.S) and k <= len(plan.S)
               and plan.S[j - 1] and plan.S[k - 1]]
    if missing:
        out.append(f"pair coverage: shard pairs {missing} not held by any AttnNode")
    return out


# ---------------------------------------------------------------------------
# gaps and cost


@dataclass(frozen=True)
class GapProfile:
    gaps: tuple[int, ...]
    max_gap: int
    cluster_sizes: tuple[int, ...]

    def indices(self) -> IndexSet:
        return tuple(itertools.accumulate(self.gaps))

    def to_dict(self) -> dict:
        return {"gaps": list(self.gaps), "max_gap": self.max_gap,
                "cluster_sizes": list(self.cluster_sizes)}


def gap_profile(indices: Sequence[int]) -> GapProfile:
    s = as_index_set(indices)
    if not s:
        raise ValueError("gap profile of an empty index set")
    gaps = (s[0],) + tuple(b - a for a, b in zip(s, s[1:]))
    clusters = [1]
    for a, b in zip(s, s[1:]):
        if b == a + 1:
            clusters[-1] += 1
        else:
            clusters.append(1)
    return GapProfile(gaps=gaps, max_gap=max(gaps), cluster_sizes=tuple(clusters))


@dataclass(frozen=True)
class BigCost:
    value: int
    log10: float

    @classmethod
    def of(cls, value: int) -> "BigCost":
        return cls(value=value, log10=math.log10(value) if value > 0 else -math.inf)

    def to_dict(self) -> dict:
        return {"value": str(self.value), "log10": self.log10}


def vocab_matching_cost(indices: Sequence[int], V: int) -> BigCost:
    """Exact sum of V**gap over the gaps of ``indices``."""
    if V < 2:
        raise ValueError("V must be >= 2")
    return BigCost.of(sum(V ** g for g in gap_profile(indices).gaps))


class Feasibility(NamedTuple):
    feasible: bool
    limiting_gap: int | None


def feasibility(indices: Sequence[int], budget: AttackBudget) -> Feasibility:
    for g in gap_profile(indices).gaps:
        if g > budget.t_max:
            return Feasibility(False, g)
    return Feasibility(True, None)


# ---------------------------------------------------------------------------
# collusion

NodeId = tuple  # ("comp", i) or ("attn", j, k)


def node_label(node: NodeId) -> str:
    if node[0] == "comp":
        return f"C{node[1]}"
    return f"A{node[1]},{node[2]}"


def parse_node(text: str) -> NodeId:
    """Parse ``C3`` or ``A1,4`` into a node id tuple."""
    t = text.strip()
    try:
        if t[0] in "Cc":
            return ("comp", int(t[1:]))
        if t[0] in "Aa":
            j, k = t[1:].split(",")
            return ("attn", int(j), int(k))
    except (ValueError, IndexError):
        pass
    raise ValueError(f"unknown node id {text!r}")


def all_nodes(plan: ShardPlan) -> list[NodeId]:
    return [("comp", i) for i in range(1, plan.alpha + 1)] + \
           [("attn", j, k) for j, k in plan.attn_pairs]


def node_indices(plan: ShardPlan, node: NodeId) -> IndexSet:
    if node[0] == "comp" and len(node) == 2 and 1 <= node[1] <= plan.alpha:
        return plan.comp_set(node[1])
    if node[0] == "attn" and len(node) == 3:
        j, k = sorted(node[1:])
        if (j, k) in plan.attn_pairs:
            return plan.pair_set(j, k)
    raise KeyError(f"unknown node id {node!r}")


@dataclass(frozen=True)
class CollusionResult:
    nodes: tuple
    indices: IndexSet
    profile: GapProfile | None
    feasibility: Feasibility | None

    def to_dict(self) -> dict:
        return {
            "nodes": [node_label(n) for n in self.nodes],
            "size": len(self.indices),
            "profile": self.profile.to_dict() if self.profile else None,
            "feasible": self.feasibility.feasible if self.feasibility else None,
            "limiting_gap": self.feasibility.limiting_gap if self.feasibility else None,
        }


def collusion_union(plan: ShardPlan, nodes: Sequence[NodeId],
                    budget: AttackBudget | None = None) -> CollusionResult:
    union: set[int] = set()
    for n in nodes:
        union |= set(node_indices(plan, n))
    idx = tuple(sorted(union))
    prof = gap_profile(idx) if idx else None
    feas = feasibility(idx, budget) if (idx and budget is not None) else None
    return CollusionResult(nodes=tuple(nodes), indices=idx, profile=prof, feasibility=feas)
