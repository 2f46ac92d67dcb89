"""Deterministic rule baseline over interaction graphs.

Stage 1 takes a majority vote over the relations describing a vehicle's own
motion relative to the lane markings.  Stage 2 promotes a vehicle to OVT
when it moved forward relative to another moving, same-direction vehicle.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .graph import InteractionGraph, Relation
from .scene import BehaviorClass, EntityKind

STAGE1_CLASS = {
    Relation.MOVE_FORWARD: BehaviorClass.MAU,
    Relation.MOVE_BACKWARD: BehaviorClass.MTU,
    Relation.NO_CHANGE: BehaviorClass.PRK,
    Relation.LEFT_TO_RIGHT: BehaviorClass.LCL,
    Relation.RIGHT_TO_LEFT: BehaviorClass.LCR,
}

# lower rank wins ties
_TIE_RANK = {
    Relation.LEFT_TO_RIGHT: (0, 0),
    Relation.RIGHT_TO_LEFT: (0, 1),
    Relation.MOVE_FORWARD: (1, 0),
    Relation.MOVE_BACKWARD: (1, 1),
    Relation.NO_CHANGE: (2, 0),
}

_NOT_OVERTAKING = (BehaviorClass.PRK, BehaviorClass.MTU)


@dataclass
class RuleVerdict:
    node: int
    track_id: str
    stage1: BehaviorClass
    label: BehaviorClass
    counts: dict[Relation, int] = field(default_factory=dict)
    fallback: bool = False


def majority_relation(counts: dict[Relation, int]) -> Relation:
    """Argmax of relation counts; ties go to lane changes, then forward/backward, then no-change."""
    if not counts or max(counts.values()) <= 0:
        raise ValueError("no relation counts")
    best = max(counts.values())
    return min((r for r, c in counts.items() if c == best), key=_TIE_RANK.__getitem__)


def motion_counts(g: InteractionGraph, v: int, lanes_only: bool = True) -> Counter:
    """Counts of relations describing ``v``'s motion, i.e. over edges (j, v, r)."""
    counts: Counter = Counter()
    for s, d, r in g.edges:
        if d == v and (not lanes_only or g.nodes[s].kind is EntityKind.LANE_MARKING):
            counts[r] += 1
    return counts


def classify_stage1(g: InteractionGraph, v: int) -> RuleVerdict:
    nd = g.nodes[v]
    if nd.kind is not EntityKind.VEHICLE:
        raise ValueError(f"node {v} is not a vehicle")
    counts = motion_counts(g, v, lanes_only=True)
    fallback = not counts
    if fallback:
        counts = motion_counts(g, v, lanes_only=False)
    if counts:
        cls = STAGE1_CLASS[majority_relation(counts)]
    else:
        # isolated vehicle: no evidence of motion at all
        cls = BehaviorClass.PRK
        fallback = True
    return RuleVerdict(v, nd.track_id, cls, cls, dict(counts), fallback)


def classify_overtake(g: InteractionGraph, verdicts: dict[int, RuleVerdict]) -> dict[int, RuleVerdict]:
    eligible = [v for v, vd in verdicts.items() if vd.stage1 not in _NOT_OVERTAKING]
    edges = g.edge_set()
    for i in eligible:
        for j in eligible:
            if i != j and (j, i, Relation.MOVE_FORWARD) in edges:
                verdicts[i].label = BehaviorClass.OVT
                break
    return verdicts


def classify_graph(g: InteractionGraph) -> dict[int, RuleVerdict]:
    verdicts = {v: classify_stage1(g, v) for v in g.vehicle_indices()}
    return classify_overtake(g, verdicts)
