import itertools

import numpy as np
import pytest

from scenegcn.graph import InteractionGraph, Node, Relation, build_graph
from scenegcn.rules import classify_graph, classify_stage1, majority_relation
from scenegcn.scene import BehaviorClass as C, EntityKind as K
from scenegcn.synth import SynthConfig, synth_corpus

from conftest import lane, make_scene, vehicle

PRIORITY = [Relation.LEFT_TO_RIGHT, Relation.RIGHT_TO_LEFT, Relation.MOVE_FORWARD,
            Relation.MOVE_BACKWARD, Relation.NO_CHANGE]


def graph(kinds, motion):
    """``motion`` lists (subject, object, relation); inverses are added."""
    nodes = [Node(i, k, f"n{i}") for i, k in enumerate(kinds)]
    edges = []
    for s, d, r in motion:
        edges += [(s, d, r), (d, s, r.inverse)]
    return InteractionGraph("g", 10, nodes, edges)


V, L = K.VEHICLE, K.LANE_MARKING


def test_forward_past_three_lanes_is_mau():
    g = graph([V, L, L, L], [(l, 0, Relation.MOVE_FORWARD) for l in (1, 2, 3)])
    assert classify_stage1(g, 0).label is C.MAU


def test_unanimous_no_change_is_prk():
    g = graph([V, L, L], [(1, 0, Relation.NO_CHANGE), (2, 0, Relation.NO_CHANGE)])
    assert classify_stage1(g, 0).label is C.PRK


def test_lane_change_wins_tie_with_forward():
    g = graph([V, L, L], [(1, 0, Relation.MOVE_FORWARD), (1, 0, Relation.LEFT_TO_RIGHT),
                          (2, 0, Relation.MOVE_FORWARD), (2, 0, Relation.LEFT_TO_RIGHT)])
    v = classify_stage1(g, 0)
    assert v.counts == {Relation.MOVE_FORWARD: 2, Relation.LEFT_TO_RIGHT: 2}
    assert v.label is C.LCL


def test_tie_break_enumeration_matches_priority():
    for counts in itertools.product(range(5), repeat=5):
        if not 0 < sum(counts) <= 4:
            continue
        table = {r: c for r, c in zip(PRIORITY, counts) if c}
        best = max(table.values())
        expect = next(r for r in PRIORITY if table.get(r, 0) == best)
        assert majority_relation(table) is expect


def test_vehicle_without_lane_edges_falls_back_to_all_edges():
    g = graph([V, V], [(1, 0, Relation.MOVE_BACKWARD)])
    v = classify_stage1(g, 0)
    assert v.fallback and v.label is C.MTU


def test_isolated_vehicle_is_flagged_parked():
    g = graph([V, L], [])
    v = classify_stage1(g, 0)
    assert v.fallback and v.label is C.PRK


def test_rear_car_passing_front_car_is_overtake():
    rear = vehicle("a_rear", (0.0, -6.0), (0.0, 20.0))
    front = vehicle("b_front", (3.5, -2.0), (0.0, 5.0))
    s = make_scene([rear, front, lane("l0", -1.75), lane("l1", 1.75), lane("l2", 5.25)])
    verdicts = classify_graph(build_graph(s))
    assert verdicts[0].label is C.OVT
    assert verdicts[1].label is C.MAU


def test_single_vehicle_never_overtakes():
    s = make_scene([vehicle("a", (0.0, -6.0), (0.0, 20.0)), lane("l0", -1.75), lane("l1", 1.75)])
    assert classify_graph(build_graph(s))[0].label is C.MAU


def test_overtake_stage_leaves_parked_and_oncoming_alone():
    # the oncoming car ends "ahead" of the parked car relative to nothing else;
    # both are ineligible so their verdicts must be untouched
    g = graph([V, V, L], [(2, 0, Relation.NO_CHANGE), (2, 1, Relation.MOVE_BACKWARD),
                          (1, 0, Relation.MOVE_FORWARD), (0, 1, Relation.MOVE_FORWARD)])
    verdicts = classify_graph(g)
    assert verdicts[0].label is C.PRK and verdicts[1].label is C.MTU


def test_extra_no_change_edge_keeps_parked_verdict():
    base = [(1, 0, Relation.NO_CHANGE), (2, 0, Relation.NO_CHANGE)]
    more = base + [(3, 0, Relation.NO_CHANGE)]
    assert classify_stage1(graph([V, L, L, L], base), 0).label is C.PRK
    assert classify_stage1(graph([V, L, L, L], more), 0).label is C.PRK


def test_rules_are_deterministic():
    scenes = synth_corpus(SynthConfig(scenes_per_class=3, noise_sigma=0.0, dropout=0.0))
    for s in scenes:
        g = build_graph(s)
        a = {k: v.label for k, v in classify_graph(g).items()}
        b = {k: v.label for k, v in classify_graph(g).items()}
        assert a == b and set(a) == set(g.vehicle_indices())


def test_noise_free_synthetic_gate():
    scenes = synth_corpus(SynthConfig(scenes_per_class=15, noise_sigma=0.0, dropout=0.0, seed=4))
    hits, totals = {}, {}
    for s in scenes:
        g = build_graph(s)
        verdicts = classify_graph(g)
        for v in g.vehicle_indices():
            label = g.nodes[v].label
            totals[label] = totals.get(label, 0) + 1
            hits[label] = hits.get(label, 0) + (verdicts[v].label is label)
    for cls in (C.MAU, C.MTU, C.PRK, C.OVT):
        assert hits[cls] == totals[cls], cls
    # every marking votes forward while only the crossed line votes lateral,
    # so stage 1 calls a lane changer MAU
    assert hits[C.LCL] == 0 and hits[C.LCR] == 0
