"""Quadrant spatial relations and the temporal interaction graph.

Edge convention: an edge ``(src, dst, rel)`` states how ``dst`` (the
object) moved relative to ``src`` (the subject) over the clip.  A car that
drives past a static lane marking ``L`` therefore yields ``(L, car,
MOVE_FORWARD)`` and its inverse ``(car, L, MOVE_BACKWARD)``.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .scene import BehaviorClass, EntityKind, Scene

DEFAULT_DEADBAND = 0.3


class GraphError(ValueError):
    pass


class Quadrant(enum.Enum):
    TOP_LEFT = "top_left"
    TOP_RIGHT = "top_right"
    BOTTOM_LEFT = "bottom_left"
    BOTTOM_RIGHT = "bottom_right"

    @property
    def top(self) -> bool:
        return self in (Quadrant.TOP_LEFT, Quadrant.TOP_RIGHT)

    @property
    def right(self) -> bool:
        return self in (Quadrant.TOP_RIGHT, Quadrant.BOTTOM_RIGHT)

    @classmethod
    def from_axes(cls, top: bool, right: bool) -> "Quadrant":
        if top:
            return cls.TOP_RIGHT if right else cls.TOP_LEFT
        return cls.BOTTOM_RIGHT if right else cls.BOTTOM_LEFT


class Relation(enum.Enum):
    MOVE_FORWARD = "move_forward"
    MOVE_BACKWARD = "move_backward"
    LEFT_TO_RIGHT = "left_to_right"
    RIGHT_TO_LEFT = "right_to_left"
    NO_CHANGE = "no_change"

    @property
    def index(self) -> int:
        return RELATIONS.index(self)

    @property
    def inverse(self) -> "Relation":
        return _INVERSE[self]


RELATIONS: tuple[Relation, ...] = tuple(Relation)
NUM_RELATIONS = len(RELATIONS)

_INVERSE = {
    Relation.MOVE_FORWARD: Relation.MOVE_BACKWARD,
    Relation.MOVE_BACKWARD: Relation.MOVE_FORWARD,
    Relation.LEFT_TO_RIGHT: Relation.RIGHT_TO_LEFT,
    Relation.RIGHT_TO_LEFT: Relation.LEFT_TO_RIGHT,
    Relation.NO_CHANGE: Relation.NO_CHANGE,
}


def quadrant_of(subject: tuple[float, float], obj: tuple[float, float]) -> Quadrant:
    """Quadrant of ``obj`` around ``subject``; zero offsets count as top / right."""
    dx = obj[0] - subject[0]
    dy = obj[1] - subject[1]
    return Quadrant.from_axes(dy >= 0, dx >= 0)


def _hysteresis(values: Sequence[float], deadband: float) -> list[bool]:
    state = values[0] >= 0
    out = [state]
    for v in values[1:]:
        if state and v < -deadband:
            state = False
        elif not state and (v > deadband or (deadband == 0 and v >= 0)):
            state = True
        out.append(state)
    return out


def smooth_quadrants(offsets: Sequence[tuple[float, float]], deadband: float = DEFAULT_DEADBAND) -> list[Quadrant]:
    """Quadrant sequence with per-axis hysteresis.

    ``offsets`` are object-minus-subject vectors for consecutive co-visible
    frames.  An axis flips only once its coordinate passes zero by more than
    ``deadband``; the first frame takes the raw quadrant.
    """
    if deadband < 0:
        raise ValueError("deadband must be >= 0")
    if not offsets:
        return []
    tops = _hysteresis([o[1] for o in offsets], deadband)
    rights = _hysteresis([o[0] for o in offsets], deadband)
    return [Quadrant.from_axes(t, r) for t, r in zip(tops, rights)]


def temporal_relation(first: Quadrant, last: Quadrant) -> tuple[Relation, ...]:
    """Relations implied by the first and last quadrant; vertical axis listed first."""
    rels = []
    if first.top != last.top:
        rels.append(Relation.MOVE_FORWARD if last.top else Relation.MOVE_BACKWARD)
    if first.right != last.right:
        rels.append(Relation.LEFT_TO_RIGHT if last.right else Relation.RIGHT_TO_LEFT)
    return tuple(rels) if rels else (Relation.NO_CHANGE,)


def pair_relations(
    subject_points: Sequence, object_points: Sequence, deadband: float = DEFAULT_DEADBAND
) -> Optional[tuple[Relation, ...]]:
    """Relations of the object w.r.t. the subject, or None with < 2 co-visible frames."""
    offsets = [
        (o[0] - s[0], o[1] - s[1])
        for s, o in zip(subject_points, object_points)
        if s is not None and o is not None
    ]
    if len(offsets) < 2:
        return None
    quads = smooth_quadrants(offsets, deadband)
    return temporal_relation(quads[0], quads[-1])


@dataclass(frozen=True)
class Node:
    idx: int
    kind: EntityKind
    track_id: str
    label: Optional[BehaviorClass] = None


@dataclass
class InteractionGraph:
    scene_id: str
    T: int
    nodes: list[Node]
    edges: list[tuple[int, int, Relation]]
    skipped_pairs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.edges = sorted(self.edges, key=lambda e: (e[0], e[1], e[2].index))
        self._adj = None

    @property
    def n(self) -> int:
        return len(self.nodes)

    def vehicle_indices(self) -> list[int]:
        return [nd.idx for nd in self.nodes if nd.kind is EntityKind.VEHICLE]

    def kind_index(self) -> np.ndarray:
        return np.array([nd.kind.index for nd in self.nodes], dtype=np.intp)

    def edge_set(self) -> set[tuple[int, int, Relation]]:
        return set(self.edges)

    def has_edge(self, src: int, dst: int, rel: Relation) -> bool:
        return (src, dst, rel) in self.edge_set()

    def in_neighbors(self, i: int, rel: Relation) -> list[int]:
        """N_r[i]: nodes j with an edge (j, i, rel)."""
        return sorted(s for s, d, r in self.edges if d == i and r is rel)

    def adjacency(self) -> np.ndarray:
        """Stack of mean-aggregation matrices, shape (1 + |R|) x n x n.

        Slot 0 is the identity (self loop); slot 1 + r holds A_r with
        A_r[i, j] = 1 / |N_r[i]| for every j in N_r[i].
        """
        if self._adj is None:
            n = self.n
            adj = np.zeros((1 + NUM_RELATIONS, n, n))
            adj[0] = np.eye(n)
            for s, d, r in self.edges:
                adj[1 + r.index, d, s] = 1.0
            counts = adj[1:].sum(axis=2, keepdims=True)
            np.divide(adj[1:], counts, out=adj[1:], where=counts > 0)
            adj.setflags(write=False)
            self._adj = adj
        return self._adj

    def labels(self) -> np.ndarray:
        """Class index per node, -1 where unlabeled."""
        return np.array([-1 if nd.label is None else nd.label.index for nd in self.nodes], dtype=np.intp)

    def label_mask(self) -> np.ndarray:
        return np.array(
            [nd.kind is EntityKind.VEHICLE and nd.label is not None for nd in self.nodes], dtype=bool
        )

    def permuted(self, perm: Sequence[int]) -> "InteractionGraph":
        """Relabel nodes so old node ``i`` becomes ``perm[i]``."""
        nodes = [None] * self.n
        for old, nd in enumerate(self.nodes):
            nodes[perm[old]] = Node(perm[old], nd.kind, nd.track_id, nd.label)
        edges = [(perm[s], perm[d], r) for s, d, r in self.edges]
        skipped = [tuple(sorted((perm[a], perm[b]))) for a, b in self.skipped_pairs]
        return InteractionGraph(self.scene_id, self.T, nodes, edges, sorted(skipped))

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionGraph):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.T == other.T
            and self.nodes == other.nodes
            and self.edges == other.edges
            and list(map(tuple, self.skipped_pairs)) == list(map(tuple, other.skipped_pairs))
        )


def _node_order(scene: Scene):
    vehicles = sorted(scene.vehicles(), key=lambda t: t.id)
    lanes = sorted(scene.lane_markings(), key=lambda t: t.id)
    return vehicles + lanes


def build_graph(scene: Scene, deadband: float = DEFAULT_DEADBAND) -> InteractionGraph:
    tracks = _node_order(scene)
    if len(tracks) < 2:
        raise GraphError(f"degenerate scene {scene.id!r}: fewer than 2 tracks")
    nodes = [Node(i, t.kind, t.id, t.label) for i, t in enumerate(tracks)]
    edges = []
    skipped = []
    for a in range(len(tracks)):
        for b in range(a + 1, len(tracks)):
            rels = pair_relations(tracks[a].points, tracks[b].points, deadband)
            if rels is None:
                skipped.append((a, b))
                continue
            for r in rels:
                edges.append((a, b, r))
                edges.append((b, a, r.inverse))
    return InteractionGraph(scene.id, scene.T, nodes, edges, skipped)


def random_graph(
    rng: np.random.Generator,
    n: int = 6,
    edge_prob: float = 0.6,
    every_relation: bool = True,
    scene_id: str = "random",
) -> InteractionGraph:
    """Inverse-closed random graph with at least one vehicle and one lane node.

    Pairs get either a single no-change edge or up to one vertical and one
    lateral relation, mirroring what ``build_graph`` can produce.  With
    ``every_relation`` the first pairs are forced to cover all five
    relations (needs n >= 3).
    """
    if n < 2 or (every_relation and n < 3):
        raise GraphError("random_graph needs more nodes")
    kinds = [EntityKind.VEHICLE, EntityKind.LANE_MARKING] + [
        EntityKind.VEHICLE if rng.random() < 0.5 else EntityKind.LANE_MARKING for _ in range(n - 2)
    ]
    classes = list(BehaviorClass)
    nodes = [
        Node(i, k, f"n{i}", classes[int(rng.integers(len(classes)))] if k is EntityKind.VEHICLE else None)
        for i, k in enumerate(kinds)
    ]
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    forced = {}
    if every_relation:
        forced = {(0, 1): (Relation.MOVE_FORWARD, Relation.LEFT_TO_RIGHT), (1, 2): (Relation.NO_CHANGE,)}
    edges = []
    for a, b in pairs:
        if (a, b) in forced:
            rels = forced[(a, b)]
        elif rng.random() >= edge_prob:
            continue
        elif rng.random() < 0.2:
            rels = (Relation.NO_CHANGE,)
        else:
            vert = [None, Relation.MOVE_FORWARD, Relation.MOVE_BACKWARD][int(rng.integers(3))]
            lat = [None, Relation.LEFT_TO_RIGHT, Relation.RIGHT_TO_LEFT][int(rng.integers(3))]
            rels = tuple(r for r in (vert, lat) if r is not None) or (Relation.NO_CHANGE,)
        for r in rels:
            edges.append((a, b, r))
            edges.append((b, a, r.inverse))
    return InteractionGraph(scene_id, 10, nodes, edges)


# --------------------------------------------------------------------------
# JSON

def graph_to_dict(g: InteractionGraph) -> dict:
    return {
        "scene_id": g.scene_id,
        "T": g.T,
        "nodes": [
            {
                "idx": nd.idx,
                "kind": nd.kind.value,
                "track_id": nd.track_id,
                "label": None if nd.label is None else nd.label.value,
            }
            for nd in g.nodes
        ],
        "edges": [{"src": s, "dst": d, "rel": r.value} for s, d, r in g.edges],
        "skipped_pairs": [list(p) for p in g.skipped_pairs],
    }


def graph_from_dict(doc: dict) -> InteractionGraph:
    try:
        nodes = [
            Node(
                int(nd["idx"]),
                EntityKind(nd["kind"]),
                str(nd["track_id"]),
                None if nd.get("label") is None else BehaviorClass(nd["label"]),
            )
            for nd in doc["nodes"]
        ]
        edges = [(int(e["src"]), int(e["dst"]), Relation(e["rel"])) for e in doc["edges"]]
        skipped = [tuple(int(v) for v in p) for p in doc.get("skipped_pairs", [])]
        g = InteractionGraph(str(doc["scene_id"]), int(doc.get("T", 0)), nodes, edges, skipped)
    except (KeyError, ValueError, TypeError) as e:
        raise GraphError(f"malformed graph document: {e}") from None
    if [nd.idx for nd in nodes] != list(range(len(nodes))):
        raise GraphError("node indices must be 0..n-1 in order")
    for s, d, _ in edges:
        if not (0 <= s < len(nodes) and 0 <= d < len(nodes)) or s == d:
            raise GraphError(f"bad edge endpoints ({s}, {d})")
    return g


def save_graphs(graphs: Sequence[InteractionGraph], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(graph_to_dict(g), sort_keys=True) + "\n" for g in graphs))


def load_graphs(path: str | Path) -> list[InteractionGraph]:
    path = Path(path)
    if path.is_dir():
        out = []
        for child in sorted(path.glob("*.jsonl")):
            out.extend(load_graphs(child))
        return out
    return [graph_from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
