"""Scene and tracklet data model, JSON I/O, and flat-ground projection.

Coordinates are bird's-eye-view metres in the ego frame: ego at the origin,
+y along the ego heading, +x to the right.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

Point = Optional[tuple[float, float]]

DEFAULT_T = 10
MAX_VEHICLES = 10


class SceneError(ValueError):
    """Schema or consistency violation in scene data."""


class EntityKind(enum.Enum):
    VEHICLE = "vehicle"
    LANE_MARKING = "lane_marking"

    @property
    def index(self) -> int:
        return 0 if self is EntityKind.VEHICLE else 1


class BehaviorClass(enum.Enum):
    MAU = "MAU"  # moving away from us
    MTU = "MTU"  # moving towards us
    PRK = "PRK"  # parked
    LCL = "LCL"  # lane change, left to right
    LCR = "LCR"  # lane change, right to left
    OVT = "OVT"  # overtake

    @property
    def index(self) -> int:
        return CLASSES.index(self)


CLASSES: tuple[BehaviorClass, ...] = tuple(BehaviorClass)
NUM_CLASSES = len(CLASSES)


@dataclass(frozen=True)
class Track:
    id: str
    kind: EntityKind
    points: tuple[Point, ...]
    label: Optional[BehaviorClass] = None

    def present(self) -> list[int]:
        return [t for t, p in enumerate(self.points) if p is not None]

    def with_label(self, label: Optional[BehaviorClass]) -> "Track":
        return Track(self.id, self.kind, self.points, label)


@dataclass(frozen=True)
class Scene:
    id: str
    T: int
    tracks: tuple[Track, ...]
    frame: str = "ego"
    meta: dict = field(default_factory=dict, compare=True, hash=False)

    def vehicles(self) -> list[Track]:
        return [t for t in self.tracks if t.kind is EntityKind.VEHICLE]

    def lane_markings(self) -> list[Track]:
        return [t for t in self.tracks if t.kind is EntityKind.LANE_MARKING]

    def track(self, track_id: str) -> Track:
        for t in self.tracks:
            if t.id == track_id:
                return t
        raise KeyError(track_id)

    def replace_tracks(self, tracks: Iterable[Track]) -> "Scene":
        return Scene(self.id, self.T, tuple(tracks), self.frame, dict(self.meta))


# --------------------------------------------------------------------------
# validation & truncation

def _err(where: str, track: str | None, field_name: str, msg: str) -> SceneError:
    loc = where + (f", track {track!r}" if track is not None else "") + f", field {field_name!r}"
    return SceneError(f"{loc}: {msg}")


def validate_scene(scene: Scene, where: str = "<scene>") -> None:
    if scene.T < 2:
        raise _err(where, None, "T", f"need at least 2 frames, got {scene.T}")
    seen = set()
    for tr in scene.tracks:
        if tr.id in seen:
            raise _err(where, tr.id, "id", "duplicate track id")
        seen.add(tr.id)
        if len(tr.points) != scene.T:
            raise _err(where, tr.id, "points", f"{len(tr.points)} points in a T={scene.T} scene")
        if len(tr.present()) < 2:
            raise _err(where, tr.id, "points", "fewer than 2 present points")
        for p in tr.points:
            if p is not None and not (math.isfinite(p[0]) and math.isfinite(p[1])):
                raise _err(where, tr.id, "points", "non-finite coordinate")
        if tr.kind is EntityKind.LANE_MARKING and tr.label is not None:
            raise _err(where, tr.id, "label", "lane markings carry no label")


def _first_distance(tr: Track) -> float:
    x, y = tr.points[tr.present()[0]]
    return math.hypot(x, y)


def truncate_vehicles(scene: Scene, max_vehicles: int = MAX_VEHICLES) -> Scene:
    """Keep the ``max_vehicles`` vehicles nearest the ego at their first present frame.

    Ties are broken by track id; track order is otherwise preserved.
    """
    vehicles = scene.vehicles()
    if len(vehicles) <= max_vehicles:
        return scene
    ranked = sorted(vehicles, key=lambda t: (_first_distance(t), t.id))
    keep = {t.id for t in ranked[:max_vehicles]}
    return scene.replace_tracks(
        t for t in scene.tracks if t.kind is not EntityKind.VEHICLE or t.id in keep
    )


# --------------------------------------------------------------------------
# JSON

def scene_to_dict(scene: Scene) -> dict:
    doc = {
        "id": scene.id,
        "T": scene.T,
        "frame": scene.frame,
        "tracks": [
            {
                "id": tr.id,
                "kind": tr.kind.value,
                "label": tr.label.value if tr.label is not None else None,
                "points": [None if p is None else [p[0], p[1]] for p in tr.points],
            }
            for tr in scene.tracks
        ],
    }
    if scene.meta:
        doc["meta"] = scene.meta
    return doc


def scene_from_dict(doc: dict, where: str = "<scene>", max_vehicles: int | None = MAX_VEHICLES) -> Scene:
    if not isinstance(doc, dict):
        raise _err(where, None, "<root>", "scene must be a JSON object")
    for key in ("id", "T", "tracks"):
        if key not in doc:
            raise _err(where, None, key, "missing")
    T = doc["T"]
    if not isinstance(T, int) or isinstance(T, bool):
        raise _err(where, None, "T", "must be an integer")
    if not isinstance(doc["tracks"], list):
        raise _err(where, None, "tracks", "must be a list")
    tracks = []
    for i, td in enumerate(doc["tracks"]):
        tid = td.get("id") if isinstance(td, dict) else None
        if not isinstance(tid, str):
            raise _err(where, f"#{i}", "id", "must be a string")
        try:
            kind = EntityKind(td.get("kind"))
        except ValueError:
            raise _err(where, tid, "kind", f"unknown kind {td.get('kind')!r}") from None
        raw_label = td.get("label")
        try:
            label = None if raw_label is None else BehaviorClass(raw_label)
        except ValueError:
            raise _err(where, tid, "label", f"unknown label {raw_label!r}") from None
        raw_points = td.get("points")
        if not isinstance(raw_points, list):
            raise _err(where, tid, "points", "must be a list")
        points = []
        for p in raw_points:
            if p is None:
                points.append(None)
            elif isinstance(p, list) and len(p) == 2 and all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in p
            ):
                points.append((float(p[0]), float(p[1])))
            else:
                raise _err(where, tid, "points", f"bad point {p!r}")
        tracks.append(Track(tid, kind, tuple(points), label))
    scene = Scene(str(doc["id"]), T, tuple(tracks), doc.get("frame", "ego"), dict(doc.get("meta") or {}))
    validate_scene(scene, where)
    if max_vehicles is not None:
        scene = truncate_vehicles(scene, max_vehicles)
    return scene


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), sort_keys=True)


def save_scenes(scenes: Sequence[Scene], path: str | Path) -> None:
    """Write one scene per file (``.json``) or a JSON-lines corpus (anything else)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        if len(scenes) != 1:
            raise SceneError(f"{path}: a .json file holds exactly one scene")
        path.write_text(dumps_scene(scenes[0]) + "\n")
    else:
        path.write_text("".join(dumps_scene(s) + "\n" for s in scenes))


def load_scenes(path: str | Path, max_vehicles: int | None = MAX_VEHICLES) -> list[Scene]:
    """Load scenes from a ``.json`` file, a ``.jsonl`` corpus, or a directory of either."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.is_dir():
        out: list[Scene] = []
        for child in sorted(path.iterdir()):
            if child.suffix in (".json", ".jsonl") and child.name != "manifest.json" and child.name != "config.json":
                out.extend(load_scenes(child, max_vehicles))
        return out
    text = path.read_text()
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise SceneError(f"{path}: invalid JSON ({e})") from None
        return [scene_from_dict(doc, str(path), max_vehicles)]
    scenes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as e:
            raise SceneError(f"{path}:{lineno}: invalid JSON ({e})") from None
        scenes.append(scene_from_dict(doc, f"{path}:{lineno}", max_vehicles))
    return scenes


# --------------------------------------------------------------------------
# flat-ground pinhole camera

@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera at ``height`` metres above flat ground, pitched down by ``pitch``."""

    focal: float
    cx: float
    cy: float
    height: float
    pitch: float

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if not self.height > 0:
            raise ValueError("camera height must be positive")


def forward_project(point: tuple[float, float], cam: CameraModel) -> tuple[float, float]:
    """Ground point (x, y) in the ego frame -> pixel (u, v)."""
    x, y = point
    s, c = math.sin(cam.pitch), math.cos(cam.pitch)
    # camera axes in the ego frame: right (1,0,0), down (0,-sin,-cos), optical (0,cos,-sin)
    xc = x
    yc = cam.height * c - y * s
    zc = y * c + cam.height * s
    if zc <= 0:
        raise ValueError("point is behind the camera")
    return cam.cx + cam.focal * xc / zc, cam.cy + cam.focal * yc / zc


def ground_project(pixel: tuple[float, float], cam: CameraModel) -> tuple[float, float]:
    """Intersect the pixel's viewing ray with the ground plane; returns (x, y) in the ego frame."""
    u, v = pixel
    s, c = math.sin(cam.pitch), math.cos(cam.pitch)
    a = (u - cam.cx) / cam.focal
    b = (v - cam.cy) / cam.focal
    # ray direction in the ego frame (x right, y forward, z up)
    dx = a
    dy = c - b * s
    dz = -(b * c + s)
    if dz >= 0:
        raise ValueError("no ground intersection")
    t = cam.height / -dz
    return t * dx, t * dy
