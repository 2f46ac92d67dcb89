"""Synthetic labelled road scenes.

World frame: straight road along +y, lanes indexed left to right, the
leftmost lane(s) carrying oncoming traffic.  The ego drives straight at
constant speed along x = 0 and every track is emitted in the ego frame.
Each scene is built around one primary behaviour plus a few background
vehicles, and every vehicle's label is derived from its noise-free
kinematics before noise and dropout are applied.

Placement is rejection-sampled so that relations are decisive: moving
vehicles sweep past every lane-marking dash by at least ``margin`` metres,
parked vehicles stay clear of the dashes, and every pair of vehicles is at
least ``margin`` apart longitudinally at the first and last frame.
"""
from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .scene import CLASSES, MAX_VEHICLES, BehaviorClass, EntityKind, Scene, Track

Range = tuple[float, float]


class SynthConfigError(ValueError):
    pass


def stream(seed: int, label: str, *index: int) -> np.random.Generator:
    """Independent RNG stream derived from (seed, label, index...)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(label.encode()), *index]))


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 1
    scenes_per_class: int = 400
    T: int = 10
    dt: float = 0.1
    ego_speed: Range = (12.0, 20.0)
    # forward vehicles drive ego_speed + gain
    mau_speed_gain: Range = (4.0, 10.0)
    lc_speed_gain: Range = (4.0, 10.0)
    mtu_speed: Range = (12.0, 20.0)
    # overtaker speed minus overtaken speed
    ovt_speed_gain: Range = (8.0, 14.0)
    lane_width: float = 3.5
    lanes_per_scene: tuple[int, int] = (3, 5)
    extra_vehicles: tuple[int, int] = (0, 3)
    noise_sigma: float = 0.3
    dropout: float = 0.05
    margin: float = 2.0
    dash_spacing: float = 0.8
    max_vehicles: int = MAX_VEHICLES
    classes: tuple[str, ...] = tuple(c.value for c in CLASSES)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        for name in ("ego_speed", "mau_speed_gain", "lc_speed_gain", "mtu_speed", "ovt_speed_gain",
                     "lanes_per_scene", "extra_vehicles"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise SynthConfigError(f"{name}: empty range {lo}..{hi}")
        if self.T < 2:
            raise SynthConfigError("T must be >= 2")
        if self.dt <= 0 or self.lane_width <= 0:
            raise SynthConfigError("dt and lane_width must be positive")
        if self.noise_sigma < 0:
            raise SynthConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.dropout <= 1.0:
            raise SynthConfigError("dropout must be in [0, 1]")
        if self.lanes_per_scene[0] < 3:
            raise SynthConfigError("need at least 3 lanes (one oncoming, two for lane changes)")
        if self.scenes_per_class < 0 or self.extra_vehicles[0] < 0:
            raise SynthConfigError("counts must be non-negative")
        if self.ego_speed[0] <= 0 or self.mtu_speed[0] <= 0:
            raise SynthConfigError("speeds must be positive")
        if self.ovt_speed_gain[0] * (self.T - 1) * self.dt < 2 * self.margin:
            raise SynthConfigError("ovt_speed_gain too small to complete an overtake within the clip")
        bad = [c for c in self.classes if c not in BehaviorClass.__members__]
        if bad or not self.classes:
            raise SynthConfigError(f"classes must be a non-empty subset of {[c.value for c in CLASSES]}")
        if self.max_vehicles < 2 and "OVT" in self.classes:
            raise SynthConfigError("overtake scenes need max_vehicles >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise SynthConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class _Actor:
    cls: BehaviorClass
    x0: float          # lateral start (world)
    dx: float          # lateral displacement over the clip
    y_mid: float       # longitudinal position at mid-clip (world)
    v: float           # longitudinal speed (world, signed)
    slots: tuple       # occupied lane / shoulder slots

    def y(self, t: np.ndarray, t_mid: float) -> np.ndarray:
        return self.y_mid + self.v * (t - t_mid)

    def x(self, t: np.ndarray, t_end: float) -> np.ndarray:
        # smoothstep over the middle 70% of the clip
        s = np.clip((t / t_end - 0.15) / 0.7, 0.0, 1.0)
        return self.x0 + self.dx * s * s * (3.0 - 2.0 * s)


@dataclass
class _Road:
    n_lanes: int
    n_oncoming: int
    ego_lane: int
    width: float
    ego_v: float
    dash_y: list[float]
    band_mid: float
    times: np.ndarray
    actors: list[_Actor] = field(default_factory=list)

    def center(self, lane: int) -> float:
        return (lane - self.ego_lane) * self.width

    def line_x(self, k: int) -> float:
        return (k - self.ego_lane - 0.5) * self.width

    @property
    def same_lanes(self) -> list[int]:
        return list(range(self.n_oncoming, self.n_lanes))

    def free(self, slot) -> bool:
        return all(slot not in a.slots for a in self.actors)


def _direction(cls: BehaviorClass, v: float) -> int:
    if v == 0:
        return 0
    return 1 if v > 0 else -1


class _Sampler:
    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.t_end = (cfg.T - 1) * cfg.dt
        self.t_mid = self.t_end / 2

    def u(self, r: Range) -> float:
        return float(self.rng.uniform(r[0], r[1]))

    # ---- geometry checks on noise-free kinematics -------------------------

    def _ends(self, a: _Actor) -> tuple[float, float]:
        return a.y_mid - a.v * self.t_mid, a.y_mid + a.v * self.t_mid

    def _ok_vs_dashes(self, road: _Road, a: _Actor) -> bool:
        m = self.cfg.margin
        y0, y1 = self._ends(a)
        for yd in road.dash_y:
            if a.v > 0 and not (y0 - yd <= -m and y1 - yd >= m):
                return False
            if a.v < 0 and not (y0 - yd >= m and y1 - yd <= -m):
                return False
            if a.v == 0 and abs(y0 - yd) < m:
                return False
        return True

    def _ok_pair(self, a: _Actor, b: _Actor, witness: bool) -> bool:
        m = self.cfg.margin
        a0, a1 = self._ends(a)
        b0, b1 = self._ends(b)
        d0, d1 = a0 - b0, a1 - b1
        if abs(d0) < m or abs(d1) < m:
            return False
        same_dir = _direction(a.cls, a.v) == _direction(b.cls, b.v) != 0
        if witness:
            return d0 < 0 < d1  # a starts behind b and ends ahead
        if same_dir:
            return (d0 > 0) == (d1 > 0)
        return True

    def _fits(self, road: _Road, a: _Actor, witness_of: _Actor | None = None) -> bool:
        if not self._ok_vs_dashes(road, a):
            return False
        return all(self._ok_pair(a, b, b is witness_of) for b in road.actors)

    # ---- actor proposals ---------------------------------------------------

    def _jitter(self) -> float:
        return float(self.rng.uniform(-0.3, 0.3))

    def _y_mid(self, road: _Road, v: float) -> float:
        reach = abs(v) * self.t_mid
        half_band = (max(road.dash_y) - min(road.dash_y)) / 2
        slack = max(reach - half_band - self.cfg.margin, 0.0)
        return road.band_mid + float(self.rng.uniform(-slack, slack))

    def propose(self, road: _Road, cls: BehaviorClass) -> _Actor | None:
        cfg, rng = self.cfg, self.rng
        if cls is BehaviorClass.PRK:
            shoulders = [s for s in (("shoulder", -1), ("shoulder", road.n_lanes)) if road.free(s)]
            if not shoulders:
                return None
            slot = shoulders[rng.integers(len(shoulders))]
            half_band = (max(road.dash_y) - min(road.dash_y)) / 2
            off = self.u((half_band + cfg.margin + 0.5, half_band + cfg.margin + 15.0))
            y = road.band_mid + (off if rng.random() < 0.5 else -off)
            return _Actor(cls, road.center(slot[1]) + self._jitter(), 0.0, y, 0.0, (slot,))
        if cls is BehaviorClass.MTU:
            lanes = [k for k in range(road.n_oncoming) if road.free(("lane", k))]
            if not lanes:
                return None
            k = lanes[rng.integers(len(lanes))]
            v = -self.u(cfg.mtu_speed)
            return _Actor(cls, road.center(k) + self._jitter(), 0.0, self._y_mid(road, v), v, (("lane", k),))
        if cls is BehaviorClass.MAU:
            lanes = [k for k in road.same_lanes if road.free(("lane", k))]
            if not lanes:
                return None
            k = lanes[rng.integers(len(lanes))]
            v = road.ego_v + self.u(cfg.mau_speed_gain)
            return _Actor(cls, road.center(k) + self._jitter(), 0.0, self._y_mid(road, v), v, (("lane", k),))
        if cls in (BehaviorClass.LCL, BehaviorClass.LCR):
            same = road.same_lanes
            pairs = [(k, k + 1) for k in same[:-1] if road.free(("lane", k)) and road.free(("lane", k + 1))]
            if not pairs:
                return None
            left, right = pairs[rng.integers(len(pairs))]
            start, end = (left, right) if cls is BehaviorClass.LCL else (right, left)
            v = road.ego_v + self.u(cfg.lc_speed_gain)
            x0 = road.center(start) + self._jitter()
            dx = road.center(end) - road.center(start)
            return _Actor(cls, x0, dx, self._y_mid(road, v), v, (("lane", left), ("lane", right)))
        raise ValueError(cls)

    def propose_overtake(self, road: _Road) -> tuple[_Actor, _Actor] | None:
        cfg, rng = self.cfg, self.rng
        same = road.same_lanes
        pairs = [(k, k + 1) for k in same[:-1] if road.free(("lane", k)) and road.free(("lane", k + 1))]
        if not pairs:
            return None
        left, right = pairs[rng.integers(len(pairs))]
        fast_lane, slow_lane = (left, right) if rng.random() < 0.75 else (right, left)
        v_slow = road.ego_v + self.u(cfg.mau_speed_gain)
        v_fast = v_slow + self.u(cfg.ovt_speed_gain)
        slow = _Actor(BehaviorClass.MAU, road.center(slow_lane) + self._jitter(), 0.0,
                      self._y_mid(road, v_slow), v_slow, (("lane", slow_lane),))
        # level with the overtaken vehicle around mid-clip
        y_fast = slow.y_mid + float(rng.uniform(-1.0, 1.0))
        fast = _Actor(BehaviorClass.OVT, road.center(fast_lane) + self._jitter(), 0.0,
                      y_fast, v_fast, (("lane", fast_lane),))
        return fast, slow

    # ---- scene -------------------------------------------------------------

    def road(self) -> _Road:
        cfg, rng = self.cfg, self.rng
        n = int(rng.integers(cfg.lanes_per_scene[0], cfg.lanes_per_scene[1] + 1))
        n_onc = 1 if n <= 4 else 2
        ego_lane = int(rng.integers(n_onc, n))
        ego_v = self.u(cfg.ego_speed)
        n_lines = n + 1
        offsets = (np.arange(n_lines) - (n_lines - 1) / 2) * cfg.dash_spacing
        offsets = rng.permutation(offsets) + rng.uniform(-0.1, 0.1, size=n_lines)
        band_mid = ego_v * self.t_mid + self.u((10.0, 30.0))
        times = np.arange(cfg.T) * cfg.dt
        return _Road(n, n_onc, ego_lane, cfg.lane_width, ego_v,
                     [band_mid + float(o) for o in offsets], band_mid, times)

    def place(self, road: _Road, cls: BehaviorClass, tries: int = 40) -> bool:
        for _ in range(tries):
            a = self.propose(road, cls)
            if a is None:
                return False
            if self._fits(road, a):
                road.actors.append(a)
                return True
        return False

    def place_overtake(self, road: _Road, tries: int = 40) -> tuple[_Actor, _Actor] | None:
        for _ in range(tries):
            pair = self.propose_overtake(road)
            if pair is None:
                return None
            fast, slow = pair
            if not self._fits(road, slow):
                continue
            road.actors.append(slow)
            if self._fits(road, fast, witness_of=slow):
                road.actors.append(fast)
                return fast, slow
            road.actors.pop()
        return None


_BACKGROUND = (BehaviorClass.MAU, BehaviorClass.MTU, BehaviorClass.PRK)


def kinematic_label(a_idx: int, actors: Sequence[_Actor], lane_width: float, t_mid: float) -> BehaviorClass:
    """Label from noise-free kinematics alone (used to certify the generator)."""
    a = actors[a_idx]
    if a.v == 0:
        return BehaviorClass.PRK
    if a.v < 0:
        return BehaviorClass.MTU
    if abs(a.dx) >= lane_width - 1e-9:
        return BehaviorClass.LCL if a.dx > 0 else BehaviorClass.LCR
    a0, a1 = a.y_mid - a.v * t_mid, a.y_mid + a.v * t_mid
    for j, b in enumerate(actors):
        if j == a_idx or b.v <= 0:
            continue
        b0, b1 = b.y_mid - b.v * t_mid, b.y_mid + b.v * t_mid
        if a0 < b0 and a1 > b1:
            return BehaviorClass.OVT
    return BehaviorClass.MAU


def synth_scene(cfg: SynthConfig, cls: BehaviorClass, index: int) -> Scene:
    """One scene whose primary actor shows behaviour ``cls``."""
    rng = stream(cfg.seed, "synth", cls.index, index)
    sampler = _Sampler(cfg, rng)
    for _attempt in range(200):
        road = sampler.road()
        witness = None
        if cls is BehaviorClass.OVT:
            pair = sampler.place_overtake(road)
            if pair is None:
                continue
            witness = pair
        elif not sampler.place(road, cls):
            continue
        n_extra = int(rng.integers(cfg.extra_vehicles[0], cfg.extra_vehicles[1] + 1))
        n_extra = min(n_extra, cfg.max_vehicles - len(road.actors))
        for _ in range(n_extra):
            sampler.place(road, _BACKGROUND[rng.integers(len(_BACKGROUND))])
        break
    else:
        raise SynthConfigError(f"could not place a {cls.value} scene; geometry infeasible for this config")
    return _emit_scene(cfg, sampler, road, cls, index, witness, rng)


def _emit_scene(cfg, sampler, road, cls, index, witness, rng) -> Scene:
    t = road.times
    ego_y = road.ego_v * t
    tracks = []
    ids = {}
    for i, a in enumerate(road.actors):
        ids[id(a)] = f"v{i}"
    labels = [kinematic_label(i, road.actors, cfg.lane_width, sampler.t_mid) for i in range(len(road.actors))]
    for i, a in enumerate(road.actors):
        if labels[i] is not a.cls:
            raise AssertionError(f"generator produced {labels[i]} for a {a.cls} actor")
        xs = a.x(t, sampler.t_end)
        ys = a.y(t, sampler.t_mid) - ego_y
        tracks.append((ids[id(a)], EntityKind.VEHICLE, xs, ys, labels[i]))
    for k, yd in enumerate(road.dash_y):
        xs = np.full(cfg.T, road.line_x(k))
        ys = yd - ego_y
        tracks.append((f"l{k}", EntityKind.LANE_MARKING, xs, ys, None))

    out = []
    for tid, kind, xs, ys, label in tracks:
        if cfg.noise_sigma > 0:
            xs = xs + rng.normal(0.0, cfg.noise_sigma, size=cfg.T)
            ys = ys + rng.normal(0.0, cfg.noise_sigma, size=cfg.T)
        keep = np.ones(cfg.T, dtype=bool)
        if cfg.dropout > 0:
            keep = rng.random(cfg.T) >= cfg.dropout
            if keep.sum() < 2:
                keep[:] = False
                keep[rng.choice(cfg.T, size=2, replace=False)] = True
        pts = tuple(
            (float(x), float(y)) if k else None for x, y, k in zip(xs, ys, keep)
        )
        out.append(Track(tid, kind, pts, label))
    meta = {
        "primary_class": cls.value,
        "noise_sigma": cfg.noise_sigma,
        "dropout": cfg.dropout,
        "witness_pairs": [] if witness is None else [[ids[id(witness[0])], ids[id(witness[1])]]],
    }
    scene_id = f"s{cfg.seed}-{cls.value}-{index:05d}"
    return Scene(scene_id, cfg.T, tuple(out), "ego", meta)


def synth_corpus(cfg: SynthConfig) -> list[Scene]:
    """``scenes_per_class`` scenes for each configured behaviour, class-major order."""
    wanted = [cls for cls in CLASSES if cls.value in cfg.classes]
    return [synth_scene(cfg, cls, i) for cls in wanted for i in range(cfg.scenes_per_class)]


# --------------------------------------------------------------------------
# splits and label subsampling

def scene_class(scene: Scene) -> str:
    if "primary_class" in scene.meta:
        return scene.meta["primary_class"]
    labels = sorted(t.label.value for t in scene.vehicles() if t.label is not None)
    return labels[0] if labels else "none"


def _apportion(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [round(r * n, 9) for r in ratios]
    counts = [math.floor(x) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_corpus(
    scenes: Sequence[Scene], ratios: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 1
) -> tuple[list[Scene], list[Scene], list[Scene]]:
    """Class-stratified seeded split into (train, val, test)."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three positive numbers summing to 1, got {list(ratios)}")
    by_class: dict[str, list[Scene]] = {}
    for s in scenes:
        by_class.setdefault(scene_class(s), []).append(s)
    parts: tuple[list, list, list] = ([], [], [])
    for name in sorted(by_class):
        group = by_class[name]
        if len(group) < 3:
            warnings.warn(f"class {name} has {len(group)} scenes, fewer than split parts", stacklevel=2)
        rng = stream(seed, "split", zlib.crc32(name.encode()))
        order = rng.permutation(len(group))
        counts = _apportion(len(group), ratios)
        start = 0
        for part, c in zip(parts, counts):
            part.extend(group[i] for i in order[start:start + c])
            start += c
    return parts


def subsample_labels(scenes: Sequence[Scene], fraction: float, seed: int = 1) -> list[Scene]:
    """Keep labels on ceil(fraction * N_c) vehicles of each class; null the rest."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return list(scenes)
    by_class: dict[BehaviorClass, list[tuple[int, str]]] = {}
    for si, s in enumerate(scenes):
        for t in s.vehicles():
            if t.label is not None:
                by_class.setdefault(t.label, []).append((si, t.id))
    keep: set[tuple[int, str]] = set()
    for cls in CLASSES:
        items = by_class.get(cls, [])
        if not items:
            continue
        k = math.ceil(round(fraction * len(items), 9))
        if k == 0:
            warnings.warn(f"fraction {fraction} keeps no {cls.value} labels; keeping one", stacklevel=2)
            k = 1
        rng = stream(seed, "subsample", cls.index)
        for i in rng.choice(len(items), size=k, replace=False):
            keep.add(items[i])
    out = []
    for si, s in enumerate(scenes):
        out.append(s.replace_tracks(
            t if t.kind is not EntityKind.VEHICLE or (si, t.id) in keep else t.with_label(None)
            for t in s.tracks
        ))
    return out


# --------------------------------------------------------------------------
# named regimes for transfer experiments

REGIMES: dict[str, dict] = {
    "default": {},
    "wide-lanes": {"lane_width": 4.0, "noise_sigma": 0.2},
    "noisy": {"noise_sigma": 0.45, "dropout": 0.08},
    "fast": {"ego_speed": (20.0, 28.0), "mtu_speed": (18.0, 26.0)},
    "no-overtake": {"classes": ("MAU", "MTU", "PRK", "LCL", "LCR")},
}


def regime_config(base: SynthConfig, name: str, **overrides) -> SynthConfig:
    if name not in REGIMES:
        raise SynthConfigError(f"unknown regime {name!r}; choose from {sorted(REGIMES)}")
    d = base.to_dict()
    d.update(REGIMES[name])
    d.update(overrides)
    return SynthConfig.from_dict(d)
