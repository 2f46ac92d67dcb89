import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scenegcn.scene import BehaviorClass, EntityKind, Scene, Track

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def straight_track(track_id, kind, start, velocity, T=10, dt=0.1, label=None):
    pts = tuple((start[0] + velocity[0] * t * dt, start[1] + velocity[1] * t * dt) for t in range(T))
    return Track(track_id, kind, pts, label)


def vehicle(track_id, start, velocity, label=BehaviorClass.MAU, T=10):
    return straight_track(track_id, EntityKind.VEHICLE, start, velocity, T, label=label)


def lane(track_id, x, y=0.0, T=10, ego_speed=0.0):
    # lane markings drift backwards in the ego frame when the ego moves
    return straight_track(track_id, EntityKind.LANE_MARKING, (x, y), (0.0, -ego_speed), T)


def make_scene(tracks, scene_id="s", T=10, meta=None):
    return Scene(scene_id, T, tuple(tracks), meta=meta or {})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
