import math
import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scenegcn.scene import BehaviorClass as C, dumps_scene
from scenegcn.synth import (
    REGIMES,
    SynthConfig,
    SynthConfigError,
    regime_config,
    scene_class,
    split_corpus,
    subsample_labels,
    synth_corpus,
    synth_scene,
)

CLEAN = dict(noise_sigma=0.0, dropout=0.0)


def test_same_seed_gives_byte_identical_corpus():
    cfg = SynthConfig(scenes_per_class=4, seed=7)
    a = "".join(dumps_scene(s) for s in synth_corpus(cfg))
    b = "".join(dumps_scene(s) for s in synth_corpus(cfg))
    assert a == b
    other = "".join(dumps_scene(s) for s in synth_corpus(SynthConfig(scenes_per_class=4, seed=8)))
    assert other != a


def test_corpus_shape_and_labels():
    cfg = SynthConfig(scenes_per_class=10)
    scenes = synth_corpus(cfg)
    assert len(scenes) == 60
    for s in scenes:
        assert len(s.lane_markings()) >= 2
        assert 1 <= len(s.vehicles()) <= cfg.max_vehicles
        assert all(t.label is not None for t in s.vehicles())
        primary = C(s.meta["primary_class"])
        assert primary in {t.label for t in s.vehicles()}


def test_parked_vehicle_keeps_constant_offset_to_markings():
    s = synth_scene(SynthConfig(**CLEAN), C.PRK, 3)
    parked = next(t for t in s.vehicles() if t.label is C.PRK)
    for mark in s.lane_markings():
        offsets = np.array(parked.points) - np.array(mark.points)
        np.testing.assert_allclose(offsets, np.broadcast_to(offsets[0], offsets.shape), atol=1e-9)


@pytest.mark.parametrize("cls, sign", [(C.LCL, 1), (C.LCR, -1)])
def test_lane_change_crosses_one_marking_once(cls, sign):
    cfg = SynthConfig(**CLEAN)
    for index in range(10):
        s = synth_scene(cfg, cls, index)
        actor = next(t for t in s.vehicles() if t.label is cls)
        xs = np.array([p[0] for p in actor.points])
        assert sign * (xs[-1] - xs[0]) >= cfg.lane_width - 1e-9
        line_xs = {round(m.points[0][0], 9) for m in s.lane_markings()}
        crossed = [lx for lx in line_xs if min(xs) < lx < max(xs)]
        assert len(crossed) == 1
        rel = xs - crossed[0]
        assert np.count_nonzero(np.diff(np.sign(rel)) != 0) == 1


def test_labels_do_not_depend_on_noise_draw():
    clean = synth_corpus(SynthConfig(scenes_per_class=5, **CLEAN))
    noisy = synth_corpus(SynthConfig(scenes_per_class=5, noise_sigma=0.4, dropout=0.1))
    for a, b in zip(clean, noisy):
        assert [(t.id, t.label) for t in a.tracks] == [(t.id, t.label) for t in b.tracks]


def test_overtake_scenes_record_witness_pairs():
    cfg = SynthConfig(**CLEAN)
    for index in range(10):
        s = synth_scene(cfg, C.OVT, index)
        (pair,) = s.meta["witness_pairs"]
        fast, slow = s.track(pair[0]), s.track(pair[1])
        assert fast.label is C.OVT
        assert fast.points[0][1] < slow.points[0][1] and fast.points[-1][1] > slow.points[-1][1]


def test_dropout_keeps_at_least_two_points():
    for s in synth_corpus(SynthConfig(scenes_per_class=5, dropout=0.9)):
        assert all(len(t.present()) >= 2 for t in s.tracks)


@pytest.mark.parametrize("kw", [
    {"noise_sigma": -0.1}, {"dropout": 1.5}, {"ego_speed": (20.0, 10.0)}, {"T": 1},
    {"lanes_per_scene": (2, 3)}, {"classes": ("XYZ",)}, {"max_vehicles": 1},
])
def test_invalid_configs_rejected(kw):
    with pytest.raises(SynthConfigError):
        SynthConfig(**kw)


def test_config_dict_round_trip_and_unknown_keys():
    cfg = SynthConfig(seed=3, lane_width=4.0)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(SynthConfigError):
        SynthConfig.from_dict({"bogus": 1})


def test_split_seventy_fifteen_fifteen_per_class():
    scenes = synth_corpus(SynthConfig(scenes_per_class=100, **CLEAN))
    train, val, test = split_corpus(scenes, (0.7, 0.15, 0.15), seed=2)
    for part, n in [(train, 70), (val, 15), (test, 15)]:
        assert Counter(scene_class(s) for s in part) == {c.value: n for c in C}
    ids = [s.id for s in train + val + test]
    assert sorted(ids) == sorted(s.id for s in scenes)
    assert split_corpus(scenes, (0.7, 0.15, 0.15), seed=2) == (train, val, test)


@pytest.mark.parametrize("ratios", [(0.5, 0.5, 0.5), (1.0, 0.0, 0.0), (0.5, 0.5)])
def test_bad_split_ratios_rejected(ratios):
    with pytest.raises(ValueError):
        split_corpus([], ratios)


def test_split_of_tiny_class_warns():
    scenes = synth_corpus(SynthConfig(scenes_per_class=2, classes=("MAU",)))
    with pytest.warns(UserWarning):
        parts = split_corpus(scenes, (0.7, 0.15, 0.15))
    assert sum(len(p) for p in parts) == 2


@given(st.integers(1, 12), st.integers(0, 5))
def test_split_partitions_exhaustively(n, seed):
    scenes = synth_corpus(SynthConfig(scenes_per_class=n, classes=("PRK", "MTU")))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        parts = split_corpus(scenes, (0.6, 0.2, 0.2), seed)
    ids = [s.id for p in parts for s in p]
    assert len(ids) == len(set(ids)) == len(scenes)


def _label_counts(scenes):
    return Counter(t.label for s in scenes for t in s.vehicles() if t.label is not None)


def test_subsample_keeps_ceiling_fraction_per_class():
    scenes = synth_corpus(SynthConfig(scenes_per_class=20))
    full = _label_counts(scenes)
    kept = _label_counts(subsample_labels(scenes, 0.05, seed=3))
    for cls, n in full.items():
        assert kept[cls] == math.ceil(0.05 * n)
    assert subsample_labels(scenes, 0.05, seed=3) == subsample_labels(scenes, 0.05, seed=3)
    assert subsample_labels(scenes, 1.0) == scenes


def test_subsample_five_percent_of_hundred_labels():
    from scenegcn.scene import EntityKind, Scene, Track

    scenes = [Scene(f"s{i}", 2, (Track("v", EntityKind.VEHICLE, ((0, 0), (0, 1)), cls),))
              for cls in C for i in range(100)]
    kept = _label_counts(subsample_labels(scenes, 0.05, seed=1))
    assert kept == {cls: 5 for cls in C}


def test_subsample_rejects_bad_fraction():
    with pytest.raises(ValueError):
        subsample_labels([], 0.0)


def test_regimes_are_valid_and_distinct():
    base = SynthConfig(scenes_per_class=2)
    for name in REGIMES:
        regime_config(base, name)
    assert "OVT" not in regime_config(base, "no-overtake").classes
    with pytest.raises(SynthConfigError):
        regime_config(base, "martian")
