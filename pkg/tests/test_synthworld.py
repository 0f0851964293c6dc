import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from daf import SAMPLE_RATE, synthworld as sw
from daf.frames import FrameTransform, r2g
from daf.signal import log_psd, welch_psd


def _onset(x, thresh=1e-9):
    return int(np.argmax(np.abs(x) > thresh))


def _rms(x):
    return float(np.sqrt(np.mean(x * x)))


# ---------------------------------------------------------------- spatialize

def test_spatialize_front_is_symmetric():
    x = np.random.default_rng(0).standard_normal(2000)
    w = sw.spatialize(x, 0.0, 2.0)
    np.testing.assert_array_equal(w.samples[0], w.samples[1])


def test_spatialize_itd_at_left():
    x = np.zeros(4000)
    x[0] = 1.0
    w = sw.spatialize(x, math.pi / 2, 2.0)
    itd = round(2 * 0.0875 / 343 * 44100)
    assert itd == 22
    assert _onset(w.samples[1]) - _onset(w.samples[0]) == itd


def test_spatialize_gain_law():
    x = np.random.default_rng(1).standard_normal(8000)
    near, far = sw.spatialize(x, 0.7, 1.0), sw.spatialize(x, 0.7, 2.0)
    for ch in range(2):
        assert abs(_rms(near.samples[ch]) / _rms(far.samples[ch]) - 2.0) < 0.04


@given(st.floats(-math.pi, math.pi), st.floats(0.3, 7.0))
def test_spatialize_channels_differ_off_axis(az, dist):
    x = np.random.default_rng(2).standard_normal(3000)
    w = sw.spatialize(x, az, dist)
    if abs(math.sin(az)) > 1e-3:
        (dl, gl), (dr, gr) = sw.ear_params(az, dist)
        assert gl != gr
        assert _rms(w.samples[0]) != _rms(w.samples[1])
    assert np.all(np.isfinite(w.samples))


def test_spatialize_rejects_nonpositive_distance():
    with pytest.raises(ValueError):
        sw.spatialize(np.ones(1000), 0.0, 0.0)


# ---------------------------------------------------------------- catalog

def _catalog():
    return sw.make_catalog(10, 5, 0)


@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(2, 6))
def test_catalog_invariants(seed, T, M):
    objects, materials = sw.make_catalog(T, M, seed)
    for o in objects:
        f = [m[0] for m in o.base_modes]
        assert 4 <= len(f) <= 8
        assert all(b > a for a, b in zip(f, f[1:]))
        assert max(f) * 1.3 < sw.NYQUIST
        assert all(0 < a <= 1 for _, a in o.base_modes)
    for m in materials:
        assert m.damping > 0 and 0.8 <= m.freq_multiplier <= 1.3


def test_class_validation():
    with pytest.raises(ValueError):
        sw.ObjectClass(0, ((100.0, 0.5), (90.0, 0.5), (300.0, 0.5), (400.0, 0.5)))
    with pytest.raises(ValueError):
        sw.MaterialClass(0, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        sw.MaterialClass(0, 1.0, 1.5, 1.0)


def test_mode_at_nyquist_rejected():
    obj = sw.ObjectClass(0, ((1000.0, 1.0), (2000.0, 1.0), (4000.0, 1.0), (20000.0, 1.0)))
    mat = sw.MaterialClass(0, 5.0, 1.2, 1.0)
    with pytest.raises(ValueError, match="Nyquist"):
        sw.modal_core(obj, mat)


def test_damping_decay():
    objects, materials = _catalog()
    m = materials[0]
    fast = sw.MaterialClass(m.material_id, m.damping * 10, m.freq_multiplier, m.brightness)
    tail = slice(int(0.25 * SAMPLE_RATE), None)
    e_slow = np.sum(sw.modal_core(objects[0], m)[tail] ** 2)
    e_fast = np.sum(sw.modal_core(objects[0], fast)[tail] ** 2)
    assert e_slow / e_fast >= 50


def test_disjoint_modes_have_different_psd_peaks():
    a = sw.ObjectClass(0, ((500.0, 1.0), (700.0, 0.5), (900.0, 0.5), (1100.0, 0.5)))
    b = sw.ObjectClass(1, ((3000.0, 1.0), (3500.0, 0.5), (4000.0, 0.5), (4500.0, 0.5)))
    mat = sw.MaterialClass(0, 8.0, 1.0, 1.0)
    scene = sw.make_scene(0, "kitchen", np.random.default_rng(0))
    peaks = []
    for obj in (a, b):
        ev = sw.FallEvent(obj.type_id, 0, (2.0, 2.0))
        w = sw.render_impact(ev, mat, obj, scene, (1.0, 1.0, 0.0), 5)
        peaks.append(int(np.argmax(welch_psd(w)[0])))
    assert peaks[0] != peaks[1]


# ---------------------------------------------------------------- scenes

@given(st.integers(0, 10_000), st.sampled_from(sw.SCENE_CLASSES), st.booleans())
def test_scene_invariants(seed, cls, furniture):
    s = sw.make_scene(seed, cls, np.random.default_rng(seed), furniture)
    assert 4.0 <= s.width <= 12.0 and 4.0 <= s.height <= 12.0
    occ = s.occupancy
    assert occ[0].all() and occ[-1].all() and occ[:, 0].all() and occ[:, -1].all()
    _, n = ndimage.label(~occ)
    assert n == 1
    assert sw.SceneSpec.from_json(s.to_json()).to_json() == s.to_json()


# ---------------------------------------------------------------- rendering

def _episode(cfg, i):
    scenes = sw.make_scenes(cfg)
    return sw.sample_episode(cfg, i, scenes)


def test_render_deterministic_and_bounded():
    cfg = sw.DatasetConfig(seed=4)
    objects, materials = sw.make_catalog(cfg.types, cfg.materials, cfg.seed)
    for i in range(10):
        ep = _episode(cfg, i)
        a = sw.render_episode(ep, objects, materials)
        b = sw.render_episode(ep, objects, materials)
        assert a.samples.tobytes() == b.samples.tobytes()
        assert np.max(np.abs(a.samples)) <= 1.0
        assert len(a) == sw.N_SAMPLES


def test_render_rejects_mismatched_classes():
    objects, materials = _catalog()
    scene = sw.make_scene(0, "kitchen", np.random.default_rng(0))
    ev = sw.FallEvent(1, 0, (2.0, 2.0))
    with pytest.raises(ValueError):
        sw.render_impact(ev, materials[0], objects[0], scene, (1.0, 1.0, 0.0), 0)


def test_identifiability_premise():
    """Distance changes the PSD more than re-rendering the reverb with a new seed."""
    objects, materials = _catalog()
    rng = np.random.default_rng(8)
    scenes = [sw.make_scene(i, sw.SCENE_CLASSES[i % 2], np.random.default_rng(i)) for i in range(4)]
    wins = 0
    for i in range(200):
        t, m = int(rng.integers(10)), int(rng.integers(5))
        ev = sw.FallEvent(t, m, (0.0, 0.0), float(rng.uniform(0.5, 1.5)))
        scene = scenes[i % 4]
        az = float(rng.uniform(-math.pi, math.pi))
        seed = int(rng.integers(2**31))

        def psd(dist, s):
            direct, reverb = sw.render_source(ev, materials[m], objects[t], scene, s)
            return log_psd(sw.render_relative(direct, reverb, az, dist))

        base = psd(1.0, seed)
        d_dist = np.linalg.norm(psd(4.0, seed) - base)
        d_seed = np.linalg.norm(psd(1.0, seed + 1) - base)
        wins += d_dist > d_seed
    assert wins == 200


# ---------------------------------------------------------------- dataset

def test_episode_invariants():
    cfg = sw.DatasetConfig(seed=2)
    scenes = sw.make_scenes(cfg)
    for i in range(200):
        ep = sw.sample_episode(cfg, i, scenes)
        back = r2g(ep.relative_position, FrameTransform.from_pose(ep.agent_start))
        assert np.hypot(*(back - np.array(ep.event.position))) < 1e-9
        assert max(abs(v) for v in ep.relative_position) <= 5.0
        assert ep.scene.is_free(*ep.event.position)
        assert ep.scene.is_free(*ep.agent_start[:2])
        assert 0.5 <= ep.event.impact_energy <= 1.5
        assert ep.agent_start[2] / (math.pi / 6) == pytest.approx(round(ep.agent_start[2] / (math.pi / 6)))
        assert ep.split == ("test" if i % 10 == 9 else "train")


def test_type_frequencies_uniform():
    cfg = sw.DatasetConfig(episodes=500, seed=0)
    scenes = sw.make_scenes(cfg)
    counts = np.bincount([sw.sample_episode(cfg, i, scenes).event.type_id for i in range(500)],
                         minlength=10)
    sigma = math.sqrt(500 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 50) <= 3 * sigma)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError, match="episodes"):
        sw.generate_dataset(sw.DatasetConfig(episodes=0), tmp_path / "x")
    with pytest.raises(ValueError, match="types"):
        sw.DatasetConfig(types=1).validate()


def test_dataset_bytes_deterministic(tmp_path):
    cfg = sw.DatasetConfig(episodes=12, seed=5)
    a = sw.generate_dataset(cfg, tmp_path / "a.dafset").read_bytes()
    b = sw.generate_dataset(cfg, tmp_path / "b.dafset").read_bytes()
    assert a == b


def test_dataset_roundtrip(small_dataset, small_cfg):
    ds = small_dataset
    assert len(ds) == small_cfg.episodes
    objects, materials = sw.make_catalog(small_cfg.types, small_cfg.materials, small_cfg.seed)
    assert ds.objects == objects and ds.materials == materials
    for i in (0, 9, 17):
        ep = ds.episodes[i]
        ref = sw.render_episode(ep, ds.objects, ds.materials, small_cfg.noise_std)
        assert np.max(np.abs(ds.waveform(i).samples - ref.samples)) <= 0.5 / 32767 + 1e-12
    assert set(ds.select("test")) == {i for i in range(len(ds)) if i % 10 == 9}
    kitchen = ds.select(scene_class="kitchen")
    assert all(ds.episodes[i].scene.scene_class == "kitchen" for i in kitchen)


def test_dataset_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"garbage" * 10)
    with pytest.raises(ValueError):
        sw.Dataset(p)


def test_placement_failure_names_scene():
    cfg = sw.DatasetConfig(seed=0)
    occ = np.ones((20, 20), dtype=bool)
    occ[5, 5] = False
    # a single free cell leaves no way to keep the event 0.5 m from the agent
    scene = sw.SceneSpec(5.0, 5.0, occ, 0.3, 0.0, 42)
    with pytest.raises(sw.GenerationError, match="scene 42"):
        sw.sample_episode(cfg, 0, [scene])
