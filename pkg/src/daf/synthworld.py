"""Parametric impact-sound world.

Rooms are occupancy grids with a per-scene reverberation tail; objects are
sums of exponentially decaying modes whose frequencies and decay depend on
object type and material. The direct sound passes through a front/back
pinna coloration and a simple ITD/ILD spatializer.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import SAMPLE_RATE
from .frames import FrameTransform, g2r
from .signal import Waveform, float_to_pcm16, pcm16_to_float

DURATION = 1.0
N_SAMPLES = int(SAMPLE_RATE * DURATION)
NYQUIST = SAMPLE_RATE / 2

HEAD_RADIUS = 0.0875
SPEED_OF_SOUND = 343.0
HEAD_SHADOW = 0.3
MIN_GAIN_DISTANCE = 0.5

PINNA_DEPTH = 0.9
PINNA_CORNER_HZ = 1500.0
# source peak levels at unit impact energy; loud near-field renders are
# scaled back to unit peak by render_relative
DIRECT_GAIN = 0.5
REVERB_GAIN = 0.125
MAX_ONSET = 0.25

GRID_RES = 0.25
MAX_EVENT_DISTANCE = 5.0
MIN_EVENT_DISTANCE = 0.5
MAX_PLACEMENT_TRIES = 1000

SCENE_CLASSES = ("kitchen", "study")
DATASET_MAGIC = b"dafset-v1\n"


class GenerationError(RuntimeError):
    def __init__(self, scene_id: int, message: str):
        super().__init__(f"scene {scene_id}: {message}")
        self.scene_id = scene_id


# ------------------------------------------------------------------ catalog

@dataclass(frozen=True)
class ObjectClass:
    type_id: int
    base_modes: tuple[tuple[float, float], ...]

    def __post_init__(self):
        freqs = [f for f, _ in self.base_modes]
        if not 4 <= len(freqs) <= 8:
            raise ValueError(f"type {self.type_id}: need 4-8 modes, got {len(freqs)}")
        if any(b <= a for a, b in zip(freqs, freqs[1:])):
            raise ValueError(f"type {self.type_id}: mode frequencies must increase")
        if freqs[-1] >= NYQUIST or any(not 0 < a <= 1 for _, a in self.base_modes):
            raise ValueError(f"type {self.type_id}: invalid mode set {self.base_modes}")


@dataclass(frozen=True)
class MaterialClass:
    material_id: int
    damping: float
    freq_multiplier: float
    brightness: float

    def __post_init__(self):
        if self.damping <= 0:
            raise ValueError(f"material {self.material_id}: damping must be positive")
        if not 0.8 <= self.freq_multiplier <= 1.3:
            raise ValueError(f"material {self.material_id}: freq_multiplier outside [0.8, 1.3]")


def make_catalog(n_types: int, n_materials: int, seed: int) -> tuple[list[ObjectClass], list[MaterialClass]]:
    rng = np.random.default_rng([seed, 0xCA7])
    objects = []
    for t in range(n_types):
        n = int(rng.integers(4, 9))
        f0 = math.exp(rng.uniform(math.log(400.0), math.log(2000.0)))
        ratios = np.sort(rng.uniform(1.2, 7.0, n - 1))
        freqs = np.concatenate([[1.0], ratios]) * f0
        freqs = np.maximum.accumulate(freqs + np.arange(n) * 1e-3)
        amps = rng.uniform(0.3, 1.0, n)
        objects.append(ObjectClass(t, tuple((float(f), float(a)) for f, a in zip(freqs, amps))))
    dampings = np.geomspace(5.0, 35.0, n_materials) * rng.uniform(0.9, 1.1, n_materials)
    mults = rng.permutation(np.linspace(0.8, 1.3, n_materials))
    bright = rng.uniform(0.6, 1.1, n_materials)
    materials = [MaterialClass(m, float(dampings[m]), float(mults[m]), float(bright[m]))
                 for m in range(n_materials)]
    return objects, materials


# ------------------------------------------------------------------- scenes

@dataclass
class SceneSpec:
    width: float
    height: float
    occupancy: np.ndarray  # bool, True = blocked, indexed [row (y), col (x)]
    reverb_t60: float
    spectral_tilt: float
    scene_id: int
    scene_class: str = "kitchen"
    resolution: float = GRID_RES

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(y / self.resolution)), int(math.floor(x / self.resolution))

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return ((col + 0.5) * self.resolution, (row + 0.5) * self.resolution)

    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.occupancy.shape[0] and 0 <= col < self.occupancy.shape[1]

    def blocked(self, row: int, col: int) -> bool:
        return not self.in_bounds(row, col) or bool(self.occupancy[row, col])

    def is_free(self, x: float, y: float) -> bool:
        return not self.blocked(*self.cell_of(x, y))

    def free_cells(self) -> np.ndarray:
        return np.argwhere(~self.occupancy)

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "scene_class": self.scene_class,
            "width": self.width,
            "height": self.height,
            "resolution": self.resolution,
            "reverb_t60": self.reverb_t60,
            "spectral_tilt": self.spectral_tilt,
            "occupancy": ["".join("1" if b else "0" for b in row) for row in self.occupancy],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        occ = np.array([[c == "1" for c in row] for row in d["occupancy"]], dtype=bool)
        return cls(d["width"], d["height"], occ, d["reverb_t60"], d["spectral_tilt"],
                   d["scene_id"], d["scene_class"], d["resolution"])


_CLASS_PARAMS = {
    # size range (m), t60 range (s), tilt range (dB/octave)
    "kitchen": ((4.0, 8.0), (0.25, 0.5), (-1.5, 0.0)),
    "study": ((6.0, 12.0), (0.55, 0.9), (-4.5, -2.5)),
}


def make_scene(scene_id: int, scene_class: str, rng: np.random.Generator,
               furniture: bool = True) -> SceneSpec:
    (lo, hi), t60r, tiltr = _CLASS_PARAMS[scene_class]
    cols = int(round(rng.uniform(lo, hi) / GRID_RES))
    rows = int(round(rng.uniform(lo, hi) / GRID_RES))
    occ = np.zeros((rows, cols), dtype=bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    if furniture:
        for _ in range(int(rng.integers(2, 6))):
            h, w = (int(v) for v in rng.integers(2, 9, 2))
            r0 = int(rng.integers(1, max(2, rows - h)))
            c0 = int(rng.integers(1, max(2, cols - w)))
            occ[r0:r0 + h, c0:c0 + w] = True
    labels, n = ndimage.label(~occ)
    if n == 0:
        raise GenerationError(scene_id, "no free space")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    occ = labels != (1 + int(np.argmax(sizes)))
    return SceneSpec(cols * GRID_RES, rows * GRID_RES, occ, float(rng.uniform(*t60r)),
                     float(rng.uniform(*tiltr)), scene_id, scene_class)


# ------------------------------------------------------------------- events

@dataclass(frozen=True)
class FallEvent:
    type_id: int
    material_id: int
    position: tuple[float, float]
    impact_energy: float = 1.0
    onset: float = 0.0  # seconds of silence before the impact


@dataclass
class Episode:
    index: int
    scene: SceneSpec
    agent_start: tuple[float, float, float]
    event: FallEvent
    relative_position: tuple[float, float]
    render_seed: int
    split: str = "train"
    distractors: list[tuple[int, tuple[float, float]]] = field(default_factory=list)
    waveform: Waveform | None = None

    @property
    def transform(self) -> FrameTransform:
        return FrameTransform.from_pose(self.agent_start)


def source_geometry(relative_position) -> tuple[float, float]:
    """Azimuth (radians, + to the left) and distance of an egocentric point."""
    x, y = float(relative_position[0]), float(relative_position[1])
    return math.atan2(y, x), math.hypot(x, y)


# ---------------------------------------------------------------- rendering

def ear_params(azimuth: float, distance: float, sample_rate: int = SAMPLE_RATE):
    """Per-ear (delay in samples, gain) for left and right."""
    if distance <= 0:
        raise ValueError(f"distance must be positive, got {distance}")
    s = math.sin(azimuth)
    base = 1.0 / max(distance, MIN_GAIN_DISTANCE)
    d_left = round((distance - HEAD_RADIUS * s) / SPEED_OF_SOUND * sample_rate)
    d_right = round((distance + HEAD_RADIUS * s) / SPEED_OF_SOUND * sample_rate)
    g_left = base * (1.0 - HEAD_SHADOW * max(0.0, -s))
    g_right = base * (1.0 - HEAD_SHADOW * max(0.0, s))
    return (d_left, g_left), (d_right, g_right)


def _delay(x: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros_like(x)
    if n < x.size:
        out[n:] = x[: x.size - n]
    return out


def spatialize(mono, azimuth: float, distance: float, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Binaural rendering by interaural delay and level with head shadow."""
    x = np.asarray(mono, dtype=np.float64)
    (dl, gl), (dr, gr) = ear_params(azimuth, distance, sample_rate)
    return Waveform(np.stack([gl * _delay(x, dl), gr * _delay(x, dr)]), sample_rate)


def pinna_depth(azimuth: float) -> float:
    """High-frequency attenuation factor; 0 in front, PINNA_DEPTH behind."""
    return PINNA_DEPTH * 0.5 * (1.0 - math.cos(azimuth))


def pinna_highpass(x: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    f = np.fft.rfftfreq(x.size, 1.0 / sample_rate)
    hp = f * f / (f * f + PINNA_CORNER_HZ**2)
    return np.fft.irfft(np.fft.rfft(x) * hp, n=x.size)


def modal_core(obj: ObjectClass, material: MaterialClass, n: int = N_SAMPLES,
               sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Unit-bounded sum of decaying modes, starting at sample 0."""
    freqs = np.array([f for f, _ in obj.base_modes]) * material.freq_multiplier
    if np.any(freqs >= sample_rate / 2):
        raise ValueError(f"type {obj.type_id} x material {material.material_id}: "
                         f"mode at {freqs.max():.0f} Hz reaches Nyquist")
    amps = np.array([a for _, a in obj.base_modes])
    octave = np.log2(freqs / freqs[0])
    weights = amps * material.brightness**octave
    t = np.arange(n) / sample_rate
    modes = np.sin(2.0 * np.pi * freqs[:, None] * t[None, :]) * weights[:, None]
    return modes.sum(axis=0) * np.exp(-material.damping * t) / weights.sum()


def reverb_tail(scene: SceneSpec, rng: np.random.Generator, n: int = N_SAMPLES,
                sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Unit-peak tilted noise with a 60 dB decay over ``reverb_t60``, from sample 0."""
    noise = rng.standard_normal(n)
    f = np.maximum(np.fft.rfftfreq(n, 1.0 / sample_rate), 50.0)
    tilt = 10.0 ** (scene.spectral_tilt * np.log2(f / 1000.0) / 20.0)
    shaped = np.fft.irfft(np.fft.rfft(noise) * tilt, n=n)
    t = np.arange(n) / sample_rate
    tail = shaped * np.exp(-6.91 * t / scene.reverb_t60)
    return tail / np.max(np.abs(tail))


def render_source(event: FallEvent, material: MaterialClass, obj: ObjectClass,
                  scene: SceneSpec, rng_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Direct mono signal and diffuse reverberation, both starting at the onset.

    Neither depends on where the listener is; position enters only through
    :func:`render_relative`.
    """
    core = modal_core(obj, material)
    core /= np.max(np.abs(core))
    tail = reverb_tail(scene, np.random.default_rng(rng_seed))
    lag = int(round(event.onset * SAMPLE_RATE))
    scale = event.impact_energy
    return _delay(DIRECT_GAIN * scale * core, lag), _delay(REVERB_GAIN * scale * tail, lag)


def render_impact(event: FallEvent, material: MaterialClass, obj: ObjectClass,
                  scene: SceneSpec, agent, rng_seed: int) -> Waveform:
    """Render the binaural sound of ``event`` heard by an agent at pose ``agent``."""
    if obj.type_id != event.type_id or material.material_id != event.material_id:
        raise ValueError("event does not match the given object/material classes")
    rel = g2r(event.position, FrameTransform.from_pose(agent))
    azimuth, distance = source_geometry(rel)
    direct, reverb = render_source(event, material, obj, scene, rng_seed)
    return render_relative(direct, reverb, azimuth, distance)


def render_relative(direct: np.ndarray, reverb: np.ndarray, azimuth: float, distance: float) -> Waveform:
    """Pinna-filter and spatialize direct sound plus reverberation.

    Both paths share the head shadow, pinna filter and interaural delays, but
    the reverberant level does not fall off with distance, so the
    direct-to-reverberant ratio carries distance independently of impact
    energy.
    """
    mono = direct + max(distance, MIN_GAIN_DISTANCE) * reverb
    mono = mono - pinna_depth(azimuth) * pinna_highpass(mono)
    samples = spatialize(mono, azimuth, distance).samples
    peak = np.max(np.abs(samples))
    if peak > 1.0:
        samples = samples / peak
    return Waveform(samples, SAMPLE_RATE)


# ------------------------------------------------------------------ dataset

@dataclass
class DatasetConfig:
    types: int = 10
    materials: int = 5
    scene_count: int = 8
    episodes: int = 500
    seed: int = 0
    furniture: bool = True
    distractors: int = 4
    noise_std: float = 1e-4

    def validate(self) -> None:
        if self.types < 2:
            raise ValueError("types must be >= 2")
        if self.materials < 2:
            raise ValueError("materials must be >= 2")
        if self.scene_count < 1:
            raise ValueError("scene_count must be >= 1")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.distractors < 0:
            raise ValueError("distractors must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def episode_rng(seed: int, index: int, purpose: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, index, purpose])


def make_scenes(cfg: DatasetConfig) -> list[SceneSpec]:
    return [make_scene(i, SCENE_CLASSES[i % 2], episode_rng(cfg.seed, i, 1), cfg.furniture)
            for i in range(cfg.scene_count)]


def _random_point_in_cell(scene: SceneSpec, cell, rng) -> tuple[float, float]:
    r, c = int(cell[0]), int(cell[1])
    return ((c + rng.uniform(0.05, 0.95)) * scene.resolution,
            (r + rng.uniform(0.05, 0.95)) * scene.resolution)


def sample_episode(cfg: DatasetConfig, index: int, scenes: Sequence[SceneSpec]) -> Episode:
    rng = episode_rng(cfg.seed, index)
    scene = scenes[int(rng.integers(len(scenes)))]
    free = scene.free_cells()
    for _ in range(MAX_PLACEMENT_TRIES):
        r, c = free[int(rng.integers(len(free)))]
        start = (*scene.cell_center(r, c), int(rng.integers(12)) * math.pi / 6)
        pos = _random_point_in_cell(scene, free[int(rng.integers(len(free)))], rng)
        d = math.hypot(pos[0] - start[0], pos[1] - start[1])
        if MIN_EVENT_DISTANCE <= d <= MAX_EVENT_DISTANCE:
            break
    else:
        raise GenerationError(scene.scene_id, f"no valid placement for episode {index} "
                                              f"after {MAX_PLACEMENT_TRIES} samples")
    event = FallEvent(int(rng.integers(cfg.types)), int(rng.integers(cfg.materials)),
                      (float(pos[0]), float(pos[1])), float(rng.uniform(0.5, 1.5)),
                      float(rng.uniform(0.0, MAX_ONSET)))
    render_seed = int(rng.integers(2**31))
    distractors = []
    for _ in range(cfg.distractors):
        for _ in range(MAX_PLACEMENT_TRIES):
            q = _random_point_in_cell(scene, free[int(rng.integers(len(free)))], rng)
            if math.hypot(q[0] - pos[0], q[1] - pos[1]) >= 1.0:
                distractors.append((int(rng.integers(cfg.types)), (float(q[0]), float(q[1]))))
                break
    rel = g2r(event.position, FrameTransform.from_pose(start))
    return Episode(index, scene, start, event, (float(rel[0]), float(rel[1])), render_seed,
                   "test" if index % 10 == 9 else "train", distractors)


def render_episode(ep: Episode, objects, materials, noise_std: float = 0.0) -> Waveform:
    """Render an episode, optionally adding a seeded white sensor-noise floor."""
    w = render_impact(ep.event, materials[ep.event.material_id], objects[ep.event.type_id],
                      ep.scene, ep.agent_start, ep.render_seed)
    if noise_std == 0.0:
        return w
    rng = np.random.default_rng([ep.render_seed, 0x5E])
    return Waveform(w.samples + noise_std * rng.standard_normal(w.samples.shape), w.sample_rate)


def generate_dataset(cfg: DatasetConfig, path: str | Path) -> Path:
    """Sample, render and write a ``dafset-v1`` container."""
    cfg.validate()
    objects, materials = make_catalog(cfg.types, cfg.materials, cfg.seed)
    scenes = make_scenes(cfg)
    entries, blobs, offset = [], [], 0
    for i in range(cfg.episodes):
        ep = sample_episode(cfg, i, scenes)
        pcm = float_to_pcm16(render_episode(ep, objects, materials, cfg.noise_std).samples).T.tobytes()
        entries.append({
            "index": i,
            "scene_id": ep.scene.scene_id,
            "scene_class": ep.scene.scene_class,
            "split": ep.split,
            "agent_start": list(ep.agent_start),
            "event": asdict(ep.event),
            "relative_position": list(ep.relative_position),
            "render_seed": ep.render_seed,
            "distractors": [[t, list(p)] for t, p in ep.distractors],
            "pcm": {"offset": offset, "bytes": len(pcm), "frames": len(pcm) // 4},
        })
        blobs.append(pcm)
        offset += len(pcm)
    index = {
        "format": "dafset-v1",
        "config": asdict(cfg),
        "sample_rate": SAMPLE_RATE,
        "objects": [{"type_id": o.type_id, "base_modes": [list(m) for m in o.base_modes]} for o in objects],
        "materials": [asdict(m) for m in materials],
        "scenes": [s.to_json() for s in scenes],
        "episodes": entries,
    }
    header = json.dumps(index, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    return path


class Dataset:
    """Read-only view of a ``dafset-v1`` file; waveforms decoded on demand."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            if fh.read(len(DATASET_MAGIC)) != DATASET_MAGIC:
                raise ValueError(f"{self.path}: not a dafset-v1 file")
            (n,) = struct.unpack("<Q", fh.read(8))
            self.index = json.loads(fh.read(n))
        self._blob_start = len(DATASET_MAGIC) + 8 + n
        self._pcm = np.memmap(self.path, dtype="<i2", mode="r", offset=self._blob_start)
        self.config = DatasetConfig(**self.index["config"])
        self.objects = [ObjectClass(o["type_id"], tuple(tuple(m) for m in o["base_modes"]))
                        for o in self.index["objects"]]
        self.materials = [MaterialClass(**m) for m in self.index["materials"]]
        self.scenes = [SceneSpec.from_json(s) for s in self.index["scenes"]]
        self.episodes = [self._episode(e) for e in self.index["episodes"]]

    def _episode(self, e: dict) -> Episode:
        return Episode(e["index"], self.scenes[e["scene_id"]], tuple(e["agent_start"]),
                       FallEvent(**{**e["event"], "position": tuple(e["event"]["position"])}),
                       tuple(e["relative_position"]), e["render_seed"], e["split"],
                       [(t, tuple(p)) for t, p in e["distractors"]])

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def n_types(self) -> int:
        return len(self.objects)

    @property
    def n_materials(self) -> int:
        return len(self.materials)

    def waveform(self, i: int) -> Waveform:
        pcm = self.index["episodes"][i]["pcm"]
        start = pcm["offset"] // 2
        raw = np.asarray(self._pcm[start:start + pcm["bytes"] // 2])
        return Waveform(pcm16_to_float(raw.reshape(-1, 2).T), self.index["sample_rate"])

    def select(self, split: str | None = None, scene_class: str | None = None) -> list[int]:
        return [ep.index for ep in self.episodes
                if (split is None or ep.split == split)
                and (scene_class is None or ep.scene.scene_class == scene_class)]
