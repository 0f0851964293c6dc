"""Analysis-by-synthesis position inference over an egocentric grid."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .frames import FrameTransform, g2r, r2g, wrap_angle
from .signal import WELCH_FFT, WELCH_OVERLAP, WELCH_WIN, hann_window, one_sided_weights, psd_scale
from . import synthworld as sw

__all__ = ["FrameTransform", "r2g", "g2r", "wrap_angle", "LossMap", "loss_map", "local_minima",
           "grid_centers", "RendererSynth", "GeneratorSynth", "model_encoder", "oracle_encoder",
           "SynthesisError"]

GRID_SIZE = 100
GRID_RES = 0.1
GRID_HALF = 5.0
PSD_EPS = 1e-10


class SynthesisError(RuntimeError):
    pass


class Synthesizer(Protocol):
    def __call__(self, p: np.ndarray, m: np.ndarray, t: np.ndarray, z: np.ndarray) -> np.ndarray: ...


def grid_centers() -> np.ndarray:
    """Cell-center coordinates, ``-4.95 + 0.1 * index``."""
    return -GRID_HALF + GRID_RES / 2 + GRID_RES * np.arange(GRID_SIZE)


@dataclass
class LossMap:
    """Reconstruction error per egocentric cell.

    ``values[row, col]`` is the error at ``x = centers[row]``,
    ``y = centers[col]`` in the egocentric frame at capture time.
    """

    values: np.ndarray
    transform: FrameTransform
    resolution: float = GRID_RES

    @property
    def centers(self) -> np.ndarray:
        return grid_centers()

    def ego_xy(self, row: int, col: int) -> np.ndarray:
        c = self.centers
        return np.array([c[row], c[col]])

    def global_xy(self, row: int, col: int) -> np.ndarray:
        return r2g(self.ego_xy(row, col), self.transform)

    def cell_of_ego(self, xy) -> tuple[int, int] | None:
        idx = np.floor((np.asarray(xy, dtype=float) + GRID_HALF) / GRID_RES).astype(int)
        if np.any(idx < 0) or np.any(idx >= GRID_SIZE):
            return None
        return int(idx[0]), int(idx[1])

    def value_at_global(self, xy) -> float:
        """Loss at the cell containing a global point; ``inf`` outside the map."""
        cell = self.cell_of_ego(g2r(xy, self.transform))
        return math.inf if cell is None else float(self.values[cell])

    def argmin_ego(self) -> np.ndarray:
        row, col = np.unravel_index(np.argmin(self.values), self.values.shape)
        return self.ego_xy(row, col)


def _workers() -> int:
    env = os.environ.get("DAF_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def loss_map(S, S_bar: np.ndarray, synthesizer: Synthesizer, encoder: Callable,
             tf: FrameTransform, workers: int | None = None) -> LossMap:
    """Fill the 100x100 grid with ``(1/d) ||synth(p) - S_bar||^2``.

    ``encoder(S)`` is called once and must return ``(m, t, z)`` vectors that
    stay fixed over the sweep. Cells are split across ``workers`` threads;
    the result does not depend on the split.
    """
    m, t, z = encoder(S)
    target = np.asarray(S_bar, dtype=np.float64)
    d = target.size
    centers = grid_centers()
    values = np.empty((GRID_SIZE, GRID_SIZE))

    def fill(rows):
        for i in rows:
            for j in range(GRID_SIZE):
                p = np.array([centers[i], centers[j]])
                try:
                    out = np.asarray(synthesizer(p, m, t, z), dtype=np.float64)
                except Exception as exc:
                    raise SynthesisError(f"synthesizer failed at cell ({i}, {j}), p={p.tolist()}: {exc}") from exc
                if out.shape != target.shape:
                    raise SynthesisError(f"synthesizer returned shape {out.shape} at cell ({i}, {j}), "
                                         f"expected {target.shape}")
                diff = out - target
                values[i, j] = diff @ diff / d

    n = workers or _workers()
    chunks = [r for r in np.array_split(np.arange(GRID_SIZE), n) if r.size]
    if len(chunks) == 1:
        fill(chunks[0])
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            list(pool.map(fill, chunks))
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise SynthesisError(f"non-finite loss at cell ({bad[0]}, {bad[1]})")
    return LossMap(values, tf)


def local_minima(lmap: LossMap, count: int = 3, min_separation: float = 1.0) -> list[np.ndarray]:
    """Global positions of up to ``count`` separated local minima, best first.

    A cell qualifies when it is <= each of its (up to 8) neighbors.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    v = lmap.values
    padded = np.pad(v, 1, constant_values=np.inf)
    is_min = np.ones_like(v, dtype=bool)
    n = v.shape[0]
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                is_min &= v <= padded[1 + di:1 + di + n, 1 + dj:1 + dj + v.shape[1]]
    cells = np.argwhere(is_min)
    # ascending value, ties by (row, col); argwhere is already row-major
    order = np.argsort(v[is_min], kind="stable")
    chosen: list[np.ndarray] = []
    for idx in order:
        ego = lmap.ego_xy(*cells[idx])
        if all(np.hypot(*(ego - c)) >= min_separation for c in chosen):
            chosen.append(ego)
            if len(chosen) == count:
                break
    return [r2g(c, lmap.transform) for c in chosen]


# ------------------------------------------------------- renderer synthesis

def shifted_welch_terms(signals, delays) -> dict[int, np.ndarray]:
    """Welch cross terms of ``signals`` delayed together.

    Returns ``{delay: array (pairs, bins)}`` with one row per pair ``i <= j``
    in row-major order, holding ``Re(X_i conj X_j)`` averaged and scaled like
    :func:`welch_psd`, so that for any coefficients ``c`` the PSD of
    ``delay(sum_i c_i x_i)`` is ``sum_{i<=j} (2 - [i == j]) c_i c_j P_ij``.

    Segments for delay ``128 q + res`` are segments for delay ``res``
    shifted by ``q`` hops, so one set of FFTs per residue serves every delay.
    """
    hop = WELCH_WIN - WELCH_OVERLAP
    signals = [np.asarray(x, dtype=np.float64) for x in signals]
    n = signals[0].size
    n_seg = (n - WELCH_WIN) // hop + 1
    delays = sorted({int(d) for d in delays})
    q_max = max(delays) // hop
    lead = hop * (q_max + 2)
    padded = [np.concatenate([np.zeros(lead), x]) for x in signals]
    win = hann_window(WELCH_WIN)
    scale = psd_scale() * one_sided_weights(WELCH_FFT) / n_seg
    idx = np.arange(WELCH_WIN)[None, :]
    j = np.arange(-(q_max + 1), n_seg)
    pairs = pair_index(len(signals))
    by_residue: dict[int, list[int]] = {}
    for d in delays:
        by_residue.setdefault(d % hop, []).append(d)
    out: dict[int, np.ndarray] = {}
    for res, ds in by_residue.items():
        starts = (lead - res + hop * j)[:, None] + idx
        X = [np.fft.rfft(x[starts] * win, n=WELCH_FFT, axis=-1) for x in padded]
        terms = np.stack([X[a].real * X[b].real + X[a].imag * X[b].imag for a, b in pairs])
        csum = np.concatenate([np.zeros((len(pairs), 1, terms.shape[-1])), np.cumsum(terms, axis=1)], axis=1)
        for d in ds:
            lo = (q_max + 1) - d // hop
            out[d] = (csum[:, lo + n_seg] - csum[:, lo]) * scale
    return out


def pair_index(n: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(n) for b in range(a, n)]


def pair_coefficients(c: np.ndarray) -> np.ndarray:
    """Weights of the cross terms from :func:`shifted_welch_terms` for mixing ``c``."""
    return np.array([(1.0 if a == b else 2.0) * c[a] * c[b] for a, b in pair_index(len(c))])


class RendererSynth:
    """Ground-truth PSD synthesizer for one event, parameterized by position.

    Uses the same source signals, pinna filter and spatializer as
    :func:`synthworld.render_impact`; only the egocentric position varies.
    The ``m``, ``t``, ``z`` arguments are ignored since the class, material and
    scene are bound at construction.
    """

    def __init__(self, direct: np.ndarray, reverb: np.ndarray,
                 extent: float = GRID_HALF * math.sqrt(2) + 0.5):
        u = np.asarray(direct, dtype=np.float64)
        r = np.asarray(reverb, dtype=np.float64)
        max_delay = int(math.ceil((extent + sw.HEAD_RADIUS) / sw.SPEED_OF_SOUND * sw.SAMPLE_RATE)) + 1
        # ear signal = gain * delay(u + D r - a (HP u + D HP r)), D = max(d, 0.5)
        self.terms = shifted_welch_terms([u, sw.pinna_highpass(u), r, sw.pinna_highpass(r)],
                                         range(max_delay + 1))
        self.calls = 0

    @classmethod
    def for_episode(cls, ep: "sw.Episode", objects, materials) -> "RendererSynth":
        e = ep.event
        return cls(*sw.render_source(e, materials[e.material_id], objects[e.type_id], ep.scene, ep.render_seed))

    def psd(self, p) -> np.ndarray:
        azimuth, distance = sw.source_geometry(p)
        distance = max(distance, 1e-9)
        a = sw.pinna_depth(azimuth)
        dr = max(distance, sw.MIN_GAIN_DISTANCE)
        ears = []
        for d, g in sw.ear_params(azimuth, distance):
            coef = pair_coefficients(g * np.array([1.0, -a, dr, -a * dr]))
            ears.append(coef @ self.terms[d])
        return np.concatenate(ears)

    def __call__(self, p, m=None, t=None, z=None) -> np.ndarray:
        self.calls += 1
        return np.log(np.maximum(self.psd(p), 0.0) + PSD_EPS)


class GeneratorSynth:
    """Learned synthesizer: the trained generator evaluated at ``(p, m, t, z)``."""

    def __init__(self, model):
        self.model = model
        self.calls = 0

    def __call__(self, p, m, t, z) -> np.ndarray:
        self.calls += 1
        return self.model.generate(p, m, t, z)


def model_encoder(model) -> Callable:
    """Encoder for :func:`loss_map`: one-hot argmax material and type, ``z = mu``."""

    def encode(S):
        f = model.encode(S)
        m = np.zeros(model.n_materials)
        t = np.zeros(model.n_types)
        m[int(np.argmax(f.m_logits))] = 1.0
        t[int(np.argmax(f.t_logits))] = 1.0
        return m, t, f.mu

    return encode


def oracle_encoder(S=None):
    """Encoder stand-in for renderer synthesis: no factors are needed."""
    return None, None, None
