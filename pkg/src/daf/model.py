"""Disentangled acoustic field: encoder, generator, objective and training."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .signal import log_psd, log_stft
from .tensor import Tensor

log = logging.getLogger(__name__)

N_BANDS = 64
N_SEGMENTS = 8
FEATURE_DIM = 2 * N_BANDS * N_SEGMENTS
PSD_DIM = 258
ENC_HIDDEN = (512, 256)
GEN_HIDDEN = (256, 256)


class NumericError(ArithmeticError):
    pass


class TrainingError(RuntimeError):
    pass


# ----------------------------------------------------------------- features

def _edges(n: int, parts: int) -> np.ndarray:
    return np.array([len(a) for a in np.array_split(np.arange(n), parts)]).cumsum() - \
        np.array([len(a) for a in np.array_split(np.arange(n), parts)])


def pool_features(S: np.ndarray) -> np.ndarray:
    """Pool a (2, frames, bins) log-STFT into 64 bands x 8 time segments.

    Bins and frames are split into contiguous near-equal groups. Each cell is
    the log of the mean power it covers, halved back to log-magnitude units, so
    quiet frames do not swamp loud ones. Output is ordered (channel, band,
    segment) and has length 1024.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 3 or S.shape[0] != 2:
        raise ValueError(f"expected log-STFT of shape (2, frames, bins), got {S.shape}")
    ch, n_frames, n_bins = S.shape
    if n_frames < N_SEGMENTS:
        raise ValueError(f"need at least {N_SEGMENTS} frames, got {n_frames}")
    if n_bins < N_BANDS:
        raise ValueError(f"need at least {N_BANDS} bins, got {n_bins}")
    f_edges, b_edges = _edges(n_frames, N_SEGMENTS), _edges(n_bins, N_BANDS)
    f_len = np.diff(np.append(f_edges, n_frames))
    b_len = np.diff(np.append(b_edges, n_bins))
    power = np.exp(2.0 * S)
    seg = np.add.reduceat(power, f_edges, axis=1) / f_len[None, :, None]
    cell = np.add.reduceat(seg, b_edges, axis=2) / b_len[None, None, :]
    return 0.5 * np.log(cell.transpose(0, 2, 1).reshape(-1))


@dataclass
class Features:
    """Model-ready arrays for a set of episodes."""

    x: np.ndarray          # pooled log-STFT, (n, 1024)
    psd: np.ndarray        # log PSD target, (n, 258)
    position: np.ndarray   # egocentric (x, y), (n, 2)
    material: np.ndarray   # (n,)
    type: np.ndarray       # (n,)
    index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, rows) -> "Features":
        rows = np.asarray(rows, dtype=int)
        return Features(self.x[rows], self.psd[rows], self.position[rows], self.material[rows],
                        self.type[rows], self.index[rows] if self.index.size else self.index)


def waveform_features(w) -> tuple[np.ndarray, np.ndarray]:
    return pool_features(log_stft(w)), log_psd(w)


def dataset_features(ds, indices: Sequence[int] | None = None) -> Features:
    indices = list(range(len(ds))) if indices is None else list(indices)
    xs, ps = [], []
    for i in indices:
        x, p = waveform_features(ds.waveform(i))
        xs.append(x)
        ps.append(p)
    eps = [ds.episodes[i] for i in indices]
    return Features(np.array(xs).reshape(-1, FEATURE_DIM), np.array(ps).reshape(-1, PSD_DIM),
                    np.array([e.relative_position for e in eps], dtype=float).reshape(-1, 2),
                    np.array([e.event.material_id for e in eps], dtype=int),
                    np.array([e.event.type_id for e in eps], dtype=int),
                    np.array(indices, dtype=int))


# ---------------------------------------------------------------- networks

def _dense(rng, n_in: int, n_out: int, name: str) -> list[Tensor]:
    w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
    return [tn.parameter(w, f"{name}.w"), tn.parameter(np.zeros(n_out), f"{name}.b")]


def _mlp(params: Sequence[Tensor], x: Tensor) -> Tensor:
    n = len(params) // 2
    for i in range(n):
        x = tn.add_bias(tn.matmul(x, params[2 * i]), params[2 * i + 1])
        if i < n - 1:
            x = tn.relu(x)
    return x


@dataclass
class Hyperparams:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 1e-3
    eta: float = 1.0
    k: int = 16
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    target: str = "psd"
    weight_decay: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.delta, self.eta) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.k < 1:
            raise ValueError("latent dimension k must be >= 1")
        if self.target not in ("psd", "stft"):
            raise ValueError(f"target must be 'psd' or 'stft', got {self.target!r}")


@dataclass
class LatentFactors:
    p_hat: np.ndarray
    m_logits: np.ndarray
    t_logits: np.ndarray
    mu: np.ndarray
    log_sigma: np.ndarray
    z: np.ndarray | None = None


class DafModel:
    """Encoder and generator parameters plus input normalization."""

    def __init__(self, n_types: int, n_materials: int, k: int = 16, out_dim: int = PSD_DIM,
                 target: str = "psd", seed: int = 0, in_dim: int = FEATURE_DIM,
                 enc_hidden: Sequence[int] = ENC_HIDDEN, gen_hidden: Sequence[int] = GEN_HIDDEN):
        self.n_types, self.n_materials, self.k = n_types, n_materials, k
        self.out_dim, self.target, self.in_dim = out_dim, target, in_dim
        self.enc_hidden, self.gen_hidden = tuple(enc_hidden), tuple(gen_hidden)
        rng = np.random.default_rng([seed, 0xE])
        dims = (in_dim, *self.enc_hidden, self.head_dim)
        self.encoder = [p for i in range(len(dims) - 1) for p in _dense(rng, dims[i], dims[i + 1], f"enc{i}")]
        dims = (self.gen_in_dim, *self.gen_hidden, out_dim)
        self.generator = [p for i in range(len(dims) - 1) for p in _dense(rng, dims[i], dims[i + 1], f"gen{i}")]
        self.feat_mean = np.zeros(in_dim)
        self.feat_std = np.ones(in_dim)

    @property
    def head_dim(self) -> int:
        return 2 + self.n_materials + self.n_types + 2 * self.k

    @property
    def gen_in_dim(self) -> int:
        return 2 + self.n_materials + self.n_types + self.k

    @property
    def params(self) -> list[Tensor]:
        return self.encoder + self.generator

    def arch(self) -> dict:
        return {"n_types": self.n_types, "n_materials": self.n_materials, "k": self.k,
                "in_dim": self.in_dim, "out_dim": self.out_dim, "target": self.target,
                "enc_hidden": list(self.enc_hidden), "gen_hidden": list(self.gen_hidden)}

    # -- graph-building forward passes

    def encoder_heads(self, x: np.ndarray) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
        xn = Tensor((np.atleast_2d(x) - self.feat_mean) / self.feat_std)
        h = _mlp(self.encoder, xn)
        M, T, k = self.n_materials, self.n_types, self.k
        p = tn.slice_cols(h, 0, 2)
        m = tn.slice_cols(h, 2, 2 + M)
        t = tn.slice_cols(h, 2 + M, 2 + M + T)
        mu = tn.slice_cols(h, 2 + M + T, 2 + M + T + k)
        ls = tn.clamp(tn.slice_cols(h, 2 + M + T + k, 2 + M + T + 2 * k), tn.LOG_SIGMA_MIN, tn.LOG_SIGMA_MAX)
        return p, m, t, mu, ls

    def generator_out(self, p: Tensor, m: Tensor, t: Tensor, z: Tensor) -> Tensor:
        return _mlp(self.generator, tn.concat([p, m, t, z], axis=1))

    # -- numpy conveniences

    def encode(self, S: np.ndarray, rng: np.random.Generator | None = None) -> LatentFactors:
        """Encode a log-STFT (or pooled features); ``z`` is sampled when ``rng`` is given."""
        x = pool_features(S) if np.ndim(S) == 3 else np.asarray(S, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite encoder input features")
        p, m, t, mu, ls = self.encoder_heads(x)
        z = tn.reparameterize(mu, ls, rng).data[0] if rng is not None else None
        return LatentFactors(p.data[0], m.data[0], t.data[0], mu.data[0], ls.data[0], z)

    def generate(self, p, m_vec, t_vec, z) -> np.ndarray:
        p, m_vec, t_vec, z = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (p, m_vec, t_vec, z))
        expect = (2, self.n_materials, self.n_types, self.k)
        got = (p.shape[1], m_vec.shape[1], t_vec.shape[1], z.shape[1])
        if got != expect:
            raise ValueError(f"generator inputs have dims {got}, expected {expect}")
        h = np.concatenate([p, m_vec, t_vec, z], axis=1)
        n = len(self.generator) // 2
        for i in range(n):
            h = h @ self.generator[2 * i].data + self.generator[2 * i + 1].data
            if i < n - 1:
                h = np.maximum(h, 0.0)
        return h[0] if h.shape[0] == 1 else h

    def predict(self, S: np.ndarray, top_k: int = 3) -> dict:
        f = self.encode(S)
        k = min(top_k, self.n_types)
        return {
            "position": f.p_hat,
            "types": _ranked(f.t_logits)[:k],
            "materials": _ranked(f.m_logits)[:min(top_k, self.n_materials)],
            "type_probs": _softmax(f.t_logits),
            "material_probs": _softmax(f.m_logits),
            "mu": f.mu,
        }

    # -- persistence

    def save(self, path: str | Path) -> None:
        tensors = [("feat_mean", self.feat_mean), ("feat_std", self.feat_std)]
        tensors += [(p.name, p.data) for p in self.params]
        tn.save_checkpoint(path, self.arch(), tensors)

    @classmethod
    def load(cls, path: str | Path) -> "DafModel":
        arch, tensors = tn.load_checkpoint(path)
        model = cls(arch["n_types"], arch["n_materials"], arch["k"], arch["out_dim"], arch["target"],
                    in_dim=arch["in_dim"], enc_hidden=arch["enc_hidden"], gen_hidden=arch["gen_hidden"])
        model.feat_mean = tensors["feat_mean"]
        model.feat_std = tensors["feat_std"]
        for p in model.params:
            p.data = tensors[p.name].copy()
        return model


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _ranked(logits: np.ndarray) -> list[int]:
    # stable sort on -prob keeps lower index first among ties
    return [int(i) for i in np.argsort(-_softmax(logits), kind="stable")]


# --------------------------------------------------------------- objective

LOSS_NAMES = ("L_type", "L_material", "L_position", "D_KL", "L_PSD")


def reconstruction_target(feats: Features, target: str) -> np.ndarray:
    return feats.psd if target == "psd" else feats.x


def total_loss(batch: Features, model: DafModel, hyper: Hyperparams,
               rng: np.random.Generator) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the five loss terms, each averaged over the batch."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    p, m, t, mu, ls = model.encoder_heads(batch.x)
    z = tn.reparameterize(mu, ls, rng)
    out = model.generator_out(p, tn.softmax(m), tn.softmax(t), z)
    parts = {
        "L_type": tn.softmax_cross_entropy(t, batch.type),
        "L_material": tn.softmax_cross_entropy(m, batch.material),
        "L_position": tn.mse(p, batch.position, "half_sum") * (1.0 / n),
        "D_KL": tn.kl_diag_gaussian(mu, ls) * (1.0 / n),
        "L_PSD": tn.mse(out, reconstruction_target(batch, model.target), "mean_over_dim") * (1.0 / n),
    }
    weights = (hyper.alpha, hyper.beta, hyper.gamma, hyper.delta, hyper.eta)
    total = None
    for w, name in zip(weights, LOSS_NAMES):
        term = parts[name] * w
        total = term if total is None else total + term
    comps = {k: float(v.data) for k, v in parts.items()}
    comps["total"] = float(total.data)
    return total, comps


# ----------------------------------------------------------------- training

def fit_normalization(model: DafModel, feats: Features) -> None:
    model.feat_mean = feats.x.mean(axis=0)
    model.feat_std = np.maximum(feats.x.std(axis=0), 1e-3)
    target = reconstruction_target(feats, model.target)
    model.generator[-1].data[:] = target.mean(axis=0)


def train(feats: Features, n_types: int, n_materials: int, hyper: Hyperparams,
          model: DafModel | None = None, on_epoch=None) -> tuple[DafModel, list[dict]]:
    """Minibatch Adam on the composite objective; returns model and per-epoch losses.

    ``on_epoch(row, model)`` is called after every epoch when given.
    """
    if len(feats) < 1:
        raise ValueError("training needs at least one episode")
    out_dim = PSD_DIM if hyper.target == "psd" else FEATURE_DIM
    if model is None:
        model = DafModel(n_types, n_materials, hyper.k, out_dim, hyper.target, seed=hyper.seed)
        fit_normalization(model, feats)
    params = model.params
    state = tn.AdamState.for_params(params)
    rng = np.random.default_rng([hyper.seed, 0x7A])
    trace = []
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(feats))
        sums = dict.fromkeys((*LOSS_NAMES, "total"), 0.0)
        for b, start in enumerate(range(0, len(order), hyper.batch_size)):
            batch = feats.subset(order[start:start + hyper.batch_size])
            for p in params:
                p.zero_grad()
            loss, comps = total_loss(batch, model, hyper, rng)
            if not np.isfinite(comps["total"]):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {comps}")
            tn.backward(loss)
            tn.adam_step(params, [p.grad for p in params], state, hyper.lr, hyper.weight_decay)
            for key, val in comps.items():
                sums[key] += val * len(batch)
        row = {"epoch": epoch, **{k: v / len(feats) for k, v in sums.items()}}
        trace.append(row)
        log.debug("epoch %d total %.4f", epoch, row["total"])
        if on_epoch is not None:
            on_epoch(row, model)
    return model, trace


def train_stft_variant(feats: Features, n_types: int, n_materials: int,
                       hyper: Hyperparams) -> tuple[DafModel, list[dict]]:
    """Same pipeline, reconstructing the pooled log-STFT instead of the PSD."""
    return train(feats, n_types, n_materials, Hyperparams(**{**asdict(hyper), "target": "stft"}))


def write_trace(path: str | Path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", *LOSS_NAMES, "total"])
        for row in trace:
            w.writerow([row["epoch"], *(repr(row[k]) for k in (*LOSS_NAMES, "total"))])


# --------------------------------------------------------------- evaluation

def random_cell_error(positions: np.ndarray) -> float:
    """Expected distance from the truth to a uniformly drawn loss-map cell."""
    from .infer import grid_centers

    c = grid_centers()
    gx, gy = np.meshgrid(c, c, indexing="ij")
    errs = [np.hypot(gx - p[0], gy - p[1]).mean() for p in np.asarray(positions)]
    return float(np.mean(errs))


def evaluate(model: DafModel, feats: Features) -> dict:
    p, m, t, _, _ = model.encoder_heads(feats.x)
    t_rank = np.argsort(-t.data, axis=1, kind="stable")
    m_rank = np.argsort(-m.data, axis=1, kind="stable")
    return {
        "position_error_m": float(np.mean(np.hypot(*(p.data - feats.position).T))),
        "top1_acc": float(np.mean(t_rank[:, 0] == feats.type)),
        "top3_acc": float(np.mean((t_rank[:, :3] == feats.type[:, None]).any(axis=1))),
        "material_acc": float(np.mean(m_rank[:, 0] == feats.material)),
        "random_cell_error_m": random_cell_error(feats.position),
        "episodes": len(feats),
    }
