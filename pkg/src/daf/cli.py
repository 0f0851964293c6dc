"""Command-line entry point: ``daf <command> --config FILE [--seed N] [--out DIR]``.

Configs are flat ``key = value`` files; ``#`` starts a comment. Every run
writes its resolved config to ``DIR/config.resolved`` before doing any work,
and keeps timestamps only in the ``DIR/run.log`` sidecar, so all other
outputs are byte-for-byte reproducible.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import infer, model as md, planner as pl, synthworld as sw
from .signal import log_psd, log_stft

log = logging.getLogger("daf")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config

def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(v: str) -> str:
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")
        return v
    return parse


def _str_list(v: str) -> list[str]:
    return [x.strip() for x in v.split(",") if x.strip()]


_HYPER = {
    "alpha": (float, 1.0), "beta": (float, 1.0), "gamma": (float, 1.0), "delta": (float, 1e-3),
    "eta": (float, 1.0), "k": (int, 16), "lr": (float, 1e-3), "epochs": (int, 60),
    "batch_size": (int, 64), "weight_decay": (float, 1.0),
}

# per command: key -> (parser, default); default None means required
SCHEMAS: dict[str, dict[str, tuple[Callable, Any]]] = {
    "synth": {
        "seed": (int, 0), "types": (int, 10), "materials": (int, 5), "scenes": (int, 8),
        "episodes": (int, 500), "furniture": (_bool, True), "distractors": (int, 4),
        "noise_std": (float, 1e-4), "dataset": (str, "dataset.dafset"),
    },
    "train": {
        "seed": (int, 0), "dataset": (str, None), "target": (_choice("psd", "stft"), "psd"),
        "train_class": (_choice("all", *sw.SCENE_CLASSES), "all"),
        "checkpoint": (str, "model.ckpt"), "losses": (str, "losses.csv"), **_HYPER,
    },
    "eval-props": {
        "seed": (int, 0), "dataset": (str, None), "checkpoint": (str, ""),
        "split": (_choice("train", "test", "all"), "test"),
        "train_class": (_choice("", *sw.SCENE_CLASSES), ""),
        "test_class": (_choice("", *sw.SCENE_CLASSES), ""),
        "target": (_choice("psd", "stft"), "psd"), **_HYPER,
    },
    "lossmap": {
        "seed": (int, 0), "dataset": (str, None), "episode": (int, 0),
        "mode": (_choice("learned", "oracle"), "learned"), "checkpoint": (str, ""),
    },
    "navigate": {
        "seed": (int, 0), "dataset": (str, None), "checkpoint": (str, None),
        "policies": (_str_list, ["full", "no-lossmap", "random", "oracle"]),
        "episodes": (int, 100), "split": (_choice("train", "test", "all"), "test"),
        "trajectories": (_bool, True),
    },
    "report": {
        "seed": (int, 0), "runs": (_str_list, None), "title": (str, "DAF results"),
    },
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"{source}:{n}: empty key")
        if key in out:
            raise UsageError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def resolve_config(command: str, raw: dict[str, str], seed: int | None = None) -> dict[str, Any]:
    """Apply the command schema: reject unknown keys, parse values, fill defaults."""
    schema = SCHEMAS[command]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise UsageError(f"unknown config key(s) for '{command}': {', '.join(unknown)}")
    cfg: dict[str, Any] = {}
    for key, (parse, default) in schema.items():
        if key in raw:
            try:
                cfg[key] = parse(raw[key])
            except ValueError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        elif default is None:
            raise UsageError(f"missing required config key {key!r}")
        else:
            cfg[key] = default
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def format_config(cfg: dict[str, Any]) -> str:
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ helpers

def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _resolve_path(p: str, base: Path) -> Path:
    q = Path(p)
    return q if q.is_absolute() or q.exists() else base / q


def _load_dataset(cfg, out: Path) -> sw.Dataset:
    path = _resolve_path(cfg["dataset"], out)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return sw.Dataset(path)


def _hyper(cfg) -> md.Hyperparams:
    names = {f.name for f in fields(md.Hyperparams)}
    return md.Hyperparams(**{k: v for k, v in cfg.items() if k in names})


def _split_indices(ds: sw.Dataset, split: str, scene_class: str | None = None) -> list[int]:
    return _nonempty(ds.select(None if split == "all" else split, scene_class or None), split, scene_class)


def _nonempty(idx: list[int], split: str | None, scene_class: str | None = None) -> list[int]:
    if not idx:
        what = " ".join(x for x in (scene_class, split or "all") if x)
        raise UsageError(f"no {what} episodes in the dataset")
    return idx


def _finite(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


# ------------------------------------------------------------------ commands

def cmd_synth(cfg, out: Path) -> int:
    dc = sw.DatasetConfig(types=cfg["types"], materials=cfg["materials"], scene_count=cfg["scenes"],
                          episodes=cfg["episodes"], seed=cfg["seed"], furniture=cfg["furniture"],
                          distractors=cfg["distractors"], noise_std=cfg["noise_std"])
    try:
        dc.validate()
    except ValueError as exc:
        # validate() messages start with the field name; map it to the config key
        raise UsageError(f"config key {str(exc).replace('scene_count', 'scenes')}") from None
    path = sw.generate_dataset(dc, out / cfg["dataset"])
    ds = sw.Dataset(path)
    n_train, n_test = len(ds.select("train")), len(ds.select("test"))
    print(f"wrote {path}: {len(ds)} episodes (train {n_train}, test {n_test})")
    return 0


def cmd_train(cfg, out: Path) -> int:
    ds = _load_dataset(cfg, out)
    idx = ds.select("train", None if cfg["train_class"] == "all" else cfg["train_class"])
    if not idx:
        raise UsageError("no training episodes match the config")
    feats = md.dataset_features(ds, idx)
    model, trace = md.train(feats, ds.n_types, ds.n_materials, _hyper(cfg))
    model.save(out / cfg["checkpoint"])
    md.write_trace(out / cfg["losses"], trace)
    print(f"trained {cfg['target']} model on {len(idx)} episodes; final loss {trace[-1]['total']:.4f}")
    return 0


def cmd_eval_props(cfg, out: Path) -> int:
    ds = _load_dataset(cfg, out)
    a, b = cfg["train_class"], cfg["test_class"]
    if bool(a) != bool(b):
        raise UsageError("cross-scene mode needs both train_class and test_class")
    if a:
        # cross-scene protocol: train on class A, compare held-out A with all of B
        train_idx = _nonempty(ds.select("train", a), "train", a)
        same_idx = _nonempty(ds.select("test", a), "test", a)
        cross_idx = _nonempty(ds.select(None, b), None, b)
        model, _ = md.train(md.dataset_features(ds, train_idx), ds.n_types, ds.n_materials, _hyper(cfg))
        same = md.evaluate(model, md.dataset_features(ds, same_idx))
        cross = md.evaluate(model, md.dataset_features(ds, cross_idx))
        result = {"train_class": a, "test_class": b, "same_class": same, "cross_class": cross}
    else:
        if not cfg["checkpoint"]:
            raise UsageError("missing required config key 'checkpoint'")
        model = md.DafModel.load(_resolve_path(cfg["checkpoint"], out))
        result = md.evaluate(model, md.dataset_features(ds, _split_indices(ds, cfg["split"])))
    _dump_json(out / "props.json", result)
    print(json.dumps(result, sort_keys=True))
    return 0


def write_lossmap_csv(path: Path, lmap: infer.LossMap) -> None:
    c = lmap.centers
    with open(path, "w") as fh:
        fh.write("row,col,x_ego,y_ego,x_global,y_global,value\n")
        for i in range(infer.GRID_SIZE):
            for j in range(infer.GRID_SIZE):
                gx, gy = lmap.global_xy(i, j)
                fh.write(f"{i},{j},{float(c[i])!r},{float(c[j])!r},{float(gx)!r},{float(gy)!r},{float(lmap.values[i, j])!r}\n")


def lossmap_image(values: np.ndarray) -> np.ndarray:
    """8-bit grey image, min black and max white; image row 0 is ego y = +4.95."""
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    img = np.rint(scaled * 255.0).astype(np.uint8)
    # values[row = x, col = y] -> image[row = -y, col = x]
    return img.T[::-1]


def write_pgm(path: Path, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


def cmd_lossmap(cfg, out: Path) -> int:
    ds = _load_dataset(cfg, out)
    i = cfg["episode"]
    if not 0 <= i < len(ds):
        raise UsageError(f"config key 'episode': {i} is outside 0..{len(ds) - 1}")
    ep = ds.episodes[i]
    w = ds.waveform(i)
    if cfg["mode"] == "oracle":
        synth = infer.RendererSynth.for_episode(ep, ds.objects, ds.materials)
        lmap = infer.loss_map(None, log_psd(w), synth, infer.oracle_encoder, ep.transform)
    else:
        if not cfg["checkpoint"]:
            raise UsageError("missing required config key 'checkpoint'")
        model = md.DafModel.load(_resolve_path(cfg["checkpoint"], out))
        lmap = infer.loss_map(log_stft(w), log_psd(w), infer.GeneratorSynth(model),
                              infer.model_encoder(model), ep.transform)
    write_lossmap_csv(out / "lossmap.csv", lmap)
    write_pgm(out / "lossmap.pgm", lossmap_image(lmap.values))
    best = lmap.argmin_ego()
    summary = {
        "episode": i, "mode": cfg["mode"],
        "argmin_ego": [float(v) for v in best],
        "argmin_global": [float(v) for v in infer.r2g(best, ep.transform)],
        "true_ego": list(ep.relative_position),
        "error_m": float(np.hypot(*(best - np.asarray(ep.relative_position)))),
        "minima_global": [[float(v) for v in m] for m in infer.local_minima(lmap, 3)],
    }
    _dump_json(out / "lossmap.json", summary)
    print(f"loss map for episode {i} ({cfg['mode']}): argmin error {summary['error_m']:.3f} m")
    return 0


def cmd_navigate(cfg, out: Path) -> int:
    ds = _load_dataset(cfg, out)
    for p in cfg["policies"]:
        if p not in pl.POLICIES:
            raise UsageError(f"config key 'policies': unknown policy {p!r}")
    model = md.DafModel.load(_resolve_path(cfg["checkpoint"], out))
    idx = _split_indices(ds, cfg["split"])[: cfg["episodes"]]
    results: dict[str, list[pl.EpisodeResult]] = {p: [] for p in cfg["policies"]}
    needs_belief = any(p in ("full", "no-lossmap") for p in cfg["policies"])
    for i in idx:
        ep = ds.episodes[i]
        world = pl.NavWorld.from_episode(ep)
        belief = pl.make_belief(model, ds.waveform(i), ep.transform)[0] if needs_belief else None
        for p in cfg["policies"]:
            results[p].append(pl.plan_episode(world, ep.agent_start, belief,
                                              pl.PolicyConfig(p, cfg["seed"]), i))
        log.info("episode %d done", i)
    metrics = {}
    for p, res in results.items():
        m = pl.compute_metrics(res)
        metrics[p] = asdict(m)
        _dump_json(out / f"results_{p}.json",
                   {"episodes": [_finite(r.to_json()) for r in res], "metrics": asdict(m)})
        if cfg["trajectories"]:
            tdir = out / "trajectories" / p
            tdir.mkdir(parents=True, exist_ok=True)
            for r in res:
                pl.write_trajectory(tdir / f"episode_{r.index:05d}.csv", r)
        print(f"{p:>11}: SR {m.sr:.3f}  SPL {m.spl:.3f}  SNA {m.sna:.3f}  ({m.episodes} episodes)")
    _dump_json(out / "metrics.json", metrics)
    return 0


def _fmt(v) -> str:
    return f"{v:.3f}" if isinstance(v, float) else str(v)


def cmd_report(cfg, out: Path) -> int:
    nav_rows, prop_rows = [], []
    for run in cfg["runs"]:
        d = Path(run)
        found = False
        if (d / "metrics.json").exists():
            found = True
            for policy, m in json.loads((d / "metrics.json").read_text()).items():
                nav_rows.append((run, policy, m["sr"], m["spl"], m["sna"], m["episodes"]))
        if (d / "props.json").exists():
            found = True
            p = json.loads((d / "props.json").read_text())
            if "cross_class" in p:
                for label in ("same_class", "cross_class"):
                    q = p[label]
                    prop_rows.append((f"{run} ({label.replace('_', '-')})", q["position_error_m"],
                                      q["top1_acc"], q["top3_acc"], q["material_acc"]))
            else:
                prop_rows.append((run, p["position_error_m"], p["top1_acc"], p["top3_acc"], p["material_acc"]))
        if not found:
            raise FileNotFoundError(f"no metrics.json or props.json in {d}")
    lines = [f"# {cfg['title']}", ""]
    if prop_rows:
        lines += ["## Property prediction", "",
                  "| run | position error (m) | top-1 type | top-3 type | material |",
                  "|---|---|---|---|---|"]
        lines += ["| " + " | ".join(_fmt(v) for v in row) + " |" for row in prop_rows]
        lines.append("")
    if nav_rows:
        lines += ["## Navigation", "", "| run | policy | SR | SPL | SNA | episodes |",
                  "|---|---|---|---|---|---|"]
        lines += ["| " + " | ".join(_fmt(v) for v in row) + " |" for row in nav_rows]
        lines.append("")
    (out / "report.md").write_text("\n".join(lines))
    print("\n".join(lines))
    return 0


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval-props": cmd_eval_props,
    "lossmap": cmd_lossmap, "navigate": cmd_navigate, "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="daf", description="Disentangled acoustic fields at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        if name == "train":
            p.add_argument("--target", choices=("psd", "stft"), default=None,
                           help="generator reconstruction target")
        if name == "eval-props":
            p.add_argument("--train-class", choices=sw.SCENE_CLASSES, default=None)
            p.add_argument("--test-class", choices=sw.SCENE_CLASSES, default=None)
    return parser


def _setup_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise UsageError(f"config file not found: {cfg_path}")
        raw = parse_config_text(cfg_path.read_text(), str(cfg_path))
        for flag in ("target", "train_class", "test_class"):
            if getattr(args, flag, None) is not None:
                raw[flag] = getattr(args, flag)
        cfg = resolve_config(args.command, raw, args.seed)
    except UsageError as exc:
        print(f"daf: usage error: {exc}", file=sys.stderr)
        return 1

    out = Path(args.out)
    handler = None
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(format_config(cfg))
        handler = _setup_log(out)
        log.info("daf %s with %s", args.command, cfg_path)
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"daf: usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.exception("run failed")
        print(f"daf: error: {exc}", file=sys.stderr)
        return 2
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
