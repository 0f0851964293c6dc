"""Train a small acoustic model and use it to search for fallen objects.

Generates a synthetic dataset, trains the PSD-supervised model, reports
held-out property accuracy, then runs every search policy on a handful of
test episodes. Sizes are kept small so this finishes in about a minute.

    python demos/train_and_navigate.py [episodes] [epochs]
"""

import sys
import tempfile
from pathlib import Path

from daf import model as md, planner as pl, synthworld as sw


def main(episodes: int = 400, epochs: int = 20) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        path = sw.generate_dataset(sw.DatasetConfig(episodes=episodes, seed=0), Path(tmp) / "demo.dafset")
        run(sw.Dataset(path), epochs)


def run(ds: sw.Dataset, epochs: int) -> None:
    train_idx, test_idx = ds.select("train"), ds.select("test")
    print(f"dataset: {len(train_idx)} train, {len(test_idx)} test episodes")

    hyper = md.Hyperparams(epochs=epochs)
    model, trace = md.train(md.dataset_features(ds, train_idx), ds.n_types, ds.n_materials, hyper,
                            on_epoch=lambda row, _: print(f"  epoch {row['epoch']:3d} loss {row['total']:.3f}"))
    r = md.evaluate(model, md.dataset_features(ds, test_idx))
    print(f"position error {r['position_error_m']:.2f} m (random cell {r['random_cell_error_m']:.2f} m), "
          f"top-1 {r['top1_acc']:.2f}, top-3 {r['top3_acc']:.2f}, material {r['material_acc']:.2f}")

    results = {p: [] for p in pl.POLICIES}
    for i in test_idx[:10]:
        ep = ds.episodes[i]
        world = pl.NavWorld.from_episode(ep)
        belief = pl.make_belief(model, ds.waveform(i), ep.transform)[0]
        for p in pl.POLICIES:
            results[p].append(pl.plan_episode(world, ep.agent_start, belief, pl.PolicyConfig(p), i))
    for p, res in results.items():
        m = pl.compute_metrics(res)
        print(f"{p:>11}: SR {m.sr:.2f}  SPL {m.spl:.3f}  SNA {m.sna:.3f}")


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:3]]
    main(*args)
