"""Locate a fallen object by analysis-by-synthesis with the ground-truth renderer.

Renders one episode, sweeps the renderer over the 100 x 100 ego grid, and
prints the argmin error plus a coarse text view of the loss map.

    python demos/oracle_lossmap.py [episode]
"""

import sys

import numpy as np

from daf import infer, synthworld as sw
from daf.signal import log_psd

SHADES = " .:-=+*#%@"


def main(index: int = 0) -> None:
    cfg = sw.DatasetConfig(seed=0)
    objects, materials = sw.make_catalog(cfg.types, cfg.materials, cfg.seed)
    ep = sw.sample_episode(cfg, index, sw.make_scenes(cfg))
    wave = sw.render_episode(ep, objects, materials)

    synth = infer.RendererSynth.for_episode(ep, objects, materials)
    lmap = infer.loss_map(None, log_psd(wave), synth, infer.oracle_encoder, ep.transform)
    best = lmap.argmin_ego()
    truth = np.asarray(ep.relative_position)
    print(f"episode {index} in {ep.scene.scene_class} scene {ep.scene.scene_id}")
    print(f"true ego position  ({truth[0]:+.2f}, {truth[1]:+.2f}) m")
    print(f"argmin ego position ({best[0]:+.2f}, {best[1]:+.2f}) m, error {np.hypot(*(best - truth)):.3f} m")
    print(f"synthesizer calls {synth.calls}")

    # 20 x 20 block minima, rows from +y down to -y, dark = low loss
    v = np.log(lmap.values + 1e-12)
    blocks = v.reshape(20, 5, 20, 5).min(axis=(1, 3))
    scaled = (blocks - blocks.min()) / (np.ptp(blocks) or 1.0)
    for col in range(19, -1, -1):
        print("".join(SHADES[int(s * (len(SHADES) - 1))] * 2 for s in scaled[:, col]))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
