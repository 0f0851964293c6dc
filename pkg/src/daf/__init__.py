"""Disentangled acoustic fields at desk scale.

Synthetic binaural impact sounds, an encoder/generator trained on a
composite objective, loss-map position inference and an uncertainty-aware
navigation planner.
"""

__version__ = "0.1.0"

SAMPLE_RATE = 44100
