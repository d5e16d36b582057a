"""Glue shared by the CLI and the acceptance harness: phantom -> slab ->
per-channel guidance -> normalized GAN inputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .guidance import GuidanceMap, mean_hu_assignment
from .phantom import LabeledPhantom
from .volumes import DEFAULT_WINDOW, Slab, select_2_5d, select_labels, window_hu


@dataclass(frozen=True)
class SlabSample:
    slab: Slab  # HU values, un-normalized
    labels: np.ndarray  # (4, H, W) truth classes for the same slices
    seed: int

    def normalized(self, window=DEFAULT_WINDOW) -> np.ndarray:
        return window_hu(self.slab.values, window)


def slab_sample(ph: LabeledPhantom) -> SlabSample:
    return SlabSample(select_2_5d(ph.volume), select_labels(ph.truth), ph.seed)


def guidance_per_channel(masks: np.ndarray, hu: np.ndarray) -> list[GuidanceMap]:
    """One mean-HU guidance map per slab channel from a (4, H, W) mask stack."""
    return [mean_hu_assignment(m, h) for m, h in zip(masks, hu)]


def stack_guidance(maps: Sequence[GuidanceMap], window=DEFAULT_WINDOW) -> np.ndarray:
    return np.stack([m.normalized(window) for m in maps])


def truth_guidance(sample: SlabSample, window=DEFAULT_WINDOW) -> np.ndarray:
    """Normalized guidance built from the phantom's exact class masks."""
    return stack_guidance(guidance_per_channel(sample.labels, sample.slab.values), window)
