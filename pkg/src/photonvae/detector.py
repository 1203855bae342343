"""Detector response: efficiency loss and the multi-detector click collapse.

A photon stream first survives Bernoulli thinning with the detection
efficiency, then hits a balanced tree of click detectors that each report at
most one click per observation (the low-rate dead-time regime), so the click
count equals the number of distinct detectors hit.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .distributions import PhotonPMF, PhysicsError, pmf_mean

# Datasets record click probabilities up to this count, so click PMFs are
# always padded out to at least this index.
MAX_RECORDED_CLICKS = 6


@dataclass(frozen=True)
class DetectorConfig:
    """Balanced bank of click detectors with a common detection efficiency."""

    n_detectors: int
    efficiency: float
    equal_split: bool = True

    def __post_init__(self):
        if self.n_detectors < 1:
            raise PhysicsError(f"n_detectors must be >= 1, got {self.n_detectors}")
        if not (0.0 < self.efficiency <= 1.0):
            raise PhysicsError(f"efficiency must lie in (0, 1], got {self.efficiency}")
        if not self.equal_split:
            raise PhysicsError("only the balanced splitter tree (equal_split=True) is modeled")


@dataclass(frozen=True, eq=False)
class ClickCoefficients:
    """Probability table C[n, j]: j photons spread uniformly over the detectors
    occupy exactly n distinct ones."""

    n_detectors: int
    table: np.ndarray  # shape (n_detectors + 1, j_max + 1)

    @property
    def j_max(self) -> int:
        return self.table.shape[1] - 1

    def __getitem__(self, key: tuple[int, int]) -> float:
        n, j = key
        return float(self.table[n, j])


def apply_efficiency(pmf: PhotonPMF, efficiency: float) -> PhotonPMF:
    """Bernoulli-thin a photon-number PMF: each photon survives with given probability."""
    if not (0.0 < efficiency <= 1.0):
        raise PhysicsError(f"efficiency must lie in (0, 1], got {efficiency}")
    if efficiency == 1.0:
        return pmf
    size = pmf.probs.size
    out = np.zeros(size)
    miss = 1.0 - efficiency
    for n in range(size):
        # survival kernel comb(m, n) * eta^n * (1-eta)^(m-n), accumulated over m >= n
        kernel = efficiency**n
        total = kernel * pmf.probs[n]
        for m in range(n + 1, size):
            kernel *= miss * m / (m - n)
            total += kernel * pmf.probs[m]
        out[n] = total
    return PhotonPMF(out)


@lru_cache(maxsize=None)
def _click_table(n_detectors: int, j_max: int) -> np.ndarray:
    n_top = min(n_detectors, j_max)
    table = np.zeros((n_detectors + 1, j_max + 1))
    table[0, 0] = 1.0
    for j in range(1, j_max + 1):
        denom = n_detectors**j
        for n in range(1, min(n_top, j) + 1):
            # surjections of j photons onto n chosen detectors, by inclusion-exclusion
            surj = sum(
                (-1) ** i * math.comb(n, i) * (n - i) ** j for i in range(n + 1)
            )
            table[n, j] = float(Fraction(math.comb(n_detectors, n) * surj, denom))
    table.setflags(write=False)
    return table


def click_coefficients(n_detectors: int, j_max: int) -> ClickCoefficients:
    """Closed-form occupancy coefficients for all photon counts up to ``j_max``."""
    if n_detectors < 1:
        raise PhysicsError(f"n_detectors must be >= 1, got {n_detectors}")
    if j_max < 0:
        raise PhysicsError(f"j_max must be >= 0, got {j_max}")
    return ClickCoefficients(n_detectors, _click_table(n_detectors, j_max))


def enumerate_click_row(n_detectors: int, j: int) -> np.ndarray:
    """Brute-force C[., j] by walking all n_detectors**j photon-to-detector assignments.

    Exponential in j; intended as the independent cross-check for small cases.
    """
    counts = np.zeros(n_detectors + 1, dtype=np.int64)
    for assignment in itertools.product(range(n_detectors), repeat=j):
        counts[len(set(assignment))] += 1
    return counts / float(n_detectors**j)


def apply_click_model(pmf: PhotonPMF, n_detectors: int) -> PhotonPMF:
    """Collapse a photon-number PMF to the click-count PMF of the detector bank.

    The output support is 0..min(n_max, n_detectors), zero-padded out to index
    ``MAX_RECORDED_CLICKS`` for dataset compatibility.
    """
    coeffs = click_coefficients(n_detectors, pmf.n_max)
    out_n_max = max(min(pmf.n_max, n_detectors), MAX_RECORDED_CLICKS)
    out = np.zeros(out_n_max + 1)
    limit = min(n_detectors, pmf.n_max)
    out[: limit + 1] = coeffs.table[: limit + 1, :] @ pmf.probs
    return PhotonPMF(out)


def observed_chain(pmf: PhotonPMF, config: DetectorConfig) -> PhotonPMF:
    """Efficiency thinning followed by the click collapse, in that order."""
    return apply_click_model(apply_efficiency(pmf, config.efficiency), config.n_detectors)


def chain_mean(pmf: PhotonPMF, config: DetectorConfig) -> float:
    """Mean click count after the full detector chain."""
    return pmf_mean(observed_chain(pmf, config))
