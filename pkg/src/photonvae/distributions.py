"""Truncated photon-number distributions for classical and photon-added light.

All generators return absolute (never renormalized) probabilities over
n = 0..n_max and refuse truncation bounds that drop more than ``TAIL_BOUND``
of probability mass, since the downstream detector convolutions assume
absolute probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

# Maximum probability mass allowed beyond the truncation index.
TAIL_BOUND = 1e-6
# Float-rounding slack above exact normalization.
_SUM_EXCESS = 1e-12

# Paper-scale default truncation; weak sources fit comfortably below it.
DEFAULT_N_MAX = 20

_AUTO_N_MAX_CAP = 4096


class PhysicsError(ValueError):
    """A physical constraint (normalization, tail bound, parameter range) was violated."""


class SourceKind(str, Enum):
    COHERENT = "coherent"
    THERMAL = "thermal"
    SPACS = "spacs"
    SPATS = "spats"
    MIXED_COHERENT_SPACS = "mix_coherent_spacs"
    MIXED_THERMAL_SPATS = "mix_thermal_spats"


MIXED_KINDS = frozenset({SourceKind.MIXED_COHERENT_SPACS, SourceKind.MIXED_THERMAL_SPATS})


@dataclass(frozen=True, eq=False)
class PhotonPMF:
    """Photon-number probabilities over n = 0..n_max, truncated but not renormalized."""

    probs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise PhysicsError("probability vector must be 1-D and non-empty")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise PhysicsError("probabilities must lie in [0, 1]")
        total = float(arr.sum())
        if not (1.0 - TAIL_BOUND <= total <= 1.0 + _SUM_EXCESS):
            raise PhysicsError(
                f"probability sum {total!r} outside [1 - {TAIL_BOUND}, 1 + {_SUM_EXCESS}]; "
                "raise n_max to satisfy the tail bound"
            )
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    @property
    def n_max(self) -> int:
        return self.probs.size - 1

    def truncated(self, n_max: int) -> "PhotonPMF":
        """Shorten the support to 0..n_max; fails if the dropped mass breaks the tail bound."""
        if n_max >= self.n_max:
            return self
        return PhotonPMF(self.probs[: n_max + 1])


@dataclass(frozen=True)
class SourceSpec:
    """A light source: family plus intensity parameter.

    ``mean_param`` is |alpha|^2 for the coherent family and the initial thermal
    occupation for the thermal family.  ``mix_ratio`` is the weight of the
    classical base state in a mixed source and is canonicalized to 1.0 for
    non-mixed kinds.
    """

    kind: SourceKind
    mean_param: float
    mix_ratio: float = 1.0

    def __post_init__(self):
        kind = SourceKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not (self.mean_param >= 0.0):
            raise PhysicsError(f"mean_param must be >= 0, got {self.mean_param}")
        if kind in MIXED_KINDS:
            if not (0.0 <= self.mix_ratio <= 1.0):
                raise PhysicsError(f"mix_ratio must lie in [0, 1], got {self.mix_ratio}")
        else:
            object.__setattr__(self, "mix_ratio", 1.0)


def _validate_args(mean: float, n_max: int, name: str) -> None:
    if mean < 0.0:
        raise PhysicsError(f"{name} must be >= 0, got {mean}")
    if n_max < 0:
        raise PhysicsError(f"n_max must be >= 0, got {n_max}")


def coherent_pmf(mean: float, n_max: int = DEFAULT_N_MAX) -> PhotonPMF:
    """Poisson photon statistics of a coherent state with mean photon number ``mean``."""
    _validate_args(mean, n_max, "mean")
    probs = np.zeros(n_max + 1)
    term = np.exp(-mean)
    probs[0] = term
    for n in range(1, n_max + 1):
        term *= mean / n
        probs[n] = term
    return PhotonPMF(probs)


def thermal_pmf(nbar: float, n_max: int = DEFAULT_N_MAX) -> PhotonPMF:
    """Bose-Einstein photon statistics of a thermal state with mean occupation ``nbar``."""
    _validate_args(nbar, n_max, "nbar")
    probs = np.zeros(n_max + 1)
    ratio = nbar / (1.0 + nbar)
    term = 1.0 / (1.0 + nbar)
    probs[0] = term
    for n in range(1, n_max + 1):
        term *= ratio
        probs[n] = term
    return PhotonPMF(probs)


def spacs_pmf(alpha_sq: float, n_max: int = DEFAULT_N_MAX) -> PhotonPMF:
    """Photon statistics of a single-photon-added coherent state.

    Two scaled Poissonians shifted by one and two photons; terms whose
    factorial argument would be negative are zero, so the vacuum
    probability vanishes identically.
    """
    _validate_args(alpha_sq, n_max, "alpha_sq")
    probs = np.zeros(n_max + 1)
    pref = np.exp(-alpha_sq) / (1.0 + alpha_sq)
    # one-shifted term alpha_sq^(n-1)/(n-1)! and two-shifted term alpha_sq^(n-1)/(n-2)!
    if n_max >= 1:
        one_shift = 1.0
        two_shift = 0.0
        probs[1] = pref * one_shift
        for n in range(2, n_max + 1):
            one_shift *= alpha_sq / (n - 1)
            two_shift = one_shift if n == 2 else two_shift * alpha_sq / (n - 2)
            probs[n] = pref * (one_shift + two_shift)
    return PhotonPMF(probs)


def spats_pmf(nbar: float, n_max: int = DEFAULT_N_MAX) -> PhotonPMF:
    """Photon statistics of a single-photon-added thermal state.

    Negative-binomial form n * nbar^(n-1) / (1+nbar)^(n+1), zero at n = 0.
    """
    _validate_args(nbar, n_max, "nbar")
    probs = np.zeros(n_max + 1)
    if n_max >= 1:
        ratio = nbar / (1.0 + nbar)
        geom = 1.0 / (1.0 + nbar) ** 2
        probs[1] = geom
        for n in range(2, n_max + 1):
            geom *= ratio
            probs[n] = n * geom
    return PhotonPMF(probs)


def mixed_pmf(base: PhotonPMF, added: PhotonPMF, r: float) -> PhotonPMF:
    """Convex combination r*base + (1-r)*added of two distributions on the same support."""
    if base.n_max != added.n_max:
        raise PhysicsError(
            f"mixed components must share n_max, got {base.n_max} and {added.n_max}"
        )
    if not (0.0 <= r <= 1.0):
        raise PhysicsError(f"mix ratio must lie in [0, 1], got {r}")
    return PhotonPMF(r * base.probs + (1.0 - r) * added.probs)


def pmf_mean(pmf: PhotonPMF) -> float:
    """First moment sum(n * P(n)) over the truncated support."""
    return float(np.dot(np.arange(pmf.probs.size), pmf.probs))


def source_pmf(source: SourceSpec, n_max: int | None = None) -> PhotonPMF:
    """Build the photon-number PMF for a source description.

    With ``n_max=None`` the truncation bound is grown automatically until the
    omitted tail fits under ``TAIL_BOUND``; an explicit bound that violates the
    tail constraint raises ``PhysicsError``.
    """
    if n_max is not None:
        return _source_pmf_at(source, n_max)
    bound = DEFAULT_N_MAX
    while True:
        try:
            return _source_pmf_at(source, bound)
        except PhysicsError:
            if bound >= _AUTO_N_MAX_CAP:
                raise
            bound *= 2


def _source_pmf_at(source: SourceSpec, n_max: int) -> PhotonPMF:
    kind = source.kind
    m = source.mean_param
    if kind is SourceKind.COHERENT:
        return coherent_pmf(m, n_max)
    if kind is SourceKind.THERMAL:
        return thermal_pmf(m, n_max)
    if kind is SourceKind.SPACS:
        return spacs_pmf(m, n_max)
    if kind is SourceKind.SPATS:
        return spats_pmf(m, n_max)
    if kind is SourceKind.MIXED_COHERENT_SPACS:
        return mixed_pmf(coherent_pmf(m, n_max), spacs_pmf(m, n_max), source.mix_ratio)
    if kind is SourceKind.MIXED_THERMAL_SPATS:
        return mixed_pmf(thermal_pmf(m, n_max), spats_pmf(m, n_max), source.mix_ratio)
    raise PhysicsError(f"unknown source kind {kind!r}")
