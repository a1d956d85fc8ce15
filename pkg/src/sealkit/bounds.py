"""False-positive certificates for randomly sampled detectors.

Two bounds are evaluated here.  The geometric bound controls the joint
probability of drawing a detector direction and an input whose response
exceeds a threshold; it needs only the feature mean norm and the covariance
trace.  The data-driven bound certifies a fixed detector from the count of
exceedances in a calibration sample, via the DKW inequality.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .tensor import covariance_trace


class BoundError(ValueError):
    """Bound hypotheses violated by the supplied inputs."""


@dataclass(frozen=True)
class MomentEstimate:
    d: int
    mu_norm: float
    cov_trace: float
    count: int

    def __post_init__(self):
        if self.d < 1:
            raise BoundError("dimension must be >= 1")
        if self.cov_trace < 0:
            raise BoundError("covariance trace must be non-negative")


@dataclass
class BoundCertificate:
    kind: str
    inputs: dict
    value: float
    raw_value: float
    clamped: bool
    estimated_moments: bool = False
    seed: Optional[int] = None
    version: str = __version__
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def _certificate(kind, inputs, raw, **extra) -> BoundCertificate:
    value = min(max(raw, 0.0), 1.0)
    return BoundCertificate(kind, inputs, value, raw, value != raw, **extra)


def estimate_moments(features) -> MomentEstimate:
    """Plug-in mean norm and unbiased covariance trace of feature samples."""
    s = np.asarray([np.ravel(f) for f in features], dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 2:
        raise BoundError("at least two feature samples are needed to estimate a covariance")
    return MomentEstimate(s.shape[1], float(np.linalg.norm(s.mean(axis=0))), covariance_trace(s), s.shape[0])


def sphere_projection_factor(d: int) -> float:
    """(d-1)/(d+1) * (Gamma(d/2) / Gamma((d+1)/2))**2, evaluated in log space."""
    if d < 2:
        raise BoundError("the geometric bound needs d >= 2")
    log_ratio = math.lgamma(d / 2) - math.lgamma((d + 1) / 2)
    return (d - 1) / (d + 1) * math.exp(2 * log_ratio)


def geometric_value(d: int, cov_trace: float, margin: float) -> float:
    if margin <= 0:
        raise BoundError("threshold must exceed the feature mean norm")
    return cov_trace / (2 * margin**2) * sphere_projection_factor(d)


def geometric_bound(est: MomentEstimate, threshold: float, seed=None) -> BoundCertificate:
    margin = threshold - est.mu_norm
    raw = geometric_value(est.d, est.cov_trace, margin)
    inputs = {"threshold": threshold, "d": est.d, "mu_norm": est.mu_norm, "cov_trace": est.cov_trace, "count": est.count}
    return _certificate("geometric", inputs, raw, estimated_moments=est.count > 0, seed=seed)


def finetune_bound(est: MomentEstimate, threshold: float, perturbation: float, seed=None) -> BoundCertificate:
    """Geometric bound for a detector whose response may drift by ``perturbation``."""
    if perturbation < 0:
        raise BoundError("perturbation must be non-negative")
    margin = threshold - est.mu_norm - perturbation
    raw = geometric_value(est.d, est.cov_trace, margin)
    inputs = {"threshold": threshold, "perturbation": perturbation, "d": est.d, "mu_norm": est.mu_norm,
              "cov_trace": est.cov_trace, "count": est.count}
    return _certificate("finetune", inputs, raw, estimated_moments=est.count > 0, seed=seed)


def dkw_objective(eps, m: int, n: int):
    return ((m - n) / m - eps) * (1 - 2 * np.exp(-2 * m * np.square(eps)))


def dkw_sup(m: int, n: int, grid: int = 100_000, tol: float = 1e-9) -> tuple:
    """Maximise the DKW objective over eps in (0, 1); returns (sup, argmax)."""
    eps = np.linspace(0, 1, grid + 1)[1:-1]
    vals = dkw_objective(eps, m, n)
    i = int(np.argmax(vals))
    lo = eps[max(i - 1, 0)] if i > 0 else eps[0] / 2
    hi = eps[min(i + 1, eps.size - 1)]
    # the objective is unimodal near the grid maximum; ternary refinement
    while hi - lo > tol:
        a = lo + (hi - lo) / 3
        b = hi - (hi - lo) / 3
        if dkw_objective(a, m, n) < dkw_objective(b, m, n):
            lo = a
        else:
            hi = b
    best = (lo + hi) / 2
    sup = max(float(dkw_objective(best, m, n)), float(vals[i]))
    return sup, float(best)


def dkw_bound(m: int, n: int, seed=None) -> BoundCertificate:
    """Upper bound on a fixed detector's exceedance rate from n hits in m draws."""
    if m < 1:
        raise BoundError("need at least one calibration sample")
    if not 0 <= n <= m:
        raise BoundError(f"exceedance count {n} must lie in [0, {m}]")
    sup, eps = dkw_sup(m, n)
    cert = _certificate("dkw", {"m": m, "n": n}, 1.0 - sup, seed=seed)
    cert.notes.append(f"optimal eps = {eps:.9f}")
    return cert


def collision_bound(d: int, theta: float) -> float:
    """Chance two uniform sphere samples in R^d have dot product above theta."""
    if d < 1:
        raise BoundError("dimension must be >= 1")
    return math.exp(-d * theta * theta / 2)


def bonferroni(values) -> float:
    """Union-bound aggregate over several detector positions (our extension)."""
    return min(1.0, float(sum(values)))
