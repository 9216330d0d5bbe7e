"""Monte Carlo checks of the probabilistic spectral inputs.

Every trial ``t`` of a plan draws its potential from seed ``base_seed ^ t``;
per-trial results are keyed by trial index and reduced in index order.
"""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FitUndefinedError, PreconditionError, RangeError
from .spectral import (
    Box1D,
    DistributionSpec,
    PotentialSample,
    assemble_hamiltonian,
    decay_profile,
    diagonalize,
    eigensolve,
    eigenvalues,
    sample_potential,
)


@dataclass(frozen=True)
class McPlan:
    trials: int
    base_seed: int
    box: Box1D
    distribution: DistributionSpec = field(default_factory=DistributionSpec)

    def __post_init__(self):
        if self.trials < 1:
            raise PreconditionError("a plan needs at least one trial")

    def seed(self, t: int) -> int:
        return (int(self.base_seed) ^ int(t)) & (2**64 - 1)

    def sample(self, t: int) -> PotentialSample:
        return sample_potential(self.distribution, self.box, self.seed(t))


@dataclass
class ScalingFit:
    abscissae: list
    empirical_probs: list
    hits: list
    trials: int
    log_log_slope: float
    r_squared: float

    def to_dict(self):
        return {
            "abscissae": list(map(float, self.abscissae)),
            "empirical_probs": list(map(float, self.empirical_probs)),
            "hits": list(map(int, self.hits)),
            "trials": int(self.trials),
            "log_log_slope": self.log_log_slope,
            "r_squared": self.r_squared,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["abscissa", "hits", "trials", "probability"])
        for x, h, p in zip(self.abscissae, self.hits, self.empirical_probs):
            w.writerow([repr(float(x)), int(h), int(self.trials), repr(float(p))])
        return buf.getvalue()


def _check_eps(eps_list):
    eps = np.asarray(eps_list, dtype=float)
    if eps.ndim != 1 or eps.size == 0 or np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
        raise PreconditionError("eps_list must be positive and strictly decreasing")
    return eps


def fit_scaling(eps, hits, trials) -> ScalingFit:
    eps = np.asarray(eps, dtype=float)
    hits = np.asarray(hits, dtype=int)
    probs = hits / trials
    ok = hits > 0
    if not ok.any():
        raise FitUndefinedError(f"no hits at any abscissa; raw counts {hits.tolist()} of {trials}")
    if not ok.all():
        warnings.warn(f"dropping {int((~ok).sum())} zero-hit abscissae from the slope fit")
    x, y = np.log(eps[ok]), np.log(probs[ok])
    if x.size >= 2:
        slope, icpt = np.polyfit(x, y, 1)
        resid = y - (slope * x + icpt)
        sst = np.sum((y - y.mean()) ** 2)
        r2 = float(1 - np.sum(resid**2) / sst) if sst > 0 else 1.0
    else:
        slope, r2 = float("nan"), float("nan")
    return ScalingFit(eps.tolist(), probs.tolist(), hits.tolist(), int(trials), float(slope), r2)


def _spectra(plan: McPlan):
    for t in range(plan.trials):
        yield eigenvalues(assemble_hamiltonian(plan.sample(t)))


def wegner_mc(plan: McPlan, E: float, eps_list) -> ScalingFit:
    eps = _check_eps(eps_list)
    dist = np.array([np.min(np.abs(w - E)) for w in _spectra(plan)])
    hits = [(dist <= e).sum() for e in eps]
    return fit_scaling(eps, hits, plan.trials)


def minami_mc(plan: McPlan, eps_list) -> ScalingFit:
    eps = _check_eps(eps_list)
    if plan.box.size < 2:
        raise PreconditionError("spacing needs at least two sites")
    gap = np.array([np.min(np.diff(w)) for w in _spectra(plan)])
    hits = [(gap <= e).sum() for e in eps]
    return fit_scaling(eps, hits, plan.trials)


def _tracked_eigenvalue(V: PotentialSample, l: int, s: float, phi0: np.ndarray):
    H = assemble_hamiltonian(V)
    H.diag[l - V.box.lo] += s
    raw = eigensolve(H)
    k = int(np.argmax(np.abs(raw.vectors.T @ phi0)))
    return raw.values[k]


@dataclass
class DerivativeCheck:
    fd_derivative: float
    weight: float
    abs_error: float
    spacing: float


def eig_derivative_check(V: PotentialSample, l: int, s: float, k: int | None = None) -> DerivativeCheck:
    """Central difference of an eigenvalue under ``V(l) -> V(l) + s`` against |phi(l)|^2.

    ``k`` picks the raw (ascending) eigenpair; by default the one with the
    largest weight at ``l``.  The perturbed eigenpair is followed by maximal
    overlap with the unperturbed eigenvector.
    """
    if l not in V.box:
        raise RangeError(f"site {l} outside {V.box}")
    raw = eigensolve(assemble_hamiltonian(V))
    w = raw.values
    d = float(np.min(np.diff(w))) if len(w) > 1 else np.inf
    if abs(s) > d / 10:
        raise PreconditionError(f"|s| = {abs(s)!r} exceeds d/10 = {d / 10!r}")
    i = l - V.box.lo
    if k is None:
        k = int(np.argmax(raw.vectors[i] ** 2))
    phi0 = raw.vectors[:, k]
    up = _tracked_eigenvalue(V, l, s, phi0)
    dn = _tracked_eigenvalue(V, l, -s, phi0)
    fd = (up - dn) / (2 * s)
    wt = float(phi0[i] ** 2)
    return DerivativeCheck(float(fd), wt, abs(float(fd) - wt), d)


def center_counts(centers, window_starts, L: int) -> np.ndarray:
    centers = np.sort(np.asarray(centers))
    starts = np.asarray(window_starts)
    lo = np.searchsorted(centers, starts, side="left")
    hi = np.searchsorted(centers, starts + L, side="right")
    return hi - lo


def center_density_mc(plan: McPlan, L: int, window_starts, margin: int | None = None) -> np.ndarray:
    """Counts of centers in [k, k+L] per trial (rows) and window (columns)."""
    starts = np.asarray(window_starts, dtype=int)
    margin = L if margin is None else margin
    if np.any(starts - margin < plan.box.lo) or np.any(starts + L + margin > plan.box.hi):
        raise RangeError("windows must sit inside the box with the required margin")
    out = np.zeros((plan.trials, len(starts)), dtype=int)
    for t in range(plan.trials):
        eig = diagonalize(plan.sample(t))
        out[t] = center_counts(eig.centers, starts, L)
    return out


@dataclass
class VolumeMatch:
    inner_label: int
    center: int
    outer_label: int
    eigenvalue_gap: float
    vector_gap: float
    gamma_hat: float
    boundary: float


def volume_convergence(V_outer: PotentialSample, N: int, interior: float = 1.1) -> list:
    """Match eigenpairs of [-N, N] to those of [-2N, 2N] for the same potential.

    Returns one ``VolumeMatch`` per inner eigenpair with center inside
    ``interior * N``; the vector gap is measured after extending the inner
    eigenvector by zero and aligning signs.
    """
    if V_outer.box != Box1D(-2 * N, 2 * N):
        raise PreconditionError(f"outer box must be [-{2 * N}, {2 * N}]")
    inner = diagonalize(V_outer.restrict(Box1D(-N, N)))
    outer = diagonalize(V_outer)
    sites = inner.box.sites
    pad = N  # offset of the inner box inside the outer one
    out = []
    for i in range(inner.size):
        c = int(inner.centers[i])
        if abs(c) > interior * N:
            continue
        phi = inner.eigenvectors[:, i]
        ext = np.zeros(outer.box.size)
        ext[pad:pad + inner.box.size] = phi
        overlaps = outer.eigenvectors.T @ ext
        k = int(np.argmax(np.abs(overlaps)))
        psi = outer.eigenvectors[:, k] * np.sign(overlaps[k])
        try:
            gamma = decay_profile(phi, c, sites).gamma_hat
        except FitUndefinedError:
            gamma = 0.0
        out.append(VolumeMatch(
            int(inner.labels[i]), c, int(outer.labels[k]),
            float(abs(inner.eigenvalues[i] - outer.eigenvalues[k])),
            float(np.linalg.norm(ext - psi)), gamma,
            float(max(abs(phi[0]), abs(phi[-1]))),
        ))
    return out
