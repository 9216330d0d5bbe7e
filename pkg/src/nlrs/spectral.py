"""Random potentials, the finite-volume Anderson Hamiltonian and its eigensystem.

The Hamiltonian on a box is ``H = -Delta + V`` with Dirichlet truncation, i.e. a
symmetric tridiagonal matrix with diagonal ``V`` and off-diagonal ``-1``.
Eigenpairs are relabelled so that localization centers are nondecreasing in
the label; labels run over the sites of the box.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _tridiag
from .errors import (
    ConfigError,
    DomainError,
    FitUndefinedError,
    NumericError,
    PreconditionError,
    RangeError,
    SelectionError,
)

UNIFORM = "Uniform01"
TABULATED = "TabulatedDensity"
DECAY_FLOOR = 1e-14
CLUSTER_TOL = 1e-8


@dataclass(frozen=True)
class DistributionSpec:
    """Single-site law on [0, 1].

    ``TabulatedDensity`` interpolates the table piecewise linearly and is zero
    outside the tabulated range.
    """

    kind: str = UNIFORM
    density_table: tuple = ()

    def __post_init__(self):
        if self.kind not in (UNIFORM, TABULATED):
            raise ConfigError(f"unknown distribution kind {self.kind!r}")
        if self.kind == TABULATED:
            self.validate()

    @property
    def table(self):
        t = np.asarray(self.density_table, dtype=float)
        return t.reshape(-1, 2)

    def validate(self):
        t = self.table
        if len(t) < 2:
            raise ConfigError("density table needs at least two points")
        x, g = t[:, 0], t[:, 1]
        if np.any(np.diff(x) <= 0):
            raise ConfigError("density table abscissae must be strictly increasing")
        if x[0] < 0 or x[-1] > 1:
            raise ConfigError("density support must lie in [0, 1]")
        if np.any(g < 0) or not np.all(np.isfinite(g)):
            raise ConfigError("density values must be finite and nonnegative")
        total = float(np.sum(0.5 * (g[1:] + g[:-1]) * np.diff(x)))
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"density integrates to {total!r}, not 1")

    def sup(self) -> float:
        return 1.0 if self.kind == UNIFORM else float(self.table[:, 1].max())

    def inverse_cdf(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == UNIFORM:
            return u.copy()
        t = self.table
        x, g = t[:, 0], t[:, 1]
        h = np.diff(x)
        mass = 0.5 * (g[1:] + g[:-1]) * h
        cdf = np.concatenate([[0.0], np.cumsum(mass)])
        cdf /= cdf[-1]
        seg = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(h) - 1)
        r = (u - cdf[seg]) * np.sum(mass)
        g0, g1, hs = g[seg], g[1:][seg], h[seg]
        a = (g1 - g0) / (2 * hs)
        disc = np.sqrt(np.maximum(g0 * g0 + 4 * a * r, 0.0))
        denom = g0 + disc
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(denom > 0, 2 * r / denom, 0.0)
        return np.clip(x[seg] + np.clip(step, 0, hs), 0.0, 1.0)

    def to_dict(self):
        return {"kind": self.kind, "density_table": [list(p) for p in self.density_table]}

    @classmethod
    def from_dict(cls, d):
        table = tuple(tuple(float(v) for v in p) for p in d.get("density_table", ()))
        return cls(d.get("kind", UNIFORM), table)


@dataclass(frozen=True)
class Box1D:
    lo: int
    hi: int

    def __post_init__(self):
        if self.hi < self.lo:
            raise ConfigError(f"empty box [{self.lo}, {self.hi}]")

    @classmethod
    def centered(cls, radius: int) -> "Box1D":
        return cls(-radius, radius)

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    def __contains__(self, x) -> bool:
        return self.lo <= x <= self.hi

    def to_dict(self):
        return {"lo": self.lo, "hi": self.hi}


@dataclass
class PotentialSample:
    box: Box1D
    values: np.ndarray
    seed: int
    distribution: DistributionSpec = field(default_factory=DistributionSpec)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.box.size,):
            raise DomainError("need exactly one potential value per site")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise DomainError("potential values must lie in [0, 1]")

    def __getitem__(self, site: int) -> float:
        if site not in self.box:
            raise RangeError(f"site {site} outside {self.box}")
        return float(self.values[site - self.box.lo])

    def restrict(self, box: Box1D) -> "PotentialSample":
        if box.lo < self.box.lo or box.hi > self.box.hi:
            raise RangeError(f"{box} not inside {self.box}")
        i0 = box.lo - self.box.lo
        return PotentialSample(box, self.values[i0:i0 + box.size].copy(), self.seed, self.distribution)


@dataclass
class TridiagonalOperator:
    """Symmetric tridiagonal matrix over the sites of ``box``."""

    box: Box1D
    diag: np.ndarray
    off: np.ndarray

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.off, 1) + np.diag(self.off, -1)

    def matvec(self, x):
        x = np.asarray(x)
        y = self.diag.reshape((-1,) + (1,) * (x.ndim - 1)) * x
        off = self.off.reshape((-1,) + (1,) * (x.ndim - 1))
        y[:-1] += off * x[1:]
        y[1:] += off * x[:-1]
        return y


@dataclass
class RawEigenpairs:
    box: Box1D
    values: np.ndarray
    vectors: np.ndarray


@dataclass
class EigenSystem:
    """Relabelled eigenpairs; label ``j`` sits at array index ``j - label_offset``."""

    box: Box1D
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    centers: np.ndarray
    label_offset: int

    @property
    def size(self) -> int:
        return len(self.eigenvalues)

    @property
    def labels(self) -> np.ndarray:
        return np.arange(self.size) + self.label_offset

    def index(self, j):
        i = np.asarray(j) - self.label_offset
        if np.any(i < 0) or np.any(i >= self.size):
            raise RangeError(f"label {j} outside [{self.label_offset}, {self.label_offset + self.size - 1}]")
        return i

    def mu(self, j):
        return self.eigenvalues[self.index(j)]

    def phi(self, j) -> np.ndarray:
        return self.eigenvectors[:, self.index(j)]

    def center(self, j):
        return self.centers[self.index(j)]

    def hamiltonian(self, potential: PotentialSample) -> TridiagonalOperator:
        return assemble_hamiltonian(potential)

    def to_json(self) -> str:
        return json.dumps({
            "box": self.box.to_dict(),
            "label_offset": int(self.label_offset),
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "centers": [int(c) for c in self.centers],
            "eigenvectors": self.eigenvectors.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "EigenSystem":
        d = json.loads(text)
        return cls(
            Box1D(d["box"]["lo"], d["box"]["hi"]),
            np.array(d["eigenvalues"], dtype=float),
            np.array(d["eigenvectors"], dtype=float),
            np.array(d["centers"], dtype=int),
            int(d["label_offset"]),
        )

    def save(self, path):
        path = Path(path)
        if not path.name.endswith(".eig.json"):
            path = path.with_name(path.name + ".eig.json")
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "EigenSystem":
        return cls.from_json(Path(path).read_text())


@dataclass
class DecayFit:
    gamma_hat: float
    c_hat: float
    rmse: float

    def to_dict(self):
        return {"gamma_hat": self.gamma_hat, "c_hat": self.c_hat, "rmse": self.rmse}


@dataclass
class ModeSelection:
    betas: tuple
    L: int
    amplitudes: np.ndarray
    alphas: tuple
    omega0: np.ndarray

    @property
    def b(self) -> int:
        return len(self.alphas)

    @property
    def boxes(self):
        return [(bk - self.L, bk + self.L) for bk in self.betas]

    def to_dict(self):
        return {
            "betas": [int(x) for x in self.betas],
            "L": int(self.L),
            "amplitudes": [float(x) for x in self.amplitudes],
            "alphas": [int(x) for x in self.alphas],
            "omega0": [float(x) for x in self.omega0],
        }


def sample_potential(dist: DistributionSpec, box: Box1D, seed: int) -> PotentialSample:
    if dist.kind == TABULATED:
        dist.validate()
    seed = int(seed) & (2**64 - 1)
    rng = np.random.default_rng(seed)
    values = dist.inverse_cdf(rng.random(box.size))
    return PotentialSample(box, values, seed, dist)


def assemble_hamiltonian(V: PotentialSample) -> TridiagonalOperator:
    return TridiagonalOperator(V.box, V.values.copy(), -np.ones(V.box.size - 1))


def eigenvalues(H: TridiagonalOperator, max_sweeps: int = 60) -> np.ndarray:
    """Ascending eigenvalues only (QL sweep, no vectors)."""
    w, status = _tridiag.ql_eigenvalues(
        np.ascontiguousarray(H.diag, dtype=float), np.ascontiguousarray(H.off, dtype=float), max_sweeps)
    if status:
        raise NumericError(
            f"QL iteration did not converge for eigenvalue {status - 1}",
            {"diag": H.diag.tolist(), "off": H.off.tolist()},
        )
    return w


def eigensolve(H: TridiagonalOperator, max_sweeps: int = 60, cluster_tol: float = CLUSTER_TOL,
               n_iter: int = 3, seed: int = 0x5EED) -> RawEigenpairs:
    w = eigenvalues(H, max_sweeps)
    z = _tridiag.inverse_iteration(
        np.ascontiguousarray(H.diag, dtype=float), np.ascontiguousarray(H.off, dtype=float),
        w, cluster_tol, n_iter, seed)
    return RawEigenpairs(H.box, w, z)


def localization_center(phi, sites=None) -> int:
    """Maximizer of |phi| nearest the origin; ties at +-x go to the nonnegative site."""
    a = np.abs(np.asarray(phi))
    if sites is None:
        sites = np.arange(len(a))
    sites = np.asarray(sites)
    top = a.max() if a.size else 0.0
    if top == 0.0:
        raise DomainError("localization center of the zero vector")
    cand = sites[a == top]
    dist = np.abs(cand)
    near = cand[dist == dist.min()]
    return int(near.max())


def relabel(raw: RawEigenpairs, centers) -> EigenSystem:
    centers = np.asarray(centers, dtype=int)
    if centers.shape != raw.values.shape:
        raise PreconditionError("need one center per eigenpair")
    order = np.lexsort((raw.values, centers))
    return EigenSystem(raw.box, raw.values[order], raw.vectors[:, order], centers[order], raw.box.lo)


def diagonalize(V: PotentialSample, **kwargs) -> EigenSystem:
    """sample -> Hamiltonian -> eigenpairs -> centers -> relabelled system."""
    raw = eigensolve(assemble_hamiltonian(V), **kwargs)
    sites = V.box.sites
    centers = [localization_center(raw.vectors[:, k], sites) for k in range(len(raw.values))]
    return relabel(raw, centers)


def decay_profile(phi, center: int, sites=None, floor: float = DECAY_FLOOR) -> DecayFit:
    phi = np.asarray(phi)
    if sites is None:
        sites = np.arange(len(phi))
    sites = np.asarray(sites)
    if center < sites.min() or center > sites.max():
        raise PreconditionError(f"center {center} outside the box")
    a = np.abs(phi)
    keep = a > floor
    if keep.sum() < 3:
        raise FitUndefinedError("fewer than three sites above the decay floor")
    x = -np.abs(sites[keep] - center).astype(float)
    y = np.log(a[keep])
    if np.ptp(x) == 0:
        raise FitUndefinedError("all usable sites are equidistant from the center")
    A = np.column_stack([x, np.ones_like(x)])
    (gamma, c), *_ = np.linalg.lstsq(A, y, rcond=None)
    rmse = float(np.sqrt(np.mean((A @ np.array([gamma, c]) - y) ** 2)))
    return DecayFit(max(float(gamma), 0.0), float(c), rmse)


def check_geometry(betas, L: int):
    """Raise ConfigError naming the first violated constraint on the mode boxes."""
    for k, bk in enumerate(betas):
        if abs(bk) < 10 * L:
            raise ConfigError(f"10L <= |beta_{k + 1}| violated: |{bk}| < {10 * L}")
        if abs(bk) > L**3:
            raise ConfigError(f"|beta_{k + 1}| <= L^3 violated: |{bk}| > {L**3}")
    for k in range(len(betas)):
        for k2 in range(k + 1, len(betas)):
            if abs(betas[k] - betas[k2]) < 10 * L:
                raise ConfigError(
                    f"|beta_{k + 1} - beta_{k2 + 1}| >= 10L violated: {abs(betas[k] - betas[k2])} < {10 * L}")


def select_modes(eig: EigenSystem, betas, L: int, a) -> ModeSelection:
    betas = tuple(int(x) for x in betas)
    a = np.asarray(a, dtype=float)
    if len(a) != len(betas):
        raise ConfigError("need one amplitude per mode box")
    check_geometry(betas, L)
    if np.any(a < 1) or np.any(a > 2):
        raise ConfigError("amplitudes must lie in [1, 2]")
    alphas, empty = [], []
    for k, bk in enumerate(betas):
        cand = np.flatnonzero(np.abs(eig.centers - bk) <= L)
        if cand.size == 0:
            empty.append(k + 1)
            continue
        i = cand[np.argmin(np.abs(eig.eigenvalues[cand]))]
        alphas.append(int(i + eig.label_offset))
    if empty:
        raise SelectionError(f"no eigenfunction center in boxes {empty}", empty)
    return ModeSelection(betas, int(L), a, tuple(alphas), eig.mu(np.array(alphas)).copy())
