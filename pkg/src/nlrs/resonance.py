"""Audits of the small-divisor conditions on a concrete eigensystem.

All scans are vectorized over the frequency lattice in slabs.  Violations are
kept in a canonical order (by value, then by lattice coordinates), so reports
do not depend on how the scan was partitioned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RangeError
from .spectral import EigenSystem, ModeSelection

AXIS_CAP = 10_000


@dataclass(frozen=True)
class AuditConfig:
    delta: float
    b: int
    n_box_radius: int | None = None
    j_box_radius: int | None = None
    q1: float = 6.0
    threshold_exponent: float = 1 / 8
    s_exponent: float = 2.0
    small_scale_factor: float = 2.0
    harmonic_factor: float = 4.0
    near_factor: float = 1.0
    max_violations: int = 1000

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.b < 1:
            raise ConfigError("b must be at least 1")
        for name in ("n_box_radius", "j_box_radius"):
            r = getattr(self, name)
            if r is not None and r < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def log_delta(self) -> float:
        return abs(math.log(self.delta))

    @property
    def scale(self) -> float:
        return self.delta ** self.threshold_exponent

    def default_n_radius(self) -> int:
        return min(2 * math.floor(math.exp(self.log_delta ** 0.75)), AXIS_CAP // 2)

    def log_box_radius(self) -> int:
        return min(math.floor(self.log_delta ** self.s_exponent), AXIS_CAP // 2)

    def n_radius(self) -> int:
        return self.n_box_radius if self.n_box_radius is not None else self.default_n_radius()

    def j_radius(self) -> int:
        return self.j_box_radius if self.j_box_radius is not None else self.default_n_radius()

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class Violation:
    n: tuple
    j: int
    sector: int
    value: float
    j2: int | None = None

    def key(self):
        return (self.value, self.sector, self.n, self.j, -1 if self.j2 is None else self.j2)

    def to_dict(self):
        d = {"n": list(self.n), "j": self.j, "sector": "+" if self.sector > 0 else "-", "value": self.value}
        if self.j2 is not None:
            d["j2"] = self.j2
        return d


@dataclass
class AuditReport:
    name: str
    violations: list = field(default_factory=list)
    n_violations: int = 0
    min_margin: float = math.inf
    threshold: float = 0.0
    scanned: int = 0

    @property
    def passed(self) -> bool:
        return self.n_violations == 0

    def to_dict(self):
        return {
            "audit": self.name,
            "pass": self.passed,
            "n_violations": self.n_violations,
            "min_margin": self.min_margin,
            "threshold": self.threshold,
            "scanned": self.scanned,
            "violations": [v.to_dict() for v in self.violations],
        }

    def summary(self):
        return {"audit": self.name, "pass": self.passed, "n_violations": self.n_violations,
                "min_margin": self.min_margin, "threshold": self.threshold}


class _Collector:
    """Keeps the ``cap`` smallest violations and the running minimum."""

    def __init__(self, name, threshold, cap):
        self.report = AuditReport(name, threshold=threshold)
        self.cap = cap

    def add(self, values, bad, make):
        self.report.scanned += values.size
        if values.size:
            self.report.min_margin = min(self.report.min_margin, float(values.min()))
        idx = np.flatnonzero(bad.ravel())
        if idx.size == 0:
            return
        self.report.n_violations += idx.size
        flat = values.ravel()[idx]
        if idx.size > self.cap:
            part = np.argpartition(flat, self.cap - 1)[: self.cap]
            idx, flat = idx[part], flat[part]
        new = [make(i, float(v)) for i, v in zip(idx, flat)]
        merged = sorted(self.report.violations + new, key=Violation.key)
        self.report.violations = merged[: self.cap]

    def done(self):
        if self.report.scanned == 0:
            self.report.min_margin = math.inf
        return self.report


def _label_window(eig: EigenSystem, radius: int) -> np.ndarray:
    lo = max(-radius, eig.label_offset)
    hi = min(radius, eig.label_offset + eig.size - 1)
    return np.arange(lo, hi + 1)


def lattice_points(b: int, radius: int) -> np.ndarray:
    """All n in [-radius, radius]^b, lexicographic, as an int array (count, b)."""
    axis = np.arange(-radius, radius + 1)
    grids = np.meshgrid(*([axis] * b), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def spacing_floor(eig: EigenSystem, N: int, q1: float, max_violations: int = 1000) -> AuditReport:
    if -N < eig.label_offset or N > eig.label_offset + eig.size - 1:
        raise RangeError(f"labels [-{N}, {N}] exceed the eigensystem range")
    labels = np.arange(-N, N + 1)
    mu = eig.mu(labels)
    thr = float(N) ** (-q1)
    col = _Collector("spacing_floor", thr, max_violations)
    order = np.argsort(mu, kind="stable")
    gaps = np.diff(mu[order])
    col.report.scanned = len(labels) * (len(labels) - 1) // 2
    col.report.min_margin = float(gaps.min()) if gaps.size else math.inf
    # every close pair is adjacent in sorted order or chained through adjacent close pairs
    viol = []
    for a in range(len(order)):
        b = a + 1
        while b < len(order) and mu[order[b]] - mu[order[a]] < thr:
            i, k = sorted((order[a], order[b]))
            viol.append(Violation((), int(labels[i]), 1, float(abs(mu[order[b]] - mu[order[a]])), int(labels[k])))
            b += 1
    viol.sort(key=Violation.key)
    col.report.n_violations = len(viol)
    col.report.violations = viol[:max_violations]
    return col.report


def _small_divisors(eig, omega, nvec, labels, sector):
    nw = nvec @ np.asarray(omega, dtype=float)
    return np.abs(sector * nw[:, None] + eig.mu(labels)[None, :])


def small_scale_nonresonance(eig: EigenSystem, omega0, selection: ModeSelection, cfg: AuditConfig,
                             slab: int = 4096) -> AuditReport:
    b = cfg.b
    omega0 = np.asarray(omega0, dtype=float)
    R = cfg.n_radius()
    labels = _label_window(eig, cfg.j_radius())
    thr = cfg.small_scale_factor * cfg.scale
    thr0 = 0.5 * float(max(cfg.j_radius(), 1)) ** (-cfg.q1)
    col = _Collector("small_scale_nonresonance", thr, cfg.max_violations)
    excluded = {}
    for k, a in enumerate(selection.alphas):
        e = [0] * b
        e[k] = 1
        excluded[(tuple(-x for x in e), a, 1)] = True
        excluded[(tuple(e), a, -1)] = True
    npts = lattice_points(b, R)
    for sector in (1, -1):
        for s0 in range(0, len(npts), slab):
            nv = npts[s0:s0 + slab]
            vals = _small_divisors(eig, omega0, nv, labels, sector)
            zero = np.all(nv == 0, axis=1)
            keep = np.ones(vals.shape, dtype=bool)
            for (n, a, sec) in excluded:
                if sec != sector:
                    continue
                rows = np.flatnonzero(np.all(nv == np.array(n), axis=1))
                cols = np.flatnonzero(labels == a)
                if rows.size and cols.size:
                    keep[rows[0], cols[0]] = False
            bad = np.where(zero[:, None], vals < thr0, vals < thr) & keep
            shown = np.where(keep, vals, np.inf)

            def make(i, v, nv=nv, sector=sector):
                r, c = divmod(int(i), len(labels))
                return Violation(tuple(int(x) for x in nv[r]), int(labels[c]), sector, v)

            col.report.scanned -= int((~keep).sum())
            col.add(shown, bad, make)
    return col.done()


def harmonic_class(m) -> bool:
    """True if m belongs to one of the two audited classes of harmonic vectors."""
    m = np.asarray(m)
    if np.any(np.abs(m) >= 2) or np.count_nonzero(m) >= 3:
        return True
    return bool(m.sum() != 0 and np.all(np.abs(m) <= 1))


def harmonic_cluster_audit(eig: EigenSystem, omega, m_radius: int, cfg: AuditConfig,
                           j_radius: int | None = None) -> AuditReport:
    omega = np.asarray(omega, dtype=float)
    radius = j_radius if j_radius is not None else (
        cfg.j_box_radius if cfg.j_box_radius is not None else 2 * cfg.log_box_radius())
    labels = _label_window(eig, radius)
    mu = eig.mu(labels)
    diff = mu[:, None] - mu[None, :]
    thr = cfg.harmonic_factor * cfg.scale
    col = _Collector("harmonic_cluster_audit", thr, cfg.max_violations)
    for m in lattice_points(cfg.b, m_radius):
        if not harmonic_class(m):
            continue
        vals = np.abs(float(m @ omega) + diff)
        mt = tuple(int(x) for x in m)

        def make(i, v, mt=mt):
            r, c = divmod(int(i), len(labels))
            return Violation(mt, int(labels[r]), 1, v, int(labels[c]))

        col.add(vals, vals <= thr, make)
    return col.done()


def near_resonant_counts(eig: EigenSystem, omega0, thetas, box_radius: int, cfg: AuditConfig,
                         sector: int = 1) -> np.ndarray:
    """Counts of |sector*(n.omega0 + theta) + mu_j| <= delta^(1/8) for each theta."""
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    labels = _label_window(eig, box_radius)
    nw = lattice_points(cfg.b, box_radius) @ np.asarray(omega0, dtype=float)
    # sector*(x + theta) + mu in [-tau, tau]  <=>  x + sector*mu in theta-shifted window
    vals = np.sort((nw[:, None] + sector * eig.mu(labels)[None, :]).ravel())
    tau = cfg.near_factor * cfg.scale
    lo = np.searchsorted(vals, -thetas - tau, side="left")
    hi = np.searchsorted(vals, -thetas + tau, side="right")
    return hi - lo


def near_resonant_count(eig: EigenSystem, omega0, theta: float, box_radius: int, cfg: AuditConfig,
                        sector: int = 1) -> int:
    return int(near_resonant_counts(eig, omega0, [theta], box_radius, cfg, sector)[0])


def run_audits(eig: EigenSystem, selection: ModeSelection, cfg: AuditConfig, m_radius: int = 10):
    ss = small_scale_nonresonance(eig, selection.omega0, selection, cfg)
    hc = harmonic_cluster_audit(eig, selection.omega0, m_radius, cfg)
    return [ss, hc]
