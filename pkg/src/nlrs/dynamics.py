"""Direct time integration of the lattice equation and comparison with the ansatz.

The equation is  i u_t = H u + delta |u|^{2p} u  with H the tridiagonal
operator of the potential.  The ansatz  u(t) = sum_n e^{i n.omega t} Phi u_n
is reconstructed exactly and checked against split-step evolution.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrationError, PreconditionError, RangeError
from .nonlinear import LatticeCoeffs
from .spectral import Box1D, EigenSystem, PotentialSample, assemble_hamiltonian


@dataclass
class LatticeField:
    box: Box1D
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.box.size,):
            raise PreconditionError("field length does not match the box")
        if not np.all(np.isfinite(self.values)):
            raise PreconditionError("field has non-finite values")

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    fields: list = field(default_factory=list)
    norm_series: list = field(default_factory=list)
    energy_series: list = field(default_factory=list)
    mismatch_series: list = field(default_factory=list)

    def append(self, f: LatticeField, energy: float):
        if self.times and f.time <= self.times[-1]:
            raise PreconditionError("times must increase")
        self.times.append(float(f.time))
        self.fields.append(f)
        self.norm_series.append(f.norm())
        self.energy_series.append(float(energy))

    def norm_drift(self) -> float:
        n = np.asarray(self.norm_series) ** 2
        return float(np.max(np.abs(n - n[0])) / n[0])

    def energy_drift(self) -> float:
        e = np.asarray(self.energy_series)
        return float(np.max(np.abs(e - e[0])))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "norm", "energy", "mismatch"])
        mism = self.mismatch_series or [""] * len(self.times)
        for t, n, e, m in zip(self.times, self.norm_series, self.energy_series, mism):
            w.writerow([repr(t), repr(n), repr(e), "" if m == "" else repr(float(m))])
        return buf.getvalue()

    def fields_jsonl(self, every: int = 1) -> str:
        lines = []
        for k in range(0, len(self.fields), every):
            f = self.fields[k]
            lines.append(json.dumps({"t": f.time, "re": f.values.real.tolist(), "im": f.values.imag.tolist()}))
        return "\n".join(lines) + ("\n" if lines else "")


def _check_labels(u_hat: LatticeCoeffs, eig: EigenSystem):
    if u_hat.size != eig.size or u_hat.label_offset != eig.label_offset:
        raise RangeError("coefficient labels do not match the eigensystem")


def reconstruct(u_hat: LatticeCoeffs, omega, eig: EigenSystem, t: float) -> LatticeField:
    """u(t, x) = sum_{n, j} u(n, j) e^{i n.omega t} phi_j(x)."""
    _check_labels(u_hat, eig)
    omega = np.asarray(omega, dtype=float)
    c = np.zeros(eig.size, dtype=complex)
    for n in sorted(u_hat.data):
        c += np.exp(1j * float(np.dot(n, omega)) * t) * u_hat.data[n]
    return LatticeField(eig.box, eig.eigenvectors @ c, float(t))


def _time_derivative(u_hat, omega, eig, t):
    omega = np.asarray(omega, dtype=float)
    c = np.zeros(eig.size, dtype=complex)
    for n in sorted(u_hat.data):
        w = float(np.dot(n, omega))
        c += 1j * w * np.exp(1j * w * t) * u_hat.data[n]
    return eig.eigenvectors @ c


def energy(values, potential: PotentialSample, delta: float, p: int) -> float:
    """sum_x [-2 Re(u(x+1) conj u(x)) + V|u|^2 + delta/(p+1) |u|^{2p+2}] with Dirichlet ends."""
    u = np.asarray(values)
    a2 = np.abs(u) ** 2
    hop = -2.0 * np.sum((u[1:] * np.conj(u[:-1])).real)
    return float(hop + np.sum(potential.values * a2) + delta / (p + 1) * np.sum(a2 ** (p + 1)))


def orthonormal_basis(eig: EigenSystem, sweeps: int = 2) -> np.ndarray:
    """Eigenvectors re-orthonormalized in extended precision.

    A symmetric (Lowdin) step in double precision followed by Newton-Schulz
    sweeps Q <- Q (3I - Q^T Q) / 2 in long double.
    """
    Phi = eig.eigenvectors
    w, Q = np.linalg.eigh(Phi.T @ Phi)
    B = (Phi @ (Q * w ** -0.5) @ Q.T).astype(np.longdouble)
    eye = np.eye(B.shape[1], dtype=np.longdouble)
    for _ in range(sweeps):
        B = B @ (3 * eye - B.T @ B) / 2
    return B


class _Transform:
    """Products with a long double matrix through split double-precision BLAS calls.

    Double-precision rounding of the transform matrix makes it slightly
    non-orthogonal, and that defect biases the norm in the same direction on
    every step.  Splitting M = hi + lo and the input likewise leaves only
    unbiased rounding, so the norm performs a random walk of size
    eps * sqrt(steps) instead of drifting linearly.
    """

    def __init__(self, M):
        self.hi = M.astype(float)
        self.lo = (M - self.hi).astype(float)

    def __call__(self, x):
        xr, xi = x.real, x.imag
        hr, hi_ = xr.astype(float), xi.astype(float)
        lr, li = (xr - hr).astype(float), (xi - hi_).astype(float)
        big = self.hi @ np.column_stack([hr, hi_, lr, li])
        small = self.lo @ np.column_stack([hr, hi_])
        re = big[:, 0].astype(np.longdouble) + big[:, 2] + small[:, 0]
        im = big[:, 1].astype(np.longdouble) + big[:, 3] + small[:, 1]
        return re + 1j * im


class StrangPropagator:
    """One Strang step of size h (negative h steps backward), acting on long
    double eigen-coordinates."""

    def __init__(self, eig: EigenSystem, delta: float, p: int, h: float):
        B = orthonormal_basis(eig)
        self.to_pos, self.to_eig = _Transform(B), _Transform(B.T.copy())
        self.half = np.exp(np.clongdouble(-0.5j) * eig.eigenvalues.astype(np.longdouble) * np.longdouble(h))
        self.kappa = np.longdouble(delta) * np.longdouble(h)
        self.delta, self.p = delta, p

    def encode(self, values):
        return self.to_eig(np.asarray(values).astype(np.clongdouble))

    def decode(self, c):
        return self.to_pos(c).astype(complex)

    def step(self, c):
        c = c * self.half
        if self.delta != 0:
            u = self.to_pos(c)
            a2 = u.real ** 2 + u.imag ** 2
            u *= np.exp(np.clongdouble(-1j) * self.kappa * a2 ** self.p)
            c = self.to_eig(u)
        return c * self.half


def split_step_evolve(u0: LatticeField, V: PotentialSample, eig: EigenSystem, delta: float, p: int,
                      t_end: float, h: float = 1e-3, record_every: int = 1) -> Trajectory:
    """Strang splitting: half linear step, full nonlinear phase, half linear step.

    The linear step multiplies eigen-coordinates by exp(-i mu h / 2); the
    nonlinear step multiplies by exp(-i delta |u|^{2p} h), which leaves |u|
    unchanged pointwise.  The number of steps is round(t_end / h) and the step
    is rescaled so that the last one lands on t_end exactly.  The state is
    carried in long double between steps.
    """
    if not (h > 0 and np.isfinite(h)):
        raise PreconditionError("h must be positive and finite")
    if t_end < 0:
        raise PreconditionError("t_end must be nonnegative")
    if u0.box != eig.box or V.box != eig.box:
        raise PreconditionError("field, potential and eigensystem boxes differ")
    steps = int(round(t_end / h))
    hh = t_end / steps if steps else h
    prop = StrangPropagator(eig, delta, p, hh)
    traj = Trajectory()
    traj.append(LatticeField(eig.box, u0.values.copy(), u0.time), energy(u0.values, V, delta, p))
    c = prop.encode(u0.values)
    for k in range(1, steps + 1):
        c = prop.step(c)
        if k % record_every == 0 or k == steps:
            u = prop.decode(c)
            if not np.all(np.isfinite(u)):
                raise IntegrationError("non-finite field", traj.times[-1])
            traj.append(LatticeField(eig.box, u, u0.time + k * hh), energy(u, V, delta, p))
    return traj


def _apply_H(values, eig: EigenSystem, potential: PotentialSample | None):
    if potential is None:
        Phi = eig.eigenvectors
        return Phi @ (eig.eigenvalues * (Phi.T @ values))
    return assemble_hamiltonian(potential).matvec(values)


def residual_check(u_hat: LatticeCoeffs, omega, eig: EigenSystem, delta: float, p: int, times,
                   potential: PotentialSample | None = None) -> float:
    """max_t || i u_t - H u - delta |u|^{2p} u ||_2 along the ansatz.

    u_t is taken term by term from the ansatz.  With ``potential`` the
    Hamiltonian is applied from the potential directly, independent of the
    eigensolver; otherwise through the eigenbasis.
    """
    worst = 0.0
    for t in times:
        u = reconstruct(u_hat, omega, eig, t).values
        ut = _time_derivative(u_hat, omega, eig, t)
        r = 1j * ut - _apply_H(u, eig, potential) - delta * np.abs(u) ** (2 * p) * u
        worst = max(worst, float(np.linalg.norm(r)))
    return worst


def compare(trajectory: Trajectory, u_hat: LatticeCoeffs, omega, eig: EigenSystem) -> float:
    """max_t ||evolved(t) - reconstruct(t)|| / ||reconstruct(0)||; fills the mismatch series."""
    ref0 = reconstruct(u_hat, omega, eig, 0.0).norm()
    out = []
    for f in trajectory.fields:
        ref = reconstruct(u_hat, omega, eig, f.time).values
        out.append(float(np.linalg.norm(f.values - ref)) / ref0)
    trajectory.mismatch_series = out
    return max(out) if out else 0.0
