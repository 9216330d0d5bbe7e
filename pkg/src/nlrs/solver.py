"""Newton solver for the coefficient equations with frequency updates.

Unknowns are u(n, j) on the charge class sum(n) = -1, which the nonlinearity
preserves.  The tangential entries u(-e_k, alpha_k) = a_k are fixed (gauge);
the remaining entries in a box |n| <= R are corrected by Newton steps, and the
frequencies are then recomputed from the tangential equations.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import GaugeViolationError, PreconditionError, ResonanceFailure
from .nonlinear import LatticeCoeffs, assemble_W, field_product, fields
from .spectral import DECAY_FLOOR, DecayFit, EigenSystem, ModeSelection

GAUGE_FLAG = 1e-10
GAUGE_ERROR = 1e-8
CHARGE = -1


def tangential_sites(sel: ModeSelection):
    b = sel.b
    return [(tuple(-int(i == k) for i in range(b)), int(sel.alphas[k])) for k in range(b)]


@dataclass
class Schedule:
    """Box growth and stopping rules; radii refer to the n-coordinates."""

    initial_radius: int | None = None
    growth: int = 2
    max_radius: int | None = None
    tol: float = 1e-11
    max_iter: int = 20
    pivot_floor: float = 1e-12

    def radius(self, b: int, step: int) -> int:
        r0 = self.initial_radius if self.initial_radius is not None else 2 * (b + 2)
        cap = self.max_radius if self.max_radius is not None else r0
        return int(min(r0 * self.growth ** step, cap))

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class NewtonState:
    u_hat: LatticeCoeffs
    omega: np.ndarray
    r: int
    residual_norm: float
    support_radius: int
    amplitudes: np.ndarray
    alphas: tuple
    history: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def copy(self) -> "NewtonState":
        return NewtonState(self.u_hat.copy(), self.omega.copy(), self.r, self.residual_norm,
                           self.support_radius, self.amplitudes, self.alphas, list(self.history),
                           list(self.flags))


def residual(u_hat: LatticeCoeffs, omega, eig: EigenSystem, delta: float, p: int, box=None):
    """F(u) = (n.omega + mu_j) u + delta W_u as (u-sector, v-sector).

    Without ``box`` the residual is taken on the full support of u and W_u,
    so nothing is truncated.  ``box`` is an n-radius restricting the report.
    The v-sector is the conjugate reflection of the u-sector.
    """
    omega = np.asarray(omega, dtype=float)
    W = assemble_W(u_hat, eig, p) if delta != 0 else u_hat.like()
    F = u_hat.like()
    for n in sorted(set(W.data) | set(u_hat.data)):
        if box is not None and max((abs(x) for x in n), default=0) > box:
            continue
        d = float(np.dot(n, omega)) + eig.eigenvalues
        F.data[n] = d * u_hat.column(n) + delta * W.column(n)
    return F, F.conjugate_reflection()


def residual_norm(u_hat, omega, eig, delta, p, box=None) -> float:
    """l2 norm of the doubled residual (both sectors)."""
    F, _ = residual(u_hat, omega, eig, delta, p, box)
    return math.sqrt(2.0) * F.norm()


def initial_guess(sel: ModeSelection, eig: EigenSystem, delta: float = 0.0, p: int = 1) -> NewtonState:
    u = LatticeCoeffs.zeros(sel.b, eig)
    for (n, j), a in zip(tangential_sites(sel), sel.amplitudes):
        u.set(n, j, float(a))
    omega = np.asarray(sel.omega0, dtype=float).copy()
    res = residual_norm(u, omega, eig, delta, p)
    return NewtonState(u, omega, 0, res, 1, np.asarray(sel.amplitudes, dtype=float), tuple(sel.alphas),
                       [(0, res, 0.0)])


def class_box(b: int, radius: int):
    """All n in [-radius, radius]^b with sum(n) = -1, lexicographic."""
    return [n for n in itertools.product(range(-radius, radius + 1), repeat=b) if sum(n) == CHARGE]


def _block(phi, g):
    return phi.T @ (g[:, None] * phi)


def linearization(u_hat: LatticeCoeffs, omega, eig: EigenSystem, delta: float, p: int, box):
    """(A, B) with dF = A du + B conj(du) on the class box, all labels.

    A(n, m) = diag(n.omega + mu) + delta K00(n - m) and B(n, m) = delta K01(n + m)
    in the eigenbasis, where K00 = (p+1) U^p V^p and K01 = p U^{p+1} V^{p-1}.
    """
    U, V = fields(u_hat, eig)
    b, nx, nj = u_hat.b, eig.box.size, eig.size
    phi = eig.eigenvectors
    nb = len(box)
    A = np.zeros((nb * nj, nb * nj), dtype=complex)
    B = np.zeros_like(A)
    for i, n in enumerate(box):
        A[i * nj:(i + 1) * nj, i * nj:(i + 1) * nj] += np.diag(float(np.dot(n, omega)) + eig.eigenvalues)
    if delta != 0 and U:
        K00 = field_product(U, V, p, p, b, nx)
        K01 = field_product(U, V, p + 1, p - 1, b, nx)
        cache00, cache01 = {}, {}
        for i, n in enumerate(box):
            for k, m in enumerate(box):
                d = tuple(x - y for x, y in zip(n, m))
                if d in K00:
                    if d not in cache00:
                        cache00[d] = (p + 1) * _block(phi, K00[d])
                    A[i * nj:(i + 1) * nj, k * nj:(k + 1) * nj] += delta * cache00[d]
                s = tuple(x + y for x, y in zip(n, m))
                if s in K01:
                    if s not in cache01:
                        cache01[s] = p * _block(phi, K01[s])
                    B[i * nj:(i + 1) * nj, k * nj:(k + 1) * nj] += delta * cache01[s]
    return A, B


def _factor(M, floor, describe):
    lu, piv = sla.lu_factor(M, check_finite=False)
    pivots = np.abs(np.diag(lu))
    scale = max(1.0, float(np.abs(M).max()))
    if pivots.min() < floor * scale:
        with np.errstate(all="ignore"):
            y = sla.lu_solve((lu, piv), np.ones(M.shape[0]))
        k = int(np.argmax(np.abs(y))) if np.all(np.isfinite(y)) else int(np.argmin(pivots))
        raise ResonanceFailure("singular Newton linearization", describe(k), float(pivots.min()))
    return lu, piv


def newton_step(state: NewtonState, eig: EigenSystem, delta: float, p: int, box_radius: int,
                pivot_floor: float = 1e-12) -> NewtonState:
    """One P-step: solve the linearized system on the class box minus the gauge sites."""
    u, omega = state.u_hat, state.omega
    b, nj = u.b, eig.size
    box = class_box(b, box_radius)
    pos = {n: i for i, n in enumerate(box)}
    F, _ = residual(u, omega, eig, delta, p)
    rhs = -np.concatenate([F.column(n) for n in box])
    keep = np.ones(len(box) * nj, dtype=bool)
    for k, a in enumerate(state.alphas):
        n = tuple(-int(i == k) for i in range(b))
        keep[pos[n] * nj + (a - eig.label_offset)] = False
    idx = np.flatnonzero(keep)

    def describe(k):
        flat = int(idx[k % len(idx)])
        n = box[flat // nj]
        return {"n": list(n), "j": int(flat % nj + eig.label_offset)}

    A, B = linearization(u, omega, eig, delta, p, box)
    A, B = A[np.ix_(idx, idx)], B[np.ix_(idx, idx)]
    r = rhs[idx]
    if not (np.any(A.imag) or np.any(B.imag) or np.any(r.imag)):
        # real kernels and real residual: the imaginary part of the correction vanishes
        x = sla.lu_solve(_factor((A + B).real, pivot_floor, describe), r.real)
        dx = x.astype(complex)
    else:
        P, Q = A + B, A - B
        M = np.block([[P.real, -Q.imag], [P.imag, Q.real]])
        sol = sla.lu_solve(_factor(M, pivot_floor, describe), np.concatenate([r.real, r.imag]))
        dx = sol[:len(idx)] + 1j * sol[len(idx):]
    full = np.zeros(len(box) * nj, dtype=complex)
    full[idx] = dx
    new = u.copy()
    for i, n in enumerate(box):
        col = full[i * nj:(i + 1) * nj]
        if np.any(col):
            new.add_column(n, col)
    out = state.copy()
    out.u_hat = new
    out.r = state.r + 1
    out.support_radius = max(state.support_radius, box_radius)
    out.residual_norm = residual_norm(new, omega, eig, delta, p)
    out.history.append((out.r, out.residual_norm, float(np.linalg.norm(full))))
    return out


def q_update(state: NewtonState, eig: EigenSystem, delta: float, p: int = 1, flags=None) -> np.ndarray:
    """omega_k = mu_{alpha_k} + delta W_u(-e_k, alpha_k) / a_k."""
    b = state.u_hat.b
    W = assemble_W(state.u_hat, eig, p) if delta != 0 else state.u_hat.like()
    omega = np.empty(b)
    for k, (a, al) in enumerate(zip(state.amplitudes, state.alphas)):
        n = tuple(-int(i == k) for i in range(b))
        q = delta * W.get(n, al) / a
        if abs(q.imag) > GAUGE_ERROR:
            raise GaugeViolationError(f"imaginary frequency correction {q.imag!r} for mode {k + 1}",
                                      {"mode": k + 1, "imag": q.imag})
        if abs(q.imag) > GAUGE_FLAG and flags is not None:
            flags.append({"mode": k + 1, "imag": q.imag})
        omega[k] = float(eig.mu(al)) + q.real
    return omega


def _fit(xs, ys) -> DecayFit | None:
    if len(xs) < 3 or np.ptp(xs) == 0:
        return None
    x, y = -np.array(xs, dtype=float), np.array(ys)
    A = np.column_stack([x, np.ones_like(x)])
    (g, c), *_ = np.linalg.lstsq(A, y, rcond=None)
    rmse = float(np.sqrt(np.mean((A @ np.array([g, c]) - y) ** 2)))
    return DecayFit(float(g), float(c), rmse)


def coefficient_decay(u_hat: LatticeCoeffs, anchors=None, floor: float = DECAY_FLOOR) -> DecayFit | None:
    """Fit log|u(n, j)| = c - gamma * max(|n|, dist(j, anchors)) over entries above ``floor``.

    ``anchors`` defaults to {0}, i.e. max(|n|, |j|).  Returns None when fewer
    than three entries qualify or all distances coincide.
    """
    anchors = np.array([0] if anchors is None else list(anchors))
    xs, ys = [], []
    for n, j, v in u_hat.entries():
        if abs(v) > floor:
            xs.append(max(int(np.min(np.abs(anchors - j))), *(abs(x) for x in n)))
            ys.append(math.log(abs(v)))
    return _fit(xs, ys)


def frequency_decay(u_hat: LatticeCoeffs, floor: float = DECAY_FLOOR) -> DecayFit | None:
    """Fit of log max_j |u(n, j)| against |n|."""
    xs, ys = [], []
    for n in u_hat.frequencies():
        m = float(np.abs(u_hat.data[n]).max())
        if m > floor:
            xs.append(max((abs(x) for x in n), default=0))
            ys.append(math.log(m))
    return _fit(xs, ys)


@dataclass
class SolutionCertificate:
    u_hat: LatticeCoeffs
    omega: np.ndarray
    omega0: np.ndarray
    final_residual: float
    halo_residual: float
    coeff_decay: DecayFit | None
    coeff_decay_modes: DecayFit | None
    frequency_decay: DecayFit | None
    converged: bool
    history: list
    audits: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    u0: LatticeCoeffs | None = None

    @property
    def omega_deviation(self) -> np.ndarray:
        return self.omega - self.omega0

    @property
    def newton_iterations(self) -> int:
        return max(0, len(self.history) - 1)

    def distance_from_initial(self) -> float:
        return (self.u_hat - self.u0).norm() if self.u0 is not None else float("nan")

    def to_dict(self):
        fit = lambda f: None if f is None else f.to_dict()  # noqa: E731
        return {
            "converged": bool(self.converged),
            "final_residual": float(self.final_residual),
            "halo_residual": float(self.halo_residual),
            "omega": [float(x) for x in self.omega],
            "omega0": [float(x) for x in self.omega0],
            "omega_deviation": [float(x) for x in self.omega_deviation],
            "distance_from_initial": float(self.distance_from_initial()),
            "newton_iterations": self.newton_iterations,
            "coeff_decay": fit(self.coeff_decay),
            "coeff_decay_modes": fit(self.coeff_decay_modes),
            "frequency_decay": fit(self.frequency_decay),
            "history": [{"r": int(r), "residual": float(res), "correction": float(c)}
                        for r, res, c in self.history],
            "audits": self.audits,
            "flags": self.flags,
            "config": self.config,
            "seeds": self.seeds,
            "support_entries": sum(1 for _ in self.u_hat.entries()),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def solve(eig: EigenSystem, sel: ModeSelection, delta: float, p: int = 1, schedule: Schedule | None = None,
          audits=None, config=None, seeds=None) -> SolutionCertificate:
    """Alternate Newton P-steps and Q-updates until the residual reaches ``schedule.tol``."""
    if p < 1:
        raise PreconditionError("p must be a positive integer")
    schedule = schedule or Schedule()
    state = initial_guess(sel, eig, delta, p)
    u0 = state.u_hat.copy()
    step = 0
    while state.residual_norm > schedule.tol and step < schedule.max_iter:
        radius = schedule.radius(sel.b, step)
        state = newton_step(state, eig, delta, p, radius, schedule.pivot_floor)
        state.omega = q_update(state, eig, delta, p, state.flags)
        state.residual_norm = residual_norm(state.u_hat, state.omega, eig, delta, p)
        r, _, c = state.history[-1]
        state.history[-1] = (r, state.residual_norm, c)
        step += 1
    converged = state.residual_norm <= schedule.tol
    # independent re-evaluation on a box 1.5 times the solved radius
    halo_box = max(1, math.ceil(1.5 * state.support_radius))
    halo = residual_norm(state.u_hat, state.omega, eig, delta, p, box=halo_box)
    cfg = {"delta": delta, "p": p, "schedule": schedule.to_dict(), **(config or {})}
    return SolutionCertificate(
        state.u_hat, state.omega, np.asarray(sel.omega0, dtype=float), state.residual_norm, halo,
        coefficient_decay(state.u_hat), coefficient_decay(state.u_hat, sel.alphas),
        frequency_decay(state.u_hat), converged,
        state.history, list(audits or []), cfg, dict(seeds or {}), state.flags, u0)


# --- schedule inequalities -----------------------------------------------------

@dataclass
class ScheduleReport:
    holds: bool
    first_violation: int | None
    margins: list

    def to_dict(self):
        return {"holds": self.holds, "first_violation": self.first_violation, "margins": self.margins}


def schedule_sequences(delta: float, M: float, r):
    r = np.asarray(r, dtype=float)
    g = (4.0 / 3.0) ** r
    return {
        "delta_r": delta ** 0.5 * M ** (-g),
        "delta_bar_r": delta ** 0.125 * M ** (-0.5 * g),
        "kappa_r": delta ** 0.75 * M ** (-(4.0 / 3.0) ** (r + 2)),
        "kappa_bar_r": delta ** 0.375 * M ** (-0.5 * (4.0 / 3.0) ** (r + 2)),
    }


def schedule_check(delta: float, M: float, nu: float = 0.125, C: float = 1.0, c: float = 1.0,
                   r_max: int = 30) -> ScheduleReport:
    """Check the four step-to-step inequalities for r = 1..r_max.

    ``C`` is the polynomial exponent in M^{(r+1)^C} and ``c`` the decay rate in
    exp(-c/3 M^{r+1}); both are inputs.  Margins are log10(lhs / rhs), so a
    nonnegative margin means the inequality holds.  Logs are used throughout
    because M^{(r+1)^C} overflows for moderate r.
    """
    if not 0 < delta < 1:
        raise PreconditionError("delta must lie in (0, 1)")
    if M < 2:
        raise PreconditionError("M must be at least 2")
    if not 0 < nu < 1:
        raise PreconditionError("nu must lie in (0, 1)")
    ld, lM = math.log(delta), math.log(M)

    def logs(r):
        g = (4.0 / 3.0) ** r
        return (0.5 * ld - g * lM, 0.125 * ld - 0.5 * g * lM,
                0.75 * ld - (4.0 / 3.0) ** (r + 2) * lM, 0.375 * ld - 0.5 * (4.0 / 3.0) ** (r + 2) * lM)

    def lse(*xs):
        m = max(xs)
        return m + math.log(sum(math.exp(x - m) for x in xs))

    margins, first = [], None
    for r in range(1, r_max + 1):
        d, db, k, kb = logs(r)
        d1, db1, k1, kb1 = logs(r + 1)
        P = (r + 1) ** C * lM            # log M^{(r+1)^C}
        E = -c / 3.0 * M ** (r + 1)      # log exp(-c/3 M^{r+1})
        rhs = [
            -nu * ld + P + k,
            lse(-2 * nu * ld + 2 * P + kb, -nu * ld + P + d1),
            lse((1 - nu) * ld + E + k, 2 * d1),
            lse(-2 * nu * ld + 2 * P + k, (1 - nu) * ld + E + kb, d1 + db1),
        ]
        lhs = [d1, db1, k1, kb1]
        m = [(a - b) / math.log(10) for a, b in zip(lhs, rhs)]
        margins.append({"r": r, "margins": m})
        if first is None and min(m) < 0:
            first = r
    return ScheduleReport(first is None, first, margins)
