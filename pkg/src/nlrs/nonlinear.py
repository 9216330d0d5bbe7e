"""The nonlinearity in the eigenbasis and the linearized operator T(theta).

Coefficients live on Z^b x labels.  Products of the form |u|^{2p} u are
evaluated in position space: with U_n(x) = sum_j u(n, j) phi_j(x) and
V_m(x) = conj(U_{-m}(x)), the frequency-n component of u^{p+1} conj(u)^p is
the n-convolution of p+1 copies of U with p copies of V, taken pointwise in x.
Projecting back onto phi_j gives W_u(n, j).  The same route produces the
Jacobian kernels, which depend on n - n' only (Toeplitz in n).
"""
from __future__ import annotations

import itertools
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import FitUndefinedError, PreconditionError, RangeError, ResourceError, SingularityError
from .spectral import DECAY_FLOOR, DecayFit, EigenSystem, decay_profile

PLAIN = "plain"
TILDE = "tilde"
ZERO_FLOOR = 1e-300


def _neg(n):
    return tuple(-x for x in n)


def _add(n, m):
    return tuple(x + y for x, y in zip(n, m))


def _sub(n, m):
    return tuple(x - y for x, y in zip(n, m))


@dataclass
class LatticeCoeffs:
    """Complex coefficients u(n, j), stored as one label-indexed column per n."""

    b: int
    size: int
    label_offset: int
    data: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, b: int, eig: EigenSystem) -> "LatticeCoeffs":
        return cls(b, eig.size, eig.label_offset)

    def like(self) -> "LatticeCoeffs":
        return LatticeCoeffs(self.b, self.size, self.label_offset)

    def _col(self, n):
        n = tuple(int(x) for x in n)
        if len(n) != self.b:
            raise PreconditionError(f"frequency {n} is not in Z^{self.b}")
        if n not in self.data:
            self.data[n] = np.zeros(self.size, dtype=complex)
        return self.data[n]

    def _idx(self, j):
        i = int(j) - self.label_offset
        if not 0 <= i < self.size:
            raise RangeError(f"label {j} outside the eigensystem")
        return i

    def get(self, n, j) -> complex:
        col = self.data.get(tuple(int(x) for x in n))
        return 0j if col is None else complex(col[self._idx(j)])

    def set(self, n, j, value):
        self._col(n)[self._idx(j)] = value

    def column(self, n) -> np.ndarray:
        col = self.data.get(tuple(n))
        return np.zeros(self.size, dtype=complex) if col is None else col

    def add_column(self, n, vec):
        col = self._col(n)
        col += vec

    def copy(self) -> "LatticeCoeffs":
        return LatticeCoeffs(self.b, self.size, self.label_offset, {n: c.copy() for n, c in self.data.items()})

    def prune(self) -> "LatticeCoeffs":
        for n in list(self.data):
            col = self.data[n]
            col[np.abs(col) < ZERO_FLOOR] = 0
            if not np.any(col):
                del self.data[n]
        return self

    def frequencies(self):
        return sorted(n for n, c in self.data.items() if np.any(np.abs(c) >= ZERO_FLOOR))

    def entries(self):
        """Nonzero entries as (n, j, value), in lexicographic order."""
        for n in self.frequencies():
            col = self.data[n]
            for i in np.flatnonzero(np.abs(col) >= ZERO_FLOOR):
                yield n, int(i + self.label_offset), complex(col[i])

    @property
    def n_radius(self) -> int:
        ns = self.frequencies()
        return max((max(abs(x) for x in n) if n else 0) for n in ns) if ns else 0

    @property
    def support_radius(self) -> int:
        r = 0
        for n, j, _ in self.entries():
            r = max(r, abs(j), *(abs(x) for x in n))
        return r

    def norm(self) -> float:
        return math.sqrt(sum(float(np.vdot(c, c).real) for c in self.data.values()))

    def combine(self, other: "LatticeCoeffs", a=1.0, c=1.0) -> "LatticeCoeffs":
        out = self.like()
        for n in set(self.data) | set(other.data):
            out.data[n] = a * self.column(n) + c * other.column(n)
        return out

    def __sub__(self, other):
        return self.combine(other, 1.0, -1.0)

    def __add__(self, other):
        return self.combine(other, 1.0, 1.0)

    def scaled(self, s) -> "LatticeCoeffs":
        return LatticeCoeffs(self.b, self.size, self.label_offset, {n: s * c for n, c in self.data.items()})

    def conjugate_reflection(self) -> "LatticeCoeffs":
        """v(n, j) = conj(u(-n, j))."""
        return LatticeCoeffs(self.b, self.size, self.label_offset,
                             {_neg(n): np.conj(c) for n, c in self.data.items()})

    def to_jsonl(self) -> str:
        lines = [json.dumps({"n": list(n), "j": j, "re": v.real, "im": v.imag}) for n, j, v in self.entries()]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str, b: int, size: int, label_offset: int) -> "LatticeCoeffs":
        out = cls(b, size, label_offset)
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                out.set(d["n"], d["j"], complex(d["re"], d["im"]))
        return out


# --- position-space fields -------------------------------------------------

def fields(u: LatticeCoeffs, eig: EigenSystem):
    """(U, V) with U_n = Phi u_n and V_m = conj(U_{-m})."""
    phi = eig.eigenvectors
    U = {n: phi @ c for n, c in u.data.items() if np.any(c)}
    V = {_neg(n): np.conj(f) for n, f in U.items()}
    return U, V


def convolve(A: dict, B: dict) -> dict:
    out = {}
    for na, fa in A.items():
        for nb, fb in B.items():
            k = _add(na, nb)
            if k in out:
                out[k] = out[k] + fa * fb
            else:
                out[k] = fa * fb
    return out


def field_power(F: dict, k: int, b: int, nx: int) -> dict:
    out = {(0,) * b: np.ones(nx, dtype=complex)}
    for _ in range(k):
        out = convolve(out, F)
    return out


def field_product(U, V, a: int, c: int, b: int, nx: int) -> dict:
    return convolve(field_power(U, a, b, nx), field_power(V, c, b, nx))


def project(F: dict, eig: EigenSystem, b: int) -> LatticeCoeffs:
    out = LatticeCoeffs(b, eig.size, eig.label_offset)
    phiT = eig.eigenvectors.T
    for n in sorted(F):
        out.data[n] = phiT @ F[n]
    return out


def assemble_W(u: LatticeCoeffs, eig: EigenSystem, p: int, sector: str = PLAIN) -> LatticeCoeffs:
    """W_u (plain) or the conjugate-sector form (tilde) of |u|^{2p} u in the eigenbasis."""
    U, V = fields(u, eig)
    nx = eig.box.size
    if not U:
        return u.like()
    if sector == PLAIN:
        N = field_product(U, V, p + 1, p, u.b, nx)
    elif sector == TILDE:
        N = field_product(V, U, p + 1, p, u.b, nx)
    else:
        raise PreconditionError(f"unknown sector {sector!r}")
    return project(N, eig, u.b)


# --- overlap tensors and the tuple-sum route ------------------------------

class OverlapTensorCache:
    """Memoized sums  sum_x prod_i phi_{j_i}(x)  over (2p+2)-tuples of labels.

    With ``prune_tol > 0`` a tuple is skipped (value 0) once the spread of its
    centers exceeds (2p+2) log(1/prune_tol) / gamma, gamma being the smallest
    fitted decay rate among the tuple's eigenfunctions.
    """

    def __init__(self, eig: EigenSystem, p: int, prune_tol: float = 0.0):
        if p < 1:
            raise PreconditionError("p must be >= 1")
        self.eig = eig
        self.p = p
        self.prune_tol = prune_tol
        self.memo = {}
        self._gamma = {}
        self.pruned = 0

    def gamma(self, j) -> float:
        if j not in self._gamma:
            try:
                fit = decay_profile(self.eig.phi(j), int(self.eig.center(j)), self.eig.box.sites)
                self._gamma[j] = fit.gamma_hat
            except FitUndefinedError:
                self._gamma[j] = 0.0
        return self._gamma[j]

    def prune_radius(self, key) -> float:
        if self.prune_tol <= 0:
            return math.inf
        g = min(self.gamma(j) for j in set(key))
        if g <= 0:
            return math.inf
        return (2 * self.p + 2) * math.log(1 / self.prune_tol) / g

    def __call__(self, indices) -> float:
        key = tuple(sorted(int(j) for j in indices))
        if len(key) != 2 * self.p + 2:
            raise PreconditionError(f"overlap needs {2 * self.p + 2} indices")
        if key in self.memo:
            return self.memo[key]
        cs = self.eig.center(np.array(key))
        if cs.max() - cs.min() > self.prune_radius(key):
            self.pruned += 1
            val = 0.0
        else:
            val = float(np.sum(np.prod(self.eig.eigenvectors[:, self.eig.index(np.array(key))], axis=1)))
        self.memo[key] = val
        return val


def overlap(indices, eig: EigenSystem, prune_tol: float = 0.0, cache: OverlapTensorCache | None = None) -> float:
    p = len(indices) // 2 - 1
    if cache is None:
        cache = OverlapTensorCache(eig, p, prune_tol)
    return cache(indices)


def assemble_W_direct(u: LatticeCoeffs, eig: EigenSystem, p: int, sector: str = PLAIN,
                      cache: OverlapTensorCache | None = None, tuple_budget: int = 2_000_000) -> LatticeCoeffs:
    """Tuple-by-tuple evaluation of W through cached overlaps (reference route)."""
    cache = cache or OverlapTensorCache(eig, p)
    us = list(u.entries())
    vs = [(_neg(n), j, v.conjugate()) for n, j, v in us]
    first, second = (us, vs) if sector == PLAIN else (vs, us)
    count = len(first) ** (p + 1) * len(second) ** p * eig.size
    if count > tuple_budget:
        raise ResourceError(f"{count} tuple evaluations exceed the budget {tuple_budget}")
    out = u.like()
    labels = eig.labels
    for a in itertools.product(first, repeat=p + 1):
        for c in itertools.product(second, repeat=p):
            n = (0,) * u.b
            coef = 1.0 + 0j
            ls = []
            for (m, l, val) in a + c:
                n = _add(n, m)
                coef *= val
                ls.append(l)
            col = np.array([cache([j] + ls) for j in labels])
            out.add_column(n, coef * col)
    return out


# --- Jacobian ----------------------------------------------------------------

SECTORS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass
class Jacobian:
    """Kernels K[(r, r')][k](x); entry (n,j; m,l) = sum_x phi_j phi_l K[(r,r')][n-m]."""

    b: int
    p: int
    eig: EigenSystem
    kernels: dict

    def offsets(self, r, r2):
        return sorted(self.kernels[(r, r2)])

    def entry(self, r, n, j, r2, m, l) -> complex:
        g = self.kernels[(r, r2)].get(_sub(tuple(n), tuple(m)))
        if g is None:
            return 0j
        return complex(np.sum(self.eig.phi(j) * self.eig.phi(l) * g))

    def block(self, r, r2, k, rows=None, cols=None) -> np.ndarray | None:
        g = self.kernels[(r, r2)].get(tuple(k))
        if g is None:
            return None
        phi = self.eig.eigenvectors
        A = phi if rows is None else phi[:, rows]
        B = phi if cols is None else phi[:, cols]
        return A.T @ (g[:, None] * B)

    def matrix(self, rows, cols) -> np.ndarray:
        """Entries for doubled indices given as (sector, n..., j) integer rows."""
        rows, cols = np.asarray(rows), np.asarray(cols)
        out = np.zeros((len(rows), len(cols)), dtype=complex)
        phi = self.eig.eigenvectors

        def groups(items):
            g = defaultdict(list)
            for i, it in enumerate(items):
                g[(int(it[0]), tuple(int(x) for x in it[1:-1]))].append(i)
            return {k: np.array(v) for k, v in g.items()}

        gr, gc = groups(rows), groups(cols)
        jr, jc = self.eig.index(rows[:, -1]), self.eig.index(cols[:, -1])
        for (r, n), ri in gr.items():
            for (r2, m), ci in gc.items():
                g = self.kernels[(r, r2)].get(_sub(n, m))
                if g is None:
                    continue
                out[np.ix_(ri, ci)] = phi[:, jr[ri]].T @ (g[:, None] * phi[:, jc[ci]])
        return out

    def to_dense(self, vertices) -> np.ndarray:
        """Dense matrix over [u-sector vertices, v-sector vertices]."""
        items = doubled_items(vertices)
        return self.matrix(items, items)

    def class_offsets(self):
        """For each sector pair, the set of sum(n - m) over kernel offsets."""
        return {s: sorted({sum(k) for k in self.kernels[s]}) for s in SECTORS}

    def apply(self, w: LatticeCoeffs) -> tuple:
        """(W00 w + W01 v_w, W10 w + W11 v_w) with v_w the conjugate reflection of w."""
        phi = self.eig.eigenvectors
        vw = w.conjugate_reflection()
        outs = []
        for r in (0, 1):
            acc = {}
            for r2, src in ((0, w), (1, vw)):
                for m, c in src.data.items():
                    f = phi @ c
                    for k, g in self.kernels[(r, r2)].items():
                        n = _add(k, m)
                        acc[n] = acc.get(n, 0) + g * f
            outs.append(project(acc, self.eig, w.b))
        return tuple(outs)


def doubled_items(vertices) -> np.ndarray:
    """Rows (sector, n..., j): all vertices in the u-sector, then in the v-sector."""
    vertices = np.asarray(vertices, dtype=int)
    nV = len(vertices)
    sec = np.concatenate([np.zeros(nV, dtype=int), np.ones(nV, dtype=int)])
    return np.column_stack([sec, np.vstack([vertices, vertices])])


def jacobian(u: LatticeCoeffs, eig: EigenSystem, p: int) -> Jacobian:
    U, V = fields(u, eig)
    b, nx = u.b, eig.box.size
    if not U:
        return Jacobian(b, p, eig, {s: {} for s in SECTORS})
    UpVp = field_product(U, V, p, p, b, nx)
    kernels = {
        (0, 0): {k: (p + 1) * g for k, g in UpVp.items()},
        (0, 1): {k: p * g for k, g in field_product(U, V, p + 1, p - 1, b, nx).items()},
        (1, 0): {k: p * g for k, g in field_product(V, U, p + 1, p - 1, b, nx).items()},
        (1, 1): {k: (p + 1) * g for k, g in UpVp.items()},
    }
    return Jacobian(b, p, eig, kernels)


def jacobian_decay_fit(jac: Jacobian, vertices, floor: float = DECAY_FLOOR) -> DecayFit:
    """Fit of log|W entry| against |n-n'| + |j| + |j'| over the given vertex set."""
    vertices = np.asarray(vertices)
    M = np.abs(jac.to_dense(vertices))
    nV = len(vertices)
    n = vertices[:, :-1]
    j = vertices[:, -1]
    dist = (np.abs(n[:, None, :] - n[None, :, :]).sum(-1) + np.abs(j)[:, None] + np.abs(j)[None, :])
    dist = np.tile(dist, (2, 2))
    keep = M > floor
    if keep.sum() < 3 or np.ptp(dist[keep]) == 0:
        raise FitUndefinedError("too few Jacobian entries above the floor")
    x = -dist[keep].astype(float)
    y = np.log(M[keep])
    A = np.column_stack([x, np.ones_like(x)])
    (g, c), *_ = np.linalg.lstsq(A, y, rcond=None)
    rmse = float(np.sqrt(np.mean((A @ np.array([g, c]) - y) ** 2)))
    del nV
    return DecayFit(max(float(g), 0.0), float(c), rmse)


# --- regions -------------------------------------------------------------------

FULL_BOX = "FullBox"
OCTANT_CUT = "OctantCut"
GENERALIZED = "GeneralizedRectMinusShift"


@dataclass(frozen=True)
class Region:
    """Elementary regions Q_N(j0) in Z^{b+1} (last coordinate is the label).

    ``signs`` (OctantCut) has one entry per axis from {'<', '>', None}; the
    removed octant is {x : x_i signs_i 0 for every constrained axis}, measured
    relative to the region center.  GeneralizedRectMinusShift is R minus (R + z)
    for the rectangle R with ``center`` and ``half_widths``.
    """

    kind: str = FULL_BOX
    N: int = 0
    j0: int = 0
    signs: tuple = ()
    center: tuple = ()
    half_widths: tuple = ()
    shift: tuple = ()

    def __post_init__(self):
        if self.kind == OCTANT_CUT and sum(s is not None for s in self.signs) < 2:
            raise PreconditionError("an octant cut constrains at least two axes")
        if self.kind not in (FULL_BOX, OCTANT_CUT, GENERALIZED):
            raise PreconditionError(f"unknown region kind {self.kind!r}")

    def contains(self, point) -> bool:
        x = np.asarray(point)
        if self.kind == GENERALIZED:
            c, h, z = map(np.asarray, (self.center, self.half_widths, self.shift))
            return bool(np.all(np.abs(x - c) <= h) and not np.all(np.abs(x - c - z) <= h))
        rel = x.copy()
        rel[-1] -= self.j0
        if np.any(np.abs(rel) > self.N):
            return False
        if self.kind == OCTANT_CUT:
            cut = True
            for s, v in zip(self.signs, rel):
                if s == "<":
                    cut &= v < 0
                elif s == ">":
                    cut &= v > 0
            return not cut
        return True

    def vertices(self, b: int, eig: EigenSystem | None = None) -> np.ndarray:
        """Lexicographic vertex list; labels are clipped to the eigensystem range."""
        if self.kind == GENERALIZED:
            c, h = np.asarray(self.center), np.asarray(self.half_widths)
            axes = [np.arange(ci - hi, ci + hi + 1) for ci, hi in zip(c, h)]
        else:
            axes = [np.arange(-self.N, self.N + 1)] * b + [np.arange(self.j0 - self.N, self.j0 + self.N + 1)]
        if eig is not None:
            lo, hi = eig.label_offset, eig.label_offset + eig.size - 1
            axes[-1] = axes[-1][(axes[-1] >= lo) & (axes[-1] <= hi)]
        grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        if self.kind == FULL_BOX:
            return grid
        keep = np.array([self.contains(x) for x in grid], dtype=bool)
        return grid[keep]


def octant_regions(N: int, b: int, j0: int = 0):
    """The full box and every octant-cut elementary region of size N."""
    out = [Region(FULL_BOX, N, j0)]
    for signs in itertools.product(("<", ">", None), repeat=b + 1):
        if sum(s is not None for s in signs) >= 2:
            out.append(Region(OCTANT_CUT, N, j0, signs))
    return out


def _linf(a, b):
    return int(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def width(points, max_M: int | None = None) -> int:
    """Largest M such that every point has an elementary region of size M around it
    inside the set, with distance >= M/2 to the rest of the set (l-infinity metric).

    Brute force; intended for small sets.
    """
    pts = [tuple(int(v) for v in x) for x in points]
    S = set(pts)
    if not S:
        return 0
    d = len(pts[0])
    arr = np.array(pts)
    max_M = max_M if max_M is not None else int(np.ptp(arr, axis=0).max())
    shapes = [None] + [s for s in itertools.product(("<", ">", None), repeat=d) if sum(x is not None for x in s) >= 2]

    def region_set(c, M, s):
        axes = [range(ci - M, ci + M + 1) for ci in c]
        out = set()
        for x in itertools.product(*axes):
            if s is not None:
                cut = all((v - ci < 0) if t == "<" else (v - ci > 0) if t == ">" else True
                          for v, ci, t in zip(x, c, s))
                if cut:
                    continue
            out.add(x)
        return out

    best = 0
    for M in range(1, max_M + 1):
        ok_all = True
        for x in pts:
            found = False
            for c in itertools.product(*[range(xi - M, xi + M + 1) for xi in x]):
                for s in shapes:
                    R = region_set(c, M, s)
                    if x not in R or not R <= S:
                        continue
                    rest = S - R
                    if all(_linf(x, y) >= M / 2 for y in rest):
                        found = True
                        break
                if found:
                    break
            if not found:
                ok_all = False
                break
        if not ok_all:
            break
        best = M
    return best


# --- T(theta) -----------------------------------------------------------------

@dataclass
class DoubledOperator:
    """T(theta) = D(theta) + delta * W on vertices x {u, v}.

    Doubled indices run over all u-sector vertices followed by all v-sector
    vertices, each in the order of ``vertices``.  Matrices are materialized
    per decoupled component; ``dense`` is meant for small boxes.
    """

    vertices: np.ndarray
    theta: float
    omega: np.ndarray
    delta: float
    mu: np.ndarray
    jac: Jacobian | None = None

    @property
    def b(self) -> int:
        return self.vertices.shape[1] - 1

    @property
    def size(self) -> int:
        return 2 * len(self.vertices)

    @property
    def n_dot_omega(self) -> np.ndarray:
        return self.vertices[:, :-1] @ self.omega

    @property
    def coupled(self) -> bool:
        return self.jac is not None and self.delta != 0

    def diagonal(self) -> np.ndarray:
        x = self.n_dot_omega + self.theta
        return np.concatenate([x + self.mu, -x + self.mu])

    def signature(self) -> np.ndarray:
        nV = len(self.vertices)
        return np.concatenate([np.ones(nV), -np.ones(nV)])

    def items(self) -> np.ndarray:
        return doubled_items(self.vertices)

    def offdiag_block(self, loc) -> np.ndarray:
        loc = np.asarray(loc)
        if not self.coupled:
            return np.zeros((len(loc), len(loc)), dtype=complex)
        it = self.items()[loc]
        return self.delta * self.jac.matrix(it, it)

    def block(self, loc) -> np.ndarray:
        loc = np.asarray(loc)
        return self.offdiag_block(loc) + np.diag(self.diagonal()[loc])

    def dense(self) -> np.ndarray:
        return self.block(np.arange(self.size))

    def with_theta(self, theta: float) -> "DoubledOperator":
        return DoubledOperator(self.vertices, float(theta), self.omega, self.delta, self.mu, self.jac)

    def restrict(self, keep) -> "DoubledOperator":
        keep = np.asarray(keep)
        return DoubledOperator(self.vertices[keep], self.theta, self.omega, self.delta, self.mu[keep], self.jac)

    def components(self) -> list:
        """Doubled-index sets that the coupling cannot connect.

        Each kernel offset k changes the charge sum(n) by sum(k), so the classes
        (sector, sum(n)) linked through the kernels' charge offsets decouple.
        """
        nV = len(self.vertices)
        charge = self.vertices[:, :-1].sum(axis=1)
        keys = [(0, int(c)) for c in charge] + [(1, int(c)) for c in charge]
        if not self.coupled:
            return [np.array([i]) for i in range(self.size)]
        offs = self.jac.class_offsets()
        present = sorted(set(keys))
        parent = {k: k for k in present}

        def find(k):
            while parent[k] != k:
                parent[k] = parent[parent[k]]
                k = parent[k]
            return k

        pset = set(present)
        for (r, c) in present:
            for r2 in (0, 1):
                for s in offs[(r, r2)]:
                    other = (r2, c - s)
                    if other in pset:
                        a, b = find((r, c)), find(other)
                        if a != b:
                            parent[max(a, b)] = min(a, b)
        groups = defaultdict(list)
        for i, k in enumerate(keys):
            groups[find(k)].append(i)
        return [np.array(groups[g]) for g in sorted(groups)]

    def vertex_label(self, i: int):
        nV = len(self.vertices)
        v = self.vertices[i % nV]
        return {"n": [int(x) for x in v[:-1]], "j": int(v[-1]), "sector": "u" if i < nV else "v"}


def assemble_T(theta, omega, u: LatticeCoeffs | None, eig: EigenSystem, delta: float, box, p: int = 1,
               jac: Jacobian | None = None) -> DoubledOperator:
    """T(theta) on ``box`` (a Region or an explicit (count, b+1) vertex array)."""
    omega = np.asarray(omega, dtype=float)
    b = len(omega)
    vertices = box.vertices(b, eig) if isinstance(box, Region) else np.asarray(box, dtype=int)
    if jac is None and u is not None and delta != 0:
        jac = jacobian(u, eig, p)
    mu = eig.mu(vertices[:, -1])
    return DoubledOperator(vertices, float(theta), omega, float(delta), mu, jac)


# --- restricted inverses --------------------------------------------------------

@dataclass
class RestrictedInverse:
    """Blockwise factorization of R T R; ``blocks`` holds (doubled indices, factor)."""

    T: DoubledOperator
    blocks: list
    norm: float
    norm_converged: bool
    decay: DecayFit | None = None
    max_decay_ratio: float | None = None

    def matrix(self) -> np.ndarray:
        n = self.T.size
        G = np.zeros((n, n), dtype=complex)
        for loc, fac in self.blocks:
            G[np.ix_(loc, loc)] = _inv_block(fac, len(loc))
        return G

    def apply(self, rhs) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=complex)
        out = np.zeros_like(rhs)
        for loc, fac in self.blocks:
            out[loc] = _solve_block(fac, rhs[loc])
        return out


def _solve_block(fac, rhs):
    kind, data = fac
    if kind == "diag":
        return rhs / data
    return sla.lu_solve(data, rhs)


def _inv_block(fac, n):
    kind, data = fac
    if kind == "diag":
        return np.diag(1 / data)
    return sla.lu_solve(data, np.eye(n, dtype=complex))


def _power_norm(fac, n, tol, max_iter, seed=0):
    """Largest singular value of the inverse by power iteration on G^* G."""
    kind, data = fac
    if kind == "diag":
        return float(np.max(1 / np.abs(data))), True
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(max_iter):
        y = sla.lu_solve(data, x)
        z = sla.lu_solve(data, y, trans=2)
        nz = np.linalg.norm(z)
        new = math.sqrt(nz)
        x = z / nz
        if est and abs(new - est) <= tol * new:
            return new, True
        est = new
    return est, False


def separations(vertices, idx_a, idx_b) -> np.ndarray:
    """max(|n - n'|_inf, |j - j'|) between doubled indices."""
    nV = len(vertices)
    va = vertices[np.asarray(idx_a) % nV]
    vb = vertices[np.asarray(idx_b) % nV]
    dj = np.abs(va[:, None, -1] - vb[None, :, -1])
    if vertices.shape[1] > 1:
        dn = np.abs(va[:, None, :-1] - vb[None, :, :-1]).max(-1)
        return np.maximum(dn, dj)
    return dj


def factor_block(T: DoubledOperator, loc, pivot_floor: float = 1e-14):
    loc = np.asarray(loc)
    diag = T.diagonal()[loc]
    A = T.offdiag_block(loc) if T.coupled else None
    if A is None or not np.any(A):
        k = int(np.argmin(np.abs(diag)))
        if abs(diag[k]) < pivot_floor:
            raise SingularityError("singular restriction", T.vertex_label(int(loc[k])), float(abs(diag[k])))
        return ("diag", diag.astype(complex))
    A = A + np.diag(diag)
    lu, piv = sla.lu_factor(A, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if pivots.min() < pivot_floor:
        with np.errstate(all="ignore"):
            y = sla.lu_solve((lu, piv), np.ones(len(loc), dtype=complex))
        near = int(np.argmax(np.abs(y))) if np.all(np.isfinite(y)) else int(np.argmin(pivots))
        raise SingularityError("singular restriction", T.vertex_label(int(loc[near])), float(pivots.min()))
    return ("lu", (lu, piv))


def restricted_inverse(T: DoubledOperator, region: Region | None = None, N: int | None = None,
                       pivot_floor: float = 1e-14, tol: float = 1e-8, max_iter: int = 500,
                       c_tilde: float | None = None, with_decay: bool = True) -> RestrictedInverse:
    """Factor R T R for the region (all of T's vertices when ``region`` is None).

    The norm comes from power iteration on the inverse; the decay fit regresses
    log|inverse entry| on max(|n-n'|, |j-j'|) over separations >= N/10.  With
    ``c_tilde`` the largest |G(x, y)| exp(c_tilde * sep) over those pairs is
    reported as ``max_decay_ratio`` (the decay bound holds iff it is <= 1).
    """
    if region is not None:
        keep = np.array([region.contains(v) for v in T.vertices], dtype=bool)
        T = T.restrict(keep)
        N = region.N if N is None else N
    if N is None:
        N = int(np.max(np.abs(T.vertices[:, :-1]))) if T.b else 0
    blocks, norm, converged = [], 0.0, True
    for loc in T.components():
        fac = factor_block(T, loc, pivot_floor)
        nb, ok = _power_norm(fac, len(loc), tol, max_iter)
        converged &= ok
        norm = max(norm, nb)
        blocks.append((loc, fac))
    out = RestrictedInverse(T, blocks, norm, converged)
    if with_decay:
        out.decay, out.max_decay_ratio = _inverse_decay(out, N, c_tilde)
    return out


def _inverse_decay(inv: RestrictedInverse, N, c_tilde):
    """Per-block pass over |G| accumulating, per separation value, the count,
    sum and sum of squares of log|G|; least squares on those moments equals
    the fit over all individual entries."""
    ratio = None
    moments = defaultdict(lambda: np.zeros(3))
    for loc, fac in inv.blocks:
        G = np.abs(_inv_block(fac, len(loc)))
        sep = separations(inv.T.vertices, loc, loc)
        far = sep >= N / 10
        if c_tilde is not None and far.any():
            r = float(np.max(G[far] * np.exp(c_tilde * sep[far])))
            ratio = r if ratio is None else max(ratio, r)
        keep = far & (G > DECAY_FLOOR)
        if not keep.any():
            continue
        s, y = sep[keep], np.log(G[keep])
        for d in np.unique(s):
            yd = y[s == d]
            moments[int(d)] += (yd.size, yd.sum(), (yd ** 2).sum())
    if not moments:
        return None, ratio
    d = np.array(sorted(moments), dtype=float)
    m = np.array([moments[int(k)] for k in d])
    cnt, sy, syy = m[:, 0], m[:, 1], m[:, 2]
    if cnt.sum() < 3 or d.size < 2:
        return None, ratio
    x = -d
    S, Sx, Sxx = cnt.sum(), (cnt * x).sum(), (cnt * x * x).sum()
    Sy, Sxy = sy.sum(), (x * sy).sum()
    det = S * Sxx - Sx * Sx
    g = (S * Sxy - Sx * Sy) / det
    c = (Sy - g * Sx) / S
    sse = (syy - 2 * (g * x + c) * sy + cnt * (g * x + c) ** 2).sum()
    rmse = float(math.sqrt(max(sse, 0.0) / S))
    return DecayFit(max(float(g), 0.0), float(c), rmse), ratio


# --- large-deviation scans --------------------------------------------------

def t_builder(omega, u: LatticeCoeffs | None, eig: EigenSystem, delta: float, p: int = 1):
    """Callable region -> T(0) on that region, sharing one Jacobian."""
    jac = jacobian(u, eig, p) if (u is not None and delta != 0) else None

    def build(region: Region) -> DoubledOperator:
        return assemble_T(0.0, omega, None, eig, delta, region, p, jac)

    return build


def theta_window(T: DoubledOperator, pad: float = 1.0):
    """Range of theta where some diagonal entry of T(theta) vanishes, padded."""
    x = T.n_dot_omega
    zeros = np.concatenate([-x - T.mu, -x + T.mu])
    return float(zeros.min() - pad), float(zeros.max() + pad)


@dataclass
class LdtScan:
    grid: np.ndarray
    bad: np.ndarray
    norm_bad: np.ndarray
    decay_bad: np.ndarray
    N: int
    epsilon: float
    c_tilde: float | None
    j0_values: list
    crossings: int
    background: list

    @property
    def fraction(self) -> float:
        return float(self.bad.mean()) if self.bad.size else 0.0

    @property
    def norm_fraction(self) -> float:
        return float(self.norm_bad.mean()) if self.norm_bad.size else 0.0

    @property
    def decay_fraction(self) -> float:
        return float(self.decay_bad.mean()) if self.decay_bad.size else 0.0

    def bad_intervals(self):
        """Maximal runs of bad grid points as (first theta, last theta)."""
        out, start = [], None
        for i, flag in enumerate(self.bad):
            if flag and start is None:
                start = i
            if start is not None and (not flag or i == len(self.bad) - 1):
                stop = i if flag else i - 1
                out.append((float(self.grid[start]), float(self.grid[stop])))
                start = None
        return out

    def to_dict(self):
        return {
            "N": self.N,
            "grid_points": int(self.grid.size),
            "theta_range": [float(self.grid.min()), float(self.grid.max())] if self.grid.size else [],
            "epsilon": self.epsilon,
            "c_tilde": self.c_tilde,
            "j0_values": [int(j) for j in self.j0_values],
            "crossings": self.crossings,
            "bad_fraction": self.fraction,
            "norm_bad_fraction": self.norm_fraction,
            "decay_bad_fraction": self.decay_fraction,
            "background": self.background,
            "bad_intervals": self.bad_intervals(),
        }


def _far_peak(weights, coords, min_sep, c):
    """max over pairs with separation >= min_sep of w_x w_y exp(c * sep).

    The separation is the l-infinity distance, so exp(c * sep) is the largest
    of exp(c |x_d - y_d|) over coordinates d, and a pair is far exactly when
    some integer coordinate differs by at least ceil(min_sep).  Per coordinate
    the best pair follows from a prefix maximum of log w_y - c y_d over sorted
    y_d, which makes the search O(n log n) instead of O(n^2).
    """
    if len(weights) == 0:
        return 0.0
    s = max(0, math.ceil(min_sep))
    with np.errstate(divide="ignore"):
        lw = np.log(np.asarray(weights, dtype=float))
    best = -np.inf
    for d in range(coords.shape[1]):
        order = np.argsort(coords[:, d], kind="stable")
        x = coords[order, d].astype(float)
        lo = np.maximum.accumulate(lw[order] - c * x)
        idx = np.searchsorted(x, x - s, side="right") - 1
        ok = idx >= 0
        if ok.any():
            best = max(best, float(np.max(lw[order][ok] + c * x[ok] + lo[idx[ok]])))
    return math.exp(best) if best > -np.inf else 0.0


def _mark(grid, centers, radii, out):
    lo = np.searchsorted(grid, centers - radii, side="left")
    hi = np.searchsorted(grid, centers + radii, side="right")
    for a, b in zip(lo, hi):
        if b > a:
            out[a:b] = True


def ldt_scan(builder, N: int, theta_grid, j0_values=None, c_tilde: float | None = None,
             norm_exponent: float = 0.9, background: int = 8, complex_tol: float = 1e-3) -> LdtScan:
    """Grid fraction of theta where some FullBox restriction Q_N(j0) violates
    the inverse norm bound exp(N^norm_exponent) or, with ``c_tilde``, the
    off-diagonal bound |G(x, y)| <= exp(-c_tilde |x - y|) for |x - y| >= N/10.

    Per decoupled block, T(theta) = A + theta J is a Hermitian pencil; its
    eigenvalue branches cross zero at theta* = -eig(J A) with slope
    psi^* J psi.  Near a crossing the inverse is dominated by
    psi psi^* / (slope (theta - theta*)), which gives the bad neighbourhoods:
    radius eps/|slope| for the norm and (far-pair peak of |psi|^2)/|slope| for
    the decay.  Crossings with a non-real part below ``complex_tol`` are checked
    by direct evaluation at the nearby grid points, and ``background`` evenly
    spaced grid points are checked by direct inversion.
    """
    grid = np.sort(np.asarray(theta_grid, dtype=float))
    j0_values = list(j0_values) if j0_values is not None else sorted({-2 * N, -N, 0, N, 2 * N})
    eps = math.exp(-float(N) ** norm_exponent)
    norm_bad = np.zeros(grid.size, dtype=bool)
    decay_bad = np.zeros(grid.size, dtype=bool)
    crossings = 0
    bg_idx = np.unique(np.linspace(0, grid.size - 1, min(background, grid.size)).round().astype(int)) \
        if grid.size else np.array([], dtype=int)
    bg_report = []
    for j0 in j0_values:
        T0 = builder(Region(FULL_BOX, N, j0))
        coords = T0.vertices
        sig = T0.signature()
        for loc in T0.components():
            A = T0.block(loc)
            J = sig[loc]
            w, vecs = sla.eig(J[:, None] * A)
            theta_star = -w
            real = np.abs(theta_star.imag) <= 1e-12 * np.maximum(1.0, np.abs(theta_star.real))
            near = ~real & (np.abs(theta_star.imag) < complex_tol)
            crossings += int(real.sum())
            if real.any():
                psi = vecs[:, real]
                psi = psi / np.linalg.norm(psi, axis=0)
                slope = np.abs(np.einsum("i,ij,ij->j", J, psi.conj(), psi).real)
                slope = np.maximum(slope, 1e-300)
                ts = theta_star.real[real]
                _mark(grid, ts, eps / slope, norm_bad)
                if c_tilde is not None:
                    vc = coords[loc % len(coords)]
                    peaks = np.array([_far_peak(np.abs(psi[:, k]), vc, N / 10, c_tilde)
                                      for k in range(psi.shape[1])])
                    _mark(grid, ts, peaks / slope, decay_bad)
            for t in theta_star[near]:
                r = abs(t.imag) + 10 * eps
                lo, hi = np.searchsorted(grid, [t.real - r, t.real + r])
                for g in range(lo, hi):
                    s = np.linalg.eigvalsh(A + grid[g] * np.diag(J))
                    if np.min(np.abs(s)) < eps:
                        norm_bad[g] = True
        for g in bg_idx:
            T = T0.with_theta(grid[g])
            try:
                inv = restricted_inverse(T, N=N, with_decay=c_tilde is not None, c_tilde=c_tilde)
                nb = inv.norm > 1 / eps
                db = bool(inv.max_decay_ratio is not None and inv.max_decay_ratio > 1)
            except SingularityError:
                nb, db = True, False
            norm_bad[g] |= nb
            decay_bad[g] |= db
            bg_report.append({"j0": int(j0), "theta": float(grid[g]), "norm_bad": bool(nb), "decay_bad": db})
    return LdtScan(grid, norm_bad | decay_bad, norm_bad, decay_bad, int(N), eps, c_tilde,
                   j0_values, crossings, bg_report)
