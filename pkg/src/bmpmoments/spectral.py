"""Generalised eigen-data of the mean semigroup.

Every eigenvalue of the ``n x n`` mean matrix is retained, so the
expansion of ``e^{tA} f`` over Jordan chains is exact.  Indices are
0-based throughout: eigenvalue ``i = 0`` is the dominant real one, rank
``j = 0`` holds the true eigenvectors (``N phi = 0``), and ``k`` counts
chains, longest first, so the chain link is ``(i, j, k) -> (i, j-1, k)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from math import factorial
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import AmbiguousMembership, DominanceViolation, IllConditioned

TOL_CLUSTER = 1e-7
TOL_RANK = 1e-8
TOL_MEMBER = 1e-9
TOL_REGIME = 1e-9
BIORTH_TOL = 1e-8
COEFF_FLOOR = 1e-13


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    V: np.ndarray
    W: np.ndarray
    labels: tuple[tuple[int, int, int], ...]
    nilpotent: np.ndarray
    jordan: np.ndarray
    source: str = "numerical"

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def m(self) -> int:
        return len(self.eigenvalues)

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[0].real)

    @property
    def depths(self) -> tuple[int, ...]:
        """Longest chain length ``p_i`` per eigenvalue."""
        out = [0] * self.m
        for i, j, _ in self.labels:
            out[i] = max(out[i], j + 1)
        return tuple(out)

    @property
    def p1(self) -> int:
        return self.depths[0]

    @property
    def chain_counts(self) -> tuple[tuple[int, ...], ...]:
        """``k_{i,j}``: number of chains of eigenvalue ``i`` reaching rank ``j``."""
        counts = [[0] * d for d in self.depths]
        for i, j, _ in self.labels:
            counts[i][j] += 1
        return tuple(tuple(c) for c in counts)

    @property
    def max_depth(self) -> int:
        return max(self.depths)

    def index(self, i: int, j: int, k: int) -> int:
        return self.labels.index((i, j, k))

    def phi(self, i: int, j: int, k: int) -> np.ndarray:
        return self.V[:, self.index(i, j, k)]

    def dual(self, i: int, j: int, k: int) -> np.ndarray:
        return self.W[self.index(i, j, k)]

    def link(self, i: int, j: int, k: int) -> tuple[int, int, int] | None:
        """Target of the nilpotent map on a chain member (``None`` for eigenvectors)."""
        self.index(i, j, k)
        return None if j == 0 else (i, j - 1, k)

    def columns(self, i: int, j: int | None = None) -> np.ndarray:
        if not 0 <= i < self.m:
            raise IndexError(f"eigenvalue index {i} out of range")
        return np.array(
            [c for c, (a, b, _) in enumerate(self.labels) if a == i and (j is None or b == j)],
            dtype=int,
        )

    def coefficients(self, f) -> np.ndarray:
        return self.W @ np.asarray(f, dtype=complex)

    def phi_project(self, i: int, j: int, f) -> np.ndarray:
        if not (0 <= i < self.m and 0 <= j < self.depths[i]):
            raise IndexError(f"no rank {j} chain members for eigenvalue {i}")
        cols = self.columns(i, j)
        return self.V[:, cols] @ (self.W[cols] @ np.asarray(f, dtype=complex))

    def phi_sum(self, i: int, f) -> np.ndarray:
        cols = self.columns(i)
        return self.V[:, cols] @ (self.W[cols] @ np.asarray(f, dtype=complex))

    def projector(self, i: int, j: int | None = None) -> np.ndarray:
        cols = self.columns(i, j)
        return self.V[:, cols] @ self.W[cols]

    def nil_power(self, r: int, f) -> np.ndarray:
        out = np.asarray(f, dtype=complex)
        for _ in range(r):
            out = self.nilpotent @ out
        return out

    def exp_nilpotent(self, t: float, f) -> np.ndarray:
        """``e^{N t} f`` via the terminating series (any real ``t``)."""
        term = np.asarray(f, dtype=complex)
        out = term.copy()
        for r in range(1, self.max_depth):
            term = self.nilpotent @ term * (t / r)
            out = out + term
        return out

    def exp_nilpotent_matrix(self, t: float) -> np.ndarray:
        out = np.eye(self.n, dtype=complex)
        term = np.eye(self.n, dtype=complex)
        for r in range(1, self.max_depth):
            term = term @ self.nilpotent * (t / r)
            out = out + term
        return out

    def semigroup(self, t: float, f, clusters: Sequence[int] | None = None) -> np.ndarray:
        """``sum_i e^{(lambda_i + N) t} Phi_i[f]`` over ``clusters`` (default all)."""
        f = np.asarray(f, dtype=complex)
        idx = range(self.m) if clusters is None else clusters
        out = np.zeros(self.n, dtype=complex)
        for i in idx:
            out = out + np.exp(self.eigenvalues[i] * t) * self.exp_nilpotent(t, self.phi_sum(i, f))
        return out

    @cached_property
    def _nil_powers(self) -> tuple[np.ndarray, ...]:
        nil = self.jordan - np.diag(np.diag(self.jordan))
        out = [np.eye(self.n, dtype=complex)]
        for r in range(1, self.max_depth):
            out.append(out[-1] @ nil / r)
        return tuple(out)

    def _clean(self, F) -> np.ndarray:
        F = np.atleast_2d(np.asarray(F, dtype=complex))
        C = F @ self.W.T
        # Coefficients at round-off level are noise; left in, the dominant
        # mode amplifies them until they swamp the genuine components.
        scale = np.max(np.abs(C), axis=1, keepdims=True)
        return np.where(np.abs(C) <= COEFF_FLOOR * scale, 0.0, C)

    def _evolve(self, t: np.ndarray, C: np.ndarray, shift=None) -> np.ndarray:
        """Rows ``e^{-shift t_g} V e^{t_g J} c_g`` for coefficient rows ``c_g``."""
        t = np.asarray(t, dtype=float).reshape(-1, 1)
        acc = np.zeros(np.broadcast_shapes(C.shape, (t.shape[0], self.n)), dtype=complex)
        for r, Nr in enumerate(self._nil_powers):
            acc = acc + t**r * (C @ Nr.T)
        rate = np.diag(self.jordan)[None, :]
        if shift is not None:
            rate = rate - np.asarray(shift, dtype=float).reshape(-1, 1)
        # modes with no weight are skipped so a large t cannot produce 0 * inf
        acc = acc * np.exp(np.where(acc != 0, t * rate, 0.0))
        return acc @ self.V.T

    def propagate_rows(self, t: float, F) -> np.ndarray:
        """Rows ``e^{tA} f`` for each row ``f`` of ``F``, computed mode by mode.

        Working in Jordan coordinates keeps each eigencomponent separate, so
        a subdominant eigenfunction is not polluted by round-off from the
        dominant mode the way a dense ``expm`` product is.
        """
        return self._evolve(np.array([t]), self._clean(F))

    def row_propagator(self, F, shift=None):
        """``t -> e^{-shift t} propagate_rows(t, F)`` with the coefficients computed once.

        ``shift`` holds one rate per row; scaling inside the exponent keeps
        fast-growing rows finite at long horizons.
        """
        C = self._clean(F)
        return lambda t: self._evolve(np.array([t]), C, shift)

    def propagate_batch(self, s, H) -> np.ndarray:
        """Rows ``e^{s_g A} h_g`` for paired nodes ``s`` and rows of ``H``."""
        return self._evolve(np.asarray(s, dtype=float), self._clean(H))

    def to_dict(self, regimes: "RegimeClassification | None" = None) -> dict:
        chains = []
        for c, (i, j, k) in enumerate(self.labels):
            chains.append(
                {
                    "eigenvalue": i,
                    "rank": j,
                    "chain": k,
                    "phi": [{"re": float(v.real), "im": float(v.imag)} for v in self.V[:, c]],
                    "dual": [{"re": float(v.real), "im": float(v.imag)} for v in self.W[c]],
                }
            )
        return {
            "eigenvalues": [{"re": float(v.real), "im": float(v.imag)} for v in self.eigenvalues],
            "depths": list(self.depths),
            "chain_counts": [list(c) for c in self.chain_counts],
            "chains": chains,
            "regimes": list(regimes.tags) if regimes is not None else [],
            "tau": regimes.tau if regimes is not None else None,
            "source": self.source,
        }

    def to_json(self, regimes=None) -> str:
        return json.dumps(self.to_dict(regimes), indent=2)


# -- construction -----------------------------------------------------------


def _cluster(values: np.ndarray, tol: float) -> list[list[int]]:
    order = sorted(range(len(values)), key=lambda i: (values[i].real, values[i].imag))
    clusters: list[list[int]] = []
    for i in order:
        for c in clusters:
            if any(abs(values[i] - values[j]) <= tol for j in c):
                c.append(i)
                break
        else:
            clusters.append([i])
    return clusters


def _null_basis(B: np.ndarray, tol: float) -> np.ndarray:
    _, s, vh = np.linalg.svd(B)
    scale = max(1.0, s[0] if s.size else 1.0)
    rank = int(np.sum(s > tol * scale))
    return vh[rank:].conj().T


def _orth(M: np.ndarray) -> np.ndarray:
    if M.shape[1] == 0:
        return M
    u, s, _ = np.linalg.svd(M, full_matrices=False)
    return u[:, s > 1e-12 * max(1.0, s[0])]


def _chains_for_cluster(A: np.ndarray, lam: complex, mult: int, tol_rank: float):
    """Jordan chains for one eigenvalue by rank-revealing deflation."""
    n = A.shape[0]
    real = abs(lam.imag) == 0.0
    dtype = float if real else complex
    B = A - (lam.real if real else lam) * np.eye(n)
    kernels = [np.zeros((n, 0), dtype=dtype)]
    P = np.eye(n, dtype=dtype)
    while kernels[-1].shape[1] < mult:
        P = P @ B
        K = _null_basis(P, tol_rank)
        if K.shape[1] <= kernels[-1].shape[1] or len(kernels) > mult:
            raise IllConditioned(
                f"eigenvalue {lam:.6g}: generalised kernel dimension stalls at "
                f"{kernels[-1].shape[1]} of {mult}"
            )
        kernels.append(K.astype(dtype))
    if kernels[-1].shape[1] != mult:
        raise IllConditioned(f"eigenvalue {lam:.6g}: kernel overshoots multiplicity {mult}")
    depth = len(kernels) - 1
    dims = [K.shape[1] for K in kernels]
    reach = [dims[j + 1] - dims[j] for j in range(depth)]  # chains reaching rank j
    chains: list[list[np.ndarray]] = []  # each chain: [phi_rank0, phi_rank1, ...]
    for s in range(depth, 0, -1):
        new = reach[s - 1] - (reach[s] if s < depth else 0)
        if new == 0:
            continue
        span = [kernels[s - 1]]
        for ch in chains:
            span.append(ch[s - 1][:, None])
        Wb = _orth(np.hstack(span)) if sum(x.shape[1] for x in span) else np.zeros((n, 0))
        Ks = kernels[s]
        resid = Ks - Wb @ (Wb.conj().T @ Ks) if Wb.shape[1] else Ks
        u, sv, _ = np.linalg.svd(resid, full_matrices=False)
        if len(sv) < new or sv[new - 1] < tol_rank:
            raise IllConditioned(f"eigenvalue {lam:.6g}: cannot extend chains of length {s}")
        for c in range(new):
            top = u[:, c]
            chain = [top]
            for _ in range(s - 1):
                chain.append(B @ chain[-1])
            chains.append(chain[::-1])
    chains.sort(key=len, reverse=True)
    return chains


def _chains_from_jordan(J: np.ndarray, V: np.ndarray, tol: float):
    n = J.shape[0]
    off = np.abs(J - np.diag(np.diag(J)) - np.diag(np.diag(J, 1), 1))
    if np.max(off, initial=0.0) > tol:
        raise IllConditioned("supplied J is not upper bidiagonal")
    sup = np.diag(J, 1)
    blocks = []
    start = 0
    for c in range(1, n + 1):
        if c == n or abs(sup[c - 1]) < 0.5:
            blocks.append(list(range(start, c)))
            start = c
    out = []
    for cols in blocks:
        lam = J[cols[0], cols[0]]
        for a, b in zip(cols[:-1], cols[1:]):
            if abs(J[b, b] - lam) > tol or abs(J[a, b] - 1.0) > tol:
                raise IllConditioned("supplied J has a malformed Jordan block")
        out.append((complex(lam), [V[:, c] for c in cols]))
    return out


def _order_clusters(raw, tol: float):
    """Decreasing real part; real parts within ``tol`` count as ties, broken by imaginary part."""
    raw = sorted(raw, key=lambda item: -item[0].real)
    out, run = [], []
    for item in raw:
        if run and run[0][0].real - item[0].real > tol:
            out += sorted(run, key=lambda it: it[0].imag)
            run = []
        run.append(item)
    return out + sorted(run, key=lambda it: it[0].imag)


def decompose(
    A,
    tol_cluster: float = TOL_CLUSTER,
    tol_rank: float = TOL_RANK,
    jordan: tuple[np.ndarray, np.ndarray] | None = None,
) -> SpectralDecomposition:
    """Full-spectrum Jordan data of the mean matrix ``A``.

    With ``jordan=(J, V)`` the chains are read off the supplied exact
    factorisation; otherwise they are computed per eigenvalue cluster.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    scale = max(1.0, float(np.max(np.abs(A))))
    if jordan is not None:
        J, Vj = (np.asarray(x, dtype=complex) for x in jordan)
        blocks = _chains_from_jordan(J, Vj, 1e-12 * scale)
        lams = np.array([b[0] for b in blocks])
        groups = _cluster(lams, tol_cluster * scale)
        raw = []
        for g in groups:
            lam = complex(np.mean(lams[g]))
            chains = sorted((blocks[b][1] for b in g), key=len, reverse=True)
            raw.append((lam, chains))
        source = "analytic"
    else:
        w = np.linalg.eigvals(A)
        groups = _cluster(w, tol_cluster * scale)
        raw = []
        for g in groups:
            lam = complex(np.mean(w[g]))
            if abs(lam.imag) <= tol_cluster * scale:
                lam = complex(lam.real, 0.0)
            raw.append((lam, _chains_for_cluster(A, lam, len(g), tol_rank)))
        source = "numerical"
    raw = _order_clusters(raw, tol_cluster * scale)
    lams = np.array([r[0] for r in raw])
    if abs(lams[0].imag) > tol_cluster * scale:
        raise DominanceViolation(f"leading eigenvalue {lams[0]:.6g} is not real")
    if len(lams) > 1 and lams[1].real >= lams[0].real - tol_cluster * scale:
        raise DominanceViolation(
            f"leading real part {lams[0].real:.6g} is not strictly dominant "
            f"(next {lams[1]:.6g})"
        )
    lams[0] = complex(lams[0].real, 0.0)

    labels, cols = [], []
    for i, (_, chains) in enumerate(raw):
        depth = len(chains[0])
        for j in range(depth):
            for k, ch in enumerate(chains):
                if len(ch) > j:
                    labels.append((i, j, k))
                    cols.append(ch[j])
    V = np.array(cols, dtype=complex).T
    if V.shape != (n, n):
        raise IllConditioned(f"found {V.shape[1]} generalised eigenvectors for n = {n}")
    try:
        W = np.linalg.inv(V)
    except np.linalg.LinAlgError as exc:
        raise IllConditioned("generalised eigenvectors are linearly dependent") from exc
    Jm = np.zeros((n, n), dtype=complex)
    pos = {lab: c for c, lab in enumerate(labels)}
    for c, (i, j, k) in enumerate(labels):
        Jm[c, c] = lams[i]
        if j > 0:
            Jm[pos[(i, j - 1, k)], c] = 1.0
    Nil = Jm - np.diag(np.diag(Jm))
    biorth = np.max(np.abs(W @ V - np.eye(n)))
    recon = np.max(np.abs(V @ Jm @ W - A)) / scale
    if biorth > BIORTH_TOL or recon > BIORTH_TOL:
        raise IllConditioned(
            f"Jordan data inaccurate: biorthogonality {biorth:.3g}, reconstruction {recon:.3g}"
        )
    nilpotent = V @ Nil @ W
    for arr in (lams, V, W, nilpotent, Jm):
        arr.setflags(write=False)
    return SpectralDecomposition(lams, V, W, tuple(labels), nilpotent, Jm, source)


def decompose_model(model, **kwargs) -> SpectralDecomposition:
    from .model import mean_matrix

    return decompose(mean_matrix(model), jordan=model.jordan, **kwargs)


# -- regimes and function profiles ------------------------------------------


@dataclass(frozen=True)
class RegimeClassification:
    tags: tuple[str, ...]
    tau: int | None
    tol_regime: float = TOL_REGIME

    def indices(self, tag: str) -> list[int]:
        return [i for i, t in enumerate(self.tags) if t == tag]


def classify_regimes(dec: SpectralDecomposition, tol_regime: float = TOL_REGIME) -> RegimeClassification:
    lam1 = dec.lambda1
    tags = []
    for lam in dec.eigenvalues:
        d = 2.0 * lam.real - lam1
        tags.append("critical" if abs(d) <= tol_regime else ("large" if d > 0 else "small"))
    tau = next((i for i, t in enumerate(tags) if t == "small"), None)
    return RegimeClassification(tuple(tags), tau, tol_regime)


@dataclass(frozen=True, eq=False)
class FunctionProfile:
    f: np.ndarray
    coefficients: np.ndarray
    support: tuple[bool, ...]
    nu: int | None
    lam: complex | None
    p: int | None
    in_large: bool
    in_critical: bool
    in_small: bool

    @property
    def regime(self) -> str | None:
        if self.in_large:
            return "large"
        if self.in_critical:
            return "critical"
        if self.in_small:
            return "small"
        return None

    def in_eigenspace(self, i: int) -> bool:
        """Membership in ``Ei*(lambda_i)``: some chain coefficient is non-zero."""
        return self.support[i]

    def in_kernel(self, ell: int) -> bool:
        """``f`` is annihilated by every dual of eigenvalues ``0..ell``."""
        return not any(self.support[: ell + 1])


def classify_function(
    dec: SpectralDecomposition,
    reg: RegimeClassification,
    f,
    tol_member: float = TOL_MEMBER,
) -> FunctionProfile:
    """Spectral profile of ``f``; thresholds are relative to ``sup|f|``."""
    f = np.asarray(f, dtype=complex)
    coeffs = dec.coefficients(f)
    scale = float(np.max(np.abs(f))) if f.size else 0.0
    rel = np.abs(coeffs) / scale if scale > 0 else np.zeros(len(coeffs))
    amb = (rel > tol_member) & (rel < 10 * tol_member)
    if np.any(amb):
        raise AmbiguousMembership(
            f"coefficients {rel[amb]} sit between {tol_member:g} and {10 * tol_member:g}; perturb f"
        )
    nonzero = rel >= 10 * tol_member
    support = tuple(bool(np.any(nonzero[dec.columns(i)])) for i in range(dec.m))
    nu = None
    for i in range(dec.m):
        if not support[i]:
            continue
        rivals = [
            j
            for j in range(dec.m)
            if j != i
            and support[j]
            and dec.eigenvalues[j].real >= dec.eigenvalues[i].real - reg.tol_regime
        ]
        if not rivals:
            nu = i
        break
    lam = p = None
    if nu is not None:
        lam = complex(dec.eigenvalues[nu])
        p = 1 + max(dec.labels[c][1] for c in dec.columns(nu) if nonzero[c])
    in_large = nu is not None and reg.tags[nu] == "large"
    in_critical = nu is not None and reg.tags[nu] == "critical"
    in_small = reg.tau is not None and not any(support[: reg.tau])
    return FunctionProfile(f, coeffs, support, nu, lam, p, in_large, in_critical, in_small)


@dataclass(frozen=True, eq=False)
class TupleProfile:
    profiles: tuple[FunctionProfile, ...]
    lam_sum: complex | None
    p_sum: int | None
    fstar: np.ndarray | None
    conjugate: bool


def is_conjugate_tuple(lams: Sequence[complex], tol: float = TOL_REGIME) -> bool:
    """Whether ``lams`` splits into pairs ``(a, b)`` with ``a == conj(b)``."""
    lams = list(lams)
    if len(lams) % 2:
        return False
    remaining = lams[:]
    while remaining:
        a = remaining.pop(0)
        for idx, b in enumerate(remaining):
            if abs(a - np.conj(b)) <= tol:
                remaining.pop(idx)
                break
        else:
            return False
    return True


def tuple_profile(dec: SpectralDecomposition, profiles: Sequence[FunctionProfile]) -> TupleProfile:
    profiles = tuple(profiles)
    if all(pr.nu is not None for pr in profiles):
        lam_sum = complex(sum(pr.lam for pr in profiles))
        p_sum = int(sum(pr.p for pr in profiles))
        fstar = np.array([dec.nil_power(pr.p - 1, pr.f) for pr in profiles])
        conj = is_conjugate_tuple([pr.lam for pr in profiles])
    else:
        lam_sum = p_sum = fstar = None
        conj = False
    return TupleProfile(profiles, lam_sum, p_sum, fstar, conj)


def leading_coefficient(p: int) -> float:
    """``1/(p-1)!``: coefficient of ``t^{p-1} N^{p-1}`` in ``e^{N t}``."""
    return 1.0 / factorial(p - 1)


def semigroup_expm(A, t: float) -> np.ndarray:
    """Independent ``e^{tA}`` (Pade scaling and squaring)."""
    return scipy.linalg.expm(t * np.asarray(A, dtype=float))
