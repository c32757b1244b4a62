"""Limit functionals of the normalised moments in the three regimes.

All improper integrals go through :func:`improper_integral`, which
truncates at a horizon derived from an exponential-polynomial envelope
and integrates with composite Gauss-Legendre panels.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from math import factorial, gamma as gamma_fn
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaincc

from .errors import NonDecaying, NotInRegime
from .model import BmpModel, mean_matrix
from .moments import gauss_legendre_nodes, product_of, zeta_states
from .spectral import (
    FunctionProfile,
    RegimeClassification,
    SpectralDecomposition,
    classify_function,
    classify_regimes,
    is_conjugate_tuple,
)

QUAD_TOL = 1e-10
GL_ORDER = 16
MAX_PANELS = 4096
DAMPING_NOTE = "exp(-lambda1*|A|*s/2)"


@dataclass
class IntegralResult:
    value: np.ndarray
    error: float
    horizon: float
    tail_bound: float
    panels: int


def _tail(C: float, eps: float, q: float, T: float) -> float:
    """``C * int_T^inf e^{-eps s} (1+s)^q ds`` in closed form."""
    if C == 0.0:
        return 0.0
    a = q + 1.0
    return C * np.exp(eps) * eps ** (-a) * gamma_fn(a) * gammaincc(a, eps * (1.0 + T))


def improper_integral(
    integrand: Callable[[np.ndarray], np.ndarray],
    decay_rate: float,
    poly_degree: float,
    quad_tol: float = QUAD_TOL,
    order: int = GL_ORDER,
) -> IntegralResult:
    """Integrate ``integrand`` over ``[0, inf)``.

    ``integrand`` maps an array of ``S`` nodes to an array of shape
    ``(S, ...)``.  It must be bounded by ``C e^{-eps s}(1+s)^q``; ``C`` is
    estimated on ``[0, 1]`` and doubled.
    """
    eps, q = float(decay_rate), float(poly_degree)
    if eps <= 0:
        raise ValueError(f"decay rate must be positive, got {eps}")
    probe = np.linspace(0.0, 1.0, 9)
    vals = np.asarray(integrand(probe))
    env = np.exp(-eps * probe) * (1.0 + probe) ** q
    mags = np.abs(vals).reshape(len(probe), -1).max(axis=1) if vals.size else np.zeros(len(probe))
    C = 2.0 * float(np.max(mags / env))
    shape = vals.shape[1:]
    if C == 0.0:
        return IntegralResult(np.zeros(shape, dtype=complex), 0.0, 0.0, 0.0, 0)

    T = 1.0
    while _tail(C, eps, q, T) >= quad_tol / 2:
        T *= 2.0
        if T > 1e6:
            raise NonDecaying("no finite horizon meets the tail tolerance")
    lo, hi = T / 2.0, T
    while hi - lo > 0.01 * hi:
        mid = 0.5 * (lo + hi)
        if _tail(C, eps, q, mid) < quad_tol / 2:
            hi = mid
        else:
            lo = mid
    T = hi
    at_T = np.abs(np.asarray(integrand(np.array([T])))).max()
    bound_T = C * np.exp(-eps * T) * (1.0 + T) ** q
    if at_T > 10.0 * bound_T:
        raise NonDecaying(f"|integrand(T={T:.4g})| = {at_T:.3g} exceeds 10x envelope {bound_T:.3g}")
    tail = _tail(C, eps, q, T)

    def quad(panels):
        nodes, weights = gauss_legendre_nodes(0.0, T, panels, order)
        g = np.asarray(integrand(nodes))
        return np.tensordot(weights, g, axes=(0, 0))

    panels = max(2, int(np.ceil(T * max(eps, 1.0) / 2.0)))
    prev = quad(panels)
    while True:
        panels *= 2
        cur = quad(panels)
        err = float(np.max(np.abs(cur - prev))) if np.size(cur) else 0.0
        if err < quad_tol / 2 or panels >= MAX_PANELS:
            break
        prev = cur
    return IntegralResult(np.asarray(cur, dtype=complex), err + tail, T, tail, panels)


@dataclass
class LimitTable:
    """Limit vectors ``values[mask]`` for every non-empty subset of the tuple."""

    fs: np.ndarray
    regime: str
    values: dict[int, np.ndarray]
    horizon: float = 0.0
    err_estimate: float = 0.0
    tail_bound: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def full(self) -> int:
        return (1 << self.fs.shape[0]) - 1

    def __getitem__(self, A) -> np.ndarray:
        mask = A if isinstance(A, (int, np.integer)) else sum(1 << i for i in A)
        return self.values[mask]

    @property
    def top(self) -> np.ndarray:
        return self.values[self.full]

    def _record(self, res: IntegralResult) -> None:
        self.horizon = max(self.horizon, res.horizon)
        self.err_estimate += res.error
        self.tail_bound += res.tail_bound

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["subset_mask", "state", "re", "im", "T", "err_estimate"])
            for mask in sorted(self.values):
                for x, v in enumerate(self.values[mask]):
                    w.writerow(
                        [mask, x, repr(float(v.real)), repr(float(v.imag)),
                         repr(float(self.horizon)), repr(float(self.err_estimate))]
                    )


class _Context:
    def __init__(self, model, dec, fs, reg, tol_member):
        self.model = model
        self.dec = dec
        self.reg = reg if reg is not None else classify_regimes(dec)
        self.fs = np.atleast_2d(np.asarray(fs, dtype=complex))
        if self.fs.shape[1] != model.n:
            raise ValueError("test functions do not match the model's state count")
        self.A = mean_matrix(model)
        self.gamma = model.gamma
        self.profiles: list[FunctionProfile] = [
            classify_function(dec, self.reg, f, tol_member) for f in self.fs
        ]

    @property
    def ell(self) -> int:
        return self.fs.shape[0]

    def propagate(self, s: np.ndarray, h: np.ndarray) -> np.ndarray:
        """``e^{sA} h`` per node; ``h`` has shape ``(S, n)``."""
        return self.dec.propagate_batch(s, h)


def _labels(mask: int) -> list[int]:
    return [i for i in range(mask.bit_length()) if mask >> i & 1]


def _submasks(full: int):
    return sorted(range(1, full + 1), key=lambda m: (bin(m).count("1"), m))


# -- large regime -----------------------------------------------------------


def limit_large(
    model: BmpModel,
    dec: SpectralDecomposition,
    fs: Sequence,
    reg: RegimeClassification | None = None,
    quad_tol: float = QUAD_TOL,
    tol_member: float = 1e-9,
) -> LimitTable:
    """Limits of the twisted moments for functions in the large class.

    ``L_A[f] = int_0^inf e^{-lam(f, A) s} psi_s[gamma zeta_A[L.[e^{-Ns} f]]] ds``.
    The inner arguments are expanded exactly: ``e^{-Ns} f_i`` is a
    polynomial in ``s`` with coefficients ``N^r f_i``, so every inner
    functional is a finite combination of ``L_B[(N^{r_i} f_i)]``.
    """
    ctx = _Context(model, dec, fs, reg, tol_member)
    for i, pr in enumerate(ctx.profiles):
        if not pr.in_large:
            raise NotInRegime(f"f[{i}] is not in the large-eigenvalue class")
    ell, n = ctx.ell, model.n
    lam = [pr.lam for pr in ctx.profiles]
    nus = [pr.nu for pr in ctx.profiles]
    P = dec.max_depth
    lam1, p1 = dec.lambda1, dec.p1
    nil_f = {(i, r): dec.nil_power(r, ctx.fs[i]) for i in range(ell) for r in range(P)}
    memo: dict[tuple[int, tuple[int, ...]], np.ndarray] = {}
    table = LimitTable(ctx.fs, "large", {}, meta={"damping": "exp(-lambda(f,A)*s)"})

    def key_r(mask, r):
        return tuple(r[i] if mask >> i & 1 else 0 for i in range(ell))

    def L(mask: int, r: tuple[int, ...]) -> np.ndarray:
        r = key_r(mask, r)
        if (mask, r) in memo:
            return memo[(mask, r)]
        labs = _labels(mask)
        if any(r[i] >= P for i in labs):
            val = np.zeros(n, dtype=complex)
        elif len(labs) == 1:
            i = labs[0]
            val = dec.phi_sum(nus[i], nil_f[(i, r[i])])
        else:
            val = _large_integral(mask, r)
        memo[(mask, r)] = val
        return val

    def twisted_block(mask: int, r: tuple[int, ...], s: np.ndarray) -> np.ndarray:
        """``L_mask[(e^{-Ns} N^{r_i} f_i)]`` at each node."""
        labs = _labels(mask)
        out = np.zeros((len(s), n), dtype=complex)
        for extra in itertools.product(range(P), repeat=len(labs)):
            rr = list(r)
            coef = np.ones(len(s))
            for i, e in zip(labs, extra):
                rr[i] += e
                coef = coef * (-s) ** e / factorial(e)
            if any(rr[i] >= P for i in labs):
                continue
            v = L(mask, tuple(rr))
            if np.any(v):
                out += coef[:, None] * v[None, :]
        return out

    def _large_integral(mask: int, r: tuple[int, ...]) -> np.ndarray:
        labs = _labels(mask)
        lam_A = sum(lam[i] for i in labs)
        eps = lam_A.real - lam1
        if eps <= 0:
            raise NotInRegime(f"non-positive gap {eps:.3g} for subset {labs}; classification bug")
        subs = [m for m in range(1, mask) if m & mask == m]

        def integrand(s):
            s = np.asarray(s, dtype=float)
            blocks = {m: twisted_block(m, r, s) for m in subs}
            forcing = ctx.gamma * zeta_states(model, mask, blocks)
            return np.exp(-lam_A * s)[:, None] * ctx.propagate(s, forcing)

        q = (p1 - 1) + len(labs) * (P - 1)
        res = improper_integral(integrand, eps, q, quad_tol)
        table._record(res)
        return res.value

    zero = (0,) * ell
    for mask in _submasks((1 << ell) - 1):
        table.values[mask] = L(mask, zero)
    return table


def large_theorem_limit(dec: SpectralDecomposition, profiles, ltable_star: LimitTable) -> np.ndarray:
    """Limit of ``e^{-lam t} (1+t)^{-(p-ell)} psi_t^(ell)[f]`` from the table built on ``f*``.

    Equals ``L[f*] / prod_j (p(f_j)-1)!``.
    """
    div = 1.0
    for pr in profiles:
        div *= factorial(pr.p - 1)
    return ltable_star.top / div


# -- small regime -----------------------------------------------------------


def _small_context(model, dec, fs, reg, tol_member):
    ctx = _Context(model, dec, fs, reg, tol_member)
    if ctx.reg.tau is None:
        raise NotInRegime("the mean matrix has no small eigenvalues")
    for i, pr in enumerate(ctx.profiles):
        if not pr.in_small:
            raise NotInRegime(f"f[{i}] is not in the small-eigenvalue kernel class")
    return ctx


def _small_gap(dec, reg) -> float:
    return dec.lambda1 - 2.0 * dec.eigenvalues[reg.tau].real


def limit_small(
    model: BmpModel,
    dec: SpectralDecomposition,
    fs: Sequence,
    reg: RegimeClassification | None = None,
    quad_tol: float = QUAD_TOL,
    tol_member: float = 1e-9,
    convention: str = "consistent",
) -> LimitTable:
    """Limits of ``e^{-ell lam1 t/2} (1+t)^{-ell(p1-1)/2} psi_t^(ell)`` for the small class.

    ``convention="consistent"`` scales the pair limit by ``1/(p1-1)!`` (the
    leading coefficient of ``e^{Nt}``); ``"as-printed"`` uses ``(p1-1)!``.
    Both agree when ``p1 == 1``.
    """
    ctx = _small_context(model, dec, fs, reg, tol_member)
    ell, n = ctx.ell, model.n
    lam1, p1 = dec.lambda1, dec.p1
    if convention == "consistent":
        cp = 1.0 / factorial(p1 - 1)
    elif convention == "as-printed":
        cp = float(factorial(p1 - 1))
    else:
        raise ValueError(f"unknown convention {convention!r}")
    proj = dec.projector(0, 0)
    eps = _small_gap(dec, ctx.reg)
    P = dec.max_depth
    table = LimitTable(
        ctx.fs, "small", {}, meta={"damping": DAMPING_NOTE, "pair_factor": convention}
    )
    for mask in _submasks((1 << ell) - 1):
        labs = _labels(mask)
        if len(labs) % 2:
            table.values[mask] = np.zeros(n, dtype=complex)
            continue
        if len(labs) == 2:
            a, b = labs
            head = cp * (proj @ dec.nil_power(p1 - 1, ctx.fs[a] * ctx.fs[b]))

            def integrand(s, a=a, b=b):
                s = np.asarray(s, dtype=float)
                psi_a = ctx.propagate(s, np.broadcast_to(ctx.fs[a], (len(s), n)))
                psi_b = ctx.propagate(s, np.broadcast_to(ctx.fs[b], (len(s), n)))
                blocks = {1 << a: psi_a, 1 << b: psi_b}
                forcing = ctx.gamma * zeta_states(model, mask, blocks)
                pushed = forcing @ np.linalg.matrix_power(dec.nilpotent, p1 - 1).T @ proj.T
                return np.exp(-lam1 * s)[:, None] * pushed

            res = improper_integral(integrand, eps, 2 * (P - 1), quad_tol)
            table._record(res)
            table.values[mask] = head + cp * res.value
        else:
            table.values[mask] = _even_recursion(ctx, table, mask, quad_tol)
    return table


def _even_recursion(ctx: _Context, table: LimitTable, mask: int, quad_tol: float) -> np.ndarray:
    """``int e^{-lam1 |A| s/2} psi_s[gamma zeta_A[L]] ds`` over even-block partitions."""
    labs = _labels(mask)
    lam1 = ctx.dec.lambda1
    damp = lam1 * len(labs) / 2.0
    subs = {
        m: table.values[m]
        for m in range(1, mask)
        if m & mask == m and bin(m).count("1") % 2 == 0 and np.any(table.values[m])
    }
    if not subs:
        return np.zeros(ctx.model.n, dtype=complex)
    forcing = ctx.gamma * zeta_states(ctx.model, mask, subs)

    def integrand(s):
        s = np.asarray(s, dtype=float)
        h = np.broadcast_to(forcing, (len(s), ctx.model.n))
        return np.exp(-damp * s)[:, None] * ctx.propagate(s, h)

    res = improper_integral(integrand, damp - lam1, ctx.dec.p1 - 1, quad_tol)
    table._record(res)
    return res.value


def even_recursion_resolvent(model, dec, table: LimitTable, mask: int) -> np.ndarray:
    """Closed form of the even recursion: ``(lam1|A|/2 - A)^{-1} gamma zeta_A[L]``."""
    labs = _labels(mask)
    damp = dec.lambda1 * len(labs) / 2.0
    subs = {
        m: table.values[m]
        for m in range(1, mask)
        if m & mask == m and bin(m).count("1") % 2 == 0 and np.any(table.values[m])
    }
    if not subs:
        return np.zeros(model.n, dtype=complex)
    forcing = model.gamma * zeta_states(model, mask, subs)
    return np.linalg.solve(damp * np.eye(model.n) - mean_matrix(model), forcing)


def limit_small_star(
    model: BmpModel,
    dec: SpectralDecomposition,
    fs: Sequence,
    reg: RegimeClassification | None = None,
    quad_tol: float = QUAD_TOL,
    tol_member: float = 1e-9,
) -> np.ndarray:
    """Operator-normalised pair limit of ``e^{-(lam1 + N) t} psi_t^(2)[f]``.

    ``Phi_1[f1 f2] + int_0^inf e^{-(lam1 + N) s} Phi_1[gamma zeta[psi_s f]] ds``.
    """
    ctx = _small_context(model, dec, fs, reg, tol_member)
    if ctx.ell != 2:
        raise ValueError("the operator-normalised limit is defined for pairs")
    n = model.n
    lam1 = dec.lambda1
    proj = dec.projector(0)
    f1, f2 = ctx.fs
    eps = _small_gap(dec, ctx.reg)
    P = dec.max_depth

    def integrand(s):
        s = np.asarray(s, dtype=float)
        blocks = {
            1: ctx.propagate(s, np.broadcast_to(f1, (len(s), n))),
            2: ctx.propagate(s, np.broadcast_to(f2, (len(s), n))),
        }
        h = (ctx.gamma * zeta_states(model, 3, blocks)) @ proj.T
        out = np.empty_like(h)
        for g, sg in enumerate(s):
            out[g] = np.exp(-lam1 * sg) * dec.exp_nilpotent(-sg, h[g])
        return out

    res = improper_integral(integrand, eps, 2 * (P - 1) + dec.p1 - 1, quad_tol)
    return proj @ (f1 * f2) + res.value


# -- critical regime --------------------------------------------------------


def limit_critical(
    model: BmpModel,
    dec: SpectralDecomposition,
    fs: Sequence,
    alpha: int = 0,
    reg: RegimeClassification | None = None,
    quad_tol: float = QUAD_TOL,
    tol_member: float = 1e-9,
) -> LimitTable:
    """Limits of the normalised moments for the critical class.

    Pairs use the closed form with the ``alpha``-dependent factorial
    ``(p1 + p(f) - alpha - 2)!``; larger even conjugate subsets use the
    damped recursion; everything else is zero.
    """
    ctx = _Context(model, dec, fs, reg, tol_member)
    for i, pr in enumerate(ctx.profiles):
        if not pr.in_critical:
            raise NotInRegime(f"f[{i}] is not in the critical-eigenvalue class")
    p1 = dec.p1
    if not 0 <= alpha <= p1 - 1:
        raise ValueError(f"alpha must lie in [0, {p1 - 1}], got {alpha}")
    ell, n = ctx.ell, model.n
    prof = ctx.profiles
    proj = dec.projector(0, 0)
    nil_top = np.linalg.matrix_power(dec.nilpotent, p1 - 1)
    table = LimitTable(ctx.fs, "critical", {}, meta={"damping": DAMPING_NOTE, "alpha": alpha})
    for mask in _submasks((1 << ell) - 1):
        labs = _labels(mask)
        conj = len(labs) % 2 == 0 and is_conjugate_tuple([prof[i].lam for i in labs])
        if not conj:
            table.values[mask] = np.zeros(n, dtype=complex)
        elif len(labs) == 2:
            a, b = labs
            stars = {
                1 << i: dec.projector(prof[i].nu, 0) @ dec.nil_power(prof[i].p - 1, ctx.fs[i])
                for i in labs
            }
            h = ctx.gamma * zeta_states(model, mask, stars)
            p_sum = prof[a].p + prof[b].p
            factor = factorial(p_sum - 2) / (
                factorial(prof[a].p - 1) * factorial(prof[b].p - 1) * factorial(p1 + p_sum - alpha - 2)
            )
            table.values[mask] = factor * (proj @ (nil_top @ h))
        else:
            table.values[mask] = _even_recursion(ctx, table, mask, quad_tol)
    return table


def critical_exponent(dec: SpectralDecomposition, profiles, alpha: int = 0) -> int:
    """Polynomial normalisation power ``p(f) + p1 - alpha - 2`` for pairs."""
    return sum(pr.p for pr in profiles) + dec.p1 - alpha - 2
