"""Exact product moments of the branching process.

The ``k``-th product moment satisfies the evolution equation

    psi_t^(k)[f] = psi_t[f_1...f_k] + int_0^t psi_{t-s}[gamma zeta_[k][psi_s^(.)[f]]] ds,

which, differentiated in ``t``, becomes the linear inhomogeneous ODE
``d/dt psi^(B) = A psi^(B) + gamma zeta_B[psi^(.)]`` for every subset
``B``.  Singletons are evaluated exactly through the semigroup (in
Jordan coordinates when the decomposition succeeds); every larger subset
is integrated as one coupled system after rescaling by its growth bound.  ``zeta_B`` only reads strictly
smaller subsets, so the forcing is always current.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .model import BmpModel, mean_matrix
from .partitions import enumerate_partitions, mask_partitions  # noqa: F401  (re-export)

MAX_ORDER = 6
ODE_METHOD = "RK45"
# The integrated variables are moments divided by their growth bound
# e^{c_B t}; before the asymptotic regime a moment can sit orders of
# magnitude below that bound, so the absolute tolerance is tightened to keep
# the error small relative to the moment itself.
ATOL_FACTOR = 1e-3


def zeta_states(model: BmpModel, mask: int, blocks: Mapping[int, np.ndarray]) -> np.ndarray:
    """Partition operator for every state at once.

    ``blocks`` maps block bit masks to arrays of shape ``(..., n)``;
    leading axes broadcast (e.g. time nodes).  A partition with a block
    missing from ``blocks`` is treated as contributing zero.
    """
    out = None
    for sigma in mask_partitions(mask):
        if len(sigma) > model.max_offspring:
            continue
        if any(b not in blocks for b in sigma):
            continue
        _, _, children, scatter = model.injective_table(len(sigma))
        if children.shape[0] == 0:
            continue
        prod = blocks[sigma[0]][..., children[:, 0]]
        for j in range(1, len(sigma)):
            prod = prod * blocks[sigma[j]][..., children[:, j]]
        term = prod @ scatter.T
        out = term if out is None else out + term
    if out is None:
        shape = next(iter(blocks.values())).shape if blocks else (model.n,)
        return np.zeros(shape, dtype=complex)
    return out


def _subset_order(k: int) -> list[int]:
    return sorted(range(1, 1 << k), key=lambda m: (bin(m).count("1"), m))


def product_of(fs: np.ndarray, mask: int) -> np.ndarray:
    out = np.ones(fs.shape[1], dtype=complex)
    for i in range(fs.shape[0]):
        if mask >> i & 1:
            out = out * fs[i]
    return out


@dataclass
class MomentTable:
    """``values[g, mask]`` is the moment vector for subset ``mask`` at ``times[g]``.

    ``mask == 0`` holds the empty product (identically one).
    """

    times: np.ndarray
    fs: np.ndarray
    values: np.ndarray
    rtol: float = 1e-9
    atol: float = 1e-9
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.fs.shape[0]

    @property
    def full(self) -> int:
        return (1 << self.k) - 1

    def subset(self, A) -> np.ndarray:
        """Moment vectors over the time grid for subset ``A`` (mask or indices)."""
        mask = A if isinstance(A, (int, np.integer)) else sum(1 << i for i in A)
        return self.values[:, mask, :]

    def at(self, t: float, A=None) -> np.ndarray:
        g = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[g] - t) > 1e-12 * max(1.0, abs(t)):
            raise KeyError(f"time {t} is not on the grid")
        return self.subset(self.full if A is None else A)[g]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "subset_mask", "state", "re", "im"])
            for g, t in enumerate(self.times):
                for mask in range(1, 1 << self.k):
                    for x, v in enumerate(self.values[g, mask]):
                        w.writerow([repr(float(t)), mask, x, repr(float(v.real)), repr(float(v.imag))])


def _singleton_data(model: BmpModel, F: np.ndarray, A: np.ndarray):
    """Scaled propagator ``t -> e^{-r t} e^{tA} f`` for the rows of ``F``, and the rates ``r``.

    Jordan coordinates are used when the decomposition succeeds; the rate
    of a row is then the largest real part among its supported clusters.
    """
    from .errors import NumericalFailure
    from .spectral import COEFF_FLOOR, decompose_model

    try:
        dec = decompose_model(model)
    except NumericalFailure:
        top = float(np.max(np.linalg.eigvals(A).real))
        return (lambda t: np.exp(-top * t) * (F @ expm(t * A).T)), np.full(F.shape[0], top), top
    C = F @ dec.W.T
    lam_col = np.array([dec.eigenvalues[lab[0]].real for lab in dec.labels])
    rates = []
    for c in np.abs(C):
        live = c > COEFF_FLOOR * max(float(c.max()), 1e-300)
        rates.append(float(lam_col[live].max()) if live.any() else dec.lambda1)
    rates = np.array(rates)
    return dec.row_propagator(F, shift=rates), rates, dec.lambda1


def growth_rates(k: int, single: Sequence[float], lambda1: float) -> dict[int, float]:
    """Exponential growth bound ``c_B`` for every subset.

    ``c_B = max(lambda1, max over proper partitions of sum of block rates)``,
    which bounds the free term and the convolution with the forcing.
    """
    rates = {1 << i: float(single[i]) for i in range(k)}
    for m in _subset_order(k):
        if m & (m - 1):
            best = lambda1
            for sigma in mask_partitions(m):
                best = max(best, sum(rates[b] for b in sigma))
            rates[m] = best
    return rates


def _check_grid(grid) -> np.ndarray:
    times = np.asarray(grid, dtype=float)
    if times.ndim != 1 or times.size == 0 or np.any(times < 0) or np.any(np.diff(times) <= 0):
        raise ValueError("grid must be strictly increasing and non-negative")
    return times


def moment_hierarchy_batch(
    model: BmpModel,
    batch,
    grid: Sequence[float],
    rtol: float = 1e-9,
    atol: float = 1e-9,
    max_order: int = MAX_ORDER,
) -> np.ndarray:
    """Moment tables for a batch of tuples solved as one system.

    ``batch`` has shape ``(B, k, n)``; the result has shape
    ``(B, len(grid), 2**k, n)`` with the layout of :class:`MomentTable`.

    Subsets of size two and more are integrated with an adaptive
    Runge-Kutta 5(4) scheme in the rescaled variables
    ``e^{-c_B t} psi^(B)``, where ``c_B`` is the subset's growth bound, so
    ``atol`` is measured on the natural scale of each moment.  Singletons
    are exact.
    """
    batch = np.asarray(batch, dtype=complex)
    if batch.ndim != 3:
        raise ValueError("batch must have shape (B, k, n)")
    B, k, n = batch.shape
    if n != model.n:
        raise ValueError(f"test functions have length {n}, model has {model.n} states")
    if k > max_order:
        raise ValueError(f"order {k} exceeds the cap {max_order}")
    times = _check_grid(grid)
    A = mean_matrix(model)
    gamma = model.gamma
    # Singletons come from the exact semigroup: integrating them would let
    # round-off seed the dominant mode and swamp subdominant eigenfunctions.
    scaled, single_rates, lambda1 = _singleton_data(model, batch.reshape(B * k, n), A)
    single_rates = single_rates.reshape(B, k)
    singles = [1 << i for i in range(k)]
    order = [m for m in _subset_order(k) if m & (m - 1)]
    S = len(order)
    c = np.empty((S, B))
    # excess of c_B over the additive rate sum_{i in B} r_i; partition
    # products then only ever see these small exponents
    excess = np.empty((S, B))
    for b in range(B):
        rates = growth_rates(k, single_rates[b], lambda1)
        c[:, b] = [rates[m] for m in order]
        excess[:, b] = [rates[m] - sum(single_rates[b, i] for i in range(k) if m >> i & 1) for m in order]
    y0 = np.array([[product_of(batch[b], m) for b in range(B)] for m in order]).reshape(-1)
    # psi^(B) is multilinear in the f_i, so the absolute tolerance of each
    # subset scales with prod ||f_i||; error control is then scale-equivariant
    sup = np.abs(batch).max(axis=2)  # (B, k)
    sup = np.where(sup > 0, sup, 1.0)
    weight = np.ones((S, B))
    for s_idx, m in enumerate(order):
        weight[s_idx] = np.prod(sup[:, [i for i in range(k) if m >> i & 1]], axis=1)
    atol_vec = np.repeat(ATOL_FACTOR * atol * weight[..., None], n, axis=2).reshape(-1)

    def singletons(t):
        return scaled(t).reshape(B, k, n)

    def rhs(t, y):
        z = y.reshape(S, B, n)
        dy = z @ A.T - c[..., None] * z
        lin = singletons(t)
        blocks = {m: lin[:, i] for i, m in enumerate(singles)}
        grow = np.exp(excess * t)[..., None]
        for i, m in enumerate(order):
            blocks[m] = grow[i] * z[i]
            dy[i] = dy[i] + (gamma * zeta_states(model, m, blocks)) / grow[i]
        return dy.reshape(-1)

    t_end = float(times[-1])
    values = np.empty((B, len(times), 1 << k, n), dtype=complex)
    values[:, :, 0, :] = 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        for g, t in enumerate(times):
            values[:, g, singles, :] = np.exp(single_rates * t)[..., None] * singletons(float(t))
        if order:
            if t_end == 0.0:
                sol_y = y0[:, None]
            else:
                sol = solve_ivp(
                    rhs, (0.0, t_end), y0, method=ODE_METHOD, t_eval=times, rtol=rtol, atol=atol_vec
                )
                if not sol.success:
                    raise FloatingPointError(f"moment integration failed: {sol.message}")
                sol_y = sol.y
            z = sol_y.reshape(S, B, n, len(times))
            for i, m in enumerate(order):
                scale = np.exp(c[i][:, None] * times[None, :])  # (B, G)
                values[:, :, m, :] = scale[..., None] * np.transpose(z[i], (0, 2, 1))
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("moment values exceed the floating-point range on this grid")
    return values


def moment_hierarchy(
    model: BmpModel,
    fs: Sequence,
    grid: Sequence[float],
    rtol: float = 1e-9,
    atol: float = 1e-9,
    max_order: int = MAX_ORDER,
) -> MomentTable:
    """Solve the moment hierarchy for ``fs`` on the time grid ``grid``.

    See :func:`moment_hierarchy_batch` for the scheme.
    """
    fs = np.atleast_2d(np.asarray(fs, dtype=complex))
    values = moment_hierarchy_batch(model, fs[None], grid, rtol, atol, max_order)[0]
    times = _check_grid(grid)
    k = fs.shape[0]
    A = mean_matrix(model)
    _, single_rates, lambda1 = _singleton_data(model, fs, A)
    rates = growth_rates(k, single_rates, lambda1)
    meta = {"method": ODE_METHOD, "growth_rates": {int(m): rates[m] for m in rates if m & (m - 1)}}
    return MomentTable(times, fs, values, rtol, atol, meta=meta)


def gauss_legendre_nodes(a: float, b: float, panels: int, order: int = 16):
    """Composite Gauss-Legendre nodes and weights on ``[a, b]``."""
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).reshape(-1)
    weights = (half[:, None] * w[None, :]).reshape(-1)
    return nodes, weights


def duhamel_integral(
    model: BmpModel,
    fs: Sequence,
    t: float,
    quad_points: int = 64,
    orientation: str = "forward",
    rtol: float = 1e-11,
    atol: float = 1e-11,
) -> np.ndarray:
    """Right-hand side of the evolution equation for the full subset at time ``t``.

    ``orientation="forward"`` integrates ``psi_{t-s}[gamma zeta[psi_s]]``;
    ``"reverse"`` integrates ``psi_s[gamma zeta[psi_{t-s}]]``.  Lower-order
    moments at the quadrature nodes come from a separate hierarchy solve.
    """
    fs = np.atleast_2d(np.asarray(fs, dtype=complex))
    k = fs.shape[0]
    A = mean_matrix(model)
    full = (1 << k) - 1
    free = expm(t * A) @ product_of(fs, full)
    if k == 1 or t == 0.0:
        return free
    order = 16
    panels = max(1, int(np.ceil(quad_points / order)))
    nodes, weights = gauss_legendre_nodes(0.0, t, panels, order)
    inner = nodes if orientation == "forward" else t - nodes
    srt = np.argsort(inner)
    grid = np.concatenate([[0.0], inner[srt]])
    low = moment_hierarchy(model, fs, grid, rtol=rtol, atol=atol)
    vals = np.empty((len(nodes), 1 << k, model.n), dtype=complex)
    vals[srt] = low.values[1:]
    blocks = {m: vals[:, m, :] for m in range(1, full)}
    forcing = model.gamma * zeta_states(model, full, blocks)
    outer = t - nodes if orientation == "forward" else nodes
    props = expm(outer[:, None, None] * A[None, :, :])
    integrand = np.einsum("gij,gj->gi", props, forcing)
    return free + weights @ integrand


def duhamel_residual(model: BmpModel, table: MomentTable, quad_points: int = 64) -> float:
    """Scale-free deviation between the table and the integral identity.

    For each grid time the integral form is evaluated by quadrature and
    compared with the table's full-subset entry; the deviation is divided
    by ``max(1, sup|psi_t^(k)|)`` so fast-growing models are comparable.
    """
    worst = 0.0
    for g, t in enumerate(table.times):
        ref = table.values[g, table.full]
        rhs = duhamel_integral(model, table.fs, float(t), quad_points)
        scale = max(1.0, float(np.max(np.abs(ref))))
        worst = max(worst, float(np.max(np.abs(rhs - ref))) / scale)
    return worst
