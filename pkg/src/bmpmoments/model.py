"""Finite-state branching Markov process models.

A model on ``E = {0, ..., n-1}`` is given by a conservative motion
generator ``Q``, per-state branching rates ``gamma`` and, per state, a
finite offspring law: a list of atoms ``(p, children)`` where
``children`` is the multiset of offspring positions produced with
probability ``p``.  Death is the empty multiset.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import InfeasibleTarget, InvalidModel

STOCHASTIC_TOL = 1e-12
ROUNDTRIP_TOL = 1e-10


class Atom(NamedTuple):
    p: float
    children: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class BmpModel:
    """Immutable branching Markov process on a finite state space.

    ``jordan`` optionally carries an exact ``(J, V)`` pair with
    ``mean_matrix = V J V^{-1}``; the spectral module prefers it over a
    numerical Jordan form.
    """

    n: int
    Q: np.ndarray
    gamma: np.ndarray
    offspring: tuple[tuple[Atom, ...], ...]
    jordan: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float)
        gamma = np.array(self.gamma, dtype=float).reshape(-1)
        offspring = tuple(
            tuple(Atom(float(p), tuple(sorted(int(c) for c in ch))) for p, ch in law)
            for law in self.offspring
        )
        Q.setflags(write=False)
        gamma.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "offspring", offspring)
        if self.jordan is not None:
            J, V = (np.array(a, dtype=complex) for a in self.jordan)
            J.setflags(write=False)
            V.setflags(write=False)
            object.__setattr__(self, "jordan", (J, V))

    @cached_property
    def max_offspring(self) -> int:
        return max((len(a.children) for law in self.offspring for a in law), default=0)

    @cached_property
    def _injective_tables(self) -> dict:
        return {}

    def injective_table(self, b: int):
        """Aggregated injective assignments of ``b`` ordered slots to offspring.

        Returns ``(parents, weights, children)`` with ``children`` of
        shape ``(K, b)``: summing ``weights * prod_j g_j(children[:, j])``
        per parent equals ``E_x[sum_{i in B_{b,N}} prod_j g_j(x_{i_j})]``.
        """
        cache = self._injective_tables
        if b not in cache:
            acc: dict[tuple[int, ...], float] = {}
            for x, law in enumerate(self.offspring):
                for atom in law:
                    if atom.p == 0.0 or len(atom.children) < b:
                        continue
                    for idx in itertools.permutations(range(len(atom.children)), b):
                        key = (x,) + tuple(atom.children[i] for i in idx)
                        acc[key] = acc.get(key, 0.0) + atom.p
            keys = sorted(acc)
            parents = np.array([k[0] for k in keys], dtype=int)
            weights = np.array([acc[k] for k in keys], dtype=float)
            children = np.array([k[1:] for k in keys], dtype=int).reshape(len(keys), b)
            scatter = np.zeros((self.n, len(keys)))
            scatter[parents, np.arange(len(keys))] = weights
            cache[b] = (parents, weights, children, scatter)
        return cache[b]


@dataclass
class ValidationReport:
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def __bool__(self) -> bool:
        return self.ok


def validate_model(model: BmpModel) -> ValidationReport:
    """List every violated model invariant (empty report means valid)."""
    problems = []
    n = model.n
    if not isinstance(n, (int, np.integer)) or n < 1:
        return ValidationReport([f"n must be a positive integer, got {n!r}"])
    Q, gamma = model.Q, model.gamma
    if Q.shape != (n, n):
        problems.append(f"Q has shape {Q.shape}, expected {(n, n)}")
    else:
        if not np.all(np.isfinite(Q)):
            problems.append("Q has non-finite entries")
        for x in range(n):
            s = Q[x].sum()
            if abs(s) > STOCHASTIC_TOL:
                problems.append(f"Q row {x} sums to {s:.6g}, expected 0")
            off = np.delete(Q[x], x)
            if np.any(off < 0):
                problems.append(f"Q row {x} has negative off-diagonal entries")
    if gamma.shape != (n,):
        problems.append(f"gamma has shape {gamma.shape}, expected {(n,)}")
    else:
        if not np.all(np.isfinite(gamma)):
            problems.append("gamma is not finite")
        if np.any(gamma < 0):
            problems.append("gamma has negative entries")
    if len(model.offspring) != n:
        problems.append(f"offspring has {len(model.offspring)} laws, expected {n}")
    else:
        for x, law in enumerate(model.offspring):
            if not law:
                problems.append(f"state {x} has an empty offspring law")
                continue
            ps = np.array([a.p for a in law])
            if np.any(ps < 0):
                problems.append(f"state {x} has negative offspring probabilities")
            if abs(ps.sum() - 1.0) > STOCHASTIC_TOL:
                problems.append(f"state {x} offspring probabilities sum to {ps.sum():.6g}")
            for a in law:
                bad = [c for c in a.children if not 0 <= c < n]
                if bad:
                    problems.append(f"state {x} has offspring outside E: {bad}")
    return ValidationReport(problems)


def _require_valid(model: BmpModel) -> None:
    report = validate_model(model)
    if not report.ok:
        raise InvalidModel(report.problems)


def mean_offspring(model: BmpModel) -> np.ndarray:
    """``M[x, y]`` = expected number of offspring at ``y`` from a parent at ``x``."""
    M = np.zeros((model.n, model.n))
    for x, law in enumerate(model.offspring):
        for a in law:
            for c in a.children:
                M[x, c] += a.p
    return M


def mean_matrix(model: BmpModel) -> np.ndarray:
    """Generator ``A = Q + diag(gamma)(M - I)`` of the expectation semigroup."""
    _require_valid(model)
    M = mean_offspring(model)
    return model.Q + model.gamma[:, None] * (M - np.eye(model.n))


def offspring_moment_sup(model: BmpModel, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return max(sum(a.p * len(a.children) ** k for a in law) for law in model.offspring)


def sup_norm(f) -> float:
    return float(np.max(np.abs(np.asarray(f)))) if np.size(f) else 0.0


def in_unit_ball(f) -> bool:
    return sup_norm(f) <= 1.0 + STOCHASTIC_TOL


def proper_partitions(labels: Sequence) -> list[tuple[frozenset, ...]]:
    """Set partitions of ``labels`` with at least two blocks."""
    from .partitions import enumerate_partitions

    return [p for p in enumerate_partitions(labels).partitions if len(p) >= 2]


def zeta_apply(model: BmpModel, A: Iterable, g, x: int) -> complex:
    """Evaluate the offspring partition operator at state ``x`` exactly.

    ``g`` is either a callable ``g(block, y)`` or a mapping from
    ``frozenset`` blocks to length-``n`` vectors.  The sum runs over set
    partitions of ``A`` with at least two blocks and injective
    assignments of blocks to distinct offspring.
    """
    labels = tuple(A)
    if not labels:
        raise ValueError("zeta_apply needs a non-empty index set")
    if callable(g):
        gf: Callable = g
    else:
        gf = lambda block, y: g[frozenset(block)][y]  # noqa: E731
    total = 0.0 + 0.0j
    parts = proper_partitions(labels)
    for atom in model.offspring[x]:
        N = len(atom.children)
        for sigma in parts:
            if len(sigma) > N:
                continue
            acc = 0.0 + 0.0j
            for idx in itertools.permutations(range(N), len(sigma)):
                term = 1.0 + 0.0j
                for block, i in zip(sigma, idx):
                    term *= gf(block, atom.children[i])
                acc += term
            total += atom.p * acc
    return complex(total)


# -- builders ---------------------------------------------------------------


def yule(beta: float = 1.0) -> BmpModel:
    return BmpModel(1, [[0.0]], [beta], (((1.0, (0, 0)),),))


def multitype(Q, gamma, offspring) -> BmpModel:
    Q = np.asarray(Q, dtype=float)
    model = BmpModel(Q.shape[0], Q, gamma, offspring)
    _require_valid(model)
    return model


def _staircase_law(row: np.ndarray) -> tuple[Atom, ...]:
    """Offspring law with exact mean vector ``row`` (entries >= 0).

    Each state ``y`` always receives ``floor(row[y])`` children; one
    extra child goes to every ``y`` whose fractional part exceeds a
    single shared uniform variable.  Sorting the fractional parts makes
    the atoms the gaps between consecutive values, so there are at most
    ``n + 1`` of them.
    """
    base = np.floor(row + 1e-13).astype(int)
    frac = np.clip(row - base, 0.0, None)
    levels = sorted(set(frac[frac > 1e-15].tolist()) | {0.0, 1.0})
    atoms = []
    for lo, hi in zip(levels[:-1], levels[1:]):
        if hi - lo <= 0.0:
            continue
        counts = base + (frac >= hi - 1e-15).astype(int)
        children = tuple(y for y, c in enumerate(counts) for _ in range(c))
        atoms.append(Atom(hi - lo, children))
    # renormalise tiny float drift in the gap sum
    total = sum(a.p for a in atoms)
    return tuple(Atom(a.p / total, a.children) for a in atoms)


def from_mean(M, gamma, Q=None) -> BmpModel:
    """Model whose mean offspring matrix equals ``M`` wherever ``gamma > 0``.

    Rows with ``gamma == 0`` never branch; they get a deterministic
    single-child law at the parent's own state.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    Q = np.zeros((n, n)) if Q is None else np.asarray(Q, dtype=float)
    if M.shape != (n, n) or gamma.shape != (n,):
        raise ValueError("M must be n x n and gamma of length n")
    laws = []
    for x in range(n):
        if gamma[x] == 0.0:
            laws.append((Atom(1.0, (x,)),))
            continue
        if np.any(M[x] < -ROUNDTRIP_TOL):
            raise InfeasibleTarget(f"row {x} needs negative offspring means: {M[x]}")
        laws.append(_staircase_law(np.clip(M[x], 0.0, None)))
    model = BmpModel(n, Q, gamma, tuple(laws))
    _require_valid(model)
    return model


def from_jordan(J, V, gamma, Q=None) -> BmpModel:
    """Model with mean matrix ``V J V^{-1}`` (complex inputs allowed).

    Branching must account for the whole target: ``M = I + (A - Q)/gamma``.
    """
    J = np.asarray(J, dtype=complex)
    V = np.asarray(V, dtype=complex)
    n = J.shape[0]
    if abs(np.linalg.det(V)) < 1e-12 * max(1.0, np.linalg.norm(V)) ** n:
        raise InfeasibleTarget("V is singular")
    A = V @ J @ np.linalg.inv(V)
    if np.max(np.abs(A.imag)) > 1e-9 * max(1.0, np.max(np.abs(A))):
        raise InfeasibleTarget("V J V^-1 is not a real matrix")
    A = A.real
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    Q = np.zeros((n, n)) if Q is None else np.asarray(Q, dtype=float)
    if np.any(gamma <= 0):
        raise InfeasibleTarget("from_jordan needs gamma > 0 in every state")
    M = np.eye(n) + (A - Q) / gamma[:, None]
    base = from_mean(M, gamma, Q)
    return BmpModel(base.n, base.Q, base.gamma, base.offspring, jordan=(J, V))


def build_model(spec: Mapping) -> BmpModel:
    """Dispatch a builder spec ``{"kind": ..., ...}`` to the matching builder."""
    kind = spec.get("kind")
    if kind == "yule":
        return yule(spec.get("beta", 1.0))
    if kind == "multitype":
        return multitype(spec["Q"], spec["gamma"], _offspring_from_json(spec["offspring"]))
    if kind == "from_mean":
        return from_mean(spec["M"], spec["gamma"], spec.get("Q"))
    if kind == "from_jordan":
        J = _complex_matrix(spec["J"])
        V = _complex_matrix(spec["V"])
        return from_jordan(J, V, spec["gamma"], spec.get("Q"))
    if kind == "canonical":
        return canonical(spec["name"])
    raise ValueError(f"unknown builder kind {kind!r}")


def _complex_matrix(rows) -> np.ndarray:
    def conv(v):
        if isinstance(v, Mapping):
            return complex(v.get("re", 0.0), v.get("im", 0.0))
        if isinstance(v, (list, tuple)) and len(v) == 2:
            return complex(v[0], v[1])
        return complex(v)

    return np.array([[conv(v) for v in row] for row in rows], dtype=complex)


# -- canonical models used across tests and the CLI -------------------------


def jordan_block_model() -> BmpModel:
    """Two types, no motion; type 0 splits into {0, 0, 1}, type 1 into {1, 1}.

    Mean matrix is the 2x2 Jordan block with eigenvalue 1.
    """
    model = BmpModel(
        2,
        np.zeros((2, 2)),
        [1.0, 1.0],
        (((1.0, (0, 0, 1)),), ((1.0, (1, 1)),)),
        jordan=(np.array([[1.0, 1.0], [0.0, 1.0]]), np.eye(2)),
    )
    _require_valid(model)
    return model


def decoupled_model() -> BmpModel:
    """Mean matrix ``diag(2, 0.5)``: type 0 triples, type 1 (rate 2) splits w.p. 0.625 or dies."""
    return multitype(
        np.zeros((2, 2)),
        [1.0, 2.0],
        [[(1.0, (0, 0, 0))], [(0.625, (1, 1)), (0.375, ())]],
    )


def coupled_small_model() -> BmpModel:
    """Two coupled types with mean matrix [[1.5, 1], [0, 0.5]].

    The second eigenvalue is small (2 * 0.5 < 1.5).
    """
    return from_mean([[2.5, 1.0], [0.0, 1.5]], [1.0, 1.0])


ROTATION_THETA = 1.0


def rotation_model(gamma: float = 3.0) -> BmpModel:
    """Three-state cyclic model with a critical conjugate pair ``l1/2 +- i``.

    Mean matrix ``c I + a P`` with ``P`` the cyclic shift; criticality
    forces ``c = 2a`` and ``Im = a sqrt(3)/2 = 1``.  A parent at ``x``
    leaves one child at ``x`` w.p. ``1 - 2a/g``, two children at ``x``
    w.p. ``9a/(5g)``, and two at ``x`` plus five at ``x+1`` w.p. ``a/(5g)``.
    These weights make ``E[sum_{i != j} w^{x_i + x_j}] = 0`` for the cube
    root of unity ``w``, so the forcing of a non-conjugate pair vanishes.
    Needs ``gamma >= 2a``.
    """
    a = 2.0 * ROTATION_THETA / np.sqrt(3.0)
    c = 2.0 * a
    n = 3
    if gamma < 2.0 * a:
        raise InfeasibleTarget(f"rotation model needs gamma >= {2 * a:.6g}")
    omega = np.exp(2j * np.pi / n)
    # column k of V is the Fourier mode with eigenvalue c + a omega^k
    V = np.array([[omega ** (k * x) for k in range(n)] for x in range(n)])
    J = np.diag([c + a * omega**k for k in range(n)])
    laws = []
    for x in range(n):
        nxt = (x + 1) % n
        laws.append(
            (
                Atom(1.0 - 2.0 * a / gamma, (x,)),
                Atom(9.0 * a / (5.0 * gamma), (x, x)),
                Atom(a / (5.0 * gamma), (x, x) + (nxt,) * 5),
            )
        )
    model = BmpModel(n, np.zeros((n, n)), np.full(n, gamma), tuple(laws), jordan=(J, V))
    _require_valid(model)
    return model


CANONICAL = {
    "yule": yule,
    "jordan": jordan_block_model,
    "decoupled": decoupled_model,
    "coupled_small": coupled_small_model,
    "rotation": rotation_model,
}


def canonical(name: str) -> BmpModel:
    try:
        return CANONICAL[name]()
    except KeyError:
        raise ValueError(f"unknown canonical model {name!r}") from None


# -- JSON -------------------------------------------------------------------


def _offspring_from_json(laws) -> list:
    return [[(a["p"], tuple(a["children"])) for a in law] for law in laws]


def model_to_dict(model: BmpModel) -> dict:
    return {
        "n": model.n,
        "Q": model.Q.tolist(),
        "gamma": model.gamma.tolist(),
        "offspring": [
            [{"p": a.p, "children": list(a.children)} for a in law] for law in model.offspring
        ],
    }


def model_from_dict(data: Mapping) -> BmpModel:
    model = BmpModel(
        int(data["n"]), data["Q"], data["gamma"], _offspring_from_json(data["offspring"])
    )
    return model


def load_model(path) -> BmpModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def dump_model(model: BmpModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2)
