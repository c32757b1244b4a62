"""Defect curves for the normalised moments and the spectral expansion.

A defect is the largest modulus, over dictionary tuples and states, of
the difference between a normalised moment and its limit functional.
Curves are reported per regime together with the convention id of the
normalisation they use and the dictionary they were computed on.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
from dataclasses import dataclass, field
from math import factorial
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .errors import NotInRegime
from .limits import (
    critical_exponent,
    large_theorem_limit,
    limit_critical,
    limit_large,
    limit_small,
    limit_small_star,
)
from .model import BmpModel, mean_matrix
from .moments import moment_hierarchy_batch
from .spectral import (
    FunctionProfile,
    RegimeClassification,
    SpectralDecomposition,
    classify_function,
    classify_regimes,
    is_conjugate_tuple,
    tuple_profile,
)

REGIMES = ("large", "critical", "small")
CONVENTIONS = {
    "large-lemma": "L1-twisted",
    "large-theorem": "T1-proof-consistent",
    "small": "T2-damped-s",
    "small-star": "L2-operator",
    "critical": "T3-ptilde-alpha",
}


def default_grid(points: int = 60, t_min: float = 0.1, t_max: float = 20.0) -> np.ndarray:
    return np.geomspace(t_min, t_max, points)


@dataclass(frozen=True, eq=False)
class FunctionDictionary:
    """Unit sup-norm test functions of one regime class, with provenance."""

    regime: str
    members: tuple[np.ndarray, ...]
    profiles: tuple[FunctionProfile, ...]
    provenance: tuple[str, ...]

    @property
    def dict_id(self) -> str:
        h = hashlib.sha256()
        h.update(self.regime.encode())
        for f, tag in zip(self.members, self.provenance):
            h.update(tag.encode())
            h.update(np.round(np.asarray(f, dtype=complex), 12).tobytes())
        return f"{self.regime}-{len(self.members)}-{h.hexdigest()[:12]}"

    def __len__(self) -> int:
        return len(self.members)

    def composition(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for tag in self.provenance:
            out[tag] = out.get(tag, 0) + 1
        return out


def _unit(f: np.ndarray) -> np.ndarray:
    s = float(np.max(np.abs(f)))
    return f / s if s > 0 else f


def _member_ok(pr: FunctionProfile, regime: str) -> bool:
    return {"large": pr.in_large, "critical": pr.in_critical, "small": pr.in_small}[regime]


def explicit_dictionary(
    dec: SpectralDecomposition,
    reg: RegimeClassification,
    regime: str,
    members: Sequence,
    provenance: str = "explicit",
) -> FunctionDictionary:
    """Dictionary from user-supplied functions; each is checked for membership."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    fs, profs = [], []
    for f in members:
        f = np.asarray(f, dtype=complex)
        if np.max(np.abs(f)) > 1.0 + 1e-12:
            raise ValueError("dictionary members must have sup-norm at most one")
        pr = classify_function(dec, reg, f)
        if np.any(f != 0) and not _member_ok(pr, regime):
            raise NotInRegime(f"member {f} is not in the {regime} class")
        fs.append(f)
        profs.append(pr)
    return FunctionDictionary(regime, tuple(fs), tuple(profs), (provenance,) * len(fs))


def build_dictionary(
    dec: SpectralDecomposition,
    reg: RegimeClassification,
    regime: str,
    n_random: int = 8,
    seed: int = 0,
) -> FunctionDictionary:
    """Generalised eigenbasis of the class plus seeded random members.

    Random members of the large and critical classes combine the chain
    vectors of one randomly chosen cluster (so ``nu`` stays well defined);
    random members of the small class combine every column outside the
    clusters before ``tau``.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if regime == "small":
        if reg.tau is None:
            raise NotInRegime("the mean matrix has no small eigenvalues")
        clusters = list(range(reg.tau, dec.m))
    else:
        clusters = reg.indices(regime)
    if not clusters:
        raise NotInRegime(f"no eigenvalues in the {regime} class")
    rng = np.random.default_rng(seed)
    fs, tags = [], []
    for i in clusters:
        for c in dec.columns(i):
            fs.append(_unit(dec.V[:, c]))
            tags.append("eigenbasis")
    for _ in range(n_random):
        if regime == "small":
            cols = np.concatenate([dec.columns(i) for i in clusters])
            tag = "random-in-kernel"
        else:
            cols = dec.columns(clusters[int(rng.integers(len(clusters)))])
            tag = "random-in-span"
        sub = dec.V[:, cols]
        w = rng.standard_normal(len(cols)) + 1j * rng.standard_normal(len(cols))
        if np.all(np.abs(sub.imag) < 1e-14):
            f = sub.real @ w.real  # keep real classes real
        else:
            f = sub @ w
        fs.append(_unit(np.asarray(f, dtype=complex)))
        tags.append(tag)
    return FunctionDictionary(
        regime,
        tuple(fs),
        tuple(classify_function(dec, reg, f) for f in fs),
        tuple(tags),
    )


@dataclass
class DeltaCurve:
    regime: str
    ell: int
    times: np.ndarray
    delta: np.ndarray
    convention_id: str
    dict_id: str
    tuples: str = "all"
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> float:
        return float(self.delta[-1])

    @property
    def initial(self) -> float:
        return float(self.delta[0])

    def at(self, t: float) -> float:
        g = int(np.argmin(np.abs(self.times - t)))
        return float(self.delta[g])

    def rows(self):
        for t, d in zip(self.times, self.delta):
            yield [self.regime, self.ell, repr(float(t)), repr(float(d)), self.convention_id, self.dict_id]


def _tuples(dictionary: FunctionDictionary, ell: int):
    for idx in itertools.combinations_with_replacement(range(len(dictionary)), ell):
        yield np.array([dictionary.members[i] for i in idx]), [dictionary.profiles[i] for i in idx]


def _grid(grid) -> np.ndarray:
    g = default_grid() if grid is None else np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size == 0 or np.any(g < 0) or np.any(np.diff(g) <= 0):
        raise ValueError("grid must be a non-empty increasing array of non-negative times")
    return g


def _defect(normalised: np.ndarray, limit: np.ndarray) -> np.ndarray:
    return np.max(np.abs(normalised - limit[None, :]), axis=1)


def _full(model, tuples, times, rtol, atol) -> np.ndarray:
    """Full-subset moments for a list of equal-length tuples, shape ``(B, G, n)``."""
    batch = np.array(tuples, dtype=complex)
    full = (1 << batch.shape[1]) - 1
    return moment_hierarchy_batch(model, batch, times, rtol=rtol, atol=atol)[:, :, full, :]


def _twisted_moments(model, dec, tuples, times, rtol, atol) -> np.ndarray:
    """``psi_t^(ell)[e^{-Nt} f_1, ..., e^{-Nt} f_ell]`` by multilinear expansion."""
    P = dec.max_depth
    ell = len(tuples[0])
    args, owners, coefs = [], [], []
    for b, fs in enumerate(tuples):
        powers = [[dec.nil_power(r, f) for r in range(P)] for f in fs]
        for r in itertools.product(range(P), repeat=ell):
            term = [powers[i][r[i]] for i in range(ell)]
            if any(np.max(np.abs(a)) < 1e-14 for a in term):
                continue
            coef = np.ones(len(times))
            for ri in r:
                coef = coef * (-times) ** ri / factorial(ri)
            args.append(term)
            owners.append(b)
            coefs.append(coef)
    out = np.zeros((len(tuples), len(times), model.n), dtype=complex)
    if args:
        vals = _full(model, args, times, rtol, atol)
        for b, coef, v in zip(owners, coefs, vals):
            out[b] += coef[:, None] * v
    return out


def delta_large(
    model: BmpModel,
    dec: SpectralDecomposition,
    dictionary: FunctionDictionary,
    ell: int,
    grid=None,
    form: str = "lemma",
    reg: RegimeClassification | None = None,
    rtol: float = 1e-10,
    atol: float = 1e-10,
) -> DeltaCurve:
    """Large-regime defect in the twisted-argument form or the theorem form.

    ``form="lemma"``: ``|e^{-lam t} psi_t^(ell)[e^{-Nt} f] - L[f]|``.
    ``form="theorem"``: ``|e^{-lam t} (1+t)^{-(p-ell)} psi_t^(ell)[f]
    - L[f*] / prod (p_j - 1)!|``.
    """
    if form not in ("lemma", "theorem"):
        raise ValueError(f"unknown form {form!r}")
    if dictionary.regime != "large":
        raise NotInRegime("delta_large needs a large-class dictionary")
    reg = reg if reg is not None else classify_regimes(dec)
    times = _grid(grid)
    tuples = list(_tuples(dictionary, ell))
    fs_list = [fs for fs, _ in tuples]
    if form == "lemma":
        vals = _twisted_moments(model, dec, fs_list, times, rtol, atol)
    else:
        vals = _full(model, fs_list, times, rtol, atol)
    worst = np.zeros(len(times))
    for (fs, profs), val in zip(tuples, vals):
        tp = tuple_profile(dec, profs)
        lam = tp.lam_sum
        if form == "lemma":
            limit = limit_large(model, dec, fs, reg).top
            norm = np.exp(-lam * times)[:, None] * val
        else:
            limit = large_theorem_limit(dec, profs, limit_large(model, dec, tp.fstar, reg))
            scale = np.exp(-lam * times) * (1 + times) ** (-(tp.p_sum - ell))
            norm = scale[:, None] * val
        worst = np.maximum(worst, _defect(norm, limit))
    key = "large-lemma" if form == "lemma" else "large-theorem"
    return DeltaCurve("large", ell, times, worst, CONVENTIONS[key], dictionary.dict_id)


def delta_small(
    model: BmpModel,
    dec: SpectralDecomposition,
    dictionary: FunctionDictionary,
    ell: int,
    grid=None,
    star: bool = False,
    convention: str = "consistent",
    reg: RegimeClassification | None = None,
    rtol: float = 1e-10,
    atol: float = 1e-10,
) -> DeltaCurve:
    """Small-regime defect.

    Default: ``|e^{-ell lam1 t/2} (1+t)^{-ell(p1-1)/2} psi_t^(ell) - L|``.
    With ``star=True`` (pairs only) the operator-normalised variant
    ``|e^{-(lam1 + N) t} psi_t^(2) - L*|``.
    """
    if ell % 2:
        raise ValueError("the small-regime defect is defined for even ell")
    if star and ell != 2:
        raise ValueError("the operator-normalised defect is defined for pairs")
    if dictionary.regime != "small":
        raise NotInRegime("delta_small needs a small-class dictionary")
    reg = reg if reg is not None else classify_regimes(dec)
    if reg.tau is None:
        raise NotInRegime("the mean matrix has no small eigenvalues")
    times = _grid(grid)
    lam1, p1 = dec.lambda1, dec.p1
    tuples = list(_tuples(dictionary, ell))
    vals = _full(model, [fs for fs, _ in tuples], times, rtol, atol)
    worst = np.zeros(len(times))
    for (fs, _), val in zip(tuples, vals):
        if star:
            limit = limit_small_star(model, dec, fs, reg)
            norm = np.array(
                [np.exp(-lam1 * t) * dec.exp_nilpotent(-t, v) for t, v in zip(times, val)]
            )
        else:
            limit = limit_small(model, dec, fs, reg, convention=convention).top
            scale = np.exp(-ell * lam1 * times / 2) * (1 + times) ** (-ell * (p1 - 1) / 2)
            norm = scale[:, None] * val
        worst = np.maximum(worst, _defect(norm, limit))
    key = "small-star" if star else "small"
    conv = CONVENTIONS[key] if star else f"{CONVENTIONS[key]}/{convention}"
    return DeltaCurve("small", ell, times, worst, conv, dictionary.dict_id)


def delta_critical(
    model: BmpModel,
    dec: SpectralDecomposition,
    dictionary: FunctionDictionary,
    ell: int,
    grid=None,
    alpha: int = 0,
    reg: RegimeClassification | None = None,
    rtol: float = 1e-10,
    atol: float = 1e-10,
) -> tuple[DeltaCurve | None, DeltaCurve | None]:
    """Critical-regime defects, ``(conjugate, non_conjugate)``.

    Normalisation ``e^{-ell lam1 t/2} (1+t)^{-beta} N^alpha psi_t^(ell)``
    with ``beta = p(f) + p1 - alpha - 2`` for pairs and
    ``p(f) + ell (p1 - 2)/2`` otherwise.  Either entry is ``None`` when the
    dictionary yields no tuple of that kind.
    """
    if ell % 2:
        raise ValueError("the critical-regime defect is defined for even ell")
    if alpha and ell != 2:
        raise ValueError("alpha > 0 is defined for pairs")
    if dictionary.regime != "critical":
        raise NotInRegime("delta_critical needs a critical-class dictionary")
    reg = reg if reg is not None else classify_regimes(dec)
    times = _grid(grid)
    lam1, p1 = dec.lambda1, dec.p1
    nil_alpha = np.linalg.matrix_power(dec.nilpotent, alpha)
    worst = {True: None, False: None}
    tuples = list(_tuples(dictionary, ell))
    vals = _full(model, [fs for fs, _ in tuples], times, rtol, atol)
    for (fs, profs), val in zip(tuples, vals):
        conj = is_conjugate_tuple([pr.lam for pr in profs])
        if ell == 2:
            beta = critical_exponent(dec, profs, alpha)
        else:
            beta = sum(pr.p for pr in profs) + ell * (p1 - 2) / 2
        limit = limit_critical(model, dec, fs, alpha=alpha, reg=reg).top
        val = val @ nil_alpha.T
        scale = np.exp(-ell * lam1 * times / 2) * (1 + times) ** (-beta)
        d = _defect(scale[:, None] * val, limit)
        worst[conj] = d if worst[conj] is None else np.maximum(worst[conj], d)
    conv = f"{CONVENTIONS['critical']}/alpha={alpha}"

    def curve(flag, label):
        if worst[flag] is None:
            return None
        return DeltaCurve("critical", ell, times, worst[flag], conv, dictionary.dict_id, tuples=label)

    return curve(True, "conjugate"), curve(False, "non-conjugate")


def verify_h1(
    model: BmpModel,
    dec: SpectralDecomposition,
    grid=None,
    dictionary: Sequence | None = None,
    m_trunc: int | None = None,
) -> DeltaCurve:
    """Defect ``e^{-Re lam_m' t} |e^{tA} f - sum_{i < m'} e^{(lam_i + N) t} Phi_i[f]|``.

    Without a dictionary the sup over the unit ball is exact: the induced
    infinity norm (largest absolute row sum) of the remainder matrix.
    """
    m = dec.m if m_trunc is None else int(m_trunc)
    if not 1 <= m <= dec.m:
        raise ValueError(f"m_trunc must lie in [1, {dec.m}]")
    times = _grid(np.linspace(0.0, 5.0, 11) if grid is None else grid)
    A = mean_matrix(model)
    projs = [dec.projector(i) for i in range(m)]
    F = None if dictionary is None else np.atleast_2d(np.asarray(dictionary, dtype=complex)).T
    rate = dec.eigenvalues[m - 1].real
    out = np.empty(len(times))
    for g, t in enumerate(times):
        S = sum(np.exp(dec.eigenvalues[i] * t) * projs[i] for i in range(m))
        D = expm(t * A) - dec.exp_nilpotent_matrix(t) @ S
        size = np.max(np.sum(np.abs(D), axis=1)) if F is None else np.max(np.abs(D @ F))
        out[g] = np.exp(-rate * t) * size
    return DeltaCurve("h1", 1, times, out, "H1-matrix", "unit-ball" if F is None else "explicit",
                      meta={"m": m})


REPORT_HEADER = ["regime", "ell", "t", "delta", "convention_id", "dict_id"]
COMPARISON_HEADER = ["case_id", "t", "source", "state", "re", "im", "se"]


def write_report_csv(path, curves: Sequence[DeltaCurve]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for c in curves:
            for row in c.rows():
                w.writerow(row)


def comparison_rows(case_id: str, t: float, source: str, values, se=None, states=None):
    """Rows of the comparison table for one source; ``values`` per state."""
    values = np.atleast_1d(np.asarray(values, dtype=complex))
    states = range(len(values)) if states is None else states
    se_col = "" if se is None else repr(float(se))
    return [
        [case_id, repr(float(t)), source, int(x), repr(float(v.real)), repr(float(v.imag)), se_col]
        for x, v in zip(states, values)
    ]


def write_comparison_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARISON_HEADER)
        w.writerows(rows)
