"""Config-driven command line: ``bmp <subcommand> --config <path>``.

Exit codes: 0 success, 1 unreadable or malformed config (or a busy output
directory), 2 validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (
    CONVENTIONS,
    build_dictionary,
    comparison_rows,
    default_grid,
    delta_critical,
    delta_large,
    delta_small,
    explicit_dictionary,
    verify_h1,
    write_comparison_csv,
    write_report_csv,
)
from .errors import BmpError, InfeasibleTarget, InvalidModel, NotInRegime, NumericalFailure
from .limits import DAMPING_NOTE, QUAD_TOL, limit_critical, limit_large, limit_small
from .model import build_model, load_model, mean_matrix, validate_model
from .moments import moment_hierarchy
from .montecarlo import DEFAULT_BATCH, estimate_moment
from .spectral import (
    TOL_CLUSTER,
    TOL_MEMBER,
    TOL_RANK,
    TOL_REGIME,
    classify_function,
    classify_regimes,
    decompose,
)

log = logging.getLogger("bmp")

SCHEMA = "bmp-config/1"
SUBCOMMANDS = ("validate", "spectral", "moments", "limits", "delta", "mc", "compare", "all")
EXIT_OK, EXIT_CONFIG, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3

_TOP_KEYS = {
    "schema", "model", "spectral", "functions", "regime", "ell", "grid", "moments",
    "quadrature", "alpha", "convention", "dictionary", "mc", "out",
}
_SECTION_KEYS = {
    "spectral": {"tol_cluster", "tol_rank", "tol_member", "tol_regime"},
    "moments": {"rtol", "atol"},
    "quadrature": {"tol"},
    "dictionary": {"n_random", "seed", "members"},
    "mc": {"replicas", "x0", "times", "batch_size", "seed"},
}
_MODEL_FILE_KEYS = {"file"}


class ConfigError(Exception):
    """The config cannot be read or does not match the schema."""


class ValidationFailure(Exception):
    """The model or tuple fails validation."""


@dataclass
class ExperimentConfig:
    raw: dict
    base: Path
    digest: str

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})

    @property
    def regime(self) -> str | None:
        return self.raw.get("regime")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = path.read_bytes()
        raw = json.loads(data.decode("utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if raw.get("schema") != SCHEMA:
        raise ConfigError(f"config schema must be {SCHEMA!r}, got {raw.get('schema')!r}")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for name, allowed in _SECTION_KEYS.items():
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"section {name!r} must be an object")
        extra = set(sec) - allowed
        if extra:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}")
    if "model" not in raw or not isinstance(raw["model"], dict):
        raise ConfigError("config needs a 'model' object")
    if "file" in raw["model"] and set(raw["model"]) - _MODEL_FILE_KEYS:
        raise ConfigError("a model file reference takes no other keys")
    if raw.get("regime") not in (None, "large", "small", "critical"):
        raise ConfigError(f"unknown regime {raw.get('regime')!r}")
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()
    return ExperimentConfig(raw, path.parent, hashlib.sha256(canon).hexdigest())


def _complex_vector(v) -> np.ndarray:
    out = []
    for x in v:
        if isinstance(x, dict):
            out.append(complex(x.get("re", 0.0), x.get("im", 0.0)))
        elif isinstance(x, (list, tuple)) and len(x) == 2:
            out.append(complex(x[0], x[1]))
        else:
            out.append(complex(x))
    return np.array(out, dtype=complex)


def _grid(spec) -> np.ndarray:
    if spec is None:
        return default_grid()
    if isinstance(spec, dict):
        if set(spec) == {"geom"}:
            a, b, pts = spec["geom"]
            return np.geomspace(float(a), float(b), int(pts))
        if set(spec) == {"linspace"}:
            a, b, pts = spec["linspace"]
            return np.linspace(float(a), float(b), int(pts))
        raise ConfigError("grid object must be {'geom': [...]} or {'linspace': [...]}")
    return np.asarray(spec, dtype=float)


class Run:
    """State shared by the subcommands of one invocation."""

    def __init__(self, cfg: ExperimentConfig, out: Path, seed: int | None, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        mc = cfg.section("mc")
        self.seed = int(seed if seed is not None else mc.get("seed", 0))
        self.artifacts: dict[str, str] = {}
        self.conventions: dict[str, str] = {"damping": DAMPING_NOTE}
        self.summary: dict = {}
        self._model = self._dec = self._reg = None

    # -- lazily built inputs ---------------------------------------------

    @property
    def model(self):
        if self._model is None:
            spec = self.cfg.raw["model"]
            try:
                if "file" in spec:
                    self._model = load_model(self.cfg.base / spec["file"])
                else:
                    self._model = build_model(spec)
            except (InvalidModel, InfeasibleTarget) as exc:
                raise ValidationFailure(str(exc)) from exc
            except OSError as exc:
                raise ConfigError(f"cannot read model file: {exc}") from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad model spec: {exc}") from exc
        return self._model

    @property
    def dec(self):
        if self._dec is None:
            sp = self.cfg.section("spectral")
            self._dec = decompose(
                mean_matrix(self.model),
                tol_cluster=sp.get("tol_cluster", TOL_CLUSTER),
                tol_rank=sp.get("tol_rank", TOL_RANK),
                jordan=self.model.jordan,
            )
        return self._dec

    @property
    def reg(self):
        if self._reg is None:
            self._reg = classify_regimes(self.dec, self.cfg.section("spectral").get("tol_regime", TOL_REGIME))
        return self._reg

    @property
    def tol_member(self) -> float:
        return self.cfg.section("spectral").get("tol_member", TOL_MEMBER)

    def functions(self) -> np.ndarray:
        specs = self.cfg.raw.get("functions")
        if not specs:
            raise ConfigError("this subcommand needs 'functions'")
        fs = []
        for f in specs:
            if isinstance(f, dict) and set(f) == {"eigen"}:
                i, j, k = (int(v) for v in f["eigen"])
                try:
                    fs.append(self.dec.phi(i, j, k))
                except (KeyError, IndexError, ValueError) as exc:
                    raise ValidationFailure(f"no generalised eigenvector {(i, j, k)}") from exc
            else:
                vec = _complex_vector(f)
                if vec.shape != (self.model.n,):
                    raise ValidationFailure(f"function {f} does not have {self.model.n} entries")
                fs.append(vec)
        return np.array(fs)

    @property
    def grid(self) -> np.ndarray:
        g = _grid(self.cfg.raw.get("grid"))
        if g.ndim != 1 or g.size == 0 or np.any(g < 0) or np.any(np.diff(g) <= 0):
            raise ConfigError("grid must be increasing and non-negative")
        return g

    def check_regime(self, fs) -> None:
        regime = self.cfg.regime
        if regime is None:
            return
        for i, f in enumerate(fs):
            pr = classify_function(self.dec, self.reg, f, self.tol_member)
            ok = {"large": pr.in_large, "critical": pr.in_critical, "small": pr.in_small}[regime]
            if not ok:
                raise ValidationFailure(f"function {i} is not in the {regime} class")

    # -- subcommands -----------------------------------------------------

    def _path(self, name: str) -> Path:
        return self.out / name

    def _register(self, name: str) -> None:
        self.artifacts[name] = hashlib.sha256(self._path(name).read_bytes()).hexdigest()

    def validate(self) -> None:
        report = validate_model(self.model)
        doc = {"ok": report.ok, "problems": list(report.problems), "n": self.model.n}
        self._write_json("validate.json", doc)
        if not report.ok:
            raise ValidationFailure("; ".join(report.problems))
        if self.cfg.raw.get("functions"):
            self.check_regime(self.functions())

    def spectral(self) -> None:
        self._write_json("spectral.json", self.dec.to_dict(self.reg))
        curve = verify_h1(self.model, self.dec)
        write_report_csv(self._path("h1.csv"), [curve])
        self._register("h1.csv")
        self.conventions["h1"] = curve.convention_id

    def moments(self) -> None:
        fs = self.functions()
        sec = self.cfg.section("moments")
        table = moment_hierarchy(
            self.model, fs, self.grid, rtol=sec.get("rtol", 1e-9), atol=sec.get("atol", 1e-9)
        )
        table.to_csv(self._path("moments.csv"))
        self._register("moments.csv")

    def _limit_table(self, fs):
        regime = self.cfg.regime
        if regime is None:
            raise ConfigError("this subcommand needs 'regime'")
        self.check_regime(fs)
        tol = self.cfg.section("quadrature").get("tol", QUAD_TOL)
        if regime == "large":
            self.conventions["limits"] = CONVENTIONS["large-lemma"]
            return limit_large(self.model, self.dec, fs, self.reg, tol, self.tol_member)
        if regime == "small":
            conv = self.cfg.raw.get("convention", "consistent")
            self.conventions["limits"] = f"{CONVENTIONS['small']}/{conv}"
            return limit_small(self.model, self.dec, fs, self.reg, tol, self.tol_member, conv)
        alpha = int(self.cfg.raw.get("alpha", 0))
        self.conventions["limits"] = f"{CONVENTIONS['critical']}/alpha={alpha}"
        return limit_critical(self.model, self.dec, fs, alpha, self.reg, tol, self.tol_member)

    def limits(self) -> None:
        table = self._limit_table(self.functions())
        table.to_csv(self._path("limits.csv"))
        self._register("limits.csv")

    def delta(self) -> None:
        regime = self.cfg.regime
        if regime is None:
            raise ConfigError("the delta subcommand needs 'regime'")
        sec = self.cfg.section("dictionary")
        try:
            if "members" in sec:
                members = [_complex_vector(f) for f in sec["members"]]
                dictionary = explicit_dictionary(self.dec, self.reg, regime, members)
            else:
                dictionary = build_dictionary(
                    self.dec, self.reg, regime, int(sec.get("n_random", 8)), int(sec.get("seed", 0))
                )
        except NotInRegime as exc:
            raise ValidationFailure(str(exc)) from exc
        ell = int(self.cfg.raw.get("ell", 2))
        grid = self.grid
        if regime == "large":
            curves = [
                delta_large(self.model, self.dec, dictionary, ell, grid, "lemma", self.reg),
                delta_large(self.model, self.dec, dictionary, ell, grid, "theorem", self.reg),
            ]
        elif regime == "small":
            conv = self.cfg.raw.get("convention", "consistent")
            curves = [delta_small(self.model, self.dec, dictionary, ell, grid, False, conv, self.reg)]
            if ell == 2:
                curves.append(delta_small(self.model, self.dec, dictionary, ell, grid, True, conv, self.reg))
        else:
            alpha = int(self.cfg.raw.get("alpha", 0))
            curves = [
                c
                for c in delta_critical(self.model, self.dec, dictionary, ell, grid, alpha, self.reg)
                if c is not None
            ]
        write_report_csv(self._path("delta.csv"), curves)
        self._register("delta.csv")
        for c in curves:
            self.conventions[f"delta/{c.regime}/{c.tuples}/{c.convention_id}"] = c.convention_id
        self.summary["dictionary"] = {"id": dictionary.dict_id, "composition": dictionary.composition()}
        self.summary["delta_final_over_initial"] = [
            c.final / c.initial if c.initial > 0 else 0.0 for c in curves
        ]

    def _mc_estimates(self, fs):
        sec = self.cfg.section("mc")
        times = sec.get("times", [1.0])
        x0 = int(sec.get("x0", 0))
        out = []
        for t in times:
            est = estimate_moment(
                self.model, fs, float(t), x0,
                replicas=int(sec.get("replicas", 100_000)),
                seed=self.seed,
                batch_size=int(sec.get("batch_size", DEFAULT_BATCH)),
                threads=self.threads,
            )
            out.append((float(t), est))
        return x0, out

    def mc(self) -> None:
        fs = self.functions()
        x0, ests = self._mc_estimates(fs)
        rows = []
        for t, est in ests:
            rows += comparison_rows("mc", t, "mc", [est.estimate], est.se, states=[x0])
        write_comparison_csv(self._path("mc.csv"), rows)
        self._register("mc.csv")

    def compare(self) -> None:
        fs = self.functions()
        x0, ests = self._mc_estimates(fs)
        times = np.array([t for t, _ in ests])
        order = np.argsort(times)
        table = moment_hierarchy(self.model, fs, times[order])
        rows, agree = [], 0
        for t, est in ests:
            ode = table.at(t)[x0]
            case = f"k{len(fs)}-t{t!r}"
            rows += comparison_rows(case, t, "ode", [ode], states=[x0])
            rows += comparison_rows(case, t, "mc", [est.estimate], est.se, states=[x0])
            agree += int(est.agrees(ode))
        if self.cfg.regime is not None:
            lim = self._limit_table(fs)
            rows += comparison_rows("limit", float("inf"), "limit", lim.top)
        write_comparison_csv(self._path("comparison.csv"), rows)
        self._register("comparison.csv")
        self.summary["mc_agreement"] = {"within_4se": agree, "cases": len(ests)}

    def all(self) -> None:
        self.validate()
        self.spectral()
        has_f = bool(self.cfg.raw.get("functions"))
        if has_f:
            self.moments()
        if has_f and self.cfg.regime is not None:
            self.limits()
        if self.cfg.regime is not None:
            self.delta()
        if has_f and self.cfg.raw.get("mc") is not None:
            self.compare()

    # -- output ----------------------------------------------------------

    def _write_json(self, name: str, doc) -> None:
        with open(self._path(name), "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self._register(name)

    def write_manifest(self, subcommand: str) -> None:
        doc = {
            "tool": "bmp",
            "version": __version__,
            "subcommand": subcommand,
            "config_sha256": self.cfg.digest,
            "seeds": {"mc": self.seed, "dictionary": int(self.cfg.section("dictionary").get("seed", 0))},
            "convention_ids": dict(sorted({**CONVENTIONS, **self.conventions}.items())),
            "artifacts": dict(sorted(self.artifacts.items())),
            "summary": self.summary,
        }
        with open(self._path("manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


@contextmanager
def _lock(out: Path):
    path = out / ".bmp.lock"
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"output directory {out} is locked by another run ({path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def run(subcommand: str, config_path, out=None, seed: int | None = None, threads: int = 1) -> int:
    """Execute one subcommand; returns the process exit code."""
    if subcommand not in SUBCOMMANDS:
        log.error("unknown subcommand %s", subcommand)
        return EXIT_CONFIG
    try:
        cfg = load_config(config_path)
        out_dir = Path(out if out is not None else cfg.raw.get("out", "bmp-out"))
        out_dir.mkdir(parents=True, exist_ok=True)
        with _lock(out_dir):
            r = Run(cfg, out_dir, seed, threads)
            getattr(r, subcommand)()
            r.write_manifest(subcommand)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (ValidationFailure, InvalidModel, InfeasibleTarget, NotInRegime) as exc:
        log.error("validation failed: %s", exc)
        return EXIT_INVALID
    except (NumericalFailure, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except BmpError as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bmp", description="Moment asymptotics of branching Markov processes.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="path to the JSON experiment config")
    p.add_argument("--out", help="output directory (default: config 'out' or ./bmp-out)")
    p.add_argument("--seed", type=int, help="Monte Carlo seed (overrides mc.seed)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for Monte Carlo batches")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="bmp: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        log.error("--seed must be an unsigned 64-bit integer")
        return EXIT_CONFIG
    return run(args.subcommand, args.config, args.out, args.seed, max(1, args.threads))


if __name__ == "__main__":
    sys.exit(main())
