"""Experiment configuration: parsing, validation, and object building.

Config files are line-oriented UTF-8 ``key = value`` text grouped into
``[section]`` headers.  Full-line comments start with ``#``; inline comments
are not supported (values may legitimately contain ``#``-free text only).
Unknown sections or keys are errors, as are duplicate keys; duplicates are
reported with both line numbers.  Step-size preconditions of the chosen
scheme are checked at load time, before any simulation.

Sections and keys
-----------------
[experiment]  name (required), seed, n_paths, output
[potential]   kind (required): gaussian | anisotropic-gaussian |
              perturbed-quadratic | logcosh; d; scale; spectrum;
              amplitude; frequency; c
[grid]        T (required); exactly one of N or h (list); m (scalar or list
              parallel to h)
[scheme]      name (required): EM-LD | M-LMC | ULMC | DM-ULMC;
              gamma; schedule: deterministic | randomized | zero; q (list)
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .paths import TimeGrid
from .potentials import (
    AnisotropicQuadratic,
    IsotropicQuadratic,
    LogCoshProduct,
    PerturbedQuadratic,
    Potential,
)

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "load_config_file"]


EXPERIMENTS = (
    "normalization",
    "adapted-equivalence",
    "fd-malliavin",
    "eta-refinement",
    "kl-order-sweep",
    "local-error-sweep",
    "trace-diagnostics",
    "complexity-table",
)

#: canonical scheme ids keyed by the user-facing spellings
SCHEME_NAMES = {
    "em-ld": "em-ld",
    "m-lmc": "mlmc",
    "mlmc": "mlmc",
    "ulmc": "ulmc",
    "dm-ulmc": "dmulmc",
    "dmulmc": "dmulmc",
}

SCHEDULE_MODES = ("deterministic", "randomized", "zero")

_KNOWN_KEYS = {
    "experiment": {"name", "seed", "n_paths", "output"},
    "potential": {"kind", "d", "scale", "spectrum", "amplitude", "frequency", "c"},
    "grid": {"T", "N", "h", "m"},
    "scheme": {"name", "gamma", "schedule", "q"},
}


class ConfigError(ValueError):
    """Malformed, unknown, duplicate, or bound-violating configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully validated experiment description.

    ``h_list``/``n_list``/``m_list`` are parallel: one entry per grid in the
    sweep.  ``config_hash`` deterministically identifies (config, seed): any
    change to a resolved field changes the hash.
    """

    experiment: str
    potential: Potential
    potential_kind: str
    T: float
    h_list: tuple[float, ...]
    n_list: tuple[int, ...]
    m_list: tuple[int, ...]
    scheme: str
    scheme_label: str
    schedule_mode: str
    gamma: float | None
    q_list: tuple[float, ...]
    n_paths: int
    seed: int
    output: str | None
    config_hash: str = field(default="", compare=False)

    def grids(self) -> list[TimeGrid]:
        return [TimeGrid(self.T, n, m) for n, m in zip(self.n_list, self.m_list)]


def _parse_lines(text: str) -> dict[str, tuple[str, int]]:
    """Sectioned key=value lines -> {"section.key": (value, line_no)}."""
    entries: dict[str, tuple[str, int]] = {}
    section = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _KNOWN_KEYS:
                known = ", ".join(sorted(_KNOWN_KEYS))
                raise ConfigError(
                    f"line {line_no}: unknown section [{section}] (known: {known})"
                )
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigError(
                f"line {line_no}: key outside any [section]: {raw!r}"
            )
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KNOWN_KEYS[section]:
            known = ", ".join(sorted(_KNOWN_KEYS[section]))
            raise ConfigError(
                f"line {line_no}: unknown key {key!r} in [{section}] (known: {known})"
            )
        full = f"{section}.{key}"
        if full in entries:
            raise ConfigError(
                f"line {line_no}: duplicate key {key!r} in [{section}] "
                f"(first set on line {entries[full][1]})"
            )
        if not value:
            raise ConfigError(f"line {line_no}: empty value for {key!r}")
        entries[full] = (value, line_no)
    return entries


def _number(raw: str, where: str) -> float:
    """Parse a float, accepting exact fractions like '1/8'."""
    try:
        if "/" in raw:
            return float(Fraction(raw))
        return float(raw)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{where}: malformed number {raw!r}") from exc


def _number_list(raw: str, where: str) -> list[float]:
    items = raw.replace(",", " ").split()
    if not items:
        raise ConfigError(f"{where}: empty list")
    return [_number(item, where) for item in items]


def _int(raw: str, where: str) -> int:
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: malformed integer {raw!r}") from exc
    return value


class _Entries:
    """Typed access with consumption tracking (missing-key errors name keys)."""

    def __init__(self, entries: dict[str, tuple[str, int]]):
        self.entries = entries

    def has(self, full: str) -> bool:
        return full in self.entries

    def raw(self, full: str) -> str:
        return self.entries[full][0]

    def where(self, full: str) -> str:
        value, line_no = self.entries[full]
        return f"line {line_no} ({full} = {value})"

    def require(self, full: str) -> str:
        if full not in self.entries:
            raise ConfigError(f"missing required key {full!r}")
        return self.entries[full][0]


def _build_potential(e: _Entries) -> tuple[Potential, str]:
    kind = e.require("potential.kind").lower()
    d = _int(e.raw("potential.d"), e.where("potential.d")) if e.has("potential.d") else None

    def reject(*keys: str) -> None:
        for key in keys:
            full = f"potential.{key}"
            if e.has(full):
                raise ConfigError(
                    f"{e.where(full)}: key not applicable to kind {kind!r}"
                )

    if kind == "gaussian":
        reject("spectrum", "amplitude", "frequency", "c")
        if d is None:
            raise ConfigError("missing required key 'potential.d' for gaussian")
        scale = _number(e.raw("potential.scale"), e.where("potential.scale")) if e.has("potential.scale") else 1.0
        return IsotropicQuadratic(d, scale), kind
    if kind == "anisotropic-gaussian":
        reject("scale", "amplitude", "frequency", "c")
        spectrum = _number_list(e.require("potential.spectrum"), "potential.spectrum")
        if d is not None and d != len(spectrum):
            raise ConfigError(
                f"{e.where('potential.d')}: d = {d} contradicts a spectrum of length {len(spectrum)}"
            )
        return AnisotropicQuadratic(spectrum), kind
    if kind == "perturbed-quadratic":
        reject("scale", "c")
        spectrum = _number_list(e.require("potential.spectrum"), "potential.spectrum")
        if d is not None and d != len(spectrum):
            raise ConfigError(
                f"{e.where('potential.d')}: d = {d} contradicts a spectrum of length {len(spectrum)}"
            )
        amplitude = _number(e.raw("potential.amplitude"), e.where("potential.amplitude")) if e.has("potential.amplitude") else 0.1
        frequency = _number(e.raw("potential.frequency"), e.where("potential.frequency")) if e.has("potential.frequency") else 1.0
        return PerturbedQuadratic(spectrum, amplitude, frequency), kind
    if kind == "logcosh":
        reject("scale", "spectrum", "amplitude", "frequency")
        if d is None:
            raise ConfigError("missing required key 'potential.d' for logcosh")
        c = _number(e.raw("potential.c"), e.where("potential.c")) if e.has("potential.c") else 1.0
        return LogCoshProduct(d, c), kind
    raise ConfigError(
        f"{e.where('potential.kind')}: unknown potential kind {kind!r} "
        "(known: gaussian, anisotropic-gaussian, perturbed-quadratic, logcosh)"
    )


def _check_step_bounds(
    scheme: str, h_list: tuple[float, ...], beta: float, q_max: float
) -> None:
    """Scheme step-size preconditions, enforced before any simulation."""
    if scheme == "mlmc":
        bound = 1.0 / (beta * q_max) if beta > 0 else np.inf
        for h in h_list:
            if h > bound * (1 + 1e-12):
                raise ConfigError(
                    f"step size h = {h:g} violates h <= 1/(beta*q) = {bound:g} "
                    f"required for M-LMC weights (beta = {beta:g}, q = {q_max:g})"
                )
    if scheme == "dmulmc":
        bound = 0.5 / np.sqrt(beta * q_max) if beta > 0 else np.inf
        for h in h_list:
            if h > bound * (1 + 1e-12):
                raise ConfigError(
                    f"step size h = {h:g} violates h <= 0.5/sqrt(beta*q) = {bound:g} "
                    f"required for DM-ULMC weights (beta = {beta:g}, q = {q_max:g})"
                )


def load_config(text: str) -> ExperimentConfig:
    """Parse, validate, and resolve an experiment configuration."""
    e = _Entries(_parse_lines(text))

    experiment = e.require("experiment.name")
    if experiment not in EXPERIMENTS:
        raise ConfigError(
            f"{e.where('experiment.name')}: unknown experiment {experiment!r} "
            f"(known: {', '.join(EXPERIMENTS)})"
        )
    seed = _int(e.raw("experiment.seed"), e.where("experiment.seed")) if e.has("experiment.seed") else 0
    n_paths = _int(e.raw("experiment.n_paths"), e.where("experiment.n_paths")) if e.has("experiment.n_paths") else 100_000
    if n_paths < 2:
        raise ConfigError(f"{e.where('experiment.n_paths')}: need at least 2 paths")
    output = e.raw("experiment.output") if e.has("experiment.output") else None

    potential, potential_kind = _build_potential(e)

    T = _number(e.require("grid.T"), "grid.T")
    if not (np.isfinite(T) and T > 0):
        raise ConfigError(f"{e.where('grid.T')}: horizon must be positive")
    if e.has("grid.N") and e.has("grid.h"):
        raise ConfigError("give exactly one of grid.N or grid.h, not both")
    if e.has("grid.N"):
        n_list = [_int(tok, e.where("grid.N")) for tok in e.raw("grid.N").replace(",", " ").split()]
        if any(n < 1 for n in n_list):
            raise ConfigError(f"{e.where('grid.N')}: outer step counts must be >= 1")
        h_list = [T / n for n in n_list]
    elif e.has("grid.h"):
        h_list = _number_list(e.raw("grid.h"), e.where("grid.h"))
        n_list = []
        for h in h_list:
            if not (np.isfinite(h) and 0 < h <= T):
                raise ConfigError(f"{e.where('grid.h')}: need 0 < h <= T, got h = {h}")
            n = round(T / h)
            if abs(T / h - n) > 1e-9:
                raise ConfigError(
                    f"{e.where('grid.h')}: h = {h:g} does not divide the horizon T = {T:g}"
                )
            n_list.append(n)
    else:
        raise ConfigError("missing required key: one of grid.N or grid.h")
    if e.has("grid.m"):
        m_list = [_int(tok, e.where("grid.m")) for tok in e.raw("grid.m").replace(",", " ").split()]
    else:
        m_list = [8]
    if len(m_list) == 1:
        m_list = m_list * len(h_list)
    if len(m_list) != len(h_list):
        raise ConfigError(
            f"{e.where('grid.m')}: m has {len(m_list)} entries but the sweep has "
            f"{len(h_list)} grids (give one m or one per grid)"
        )
    if any(m < 1 for m in m_list):
        raise ConfigError(f"{e.where('grid.m')}: inner cell counts must be >= 1")

    scheme_label = e.require("scheme.name")
    scheme = SCHEME_NAMES.get(scheme_label.lower())
    if scheme is None:
        raise ConfigError(
            f"{e.where('scheme.name')}: unknown scheme {scheme_label!r} "
            "(known: EM-LD, M-LMC, ULMC, DM-ULMC)"
        )
    schedule_mode = e.raw("scheme.schedule") if e.has("scheme.schedule") else "deterministic"
    if schedule_mode not in SCHEDULE_MODES:
        raise ConfigError(
            f"{e.where('scheme.schedule')}: unknown schedule mode {schedule_mode!r} "
            f"(known: {', '.join(SCHEDULE_MODES)})"
        )
    kinetic = scheme in ("ulmc", "dmulmc")
    if e.has("scheme.gamma"):
        if not kinetic:
            raise ConfigError(
                f"{e.where('scheme.gamma')}: gamma only applies to kinetic schemes (ULMC, DM-ULMC)"
            )
        gamma = _number(e.raw("scheme.gamma"), e.where("scheme.gamma"))
        if not (np.isfinite(gamma) and gamma > 0):
            raise ConfigError(f"{e.where('scheme.gamma')}: friction must be positive")
    else:
        # the kinetic-scheme convention used throughout the experiments
        gamma = float(np.sqrt(potential.beta)) if kinetic else None
    q_list = tuple(_number_list(e.raw("scheme.q"), e.where("scheme.q"))) if e.has("scheme.q") else (2.0,)
    if any(not np.isfinite(q) or q < 1 for q in q_list):
        raise ConfigError(f"{e.where('scheme.q')}: divergence orders must satisfy q >= 1")

    _check_step_bounds(scheme, tuple(h_list), potential.beta, max(q_list))

    resolved = (
        f"experiment={experiment};potential={potential_kind};d={potential.d};"
        f"beta={potential.beta!r};alpha={potential.alpha!r};T={T!r};"
        f"h={[repr(h) for h in h_list]};N={n_list};m={m_list};scheme={scheme};"
        f"schedule={schedule_mode};gamma={gamma!r};q={[repr(q) for q in q_list]};"
        f"n_paths={n_paths};seed={seed}"
    )
    config_hash = hashlib.sha256(resolved.encode()).hexdigest()[:12]

    return ExperimentConfig(
        experiment=experiment,
        potential=potential,
        potential_kind=potential_kind,
        T=float(T),
        h_list=tuple(float(h) for h in h_list),
        n_list=tuple(int(n) for n in n_list),
        m_list=tuple(int(m) for m in m_list),
        scheme=scheme,
        scheme_label=scheme_label,
        schedule_mode=schedule_mode,
        gamma=gamma,
        q_list=q_list,
        n_paths=int(n_paths),
        seed=int(seed),
        output=output,
        config_hash=config_hash,
    )


def load_config_file(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return load_config(fh.read())
