"""INI experiment configuration.

Matrices are written as rows separated by ``;`` with entries separated by
``,`` (``1, 0; 0, 1``); lists use ``,``.  ``[noise]`` keys are dotted, e.g.
``eps1_step.kind = gaussian``.  Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, LqmfpgError
from .model import ControlParams, MfcModel, NoiseSpec, NoiseSuite

NOISE_NAMES = ("eps0_init", "eps1_init", "eps0_step", "eps1_step")
Matrix = tuple


def _fmt_num(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def format_matrix(m) -> str:
    return "; ".join(", ".join(_fmt_num(v) for v in row) for row in m)


def parse_matrix(text: str, key: str) -> Matrix:
    rows = [r for r in (part.strip() for part in text.split(";")) if r]
    if not rows:
        raise ConfigError(f"{key}: empty matrix")
    try:
        out = tuple(tuple(float(v) for v in r.replace(",", " ").split()) for r in rows)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse matrix {text!r}") from exc
    if len({len(r) for r in out}) != 1:
        raise ConfigError(f"{key}: rows have different lengths")
    return out


def parse_vector(text: str, key: str) -> tuple:
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse vector {text!r}") from exc


def parse_int_list(text: str, key: str) -> tuple:
    try:
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{key}: expected integers, got {text!r}") from exc


@dataclass(frozen=True)
class NoiseEntry:
    kind: str
    mean: tuple = ()
    cov: Matrix = ()
    low: tuple = ()
    high: tuple = ()
    value: tuple = ()

    KEYS = {"gaussian": ("mean", "cov"), "uniform": ("low", "high"), "degenerate": ("value",)}

    def to_spec(self, gaussian_scale: str) -> NoiseSpec:
        if self.kind == "gaussian":
            cov = np.array(self.cov, dtype=float)
            if gaussian_scale == "std":
                cov = cov @ cov.T
            return NoiseSpec.gaussian(self.mean, cov)
        if self.kind == "uniform":
            return NoiseSpec.uniform(self.low, self.high)
        return NoiseSpec.degenerate(self.value)


@dataclass(frozen=True)
class ModelSection:
    A: Matrix
    A_bar: Matrix
    B: Matrix
    B_bar: Matrix
    Q: Matrix
    Q_bar: Matrix
    R: Matrix
    R_bar: Matrix
    gamma: float


@dataclass(frozen=True)
class NoiseSection:
    gaussian_scale: str
    eps0_init: NoiseEntry
    eps1_init: NoiseEntry
    eps0_step: NoiseEntry
    eps1_step: NoiseEntry


@dataclass(frozen=True)
class PopulationSection:
    N: tuple = (1, 2, 10)
    h_tilde: float = 0.0
    variation_seed: int = 0
    compare_N: tuple = (1, 2, 5, 10, 50)
    sweep_N: int = 10
    h_grid: tuple = (0.0,)
    sweep_seeds: tuple = (0,)


@dataclass(frozen=True)
class LearnSection:
    method: str = "exact"
    optimizer: str = "gd"
    eta: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    M: int = 1000
    T: int = 50
    tau: float = 0.1
    smoothing_dim: int = 0
    perturbation_policy: str = "allow"
    k_max: int = 1000
    eps_stop: float = 0.0
    K0: Matrix = ()
    L0: Matrix = ()
    master_seed: int = 0
    runs: int = 1
    eval_stride: int = 1


@dataclass(frozen=True)
class OutputSection:
    directory: str = "out"
    formats: tuple = ("csv", "svg")
    log_scale: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection
    noise: NoiseSection
    population: PopulationSection | None = None
    learn: LearnSection = field(default_factory=LearnSection)
    output: OutputSection = field(default_factory=OutputSection)

    def build_model(self) -> MfcModel:
        m = self.model
        nz = self.noise
        try:
            suite = NoiseSuite(*(getattr(nz, n).to_spec(nz.gaussian_scale) for n in NOISE_NAMES))
            return MfcModel(
                np.array(m.A), np.array(m.A_bar), np.array(m.B), np.array(m.B_bar), np.array(m.Q),
                np.array(m.Q_bar), np.array(m.R), np.array(m.R_bar), m.gamma, suite,
            )
        except LqmfpgError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def theta0(self, model: MfcModel) -> ControlParams:
        lr = self.learn
        K = np.array(lr.K0) if lr.K0 else np.zeros((model.ell, model.d))
        L = np.array(lr.L0) if lr.L0 else np.zeros((model.ell, model.d))
        if K.shape != (model.ell, model.d) or L.shape != (model.ell, model.d):
            raise ConfigError(f"K0/L0 must be {model.ell}x{model.d}")
        return ControlParams(K, L)

    def run_seeds(self) -> list:
        return [self.learn.master_seed + r for r in range(self.learn.runs)]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, learn=replace(self.learn, master_seed=int(seed)))

    def to_ini(self) -> str:
        return serialize(self)

    def sha256(self) -> str:
        return hashlib.sha256(serialize(self).encode()).hexdigest()


_MATRIX_KEYS = ("A", "A_bar", "B", "B_bar", "Q", "Q_bar", "R", "R_bar")


def _take(section: dict, sect_name: str, allowed):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}' in section [{sect_name}]")


def _typed(cls, raw: dict, sect_name: str):
    """Build a flat dataclass from strings using the field defaults' types."""
    _take(raw, sect_name, [f.name for f in fields(cls)])
    kwargs = {}
    defaults = cls()
    for f in fields(cls):
        if f.name not in raw:
            continue
        text = raw[f.name].strip()
        key = f"{sect_name}.{f.name}"
        default = getattr(defaults, f.name)
        try:
            if f.name in ("K0", "L0"):
                kwargs[f.name] = parse_matrix(text, key) if text else ()
            elif isinstance(default, bool):
                if text.lower() not in ("true", "false"):
                    raise ConfigError(f"{key}: expected true or false, got {text!r}")
                kwargs[f.name] = text.lower() == "true"
            elif isinstance(default, int):
                kwargs[f.name] = int(text)
            elif isinstance(default, float):
                kwargs[f.name] = float(text)
            elif isinstance(default, tuple):
                if f.name == "formats":
                    kwargs[f.name] = tuple(v for v in text.replace(",", " ").split())
                elif f.name == "h_grid":
                    kwargs[f.name] = parse_vector(text, key)
                else:
                    kwargs[f.name] = parse_int_list(text, key)
            else:
                kwargs[f.name] = text
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: cannot parse {text!r}") from exc
    return cls(**kwargs)


def _check_learn(lr: LearnSection):
    if lr.method not in ("exact", "mkv", "pop"):
        raise ConfigError(f"learn.method must be exact, mkv or pop, got {lr.method!r}")
    if lr.optimizer not in ("gd", "adam"):
        raise ConfigError(f"learn.optimizer must be gd or adam, got {lr.optimizer!r}")
    if lr.perturbation_policy not in ("allow", "resample"):
        raise ConfigError("learn.perturbation_policy must be allow or resample")
    if lr.eta <= 0 or lr.M < 1 or lr.T < 1 or lr.tau <= 0 or lr.k_max < 0 or lr.runs < 1:
        raise ConfigError("learn: eta, tau must be positive; M, T, runs >= 1; k_max >= 0")
    if lr.eval_stride < 1 or lr.smoothing_dim < 0:
        raise ConfigError("learn: eval_stride >= 1 and smoothing_dim >= 0 required")


def parse(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    known = {"model", "noise", "population", "learn", "output"}
    for s in cp.sections():
        if s not in known:
            raise ConfigError(f"unknown section [{s}]")
    for s in ("model", "noise"):
        if not cp.has_section(s):
            raise ConfigError(f"missing section [{s}]")

    raw = dict(cp["model"])
    _take(raw, "model", _MATRIX_KEYS + ("gamma",))
    missing = [k for k in _MATRIX_KEYS + ("gamma",) if k not in raw]
    if missing:
        raise ConfigError(f"missing key '{missing[0]}' in section [model]")
    try:
        gamma = float(raw["gamma"])
    except ValueError as exc:
        raise ConfigError(f"model.gamma: cannot parse {raw['gamma']!r}") from exc
    model = ModelSection(**{k: parse_matrix(raw[k], f"model.{k}") for k in _MATRIX_KEYS}, gamma=gamma)

    raw = dict(cp["noise"])
    scale = raw.pop("gaussian_scale", "variance").strip()
    if scale not in ("variance", "std"):
        raise ConfigError(f"noise.gaussian_scale must be variance or std, got {scale!r}")
    grouped = {n: {} for n in NOISE_NAMES}
    for key, val in raw.items():
        name, _, attr = key.partition(".")
        if name not in grouped or not attr:
            raise ConfigError(f"unknown key '{key}' in section [noise]")
        grouped[name][attr] = val.strip()
    entries = {}
    for name, attrs in grouped.items():
        kind = attrs.pop("kind", None)
        if kind not in NoiseEntry.KEYS:
            raise ConfigError(f"noise.{name}.kind must be gaussian, uniform or degenerate")
        allowed = NoiseEntry.KEYS[kind]
        for a in attrs:
            if a not in allowed:
                raise ConfigError(f"unknown key '{name}.{a}' in section [noise]")
        for a in allowed:
            if a not in attrs:
                raise ConfigError(f"missing key '{name}.{a}' in section [noise]")
        kw = {}
        for a in allowed:
            kw[a] = parse_matrix(attrs[a], f"noise.{name}.{a}") if a == "cov" else parse_vector(
                attrs[a], f"noise.{name}.{a}"
            )
        entries[name] = NoiseEntry(kind, **kw)
    noise = NoiseSection(scale, **entries)

    population = None
    if cp.has_section("population"):
        population = _typed(PopulationSection, dict(cp["population"]), "population")
        if any(n < 1 for n in population.N + population.compare_N) or population.sweep_N < 1:
            raise ConfigError("population sizes must be >= 1")
    learn = _typed(LearnSection, dict(cp["learn"]), "learn") if cp.has_section("learn") else LearnSection()
    _check_learn(learn)
    output = _typed(OutputSection, dict(cp["output"]), "output") if cp.has_section("output") else OutputSection()
    bad = set(output.formats) - {"csv", "svg"}
    if bad:
        raise ConfigError(f"output.formats: unknown format '{sorted(bad)[0]}'")
    return ExperimentConfig(model, noise, population, learn, output)


def load(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return _fmt_num(v) if not v.is_integer() else repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return format_matrix(v)
        if v and isinstance(v[0], str):
            return ", ".join(v)
        return ", ".join(_fmt_num(x) if isinstance(x, float) else str(x) for x in v)
    return str(v)


def serialize(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["model"] = {k: format_matrix(getattr(cfg.model, k)) for k in _MATRIX_KEYS}
    cp["model"]["gamma"] = repr(float(cfg.model.gamma))
    noise = {"gaussian_scale": cfg.noise.gaussian_scale}
    for name in NOISE_NAMES:
        e = getattr(cfg.noise, name)
        noise[f"{name}.kind"] = e.kind
        for a in NoiseEntry.KEYS[e.kind]:
            val = getattr(e, a)
            noise[f"{name}.{a}"] = format_matrix(val) if a == "cov" else ", ".join(_fmt_num(x) for x in val)
    cp["noise"] = noise
    for name in ("population", "learn", "output"):
        sect = getattr(cfg, name)
        if sect is None:
            continue
        cp[name] = {f.name: _fmt_value(getattr(sect, f.name)) for f in fields(sect)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
