"""Flat sectioned key=value run configuration.

The format is one level deep: ``[section]`` headers followed by
``key = value`` lines; full-line comments start with ``#`` or ``;``.
Every key has a documented default, unknown sections or keys are hard
errors with the offending line number, and emission is canonical so that
parse -> emit -> parse is the identity.

Market coefficients are piecewise constant: within a value, segments are
separated by commas, vector entries by spaces, and matrix rows by
semicolons (``gamma = 0.2 0; 0 0.3, 0.25 0; 0 0.3`` is two 2x2 segments).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .ambiguity import AmbiguitySet
from .errors import ConfigError
from .merton import CrraUtility, MarketModel

_ATTITUDE_CHOICES = ("upper", "lower", "pessimist", "optimist")
_DIRECTION_CHOICES = ("minimize", "maximize")
_PROBLEM_CHOICES = ("g_heat",)
_TERMINAL_CHOICES = ("x_squared", "minus_x_squared", "constant")
_FUNCTIONAL_CHOICES = ("terminal_square", "neg_terminal_square", "constant")


@dataclass(frozen=True)
class AmbiguityCfg:
    d: int = 1
    sigma_lo_sq: float = 0.25
    sigma_hi_sq: float = 1.0


@dataclass(frozen=True)
class MarketCfg:
    segment_starts: tuple = (0.0,)
    r: tuple = (0.02,)
    alpha: tuple = ((0.06,),)
    gamma: tuple = (((0.2,),),)


@dataclass(frozen=True)
class UtilityCfg:
    kappa: float = 2.0
    beta: float = 0.1


@dataclass(frozen=True)
class SolverCfg:
    problem: str = "g_heat"
    terminal: str = "x_squared"
    terminal_constant: float = 0.0
    x_min: float = -4.0
    x_max: float = 4.0
    n_x: int = 401
    n_t: int = 0  # 0 = derive the smallest stable step count
    horizon: float = 1.0
    attitude: str = "upper"
    direction: str = "minimize"
    n_pi: int = 41
    n_rho: int = 33
    debug_perturb_a: float = 0.0


@dataclass(frozen=True)
class SimulationCfg:
    n_paths: int = 2000
    n_steps: int = 200
    n_segments: int = 4
    n_grid: int = 5
    seed: int = 12345
    x0: float = 1.0
    functional: str = "terminal_square"
    functional_constant: float = 7.0


@dataclass(frozen=True)
class OutputCfg:
    directory: str = "out"
    prefix: str = "run"


@dataclass(frozen=True)
class RunConfig:
    ambiguity: AmbiguityCfg = AmbiguityCfg()
    market: MarketCfg = MarketCfg()
    utility: UtilityCfg = UtilityCfg()
    solver: SolverCfg = SolverCfg()
    simulation: SimulationCfg = SimulationCfg()
    output: OutputCfg = OutputCfg()

    def ambiguity_set(self) -> AmbiguitySet:
        a = self.ambiguity
        try:
            return AmbiguitySet(dim=a.d, sigma_lo_sq=a.sigma_lo_sq, sigma_hi_sq=a.sigma_hi_sq)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def market_model(self) -> MarketModel:
        mk = self.market
        try:
            return MarketModel.piecewise(mk.segment_starts, mk.r, mk.alpha, mk.gamma)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def crra(self) -> CrraUtility:
        ut = self.utility
        try:
            return CrraUtility(kappa=ut.kappa, beta=ut.beta)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _parse_float(text: str, line: int) -> float:
    try:
        v = float(text)
    except ValueError as exc:
        raise ConfigError(f"expected a number, got {text!r}", line) from exc
    if not (v == v and abs(v) != float("inf")):
        raise ConfigError(f"value must be finite, got {text!r}", line)
    return v


def _parse_int(text: str, line: int) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {text!r}", line) from exc


def _parse_floats(text: str, line: int) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError("expected a comma-separated list of numbers", line)
    return tuple(_parse_float(p, line) for p in parts)


def _parse_vec_segments(text: str, line: int) -> tuple:
    """Comma-separated segments, each a space-separated vector."""
    segs = []
    for seg in text.split(","):
        entries = seg.split()
        if not entries:
            raise ConfigError("empty vector segment", line)
        segs.append(tuple(_parse_float(e, line) for e in entries))
    return tuple(segs)


def _parse_mat_segments(text: str, line: int) -> tuple:
    """Comma-separated segments, each rows split by ';' and entries by spaces."""
    segs = []
    for seg in text.split(","):
        rows = []
        for row in seg.split(";"):
            entries = row.split()
            if not entries:
                raise ConfigError("empty matrix row", line)
            rows.append(tuple(_parse_float(e, line) for e in entries))
        width = {len(r) for r in rows}
        if len(width) != 1 or len(rows) != width.pop():
            raise ConfigError("matrix segments must be square", line)
        segs.append(tuple(rows))
    return tuple(segs)


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _fmt_vec_segments(segs: tuple) -> str:
    return ",".join(" ".join(_fmt_float(e) for e in seg) for seg in segs)


def _fmt_mat_segments(segs: tuple) -> str:
    return ",".join(";".join(" ".join(_fmt_float(e) for e in row) for row in seg) for seg in segs)


# (parser, formatter, choices) per key, in canonical emission order.
_SCHEMA: dict[str, dict[str, tuple]] = {
    "ambiguity": {
        "d": (_parse_int, str, None),
        "sigma_lo_sq": (_parse_float, _fmt_float, None),
        "sigma_hi_sq": (_parse_float, _fmt_float, None),
    },
    "market": {
        "segment_starts": (_parse_floats, lambda v: ",".join(_fmt_float(x) for x in v), None),
        "r": (_parse_floats, lambda v: ",".join(_fmt_float(x) for x in v), None),
        "alpha": (_parse_vec_segments, _fmt_vec_segments, None),
        "gamma": (_parse_mat_segments, _fmt_mat_segments, None),
    },
    "utility": {
        "kappa": (_parse_float, _fmt_float, None),
        "beta": (_parse_float, _fmt_float, None),
    },
    "solver": {
        "problem": (None, str, _PROBLEM_CHOICES),
        "terminal": (None, str, _TERMINAL_CHOICES),
        "terminal_constant": (_parse_float, _fmt_float, None),
        "x_min": (_parse_float, _fmt_float, None),
        "x_max": (_parse_float, _fmt_float, None),
        "n_x": (_parse_int, str, None),
        "n_t": (_parse_int, str, None),
        "horizon": (_parse_float, _fmt_float, None),
        "attitude": (None, str, _ATTITUDE_CHOICES),
        "direction": (None, str, _DIRECTION_CHOICES),
        "n_pi": (_parse_int, str, None),
        "n_rho": (_parse_int, str, None),
        "debug_perturb_a": (_parse_float, _fmt_float, None),
    },
    "simulation": {
        "n_paths": (_parse_int, str, None),
        "n_steps": (_parse_int, str, None),
        "n_segments": (_parse_int, str, None),
        "n_grid": (_parse_int, str, None),
        "seed": (_parse_int, str, None),
        "x0": (_parse_float, _fmt_float, None),
        "functional": (None, str, _FUNCTIONAL_CHOICES),
        "functional_constant": (_parse_float, _fmt_float, None),
    },
    "output": {
        "directory": (None, str, None),
        "prefix": (None, str, None),
    },
}

_SECTION_TYPES = {
    "ambiguity": AmbiguityCfg,
    "market": MarketCfg,
    "utility": UtilityCfg,
    "solver": SolverCfg,
    "simulation": SimulationCfg,
    "output": OutputCfg,
}


def parse_config_text(text: str) -> RunConfig:
    """Parse config text; unknown sections or keys are hard errors."""
    raw: dict[str, dict[str, tuple]] = {name: {} for name in _SCHEMA}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno)
        if section is None:
            raise ConfigError("key outside any [section]", lineno)
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]", lineno)
        if key in raw[section]:
            raise ConfigError(f"duplicate key {key!r} in section [{section}]", lineno)
        raw[section][key] = (value, lineno)

    sections = {}
    for name, keys in _SCHEMA.items():
        fields = {}
        for key, (parser, _fmt, choices) in keys.items():
            if key not in raw[name]:
                continue
            value, lineno = raw[name][key]
            if choices is not None:
                if value not in choices:
                    raise ConfigError(
                        f"{key} must be one of {choices}, got {value!r}", lineno
                    )
                fields[key] = value
            elif parser is str or parser is None:
                fields[key] = value
            else:
                fields[key] = parser(value, lineno)
        sections[name] = _SECTION_TYPES[name](**fields)

    cfg = RunConfig(**sections)
    _validate(cfg)
    return cfg


def parse_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def _validate(cfg: RunConfig) -> None:
    cfg.ambiguity_set()
    d = cfg.ambiguity.d
    mk = cfg.market
    n_seg = len(mk.segment_starts)
    if not (len(mk.r) == len(mk.alpha) == len(mk.gamma) == n_seg):
        raise ConfigError("market lists must have one entry per segment")
    for seg_a, seg_g in zip(mk.alpha, mk.gamma):
        if len(seg_a) != d:
            raise ConfigError(f"alpha segments must have {d} entries (ambiguity d)")
        if len(seg_g) != d:
            raise ConfigError(f"gamma segments must be {d}x{d} (ambiguity d)")
    cfg.market_model()
    cfg.crra()
    s = cfg.solver
    if not s.x_min < s.x_max:
        raise ConfigError("solver.x_min must be below solver.x_max")
    if s.n_x < 3:
        raise ConfigError("solver.n_x must be at least 3")
    if s.n_t < 0:
        raise ConfigError("solver.n_t must be 0 (auto) or positive")
    if not s.horizon > 0:
        raise ConfigError("solver.horizon must be positive")
    if s.n_pi < 2 or s.n_rho < 2:
        raise ConfigError("solver.n_pi and solver.n_rho must be at least 2")
    sim = cfg.simulation
    if sim.n_paths < 1 or sim.n_steps < 1 or sim.n_segments < 1 or sim.n_grid < 1:
        raise ConfigError("simulation sizes must be positive")
    if not cfg.output.prefix:
        raise ConfigError("output.prefix must be nonempty")


def canonical_text(cfg: RunConfig) -> str:
    """Emit every key in schema order; parse(canonical_text(cfg)) == cfg."""
    lines = []
    for name, keys in _SCHEMA.items():
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for key, (_parser, fmt, _choices) in keys.items():
            lines.append(f"{key} = {fmt(getattr(section, key))}")
        lines.append("")
    return "\n".join(lines)


def hjb_attitude(name: str) -> str:
    """Map a config attitude to the solver's upper/lower vocabulary."""
    return "upper" if name in ("upper", "optimist") else "lower"


def merton_attitude(name: str) -> str:
    """Map a config attitude to the portfolio pessimist/optimist vocabulary."""
    return "optimist" if name in ("upper", "optimist") else "pessimist"
