"""INI scenario configuration with every default materialized.

Sections: ``[scenario] [plant] [lqr] [coverage] [importance] [controller] [run]``.
Keys missing from a file are filled from the defaults of the scenario kind;
unknown keys are errors.  ``resolved_text`` renders the complete
configuration, and loading it back gives the same object.
"""
import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass
from pathlib import Path

KINDS = ("shape", "quadrotor")
METHODS = ("active", "equilibrium", "babble")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSection:
    name: str
    kind: str
    method: str
    seed: int


@dataclass(frozen=True)
class LqrSection:
    q_diag: tuple
    r_diag: tuple
    radius_samples: int


@dataclass(frozen=True)
class CoverageSection:
    indices: tuple[int, ...]
    domain_lo: tuple
    domain_hi: tuple
    sigma_scale: float
    n_samples: int
    t_r: float
    buffer_capacity: int


@dataclass(frozen=True)
class ImportanceSection:
    capacity: int
    lengthscale: tuple
    signal_var: float
    jitter: float


@dataclass(frozen=True)
class ControllerSection:
    dt: float
    horizon: float
    lambda_max: float
    r_reg: tuple
    task_q: tuple
    explore_until: float


@dataclass(frozen=True)
class RunSection:
    duration: float
    init_noise: float
    noise_fraction: float
    shape_amplitude: float
    shape_frequency: float
    rmse_points: int
    eval_points: int


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: ScenarioSection
    plant: dict
    lqr: LqrSection
    coverage: CoverageSection
    importance: ImportanceSection
    controller: ControllerSection
    run: RunSection

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return dataclasses.replace(self, scenario=dataclasses.replace(self.scenario, seed=int(seed)))

    @property
    def n_steps(self) -> int:
        return int(round(self.run.duration / self.controller.dt))


_SECTIONS = {
    "scenario": ScenarioSection,
    "lqr": LqrSection,
    "coverage": CoverageSection,
    "importance": ImportanceSection,
    "controller": ControllerSection,
    "run": RunSection,
}

_PLANT_TYPES = {
    "shape": {"m_cart": float, "m1": float, "m2": float, "l1": float, "l2": float,
              "gravity": float, "force_limit": float},
    "quadrotor": {"mass": float, "inertia": tuple, "arm": float, "yaw_coeff": float,
                  "gravity": float, "thrust_max": float},
}

_COMMON = {
    "run": {"init_noise": "0.01", "noise_fraction": "0.33", "shape_amplitude": "0.5",
            "shape_frequency": "8.0", "rmse_points": "101", "eval_points": "10"},
    "coverage": {"n_samples": "100", "buffer_capacity": "2000"},
}

DEFAULTS = {
    "shape": {
        "scenario": {"name": "shape", "method": "active", "seed": "0"},
        "plant": {"m_cart": "1.0", "m1": "0.1", "m2": "0.1", "l1": "0.5", "l2": "0.5",
                  "gravity": "9.81", "force_limit": "100.0"},
        "lqr": {"q_diag": "1, 1, 1, 1, 1, 1", "r_diag": "1", "radius_samples": "200"},
        "coverage": {"indices": "0", "domain_lo": "-0.5", "domain_hi": "0.5", "sigma_scale": "0.1", "t_r": "4.0"},
        "importance": {"capacity": "50", "lengthscale": "0.1", "signal_var": "0.25", "jitter": "1e-4"},
        "controller": {"dt": "0.02", "horizon": "1.0", "lambda_max": "0.1", "r_reg": "2.5",
                       "task_q": "0, 0, 0, 0, 0, 0", "explore_until": "14.0"},
        "run": {"duration": "20.0"},
    },
    "quadrotor": {
        "scenario": {"name": "quadrotor", "method": "active", "seed": "0"},
        "plant": {"mass": "0.5", "inertia": "4.9e-3, 4.9e-3, 8.8e-3", "arm": "0.175",
                  "yaw_coeff": "0.05", "gravity": "9.81", "thrust_max": "2.5"},
        "lqr": {"q_diag": ", ".join(["1"] * 12), "r_diag": "1, 1, 1, 1", "radius_samples": "200"},
        "coverage": {"indices": "3, 4, 5, 9, 10, 11", "domain_lo": ", ".join(["-1"] * 6),
                     "domain_hi": ", ".join(["1"] * 6), "sigma_scale": "0.2", "t_r": "1.0"},
        "importance": {"capacity": "80", "lengthscale": "1.0", "signal_var": "1.0", "jitter": "1e-4"},
        "controller": {"dt": "0.02", "horizon": "0.5", "lambda_max": "0.2", "r_reg": "0.1, 0.1, 0.1, 0.1",
                       "task_q": "1, 1, 1, 0, 0, 0, 1, 1, 1, 0, 0, 0", "explore_until": "20.0"},
        "run": {"duration": "20.0"},
    },
}


def _parse(tp, raw: str, where: str):
    try:
        if tp is tuple:
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if tp == tuple[int, ...]:
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw.strip()
    except ValueError as err:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {tp.__name__}") from err


def _merged(parser: configparser.ConfigParser) -> dict:
    kind = parser.get("scenario", "kind", fallback=None)
    if kind not in KINDS:
        raise ConfigError(f"[scenario] kind must be one of {KINDS}, got {kind!r}")
    values = {sec: dict(_COMMON.get(sec, {})) for sec in ["scenario", "plant", *list(_SECTIONS)[1:]]}
    for sec, kv in DEFAULTS[kind].items():
        values[sec].update(kv)
    values["scenario"]["kind"] = kind
    for sec in parser.sections():
        if sec not in values:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in values[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            values[sec][key] = raw
    return values


def _build(values: dict) -> ScenarioConfig:
    kind = values["scenario"]["kind"]
    out = {}
    for sec, cls in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        out[sec] = cls(**{f.name: _parse(hints[f.name], values[sec][f.name], f"[{sec}] {f.name}")
                          for f in dataclasses.fields(cls)})
    out["plant"] = {k: _parse(tp, values["plant"][k], f"[plant] {k}") for k, tp in _PLANT_TYPES[kind].items()}
    cfg = ScenarioConfig(**out)
    validate(cfg)
    return cfg


def validate(cfg: ScenarioConfig) -> None:
    s, c, co, im, lq = cfg.scenario, cfg.controller, cfg.coverage, cfg.importance, cfg.lqr
    n, m = (6, 1) if s.kind == "shape" else (12, 4)
    v = len(co.indices)
    gp_dim = 1 if s.kind == "shape" else n + m
    checks = [
        (s.method in METHODS, f"method must be one of {METHODS}"),
        (c.dt > 0 and c.horizon >= c.dt, "need 0 < dt <= horizon"),
        (0 <= c.lambda_max < c.horizon, "need 0 <= lambda_max < horizon"),
        (len(c.r_reg) == m and min(c.r_reg) > 0, f"r_reg needs {m} positive entries"),
        (len(c.task_q) == n and min(c.task_q) >= 0, f"task_q needs {n} non-negative entries"),
        (len(lq.q_diag) == n and min(lq.q_diag) > 0, f"q_diag needs {n} positive entries"),
        (len(lq.r_diag) == m and min(lq.r_diag) > 0, f"r_diag needs {m} positive entries"),
        (v >= 1 and len(set(co.indices)) == v and all(0 <= i < n + m for i in co.indices),
         f"coverage indices must be distinct entries of (x, u), 0..{n + m - 1}"),
        (s.kind == "quadrotor" or co.indices == (0,), "shape coverage runs over the cart position (index 0)"),
        (len(co.domain_lo) == v and len(co.domain_hi) == v, f"domain bounds need {v} entries"),
        (all(a < b for a, b in zip(co.domain_lo, co.domain_hi)), "domain_lo must be below domain_hi"),
        (co.n_samples >= 1 and co.sigma_scale > 0 and co.t_r >= 0, "bad coverage settings"),
        (im.capacity >= 1 and im.signal_var > 0 and im.jitter > 0, "bad importance settings"),
        (len(im.lengthscale) in (1, gp_dim) and min(im.lengthscale) > 0, f"lengthscale needs 1 or {gp_dim} entries"),
        (cfg.run.duration > 0 and cfg.run.noise_fraction >= 0, "bad run settings"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def load_config(source) -> ScenarioConfig:
    """Load from a path or from INI text."""
    parser = configparser.ConfigParser(interpolation=None)
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and "[" not in source):
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"no such config file: {path}")
        parser.read(path, encoding="utf-8")
    else:
        parser.read_string(source)
    return _build(_merged(parser))


def _render(value) -> str:
    if isinstance(value, tuple) and all(isinstance(v, int) for v in value):
        return ", ".join(str(v) for v in value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_text(cfg: ScenarioConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser["scenario"] = {k: _render(v) for k, v in dataclasses.asdict(cfg.scenario).items()}
    parser["plant"] = {k: _render(v) for k, v in cfg.plant.items()}
    for sec in list(_SECTIONS)[1:]:
        parser[sec] = {k: _render(v) for k, v in dataclasses.asdict(getattr(cfg, sec)).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
