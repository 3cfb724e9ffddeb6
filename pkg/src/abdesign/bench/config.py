"""Benchmark configuration files.

INI-style text read with :mod:`configparser`::

    [experiment]
    env = binary
    n = 50
    replicates = 200
    seed = 2024
    alpha = 0.05
    degree = 2          # regression basis shared by every design
    # m0 = 12           # defaults to n // 4
    # ate_episodes = 0  # Monte Carlo days per arm when no exact ATE exists

    [env]
    p_s = 0.8
    T = 50
    delta = 0, 3, 6, 9  # a comma list sweeps the parameter

    [design random]
    [design nmdp]
    clip = 0.05

    [verify]
    tabular_instances = 20
    tabular_T = 2, 3

Every swept environment parameter multiplies the set of cells; each cell
runs every listed design.
"""
from __future__ import annotations

import configparser
import itertools
from dataclasses import dataclass, field
from typing import Optional

from ..core import ConfigError
from ..designs import DESIGNS, HYPERPARAMETERS
from ..environments import ENVIRONMENTS

EXPERIMENT_KEYS = {"env", "n", "m0", "replicates", "seed", "alpha", "degree", "out", "ate_episodes"}
VERIFY_DEFAULTS = {
    "tabular_instances": 20,
    "tabular_T": [2, 3],
    "tabular_K": 2,
    "tabular_seed": 0,
    "grid_step": 0.01,
    "binary_deltas": [0.0, 3.0, 6.0, 9.0],
    "binary_p_s": 0.8,
    "binary_T": 50,
}


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        text = ", ".join(format_value(v) for v in value)
        return text + "," if len(value) == 1 else text
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class DesignSpec:
    name: str
    params: dict = field(default_factory=dict)


@dataclass
class CellSpec:
    env_name: str
    env_params: dict
    env_id: str


@dataclass
class BenchConfig:
    env_name: str
    env_params: dict
    designs: list
    n: int = 50
    m0: Optional[int] = None
    replicates: int = 200
    seed: int = 0
    alpha: float = 0.05
    degree: int = 2
    out: Optional[str] = None
    ate_episodes: int = 0
    verify: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.env_name not in ENVIRONMENTS:
            raise ConfigError(f"unknown environment {self.env_name!r}")
        for d in self.designs:
            if d.name not in DESIGNS:
                raise ConfigError(f"unknown design {d.name!r}")
            bad = set(d.params) - set(HYPERPARAMETERS[d.name])
            if bad:
                raise ConfigError(f"design {d.name!r} does not take {sorted(bad)}")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if not 2 * self.burn_in < self.n:
            raise ConfigError(f"need n > 2 * m0, got n={self.n}, m0={self.burn_in}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def burn_in(self) -> int:
        return self.n // 4 if self.m0 is None else self.m0

    def cells(self) -> list:
        swept = sorted(k for k, v in self.env_params.items() if isinstance(v, list))
        fixed = {k: v for k, v in self.env_params.items() if not isinstance(v, list)}
        out = []
        for combo in itertools.product(*[self.env_params[k] for k in swept]):
            params = dict(fixed)
            params.update(zip(swept, combo))
            label = ",".join(f"{k}={format_value(v)}" for k, v in zip(swept, combo))
            env_id = f"{self.env_name}[{label}]" if label else self.env_name
            out.append(CellSpec(self.env_name, params, env_id))
        return out

    def verify_settings(self) -> dict:
        s = dict(VERIFY_DEFAULTS)
        s.update(self.verify)
        return s


def parse_config(text: str, source: str = "<config>") -> BenchConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str  # keep parameter case (T)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if not cp.has_section("experiment"):
        raise ConfigError(f"{source}: missing [experiment] section")
    exp = {k: parse_value(v) for k, v in cp.items("experiment")}
    unknown = set(exp) - EXPERIMENT_KEYS
    if unknown:
        raise ConfigError(f"{source}: unknown experiment keys {sorted(unknown)}")
    if "env" not in exp:
        raise ConfigError(f"{source}: [experiment] needs env")
    env_params = {k: parse_value(v) for k, v in cp.items("env")} if cp.has_section("env") else {}
    designs = []
    for sec in cp.sections():
        if sec.startswith("design"):
            name = sec[len("design"):].strip(" :")
            if not name:
                raise ConfigError(f"{source}: design section without a name")
            designs.append(DesignSpec(name, {k: parse_value(v) for k, v in cp.items(sec)}))
    known = {"experiment", "env", "verify"}
    stray = [s for s in cp.sections() if s not in known and not s.startswith("design")]
    if stray:
        raise ConfigError(f"{source}: unknown sections {stray}")
    verify = {k: parse_value(v) for k, v in cp.items("verify")} if cp.has_section("verify") else {}
    try:
        return BenchConfig(
            env_name=str(exp["env"]), env_params=env_params, designs=designs,
            n=int(exp.get("n", 50)), m0=None if "m0" not in exp else int(exp["m0"]),
            replicates=int(exp.get("replicates", 200)), seed=int(exp.get("seed", 0)),
            alpha=float(exp.get("alpha", 0.05)), degree=int(exp.get("degree", 2)),
            out=None if "out" not in exp else str(exp["out"]),
            ate_episodes=int(exp.get("ate_episodes", 0)), verify=verify,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> BenchConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def serialize_config(cfg: BenchConfig) -> str:
    lines = ["[experiment]", f"env = {cfg.env_name}", f"n = {cfg.n}"]
    if cfg.m0 is not None:
        lines.append(f"m0 = {cfg.m0}")
    lines += [f"replicates = {cfg.replicates}", f"seed = {cfg.seed}",
              f"alpha = {format_value(cfg.alpha)}", f"degree = {cfg.degree}"]
    if cfg.out is not None:
        lines.append(f"out = {cfg.out}")
    if cfg.ate_episodes:
        lines.append(f"ate_episodes = {cfg.ate_episodes}")
    lines += ["", "[env]"] + [f"{k} = {format_value(v)}" for k, v in cfg.env_params.items()]
    for d in cfg.designs:
        lines += ["", f"[design {d.name}]"] + [f"{k} = {format_value(v)}" for k, v in d.params.items()]
    if cfg.verify:
        lines += ["", "[verify]"] + [f"{k} = {format_value(v)}" for k, v in cfg.verify.items()]
    return "\n".join(lines) + "\n"
