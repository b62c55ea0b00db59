"""Flat key = value config files with section headers.

Unknown sections or keys are errors so typos cannot silently change a
run. The same [model]/[opt]/[rl] blocks configure single-stage runs
(``train --config``) and experiment grids (``compare --config``); grids
additionally carry per-stage [cpt]/[sft] optimizer overrides.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

STAGES = ("cpt", "sft_direct", "sft_cot", "rl")

# paper-shaped per-stage base learning rates; a single multiplier scales
# them into the toy regime
BASE_LR = {"cpt": 1e-5, "sft_direct": 1e-4, "sft_cot": 1e-4, "rl": 1e-6}


class ConfigError(Exception):
    pass


@dataclass
class ModelParams:
    window: int = 48
    embed: int = 16
    hidden: int = 64


@dataclass
class OptParams:
    optimizer: str = "adam"
    lr_multiplier: float = 100.0
    epochs: int = 5
    batch_size: int = 32
    max_records: int = 0  # 0 = use every record


@dataclass
class RlParams:
    algorithm: str = "grpo"
    steps: int = 200
    group_size: int = 8
    rollout_batch: int = 8
    temperature: float = 1.0
    max_new_tokens: int = 64
    updates_per_batch: int = 1
    eps_low: float = 0.2
    eps_high: float = 0.3
    beta_kl: float = 0.01
    max_retries: int = 20
    format_weight: float = 0.1


@dataclass
class StageConfig:
    stage: str = "sft_cot"
    seed: int = 0
    data: Path = Path("data")
    out: Path = Path("run")
    init: Path | None = None
    model: ModelParams = field(default_factory=ModelParams)
    opt: OptParams = field(default_factory=OptParams)
    rl: RlParams = field(default_factory=RlParams)

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        from .rl import ALGORITHMS

        if self.rl.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.rl.algorithm!r}")

    @property
    def learning_rate(self) -> float:
        return BASE_LR[self.stage] * self.opt.lr_multiplier


@dataclass
class ExperimentConfig:
    methods: list[str] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0])
    data: Path = Path("data")
    out: Path = Path("runs")
    eval_limit: int = 0
    model: ModelParams = field(default_factory=ModelParams)
    cpt_opt: OptParams = field(default_factory=lambda: OptParams(epochs=5))
    sft_opt: OptParams = field(default_factory=OptParams)
    rl_opt: OptParams = field(default_factory=lambda: OptParams(epochs=1))
    rl: RlParams = field(default_factory=RlParams)


def _coerce(value: str, template):
    if isinstance(template, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {value!r}")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    if isinstance(template, Path) or template is None:
        return Path(value)
    return value


def _apply_section(obj, section: str, items: dict[str, str]):
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        try:
            updates[key] = _coerce(raw, known[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
    return replace(obj, **updates)


def _read_ini(path: Path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive
    found = parser.read(path)
    if not found:
        raise ConfigError(f"config file not found: {path}")
    return parser


def parse_stage_config(path: Path) -> StageConfig:
    parser = _read_ini(path)
    cfg = StageConfig()
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "run":
            cfg = _apply_section(cfg, "run", items)
        elif section == "model":
            cfg.model = _apply_section(cfg.model, "model", items)
        elif section == "opt":
            cfg.opt = _apply_section(cfg.opt, "opt", items)
        elif section == "rl":
            cfg.rl = _apply_section(cfg.rl, "rl", items)
        else:
            raise ConfigError(f"unknown section [{section}]")
    cfg.validate()
    return cfg


def _parse_list(raw: str) -> list[str]:
    return [part.strip() for part in raw.split(",") if part.strip()]


def parse_experiment_config(path: Path) -> ExperimentConfig:
    parser = _read_ini(path)
    cfg = ExperimentConfig()
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "experiment":
            for key, raw in items.items():
                if key == "methods":
                    cfg.methods = _parse_list(raw)
                elif key == "seeds":
                    try:
                        cfg.seeds = [int(s) for s in _parse_list(raw)]
                    except ValueError:
                        raise ConfigError(f"bad seed list {raw!r}") from None
                elif key == "data":
                    cfg.data = Path(raw)
                elif key == "out":
                    cfg.out = Path(raw)
                elif key == "eval_limit":
                    cfg.eval_limit = int(raw)
                else:
                    raise ConfigError(f"unknown key {key!r} in section [experiment]")
        elif section == "model":
            cfg.model = _apply_section(cfg.model, "model", items)
        elif section == "cpt":
            cfg.cpt_opt = _apply_section(cfg.cpt_opt, "cpt", items)
        elif section == "sft":
            cfg.sft_opt = _apply_section(cfg.sft_opt, "sft", items)
        elif section == "rl":
            combined_fields = {f.name for f in fields(RlParams)}
            rl_items = {k: v for k, v in items.items() if k in combined_fields}
            opt_items = {k: v for k, v in items.items() if k not in combined_fields}
            cfg.rl = _apply_section(cfg.rl, "rl", rl_items)
            cfg.rl_opt = _apply_section(cfg.rl_opt, "rl", opt_items)
        else:
            raise ConfigError(f"unknown section [{section}]")
    if not cfg.methods:
        raise ConfigError("experiment config must list at least one method")
    return cfg
