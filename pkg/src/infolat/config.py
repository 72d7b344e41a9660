"""JSON run configuration: strict parsing, defaults, and scenario setup.

A config file is one object with the blocks ``channel``, ``mac``, ``policy``,
``scenario`` and ``run``; every block and key is optional and falls back to
its default.  Unknown keys are errors.  :func:`materialize` gives back the
full config with every default filled in, which is what artifacts embed.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .age import AgePenalty
from .intersection import IntComm, IntersectionConfig
from .mac import SpsConfig
from .phy import ChannelModel, ResourceGrid
from .platoon import CommConfig, PlatoonConfig

CONFIG_VERSION = 1
SCENARIOS = ("platoon", "intersection", "policy-bench")
POLICY_KINDS = ("fixed", "smart-lite")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class MacBlock:
    sps: SpsConfig = field(default_factory=SpsConfig)
    grid: ResourceGrid = field(default_factory=ResourceGrid)


@dataclass
class PolicyBlock:
    kind: str = "fixed"
    # platoon: mode4 | ideal | fixed-latency; intersection: mode4 | ideal | lights
    comm_mode: str = "mode4"
    rri_ms: int = 100
    repetitions: int = 1
    fixed_latency_ms: int = 5
    epoch_ms: int = 200
    reward_penalty: AgePenalty = field(default_factory=AgePenalty.quadratic)
    online: bool = False
    selfish: bool = False
    epsilon: float = 0.0
    epsilon_final: float = 0.0
    pretrain_seed: int = 0
    # learner population the stylized pretraining assumes; None: the scenario's radio count
    pretrain_radios: int | None = None
    rsu_rri_ms: int = 20
    rx_power_dbm: float = -80.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"kind must be one of {POLICY_KINDS}, got {self.kind!r}")


@dataclass
class BenchInstance:
    n_terminals: int = 2
    success_prob: list | float = 1.0
    weights: list | float = 1.0


@dataclass
class BenchConfig:
    instances: list = field(default_factory=lambda: [BenchInstance()])
    policies: list = field(default_factory=lambda: ["round_robin", "max_index", "aloha", "threshold"])
    horizon: int = 100_000
    seeds: int = 4
    exceedance_bound: float = 10.0
    oracle_max_terminals: int = 3
    oracle_age_cap: int = 20

    def __post_init__(self):
        from .policies import POLICY_CODES

        bad = [p for p in self.policies if p not in POLICY_CODES]
        if bad:
            raise ValueError(f"unknown bench policies {bad}")
        if self.horizon < 1 or self.seeds < 1:
            raise ValueError("horizon and seeds must be positive")


SCENARIO_PARAMS = {"platoon": PlatoonConfig, "intersection": IntersectionConfig, "policy-bench": BenchConfig}


@dataclass
class ScenarioBlock:
    kind: str = "platoon"
    params: object = None

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"kind must be one of {SCENARIOS}, got {self.kind!r}")
        if self.params is None:
            self.params = SCENARIO_PARAMS[self.kind]()


@dataclass
class RunBlock:
    master_seed: int = 0
    runs: int = 100
    duration_ms: int | None = None
    output_dir: str | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        if self.duration_ms is not None and self.duration_ms < 0:
            raise ValueError("duration_ms must be non-negative")


@dataclass
class RootConfig:
    version: int = CONFIG_VERSION
    channel: ChannelModel = field(default_factory=ChannelModel)
    mac: MacBlock = field(default_factory=MacBlock)
    policy: PolicyBlock = field(default_factory=PolicyBlock)
    scenario: ScenarioBlock = field(default_factory=ScenarioBlock)
    run: RunBlock = field(default_factory=RunBlock)

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {self.version!r}")


# --- strict dict -> dataclass ------------------------------------------------

_NESTED = {
    (RootConfig, "channel"): ChannelModel,
    (RootConfig, "mac"): MacBlock,
    (RootConfig, "policy"): PolicyBlock,
    (RootConfig, "run"): RunBlock,
    (MacBlock, "sps"): SpsConfig,
    (MacBlock, "grid"): ResourceGrid,
    (PolicyBlock, "reward_penalty"): AgePenalty,
}


def _default(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return MISSING


def _check_type(value, default, where):
    if default is None or default is MISSING or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        return
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {type(value).__name__}")


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for k, v in data.items():
        sub = _NESTED.get((cls, k))
        if sub is not None:
            kw[k] = _build(sub, v, f"{where}.{k}")
        elif cls is ScenarioBlock and k == "params":
            continue
        else:
            _check_type(v, _default(known[k]), f"{where}.{k}")
            kw[k] = v
    if cls is ScenarioBlock:
        kind = data.get("kind", "platoon")
        if kind not in SCENARIOS:
            raise ConfigError(f"{where}.kind: must be one of {', '.join(SCENARIOS)}")
        kw["params"] = _build(SCENARIO_PARAMS[kind], data.get("params", {}), f"{where}.params")
    if cls is BenchConfig and "instances" in kw:
        kw["instances"] = [_build(BenchInstance, x, f"{where}.instances[{i}]") for i, x in enumerate(kw["instances"])]
    if cls is RootConfig and "scenario" in data:
        kw["scenario"] = _build(ScenarioBlock, data["scenario"], f"{where}.scenario")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(data: dict) -> RootConfig:
    return _build(RootConfig, data, "config")


def load_config(path) -> RootConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(data)


def to_jsonable(obj):
    if is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def materialize(cfg: RootConfig) -> dict:
    """Full config with all defaults filled in; round-trips through :func:`parse_config`."""
    return to_jsonable(cfg)


# --- scenario setup ------------------------------------------------------------


def platoon_setup(cfg: RootConfig) -> tuple[PlatoonConfig, CommConfig]:
    if cfg.scenario.kind != "platoon":
        raise ConfigError(f"scenario.kind is {cfg.scenario.kind!r}, expected 'platoon'")
    p = cfg.policy
    try:
        comm = CommConfig(
            mode=p.comm_mode, policy="smart" if p.kind == "smart-lite" else "fixed", rri_ms=p.rri_ms,
            repetitions=p.repetitions, fixed_latency_ms=p.fixed_latency_ms, channel=cfg.channel,
            sps=cfg.mac.sps, grid=cfg.mac.grid, epoch_ms=p.epoch_ms, reward_penalty=p.reward_penalty,
            online=p.online, selfish=p.selfish, epsilon=p.epsilon, epsilon_final=p.epsilon_final,
        )
    except ValueError as exc:
        raise ConfigError(f"config.policy: {exc}") from None
    return cfg.scenario.params, comm


def intersection_setup(cfg: RootConfig) -> tuple[IntersectionConfig, IntComm]:
    if cfg.scenario.kind != "intersection":
        raise ConfigError(f"scenario.kind is {cfg.scenario.kind!r}, expected 'intersection'")
    p = cfg.policy
    try:
        comm = IntComm(
            mode=p.comm_mode, policy="smart" if p.kind == "smart-lite" else "fixed", rri_ms=p.rri_ms,
            repetitions=p.repetitions, rsu_rri_ms=p.rsu_rri_ms, rx_power_dbm=p.rx_power_dbm, sps=cfg.mac.sps,
            grid=cfg.mac.grid, epoch_ms=p.epoch_ms, reward_penalty=p.reward_penalty, online=p.online,
            epsilon=p.epsilon, epsilon_final=p.epsilon_final,
        )
    except ValueError as exc:
        raise ConfigError(f"config.policy: {exc}") from None
    return cfg.scenario.params, comm


def default_config(scenario: str = "platoon") -> RootConfig:
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}")
    return RootConfig(scenario=ScenarioBlock(kind=scenario))
