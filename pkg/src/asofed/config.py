"""Flat ``section.key = value`` run configuration.

Every key, its default and its constraint is declared once in the section
dataclasses below; ``config_reference`` renders that table.  A file may
start from a bundled preset with ``extends = <preset name>``.
"""

from __future__ import annotations

import copy
import difflib
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

PRESET_DIR = Path(__file__).with_name("presets")


class ConfigError(ValueError):
    pass


def _opt(default, help, check=None, key=None):
    return field(default=default, metadata={"help": help, "check": check, "key": key})


def _in(*choices):
    return lambda v: None if v in choices else f"must be one of {', '.join(map(str, choices))}"


def _range(lo=None, hi=None, lo_open=False, hi_open=False):
    def check(v):
        if lo is not None and (v < lo or (lo_open and v == lo)):
            return f"must be {'>' if lo_open else '>='} {lo}"
        if hi is not None and (v > hi or (hi_open and v == hi)):
            return f"must be {'<' if hi_open else '<='} {hi}"
        return None
    return check


_positive = _range(0, lo_open=True)
_nonneg = _range(0)
_unit = _range(0, 1)
_at_least_one = _range(1)


@dataclass
class DataConfig:
    source: str = _opt("synthetic-classification", "synthetic-classification | synthetic-regression | fashion-mnist",
                       _in("synthetic-classification", "synthetic-regression", "fashion-mnist"))
    n_clients: int = _opt(20, "number of clients K", _at_least_one)
    n_classes: int = _opt(10, "classes of the synthetic classification data", _range(2))
    dim: int = _opt(32, "feature dimension of synthetic data", _at_least_one)
    samples_per_class: int = _opt(1200, "synthetic classification samples per class", _at_least_one)
    separation: float = _opt(5.0, "synthetic class-centre separation", _positive)
    dissimilarity: float = _opt(1.0, "synthetic regression: norm of per-client optimum shift", _nonneg)
    samples_per_client: int = _opt(300, "synthetic regression samples per client", _range(5))
    shard_ratio: tuple = _opt((2000.0, 2750.0, 3250.0, 4000.0), "relative shard sizes within each class")
    shards_per_client: int = _opt(2, "label shards per client", _at_least_one)
    growth_min: float = _opt(0.0005, "lower bound of per-client stream growth per round", _unit)
    growth_max: float = _opt(0.001, "upper bound of per-client stream growth per round", _unit)
    initial_fraction_min: float = _opt(0.1, "lower bound of the initially visible train fraction", _range(0, 1, lo_open=True))
    initial_fraction_max: float = _opt(0.5, "upper bound of the initially visible train fraction", _range(0, 1, lo_open=True))
    train_rate: float = _opt(1.0, "fraction of each train split that can ever become visible", _range(0, 1, lo_open=True))
    path: str = _opt("", "Fashion-MNIST directory (default $ASOFED_DATA_DIR)")
    seed: int = _opt(0, "data seed (partition, splits, synthetic draws)")


@dataclass
class ModelConfig:
    family: str = _opt("mlp-1hidden", "linear-regression | logistic-classification | mlp-1hidden",
                       _in("linear-regression", "logistic-classification", "mlp-1hidden"))
    hidden_dim: int = _opt(32, "hidden units of mlp-1hidden", _at_least_one)


@dataclass
class ClientConfig:
    algorithm: str = _opt("asofed", "asofed | fedavg | fedprox | fedasync",
                          _in("asofed", "fedavg", "fedprox", "fedasync"))
    lam: float = _opt(1.0, "proximal weight lambda (also FedProx mu)", _nonneg, key="lambda")
    beta: float = _opt(0.001, "decay coefficient in [0, 1)", _range(0, 1, hi_open=True))
    base_lr: float = _opt(0.001, "base learning rate", _positive)
    epochs: int = _opt(2, "local epochs E", _at_least_one)
    batch_size: int = _opt(32, "mini-batch size B (0 = full visible data)", _nonneg)
    dynamic_lr: bool = _opt(True, "scale the step by max(1, ln(mean round duration)); false gives ASO-Fed(-D)")
    balance: bool = _opt(True, "use decay-balanced gradients (false: plain proximal SGD)")
    balance_order: str = _opt("alg2", "accumulator update order: alg2 | eq9", _in("alg2", "eq9"))
    fedasync_rho: float = _opt(0.005, "FedAsync proximal weight rho", _nonneg)


@dataclass
class ServerConfig:
    strategy: str = _opt("auto", "auto | asofed | fedavg | fedasync (auto follows client.algorithm)",
                         _in("auto", "asofed", "fedavg", "fedasync"))
    feature_reweight: bool = _opt(True, "softmax re-weight the first layer after each aggregation; false gives ASO-Fed(-F)")
    reweight_axis: str = _opt("row", "normalize re-weighting over each row or each column", _in("row", "column"))
    reweight_scale: str = _opt("none", "post-scaling of re-weighted slices: none | mean | norm", _in("none", "mean", "norm"))
    delta_base: str = _opt("dispatched", "base of the client delta: dispatched | current", _in("dispatched", "current"))
    fraction: float = _opt(0.2, "FedAvg/FedProx client fraction C", _range(0, 1, lo_open=True))
    fedasync_alpha: float = _opt(0.6, "FedAsync mixing weight", _range(0, 1, lo_open=True))
    fedasync_a: float = _opt(0.5, "FedAsync polynomial staleness exponent", _nonneg)


@dataclass
class SimConfig:
    max_iter: int = _opt(1000, "stop after this many aggregations", _at_least_one)
    max_time: float = _opt(3000.0, "stop at this simulated time (seconds)", _positive)
    delay_min: float = _opt(10.0, "lower bound of per-client base delay (s)", _positive)
    delay_max: float = _opt(100.0, "upper bound of per-client base delay (s)", _positive)
    jitter: float = _opt(0.1, "multiplicative delay jitter in [0, 1)", _range(0, 1, hi_open=True))
    compute_per_sample: float = _opt(0.0, "simulated compute seconds per visible sample per round", _nonneg)
    permanent_dropout: float = _opt(0.0, "fraction of clients silent for the whole run", _unit)
    periodic_dropout: float = _opt(0.0, "per-round probability that a client sits out", _unit)
    eval_every: int = _opt(1, "evaluate and emit a record every n aggregations", _at_least_one)
    target: typing.Optional[float] = _opt(None, "target value of target_metric for time-to-target")
    target_metric: str = _opt("", "metric used for targets and summaries (default accuracy / smape)",
                              _in("", "accuracy", "f1", "precision", "recall", "balanced_accuracy", "mae", "smape"))
    data_tick: float = _opt(0.0, "if > 0, every client's stream also grows every data_tick seconds", _nonneg)


@dataclass
class ProbeConfig:
    which: str = _opt("lemma1", "lemma1 | thm1 | thm2 | dissimilarity", _in("lemma1", "thm1", "thm2", "dissimilarity"))
    n_seeds: int = _opt(30, "Monte-Carlo seeds for theorem probes", _at_least_one)
    n_clients: int = _opt(4, "clients in the probe federation", _at_least_one)
    dim: int = _opt(5, "parameter dimension of probe objectives", _at_least_one)
    dissimilarity: float = _opt(0.0, "optimum shift of probe clients", _nonneg)
    samples_per_client: int = _opt(200, "samples per probe client", _range(5))
    steps: int = _opt(200, "global iterations per probe run", _at_least_one)
    lr_fraction: float = _opt(0.5, "client step as a fraction of the admissible ceiling", _range(0, 1, lo_open=True, hi_open=True))
    n_points: int = _opt(1000, "random points for the Lemma 1 check", _at_least_one)
    n_objectives: int = _opt(10, "random quadratics for the Lemma 1 check", _at_least_one)


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "client": ClientConfig,
    "server": ServerConfig,
    "sim": SimConfig,
    "probe": ProbeConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    client: ClientConfig = field(default_factory=ClientConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int = 0
    output: str = "runs"

    @property
    def strategy(self) -> str:
        if self.server.strategy != "auto":
            return self.server.strategy
        return {"fedprox": "fedavg"}.get(self.client.algorithm, self.client.algorithm)

    @property
    def label(self) -> str:
        """Strategy name for reports, including ablation suffixes."""
        name = self.client.algorithm
        if name == "asofed":
            off = []
            if not self.server.feature_reweight:
                off.append("F")
            if not self.client.dynamic_lr:
                off.append("D")
            if off:
                name += "(-" + ",".join(off) + ")"
        return name

    def copy(self) -> RunConfig:
        return copy.deepcopy(self)


def _key_table():
    table = {"seed": (None, "seed", int, None, "simulation seed (clients, delays, dropouts, init)", 0),
             "output": (None, "output", str, None, "output directory", "runs")}
    for sec, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            key = f"{sec}.{f.metadata.get('key') or f.name}"
            table[key] = (sec, f.name, hints[f.name], f.metadata.get("check"),
                          f.metadata.get("help", ""), f.default)
    return table


KEYS = _key_table()


def _parse_scalar(tp, raw: str, key: str):
    s = raw.strip()
    try:
        if tp is bool:
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if tp is int:
            return int(s)
        if tp is float:
            return float(s)
        if tp is tuple:
            return tuple(float(x) for x in s.split(",") if x.strip())
        if tp == typing.Optional[float]:
            return None if s.lower() in ("", "none", "null") else float(s)
        return s.strip('"').strip("'")
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def set_value(cfg: RunConfig, key: str, raw) -> None:
    """Assign one dotted key from its textual (or already typed) value."""
    if key not in KEYS:
        near = difflib.get_close_matches(key, list(KEYS), n=1)
        hint = f"; did you mean {near[0]!r}?" if near else ""
        raise ConfigError(f"unknown key {key!r}{hint}")
    sec, name, tp, check, _, _ = KEYS[key]
    value = _parse_scalar(tp, raw, key) if isinstance(raw, str) else raw
    if check is not None and value is not None:
        msg = check(value)
        if msg:
            raise ConfigError(f"{key} = {value!r}: {msg}")
    setattr(getattr(cfg, sec) if sec else cfg, name, value)


def get_value(cfg: RunConfig, key: str):
    sec, name = KEYS[key][:2]
    return getattr(getattr(cfg, sec) if sec else cfg, name)


def _read_pairs(text: str, origin: str):
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def resolve_path(path) -> Path:
    """Existing file, else a bundled preset by name (``presets/x`` or ``x``)."""
    p = Path(path)
    if p.is_file():
        return p
    name = p.name[:-4] if p.name.endswith(".cfg") else p.name
    cand = PRESET_DIR / f"{name}.cfg"
    if cand.is_file():
        return cand
    raise ConfigError(f"config file {path} not found (and no preset named {name!r})")


def list_presets() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.cfg"))


def parse_text(text: str, origin: str = "<string>", _depth=0) -> RunConfig:
    pairs = _read_pairs(text, origin)
    cfg = RunConfig()
    if pairs and pairs[0][0] == "extends":
        if _depth > 8:
            raise ConfigError(f"{origin}: extends chain too deep")
        base = resolve_path(pairs[0][1])
        cfg = parse_text(base.read_text(), str(base), _depth + 1)
        pairs = pairs[1:]
    for k, v in pairs:
        if k == "extends":
            raise ConfigError(f"{origin}: 'extends' must be the first key")
        set_value(cfg, k, v)
    validate(cfg)
    return cfg


def parse_config(path) -> RunConfig:
    p = resolve_path(path)
    return parse_text(p.read_text(), str(p))


def validate(cfg: RunConfig) -> None:
    """Cross-field checks (single-key ranges are checked on assignment)."""
    d, s = cfg.data, cfg.sim
    if d.growth_min > d.growth_max:
        raise ConfigError("data.growth_min must be <= data.growth_max")
    if d.initial_fraction_min > d.initial_fraction_max:
        raise ConfigError("data.initial_fraction_min must be <= data.initial_fraction_max")
    if s.delay_min > s.delay_max:
        raise ConfigError("sim.delay_min must be <= sim.delay_max")
    if not d.shard_ratio or min(d.shard_ratio) <= 0:
        raise ConfigError("data.shard_ratio must be a non-empty list of positive numbers")
    family = cfg.model.family
    if d.source == "synthetic-regression" and family != "linear-regression" and family != "mlp-1hidden":
        raise ConfigError(f"model.family {family} cannot fit a regression source")
    if d.source != "synthetic-regression" and family == "linear-regression":
        raise ConfigError(f"model.family linear-regression cannot fit source {d.source}")
    if cfg.client.algorithm in ("fedavg", "fedprox") and cfg.strategy != "fedavg":
        raise ConfigError(f"client.algorithm {cfg.client.algorithm} needs server.strategy fedavg")


def validate_files(cfg: RunConfig) -> None:
    """Check that referenced data files exist (done at run time)."""
    if cfg.data.source == "fashion-mnist":
        from .data import find_fashion_mnist
        if find_fashion_mnist(cfg.data.path or None) is None:
            where = cfg.data.path or os.environ.get("ASOFED_DATA_DIR") or "<unset ASOFED_DATA_DIR>"
            raise ConfigError(f"Fashion-MNIST IDX files not found under {where}")


def config_reference() -> str:
    lines = ["# key = default    # description"]
    for key, (_, _, _, _, help, default) in KEYS.items():
        if isinstance(default, tuple):
            shown = ",".join(f"{x:g}" for x in default)
        elif default is None:
            shown = "none"
        elif isinstance(default, bool):
            shown = str(default).lower()
        else:
            shown = str(default)
        lines.append(f"{key} = {shown}    # {help}")
    return "\n".join(lines) + "\n"


def to_text(cfg: RunConfig) -> str:
    """Fully expanded config, one key per line (round-trips through parse_text)."""
    out = []
    for key in KEYS:
        v = get_value(cfg, key)
        if isinstance(v, tuple):
            v = ",".join(repr(float(x)) for x in v)
        elif v is None:
            v = "none"
        elif isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{key} = {v}")
    return "\n".join(out) + "\n"
