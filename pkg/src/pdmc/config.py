"""Experiment configuration: defaults, flat key=value files and CLI overrides."""

import os
from dataclasses import asdict, dataclass, fields
from typing import Optional, get_args

OUTPUT_ENV = "PDMC_OUTPUT_DIR"


class ConfigValidationError(ValueError):
    pass


def default_output_dir():
    return os.environ.get(OUTPUT_ENV, "runs")


@dataclass
class ExperimentConfig:
    # sampler
    algo: str = "zigzag"
    estimator: str = "exact"
    bound: str = "sum"
    refresh_rate: Optional[float] = None  # None: 1 per posterior sd of travel
    epsilon: float = 0.0
    hybrid_k: float = 5.0
    T: float = 1e4
    burn_in: Optional[float] = None  # None: 10% of T
    ess_dt: Optional[float] = None  # None: min(1, posterior sd / 4)
    # target
    target: str = "mixture"
    n: int = 150
    p: float = 0.95
    x_true: float = 4.0
    data_seed: int = 19
    dataset: Optional[str] = None
    d: int = 1
    # CIS / SMC
    N: int = 200
    h: float = 1.0
    K: int = 100
    ess_threshold: float = 100.0
    rate: float = 12.0
    rate_policy: str = "constant"
    rho: str = "exact"
    proposal: str = "brownian"
    nu: float = 4.0
    init: str = "prior"
    init_lo: float = -10.0
    init_hi: float = -5.0
    hist_t_min: Optional[float] = None  # None: T/4 of the SMC horizon
    # variance study
    replicates: int = 2000
    # run control
    seed: int = 0
    stream: int = 0
    out_dir: Optional[str] = None
    cache_dir: Optional[str] = None
    tag: str = ""

    def as_dict(self):
        return asdict(self)

    @property
    def burn_in_time(self):
        return 0.1 * self.T if self.burn_in is None else self.burn_in

    @property
    def output_dir(self):
        return self.out_dir or default_output_dir()

    def validate(self):
        if self.algo not in ("reflect", "bps", "zigzag"):
            raise ConfigValidationError(f"unknown algo {self.algo!r}")
        if self.estimator not in ("exact", "simple", "nonuniform", "cv", "hybrid"):
            raise ConfigValidationError(f"unknown estimator {self.estimator!r}")
        if self.bound not in ("simple", "sum", "max", "cv", "hybrid", "gaussian"):
            raise ConfigValidationError(f"unknown bound {self.bound!r}")
        if self.target not in ("mixture", "gaussian"):
            raise ConfigValidationError(f"unknown target {self.target!r}")
        if self.algo == "bps" and self.refresh_rate is not None and not self.refresh_rate > 0:
            raise ConfigValidationError("bps requires refresh_rate > 0")
        if self.algo == "reflect" and self.d > 1 and not (self.refresh_rate or 0) > 0:
            raise ConfigValidationError("pure reflection without refresh in d > 1: this process would be reducible")
        if self.target == "gaussian" and self.estimator != "exact":
            raise ConfigValidationError("the Gaussian target supports exact rates only")
        if self.target == "gaussian" and self.bound != "gaussian":
            raise ConfigValidationError("use bound=gaussian with the Gaussian target")
        if self.target == "mixture" and self.bound == "gaussian":
            raise ConfigValidationError("bound=gaussian needs the Gaussian target")
        if self.target == "mixture" and self.d != 1:
            raise ConfigValidationError("the mixture target is one-dimensional")
        if self.estimator in ("cv", "hybrid") and self.bound not in ("cv", "hybrid"):
            raise ConfigValidationError("control-variate estimators need bound=cv or bound=hybrid")
        if self.bound == "max" and self.estimator != "exact":
            raise ConfigValidationError("bound=max is only valid with exact rates")
        if self.bound == "sum" and self.estimator not in ("exact", "nonuniform"):
            raise ConfigValidationError("bound=sum needs exact rates or non-uniform sub-sampling")
        if not self.T > 0:
            raise ConfigValidationError("T must be positive")
        if not 0 <= self.burn_in_time < self.T:
            raise ConfigValidationError("burn_in must lie in [0, T)")
        if self.epsilon < 0:
            raise ConfigValidationError("epsilon must be non-negative")
        if self.epsilon > 0 and self.algo == "bps":
            raise ConfigValidationError("epsilon is only supported for reflect and zigzag")
        if self.N < 2:
            raise ConfigValidationError("N must be at least 2")
        if self.rho not in ("exact", "subsample", "cv"):
            raise ConfigValidationError(f"unknown rho {self.rho!r}")
        if self.rate_policy not in ("constant", "anchor"):
            raise ConfigValidationError(f"unknown rate_policy {self.rate_policy!r}")
        if not self.rate > 0:
            raise ConfigValidationError("CIS event rate must be positive")
        if self.proposal not in ("brownian", "student_t"):
            raise ConfigValidationError(f"unknown proposal {self.proposal!r}")
        if self.init not in ("prior", "uniform", "posterior"):
            raise ConfigValidationError(f"unknown init {self.init!r}")
        return self


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _base_type(t):
    args = [a for a in get_args(t) if a is not type(None)]
    return args[0] if args else t


def _coerce(name, value):
    if name not in _TYPES:
        raise ConfigValidationError(f"unknown config key {name!r}")
    if not isinstance(value, str):
        return value
    t = _TYPES[name]
    base = _base_type(t)
    if value.strip().lower() in ("none", "null") and base is not t:
        return None
    try:
        if base is int:
            return int(float(value))
        if base is float:
            return float(value)
    except ValueError as exc:
        raise ConfigValidationError(f"{name}: cannot parse {value!r} as {base.__name__}") from exc
    return value


def parse_kv_text(text):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigValidationError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def dump_kv_text(cfg):
    return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in cfg.as_dict().items())


def load_config(path=None, overrides=None, base=None):
    """Defaults, then the file at ``path``, then ``overrides`` (CLI wins)."""
    values = (base or ExperimentConfig()).as_dict()
    if path:
        with open(path) as fh:
            values.update(parse_kv_text(fh.read()))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = _coerce(k, v)
    return ExperimentConfig(**values).validate()
