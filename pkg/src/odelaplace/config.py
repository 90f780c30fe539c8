"""Experiment configuration, named presets and config hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import InputError
from .inference import FitSettings, McmcSettings
from .models import make_model
from .posterior import Prior

__all__ = ["ExperimentConfig", "PRESETS", "preset", "config_hash", "load_config"]


@dataclass
class ModelSpec:
    name: str
    config: dict = field(default_factory=dict)


@dataclass
class SimulateSpec:
    theta: list
    x0: list
    t0: float
    t1: float
    n_points: int
    noise_variance: float
    seed: int = 0

    def grid(self):
        return np.linspace(self.t0, self.t1, self.n_points)


@dataclass
class PriorSpec:
    A0: float
    B0: float
    theta_bounds: list
    x0_bounds: list

    def build(self):
        return Prior(self.A0, self.B0, np.array(self.theta_bounds, float), np.array(self.x0_bounds, float))


@dataclass
class LaplaceSpec:
    variant: str = "relaxed"
    reduce: str = "schur"
    repair: bool = False


@dataclass
class BandSpec:
    count: int = 1000
    seed: int = 0


@dataclass
class ExperimentConfig:
    model: ModelSpec
    prior: PriorSpec
    simulate: SimulateSpec | None = None
    data_path: str | None = None
    tau: float = 1e-4
    m: int = 1
    fit: FitSettings = field(default_factory=FitSettings)
    mcmc: McmcSettings = field(default_factory=McmcSettings)
    laplace: LaplaceSpec = field(default_factory=LaplaceSpec)
    band: BandSpec = field(default_factory=BandSpec)
    solver_tol: float = 1e-9

    def __post_init__(self):
        if not self.tau > 0:
            raise InputError("tau must be positive")
        if int(self.m) != self.m or self.m < 1:
            raise InputError("m must be an integer >= 1")
        if self.simulate is None and self.data_path is None:
            raise InputError("config needs either a simulate block or a data_path")
        if self.simulate is not None:
            if self.simulate.n_points < 2 or not self.simulate.t1 > self.simulate.t0:
                raise InputError("simulation grid must be strictly increasing")
            if self.simulate.noise_variance < 0:
                raise InputError("noise variance must be non-negative")
        if self.laplace.variant not in ("relaxed", "original"):
            raise InputError(f"unknown Laplace variant {self.laplace.variant!r}")
        if self.laplace.reduce not in ("full", "schur"):
            raise InputError(f"unknown reduction {self.laplace.reduce!r}")

    def build_model(self):
        return make_model(self.model.name, self.model.config)

    def build_prior(self):
        return self.prior.build()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = copy.deepcopy(doc)
        try:
            kw = {
                "model": ModelSpec(**doc.pop("model")),
                "prior": PriorSpec(**doc.pop("prior")),
            }
            sim = doc.pop("simulate", None)
            kw["simulate"] = SimulateSpec(**sim) if sim else None
            for name, typ in (("fit", FitSettings), ("mcmc", McmcSettings), ("laplace", LaplaceSpec), ("band", BandSpec)):
                if name in doc:
                    sub = doc.pop(name) or {}
                    if name == "fit" and "tau_schedule" in sub:
                        sub["tau_schedule"] = tuple(sub["tau_schedule"])
                    kw[name] = typ(**sub)
            known = {f.name for f in fields(cls)}
            extra = set(doc) - known
            if extra:
                raise InputError(f"unknown config keys: {sorted(extra)}")
            kw.update(doc)
            return cls(**kw)
        except (KeyError, TypeError) as exc:
            raise InputError(f"invalid config: {exc}") from None

    def with_overrides(self, **changes):
        doc = self.to_dict()
        for key, value in changes.items():
            target = doc
            *path, last = key.split(".")
            for part in path:
                target = target.setdefault(part, {})
            target[last] = value
        return ExperimentConfig.from_dict(doc)


def config_hash(config):
    """First 16 hex digits of the SHA-256 of the canonical JSON form."""
    doc = config.to_dict() if isinstance(config, ExperimentConfig) else config
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=_plain)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, (np.ndarray, tuple)):
        return list(o)
    raise TypeError(type(o).__name__)


def _fn_preset():
    return ExperimentConfig(
        model=ModelSpec("fitzhugh-nagumo"),
        prior=PriorSpec(1.0, 0.01, [[-1.0, 1.0], [-1.0, 1.0], [0.5, 6.0]], [[-3.0, 3.0], [-3.0, 3.0]]),
        simulate=SimulateSpec([0.2, 0.2, 3.0], [-1.0, -1.0], 0.0, 20.0, 201, 0.25, seed=20),
        tau=1e-5,
        m=1,
        # continuation from looser relaxations keeps Newton out of spurious basins
        fit=FitSettings(tau_schedule=(1e-1, 1e-2, 1e-3, 1e-4)),
        mcmc=McmcSettings(iterations=35000, burn_in=5000, thin=30, dr_stages=2, seed=7),
    )


def _l96_preset():
    p = 4
    return ExperimentConfig(
        model=ModelSpec("lorenz96", {"p": p}),
        prior=PriorSpec(1.0, 0.01, [[0.0, 3.0], [0.0, 3.0], [0.0, 20.0]] * p, [[-20.0, 20.0]] * p),
        simulate=SimulateSpec([1.0, 1.0, 8.0] * p, [1.0, 8.0, 4.0, 3.0], 0.0, 5.0, 51, 1.0, seed=32),
        tau=1e-4,
        m=2,
        # the chain only needs the likelihood to ~1e-7; a looser solve buys four times the iterations
        mcmc=McmcSettings(iterations=100000, burn_in=20000, thin=320, dr_stages=2, chains=4, seed=11,
                          solver_tol=1e-6),
    )


SIR_WINDOW = (0.0, 100.0)


def sir_truth_coefficients(n_basis_beta, n_basis_gamma):
    """Smooth synthetic log-rate coefficients for the SIR preset."""
    k = np.arange(n_basis_beta)
    # reproduction number swings between about 0.9 and 1.6: a contained outbreak
    c_beta = np.log(0.12) + 0.3 * np.sin(2 * np.pi * k / max(n_basis_beta - 1, 1))
    c_gamma = np.full(n_basis_gamma, np.log(0.1))
    return np.concatenate([c_beta, c_gamma])


def _sir_preset():
    nb = ng = 30
    theta = sir_truth_coefficients(nb, ng)
    return ExperimentConfig(
        model=ModelSpec("sir-tv", {"N": 1e6, "n_basis_beta": nb, "n_basis_gamma": ng, "window": list(SIR_WINDOW)}),
        prior=PriorSpec(1.0, 1.0, [[-8.0, 2.0]] * (nb + ng), [[0.0, 1e4], [0.0, 1e4]]),
        simulate=SimulateSpec(theta.tolist(), [100.0, 0.0], *SIR_WINDOW, 101, 100.0, seed=4),
        tau=1e-2,
        m=1,
        laplace=LaplaceSpec("relaxed", "schur", True),
        mcmc=McmcSettings(iterations=20000, burn_in=5000, thin=15, seed=5),
        # states reach ~1e4, so an absolute tolerance of 1e-9 is below rounding
        solver_tol=1e-8,
    )


PRESETS = {"fn-s3.1": _fn_preset, "lorenz96-s3.2": _l96_preset, "sir-s4-synthetic": _sir_preset}


def preset(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise InputError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def load_config(source):
    """A preset name or the path of a JSON config document."""
    if source in PRESETS:
        return preset(source)
    try:
        with open(source, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"config not found: {source}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config {source} is not valid JSON: {exc}") from None
    if "preset" in doc:
        base = preset(doc.pop("preset")).to_dict()
        _merge(base, doc)
        doc = base
    return ExperimentConfig.from_dict(doc)


def _merge(base, over):
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
