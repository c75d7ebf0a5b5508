"""Run configuration: one declarative JSON file, fully defaulted, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, replace

from .core import Resolution
from .distill import DistillParams
from .fusion import FusionParams
from .guidance import LossWeights, QuantileSpec
from .noise import NoiseSpec

MAX_S = 6


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every issue found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class Config:
    noise: NoiseSpec = NoiseSpec()
    fusion: FusionParams = FusionParams()
    qspec: QuantileSpec = QuantileSpec()
    weights: LossWeights = LossWeights()
    S: int = 3
    overlap_frac: float = 0.25
    r_hat: Resolution = Resolution(192)
    tau: float = 0.03
    seed: int = 0
    n_g: int = 4
    n_pairs: int = 2000
    cell: int = 8
    sigma_spatial: float = 1.0
    sigma_range: float | None = None

    def __post_init__(self):
        problems = [f"{k} must be an integer" for k in ("S", "seed", "n_g", "n_pairs", "cell")
                    if isinstance(getattr(self, k), bool) or not isinstance(getattr(self, k), int)]
        if problems:
            raise ConfigError(problems)
        if not 0 <= self.S <= MAX_S:
            problems.append(f"S must lie in 0..{MAX_S}, got {self.S}")
        if not 0.0 <= self.overlap_frac < 0.5:
            problems.append("overlap_frac must lie in [0, 0.5)")
        if not self.tau > 0:
            problems.append("tau must be positive")
        if self.n_g < 1:
            problems.append("n_g must be >= 1")
        if self.n_pairs < 1:
            problems.append("n_pairs must be >= 1")
        if self.cell < 4:
            problems.append("cell must be >= 4")
        if self.sigma_spatial <= 0:
            problems.append("sigma_spatial must be positive")
        if self.sigma_range is not None and self.sigma_range <= 0:
            problems.append("sigma_range must be positive")
        if problems:
            raise ConfigError(problems)

    def distill_params(self, alpha=None) -> DistillParams:
        return DistillParams(fusion=self.fusion, a=self.qspec.a, n_w=self.qspec.n_w,
                             overlap_frac=self.overlap_frac, r_hat=self.r_hat, alpha=alpha,
                             sigma_spatial=self.sigma_spatial, sigma_range=self.sigma_range,
                             tau=self.tau, n_pairs=self.n_pairs, metric_seed=self.seed,
                             cell=self.cell)

    def scene_noise(self, index: int) -> NoiseSpec:
        return replace(self.noise, seed=self.noise.seed + index)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v = {k: _plain(x) for k, x in dataclasses.asdict(v).items()}
            out[f.name] = _plain(v)
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _plain(v):
    if isinstance(v, Resolution):
        return v.long_side
    if isinstance(v, dict) and set(v) == {"long_side"}:
        return v["long_side"]
    return v


_SECTIONS = {"noise": NoiseSpec, "fusion": FusionParams, "qspec": QuantileSpec, "weights": LossWeights}


def from_dict(d: dict) -> Config:
    if not isinstance(d, dict):
        raise ConfigError(["config must be a JSON object"])
    names = {f.name for f in dataclasses.fields(Config)}
    problems = [f"unknown key '{k}'" for k in d if k not in names]
    kw = {}
    for k, v in d.items():
        if k not in names:
            continue
        if k in _SECTIONS:
            cls = _SECTIONS[k]
            if not isinstance(v, dict):
                problems.append(f"'{k}' must be an object")
                continue
            allowed = {f.name for f in dataclasses.fields(cls)}
            bad = [f"unknown key '{k}.{x}'" for x in v if x not in allowed]
            if bad:
                problems.extend(bad)
                continue
            try:
                kw[k] = cls(**v)
            except (TypeError, ValueError) as e:
                problems.append(f"{k}: {e}")
        elif k == "r_hat":
            try:
                kw[k] = Resolution(v)
            except (TypeError, ValueError) as e:
                problems.append(f"r_hat: {e}")
        else:
            kw[k] = v
    if problems:
        raise ConfigError(problems)
    try:
        return Config(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError([str(e)]) from None


def load(path) -> Config:
    if path is None:
        return Config()
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError([f"config is not valid JSON: {e}"]) from None
    return from_dict(d)
