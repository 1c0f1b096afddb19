"""Flat key/value run configuration (TOML syntax, no tables).

Unknown keys and out-of-range values raise :class:`ConfigError` naming the
offending field.
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

REGIMES = ("pegrl", "separate", "baseline_grpo")
RECIPES = ("proxy_plus_chrf", "proxy_plus_bleu")
GAP_MODES = ("translate", "post_edit", "avg_translate")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class _Flat:
    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def snapshot(self) -> dict:
        return {f.name: (list(v) if isinstance(v, tuple) else v)
                for f in fields(self) for v in [getattr(self, f.name)]}

    @classmethod
    def from_mapping(cls, data: dict):
        hints = get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(key, "unknown key")
            if isinstance(value, dict):
                raise ConfigError(key, "nested tables are not allowed")
            kwargs[key] = _coerce(key, value, hints[key])
        obj = cls(**kwargs)
        obj.validate()
        return obj

    @classmethod
    def load(cls, path: str | Path):
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("<file>", f"cannot parse {path}: {exc}") from None
        return cls.from_mapping(data)

    def validate(self) -> None:  # pragma: no cover - overridden
        pass


def _coerce(key: str, value: Any, hint) -> Any:
    origin = get_origin(hint)
    args = [a for a in get_args(hint) if a is not type(None)]
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(key, "expected an array")
        inner = args[0]
        if get_origin(inner) is not tuple:
            return tuple(_coerce(key, v, inner) for v in value)
        rows = []
        for item in value:
            if not isinstance(item, list):
                raise ConfigError(key, "expected an array of arrays")
            rows.append(tuple(_coerce(key, v, get_args(inner)[0]) for v in item))
        return tuple(rows)
    if args and origin is not None:  # Optional[X]
        return _coerce(key, value, args[0])
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, "expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, "expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, "expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(key, "expected a string")
        return value
    raise ConfigError(key, f"unsupported type {hint}")


def _require(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(name, msg)


@dataclass(frozen=True)
class TrainConfig(_Flat):
    regime: str = "pegrl"
    N: int = 8
    M: int = 8
    lambda_pe: float | None = None  # None means M
    lambda_mt: float = 1.0
    alpha: float = 0.95
    learning_rate: float = 0.1
    steps: int = 100
    batch_size: int = 16
    seed: int = 0
    max_len: int = 8
    hard_cap: int = 8
    recipe: str = "proxy_plus_chrf"
    vocab_size: int = 6
    length: int = 4
    n_train: int = 64
    n_eval: int = 32
    eval_interval: int = 5
    eval_samples: int = 8
    eps: float = 1e-6
    copy_bias: float = 0.0
    raw_rewards: bool = False
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    lambda_settings: tuple[tuple[float, ...], ...] = ()  # compare also sweeps these

    @property
    def resolved_lambda_pe(self) -> float:
        return float(self.M) if self.lambda_pe is None else self.lambda_pe

    @property
    def baseline_group_size(self) -> int:
        return self.N + self.N * self.M

    def validate(self) -> None:
        _require(self.regime in REGIMES, "regime", f"must be one of {REGIMES}")
        _require(self.N >= 2, "N", "must be >= 2")
        _require(self.M >= 2, "M", "must be >= 2")
        _require(self.lambda_pe is None or self.lambda_pe >= 0, "lambda_pe", "must be >= 0")
        _require(self.lambda_mt >= 0, "lambda_mt", "must be >= 0")
        _require(0 < self.alpha <= 1, "alpha", "must lie in (0, 1]")
        _require(self.learning_rate >= 0, "learning_rate", "must be >= 0")
        _require(self.steps >= 0, "steps", "must be >= 0")
        _require(self.batch_size >= 1, "batch_size", "must be >= 1")
        _require(self.seed >= 0, "seed", "must be >= 0")
        _require(self.max_len >= 1, "max_len", "must be >= 1")
        _require(self.hard_cap >= self.max_len, "hard_cap", "must be >= max_len")
        _require(self.recipe in RECIPES, "recipe", f"must be one of {RECIPES}")
        _require(self.vocab_size >= 2, "vocab_size", "must be >= 2")
        _require(self.length >= 1, "length", "must be >= 1")
        _require(self.n_train >= 1, "n_train", "must be >= 1")
        _require(self.n_eval >= 0, "n_eval", "must be >= 0")
        _require(self.eval_interval >= 1, "eval_interval", "must be >= 1")
        _require(self.eval_samples >= 1, "eval_samples", "must be >= 1")
        _require(self.eps >= 0, "eps", "must be >= 0")
        _require(np.isfinite(self.copy_bias), "copy_bias", "must be finite")
        _require(len(self.seeds) >= 1 and all(s >= 0 for s in self.seeds), "seeds",
                 "must be a non-empty array of non-negative integers")
        _require(all(len(x) == 2 and min(x) >= 0 for x in self.lambda_settings), "lambda_settings",
                 "each entry must be [lambda_pe, lambda_mt] with both >= 0")


@dataclass(frozen=True)
class VarianceConfig(_Flat):
    seed: int = 0
    vocab_size: int = 6
    length: int = 4
    max_len: int = 8
    hard_cap: int = 8
    alpha: float = 0.95
    recipe: str = "proxy_plus_chrf"
    policy: str = "uniform"  # or "constructed"
    sharpness: float = 10.0
    # gap
    mode: str = "translate"
    n_instances: int = 100
    K_ref: int = 1024
    Ks: tuple[int, ...] = ()
    M: int = 8
    # decomp
    n_configs: int = 100
    len0: int = 2
    len1: int = 2
    # scaling
    bernoulli_p: float = 0.5
    Ns: tuple[int, ...] = (1, 4, 16, 64)
    repeats: int = 10_000
    # gradstudy
    N: int = 2
    samples: int = 10_000
    lambda_settings: tuple[tuple[float, ...], ...] = ()
    raw_rewards: bool = True

    def validate(self) -> None:
        _require(self.vocab_size >= 2, "vocab_size", "must be >= 2")
        _require(self.length >= 1, "length", "must be >= 1")
        _require(self.max_len >= 1, "max_len", "must be >= 1")
        _require(self.hard_cap >= self.max_len, "hard_cap", "must be >= max_len")
        _require(0 < self.alpha <= 1, "alpha", "must lie in (0, 1]")
        _require(self.recipe in RECIPES, "recipe", f"must be one of {RECIPES}")
        _require(self.policy in ("uniform", "constructed"), "policy", "must be uniform or constructed")
        _require(self.mode in GAP_MODES, "mode", f"must be one of {GAP_MODES}")
        _require(self.n_instances >= 10, "n_instances", "must be >= 10")
        _require(self.K_ref >= 1, "K_ref", "must be >= 1")
        _require(all(1 <= k <= self.K_ref for k in self.Ks) and list(self.Ks) == sorted(set(self.Ks)),
                 "Ks", "must be strictly increasing within [1, K_ref]")
        _require(self.M >= 1, "M", "must be >= 1")
        _require(self.N >= 2, "N", "must be >= 2")
        _require(self.n_configs >= 1, "n_configs", "must be >= 1")
        _require(self.len0 >= 1 and self.len1 >= 1, "len0", "lengths must be >= 1")
        _require(0 <= self.bernoulli_p <= 1, "bernoulli_p", "must lie in [0, 1]")
        _require(len(self.Ns) >= 1 and all(n >= 1 for n in self.Ns), "Ns", "must be positive integers")
        _require(self.repeats >= 100, "repeats", "must be >= 100")
        _require(self.samples >= 1, "samples", "must be >= 1")
        _require(all(len(s) == 2 for s in self.lambda_settings), "lambda_settings",
                 "each entry must be [lambda_pe, lambda_mt]")
