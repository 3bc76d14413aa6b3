"""Run configuration: ``key = value`` file, then environment, then CLI flags."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .. import ckks
from ..split import Mode, TrainConfig

ENV_PREFIX = "HESPLIT_"
ENV_KEYS = ("listen", "connect")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training
    lr: float = 0.001
    batch_size: int = 4
    epochs: int = 10
    model: str = "M1"
    mode: str = "local"
    he: str = ""
    batch_encrypt: bool = False
    seed: int = 0
    # data
    data: str = "synth"
    test_data: str = ""
    test_fraction: float = 0.1
    synth_train: int = 1000
    synth_test: int = 200
    # network
    listen: str = "127.0.0.1:5050"
    connect: str = "127.0.0.1:5050"
    keys: str = "keys"
    timeout: float = 120.0
    sessions: int = 1
    # output
    out: str = "runs/latest"
    report: str = "csv"  # csv | csv+svg
    allow_weak_params: bool = False

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, model=self.model,
                               mode=Mode(self.mode), he=self.he_params(), batch_encrypt=self.batch_encrypt,
                               seed=self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def he_params(self) -> ckks.HEParams | None:
        if Mode(self.mode) is not Mode.SPLIT_HE:
            return None
        if not self.he:
            raise ConfigError("split-he needs he = N/[bits,...]/2^k")
        try:
            p = ckks.HEParams.parse(self.he)
        except (ValueError, ckks.ParameterError) as exc:
            raise ConfigError(f"bad HE parameters {self.he!r}: {exc}") from None
        if p.is_weak and not self.allow_weak_params:
            raise ConfigError(
                f"ring degree {p.poly_degree} is below 4096 and far from 128-bit security; "
                "pass --allow-weak-params to run it anyway")
        return p

    def validate(self) -> "RunConfig":
        try:
            Mode(self.mode)
        except ValueError:
            raise ConfigError(f"mode must be one of {[m.value for m in Mode]}") from None
        if self.report not in ("csv", "csv+svg"):
            raise ConfigError("report must be csv or csv+svg")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        for addr in (self.listen, self.connect):
            parse_addr(addr)
        self.train_config()
        return self


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"address {text!r} is not host:port")
    return host or "127.0.0.1", int(port)


def _coerce(name: str, raw, kind):
    if kind is bool or kind == "bool":
        if isinstance(raw, bool):
            return raw
        v = str(raw).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return {"int": int, "float": float, "str": str}.get(kind, kind)(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot read {raw!r} as {kind}") from None


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def read_kv(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in _TYPES:
            raise ConfigError(f"{path}:{n}: unknown or malformed entry {line!r}")
        out[key] = value.strip()
    return out


def build(config_path=None, overrides: dict | None = None, env=os.environ) -> RunConfig:
    values = {}
    if config_path:
        try:
            values.update(read_kv(config_path))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    for key in ENV_KEYS:
        if ENV_PREFIX + key.upper() in env:
            values[key] = env[ENV_PREFIX + key.upper()]
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = RunConfig(**{k: _coerce(k, v, _TYPES[k]) for k, v in values.items()})
    return cfg.validate()
