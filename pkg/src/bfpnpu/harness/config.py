"""Campaign configuration: a versioned JSON document with CLI overrides.

Schema (version 1); every key is optional and defaults as below::

    {
      "version": 1,
      "target": "system",            # system | array | eu | fp2bfp | bfp2fp
      "mode": "rate",                # rate | exhaustive
      "sizes": [4],                  # square array / block sizes
      "dataflows": ["WS"],
      "man_width": 8,
      "acc_width": null,             # null = smallest safe width (>= 22)
      "blocking": "row-column",
      "kinds": ["stuck_at_0", "stuck_at_1", "transient"],
      "separate_kinds": true,        # one campaign point per kind
      "rates": [1e-4],               # faults per modeled bit per run
      "runs_per_point": 100,
      "seed": 0,
      "workload": "gaussian",        # gaussian | uniform-int | file:<path.npz>
      "protections": ["bfp"],        # bfp | none | full_dmr
      "units": null,                 # restrict injection to these units
      "converter_check": "dmr",      # dmr | fuzzy
      "workers": 1,
      "output_dir": null             # null = $BFPNPU_OUT or ./bfpnpu-out
    }
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..bfp_core import BlockingStrategy
from ..errors import ConfigError
from ..fault_injection import ALL_KINDS, FaultKind, UNITS

SCHEMA_VERSION = 1
OUTPUT_ENV = "BFPNPU_OUT"
TARGETS = ("system", "array", "eu", "fp2bfp", "bfp2fp")
MODES = ("rate", "exhaustive")


@dataclass(frozen=True)
class CampaignConfig:
    target: str = "system"
    mode: str = "rate"
    sizes: tuple[int, ...] = (4,)
    dataflows: tuple[str, ...] = ("WS",)
    man_width: int = 8
    acc_width: int | None = None
    blocking: str = "row-column"
    kinds: tuple[str, ...] = tuple(k.value for k in ALL_KINDS)
    separate_kinds: bool = True
    rates: tuple[float, ...] = (1e-4,)
    runs_per_point: int = 100
    seed: int = 0
    workload: str = "gaussian"
    protections: tuple[str, ...] = ("bfp",)
    units: tuple[str, ...] | None = None
    converter_check: str = "dmr"
    workers: int = 1
    output_dir: str | None = None
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        for name in ("sizes", "dataflows", "kinds", "rates", "protections"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.units is not None:
            object.__setattr__(self, "units", tuple(self.units))
        object.__setattr__(self, "dataflows", tuple(d.upper() for d in self.dataflows))
        self.validate()

    def validate(self):
        if self.version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.target not in TARGETS:
            raise ConfigError(f"target must be one of {TARGETS}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not self.sizes or any(s < 1 or s > 256 for s in self.sizes):
            raise ConfigError("sizes must lie in 1..256")
        if any(d not in ("WS", "OS") for d in self.dataflows):
            raise ConfigError("dataflows must be WS and/or OS")
        for k in self.kinds:
            FaultKind(k)
        if any(r < 0 for r in self.rates):
            raise ConfigError("fault rates must be non-negative")
        if self.runs_per_point < 1:
            raise ConfigError("runs_per_point must be positive")
        if any(p not in ("bfp", "none", "full_dmr") for p in self.protections):
            raise ConfigError("protections must be drawn from bfp, none, full_dmr")
        if self.units is not None and any(u not in UNITS for u in self.units):
            raise ConfigError(f"units must be drawn from {UNITS}")
        if not (self.workload in ("gaussian", "uniform-int") or self.workload.startswith("file:")):
            raise ConfigError(f"unknown workload {self.workload!r}")
        if self.converter_check not in ("dmr", "fuzzy"):
            raise ConfigError("converter_check must be dmr or fuzzy")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        BlockingStrategy.parse(self.blocking)

    @property
    def out_path(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or "bfpnpu-out")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CampaignConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        return cls.from_dict(data)

    def override(self, **changes) -> "CampaignConfig":
        """Apply non-``None`` overrides (typically parsed CLI flags)."""
        return replace(self, **{k: v for k, v in changes.items() if v is not None})
