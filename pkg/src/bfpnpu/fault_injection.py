"""Saboteur fault model: fault sites, injection plans and register interposition.

Every modeled storage bit is a fault site. A site sits behind a 2:1 mux
saboteur: reads return the stored bit, a forced 0/1 (stuck-at faults, held
for the whole run) or the stored bit XOR 1 during one cycle (transients).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import RateTooHigh, UnknownSite

UNITS = ("pe", "ingress", "checker", "check_pe", "chain", "eu", "converter", "latch")

PLAN_HEADER = "# bfpnpu-plan v1"
MANIFEST_HEADER = "# bfpnpu-manifest v1"


class FaultKind(str, Enum):
    STUCK_AT_0 = "stuck_at_0"
    STUCK_AT_1 = "stuck_at_1"
    TRANSIENT = "transient"

    @property
    def permanent(self) -> bool:
        return self is not FaultKind.TRANSIENT


ALL_KINDS = tuple(FaultKind)


@dataclass(frozen=True, order=True)
class FaultSite:
    unit: str
    unit_id: str
    reg: str
    bit: int

    def __str__(self):
        return f"{self.unit} {self.unit_id} {self.reg} {self.bit}"

    @classmethod
    def parse(cls, text: str) -> "FaultSite":
        unit, unit_id, reg, bit = text.split()
        return cls(unit, unit_id, reg, int(bit))

    @property
    def site_class(self) -> str:
        return f"{self.unit}.{self.reg}"


@dataclass(frozen=True)
class FaultSpec:
    site: FaultSite
    kind: FaultKind
    cycle: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FaultKind(self.kind))
        if self.kind is FaultKind.TRANSIENT and self.cycle is None:
            raise ValueError("transient faults need a cycle")
        if self.kind.permanent and self.cycle is not None:
            raise ValueError("permanent faults have no cycle")

    def __str__(self):
        cyc = "-" if self.cycle is None else str(self.cycle)
        return f"{self.kind.value} {self.site} {cyc}"

    @classmethod
    def parse(cls, text: str) -> "FaultSpec":
        kind, unit, unit_id, reg, bit, cyc = text.split()
        return cls(FaultSite(unit, unit_id, reg, int(bit)), FaultKind(kind),
                   None if cyc == "-" else int(cyc))


@dataclass(frozen=True)
class InjectionPlan:
    specs: tuple[FaultSpec, ...] = ()
    seed: int = 0
    fault_rate: float = 0.0

    def __len__(self):
        return len(self.specs)

    def for_units(self, units: Iterable[str]) -> list[FaultSpec]:
        units = set(units)
        return [s for s in self.specs if s.site.unit in units]

    def dumps(self) -> str:
        lines = [f"{PLAN_HEADER} seed={self.seed} rate={self.fault_rate!r}"]
        lines += [str(s) for s in self.specs]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "InjectionPlan":
        seed, rate, specs = 0, 0.0, []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line.split():
                    if tok.startswith("seed="):
                        seed = int(tok[5:])
                    elif tok.startswith("rate="):
                        rate = float(tok[5:])
                continue
            specs.append(FaultSpec.parse(line))
        return cls(tuple(specs), seed, rate)

    @classmethod
    def single(cls, spec: FaultSpec) -> "InjectionPlan":
        return cls((spec,))


@dataclass(frozen=True)
class Manifest:
    sites: tuple[FaultSite, ...] = ()
    _index: Mapping[FaultSite, int] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.sites)})
        if len(self._index) != len(self.sites):
            raise ValueError("duplicate fault site in manifest")

    def __len__(self):
        return len(self.sites)

    def __iter__(self):
        return iter(self.sites)

    def __contains__(self, site):
        return site in self._index

    def __add__(self, other: "Manifest") -> "Manifest":
        return Manifest(self.sites + other.sites)

    @property
    def total_bits(self) -> int:
        return len(self.sites)

    def index(self, site: FaultSite) -> int:
        try:
            return self._index[site]
        except KeyError:
            raise UnknownSite(str(site)) from None

    def by_unit(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for s in self.sites:
            out[s.unit] = out.get(s.unit, 0) + 1
        return out

    def dumps(self) -> str:
        return "\n".join([MANIFEST_HEADER] + [str(s) for s in self.sites]) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Manifest":
        return cls(tuple(FaultSite.parse(l) for l in text.splitlines()
                         if l.strip() and not l.startswith("#")))


def sample_plan(manifest: Manifest, fault_rate: float, seed: int,
                run_cycles: int | tuple[int, int],
                kinds: Sequence[FaultKind] = ALL_KINDS,
                unit_weights: Mapping[str, float] | None = None) -> InjectionPlan:
    """Draw a reproducible plan of ``round(rate * total_bits)`` faults.

    Sites are drawn without replacement, uniformly unless ``unit_weights``
    reweights whole units. Transient cycles are uniform over ``run_cycles``
    (a count, or a half-open ``(lo, hi)`` window).
    """
    if fault_rate < 0:
        raise ValueError("fault rate must be non-negative")
    n = int(round(fault_rate * manifest.total_bits))
    if n > manifest.total_bits:
        raise RateTooHigh(f"{n} faults requested but only {manifest.total_bits} sites")
    if n == 0:
        return InjectionPlan((), seed, fault_rate)
    lo, hi = (0, run_cycles) if isinstance(run_cycles, int) else run_cycles
    if hi <= lo:
        raise ValueError("empty cycle window")
    kinds = [FaultKind(k) for k in kinds]
    rng = np.random.default_rng(seed)
    p = None
    if unit_weights:
        w = np.array([unit_weights.get(s.unit, 0.0) for s in manifest.sites], dtype=float)
        if np.count_nonzero(w) < n:
            raise RateTooHigh("not enough weighted sites for the requested rate")
        p = w / w.sum()
    picks = np.sort(rng.choice(manifest.total_bits, size=n, replace=False, p=p))
    kind_ix = rng.integers(0, len(kinds), size=n)
    cycles = rng.integers(lo, hi, size=n)
    specs = []
    for i, k, c in zip(picks, kind_ix, cycles):
        kind = kinds[k]
        specs.append(FaultSpec(manifest.sites[i], kind,
                               int(c) if kind is FaultKind.TRANSIENT else None))
    return InjectionPlan(tuple(specs), seed, fault_rate)


def interpose_read(plan: InjectionPlan, site: FaultSite, clean_bit: int, cycle: int) -> int:
    """Scalar saboteur: the value a read of ``site`` observes at ``cycle``."""
    bit = clean_bit & 1
    for spec in plan.specs:
        if spec.site != site:
            continue
        if spec.kind is FaultKind.STUCK_AT_0:
            bit = 0
        elif spec.kind is FaultKind.STUCK_AT_1:
            bit = 1
        elif spec.cycle == cycle:
            bit ^= 1
    return bit


# -- register storage ---------------------------------------------------------


def to_signed(raw, width: int):
    sign = np.int64(1) << (width - 1)
    return (raw ^ sign) - sign


class RegisterFile:
    """A group of same-width registers, each behind a per-bit saboteur.

    Values are held as two's-complement bit patterns in int64 storage.
    ``ids`` gives the unit id of each element in flat order.
    """

    def __init__(self, unit: str, reg: str, ids: Sequence[str], width: int,
                 shape: tuple[int, ...] | None = None, signed: bool = True):
        if width < 1 or width > 62:
            raise ValueError(f"register width {width} unsupported")
        self.unit, self.reg, self.width, self.signed = unit, reg, width, signed
        self.ids = list(ids)
        self.shape = shape if shape is not None else (len(self.ids),)
        if math.prod(self.shape) != len(self.ids):
            raise ValueError("shape does not match id count")
        self.mask = np.int64((1 << width) - 1)
        self.raw = np.zeros(self.shape, np.int64)
        self.force0 = np.zeros(self.shape, np.int64)
        self.force1 = np.zeros(self.shape, np.int64)
        self.flips: dict[int, np.ndarray] = {}
        self.faulty = False

    def sites(self) -> list[FaultSite]:
        return [FaultSite(self.unit, uid, self.reg, b)
                for uid in self.ids for b in range(self.width)]

    def reset(self):
        self.raw[...] = 0

    def write(self, values):
        self.raw = np.asarray(values, dtype=np.int64) & self.mask

    def write_at(self, index, value):
        self.raw[index] = np.int64(value) & self.mask

    def read_raw(self, cycle: int) -> np.ndarray:
        if not self.faulty:
            return self.raw
        v = (self.raw & ~self.force0) | self.force1
        flip = self.flips.get(cycle)
        if flip is not None:
            v = v ^ flip
        return v

    def read(self, cycle: int) -> np.ndarray:
        v = self.read_raw(cycle)
        return to_signed(v, self.width) if self.signed else v

    def inject(self, flat_index: int, bit: int, kind: FaultKind, cycle: int | None = None):
        idx = np.unravel_index(flat_index, self.shape)
        m = np.int64(1) << bit
        if kind is FaultKind.STUCK_AT_0:
            self.force0[idx] |= m
            self.force1[idx] &= ~m
        elif kind is FaultKind.STUCK_AT_1:
            self.force1[idx] |= m
            self.force0[idx] &= ~m
        else:
            arr = self.flips.setdefault(cycle, np.zeros(self.shape, np.int64))
            arr[idx] ^= m
        self.faulty = True


class RegisterBank:
    """Named register files of one hardware component plus site lookup."""

    def __init__(self, files: Iterable[RegisterFile] = ()):
        self.files: dict[tuple[str, str], RegisterFile] = {}
        self._ids: dict[tuple[str, str], dict[str, int]] = {}
        for f in files:
            self.add(f)

    def add(self, rf: RegisterFile) -> RegisterFile:
        key = (rf.unit, rf.reg)
        if key in self.files:
            raise ValueError(f"duplicate register file {key}")
        self.files[key] = rf
        self._ids[key] = {uid: i for i, uid in enumerate(rf.ids)}
        return rf

    def manifest(self) -> Manifest:
        sites: list[FaultSite] = []
        for rf in self.files.values():
            sites.extend(rf.sites())
        return Manifest(tuple(sites))

    def locate(self, site: FaultSite) -> tuple[RegisterFile, int]:
        key = (site.unit, site.reg)
        rf = self.files.get(key)
        if rf is None or site.unit_id not in self._ids[key] or not 0 <= site.bit < rf.width:
            raise UnknownSite(str(site))
        return rf, self._ids[key][site.unit_id]

    def owns(self, site: FaultSite) -> bool:
        key = (site.unit, site.reg)
        return key in self.files and site.unit_id in self._ids[key] and \
            0 <= site.bit < self.files[key].width

    def apply(self, specs: Iterable[FaultSpec], cycle_offset: int = 0, strict: bool = True):
        """Install saboteur settings; transient cycles are shifted to local time."""
        for spec in specs:
            if not self.owns(spec.site):
                if strict:
                    raise UnknownSite(str(spec.site))
                continue
            rf, i = self.locate(spec.site)
            cyc = None if spec.cycle is None else spec.cycle - cycle_offset
            rf.inject(i, spec.site.bit, spec.kind, cyc)

    def read_bit(self, site: FaultSite, cycle: int) -> int:
        rf, i = self.locate(site)
        v = rf.read_raw(cycle).ravel()[i]
        return int((v >> site.bit) & 1)

    def reset(self):
        for rf in self.files.values():
            rf.reset()
