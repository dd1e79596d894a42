"""Count tables from per-herald click records and diagonal estimation."""

from __future__ import annotations

import csv
import gzip
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .states import channel_name

DEFAULT_CHANNELS = ("A", "B", "C")


class MalformedRecordError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def mask_of(channels, names) -> int:
    mask = 0
    for name in names:
        mask |= 1 << channels.index(name)
    return mask


def mask_names(channels, mask: int) -> list[str]:
    return [c for k, c in enumerate(channels) if mask >> k & 1]


def inclusive_from_exclusive(exclusive: np.ndarray) -> np.ndarray:
    """inclusive[..., S] = sum of exclusive[..., T] over supersets T of S."""
    out = np.array(exclusive, dtype=float if exclusive.dtype.kind == "f" else np.int64)
    n = int(np.log2(out.shape[-1]))
    for k in range(n):
        bit = 1 << k
        for s in range(out.shape[-1]):
            if not s & bit:
                out[..., s] += out[..., s | bit]
    return out


@dataclass(frozen=True, eq=False)
class CountTable:
    """Exclusive click-set counts per phase setting; ``exclusive[p, mask]``."""

    channels: tuple
    shots: np.ndarray
    exclusive: np.ndarray
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        shots = np.asarray(self.shots)
        excl = np.asarray(self.exclusive)
        if excl.shape != (shots.shape[0], 2 ** len(self.channels)):
            raise ValueError(f"exclusive counts have shape {excl.shape}, expected ({shots.shape[0]}, {2 ** len(self.channels)})")
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "shots", shots)
        object.__setattr__(self, "exclusive", excl)

    @property
    def num_settings(self) -> int:
        return int(self.shots.shape[0])

    @property
    def inclusive(self) -> np.ndarray:
        return inclusive_from_exclusive(self.exclusive)

    def exclusive_count(self, names, phase_idx=None):
        col = self.exclusive[:, mask_of(self.channels, names)]
        return col if phase_idx is None else col[phase_idx]

    def inclusive_count(self, names, phase_idx=None):
        col = self.inclusive[:, mask_of(self.channels, names)]
        return col if phase_idx is None else col[phase_idx]

    def singles(self) -> np.ndarray:
        """Inclusive single-channel counts, shape (settings, channels)."""
        inc = self.inclusive
        return np.stack([inc[:, 1 << k] for k in range(len(self.channels))], axis=1)

    def total(self) -> "CountTable":
        """All phase settings pooled into one."""
        return CountTable(self.channels, self.shots.sum(keepdims=True), self.exclusive.sum(axis=0, keepdims=True), self.header)

    def __add__(self, other: "CountTable") -> "CountTable":
        if other.channels != self.channels or other.num_settings != self.num_settings:
            raise ValueError("count tables do not share channels and phase settings")
        return CountTable(self.channels, self.shots + other.shots, self.exclusive + other.exclusive, self.header)

    def __eq__(self, other):
        return (
            isinstance(other, CountTable)
            and self.channels == other.channels
            and np.array_equal(self.shots, other.shots)
            and np.array_equal(self.exclusive, other.exclusive)
        )

    def to_json(self) -> dict:
        subsets = ["".join(mask_names(self.channels, s)) for s in range(2 ** len(self.channels))]
        return {
            "format": "pathtomo-counts/1",
            "channels": list(self.channels),
            "subsets": subsets,
            "shots": self.shots.tolist(),
            "exclusive": self.exclusive.tolist(),
            "inclusive": self.inclusive.tolist(),
            "header": self.header,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CountTable":
        return cls(tuple(doc["channels"]), np.array(doc["shots"]), np.array(doc["exclusive"]), doc.get("header", {}))

    def to_csv(self, fh):
        """Columns: phase index, per-channel LO phases (if known), shots, exclusive and inclusive counts per subset."""
        n = len(self.channels)
        subsets = ["".join(mask_names(self.channels, s)) or "none" for s in range(2**n)]
        schedule = self.header.get("schedule") or []
        writer = csv.writer(fh)
        writer.writerow(
            ["phase_idx"]
            + [f"phase_{c}" for c in self.channels]
            + ["shots"]
            + [f"excl_{s}" for s in subsets]
            + [f"incl_{s}" for s in subsets]
        )
        inc = self.inclusive
        for p in range(self.num_settings):
            phases = schedule[p]["phases"] if p < len(schedule) else [float("nan")] * n
            writer.writerow(
                [p]
                + [f"{x:.12g}" for x in phases]
                + [_fmt(self.shots[p])]
                + [_fmt(v) for v in self.exclusive[p]]
                + [_fmt(v) for v in inc[p]]
            )


def _fmt(v) -> str:
    return str(int(v)) if float(v).is_integer() else f"{float(v):.12g}"


def count(events) -> CountTable:
    """Fold an in-memory EventFile into a CountTable."""
    channels = tuple(events.header.get("channels", DEFAULT_CHANNELS))
    settings = len(events.header.get("schedule", [])) or (int(events.phase_idx.max()) + 1 if len(events.phase_idx) else 1)
    nmask = 2 ** len(channels)
    flat = events.phase_idx.astype(np.int64) * nmask + events.clicks.astype(np.int64)
    excl = np.bincount(flat, minlength=settings * nmask).reshape(settings, nmask)
    return CountTable(channels, excl.sum(axis=1), excl, _carry_header(events.header))


def _carry_header(header: dict) -> dict:
    return {k: header[k] for k in ("config_digest", "seed", "schedule", "run", "channels") if k in header}


def open_text(path):
    """Open a possibly gzip-compressed text file (detected from the magic bytes)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def count_jsonl(path) -> CountTable:
    """Single streaming pass over a JSON Lines event file."""
    header: dict = {}
    channels = DEFAULT_CHANNELS
    table: dict[tuple[int, int], int] = {}
    last_shot = -1
    max_phase = -1
    with open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecordError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise MalformedRecordError(lineno, "record is not an object")
            if lineno == 1 and "shot" not in obj:
                header = obj
                channels = tuple(header.get("channels", DEFAULT_CHANNELS))
                continue
            try:
                shot, phase, clicks = obj["shot"], obj["phase_idx"], obj["clicks"]
            except KeyError as exc:
                raise MalformedRecordError(lineno, f"missing field {exc.args[0]!r}") from None
            if not isinstance(shot, int) or not isinstance(phase, int) or not isinstance(clicks, list):
                raise MalformedRecordError(lineno, "fields have wrong types")
            if shot <= last_shot:
                raise MalformedRecordError(lineno, f"shot index {shot} not increasing")
            if phase < 0:
                raise MalformedRecordError(lineno, f"negative phase index {phase}")
            try:
                mask = mask_of(channels, clicks)
            except ValueError:
                raise MalformedRecordError(lineno, f"undeclared channel in {clicks}") from None
            last_shot = shot
            max_phase = max(max_phase, phase)
            table[(phase, mask)] = table.get((phase, mask), 0) + 1
    settings = max(len(header.get("schedule", [])), max_phase + 1, 1)
    excl = np.zeros((settings, 2 ** len(channels)), dtype=np.int64)
    for (p, m), c in table.items():
        excl[p, m] = c
    return CountTable(channels, excl.sum(axis=1), excl, _carry_header(header))


@dataclass(frozen=True)
class DiagonalEstimate:
    """Photon-number populations from LO-off counts.

    ``p`` maps click patterns in {0,1}^N to estimated populations; patterns
    with two or more photons come from the corresponding exclusive
    multi-fold counts. ``raw`` holds the same estimate without efficiency
    correction. Same-mode two-photon terms are invisible to threshold
    detection, so ``two_photon_mass`` is a lower bound.
    """

    channels: tuple
    p: dict
    sigma: dict
    two_photon_mass: float
    two_photon_sigma: float
    shots: float
    raw: dict = None
    efficiency_corrected: bool = True

    def single(self, mode: int) -> float:
        n = len(self.channels)
        return self.p[tuple(1 if k == mode else 0 for k in range(n))]

    def single_sigma(self, mode: int) -> float:
        n = len(self.channels)
        return self.sigma[tuple(1 if k == mode else 0 for k in range(n))]

    @property
    def vacuum(self) -> float:
        return self.p[(0,) * len(self.channels)]

    def to_json(self) -> dict:
        key = lambda pat: "".join(str(x) for x in pat)
        return {
            "channels": list(self.channels),
            "p": {key(k): v for k, v in self.p.items()},
            "sigma": {key(k): v for k, v in self.sigma.items()},
            "raw": {key(k): v for k, v in (self.raw or {}).items()},
            "two_photon_mass": self.two_photon_mass,
            "two_photon_sigma": self.two_photon_sigma,
            "shots": self.shots,
            "efficiency_corrected": self.efficiency_corrected,
        }


def _estimate(excl: np.ndarray, shots: float, effs) -> tuple[dict, dict, float, float]:
    n = len(effs)
    f = excl / shots
    coef = np.zeros(2**n)
    for s in range(1, 2**n):
        members = [k for k in range(n) if s >> k & 1]
        prod = float(np.prod([effs[k] for k in members]))
        if prod == 0:
            if excl[s] > 0:
                raise ValueError(f"zero efficiency on a channel with counts in subset {s:b}")
            continue
        coef[s] = 1.0 / prod
    # multinomial covariance of the exclusive frequencies
    cov = (np.diag(f) - np.outer(f, f)) / shots
    p, sig = {}, {}
    pattern = lambda s: tuple(s >> k & 1 for k in range(n))
    for s in range(1, 2**n):
        p[pattern(s)] = float(coef[s] * f[s])
        sig[pattern(s)] = float(coef[s] * np.sqrt(max(cov[s, s], 0.0)))
    p[pattern(0)] = float(1.0 - coef @ f)
    sig[pattern(0)] = float(np.sqrt(max(coef @ cov @ coef, 0.0)))
    multi = np.array([bin(s).count("1") >= 2 for s in range(2**n)])
    cm = np.where(multi, coef, 0.0)
    mass = float(cm @ f)
    mass_sig = float(np.sqrt(max(cm @ cov @ cm, 0.0)))
    return p, sig, mass, mass_sig


def estimate_diagonals(table: CountTable, det) -> DiagonalEstimate:
    """Efficiency-corrected populations from an LO-off count table (all settings pooled)."""
    pooled = table.total()
    shots = float(pooled.shots[0])
    if shots <= 0:
        raise ValueError("count table has no shots")
    excl = pooled.exclusive[0].astype(float)
    effs = det.efficiencies[: len(table.channels)]
    p, sig, mass, mass_sig = _estimate(excl, shots, effs)
    raw, _, _, _ = _estimate(excl, shots, (1.0,) * len(effs))
    return DiagonalEstimate(table.channels, p, sig, mass, mass_sig, shots, raw, True)


__all__ = [
    "CountTable",
    "DiagonalEstimate",
    "MalformedRecordError",
    "channel_name",
    "count",
    "count_jsonl",
    "estimate_diagonals",
    "inclusive_from_exclusive",
    "open_text",
]
