"""Synthetic heralded click records.

One herald is one trial. For every phase setting the exact joint click
distribution over all channels is computed once; each herald then draws
its click set from that table with a single uniform variate.

Random numbers come from Philox streams keyed by ``(seed, phase setting,
block)`` with a fixed block length, so the result does not depend on how
blocks are spread over worker threads.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .counting import CountTable, count, open_text
from .detection import DetectorModel, LocalOscillatorConfig, joint_click_distribution, wrap_phase
from .fock import DensityOperator, StateVector
from .states import StructuredState, assemble, channel_name

BLOCK = 1 << 16
EVENT_FORMAT = "pathtomo-events/1"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("PATHTOMO_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class PhaseSetting:
    phases: tuple
    shots: int

    def __post_init__(self):
        if self.shots <= 0:
            raise ValueError("shot counts must be positive")
        object.__setattr__(self, "phases", tuple(float(p) for p in self.phases))
        object.__setattr__(self, "shots", int(self.shots))


def phase_schedule(num_channels: int, sweep_channel: int, n_phases: int, shots: int, fixed=0.0) -> tuple:
    """Sweep one channel's LO phase over ``n_phases`` equally spaced values in [0, 2pi).

    All other channels sit at ``fixed`` (a scalar or one value per channel).
    """
    fixed = [fixed] * num_channels if np.isscalar(fixed) else list(fixed)
    out = []
    for k in range(n_phases):
        ph = list(fixed)
        ph[sweep_channel] = 2 * math.pi * k / n_phases
        out.append(PhaseSetting(tuple(ph), shots))
    return tuple(out)


def _as_density(state, cutoff: int) -> DensityOperator:
    if isinstance(state, DensityOperator):
        return state
    if isinstance(state, StateVector):
        return state.dm()
    if isinstance(state, StructuredState):
        return assemble(state, cutoff=cutoff)
    raise TypeError(f"unsupported state type {type(state).__name__}")


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """One acquisition run.

    ``lo=None`` means the channels detect the signal directly (no mixing
    beamsplitter); otherwise each channel's watched port receives the
    signal and its LO on a 50:50 beamsplitter, LO phases taken from the
    schedule. ``overlap`` is the per-channel signal/LO mode overlap.
    """

    state: object
    det: DetectorModel
    schedule: tuple
    lo: LocalOscillatorConfig | None = None
    seed: int = 0
    signal_blocked: bool = False
    overlap: tuple | None = None
    cutoff: int = 3
    run: dict = field(default_factory=dict)

    def __post_init__(self):
        rho = _as_density(self.state, self.cutoff)
        object.__setattr__(self, "state", rho)
        if not self.schedule:
            raise ValueError("schedule must be nonempty")
        n = rho.space.num_modes
        for s in self.schedule:
            if len(s.phases) != n:
                raise ValueError(f"phase setting {s.phases} does not have {n} channels")
        if len(self.det.efficiencies) != n:
            raise ValueError("detector model must have one efficiency per channel")
        if self.lo is not None and self.lo.num_modes != n:
            raise ValueError("LO config must have one amplitude per channel")
        if self.overlap is not None and (len(self.overlap) != n or any(not 0 <= v <= 1 for v in self.overlap)):
            raise ValueError("overlap must be one value in [0, 1] per channel")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "schedule", tuple(self.schedule))

    @property
    def channels(self) -> tuple:
        return tuple(channel_name(k) for k in range(self.state.space.num_modes))

    def with_(self, **changes) -> "ExperimentConfig":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return ExperimentConfig(**kw)

    def to_json(self) -> dict:
        m = self.state.matrix
        return {
            "state_matrix": [[[float(z.real), float(z.imag)] for z in row] for row in m],
            "cutoff": self.state.space.cutoff,
            "efficiencies": list(self.det.efficiencies),
            "background": list(self.det.background),
            "lo_amplitudes": None if self.lo is None else list(self.lo.amplitudes),
            "schedule": [{"phases": list(s.phases), "shots": s.shots} for s in self.schedule],
            "seed": int(self.seed),
            "signal_blocked": self.signal_blocked,
            "overlap": None if self.overlap is None else list(self.overlap),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def click_table(self, setting: PhaseSetting) -> np.ndarray:
        n = self.state.space.num_modes
        rho = self.state
        if self.signal_blocked:
            rho = rho.space.vacuum().dm()
        lo = None if self.lo is None else self.lo.with_phases(setting.phases)
        return joint_click_distribution(rho, self.det, lo, self.overlap or (1.0,) * n)


@dataclass(frozen=True, eq=False)
class EventFile:
    """Per-herald click records: global shot index, phase-setting index, click bitmask."""

    header: dict
    shot: np.ndarray
    phase_idx: np.ndarray
    clicks: np.ndarray

    def __len__(self):
        return int(self.shot.shape[0])

    def __eq__(self, other):
        return (
            isinstance(other, EventFile)
            and self.header == other.header
            and np.array_equal(self.shot, other.shot)
            and np.array_equal(self.phase_idx, other.phase_idx)
            and np.array_equal(self.clicks, other.clicks)
        )

    @property
    def channels(self) -> tuple:
        return tuple(self.header["channels"])

    def records(self):
        ch = self.channels
        for s, p, m in zip(self.shot.tolist(), self.phase_idx.tolist(), self.clicks.tolist()):
            yield {"shot": s, "phase_idx": p, "clicks": [c for k, c in enumerate(ch) if m >> k & 1]}

    def write_jsonl(self, path) -> None:
        """JSON Lines: header object first, then one record per herald. ``.gz`` paths are compressed."""
        path = Path(path)
        ch = self.channels
        names = [json.dumps([c for k, c in enumerate(ch) if m >> k & 1]) for m in range(2 ** len(ch))]
        if path.suffix == ".gz":
            raw = open(path, "wb")
            # empty name and mtime=0 keep gzip output byte-identical across runs
            fh = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
        else:
            raw = None
            fh = open(path, "wb")
        try:
            fh.write((json.dumps(self.header, sort_keys=True) + "\n").encode())
            chunk = 1 << 16
            for start in range(0, len(self), chunk):
                sl = slice(start, start + chunk)
                lines = [
                    f'{{"shot": {s}, "phase_idx": {p}, "clicks": {names[m]}}}\n'
                    for s, p, m in zip(self.shot[sl].tolist(), self.phase_idx[sl].tolist(), self.clicks[sl].tolist())
                ]
                fh.write("".join(lines).encode())
        finally:
            fh.close()
            if raw is not None:
                raw.close()

    @classmethod
    def read_jsonl(cls, path) -> "EventFile":
        header = {}
        shots, phases, masks = [], [], []
        channels = None
        with open_text(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                if lineno == 1 and "shot" not in obj:
                    header = obj
                    continue
                if channels is None:
                    channels = tuple(header.get("channels", ("A", "B", "C")))
                shots.append(obj["shot"])
                phases.append(obj["phase_idx"])
                masks.append(sum(1 << channels.index(c) for c in obj["clicks"]))
        return cls(
            header,
            np.array(shots, dtype=np.int64),
            np.array(phases, dtype=np.int32),
            np.array(masks, dtype=np.uint8),
        )


def _block_stream(seed: int, phase: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(phase), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def _sample_block(cdf: np.ndarray, seed: int, phase: int, block: int, n: int) -> np.ndarray:
    u = _block_stream(seed, phase, block).random(n)
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, cdf.size - 1).astype(np.uint8)


def sample_events(cfg: ExperimentConfig, threads: int | None = None) -> EventFile:
    threads = default_threads() if threads is None else max(1, int(threads))
    tables = [cfg.click_table(s) for s in cfg.schedule]
    jobs = []
    for p, (setting, probs) in enumerate(zip(cfg.schedule, tables)):
        cdf = np.cumsum(probs)
        cdf[-1] = 1.0
        nblocks = -(-setting.shots // BLOCK)
        for b in range(nblocks):
            n = min(BLOCK, setting.shots - b * BLOCK)
            jobs.append((cdf, p, b, n))
    if threads == 1:
        parts = [_sample_block(cdf, cfg.seed, p, b, n) for cdf, p, b, n in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda j: _sample_block(j[0], cfg.seed, j[1], j[2], j[3]), jobs))
    clicks = np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint8)
    phase_idx = np.concatenate([np.full(s.shots, p, dtype=np.int32) for p, s in enumerate(cfg.schedule)])
    shot = np.arange(clicks.size, dtype=np.int64)
    header = {
        "format": EVENT_FORMAT,
        "config_digest": cfg.digest(),
        "seed": int(cfg.seed),
        "channels": list(cfg.channels),
        "schedule": [{"phases": list(s.phases), "shots": s.shots} for s in cfg.schedule],
        "signal_blocked": cfg.signal_blocked,
        "run": dict(cfg.run),
    }
    return EventFile(header, shot, phase_idx, clicks)


def sample_counts(cfg: ExperimentConfig, rng: np.random.Generator) -> CountTable:
    """Multinomial shortcut: the aggregated counts of ``sample_events`` without per-herald records.

    Same distribution, different random stream; used for large fixture runs.
    """
    excl = np.stack([rng.multinomial(s.shots, cfg.click_table(s)) for s in cfg.schedule])
    header = {
        "config_digest": cfg.digest(),
        "seed": int(cfg.seed),
        "channels": list(cfg.channels),
        "schedule": [{"phases": list(s.phases), "shots": s.shots} for s in cfg.schedule],
        "run": dict(cfg.run),
    }
    return CountTable(cfg.channels, excl.sum(axis=1), excl, header)


def expected_counts(cfg: ExperimentConfig) -> CountTable:
    """Noise-free counts: shots times the exact click probabilities (floats)."""
    excl = np.stack([s.shots * cfg.click_table(s) for s in cfg.schedule])
    header = {
        "config_digest": cfg.digest(),
        "seed": int(cfg.seed),
        "channels": list(cfg.channels),
        "schedule": [{"phases": list(s.phases), "shots": s.shots} for s in cfg.schedule],
        "run": dict(cfg.run),
    }
    return CountTable(cfg.channels, np.array([float(s.shots) for s in cfg.schedule]), excl, header)


@dataclass(frozen=True, eq=False)
class FringeDataset:
    """Background-paired coincidence and singles counts for one channel pair.

    ``phases[p, k]`` is the LO phase of channel ``k`` at point ``p``; the
    swept variable is the relative phase ``phases[:, i] - phases[:, j]``.
    """

    pair: tuple
    phases: np.ndarray
    coincidences: np.ndarray
    background: np.ndarray
    singles: np.ndarray
    singles_background: np.ndarray
    shots: np.ndarray
    shots_background: np.ndarray

    def __post_init__(self):
        for name in ("phases", "coincidences", "background", "singles", "singles_background", "shots", "shots_background"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        object.__setattr__(self, "pair", tuple(int(x) for x in self.pair))
        if np.any(self.coincidences > self.shots) or np.any(self.background > self.shots_background):
            raise ValueError("counts exceed shots")
        rel = np.round(np.mod(self.relative_phase, 2 * math.pi), 12)
        if len(set(rel.tolist())) != rel.size:
            raise ValueError("phase points are not distinct")

    @property
    def relative_phase(self) -> np.ndarray:
        i, j = self.pair
        return self.phases[:, i] - self.phases[:, j]

    def __len__(self):
        return int(self.coincidences.shape[0])

    @classmethod
    def from_tables(cls, pair, signal: CountTable, background: CountTable) -> "FringeDataset":
        names = [signal.channels[k] for k in pair]
        phases = np.array([s["phases"] for s in signal.header["schedule"]])
        return cls(
            pair,
            phases,
            signal.inclusive_count(names),
            background.inclusive_count(names),
            signal.singles(),
            background.singles(),
            signal.shots,
            background.shots,
        )

    def to_json(self) -> dict:
        return {
            "pair": list(self.pair),
            "phases": self.phases.tolist(),
            "coincidences": self.coincidences.tolist(),
            "background": self.background.tolist(),
            "singles": self.singles.tolist(),
            "singles_background": self.singles_background.tolist(),
            "shots": self.shots.tolist(),
            "shots_background": self.shots_background.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FringeDataset":
        return cls(**{k: doc[k] for k in ("pair", "phases", "coincidences", "background", "singles",
                                          "singles_background", "shots", "shots_background")})


def sweep_phase(cfg: ExperimentConfig, pair, threads: int | None = None, mode: str = "events") -> FringeDataset:
    """Signal and LO-only background runs over ``cfg.schedule``, reduced to a fringe dataset.

    mode="events" samples per-herald records; "multinomial" samples the
    aggregated counts directly; "expected" returns noise-free counts.
    """
    if cfg.lo is None:
        raise ValueError("a phase sweep needs local oscillators")
    if len(cfg.schedule) < 8:
        raise ValueError("a phase sweep needs at least 8 phase settings")
    rel = {round(wrap_phase(s.phases[pair[0]] - s.phases[pair[1]]), 12) for s in cfg.schedule}
    if len(rel) < 8:
        raise ValueError("a phase sweep needs at least 8 distinct relative phases")
    sig_cfg = cfg.with_(signal_blocked=False, run={**cfg.run, "kind": "signal", "pair": list(pair)})
    bg_cfg = cfg.with_(
        signal_blocked=True,
        seed=derive_seed(cfg.seed, "background"),
        run={**cfg.run, "kind": "background", "pair": list(pair)},
    )
    if mode == "events":
        sig, bg = count(sample_events(sig_cfg, threads)), count(sample_events(bg_cfg, threads))
    elif mode == "multinomial":
        sig = sample_counts(sig_cfg, np.random.default_rng(sig_cfg.seed))
        bg = sample_counts(bg_cfg, np.random.default_rng(bg_cfg.seed))
    elif mode == "expected":
        sig, bg = expected_counts(sig_cfg), expected_counts(bg_cfg)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return FringeDataset.from_tables(pair, sig, bg)


def derive_seed(seed: int, *labels) -> int:
    """Deterministic child seed from a master seed and string/int labels."""
    blob = json.dumps([int(seed), *[str(x) for x in labels]]).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


__all__ = [
    "EventFile",
    "ExperimentConfig",
    "FringeDataset",
    "PhaseSetting",
    "derive_seed",
    "expected_counts",
    "phase_schedule",
    "sample_counts",
    "sample_events",
    "sweep_phase",
]
