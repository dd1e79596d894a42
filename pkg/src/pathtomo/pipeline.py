"""Protocol description -> acquisition runs -> reconstruction.

A protocol JSON document describes the state, detectors, LOs and the
measurement plan. It expands into named runs (one LO-off population run,
one signal and one LO-only background sweep per mode pair, optionally one
singles sweep per mode). ``run_protocol`` executes everything in memory; the
CLI goes through event files on disk and must arrive at the same result.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .counting import CountTable, count
from .detection import DetectorModel, LocalOscillatorConfig, coincidence_analytic, singles_analytic
from .fock import DensityOperator, FockSpace
from .montecarlo import ExperimentConfig, FringeDataset, PhaseSetting, derive_seed, phase_schedule, sample_events
from .states import StructuredState, WStateSpec, channel_index, channel_name, extract_structure, make_w_state, mode_pairs
from .tomography import PhaseConvention, ReconstructionOptions, TomographyData, reconstruct


class ConfigError(ValueError):
    """Invalid protocol document; the message names the offending field."""


def _field(doc, key, kind, default=None, required=False):
    if key not in doc or doc[key] is None:
        if required:
            raise ConfigError(f"missing field '{key}'")
        return default
    val = doc[key]
    try:
        return kind(val)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field '{key}': {exc}") from None


def _pair_key(name: str) -> tuple:
    if len(name) != 2:
        raise ConfigError(f"bad pair name {name!r}")
    i, j = sorted((channel_index(name[0]), channel_index(name[1])))
    return (i, j)


@dataclass(frozen=True, eq=False)
class Protocol:
    state: object
    num_modes: int
    det: DetectorModel
    intensities: tuple
    overlap: tuple | None
    seed: int
    shots: int
    phases: int
    diagonal_shots: int
    singles_sweeps: bool
    fixed_phase: float
    cutoff: int
    targets: dict
    options: ReconstructionOptions
    doc: dict

    @classmethod
    def from_json(cls, doc: dict) -> "Protocol":
        if not isinstance(doc, dict):
            raise ConfigError("protocol must be a JSON object")
        cutoff = _field(doc, "cutoff", int, 3)
        sdoc = doc.get("state")
        if sdoc is None:
            raise ConfigError("missing field 'state'")
        try:
            if "w" in sdoc:
                w = sdoc["w"]
                spec = WStateSpec(int(w["N"]), tuple(w.get("signs", [1] * int(w["N"]))), w.get("weights"))
                state = make_w_state(spec, cutoff=cutoff)
                n = spec.N
            elif sdoc.get("vacuum"):
                n = int(sdoc["vacuum"])
                state = FockSpace(n, cutoff).vacuum()
            else:
                state = StructuredState.from_json(sdoc)
                n = state.num_modes
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"field 'state': {exc}") from None
        ddoc = doc.get("detector", {})
        eff = ddoc.get("efficiencies", 1.0)
        eff = [float(eff)] * n if np.isscalar(eff) else [float(e) for e in eff]
        bg = ddoc.get("background", 0.0)
        bg = [float(bg)] * n if np.isscalar(bg) else [float(b) for b in bg]
        try:
            det = DetectorModel(tuple(eff), "threshold", tuple(bg))
        except ValueError as exc:
            raise ConfigError(f"field 'detector': {exc}") from None
        if len(eff) != n or len(bg) != n:
            raise ConfigError(f"field 'detector': need {n} channels")
        inten = doc.get("lo_intensities", 0.1)
        inten = [float(inten)] * n if np.isscalar(inten) else [float(x) for x in inten]
        if len(inten) != n or any(x <= 0 for x in inten):
            raise ConfigError(f"field 'lo_intensities': need {n} positive values")
        overlap = doc.get("overlap")
        if overlap is not None:
            overlap = [float(overlap)] * n if np.isscalar(overlap) else [float(v) for v in overlap]
            if len(overlap) != n or any(not 0 < v <= 1 for v in overlap):
                raise ConfigError(f"field 'overlap': need {n} values in (0, 1]")
            overlap = tuple(overlap)
        rdoc = doc.get("reconstruct", {})
        targets = {}
        for name, signs in rdoc.get("targets", {}).items():
            if len(signs) != n:
                raise ConfigError(f"field 'reconstruct.targets.{name}': need {n} signs")
            targets[name] = WStateSpec(n, tuple(int(s) for s in signs), None)
        ref = rdoc.get("gauge")
        conv = PhaseConvention() if not ref else PhaseConvention(reference={_pair_key(k): float(v) for k, v in ref.items()})
        mm = rdoc.get("mode_match")
        if mm is not None:
            mm = tuple([float(mm)] * n if np.isscalar(mm) else [float(v) for v in mm])
        errors = rdoc.get("errors")
        if errors not in (None, "bootstrap", "propagation"):
            raise ConfigError(f"field 'reconstruct.errors': unknown method {errors!r}")
        known = rdoc.get("lo_intensities", "measured")
        if known not in ("measured", "known"):
            raise ConfigError("field 'reconstruct.lo_intensities' must be 'measured' or 'known'")
        seed = _field(doc, "seed", int, 0)
        opts = ReconstructionOptions(
            lo_intensities=tuple(inten) if known == "known" else None,
            convention=conv,
            overlaps=mm,
            project_psd=bool(rdoc.get("project_psd", False)),
            error_method=errors,
            bootstrap_samples=int(rdoc.get("bootstrap_samples", 1000)),
            seed=derive_seed(seed, "bootstrap"),
        )
        proto = cls(
            state=state,
            num_modes=n,
            det=det,
            intensities=tuple(inten),
            overlap=overlap,
            seed=seed,
            shots=_field(doc, "shots", int, 100000),
            phases=_field(doc, "phases", int, 12),
            diagonal_shots=_field(doc, "diagonal_shots", int, _field(doc, "shots", int, 100000)),
            singles_sweeps=bool(doc.get("singles_sweeps", False)),
            fixed_phase=_field(doc, "fixed_phase", float, 0.0),
            cutoff=cutoff,
            targets=targets,
            options=opts,
            doc=doc,
        )
        if proto.shots <= 0 or proto.diagonal_shots <= 0:
            raise ConfigError("field 'shots': must be positive")
        if proto.phases < 8:
            raise ConfigError("field 'phases': a fringe needs at least 8 phase points")
        return proto

    @classmethod
    def load(cls, path) -> "Protocol":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_json(doc)

    def with_overrides(self, seed=None, shots=None, phases=None, project_psd=None) -> "Protocol":
        doc = dict(self.doc)
        if seed is not None:
            doc["seed"] = seed
        if shots is not None:
            doc["shots"] = shots
        if phases is not None:
            doc["phases"] = phases
        if project_psd is not None:
            doc["reconstruct"] = {**doc.get("reconstruct", {}), "project_psd": project_psd}
        return Protocol.from_json(doc)

    def runs(self) -> dict:
        """Named ExperimentConfigs, in a fixed order."""
        n = self.num_modes
        lo = LocalOscillatorConfig.from_intensities(self.intensities, [0.0] * n)
        out = {}
        out["diagonal"] = ExperimentConfig(
            self.state,
            self.det,
            (PhaseSetting((0.0,) * n, self.diagonal_shots),),
            seed=derive_seed(self.seed, "diagonal"),
            cutoff=self.cutoff,
            run={"kind": "diagonal"},
        )

        def sweep(name, sweep_channel, pair):
            sched = phase_schedule(n, sweep_channel, self.phases, self.shots, fixed=self.fixed_phase)
            base = dict(state=self.state, det=self.det, schedule=sched, lo=lo, overlap=self.overlap, cutoff=self.cutoff)
            out[f"{name}_signal"] = ExperimentConfig(
                **base, seed=derive_seed(self.seed, name, "signal"), run={"kind": "signal", "name": name, "pair": list(pair)}
            )
            out[f"{name}_background"] = ExperimentConfig(
                **base,
                seed=derive_seed(self.seed, name, "background"),
                signal_blocked=True,
                run={"kind": "background", "name": name, "pair": list(pair)},
            )

        for i, j in mode_pairs(n):
            sweep(f"pair_{channel_name(i)}{channel_name(j)}", j, (i, j))
        if self.singles_sweeps:
            for k in range(n):
                sweep(f"singles_{channel_name(k)}", k, (k, (k + 1) % n))
        return out


def assemble_data(tables: dict, num_modes: int) -> TomographyData:
    """Group count tables by run name into reconstruction input."""
    if "diagonal" not in tables:
        raise ConfigError("missing LO-off population run 'diagonal'")
    fringes, singles = {}, {}
    for name in sorted(tables):
        if not name.endswith("_signal"):
            continue
        stem = name[: -len("_signal")]
        bg = tables.get(stem + "_background")
        if bg is None:
            raise ConfigError(f"run {stem!r} has no LO-only background")
        sig = tables[name]
        pair = tuple(sig.header.get("run", {}).get("pair", ()))
        if len(pair) != 2:
            raise ConfigError(f"run {stem!r} does not declare its channel pair")
        ds = FringeDataset.from_tables(pair, sig, bg)
        if stem.startswith("pair_"):
            fringes[tuple(sorted(pair))] = ds
        elif stem.startswith("singles_"):
            singles[channel_index(stem[len("singles_"):])] = ds
    return TomographyData(tables["diagonal"], fringes, singles)


def simulate(proto: Protocol, threads=None) -> dict:
    """All runs sampled as event files, keyed by run name."""
    return {name: sample_events(cfg, threads) for name, cfg in proto.runs().items()}


def run_protocol(proto: Protocol, threads=None):
    """In-process simulate -> count -> reconstruct."""
    events = simulate(proto, threads)
    tables = {name: count(ev) for name, ev in events.items()}
    data = assemble_data(tables, proto.num_modes)
    return reconstruct(data, proto.det, _with_threads(proto.options, threads), proto.targets)


def _with_threads(opts: ReconstructionOptions, threads):
    return replace(opts, threads=threads)


def _exclusive_from_inclusive(inc: np.ndarray) -> np.ndarray:
    out = np.array(inc, dtype=float)
    n = int(np.log2(out.size))
    for k in range(n):
        bit = 1 << k
        for m in range(out.size):
            if not m & bit:
                out[m] -= out[m | bit]
    return out


def ideal_tables(proto: Protocol) -> dict:
    """Noise-free linear-response count tables (one shot per point, probabilities as counts).

    Singles and pair coincidences follow the closed-form number-operator
    probabilities; higher-order coincidences are set to zero. Reconstructing
    these with known LO intensities returns the model state exactly.
    """
    state = proto.state
    if isinstance(state, StructuredState):
        model = state
    else:
        rho = state if isinstance(state, DensityOperator) else state.dm()
        model = extract_structure(rho)
    n = proto.num_modes
    tables = {}
    for name, cfg in proto.runs().items():
        m = StructuredState(n, {(0,) * n: 1.0}, {}, {}) if cfg.signal_blocked else model
        rows = []
        for s in cfg.schedule:
            inc = np.zeros(2**n)
            if cfg.lo is None:
                for k in range(n):
                    inc[1 << k] = m.p_single(k) * proto.det.eta(k)
            else:
                lo = cfg.lo.with_phases(s.phases)
                for k in range(n):
                    inc[1 << k] = singles_analytic(m, lo, proto.det, (k, k)).P_X
                for i, j in mode_pairs(n):
                    inc[(1 << i) | (1 << j)] = coincidence_analytic(m, lo, proto.det, (i, j)).P_XY
            inc[0] = 1.0
            rows.append(_exclusive_from_inclusive(inc))
        header = {
            "config_digest": cfg.digest(),
            "seed": int(cfg.seed),
            "channels": list(cfg.channels),
            "schedule": [{"phases": list(s.phases), "shots": 1} for s in cfg.schedule],
            "run": dict(cfg.run),
        }
        tables[name] = CountTable(cfg.channels, np.ones(len(rows)), np.array(rows), header)
    return tables


__all__ = ["ConfigError", "Protocol", "assemble_data", "ideal_tables", "run_protocol", "simulate"]
