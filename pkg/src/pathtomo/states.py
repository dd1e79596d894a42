"""Parametrized single-photon path-entangled state families.

A :class:`StructuredState` carries the block model used throughout the
toolkit: a vacuum population, one population per single-photon pattern,
pairwise single-photon coherences ``d[(i, j)] = <1_i| rho |1_j>`` (row mode
``i < j``), optional vacuum coherences ``d_vac[i] = <0| rho |1_i>`` and an
optional unnormalized two-photon block. Everything else is zero.
"""

from __future__ import annotations

import itertools
import string
from dataclasses import dataclass, field

import numpy as np

from .fock import PSD_TOL, DensityOperator, FockSpace, StateVector

NORM_TOL = 1e-10
BOUND_TOL = 1e-10


def channel_name(mode: int) -> str:
    return string.ascii_uppercase[mode]


def channel_index(name: str) -> int:
    return string.ascii_uppercase.index(name)


def vacuum_pattern(num_modes: int) -> tuple[int, ...]:
    return (0,) * num_modes


def single_pattern(num_modes: int, mode: int) -> tuple[int, ...]:
    p = [0] * num_modes
    p[mode] = 1
    return tuple(p)


def mode_pairs(num_modes: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(num_modes), 2))


def two_photon_patterns(num_modes: int) -> list[tuple[int, ...]]:
    """Two-photon basis: split pairs |..1_i..1_j..> first, then doubles |..2_i..>."""
    out = []
    for i, j in mode_pairs(num_modes):
        p = [0] * num_modes
        p[i] = p[j] = 1
        out.append(tuple(p))
    for i in range(num_modes):
        p = [0] * num_modes
        p[i] = 2
        out.append(tuple(p))
    return out


def pattern_key(pattern) -> str:
    return "".join(str(n) for n in pattern)


def _complex_pair(z: complex) -> list[float]:
    return [float(np.real(z)), float(np.imag(z))]


@dataclass(frozen=True, eq=False)
class StructuredState:
    num_modes: int
    diagonals: dict
    coherences: dict = field(default_factory=dict)
    vacuum_coherences: dict = field(default_factory=dict)
    two_photon_block: np.ndarray | None = None
    residual: float = 0.0

    def __post_init__(self):
        n = self.num_modes
        allowed = {vacuum_pattern(n)} | {single_pattern(n, i) for i in range(n)}
        diag = {}
        for pat, val in self.diagonals.items():
            pat = tuple(int(x) for x in pat)
            if pat not in allowed:
                raise ValueError(f"diagonal pattern {pat} is not vacuum or single-photon; use two_photon_block")
            diag[pat] = float(val)
        coh = {}
        for (i, j), val in self.coherences.items():
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ValueError(f"invalid coherence pair {(i, j)}")
            if i > j:
                i, j, val = j, i, np.conj(val)
            coh[(i, j)] = complex(val)
        vac = {}
        for i, val in self.vacuum_coherences.items():
            if not 0 <= i < n:
                raise ValueError(f"invalid vacuum-coherence mode {i}")
            vac[int(i)] = complex(val)
        block = self.two_photon_block
        if block is not None:
            block = np.array(block, dtype=complex)
            k = len(two_photon_patterns(n))
            if block.shape != (k, k):
                raise ValueError(f"two_photon_block must be {k}x{k}")
            block.setflags(write=False)
        object.__setattr__(self, "diagonals", diag)
        object.__setattr__(self, "coherences", coh)
        object.__setattr__(self, "vacuum_coherences", vac)
        object.__setattr__(self, "two_photon_block", block)

    # -- accessors -------------------------------------------------------
    @property
    def p_vacuum(self) -> float:
        return self.diagonals.get(vacuum_pattern(self.num_modes), 0.0)

    def p_single(self, mode: int) -> float:
        return self.diagonals.get(single_pattern(self.num_modes, mode), 0.0)

    @property
    def single_photon_probabilities(self) -> np.ndarray:
        return np.array([self.p_single(i) for i in range(self.num_modes)])

    def d(self, i: int, j: int) -> complex:
        if i == j:
            return complex(self.p_single(i))
        if i < j:
            return self.coherences.get((i, j), 0j)
        return np.conj(self.coherences.get((j, i), 0j))

    def d_vac(self, mode: int) -> complex:
        return self.vacuum_coherences.get(mode, 0j)

    @property
    def two_photon_trace(self) -> float:
        if self.two_photon_block is None:
            return 0.0
        return float(np.trace(self.two_photon_block).real)

    @property
    def total(self) -> float:
        return sum(self.diagonals.values()) + self.two_photon_trace

    def single_photon_block(self) -> np.ndarray:
        n = self.num_modes
        return np.array([[self.d(i, j) for j in range(n)] for i in range(n)])

    # -- transforms ------------------------------------------------------
    def restricted(self, modes) -> "StructuredState":
        """Model of the reduced state on ``modes`` (what tracing out the rest gives)."""
        modes = sorted(modes)
        n = len(modes)
        full = assemble(self, validate=False, cutoff=2)
        from .fock import partial_trace

        return extract_structure(partial_trace(full, modes)) if n < self.num_modes else self

    def to_subspace(self) -> "StructuredState":
        """Single-photon-subspace normalization: the single-photon block rescaled to unit trace."""
        s = float(self.single_photon_probabilities.sum())
        if s <= 0:
            raise ValueError("no single-photon population to normalize")
        n = self.num_modes
        return StructuredState(
            n,
            {single_pattern(n, i): self.p_single(i) / s for i in range(n)},
            {k: v / s for k, v in self.coherences.items()},
        )

    def allclose(self, other: "StructuredState", atol: float = 1e-12) -> bool:
        if self.num_modes != other.num_modes:
            return False
        keys = set(self.diagonals) | set(other.diagonals)
        if any(abs(self.diagonals.get(k, 0.0) - other.diagonals.get(k, 0.0)) > atol for k in keys):
            return False
        for i, j in mode_pairs(self.num_modes):
            if abs(self.d(i, j) - other.d(i, j)) > atol:
                return False
        for i in range(self.num_modes):
            if abs(self.d_vac(i) - other.d_vac(i)) > atol:
                return False
        k = len(two_photon_patterns(self.num_modes))
        a = self.two_photon_block if self.two_photon_block is not None else np.zeros((k, k))
        b = other.two_photon_block if other.two_photon_block is not None else np.zeros((k, k))
        return bool(np.max(np.abs(a - b)) <= atol)

    # -- serialization ---------------------------------------------------
    def to_json(self) -> dict:
        doc = {
            "num_modes": self.num_modes,
            "diagonals": {pattern_key(p): v for p, v in sorted(self.diagonals.items())},
            "coherences": {
                channel_name(i) + channel_name(j): _complex_pair(v) for (i, j), v in sorted(self.coherences.items())
            },
            "vacuum_coherences": {channel_name(i): _complex_pair(v) for i, v in sorted(self.vacuum_coherences.items())},
            "two_photon_trace": self.two_photon_trace,
        }
        if self.two_photon_block is not None:
            doc["two_photon_block"] = [[_complex_pair(z) for z in row] for row in self.two_photon_block]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "StructuredState":
        diag = {tuple(int(c) for c in k): float(v) for k, v in doc["diagonals"].items()}
        n = int(doc.get("num_modes", len(next(iter(doc["diagonals"])))))
        coh = {}
        for k, v in doc.get("coherences", {}).items():
            coh[(channel_index(k[0]), channel_index(k[1]))] = complex(*v) if isinstance(v, list) else complex(v)
        vac = {}
        for k, v in doc.get("vacuum_coherences", {}).items():
            vac[channel_index(k)] = complex(*v) if isinstance(v, list) else complex(v)
        model = cls(n, diag, coh, vac)
        if "two_photon_block" in doc:
            block = np.array([[complex(*z) for z in row] for row in doc["two_photon_block"]])
            model = cls(n, diag, coh, vac, block)
        elif doc.get("two_photon_trace", 0.0) > 0:
            model = with_two_photon_contamination(model, float(doc["two_photon_trace"]), from_vacuum=False)
        return model


@dataclass(frozen=True)
class WStateSpec:
    N: int
    signs: tuple = None
    weights: tuple = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("W state needs N >= 1")
        signs = tuple(self.signs) if self.signs is not None else (1,) * self.N
        if len(signs) != self.N or any(s not in (1, -1) for s in signs):
            raise ValueError(f"signs must be {self.N} entries of +1/-1")
        if self.weights is None:
            w = np.full(self.N, 1 / np.sqrt(self.N))
        else:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.N,) or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be N finite nonnegative numbers")
            norm = np.sqrt(np.sum(w**2))
            if norm == 0:
                raise ValueError("weights are not normalizable")
            w = w / norm
        object.__setattr__(self, "signs", signs)
        object.__setattr__(self, "weights", tuple(float(x) for x in w))


def make_w_state(spec: WStateSpec, cutoff: int = 3) -> StateVector:
    space = FockSpace(spec.N, cutoff)
    amps = np.zeros(space.dim, dtype=complex)
    for i, (s, w) in enumerate(zip(spec.signs, spec.weights)):
        amps[space.index(single_pattern(spec.N, i))] = s * w
    return StateVector(space, amps)


def assemble(model: StructuredState, cutoff: int = 3, validate: bool = True) -> DensityOperator:
    """Full density matrix of a structured model on a Fock space of the given cutoff."""
    n = model.num_modes
    if model.two_photon_block is not None and cutoff < 2:
        raise ValueError("two-photon block needs cutoff >= 2")
    if validate:
        check_model(model)
    space = FockSpace(n, cutoff)
    m = np.zeros((space.dim, space.dim), dtype=complex)
    vac = space.index(vacuum_pattern(n))
    m[vac, vac] = model.p_vacuum
    singles = [space.index(single_pattern(n, i)) for i in range(n)]
    for i in range(n):
        for j in range(n):
            m[singles[i], singles[j]] = model.d(i, j)
    for i, z in model.vacuum_coherences.items():
        m[vac, singles[i]] = z
        m[singles[i], vac] = np.conj(z)
    if model.two_photon_block is not None:
        idx = [space.index(p) for p in two_photon_patterns(n)]
        m[np.ix_(idx, idx)] = model.two_photon_block
    rho = DensityOperator(space, m)
    if validate and not rho.is_psd(PSD_TOL):
        raise ValueError(f"assembled state is not positive semidefinite (min eigenvalue {rho.min_eigenvalue():.3g})")
    return rho


def check_model(model: StructuredState):
    """Raise ValueError if the model violates normalization or positivity bounds."""
    if any(v < -BOUND_TOL for v in model.diagonals.values()):
        raise ValueError("negative diagonal probability")
    if abs(model.total - 1.0) > NORM_TOL:
        raise ValueError(f"probabilities sum to {model.total!r}, not 1")
    for (i, j), z in model.coherences.items():
        bound = np.sqrt(max(model.p_single(i), 0) * max(model.p_single(j), 0))
        if abs(z) > bound + BOUND_TOL:
            raise ValueError(f"|d_{channel_name(i)}{channel_name(j)}| = {abs(z):.6g} exceeds sqrt(p_i p_j) = {bound:.6g}")
    for i, z in model.vacuum_coherences.items():
        bound = np.sqrt(max(model.p_vacuum, 0) * max(model.p_single(i), 0))
        if abs(z) > bound + BOUND_TOL:
            raise ValueError(f"|d_{channel_name(i)}| = {abs(z):.6g} exceeds sqrt(p_vac p_i) = {bound:.6g}")


def extract_structure(rho: DensityOperator) -> StructuredState:
    """Read the model parameters off a density matrix.

    Entries outside the model's pattern are not an error; their Frobenius
    norm is stored in ``residual``.
    """
    space = rho.space
    n = space.num_modes
    m = rho.matrix
    vac = space.index(vacuum_pattern(n))
    singles = [space.index(single_pattern(n, i)) for i in range(n)]
    diag = {vacuum_pattern(n): float(m[vac, vac].real)}
    for i in range(n):
        diag[single_pattern(n, i)] = float(m[singles[i], singles[i]].real)
    coh = {(i, j): complex(m[singles[i], singles[j]]) for i, j in mode_pairs(n)}
    dvac = {i: complex(m[vac, singles[i]]) for i in range(n)}
    dvac = {i: z for i, z in dvac.items() if z != 0}
    mask = np.zeros(m.shape, dtype=bool)
    low = [vac] + singles
    mask[np.ix_(low, low)] = True
    block = None
    if space.cutoff >= 2:
        idx = [space.index(p) for p in two_photon_patterns(n)]
        sub = m[np.ix_(idx, idx)]
        mask[np.ix_(idx, idx)] = True
        if np.any(sub != 0):
            block = sub
    residual = float(np.sqrt(np.sum(np.abs(m[~mask]) ** 2)))
    return StructuredState(n, diag, coh, dvac, block, residual)


def with_two_photon_contamination(model: StructuredState, trace: float, from_vacuum: bool = True) -> StructuredState:
    """Add a diagonal two-photon block of the given trace, spread evenly over the two-photon patterns.

    The mass is taken from the vacuum population unless ``from_vacuum`` is False.
    """
    if trace < 0:
        raise ValueError("two-photon trace must be nonnegative")
    n = model.num_modes
    k = len(two_photon_patterns(n))
    diag = dict(model.diagonals)
    if from_vacuum:
        pv = model.p_vacuum - trace
        if pv < 0:
            raise ValueError("not enough vacuum population to absorb the two-photon mass")
        diag[vacuum_pattern(n)] = pv
    block = np.eye(k) * (trace / k)
    return StructuredState(n, diag, model.coherences, model.vacuum_coherences, block)


def model_condition_warnings(model: StructuredState, ratio: float = 0.05) -> list[str]:
    """Check the weak-source ordering p_vac >> p_single >> Tr[rho_2]."""
    out = []
    ps = model.single_photon_probabilities
    if ps.size and model.p_vacuum < ps.max():
        out.append(f"vacuum population {model.p_vacuum:.4g} is below the largest single-photon population {ps.max():.4g}")
    if ps.size and model.two_photon_trace > ratio * ps.min():
        out.append(
            f"two-photon mass {model.two_photon_trace:.4g} exceeds {ratio:g} x min single-photon population {ps.min():.4g}"
        )
    return out


def random_structured_state(
    rng: np.random.Generator,
    num_modes: int,
    *,
    single_mass: float | None = None,
    vacuum_coherence: bool = False,
    two_photon_trace: float = 0.0,
) -> StructuredState:
    """Random valid model; the low-photon block is a random positive matrix."""
    n = num_modes
    if single_mass is None:
        single_mass = rng.uniform(0.05, 0.9)
    k = n + 1
    g = rng.normal(size=(k, k)) + 1j * rng.normal(size=(k, k))
    w = g @ g.conj().T
    w /= np.trace(w).real
    if not vacuum_coherence:
        w[0, 1:] = 0
        w[1:, 0] = 0
    s = np.trace(w[1:, 1:]).real
    w[1:, 1:] *= single_mass / s
    w[0, 0] = 1.0 - single_mass - two_photon_trace
    if w[0, 0] < 0:
        raise ValueError("single_mass + two_photon_trace exceeds 1")
    if vacuum_coherence:
        # shrink to stay inside the positive cone after the rescaling
        lim = np.sqrt(w[0, 0].real * np.diag(w[1:, 1:]).real)
        scale = min(1.0, float(np.min(lim / np.maximum(np.abs(w[0, 1:]), 1e-300)))) * rng.uniform(0.2, 0.9)
        w[0, 1:] *= scale
        w[1:, 0] = w[0, 1:].conj()
        while np.linalg.eigvalsh(w).min() < 0:
            w[0, 1:] *= 0.5
            w[1:, 0] = w[0, 1:].conj()
    diag = {vacuum_pattern(n): float(w[0, 0].real)}
    diag.update({single_pattern(n, i): float(w[i + 1, i + 1].real) for i in range(n)})
    coh = {(i, j): complex(w[i + 1, j + 1]) for i, j in mode_pairs(n)}
    vac = {i: complex(w[0, i + 1]) for i in range(n)} if vacuum_coherence else {}
    model = StructuredState(n, diag, coh, vac)
    if two_photon_trace > 0:
        model = with_two_photon_contamination(model, two_photon_trace, from_vacuum=False)
    return model
