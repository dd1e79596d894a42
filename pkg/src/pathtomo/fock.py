"""Dense linear algebra on truncated multimode bosonic Fock spaces.

Basis ordering: mode 0 is the most significant digit and the photon number
of the last mode varies fastest, i.e. the ordering produced by ``np.kron``
of single-mode operators taken in mode order. The flat index of the pattern
``(n_0, ..., n_{N-1})`` is ``sum_k n_k * (cutoff + 1) ** (N - 1 - k)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-10
PSD_TOL = 1e-8

OPERATOR_KINDS = ("annihilation", "number", "unitary", "povm-element", "general")


class CutoffError(ValueError):
    """Raised when a truncation is too small for the requested accuracy."""


@dataclass(frozen=True)
class FockSpace:
    num_modes: int
    cutoff: int = 3

    def __post_init__(self):
        if self.num_modes < 1:
            raise ValueError(f"num_modes must be positive, got {self.num_modes}")
        if self.cutoff < 0:
            raise ValueError(f"cutoff must be non-negative, got {self.cutoff}")

    @property
    def local_dim(self) -> int:
        return self.cutoff + 1

    @property
    def dim(self) -> int:
        return self.local_dim**self.num_modes

    def index(self, pattern: Sequence[int]) -> int:
        if len(pattern) != self.num_modes:
            raise ValueError(f"pattern {tuple(pattern)} has wrong length for {self.num_modes} modes")
        idx = 0
        for n in pattern:
            if not 0 <= n <= self.cutoff:
                raise ValueError(f"occupation {n} outside [0, {self.cutoff}]")
            idx = idx * self.local_dim + int(n)
        return idx

    def pattern(self, index: int) -> tuple[int, ...]:
        out = []
        for _ in range(self.num_modes):
            index, n = divmod(index, self.local_dim)
            out.append(int(n))
        return tuple(reversed(out))

    def patterns(self) -> list[tuple[int, ...]]:
        return list(itertools.product(range(self.local_dim), repeat=self.num_modes))

    def total_photons(self) -> np.ndarray:
        """Total photon number of every basis state, in basis order."""
        return np.array([sum(p) for p in self.patterns()])

    def basis(self, pattern: Sequence[int]) -> "StateVector":
        amps = np.zeros(self.dim, dtype=complex)
        amps[self.index(pattern)] = 1.0
        return StateVector(self, amps)

    def vacuum(self) -> "StateVector":
        return self.basis((0,) * self.num_modes)

    def _check_mode(self, mode: int):
        if not 0 <= mode < self.num_modes:
            raise IndexError(f"mode {mode} out of range for {self.num_modes} modes")


@dataclass(frozen=True, eq=False)
class StateVector:
    space: FockSpace
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        if amps.shape[0] != self.space.dim:
            raise ValueError(f"expected {self.space.dim} amplitudes, got {amps.shape[0]}")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "StateVector":
        n = self.norm
        if n == 0:
            raise ValueError("cannot normalize the zero vector")
        return StateVector(self.space, self.amplitudes / n)

    def dm(self) -> "DensityOperator":
        return DensityOperator(self.space, np.outer(self.amplitudes, self.amplitudes.conj()))

    def amplitude(self, pattern: Sequence[int]) -> complex:
        return complex(self.amplitudes[self.space.index(pattern)])


@dataclass(frozen=True, eq=False)
class DensityOperator:
    space: FockSpace
    matrix: np.ndarray
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex)
        if m.shape != (self.space.dim, self.space.dim):
            raise ValueError(f"expected {self.space.dim}x{self.space.dim} matrix, got {m.shape}")
        if self.check:
            resid = np.max(np.abs(m - m.conj().T)) if m.size else 0.0
            scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
            if resid > HERMITIAN_TOL * scale:
                raise ValueError(f"matrix is not Hermitian (residual {resid:.3g})")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix).min())

    def is_normalized(self, tol: float = TRACE_TOL) -> bool:
        return abs(self.trace - 1.0) <= tol

    def is_psd(self, tol: float = PSD_TOL) -> bool:
        return self.min_eigenvalue() >= -tol

    def element(self, row: Sequence[int], col: Sequence[int]) -> complex:
        return complex(self.matrix[self.space.index(row), self.space.index(col)])

    def expect(self, op: "ModeOperator | np.ndarray") -> complex:
        m = op.matrix if isinstance(op, ModeOperator) else op
        return complex(np.einsum("ij,ji->", self.matrix, m))

    def normalized(self) -> "DensityOperator":
        t = self.trace
        if t <= 0:
            raise ValueError("cannot normalize a state with non-positive trace")
        return DensityOperator(self.space, self.matrix / t)


@dataclass(frozen=True, eq=False)
class ModeOperator:
    space: FockSpace
    matrix: np.ndarray
    kind: str = "general"

    def __post_init__(self):
        if self.kind not in OPERATOR_KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        m = np.array(self.matrix, dtype=complex)
        if m.shape != (self.space.dim, self.space.dim):
            raise ValueError(f"expected {self.space.dim}x{self.space.dim} matrix, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dag(self) -> "ModeOperator":
        kind = self.kind if self.kind in ("number", "unitary", "povm-element") else "general"
        return ModeOperator(self.space, self.matrix.conj().T, kind)

    def __matmul__(self, other):
        if isinstance(other, ModeOperator):
            return ModeOperator(self.space, self.matrix @ other.matrix)
        if isinstance(other, StateVector):
            return StateVector(self.space, self.matrix @ other.amplitudes)
        return NotImplemented

    def apply(self, state: "DensityOperator | StateVector"):
        """Conjugate a density operator (``U rho U^dagger``) or act on a ket."""
        if isinstance(state, StateVector):
            return StateVector(self.space, self.matrix @ state.amplitudes)
        m = self.matrix @ state.matrix @ self.matrix.conj().T
        return DensityOperator(self.space, (m + m.conj().T) / 2)


# ---------------------------------------------------------------------------
# single-mode building blocks

def single_mode_annihilation(cutoff: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, cutoff + 1, dtype=float)), k=1).astype(complex)


def single_mode_number(cutoff: int) -> np.ndarray:
    return np.diag(np.arange(cutoff + 1, dtype=float)).astype(complex)


def embed(local: np.ndarray, modes: Sequence[int], space: FockSpace) -> np.ndarray:
    """Lift an operator acting on ``modes`` (in the given order) to the full space."""
    modes = list(modes)
    if len(set(modes)) != len(modes):
        raise ValueError(f"repeated mode in {modes}")
    for m in modes:
        space._check_mode(m)
    d, n, k = space.local_dim, space.num_modes, len(modes)
    if local.shape != (d**k, d**k):
        raise ValueError(f"local operator shape {local.shape} does not match {k} modes")
    rest = [m for m in range(n) if m not in modes]
    full = np.kron(local, np.eye(d ** len(rest)))
    # full acts on modes ordered as modes + rest; permute back to 0..n-1
    order = modes + rest
    perm = [order.index(m) for m in range(n)]
    t = full.reshape((d,) * (2 * n))
    t = t.transpose(perm + [p + n for p in perm])
    return t.reshape(d**n, d**n)


def annihilation(space: FockSpace, mode: int) -> ModeOperator:
    space._check_mode(mode)
    return ModeOperator(space, embed(single_mode_annihilation(space.cutoff), [mode], space), "annihilation")


def number(space: FockSpace, mode: int) -> ModeOperator:
    space._check_mode(mode)
    return ModeOperator(space, embed(single_mode_number(space.cutoff), [mode], space), "number")


def threshold_povm(space: FockSpace, mode: int, efficiency: float) -> ModeOperator:
    """Click element ``I - (1 - eta)^N`` of a threshold detector on ``mode``."""
    if not 0.0 <= efficiency <= 1.0:
        raise ValueError(f"efficiency must lie in [0, 1], got {efficiency}")
    n = np.arange(space.cutoff + 1)
    local = np.diag(1.0 - (1.0 - efficiency) ** n).astype(complex)
    return ModeOperator(space, embed(local, [mode], space), "povm-element")


# ---------------------------------------------------------------------------
# the public operations

def tensor(a, b):
    """Tensor product of two states that share a cutoff; modes of ``b`` are appended."""
    if a.space.cutoff != b.space.cutoff:
        raise ValueError(f"cutoff mismatch: {a.space.cutoff} vs {b.space.cutoff}")
    space = FockSpace(a.space.num_modes + b.space.num_modes, a.space.cutoff)
    if isinstance(a, StateVector) and isinstance(b, StateVector):
        return StateVector(space, np.kron(a.amplitudes, b.amplitudes))
    if isinstance(a, DensityOperator) and isinstance(b, DensityOperator):
        return DensityOperator(space, np.kron(a.matrix, b.matrix))
    raise TypeError("tensor operands must both be StateVector or both DensityOperator")


def partial_trace(state: DensityOperator, keep: Iterable[int]) -> DensityOperator:
    """Reduce ``state`` to the modes in ``keep`` (returned in ascending order)."""
    keep = sorted(set(int(k) for k in keep))
    if not keep:
        raise ValueError("keep set must be nonempty")
    for k in keep:
        state.space._check_mode(k)
    n, d = state.space.num_modes, state.space.local_dim
    if len(keep) == n:
        return state
    t = state.matrix.reshape((d,) * (2 * n))
    letters = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
    row = list(letters[:n])
    col = list(letters[n : 2 * n])
    for m in range(n):
        if m not in keep:
            col[m] = row[m]
    out = "".join(row[k] for k in keep) + "".join(col[k] for k in keep)
    reduced = np.einsum("".join(row) + "".join(col) + "->" + out, t)
    dk = d ** len(keep)
    m = reduced.reshape(dk, dk)
    return DensityOperator(FockSpace(len(keep), state.space.cutoff), (m + m.conj().T) / 2)


@lru_cache(maxsize=64)
def _two_mode_bs(cutoff: int, transmittance: float) -> np.ndarray:
    # U a1^dag U^dag = sqrt(t) a1^dag + sqrt(1-t) a2^dag
    # U a2^dag U^dag = sqrt(1-t) a1^dag - sqrt(t) a2^dag
    st, sr = math.sqrt(transmittance), math.sqrt(1.0 - transmittance)
    d = cutoff + 1
    u = np.zeros((d * d, d * d))
    for n1, n2 in itertools.product(range(d), repeat=2):
        # coefficient of (b1^dag)^p (b2^dag)^q
        first = np.array([math.comb(n1, k) * st**k * sr ** (n1 - k) for k in range(n1 + 1)])
        second = np.array([math.comb(n2, k) * sr**k * (-st) ** (n2 - k) for k in range(n2 + 1)])
        # first[k]: k photons into output 1; second[k]: k photons into output 1
        poly = np.convolve(first, second)
        total = n1 + n2
        norm = math.sqrt(math.factorial(n1) * math.factorial(n2))
        for p, c in enumerate(poly):
            q = total - p
            if p > cutoff or q > cutoff or c == 0.0:
                continue
            u[p * d + q, n1 * d + n2] = c * math.sqrt(math.factorial(p) * math.factorial(q)) / norm
    u.setflags(write=False)
    return u


def beamsplitter_unitary(space: FockSpace, mode_pair: tuple[int, int], transmittance: float) -> ModeOperator:
    """Beamsplitter between two modes.

    Output annihilation operators in terms of the inputs are
    ``sqrt(t) a1 + sqrt(1-t) a2`` (kept in the first mode) and
    ``sqrt(1-t) a1 - sqrt(t) a2`` (kept in the second). The matrix is exact
    and unitary on the subspace whose pair photon number is at most the
    cutoff; components pushed above the cutoff are dropped.
    """
    if not 0.0 <= transmittance <= 1.0:
        raise ValueError(f"transmittance must lie in [0, 1], got {transmittance}")
    i, j = mode_pair
    if i == j:
        raise ValueError("beamsplitter needs two distinct modes")
    local = _two_mode_bs(space.cutoff, float(transmittance)).astype(complex)
    return ModeOperator(space, embed(local, [i, j], space), "unitary")


def poisson_tail(mean: float, cutoff: int) -> float:
    """Probability that a Poisson variable of the given mean exceeds ``cutoff``."""
    from scipy.stats import poisson

    return float(poisson.sf(cutoff, mean))


def coherent_state(amplitude: complex, cutoff: int, renormalize: bool = True) -> StateVector:
    if cutoff < 1:
        raise ValueError("coherent_state needs cutoff >= 1")
    n = np.arange(cutoff + 1)
    logfact = np.array([math.lgamma(k + 1) for k in n])
    mag = abs(amplitude)
    if mag == 0:
        amps = np.zeros(cutoff + 1, dtype=complex)
        amps[0] = 1.0
    else:
        amps = np.exp(-(mag**2) / 2 + n * math.log(mag) - logfact / 2) * np.exp(1j * n * np.angle(amplitude))
    state = StateVector(FockSpace(1, cutoff), amps)
    return state.normalized() if renormalize else state


def apply_loss(state: DensityOperator, mode: int, transmittance: float) -> DensityOperator:
    """Pure-loss channel on one mode: couple to a vacuum ancilla, then trace it out."""
    if not 0.0 <= transmittance <= 1.0:
        raise ValueError(f"transmittance must lie in [0, 1], got {transmittance}")
    state.space._check_mode(mode)
    if transmittance == 1.0:
        return state
    anc = FockSpace(1, state.space.cutoff).vacuum().dm()
    joint = tensor(state, anc)
    n = state.space.num_modes
    bs = beamsplitter_unitary(joint.space, (mode, n), transmittance)
    return partial_trace(bs.apply(joint), range(n))
