"""Detection probabilities for the weak local-oscillator scheme.

Each signal mode ``k`` is mixed with a coherent local oscillator on a
50:50 beamsplitter and the first output port is watched by a threshold
detector. The closed forms below are the small-efficiency (number operator)
expressions; :func:`coincidence_exact` and :func:`joint_click_distribution`
evaluate the same quantities by explicit matrix algebra.

Phase conventions: ``d_ij = <1_i|rho|1_j>`` and ``d_vac_i = <0|rho|1_i>``.
With these, the coincidence interference term is
``(eta_i eta_j / 2) Re[d_ij conj(alpha_i) alpha_j]`` and the vacuum
coherence enters single counts as ``eta_i |alpha_i| |d_vac_i| cos(theta_i + phi_i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .fock import (
    CutoffError,
    DensityOperator,
    FockSpace,
    beamsplitter_unitary,
    coherent_state,
    partial_trace,
    poisson_tail,
    single_mode_annihilation,
)
from .states import StructuredState

TAIL_LIMIT = 1e-9


def wrap_phase(phi: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(float(phi), 2 * math.pi)
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class LocalOscillatorConfig:
    amplitudes: tuple
    phases: tuple = None

    def __post_init__(self):
        amps = tuple(float(a) for a in self.amplitudes)
        if any(a < 0 for a in amps):
            raise ValueError("local-oscillator magnitudes must be nonnegative")
        phases = (0.0,) * len(amps) if self.phases is None else tuple(wrap_phase(p) for p in self.phases)
        if len(phases) != len(amps):
            raise ValueError("amplitudes and phases must have one entry per mode")
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "phases", phases)

    @classmethod
    def from_intensities(cls, intensities, phases=None) -> "LocalOscillatorConfig":
        return cls(tuple(math.sqrt(i) for i in intensities), phases)

    @property
    def num_modes(self) -> int:
        return len(self.amplitudes)

    def alpha(self, mode: int) -> complex:
        return self.amplitudes[mode] * complex(math.cos(self.phases[mode]), math.sin(self.phases[mode]))

    def intensity(self, mode: int) -> float:
        return self.amplitudes[mode] ** 2

    def intensity_ratio(self, i: int, j: int) -> float:
        """``r = |alpha_j|^2 / |alpha_i|^2`` for the ordered pair (i, j)."""
        return self.intensity(j) / self.intensity(i)

    def with_phases(self, phases) -> "LocalOscillatorConfig":
        return LocalOscillatorConfig(self.amplitudes, tuple(phases))


@dataclass(frozen=True)
class DetectorModel:
    efficiencies: tuple
    kind: str = "threshold"
    background: tuple = None

    def __post_init__(self):
        eff = tuple(float(e) for e in self.efficiencies)
        if any(not 0.0 <= e <= 1.0 for e in eff):
            raise ValueError(f"efficiencies must lie in [0, 1], got {eff}")
        if self.kind != "threshold":
            raise ValueError("only threshold detectors are modelled")
        bg = (0.0,) * len(eff) if self.background is None else tuple(float(b) for b in self.background)
        if len(bg) != len(eff) or any(not 0.0 <= b <= 1.0 for b in bg):
            raise ValueError("background click probabilities must be one value in [0, 1] per channel")
        object.__setattr__(self, "efficiencies", eff)
        object.__setattr__(self, "background", bg)

    @classmethod
    def uniform(cls, num_channels: int, efficiency: float, background: float = 0.0) -> "DetectorModel":
        return cls((efficiency,) * num_channels, background=(background,) * num_channels)

    def eta(self, channel: int) -> float:
        return self.efficiencies[channel]


@dataclass(frozen=True)
class CoincidenceBreakdown:
    P_NIF: float
    P_IF: float
    P_coh: float

    @property
    def P_XY(self) -> float:
        return self.P_NIF + self.P_IF


@dataclass(frozen=True)
class SinglesProbabilities:
    P_X: float
    P_Y: float


def coincidence_analytic(
    model: StructuredState,
    lo: LocalOscillatorConfig,
    det: DetectorModel,
    pair: tuple[int, int] = (0, 1),
) -> CoincidenceBreakdown:
    """Closed-form coincidence probability between the watched ports of ``pair``.

    ``lo`` and ``det`` are indexed by mode. The two-photon block is ignored,
    as in the block model the formula is derived for.
    """
    i, j = pair
    a, b = lo.alpha(i), lo.alpha(j)
    ia, ib = abs(a) ** 2, abs(b) ** 2
    eta2 = det.eta(i) * det.eta(j)
    p_i, p_j = model.p_single(i), model.p_single(j)
    nif = eta2 / 4 * (ia * ib + p_i * ib + p_j * ia)
    interf = model.d(i, j) * np.conj(a) * b
    vac = ib * a * model.d_vac(i) + ia * b * model.d_vac(j)
    pif = eta2 / 2 * float(np.real(interf + vac))
    return CoincidenceBreakdown(float(nif), pif, eta2 * ia * ib / 4)


def singles_analytic(
    model: StructuredState,
    lo: LocalOscillatorConfig,
    det: DetectorModel,
    pair: tuple[int, int] = (0, 1),
) -> SinglesProbabilities:
    out = []
    for k in pair:
        a = lo.alpha(k)
        out.append(det.eta(k) / 2 * (abs(a) ** 2 + model.p_single(k) + 2 * float(np.real(a * model.d_vac(k)))))
    return SinglesProbabilities(*out)


def visibility_analytic(p10: float, p01: float, r: float, d_abs: float) -> float:
    """Background-subtracted fringe visibility for intensity ratio ``r = |beta|^2/|alpha|^2``."""
    if r <= 0:
        raise ValueError(f"intensity ratio must be positive, got {r}")
    denom = r * p10 + p01
    if denom == 0:
        raise ZeroDivisionError("r * p10 + p01 is zero")
    return 2 * math.sqrt(r) * d_abs / denom


# ---------------------------------------------------------------------------
# exact evaluation on the four-mode space [A1, B1, A2, B2]

def _check_tail(intensity: float, cutoff: int):
    tail = poisson_tail(intensity, cutoff)
    if tail > TAIL_LIMIT:
        raise CutoffError(f"cutoff {cutoff} leaves Poisson tail {tail:.3g} > {TAIL_LIMIT:g} for |alpha|^2 = {intensity:.4g}")


@lru_cache(maxsize=16)
def _threshold_observable(cutoff: int, eta: float) -> np.ndarray:
    """U^dagger (E_click on output 1) U on a (signal, LO) mode pair."""
    space = FockSpace(2, cutoff)
    u = beamsplitter_unitary(space, (0, 1), 0.5).matrix
    n = np.arange(cutoff + 1)
    e = np.kron(np.diag(1.0 - (1.0 - eta) ** n), np.eye(cutoff + 1))
    obs = u.conj().T @ e @ u
    obs.setflags(write=False)
    return obs


def coincidence_exact(
    state: DensityOperator,
    lo: LocalOscillatorConfig,
    det: DetectorModel,
    form: str = "number",
    pair: tuple[int, int] = (0, 1),
) -> float:
    """Coincidence probability by explicit algebra on the signal + LO modes.

    ``state`` lives on the two signal modes (larger states are reduced to
    ``pair``). The signal modes and two LO modes form a four-mode space;
    the LO modes enter as a product state and are traced out first.

    form="number"
        ``eta_i eta_j Tr[N_X N_Y rho_out]``. Evaluated in the displaced
        frame: the LO modes are vacuum and each watched mode reads
        ``(a_signal + a_LO + alpha) / sqrt(2)``, so no LO truncation enters.
    form="threshold"
        ``Tr[E_X E_Y rho_out]`` with ``E = I - (1 - eta)^N`` on the
        beamsplitter outputs, truncated coherent states in the LO modes.
    """
    if state.space.num_modes != 2:
        state = partial_trace(state, pair)
    i, j = pair
    cutoff = state.space.cutoff
    d = cutoff + 1
    a, b = lo.alpha(i), lo.alpha(j)
    eta_x, eta_y = det.eta(i), det.eta(j)
    if form == "number":
        ann = single_mode_annihilation(cutoff)
        eye = np.eye(d)
        lo_vac = np.zeros((d, d))
        lo_vac[0, 0] = 1.0
        effective = []
        for amp in (a, b):
            ax = (np.kron(ann, eye) + np.kron(eye, ann) + amp * np.eye(d * d)) / math.sqrt(2)
            obs = (ax.conj().T @ ax).reshape(d, d, d, d)  # (out_s, out_lo, in_s, in_lo)
            effective.append(np.einsum("aibj,ji->ab", obs, lo_vac))
        m = state.matrix.reshape(d, d, d, d)
        return eta_x * eta_y * float(np.einsum("ac,bd,cdab->", effective[0], effective[1], m).real)
    if form == "threshold":
        effective = []
        for amp, eta in ((a, eta_x), (b, eta_y)):
            _check_tail(abs(amp) ** 2, cutoff)
            lo_dm = coherent_state(amp, cutoff).dm().matrix
            # the LO enters as a product state, so fold it into a signal-mode operator
            obs = _threshold_observable(cutoff, eta).reshape(d, d, d, d)  # (out_s, out_lo, in_s, in_lo)
            effective.append(np.einsum("aibj,ji->ab", obs, lo_dm))
        m = state.matrix.reshape(d, d, d, d)  # (row_x, row_y, col_x, col_y)
        return float(np.einsum("ac,bd,cdab->", effective[0], effective[1], m).real)
    raise ValueError(f"unknown form {form!r}")


# ---------------------------------------------------------------------------
# joint click statistics of all channels

def no_click_operator(
    cutoff: int,
    efficiency: float,
    alpha: complex | None,
    overlap: float = 1.0,
) -> np.ndarray:
    """Single-mode no-click operator seen from the signal mode.

    Without an LO the signal goes straight to the detector: ``(1-eta)^N``.
    With an LO, the normally ordered ``:exp(-eta a_X^dag a_X):`` for
    ``a_X = (a + alpha)/sqrt(2)``; a fraction ``1 - overlap`` of the LO
    intensity sits in a distinguishable mode and only adds clicks.
    """
    n = np.arange(cutoff + 1)
    if alpha is None:
        return np.diag((1.0 - efficiency) ** n).astype(complex)
    lam = efficiency / 2
    g = math.sqrt(overlap) * alpha
    ann = single_mode_annihilation(cutoff)
    left = expm(-lam * g * ann.conj().T)
    right = expm(-lam * np.conj(g) * ann)
    mid = np.diag((1.0 - lam) ** n)
    return math.exp(-lam * abs(alpha) ** 2) * (left @ mid @ right)


def _local_expectation(rho: np.ndarray, d: int, n: int, ops: dict) -> float:
    t = rho.reshape((d,) * (2 * n))
    for mode, op in ops.items():
        # contract op[out, in] with the row index of mode
        t = np.tensordot(op, t, axes=([1], [mode]))
        t = np.moveaxis(t, 0, mode)
    t = t.reshape(d**n, d**n)
    return float(np.trace(t).real)


def joint_click_distribution(
    state: DensityOperator,
    det: DetectorModel,
    lo: LocalOscillatorConfig | None = None,
    overlap: Sequence[float] | None = None,
) -> np.ndarray:
    """Probability of every exact click set, indexed by bitmask (bit k = channel k).

    Built by inclusion-exclusion from the no-click probabilities of every
    channel subset. Independent background clicks from ``det.background``
    are folded in.
    """
    n = state.space.num_modes
    d = state.space.local_dim
    overlap = (1.0,) * n if overlap is None else tuple(overlap)
    kops = [
        no_click_operator(state.space.cutoff, det.eta(k), None if lo is None else lo.alpha(k), overlap[k])
        for k in range(n)
    ]
    q = np.empty(2**n)
    for mask in range(2**n):
        members = [k for k in range(n) if mask >> k & 1]
        val = _local_expectation(state.matrix, d, n, {k: kops[k] for k in members})
        for k in members:
            val *= 1.0 - det.background[k]
        q[mask] = val
    full = 2**n - 1
    probs = np.empty(2**n)
    for s in range(2**n):
        comp = full & ~s
        total = 0.0
        sub = s
        while True:
            total += (-1) ** bin(sub).count("1") * q[comp | sub]
            if sub == 0:
                break
            sub = (sub - 1) & s
        probs[s] = total
    probs = np.clip(probs, 0.0, None)
    return probs / probs.sum()


def marginal_click(probs: np.ndarray, channels: Sequence[int]) -> float:
    """Probability that every listed channel clicks (other channels unconstrained)."""
    need = sum(1 << c for c in channels)
    idx = np.arange(probs.size)
    return float(probs[(idx & need) == need].sum())


__all__ = [
    "CoincidenceBreakdown",
    "DetectorModel",
    "LocalOscillatorConfig",
    "SinglesProbabilities",
    "coincidence_analytic",
    "coincidence_exact",
    "joint_click_distribution",
    "marginal_click",
    "no_click_operator",
    "singles_analytic",
    "visibility_analytic",
    "wrap_phase",
]
