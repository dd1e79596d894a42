"""Density-matrix reconstruction from local LO-interference fringes.

Pipeline per mode pair (i, j): background-subtracted coincidence fringe
-> cosine fit -> visibility -> |d_ij| by inverting the visibility relation
with the measured populations and LO intensity ratio -> phase from the
fitted fringe offset. Pairs are assembled into the block model, optionally
corrected for signal/LO mode mismatch, and compared with target states.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares

from .counting import CountTable, DiagonalEstimate, estimate_diagonals
from .detection import DetectorModel, LocalOscillatorConfig, coincidence_analytic, singles_analytic, wrap_phase
from .fock import DensityOperator, StateVector
from .montecarlo import FringeDataset, default_threads
from .states import (
    StructuredState,
    assemble,
    channel_name,
    mode_pairs,
    single_pattern,
    two_photon_patterns,
    vacuum_pattern,
)

TWO_PHOTON_WARN_RATIO = 0.05


class MissingPairError(ValueError):
    def __init__(self, pair):
        name = channel_name(pair[0]) + channel_name(pair[1])
        super().__init__(f"missing fringe dataset for pair {name}")
        self.pair = pair


class DegenerateFitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# fringe fitting

@dataclass(frozen=True)
class FringeFit:
    amplitude: float
    offset: float
    theta0: float
    covariance: np.ndarray
    chi2: float
    dof: int
    raw_visibility: float
    theta_defined: bool = True

    @property
    def visibility(self) -> float:
        return self.amplitude / self.offset

    @property
    def sigma_visibility(self) -> float:
        a, b = self.amplitude, self.offset
        g = np.array([1 / b, -a / b**2, 0.0])
        return float(np.sqrt(max(g @ self.covariance @ g, 0.0)))

    @property
    def sigma_theta(self) -> float:
        return float(np.sqrt(max(self.covariance[2, 2], 0.0))) if self.theta_defined else float("nan")

    def model(self, x):
        return self.amplitude * np.cos(np.asarray(x) - self.theta0) + self.offset


def fit_cosine(x, y, var) -> FringeFit:
    """Weighted least squares of ``A cos(x - theta0) + B``.

    The model is linear in ``(A cos theta0, A sin theta0, B)``, so the fit
    is a closed-form weighted solve; ``var`` are the per-point variances.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    var = np.asarray(var, dtype=float)
    if len(set(np.round(np.mod(x, 2 * math.pi), 12).tolist())) < 4:
        raise DegenerateFitError("fringe fit needs at least 4 distinct phases")
    X = np.stack([np.cos(x), np.sin(x), np.ones_like(x)], axis=1)
    w = 1.0 / var
    XtWX = X.T @ (X * w[:, None])
    if np.linalg.cond(XtWX) > 1e14:
        raise DegenerateFitError("phase grid does not determine a cosine")
    beta = np.linalg.solve(XtWX, X.T @ (w * y))
    cov_lin = np.linalg.inv(XtWX)
    a, b, c = beta
    amp = float(math.hypot(a, b))
    resid = y - X @ beta
    chi2 = float(np.sum(w * resid**2))
    raw = float((y.max() - y.min()) / (y.max() + y.min())) if (y.max() + y.min()) != 0 else float("nan")
    scale = max(abs(c), float(np.max(np.abs(y))), 1e-300)
    if amp <= 1e-12 * scale:
        cov = np.full((3, 3), np.nan)
        cov[1, 1] = cov_lin[2, 2]
        return FringeFit(0.0, float(c), float("nan"), cov, chi2, x.size - 3, raw, theta_defined=False)
    theta = math.atan2(b, a)
    J = np.array([[a / amp, b / amp, 0.0], [0.0, 0.0, 1.0], [-b / amp**2, a / amp**2, 0.0]])
    cov = J @ cov_lin @ J.T
    return FringeFit(amp, float(c), theta, cov, chi2, x.size - 3, raw)


def _variance(counts_sum) -> np.ndarray:
    counts_sum = np.asarray(counts_sum, dtype=float)
    integer = np.all(np.mod(counts_sum, 1) == 0)
    # zero-count points fall back to a unit variance floor
    floor = 1.0 if integer else np.finfo(float).tiny
    return np.maximum(counts_sum, floor)


def fit_fringe(data: FringeDataset, subtract=None) -> FringeFit:
    """Fit the background-subtracted coincidence fringe against the relative LO phase.

    ``subtract`` is an optional array of extra counts to remove per point
    (the vacuum-coherence terms).
    """
    scale = data.shots / data.shots_background
    y = data.coincidences - data.background * scale
    if subtract is not None:
        y = y - subtract
    var = _variance(data.coincidences + data.background * scale**2)
    fit = fit_cosine(data.relative_phase, y, var)
    if fit.offset <= 0:
        raise DegenerateFitError(f"non-positive fringe offset {fit.offset:.4g}")
    return fit


# ---------------------------------------------------------------------------
# visibility inversion and phases

def coherence_from_visibility(V, p10, p01, r, sigma=None):
    """``|d| = V (r p10 + p01) / (2 sqrt r)``.

    With ``sigma = (sV, sp10, sp01)`` returns ``(|d|, sigma_|d|)``.
    """
    if r <= 0:
        raise ValueError(f"intensity ratio must be positive, got {r}")
    d = V * (r * p10 + p01) / (2 * math.sqrt(r))
    if sigma is None:
        return d
    sV, s10, s01 = sigma
    g = np.array([(r * p10 + p01) / (2 * math.sqrt(r)), V * math.sqrt(r) / 2, V / (2 * math.sqrt(r))])
    return d, float(np.sqrt(np.sum((g * np.array([sV, s10, s01])) ** 2)))


@dataclass(frozen=True)
class PhaseConvention:
    """Gauge for the pair phases.

    ``offsets`` are per-mode LO phase offsets removed from every pair
    phase: ``theta_ij = theta0_ij - (offset_i - offset_j)``. If instead
    ``reference`` maps pairs to declared phases, the offsets are solved so
    those pairs take the declared values. With neither, fitted phases are
    used as they are.
    """

    reference: dict | None = None
    offsets: dict | None = None

    @classmethod
    def zero_first_pairs(cls, pairs, count: int = 2) -> "PhaseConvention":
        return cls(reference={tuple(p): 0.0 for p in list(pairs)[:count]})

    def to_json(self) -> dict:
        return {
            "reference": None if self.reference is None else {channel_name(i) + channel_name(j): v for (i, j), v in self.reference.items()},
            "offsets": None if self.offsets is None else {channel_name(k): v for k, v in self.offsets.items()},
        }


def calibrate_offsets(theta0: dict, reference: dict) -> dict:
    """Per-mode offsets that map the fitted phases of the reference pairs onto their declared values."""
    adj: dict = {}
    for (i, j), val in reference.items():
        if (i, j) not in theta0:
            raise MissingPairError((i, j))
        # offset_j = offset_i - theta0_ij + declared
        adj.setdefault(i, []).append((j, -theta0[(i, j)] + val))
        adj.setdefault(j, []).append((i, theta0[(i, j)] - val))
    offsets: dict = {}
    for root in sorted(adj):
        if root in offsets:
            continue
        offsets[root] = 0.0
        queue = deque([root])
        while queue:
            m = queue.popleft()
            for nb, delta in adj[m]:
                if nb not in offsets:
                    offsets[nb] = offsets[m] + delta
                    queue.append(nb)
    return offsets


def phase_from_quadratures(fit: FringeFit, pair, convention: PhaseConvention | None = None, offsets: dict | None = None) -> float:
    """Pair phase from the fitted fringe position.

    The fringe is ``cos(delta - theta_d)`` in the relative LO phase
    ``delta = phi_i - phi_j``, so its cosine and sine quadratures give
    ``theta_d`` directly, up to the gauge offsets.
    """
    if not fit.theta_defined:
        raise DegenerateFitError("fringe phase is undefined (flat fringe)")
    if offsets is None:
        offsets = (convention.offsets if convention is not None else None) or {}
    i, j = pair
    return wrap_phase(fit.theta0 - (offsets.get(i, 0.0) - offsets.get(j, 0.0)))


def cycle_residuals(phases: dict, num_modes: int) -> dict:
    """``theta_ij + theta_jk - theta_ik`` wrapped, for every mode triple i < j < k."""
    out = {}
    for i in range(num_modes):
        for j in range(i + 1, num_modes):
            for k in range(j + 1, num_modes):
                if all(p in phases for p in ((i, j), (j, k), (i, k))):
                    out[(i, j, k)] = wrap_phase(phases[(i, j)] + phases[(j, k)] - phases[(i, k)])
    return out


# ---------------------------------------------------------------------------
# vacuum coherences

def lo_intensity_from_background(click_fraction: float, efficiency: float) -> float:
    """LO intensity |alpha|^2 from the LO-only click fraction of a threshold detector behind a 50:50 mixer."""
    if not 0 <= click_fraction < 1:
        raise ValueError(f"click fraction must be in [0, 1), got {click_fraction}")
    return -2.0 * math.log1p(-click_fraction) / efficiency


def estimate_vacuum_coherence(data: FringeDataset, channel: int, efficiency: float, intensity: float):
    """Vacuum/single-photon coherence of ``channel`` from its single-count fringe.

    The channel's singles oscillate as ``eta |alpha| |d_vac| cos(theta + phi)``
    in its own LO phase ``phi``. Returns ``(d_vac, sigma_abs, sigma_phase, fit)``;
    a flat fringe gives ``d_vac = 0``.
    """
    phi = data.phases[:, channel]
    y = data.singles[:, channel].astype(float)
    fit = fit_cosine(phi, y, _variance(y))
    if not fit.theta_defined:
        return 0j, 0.0, float("nan"), fit
    shots = float(np.mean(data.shots))
    norm = shots * efficiency * math.sqrt(intensity)
    mag = fit.amplitude / norm
    # amplitude * cos(phi - theta0) = ... cos(theta + phi)  =>  theta = -theta0
    theta = wrap_phase(-fit.theta0)
    s_mag = float(np.sqrt(max(fit.covariance[0, 0], 0.0))) / norm
    return complex(mag * math.cos(theta), mag * math.sin(theta)), s_mag, fit.sigma_theta, fit


def vacuum_term_counts(data: FringeDataset, dvac: dict, intensities, det: DetectorModel) -> np.ndarray:
    """Expected coincidence counts carried by the vacuum coherences at every fringe point."""
    i, j = data.pair
    ai = math.sqrt(intensities[i]) * np.exp(1j * data.phases[:, i])
    aj = math.sqrt(intensities[j]) * np.exp(1j * data.phases[:, j])
    term = intensities[j] * np.real(ai * dvac.get(i, 0j)) + intensities[i] * np.real(aj * dvac.get(j, 0j))
    return data.shots * det.eta(i) * det.eta(j) / 2 * term


# ---------------------------------------------------------------------------
# pairwise estimates and mode matching

@dataclass(frozen=True)
class OffDiagonalEstimate:
    pair: tuple
    magnitude: float
    phase: float
    sigma_magnitude: float = float("nan")
    sigma_phase: float = float("nan")
    visibility: float = float("nan")
    ratio: float = float("nan")
    bound_violated: bool = False
    mode_match_corrected: bool = False
    overlaps: tuple | None = None

    @property
    def value(self) -> complex:
        return complex(self.magnitude * math.cos(self.phase), self.magnitude * math.sin(self.phase))

    def to_json(self) -> dict:
        i, j = self.pair
        return {
            "pair": channel_name(i) + channel_name(j),
            "abs": self.magnitude,
            "theta": self.phase,
            "theta_over_pi": self.phase / math.pi,
            "sigma_abs": self.sigma_magnitude,
            "sigma_theta": self.sigma_phase,
            "visibility": self.visibility,
            "r": self.ratio,
            "bound_violated": self.bound_violated,
            "mode_match_corrected": self.mode_match_corrected,
            "overlaps": None if self.overlaps is None else list(self.overlaps),
        }


def mode_match_correct(est: OffDiagonalEstimate, V_i: float, V_j: float) -> OffDiagonalEstimate:
    """Undo the sqrt(V_i V_j) suppression of the interference term by imperfect signal/LO overlap."""
    for v in (V_i, V_j):
        if not 0 < v <= 1:
            raise ValueError(f"mode overlap must lie in (0, 1], got {v}")
    s = 1.0 / math.sqrt(V_i * V_j)
    return replace(
        est,
        magnitude=est.magnitude * s,
        sigma_magnitude=est.sigma_magnitude * s,
        mode_match_corrected=True,
        overlaps=(float(V_i), float(V_j)),
    )


# ---------------------------------------------------------------------------
# HOM calibration

@dataclass(frozen=True)
class HomResult:
    n_ph: float
    gap: float
    depth: float
    M_dip: float
    center: float = float("nan")
    width: float = float("nan")

    def __post_init__(self):
        if not -1e-12 <= self.M_dip <= 1 + 1e-12:
            raise ValueError(f"mode overlap {self.M_dip} outside [0, 1]")


def hom_normalized(M, n_ph):
    """Normalized coincidences ``1 + 2 n_ph (1 - M)`` for overlap ``M``."""
    return 1.0 + 2.0 * n_ph * (1.0 - np.asarray(M))


def hom_from_depth(gap: float, depth: float) -> HomResult:
    """Overlap at the dip from the plateau gap ``N(0) - N(1)`` and the dip depth."""
    if gap <= 0:
        raise ValueError("HOM gap must be positive")
    return HomResult(gap / 2, gap, depth, depth / gap)


def _dip_model(params, delay):
    n_ph, M, center, width = params
    return hom_normalized(M * np.exp(-0.5 * ((delay - center) / width) ** 2), n_ph)


def hom_analyze(delay, counts, baseline) -> HomResult:
    """Fit a Gaussian-overlap HOM dip to coincidences normalized by the LO-only baseline."""
    delay = np.asarray(delay, dtype=float)
    counts = np.asarray(counts, dtype=float)
    baseline = np.asarray(baseline, dtype=float)
    if np.any(baseline <= 0):
        raise ValueError("LO-only baseline must be positive at every delay")
    ncc = counts / baseline
    order = np.argsort(delay)
    delay, ncc = delay[order], ncc[order]
    edge = max(1, delay.size // 8)
    plateau = float(np.mean(np.r_[ncc[:edge], ncc[-edge:]]))
    kmin = int(np.argmin(ncc))
    n0 = max((plateau - 1) / 2, 1e-6)
    m0 = min(max((plateau - ncc[kmin]) / (plateau - 1), 1e-3), 1.0) if plateau > 1 else 0.5
    half = plateau - (plateau - ncc[kmin]) / 2
    below = delay[ncc < half]
    w0 = max((below.max() - below.min()) / 2.355, np.min(np.diff(delay))) if below.size > 1 else (delay[-1] - delay[0]) / 10
    fit = least_squares(
        lambda p: _dip_model(p, delay) - ncc,
        x0=[n0, m0, delay[kmin], w0],
        bounds=([0, 0, delay[0], 1e-12], [np.inf, 1, delay[-1], np.inf]),
        xtol=1e-15,
        ftol=1e-15,
        gtol=1e-15,
        max_nfev=10000,
    )
    n_ph, M, center, width = fit.x
    return HomResult(float(n_ph), float(2 * n_ph), float(2 * n_ph * M), float(M), float(center), float(width))


# ---------------------------------------------------------------------------
# fidelity

def fidelity(rho: DensityOperator, target: StateVector) -> float:
    """``<t| rho |t>`` for a pure target."""
    if rho.space.num_modes != target.space.num_modes:
        raise ValueError(f"dimension mismatch: {rho.space.num_modes} vs {target.space.num_modes} modes")
    if rho.space.cutoff != target.space.cutoff:
        amps = np.zeros(rho.space.dim, dtype=complex)
        for idx in np.nonzero(target.amplitudes)[0]:
            amps[rho.space.index(target.space.pattern(int(idx)))] = target.amplitudes[idx]
        target = StateVector(rho.space, amps)
    t = target.amplitudes
    return float(np.real(t.conj() @ rho.matrix @ t))


def fidelity_decomposition(model: StructuredState, signs, weights=None) -> float:
    """Fidelity with ``sum_i s_i w_i |1_i>`` from populations and pair coherences only."""
    n = model.num_modes
    w = np.full(n, 1 / math.sqrt(n)) if weights is None else np.asarray(weights, dtype=float)
    s = np.asarray(signs, dtype=float)
    f = float(np.sum(w**2 * model.single_photon_probabilities))
    for i, j in mode_pairs(n):
        f += 2 * w[i] * w[j] * s[i] * s[j] * model.d(i, j).real
    return float(f)


def nearest_psd(rho: DensityOperator) -> DensityOperator:
    """Clip negative eigenvalues and restore unit trace."""
    vals, vecs = np.linalg.eigh(rho.matrix)
    vals = np.clip(vals, 0, None)
    m = (vecs * vals) @ vecs.conj().T
    return DensityOperator(rho.space, m / np.trace(m).real)


# ---------------------------------------------------------------------------
# full reconstruction

@dataclass(frozen=True, eq=False)
class TomographyData:
    """Everything the reconstruction consumes.

    ``diagonal``: LO-off count table. ``fringes``: one dataset per mode
    pair. ``singles``: optional per-mode datasets in which that mode's LO
    phase is swept, for the vacuum coherences.
    """

    diagonal: CountTable
    fringes: dict
    singles: dict = field(default_factory=dict)

    @property
    def num_modes(self) -> int:
        return len(self.diagonal.channels)

    def resampled(self, rng: np.random.Generator) -> "TomographyData":
        def pois(a):
            return rng.poisson(np.asarray(a, dtype=float))

        diag = CountTable(
            self.diagonal.channels,
            self.diagonal.shots,
            pois(self.diagonal.exclusive),
            self.diagonal.header,
        )

        def fringe(ds: FringeDataset) -> FringeDataset:
            return FringeDataset(
                ds.pair,
                ds.phases,
                np.minimum(pois(ds.coincidences), ds.shots),
                np.minimum(pois(ds.background), ds.shots_background),
                pois(ds.singles),
                pois(ds.singles_background),
                ds.shots,
                ds.shots_background,
            )

        # shots are held fixed; the pooled diagonal total is restored from the resampled exclusives
        diag = CountTable(diag.channels, diag.exclusive.sum(axis=1), diag.exclusive, diag.header)
        return TomographyData(
            diag,
            {p: fringe(ds) for p, ds in sorted(self.fringes.items())},
            {k: fringe(ds) for k, ds in sorted(self.singles.items())},
        )


@dataclass(frozen=True)
class ReconstructionOptions:
    lo_intensities: tuple | None = None
    vacuum_coherences: dict | None = None
    convention: PhaseConvention = field(default_factory=PhaseConvention)
    overlaps: tuple | None = None
    project_psd: bool = False
    error_method: str | None = None
    bootstrap_samples: int = 1000
    seed: int = 0
    threads: int | None = None
    cutoff: int = 2


@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    model: StructuredState
    model_subspace: StructuredState
    matrix: DensityOperator
    matrix_subspace: DensityOperator
    pairs: dict
    pairs_raw: dict
    fits: dict
    diagonals: DiagonalEstimate
    vacuum_coherences: dict
    lo_intensities: tuple
    fidelities: dict
    mode_match: dict
    gauge: dict
    cycle: dict
    warnings: list
    psd: dict
    uncertainties: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        def mat(m):
            return [[[float(z.real), float(z.imag)] for z in row] for row in m.matrix]

        return {
            "format": "pathtomo-reconstruction/1",
            "num_modes": self.model.num_modes,
            "model": self.model.to_json(),
            "model_subspace": self.model_subspace.to_json(),
            "matrix": {"convention": "full", "cutoff": self.matrix.space.cutoff, "rows": mat(self.matrix)},
            "matrix_subspace": {"convention": "single-photon subspace", "cutoff": self.matrix_subspace.space.cutoff, "rows": mat(self.matrix_subspace)},
            "pairs": [e.to_json() for _, e in sorted(self.pairs.items())],
            "pairs_uncorrected": [e.to_json() for _, e in sorted(self.pairs_raw.items())],
            "fits": {
                channel_name(i) + channel_name(j): {
                    "amplitude": f.amplitude,
                    "offset": f.offset,
                    "theta0": f.theta0 if f.theta_defined else None,
                    "visibility": f.visibility,
                    "sigma_visibility": f.sigma_visibility,
                    "raw_visibility": f.raw_visibility,
                    "chi2": f.chi2,
                    "dof": f.dof,
                    "covariance": np.nan_to_num(f.covariance, nan=0.0).tolist(),
                }
                for (i, j), f in sorted(self.fits.items())
            },
            "diagonals": self.diagonals.to_json(),
            "vacuum_coherences": {channel_name(k): [z.real, z.imag] for k, z in sorted(self.vacuum_coherences.items())},
            "lo_intensities": list(self.lo_intensities),
            "fidelities": self.fidelities,
            "mode_match": self.mode_match,
            "gauge": self.gauge,
            "cycle_residuals": {"".join(channel_name(m) for m in k): v for k, v in self.cycle.items()},
            "warnings": list(self.warnings),
            "psd": self.psd,
            "uncertainties": self.uncertainties,
        }

    def report(self) -> str:
        return render_report(self.to_json())


def _fmt_sigma(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f" +/- {v:.6f}"


def render_report(doc: dict) -> str:
    """Human-readable summary of a serialized ReconstructionResult."""
    lines = ["Reconstruction report", "", "Populations (efficiency corrected):"]
    diag = doc["diagonals"]
    for pat in sorted(diag["p"], key=lambda k: (k.count("1"), k)):
        lines.append(f"  p{pat} = {diag['p'][pat]:.6f}{_fmt_sigma(diag['sigma'].get(pat))}")
    lines += ["", "Pair coherences:"]
    for e in doc["pairs"]:
        tag = "  (mode-match corrected)" if e["mode_match_corrected"] else ""
        lines.append(
            f"  |d_{e['pair']}| = {e['abs']:.6f}{_fmt_sigma(e['sigma_abs'])}"
            f"  theta = {e['theta'] / math.pi:+.4f} pi{_fmt_sigma(None if e['sigma_theta'] is None else e['sigma_theta'] / math.pi)}"
            f"  V = {e['visibility']:.4f}{tag}"
        )
    if doc["vacuum_coherences"]:
        lines += ["", "Vacuum coherences:"]
        for k, (re, im) in doc["vacuum_coherences"].items():
            lines.append(f"  d_{k} = {math.hypot(re, im):.6f} at {math.atan2(im, re) / math.pi:+.4f} pi")
    if doc["fidelities"]:
        lines += ["", "Fidelities (single-photon subspace normalization):"]
        for name, f in doc["fidelities"].items():
            txt = f"  {name}: F = {f['subspace_uncorrected']:.6f}{_fmt_sigma(f.get('sigma_subspace_uncorrected'))}"
            if f.get("subspace_corrected") is not None:
                txt += f", mode-match corrected F = {f['subspace_corrected']:.6f}{_fmt_sigma(f.get('sigma_subspace_corrected'))}"
            txt += f"  (full-space F = {f['full']:.6f})"
            lines.append(txt)
    if doc["cycle_residuals"]:
        lines += ["", "Phase cycle residuals:"]
        lines += [f"  {k}: {v / math.pi:+.4f} pi" for k, v in doc["cycle_residuals"].items()]
    psd = doc["psd"]
    lines += ["", f"Min eigenvalue {psd['min_eigenvalue']:.4g}; PSD projection {'on' if psd['projected'] else 'off'}"]
    if doc["warnings"]:
        lines += ["", "Warnings:"] + [f"  - {w}" for w in doc["warnings"]]
    return "\n".join(lines) + "\n"


def _intensities(data: TomographyData, det: DetectorModel, given) -> tuple:
    n = data.num_modes
    if given is not None:
        return tuple(float(x) for x in given)
    clicks = np.zeros(n)
    shots = np.zeros(n)
    for ds in list(data.fringes.values()) + list(data.singles.values()):
        for k in range(n):
            clicks[k] += float(np.sum(ds.singles_background[:, k]))
            shots[k] += float(np.sum(ds.shots_background))
    if np.any(shots == 0):
        raise ValueError("no LO-only background data to infer LO intensities")
    return tuple(lo_intensity_from_background(clicks[k] / shots[k], det.eta(k)) for k in range(n))


def _core(data: TomographyData, det: DetectorModel, opts: ReconstructionOptions, targets: dict):
    n = data.num_modes
    pairs = mode_pairs(n)
    for p in pairs:
        if p not in data.fringes:
            raise MissingPairError(p)
    diag = estimate_diagonals(data.diagonal, det)
    intens = _intensities(data, det, opts.lo_intensities)
    warn = []

    dvac = dict(opts.vacuum_coherences or {})
    for k, ds in sorted(data.singles.items()):
        z, _, _, _ = estimate_vacuum_coherence(ds, k, det.eta(k), intens[k])
        dvac[k] = z

    fits, raw_est = {}, {}
    theta0 = {}
    for p in pairs:
        ds = data.fringes[p]
        sub = vacuum_term_counts(ds, dvac, intens, det) if dvac else None
        fit = fit_fringe(ds, sub)
        fits[p] = fit
        i, j = p
        r = intens[j] / intens[i]
        V = fit.visibility
        mag, smag = coherence_from_visibility(
            V, diag.single(i), diag.single(j), r, (fit.sigma_visibility, diag.single_sigma(i), diag.single_sigma(j))
        )
        bound = math.sqrt(max(diag.single(i), 0) * max(diag.single(j), 0))
        if fit.theta_defined:
            theta0[p] = fit.theta0
        raw_est[p] = OffDiagonalEstimate(p, mag, 0.0, smag, fit.sigma_theta, V, r, mag > bound * (1 + 1e-9) + 1e-15)

    conv = opts.convention
    offsets = dict(conv.offsets or {})
    if conv.reference:
        offsets = calibrate_offsets(theta0, conv.reference)
    for p, e in raw_est.items():
        ph = phase_from_quadratures(fits[p], p, offsets=offsets) if fits[p].theta_defined else 0.0
        raw_est[p] = replace(e, phase=ph)
        if e.bound_violated:
            warn.append(f"|d_{channel_name(p[0])}{channel_name(p[1])}| = {e.magnitude:.4g} exceeds sqrt(p_i p_j)")
        if not fits[p].theta_defined:
            warn.append(f"flat fringe for pair {channel_name(p[0])}{channel_name(p[1])}: phase undefined, set to 0")

    est = dict(raw_est)
    if opts.overlaps is not None:
        est = {p: mode_match_correct(e, opts.overlaps[p[0]], opts.overlaps[p[1]]) for p, e in raw_est.items()}

    if diag.two_photon_mass > TWO_PHOTON_WARN_RATIO * min(diag.single(k) for k in range(n)):
        warn.append(
            f"two-photon mass {diag.two_photon_mass:.4g} exceeds {TWO_PHOTON_WARN_RATIO:g} x smallest single-photon population"
        )

    def build(estimates):
        diagp = {vacuum_pattern(n): diag.vacuum}
        diagp.update({single_pattern(n, k): diag.single(k) for k in range(n)})
        block = None
        tp = two_photon_patterns(n)
        pair_mass = [diag.p.get(pat, 0.0) for pat in tp]
        if any(pair_mass):
            block = np.diag(pair_mass).astype(complex)
        higher = sum(v for pat, v in diag.p.items() if sum(pat) >= 3)
        if higher:
            diagp[vacuum_pattern(n)] += higher
        return StructuredState(n, diagp, {p: e.value for p, e in estimates.items()}, dvac, block)

    model_raw = build(raw_est)
    model = build(est)

    fids = {}
    for name, (signs, weights) in targets.items():
        entry = {
            "subspace_uncorrected": fidelity_decomposition(model_raw.to_subspace(), signs, weights),
            "subspace_corrected": fidelity_decomposition(model.to_subspace(), signs, weights) if opts.overlaps is not None else None,
        }
        fids[name] = entry
    return {
        "diag": diag,
        "intens": intens,
        "dvac": dvac,
        "fits": fits,
        "raw_est": raw_est,
        "est": est,
        "offsets": offsets,
        "model_raw": model_raw,
        "model": model,
        "fids": fids,
        "warnings": warn,
    }


def _target_spec(target) -> tuple:
    """(signs, weights) of a single-excitation target given as StateVector or WStateSpec-like."""
    if isinstance(target, StateVector):
        n = target.space.num_modes
        amps = np.array([target.amplitude(single_pattern(n, k)) for k in range(n)])
        if abs(np.sum(np.abs(amps) ** 2) - 1) > 1e-9 or np.any(np.abs(amps.imag) > 1e-12):
            raise ValueError("targets must be real single-excitation states")
        return tuple(np.where(amps.real < 0, -1, 1)), tuple(np.abs(amps.real))
    return tuple(target.signs), tuple(target.weights)


def reconstruct(
    data: TomographyData,
    det: DetectorModel,
    options: ReconstructionOptions | None = None,
    targets: dict | None = None,
) -> ReconstructionResult:
    """Reconstruct the block-model density matrix from LO-off populations and all pair fringes."""
    opts = options or ReconstructionOptions()
    n = data.num_modes
    if n < 2:
        raise ValueError("reconstruction needs at least two modes")
    tspec = {name: _target_spec(t) for name, t in (targets or {}).items()}
    core = _core(data, det, opts, tspec)
    model = core["model"]
    sub = model.to_subspace()
    cutoff = max(opts.cutoff, 2 if model.two_photon_block is not None else 1)
    rho = assemble(model, cutoff=cutoff, validate=False)
    rho_sub = assemble(sub, cutoff=cutoff, validate=False)
    min_eig = rho.min_eigenvalue()
    min_eig_sub = rho_sub.min_eigenvalue()
    warn = list(core["warnings"])
    if min_eig < -1e-8:
        warn.append(f"reconstructed matrix is not positive semidefinite (min eigenvalue {min_eig:.4g})")
    if opts.project_psd:
        rho, rho_sub = nearest_psd(rho), nearest_psd(rho_sub)

    fids = {}
    for name, (signs, weights) in tspec.items():
        entry = dict(core["fids"][name])
        space = rho.space
        amps = np.zeros(space.dim, dtype=complex)
        for k in range(n):
            amps[space.index(single_pattern(n, k))] = signs[k] * weights[k]
        t = StateVector(space, amps)
        entry["full"] = fidelity(rho, t)
        entry["subspace"] = fidelity(rho_sub, t)
        fids[name] = entry

    phases = {p: e.phase for p, e in core["raw_est"].items()}
    cycle = cycle_residuals(phases, n)
    mm = {
        "applied": opts.overlaps is not None,
        "overlaps": None if opts.overlaps is None else [float(v) for v in opts.overlaps],
    }
    gauge = {"convention": opts.convention.to_json(), "offsets": {channel_name(k): v for k, v in sorted(core["offsets"].items())}}
    result = ReconstructionResult(
        model=model,
        model_subspace=sub,
        matrix=rho,
        matrix_subspace=rho_sub,
        pairs=core["est"],
        pairs_raw=core["raw_est"],
        fits=core["fits"],
        diagonals=core["diag"],
        vacuum_coherences=core["dvac"],
        lo_intensities=core["intens"],
        fidelities=fids,
        mode_match=mm,
        gauge=gauge,
        cycle=cycle,
        warnings=warn,
        psd={"min_eigenvalue": min_eig, "min_eigenvalue_subspace": min_eig_sub, "projected": opts.project_psd},
    )
    if opts.error_method is not None:
        unc = error_bars(data, det, opts, targets, method=opts.error_method, seed=opts.seed, B=opts.bootstrap_samples)
        result = replace(result, uncertainties=unc)
        for name in fids:
            for key in ("subspace_uncorrected", "subspace_corrected"):
                sig = unc.get("fidelity", {}).get(name, {}).get(key)
                if sig is not None:
                    fids[name]["sigma_" + key] = sig
        pairs = {p: replace(e, sigma_magnitude=unc["abs"][_pname(p)], sigma_phase=unc["theta"][_pname(p)]) for p, e in result.pairs.items()}
        result = replace(result, pairs=pairs, fidelities=fids)
    return result


def _pname(p) -> str:
    return channel_name(p[0]) + channel_name(p[1])


def _summary(core) -> dict:
    out = {"abs": {}, "theta": {}, "fidelity": {}}
    for p, e in core["est"].items():
        out["abs"][_pname(p)] = e.magnitude
        out["theta"][_pname(p)] = e.phase
    for name, f in core["fids"].items():
        out["fidelity"][name] = {k: v for k, v in f.items() if v is not None}
    return out


def error_bars(
    data: TomographyData,
    det: DetectorModel,
    options: ReconstructionOptions | None = None,
    targets: dict | None = None,
    method: str = "bootstrap",
    seed: int = 0,
    B: int = 1000,
) -> dict:
    """Standard errors of |d|, theta and the target fidelities.

    ``bootstrap``: B Poisson resamples of every count, pipeline re-run on
    each, sample standard deviation; replicate streams are spawned from
    ``seed`` so the result is independent of the thread count.
    ``propagation``: first-order propagation of the fit covariances and
    population errors by central differences.
    """
    opts = replace(options or ReconstructionOptions(), error_method=None)
    tspec = {name: _target_spec(t) for name, t in (targets or {}).items()}
    if method == "bootstrap":
        if B < 2:
            raise ValueError("bootstrap needs B >= 2")
        children = np.random.SeedSequence(int(seed)).spawn(B)

        def one(ss):
            rng = np.random.default_rng(ss)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                try:
                    return _summary(_core(data.resampled(rng), det, opts, tspec))
                except (DegenerateFitError, ValueError):
                    return None

        threads = default_threads() if opts.threads is None else opts.threads
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                reps = list(pool.map(one, children))
        else:
            reps = [one(c) for c in children]
        reps = [r for r in reps if r is not None]
        if len(reps) < 2:
            raise DegenerateFitError("too few successful bootstrap replicates")
        out = {"method": "bootstrap", "B": B, "replicates": len(reps), "seed": int(seed), "abs": {}, "theta": {}, "fidelity": {}}
        for key in reps[0]["abs"]:
            out["abs"][key] = float(np.std([r["abs"][key] for r in reps], ddof=1))
            th = np.array([r["theta"][key] for r in reps])
            # circular spread about the replicate mean direction
            mean = np.angle(np.mean(np.exp(1j * th)))
            out["theta"][key] = float(np.std(np.angle(np.exp(1j * (th - mean))), ddof=1))
        for name in reps[0]["fidelity"]:
            out["fidelity"][name] = {
                k: float(np.std([r["fidelity"][name][k] for r in reps], ddof=1)) for k in reps[0]["fidelity"][name]
            }
        return out
    if method == "propagation":
        return _propagate(data, det, opts, tspec)
    raise ValueError(f"unknown error method {method!r}")


def _propagate(data: TomographyData, det: DetectorModel, opts: ReconstructionOptions, tspec: dict) -> dict:
    base = _core(data, det, opts, tspec)
    n = data.num_modes
    pairs = mode_pairs(n)
    diag = base["diag"]
    fits = base["fits"]
    # parameter vector: single-photon populations, then (A, B, theta0) per pair
    x0 = [diag.single(k) for k in range(n)]
    sig = [diag.single_sigma(k) for k in range(n)]
    blocks = []
    for p in pairs:
        f = fits[p]
        x0 += [f.amplitude, f.offset, f.theta0 if f.theta_defined else 0.0]
        blocks.append(np.nan_to_num(f.covariance))
    x0 = np.array(x0)
    cov = np.zeros((x0.size, x0.size))
    cov[:n, :n] = np.diag(np.square(sig))
    for b, blk in enumerate(blocks):
        s = n + 3 * b
        cov[s : s + 3, s : s + 3] = blk

    def outputs(x):
        ps = x[:n]
        vals = []
        raw = {}
        for b, p in enumerate(pairs):
            A, Bo, th = x[n + 3 * b : n + 3 * b + 3]
            e = base["raw_est"][p]
            mag = coherence_from_visibility(A / Bo, ps[p[0]], ps[p[1]], e.ratio)
            ph = th - (base["offsets"].get(p[0], 0.0) - base["offsets"].get(p[1], 0.0))
            raw[p] = mag * np.exp(1j * ph)
            scale = 1.0 if opts.overlaps is None else 1 / math.sqrt(opts.overlaps[p[0]] * opts.overlaps[p[1]])
            vals += [mag * scale, ph]
        s = ps.sum()
        for name, (signs, weights) in tspec.items():
            w = np.asarray(weights)
            for scaled in (False, True):
                f = float(np.sum(w**2 * ps)) / s
                for p in pairs:
                    scale = 1 / math.sqrt(opts.overlaps[p[0]] * opts.overlaps[p[1]]) if scaled and opts.overlaps is not None else 1.0
                    f += 2 * w[p[0]] * w[p[1]] * signs[p[0]] * signs[p[1]] * scale * raw[p].real / s
                vals.append(f)
        return np.array(vals)

    y0 = outputs(x0)
    J = np.zeros((y0.size, x0.size))
    for k in range(x0.size):
        h = 1e-6 * max(abs(x0[k]), 1e-8)
        xp, xm = x0.copy(), x0.copy()
        xp[k] += h
        xm[k] -= h
        J[:, k] = (outputs(xp) - outputs(xm)) / (2 * h)
    var = np.einsum("ik,kl,il->i", J, cov, J)
    sd = np.sqrt(np.maximum(var, 0))
    out = {"method": "propagation", "abs": {}, "theta": {}, "fidelity": {}}
    for b, p in enumerate(pairs):
        out["abs"][_pname(p)] = float(sd[2 * b])
        out["theta"][_pname(p)] = float(sd[2 * b + 1])
    for t, name in enumerate(tspec):
        base_idx = 2 * len(pairs) + 2 * t
        entry = {"subspace_uncorrected": float(sd[base_idx])}
        if opts.overlaps is not None:
            entry["subspace_corrected"] = float(sd[base_idx + 1])
        out["fidelity"][name] = entry
    return out


def ideal_tomography_data(model: StructuredState, intensities, det: DetectorModel, n_phases: int = 12, with_singles: bool = False) -> TomographyData:
    """Noise-free linear-response data: probabilities in place of counts (one shot per point).

    Coincidences use the closed-form number-operator probabilities, the
    LO-off table the populations times the efficiencies.
    """
    n = model.num_modes
    nm = 2**n
    excl = np.zeros(nm)
    for k in range(n):
        excl[1 << k] = model.p_single(k) * det.eta(k)
    if model.two_photon_block is not None:
        for pat, v in zip(two_photon_patterns(n), np.diag(model.two_photon_block).real):
            if max(pat) == 1:
                mask = sum(1 << k for k in range(n) if pat[k])
                excl[mask] += v * np.prod([det.eta(k) for k in range(n) if pat[k]])
    excl[0] = 1.0 - excl[1:].sum()
    channels = tuple(channel_name(k) for k in range(n))
    diag = CountTable(channels, np.array([1.0]), excl[None, :], {"run": {"kind": "diagonal"}})
    amps = [math.sqrt(i) for i in intensities]

    def dataset(pair, sweep):
        i, j = pair
        rows = []
        for k in range(n_phases):
            ph = [0.0] * n
            ph[sweep] = 2 * math.pi * k / n_phases
            rows.append(ph)
        phases = np.array(rows)
        coinc, bg, sing, sing_bg = [], [], [], []
        for ph in rows:
            lo = LocalOscillatorConfig(amps, ph)
            cb = coincidence_analytic(model, lo, det, pair)
            coinc.append(cb.P_XY)
            bg.append(cb.P_coh)
            sing.append([singles_analytic(model, lo, det, (k, k)).P_X for k in range(n)])
            sing_bg.append([det.eta(k) * intensities[k] / 2 for k in range(n)])
        ones = np.ones(n_phases)
        return FringeDataset(pair, phases, np.array(coinc), np.array(bg), np.array(sing), np.array(sing_bg), ones, ones)

    fringes = {p: dataset(p, p[1]) for p in mode_pairs(n)}
    singles = {k: dataset((k, (k + 1) % n), k) for k in range(n)} if with_singles else {}
    return TomographyData(diag, fringes, singles)
