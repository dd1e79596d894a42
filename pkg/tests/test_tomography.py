import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathtomo.counting import CountTable, count
from pathtomo.detection import DetectorModel, LocalOscillatorConfig, visibility_analytic
from pathtomo.fock import DensityOperator, FockSpace
from pathtomo.montecarlo import ExperimentConfig, PhaseSetting, phase_schedule, sample_counts, sample_events, sweep_phase
from pathtomo.states import StructuredState, WStateSpec, assemble, make_w_state, random_structured_state
from pathtomo.tomography import (
    DegenerateFitError,
    MissingPairError,
    OffDiagonalEstimate,
    PhaseConvention,
    ReconstructionOptions,
    TomographyData,
    calibrate_offsets,
    coherence_from_visibility,
    cycle_residuals,
    error_bars,
    estimate_vacuum_coherence,
    fidelity,
    fidelity_decomposition,
    fit_cosine,
    fit_fringe,
    hom_analyze,
    hom_from_depth,
    hom_normalized,
    ideal_tomography_data,
    lo_intensity_from_background,
    mode_match_correct,
    nearest_psd,
    phase_from_quadratures,
    reconstruct,
)

W_PLUS = WStateSpec(3, (1, 1, 1))
W_MINUS = WStateSpec(3, (1, -1, -1))
GRID = 2 * math.pi * np.arange(12) / 12


def table_one(signs_phases):
    """Subspace-normalized model with p = 1/3 each and the given pair coherences."""
    d = {pair: mag * np.exp(1j * math.pi * ph) for pair, (mag, ph) in signs_phases.items()}
    return StructuredState(3, {(0, 0, 0): 0.0, (1, 0, 0): 1 / 3, (0, 1, 0): 1 / 3, (0, 0, 1): 1 / 3}, d)


TABLE_PLUS = {(0, 1): (0.260, 0.0), (1, 2): (0.203, 0.0), (0, 2): (0.280, 0.0)}
TABLE_MINUS = {(0, 1): (0.285, 1.044), (1, 2): (0.246, 0.057), (0, 2): (0.265, 0.969)}


# --- fringe fit


def test_fit_cosine_exact_recovery():
    y = 0.3 * np.cos(GRID - 1.1) + 0.5
    fit = fit_cosine(GRID, y, np.ones_like(y))
    assert fit.amplitude == pytest.approx(0.3, abs=1e-12)
    assert fit.offset == pytest.approx(0.5, abs=1e-12)
    assert fit.theta0 == pytest.approx(1.1, abs=1e-12)
    assert fit.visibility == pytest.approx(0.6, abs=1e-12)
    assert fit.chi2 == pytest.approx(0, abs=1e-20)
    assert fit.dof == 9
    assert np.allclose(fit.model(GRID), y)


def test_fit_cosine_flat_fringe():
    fit = fit_cosine(GRID, np.full(12, 7.0), np.ones(12))
    assert not fit.theta_defined
    assert fit.visibility == 0
    assert math.isnan(fit.sigma_theta)
    with pytest.raises(DegenerateFitError):
        phase_from_quadratures(fit, (0, 1))


def test_fit_cosine_needs_distinct_phases():
    with pytest.raises(DegenerateFitError):
        fit_cosine([0, 0, 1, 1, 2, 2], np.ones(6), np.ones(6))


def test_fit_uncertainty_matches_scatter():
    rng = np.random.default_rng(0)
    mean = 1000 * (1 + 0.5 * np.cos(GRID - 0.4))
    vis = []
    sig = []
    for _ in range(400):
        y = rng.poisson(mean)
        fit = fit_cosine(GRID, y, np.maximum(y, 1))
        vis.append(fit.visibility)
        sig.append(fit.sigma_visibility)
    assert np.std(vis) == pytest.approx(np.mean(sig), rel=0.15)


def test_zero_count_point_uses_variance_floor():
    from pathtomo.montecarlo import FringeDataset

    coinc = np.round(50 * (1 + np.cos(GRID))).astype(int)
    assert coinc.min() == 0
    ds = FringeDataset((0, 1), np.stack([GRID, np.zeros(12)], axis=1), coinc, np.zeros(12, int), np.zeros((12, 2), int), np.zeros((12, 2), int), np.full(12, 1000), np.full(12, 1000))
    fit = fit_fringe(ds)
    assert np.isfinite(fit.sigma_visibility) and fit.sigma_visibility > 0


# --- visibility inversion


def test_coherence_from_visibility_examples():
    assert coherence_from_visibility(1.0, 1 / 3, 1 / 3, 1.0) == pytest.approx(1 / 3)
    assert coherence_from_visibility(0.0, 0.2, 0.3, 2.0) == 0
    assert coherence_from_visibility(0.6667, 0.1, 0.2, 4.0) == pytest.approx(0.1, abs=1e-4)
    with pytest.raises(ValueError):
        coherence_from_visibility(0.5, 0.1, 0.1, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 0.5), st.floats(1e-3, 0.5), st.floats(1e-2, 100), st.floats(0, 1))
def test_visibility_round_trip(p10, p01, r, frac):
    d = frac * math.sqrt(p10 * p01)
    V = visibility_analytic(p10, p01, r, d)
    assert coherence_from_visibility(V, p10, p01, r) == pytest.approx(d, abs=1e-12)


def test_coherence_error_propagation():
    d, s = coherence_from_visibility(0.5, 0.2, 0.2, 1.0, (0.01, 0.0, 0.0))
    assert s == pytest.approx(0.01 * 0.4 / 2)


# --- phases and gauge


def test_calibrate_offsets_zeroes_reference_pairs():
    theta0 = {(0, 1): 0.4, (1, 2): -0.7, (0, 2): -0.3}
    offsets = calibrate_offsets(theta0, {(0, 1): 0.0, (1, 2): 0.0})
    assert offsets[0] - offsets[1] == pytest.approx(0.4)
    assert offsets[1] - offsets[2] == pytest.approx(-0.7)


def test_calibrate_offsets_missing_pair():
    with pytest.raises(MissingPairError):
        calibrate_offsets({(0, 1): 0.1}, {(1, 2): 0.0})


def test_cycle_residuals():
    res = cycle_residuals({(0, 1): 0.3, (1, 2): 0.5, (0, 2): 0.8}, 3)
    assert res[(0, 1, 2)] == pytest.approx(0, abs=1e-15)
    res = cycle_residuals({(0, 1): 3.0, (1, 2): 3.0, (0, 2): 6.0 - 2 * math.pi}, 3)
    assert res[(0, 1, 2)] == pytest.approx(0, abs=1e-12)


def test_reference_pairs_have_zero_phase():
    model = StructuredState(3, {(0, 0, 0): 0.1, (1, 0, 0): 0.3, (0, 1, 0): 0.3, (0, 0, 1): 0.3}, {(0, 1): 0.25j, (1, 2): 0.2, (0, 2): -0.1})
    data = ideal_tomography_data(model, (0.1, 0.1, 0.1), DetectorModel.uniform(3, 1.0))
    opts = ReconstructionOptions(lo_intensities=(0.1, 0.1, 0.1), convention=PhaseConvention.zero_first_pairs([(0, 1), (1, 2)]))
    res = reconstruct(data, DetectorModel.uniform(3, 1.0), opts)
    assert res.pairs[(0, 1)].phase == pytest.approx(0, abs=1e-12)
    assert res.pairs[(1, 2)].phase == pytest.approx(0, abs=1e-12)
    # the third phase moves with the gauge: arg(d_AC) - arg(d_AB) - arg(d_BC)
    assert res.pairs[(0, 2)].phase == pytest.approx(math.pi - math.pi / 2, abs=1e-12)


def test_w_minus_phase_pattern():
    det = DetectorModel.uniform(3, 0.5)
    model = StructuredState.from_json(_w_model_json(W_MINUS))
    res = reconstruct(ideal_tomography_data(model, (0.2, 0.2, 0.2), det), det, ReconstructionOptions(lo_intensities=(0.2,) * 3))
    assert abs(abs(res.pairs[(0, 1)].phase) - math.pi) < 1e-9
    assert abs(abs(res.pairs[(0, 2)].phase) - math.pi) < 1e-9
    assert abs(res.pairs[(1, 2)].phase) < 1e-9


def _w_model_json(spec):
    from pathtomo.states import extract_structure

    return extract_structure(make_w_state(spec, cutoff=1).dm()).to_json()


# --- vacuum coherences


def test_lo_intensity_from_background():
    eta, I = 0.5, 0.2
    f = 1 - math.exp(-eta * I / 2)
    assert lo_intensity_from_background(f, eta) == pytest.approx(I)
    with pytest.raises(ValueError):
        lo_intensity_from_background(1.0, 0.5)


def test_vacuum_coherence_from_singles_fringe():
    model = StructuredState(2, {(0, 0): 0.98, (1, 0): 0.01, (0, 1): 0.01}, {}, {0: 0.05, 1: 0.0})
    det = DetectorModel.uniform(2, 1.0)
    data = ideal_tomography_data(model, (0.01, 0.01), det, with_singles=True)
    ds = data.singles[0]
    z, _, _, fit = estimate_vacuum_coherence(ds, 0, 1.0, 0.01)
    assert fit.amplitude == pytest.approx(0.005, rel=1e-9)
    assert z == pytest.approx(0.05, abs=1e-12)
    z1, _, _, fit1 = estimate_vacuum_coherence(data.singles[1], 1, 1.0, 0.01)
    assert z1 == 0 and not fit1.theta_defined


# --- mode matching and HOM


def test_mode_match_identity_and_errors():
    e = OffDiagonalEstimate((0, 1), 0.2, 0.3, 0.01)
    out = mode_match_correct(e, 1.0, 1.0)
    assert out.magnitude == 0.2 and out.phase == 0.3 and out.mode_match_corrected
    for bad in (0.0, 1.2):
        with pytest.raises(ValueError):
            mode_match_correct(e, bad, 1.0)


def test_table_fidelities_and_mode_match():
    plus = table_one(TABLE_PLUS)
    minus = table_one(TABLE_MINUS)
    assert fidelity_decomposition(plus, W_PLUS.signs) == pytest.approx(0.829, abs=5e-4)
    assert fidelity_decomposition(minus, W_MINUS.signs) == pytest.approx(0.859, abs=5e-4)

    def corrected(model, signs):
        est = {p: OffDiagonalEstimate(p, abs(v), float(np.angle(v))) for p, v in model.coherences.items()}
        est = {p: mode_match_correct(e, 0.893, 0.893).value for p, e in est.items()}
        return fidelity_decomposition(StructuredState(3, model.diagonals, est), signs)

    assert corrected(plus, W_PLUS.signs) == pytest.approx(0.888, abs=1e-3)
    assert corrected(minus, W_MINUS.signs) == pytest.approx(0.922, abs=1e-3)


def test_hom_examples():
    assert hom_from_depth(0.28, 0.25).M_dip == pytest.approx(0.892857, abs=1e-6)
    assert hom_from_depth(0.28, 0.28).M_dip == pytest.approx(1.0)
    assert hom_from_depth(0.28, 0.0).M_dip == 0
    assert hom_from_depth(0.28, 0.25).n_ph == pytest.approx(0.14)
    with pytest.raises(ValueError):
        hom_from_depth(0.0, 0.0)


@pytest.mark.parametrize("n_ph, M", [(0.14, 0.893), (0.05, 0.5), (0.3, 0.99)])
def test_hom_synthetic_recovery(n_ph, M):
    delay = np.linspace(-3, 3, 121)
    curve = hom_normalized(M * np.exp(-0.5 * ((delay - 0.2) / 0.6) ** 2), n_ph)
    base = np.full_like(delay, 1000.0)
    res = hom_analyze(delay, curve * base, base)
    assert res.n_ph == pytest.approx(n_ph, abs=1e-9)
    assert res.M_dip == pytest.approx(M, abs=1e-9)


def test_hom_zero_baseline():
    with pytest.raises(ValueError):
        hom_analyze([0, 1, 2], [1, 1, 1], [1, 0, 1])


# --- fidelity


def test_fidelity_of_target_is_one():
    w = make_w_state(W_PLUS)
    assert fidelity(w.dm(), w) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        fidelity(FockSpace(2, 1).vacuum().dm(), w)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([W_PLUS, W_MINUS]), st.booleans())
def test_fidelity_decomposition_matches_direct(seed, spec, vac):
    m = random_structured_state(np.random.default_rng(seed), 3, vacuum_coherence=vac)
    direct = fidelity(assemble(m, cutoff=1), make_w_state(spec, cutoff=1))
    assert fidelity_decomposition(m, spec.signs) == pytest.approx(direct, abs=1e-12)


def test_nearest_psd():
    space = FockSpace(1, 1)
    rho = DensityOperator(space, np.array([[0.5, 0.6], [0.6, 0.5]], dtype=complex))
    out = nearest_psd(rho)
    assert out.min_eigenvalue() >= -1e-15
    assert out.trace == pytest.approx(1.0)
    ok = make_w_state(W_PLUS, cutoff=1).dm()
    assert np.allclose(nearest_psd(ok).matrix, ok.matrix)


# --- reconstruction


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 3), st.booleans())
def test_zero_noise_round_trip(seed, n, vac):
    rng = np.random.default_rng(seed)
    truth = random_structured_state(rng, n, vacuum_coherence=vac)
    det = DetectorModel(tuple(rng.uniform(0.2, 1.0, n)))
    intens = tuple(rng.uniform(0.02, 0.3, n))
    data = ideal_tomography_data(truth, intens, det, with_singles=vac)
    res = reconstruct(data, det, ReconstructionOptions(lo_intensities=intens))
    assert res.model.allclose(truth, atol=1e-12)
    assert len(res.pairs) == n * (n - 1) // 2
    m = res.matrix.matrix
    assert np.abs(m - m.conj().T).max() < 1e-15


def test_zero_noise_ideal_w_fidelity():
    det = DetectorModel.uniform(3, 0.5)
    model = StructuredState.from_json(_w_model_json(W_PLUS))
    res = reconstruct(
        ideal_tomography_data(model, (0.1, 0.2, 0.15), det),
        det,
        ReconstructionOptions(lo_intensities=(0.1, 0.2, 0.15)),
        targets={"W+": W_PLUS, "W-": W_MINUS},
    )
    assert res.fidelities["W+"]["subspace_uncorrected"] == pytest.approx(1.0, abs=1e-12)
    assert res.fidelities["W+"]["full"] == pytest.approx(1.0, abs=1e-12)
    assert res.fidelities["W-"]["subspace_uncorrected"] == pytest.approx(1 / 9, abs=1e-12)
    assert not res.warnings


def test_missing_pair():
    det = DetectorModel.uniform(3, 0.5)
    model = StructuredState.from_json(_w_model_json(W_PLUS))
    data = ideal_tomography_data(model, (0.1,) * 3, det)
    del data.fringes[(1, 2)]
    with pytest.raises(MissingPairError) as err:
        reconstruct(data, det, ReconstructionOptions(lo_intensities=(0.1,) * 3))
    assert "BC" in str(err.value)


def test_bound_violation_and_psd_warnings():
    det = DetectorModel.uniform(2, 1.0)
    model = StructuredState(2, {(0, 0): 0.5, (1, 0): 0.25, (0, 1): 0.25}, {(0, 1): 0.25})
    data = ideal_tomography_data(model, (0.1, 0.1), det)
    # lower the fringe offset so the fitted visibility exceeds 1
    ds = data.fringes[(0, 1)]
    offset = np.mean(ds.coincidences - ds.background)
    bad = TomographyData(data.diagonal, {(0, 1): replace(ds, coincidences=ds.coincidences - 0.2 * offset)})
    res = reconstruct(bad, det, ReconstructionOptions(lo_intensities=(0.1, 0.1)))
    assert res.pairs[(0, 1)].bound_violated
    assert any("exceeds" in w for w in res.warnings)
    assert any("positive semidefinite" in w for w in res.warnings)
    proj = reconstruct(bad, det, ReconstructionOptions(lo_intensities=(0.1, 0.1), project_psd=True))
    assert proj.matrix.min_eigenvalue() >= -1e-12
    assert proj.to_json()["psd"]["projected"] is True


def test_two_photon_warning():
    det = DetectorModel.uniform(2, 1.0)
    model = StructuredState(2, {(0, 0): 0.5, (1, 0): 0.25, (0, 1): 0.25}, {(0, 1): 0.1})
    data = ideal_tomography_data(model, (0.1, 0.1), det)
    excl = data.diagonal.exclusive.copy()
    excl[0, 3] = 0.05
    excl[0, 0] -= 0.05
    bad = TomographyData(CountTable(data.diagonal.channels, data.diagonal.shots, excl), data.fringes)
    res = reconstruct(bad, det, ReconstructionOptions(lo_intensities=(0.1, 0.1)))
    assert any("two-photon" in w for w in res.warnings)


def test_result_json_and_report():
    det = DetectorModel.uniform(3, 0.5)
    model = StructuredState.from_json(_w_model_json(W_PLUS))
    res = reconstruct(
        ideal_tomography_data(model, (0.1,) * 3, det),
        det,
        ReconstructionOptions(lo_intensities=(0.1,) * 3, overlaps=(0.9, 0.9, 0.9)),
        targets={"W+": W_PLUS},
    )
    doc = json.loads(json.dumps(res.to_json()))
    rows = doc["matrix"]["rows"]
    dim = (doc["matrix"]["cutoff"] + 1) ** 3
    assert len(rows) == dim and len(rows[0]) == dim and len(rows[0][0]) == 2
    assert doc["mode_match"]["applied"]
    assert doc["fidelities"]["W+"]["subspace_corrected"] > doc["fidelities"]["W+"]["subspace_uncorrected"]
    text = res.report()
    assert "mode-match corrected F" in text and "|d_AB|" in text


# --- sampled data and error bars


def sampled_pair_data(truth, det, intens, shots, seed, overlap=None, n_phases=12, singles=False):
    n = truth.num_modes
    lo = LocalOscillatorConfig.from_intensities(intens)
    fringes = {}
    for i in range(n):
        for j in range(i + 1, n):
            cfg = ExperimentConfig(truth, det, phase_schedule(n, j, n_phases, shots), lo=lo, seed=seed + 10 * i + j, overlap=overlap)
            fringes[(i, j)] = sweep_phase(cfg, (i, j), mode="multinomial")
    single = {}
    if singles:
        for k in range(n):
            cfg = ExperimentConfig(truth, det, phase_schedule(n, k, n_phases, shots), lo=lo, seed=seed + 100 + k, overlap=overlap)
            single[k] = sweep_phase(cfg, (k, (k + 1) % n), mode="multinomial")
    dcfg = ExperimentConfig(truth, det, (PhaseSetting((0.0,) * n, shots),), seed=seed + 999)
    diag = sample_counts(dcfg, np.random.default_rng(dcfg.seed))
    return TomographyData(diag, fringes, single)


PAIR_TRUTH = StructuredState(2, {(0, 0): 0.5, (1, 0): 0.25, (0, 1): 0.25}, {(0, 1): 0.2 * np.exp(0.3j)})
DET2 = DetectorModel.uniform(2, 0.5)


def test_end_to_end_phase_and_magnitude_within_three_sigma():
    data = sampled_pair_data(PAIR_TRUTH, DET2, (0.02, 0.02), 1_000_000, seed=40)
    res = reconstruct(data, DET2, ReconstructionOptions(error_method="propagation"))
    e = res.pairs[(0, 1)]
    assert abs(e.phase - 0.3) < 3 * e.sigma_phase
    assert abs(e.magnitude - 0.2) < 3 * e.sigma_magnitude + 0.01  # threshold saturation at |alpha|^2 = 0.02


def test_mode_match_correction_end_to_end():
    overlap = (0.9, 0.85)
    data = sampled_pair_data(PAIR_TRUTH, DET2, (0.02, 0.02), 1_000_000, seed=41, overlap=overlap)
    raw = reconstruct(data, DET2, ReconstructionOptions(error_method="propagation"))
    fixed = reconstruct(data, DET2, ReconstructionOptions(overlaps=overlap, error_method="propagation"))
    e_raw, e_fix = raw.pairs[(0, 1)], fixed.pairs[(0, 1)]
    suppressed = 0.2 * math.sqrt(overlap[0] * overlap[1])
    assert abs(e_raw.magnitude - suppressed) < 3 * e_raw.sigma_magnitude + 0.01
    assert abs(e_fix.magnitude - 0.2) < 3 * e_fix.sigma_magnitude + 0.01
    assert e_fix.phase == e_raw.phase


def test_phase_cycle_within_three_sigma():
    truth = StructuredState(3, {(0, 0, 0): 0.4, (1, 0, 0): 0.2, (0, 1, 0): 0.2, (0, 0, 1): 0.2}, {(0, 1): 0.15 * np.exp(0.4j), (1, 2): 0.15 * np.exp(-1.0j), (0, 2): 0.15 * np.exp(-0.6j)})
    det = DetectorModel.uniform(3, 0.5)
    res = reconstruct(sampled_pair_data(truth, det, (0.02,) * 3, 500_000, seed=7), det, ReconstructionOptions(error_method="propagation"))
    sig = math.sqrt(sum(e.sigma_phase**2 for e in res.pairs.values()))
    assert abs(res.cycle[(0, 1, 2)]) < 3 * sig


def test_bootstrap_is_deterministic_and_validates_b():
    data = sampled_pair_data(PAIR_TRUTH, DET2, (0.05, 0.05), 100_000, seed=3)
    a = error_bars(data, DET2, method="bootstrap", seed=5, B=40)
    b = error_bars(data, DET2, ReconstructionOptions(threads=4), method="bootstrap", seed=5, B=40)
    assert a == b
    c = error_bars(data, DET2, method="bootstrap", seed=6, B=40)
    assert a != c
    with pytest.raises(ValueError):
        error_bars(data, DET2, method="bootstrap", B=1)
    with pytest.raises(ValueError):
        error_bars(data, DET2, method="jackknife")


def test_bootstrap_agrees_with_propagation():
    data = sampled_pair_data(PAIR_TRUTH, DET2, (0.05, 0.05), 200_000, seed=9)
    boot = error_bars(data, DET2, method="bootstrap", seed=1, B=300)
    prop = error_bars(data, DET2, method="propagation")
    assert boot["abs"]["AB"] == pytest.approx(prop["abs"]["AB"], rel=0.25)
    assert boot["theta"]["AB"] == pytest.approx(prop["theta"]["AB"], rel=0.25)


def test_bootstrap_sigma_scales_with_shots():
    ratios = []
    for trial in range(20):
        small = sampled_pair_data(PAIR_TRUTH, DET2, (0.05, 0.05), 50_000, seed=1000 + trial)
        large = sampled_pair_data(PAIR_TRUTH, DET2, (0.05, 0.05), 200_000, seed=2000 + trial)
        s = error_bars(small, DET2, method="bootstrap", seed=trial, B=60)["abs"]["AB"]
        big = error_bars(large, DET2, method="bootstrap", seed=trial, B=60)["abs"]["AB"]
        ratios.append(big / s)
    assert np.mean(ratios) == pytest.approx(0.5, rel=0.2)


def test_events_and_counts_agree_on_reconstruction_inputs():
    det = DetectorModel.uniform(2, 0.5)
    cfg = ExperimentConfig(PAIR_TRUTH, det, (PhaseSetting((0.0, 0.0), 20_000),), seed=2)
    assert count(sample_events(cfg)).shots[0] == 20_000
