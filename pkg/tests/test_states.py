import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathtomo.fock import FockSpace, apply_loss, partial_trace
from pathtomo.states import (
    StructuredState,
    WStateSpec,
    assemble,
    extract_structure,
    make_w_state,
    mode_pairs,
    model_condition_warnings,
    random_structured_state,
    two_photon_patterns,
    with_two_photon_contamination,
)

S3 = 1 / np.sqrt(3)


def test_w_plus_amplitudes():
    psi = make_w_state(WStateSpec(3, (1, 1, 1)))
    for pat in [(1, 0, 0), (0, 1, 0), (0, 0, 1)]:
        assert psi.amplitude(pat) == pytest.approx(S3)
    assert psi.norm == pytest.approx(1.0)


def test_w_minus_amplitudes():
    psi = make_w_state(WStateSpec(3, (1, -1, -1)))
    assert psi.amplitude((1, 0, 0)) == pytest.approx(S3)
    assert psi.amplitude((0, 1, 0)) == pytest.approx(-S3)
    assert psi.amplitude((0, 0, 1)) == pytest.approx(-S3)


def test_single_mode_w_state():
    psi = make_w_state(WStateSpec(1))
    assert psi.amplitude((1,)) == pytest.approx(1.0)


def test_w_spec_rejects_zero_weights():
    with pytest.raises(ValueError):
        WStateSpec(2, (1, 1), (0, 0))
    with pytest.raises(ValueError):
        WStateSpec(2, (1, 2))


def test_assemble_diagonal_only():
    m = StructuredState(2, {(0, 0): 0.7, (1, 0): 0.2, (0, 1): 0.1})
    rho = assemble(m)
    assert np.allclose(rho.matrix, np.diag(np.diag(rho.matrix)))


def test_mixture_with_vacuum():
    w = make_w_state(WStateSpec(3), cutoff=2).dm()
    vac = FockSpace(3, 2).vacuum().dm()
    mix = extract_structure(type(w)(w.space, 0.9 * vac.matrix + 0.1 * w.matrix))
    assert mix.p_vacuum == pytest.approx(0.9)
    for k in range(3):
        assert mix.p_single(k) == pytest.approx(1 / 30)
    for i, j in mode_pairs(3):
        assert abs(mix.d(i, j)) == pytest.approx(1 / 30)


def test_assemble_rejects_coherence_above_bound():
    m = StructuredState(2, {(0, 0): 0.8, (1, 0): 0.1, (0, 1): 0.1}, {(0, 1): 0.2})
    with pytest.raises(ValueError):
        assemble(m)


def test_assemble_rejects_bad_normalization():
    with pytest.raises(ValueError):
        assemble(StructuredState(2, {(0, 0): 0.5, (1, 0): 0.1, (0, 1): 0.1}))


def test_extract_w_plus():
    m = extract_structure(make_w_state(WStateSpec(3)).dm())
    for i, j in mode_pairs(3):
        assert m.d(i, j) == pytest.approx(1 / 3, abs=1e-15)
    assert m.residual == 0


def test_extract_lossy_w():
    rho = make_w_state(WStateSpec(3), cutoff=2).dm()
    for k in range(3):
        rho = apply_loss(rho, k, 0.5)
    m = extract_structure(rho)
    assert m.p_vacuum == pytest.approx(0.5, abs=1e-12)
    for k in range(3):
        assert m.p_single(k) == pytest.approx(1 / 6, abs=1e-12)
    for i, j in mode_pairs(3):
        assert abs(m.d(i, j)) == pytest.approx(1 / 6, abs=1e-12)


def test_coherence_pair_order_conjugates():
    m = StructuredState(2, {(0, 0): 0.5, (1, 0): 0.25, (0, 1): 0.25}, {(1, 0): 0.1 + 0.05j})
    assert m.d(0, 1) == pytest.approx(0.1 - 0.05j)
    assert m.d(1, 0) == pytest.approx(0.1 + 0.05j)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 3), st.booleans(), st.sampled_from([0.0, 0.01]))
def test_round_trip(seed, n, vac, tp):
    m = random_structured_state(np.random.default_rng(seed), n, vacuum_coherence=vac, two_photon_trace=tp)
    rho = assemble(m, cutoff=2)
    back = extract_structure(rho)
    assert back.allclose(m, atol=1e-12)
    assert back.residual == 0
    assert np.allclose(assemble(back, cutoff=2).matrix, rho.matrix, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_pairwise_trace_keeps_coherence(seed, tp):
    m = random_structured_state(np.random.default_rng(seed), 3, two_photon_trace=0.02 if tp else 0.0)
    rho = assemble(m, cutoff=2)
    for i, j in mode_pairs(3):
        red = extract_structure(partial_trace(rho, [i, j]))
        assert abs(red.d(0, 1) - m.d(i, j)) <= 1e-12


def test_pairwise_trace_vacuum_absorbs_third_mode():
    m = with_two_photon_contamination(random_structured_state(np.random.default_rng(5), 3), 0.03)
    rho = assemble(m, cutoff=2)
    red = extract_structure(partial_trace(rho, [0, 1]))
    block = dict(zip(two_photon_patterns(3), np.diag(m.two_photon_block).real))
    expected = m.p_vacuum + m.p_single(2) + block[(0, 0, 2)]
    assert red.p_vacuum == pytest.approx(expected, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.lists(st.sampled_from([1, -1]), min_size=4, max_size=4), st.integers(0, 2**32 - 1))
def test_w_state_structure(n, signs, seed):
    w = np.random.default_rng(seed).uniform(0.1, 1, n)
    spec = WStateSpec(n, tuple(signs[:n]), tuple(w))
    m = extract_structure(make_w_state(spec, cutoff=1).dm())
    ws = np.array(spec.weights)
    assert np.allclose(m.single_photon_probabilities, ws**2, atol=1e-12)
    for i, j in mode_pairs(n):
        assert m.d(i, j) == pytest.approx(spec.signs[i] * spec.signs[j] * ws[i] * ws[j], abs=1e-12)


def test_json_round_trip():
    m = random_structured_state(np.random.default_rng(8), 3, vacuum_coherence=True, two_photon_trace=0.01)
    doc = json.loads(json.dumps(m.to_json()))
    assert set(doc) >= {"diagonals", "coherences", "vacuum_coherences", "two_photon_trace"}
    assert StructuredState.from_json(doc).allclose(m, atol=0)


def test_subspace_normalization():
    m = extract_structure(make_w_state(WStateSpec(3), cutoff=1).dm())
    sub = StructuredState(3, {k: v / 2 for k, v in m.diagonals.items()}, {k: v / 2 for k, v in m.coherences.items()}).to_subspace()
    assert sub.single_photon_probabilities.sum() == pytest.approx(1.0)
    assert sub.d(0, 1) == pytest.approx(1 / 3)


def test_condition_warning():
    m = random_structured_state(np.random.default_rng(1), 3, single_mass=0.3)
    assert not any("two-photon" in w for w in model_condition_warnings(m))
    bad = with_two_photon_contamination(m, 0.2)
    assert any("two-photon" in w for w in model_condition_warnings(bad))
