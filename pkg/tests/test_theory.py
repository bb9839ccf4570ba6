import math

import numpy as np
import pytest

from mamba_xai.attention_view import materialize_alpha
from mamba_xai.ssm_core import scan_recurrent
from mamba_xai.theory import (MIXER_FAMILIES, CountChannel, ScalarHead, all_binary_sequences,
                              build_count_channel, causal_head_as_channel,
                              count_channel_exhaustive, count_in_row_oracle,
                              head_grid_min_violation, head_infeasibility_residual,
                              causal_head_channel_residual, mixer_probe, scalar_head_output)


def run_length_reference(bits):
    # walk back from each position while the bits stay 1
    out = []
    for i in range(len(bits)):
        n = 0
        while i - n >= 0 and bits[i - n] == 1:
            n += 1
        out.append(n)
    return out


@pytest.mark.parametrize("x,want", [((0, 1, 1), [0, 1, 2]), ((1, 0, 1), [1, 0, 1]),
                                    ((0, 0, 0, 0), [0, 0, 0, 0]), ((1,), [1]),
                                    ((1, 1, 0, 1, 1, 1), [1, 2, 0, 1, 2, 3])])
def test_count_oracle_examples(x, want):
    assert count_in_row_oracle(x) == want
    assert list(build_count_channel()(np.array(x))) == want


def test_count_oracle_rejects_non_binary():
    with pytest.raises(ValueError):
        count_in_row_oracle([0, 2, 1])


def test_binary_enumeration():
    seqs = all_binary_sequences(3)
    assert seqs.shape == (8, 3)
    assert len({tuple(s) for s in seqs}) == 8
    np.testing.assert_array_equal(seqs[5], [1, 0, 1])


@pytest.mark.parametrize("L", range(1, 9))
def test_oracle_matches_run_length_walk(L):
    for s in all_binary_sequences(L):
        assert count_in_row_oracle(s) == run_length_reference(list(s))


def test_count_channel_exhaustive():
    mismatches = count_channel_exhaustive(12)
    assert list(mismatches) == list(range(1, 13))
    assert all(v == 0 for v in mismatches.values())


def test_count_channel_system_view_agrees():
    ch = build_count_channel()
    x = np.array([1, 1, 0, 1, 1, 1, 0, 0, 1], dtype=float)
    sys = ch.system(x)
    np.testing.assert_array_equal(scan_recurrent(x[:, None], sys)[:, 0], ch(x))


def test_count_channel_without_reset_fails():
    # a constant transition of 1 never resets, so runs accumulate across zeros
    no_reset = CountChannel(s_a=0.0, a=1.0)
    assert list(no_reset(np.array([1, 0, 1]))) != count_in_row_oracle([1, 0, 1])


def test_scalar_head_examples():
    assert scalar_head_output(ScalarHead(1.3, -0.4, 0.0), (0, 1, 1), 2) == 0.0
    head = ScalarHead(1.0, 0.0, 3.0)  # exp(w_q w_k) = 1
    assert scalar_head_output(head, (0, 1, 1), 2) == pytest.approx(2.0, abs=1e-15)
    assert scalar_head_output(head, (1, 0, 1), 2) == pytest.approx(2.0, abs=1e-15)


def test_scalar_head_softmax_matches_explicit_formula():
    head = ScalarHead(0.7, 1.9, -1.2)
    x = (0, 1, 1)
    e = math.exp(0.7 * 1.9)
    want = -1.2 * 2 * e / (1 + 2 * e)
    assert scalar_head_output(head, x, 2) == pytest.approx(want, rel=1e-14)
    assert scalar_head_output(head, x, 2, softmax=False) == pytest.approx(-1.2 * 0.7 * 1.9 * 2,
                                                                          rel=1e-14)


def test_infeasibility_residual_is_one():
    assert abs(head_infeasibility_residual() - 1.0) <= 1e-12


@pytest.mark.parametrize("softmax", [True, False])
def test_grid_search_cannot_fit(softmax):
    best, qk, v = head_grid_min_violation(softmax=softmax)
    assert best >= 0.2
    assert -10 <= qk <= 10 and -10 <= v <= 10


def test_grid_search_matches_head_evaluation():
    # spot-check the vectorized grid against the scalar head at its reported optimum
    best, qk, v = head_grid_min_violation(softmax=True, step=0.5)
    head = ScalarHead(1.0, qk, v)
    cases = (((0, 1, 1), 2.0), ((0, 0, 1), 1.0), ((1, 0, 1), 1.0))
    worst = max(abs(scalar_head_output(head, x, 2) - t) for x, t in cases)
    assert worst == pytest.approx(best, abs=1e-12)


@pytest.mark.parametrize("L", [1, 2, 5, 16])
def test_unit_transition_channel_is_causal_attention(L, rng):
    q, k = rng.normal(size=L), rng.normal(size=L)
    alpha = materialize_alpha(causal_head_as_channel(q, k), 0).alpha
    want = np.array([[q[i] * k[j] if j <= i else 0.0 for j in range(L)] for i in range(L)])
    assert np.max(np.abs(alpha - want)) <= 1e-12
    assert causal_head_channel_residual(rng, L) <= 1e-12


def test_mixer_families():
    assert MIXER_FAMILIES == ("s4_fixed", "gated_diagonal", "selective")
    with pytest.raises(ValueError):
        mixer_probe("attention")


@pytest.mark.parametrize("seed", range(5))
def test_mixer_probe_expectations(seed):
    fixed = mixer_probe("s4_fixed", seed)
    assert not fixed.operator_changes and fixed.offdiag_max is None
    gated = mixer_probe("gated_diagonal", seed)
    assert gated.operator_changes and gated.offdiag_max < 1e-12 and gated.diag_max > 0
    assert not gated.data_controlled_nondiagonal
    sel = mixer_probe("selective", seed)
    assert sel.operator_changes and sel.offdiag_max > 1e-6
    assert sel.data_controlled_nondiagonal
