import numpy as np
import pytest

from skytrack import ssm
from skytrack.ssm import (
    HORIZONTAL,
    VERTICAL,
    SsmParams,
    directional_ssm,
    motion_mamba_block,
    selective_scan,
    ssm_scan,
)
from skytrack.tensor import Tensor, grad_check, reduce_mean, mul


def naive_scan(xs, dts, decay, in_gain, out_gain, skip):
    """Literal per-step, per-channel recurrence; the reference for everything."""
    seq_len, width = xs.shape
    ys = np.zeros_like(xs)
    for c in range(width):
        h = np.zeros(decay.shape[1])
        for t in range(seq_len):
            a_hat = np.exp(decay[c] * dts[t, c])
            h = a_hat * h + in_gain[c] * dts[t, c] * xs[t, c]
            ys[t, c] = out_gain[c] @ h + skip[c] * xs[t, c]
    return ys


def scan_tokens(tokens, dts, decay, in_gain, out_gain, skip):
    """Run the production primitive on one (L, d) sequence."""
    seq_len, width = tokens.shape
    col = Tensor(tokens.T.reshape(width, seq_len, 1))
    dt_col = Tensor(dts.T.reshape(width, seq_len, 1))
    out = ssm_scan(col, dt_col, Tensor(decay), Tensor(in_gain), Tensor(out_gain),
                   Tensor(skip), VERTICAL)
    return out.data.reshape(width, seq_len).T


def random_params(rng, width, state):
    return (
        -np.abs(rng.normal(size=(width, state))) - 0.05,
        rng.normal(size=(width, state)),
        rng.normal(size=(width, state)),
        rng.normal(size=(width,)),
    )


def test_scan_zero_input_gives_zero_output():
    rng = np.random.default_rng(0)
    decay, in_gain, out_gain, skip = random_params(rng, 3, 4)
    dts = rng.uniform(0.1, 1.0, size=(6, 3))
    ys = scan_tokens(np.zeros((6, 3)), dts, decay, in_gain, out_gain, skip)
    assert np.all(ys == 0.0)


def test_scan_scalar_one_step_algebra():
    # d=N=1, decay 0 (unit carry), unit gains, no skip, dt=0.5, x=[2] -> 1.0
    ys = scan_tokens(np.array([[2.0]]), np.array([[0.5]]), np.zeros((1, 1)),
                     np.ones((1, 1)), np.ones((1, 1)), np.zeros(1))
    assert ys[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_scan_matches_naive_recurrence():
    rng = np.random.default_rng(1)
    for _ in range(10):
        seq_len = int(rng.integers(1, 17))
        width = int(rng.integers(1, 5))
        state = int(rng.integers(1, 9))
        decay, in_gain, out_gain, skip = random_params(rng, width, state)
        xs = rng.normal(size=(seq_len, width))
        dts = rng.uniform(0.05, 1.5, size=(seq_len, width))
        got = scan_tokens(xs, dts, decay, in_gain, out_gain, skip)
        want = naive_scan(xs, dts, decay, in_gain, out_gain, skip)
        assert np.allclose(got, want, atol=1e-10)


def test_selective_scan_rejects_bad_inputs():
    params = SsmParams.create(3, 4, "p", seed=0)
    with pytest.raises(ValueError, match="width"):
        selective_scan(Tensor(np.zeros((5, 2))), params)
    with pytest.raises(ValueError, match="empty|width|shape"):
        selective_scan(Tensor(np.zeros((0, 3))), params)


def test_selective_scan_all_zero():
    params = SsmParams.create(3, 4, "p", seed=0)
    out = selective_scan(Tensor(np.zeros((7, 3))), params)
    assert np.all(out.data == 0.0)


def test_single_pixel_map_equals_length_one_scan():
    rng = np.random.default_rng(2)
    params = SsmParams.create(4, 3, "q", seed=1)
    token = rng.normal(size=(1, 4))
    seq_out = selective_scan(Tensor(token), params).data
    map_out = directional_ssm(Tensor(token.T.reshape(4, 1, 1)), VERTICAL, params).data
    assert np.allclose(seq_out, map_out.reshape(4, 1).T, atol=1e-12)


def test_vertical_scans_columns_independently():
    rng = np.random.default_rng(3)
    params = SsmParams.create(3, 4, "r", seed=2)
    h, w = 6, 5
    column_values = rng.normal(size=(w, 3))
    feature = np.repeat(column_values.T[:, None, :], h, axis=1)  # constant along columns
    out = directional_ssm(Tensor(feature), VERTICAL, params).data
    for j in range(w):
        token = column_values[j][None, :].repeat(h, axis=0)
        expected = selective_scan(Tensor(token), params).data
        assert np.allclose(out[:, :, j].T, expected, atol=1e-12)


def test_vertical_equals_transposed_horizontal():
    rng = np.random.default_rng(4)
    params = SsmParams.create(3, 5, "s", seed=3)
    feature = rng.normal(size=(3, 6, 4))
    vert = directional_ssm(Tensor(feature), VERTICAL, params).data
    transposed = np.transpose(feature, (0, 2, 1))
    horiz = directional_ssm(Tensor(transposed), HORIZONTAL, params).data
    assert np.allclose(vert, np.transpose(horiz, (0, 2, 1)), atol=1e-12)


def test_block_zero_input_zero_output():
    vp = SsmParams.create(3, 4, "v", seed=4)
    hp = SsmParams.create(3, 4, "h", seed=5)
    out = motion_mamba_block(Tensor(np.zeros((3, 4, 5))), vp, hp)
    assert np.all(out.data == 0.0)


def test_block_pure_shortcut_when_branches_zeroed():
    rng = np.random.default_rng(5)
    feature = rng.normal(size=(2, 4, 4))
    vp = SsmParams.create(2, 3, "v0", seed=6)
    hp = SsmParams.create(2, 3, "h0", seed=7)
    for p in (vp, hp):
        p.output_gain.data[:] = 0.0
        p.skip_gain.data[:] = 0.0
    out = motion_mamba_block(Tensor(feature), vp, hp)
    assert np.allclose(out.data, feature, atol=1e-15)


def test_block_is_sum_of_branches_plus_input():
    rng = np.random.default_rng(6)
    feature = rng.normal(size=(4, 8, 8))
    vp = SsmParams.create(4, 4, "v1", seed=8)
    hp = SsmParams.create(4, 4, "h1", seed=9)
    block = motion_mamba_block(Tensor(feature), vp, hp).data
    v = directional_ssm(Tensor(feature), VERTICAL, vp).data
    h = directional_ssm(Tensor(feature), HORIZONTAL, hp).data
    assert np.allclose(block, v + h + feature, atol=1e-12)


def test_state_decays_after_input_stops():
    rng = np.random.default_rng(7)
    width, state, steps, cut = 2, 3, 20, 6
    decay = -np.abs(rng.normal(size=(width, state))) - 0.05
    in_gain = rng.normal(size=(width, state))
    xs = np.zeros((steps, 1, width))
    xs[:cut] = rng.normal(size=(cut, 1, width))
    dts = rng.uniform(0.1, 1.0, size=(steps, 1, width))
    _, states, _ = ssm._scan_forward_core(xs, dts, decay, in_gain,
                                          rng.normal(size=(width, state)),
                                          rng.normal(size=(width,)))
    magnitudes = np.abs(states[:, 0])
    for t in range(cut, steps - 1):
        assert np.all(magnitudes[t + 1] <= magnitudes[t] + 1e-15)


def test_causality_and_column_independence():
    rng = np.random.default_rng(8)
    params = SsmParams.create(3, 4, "c", seed=10)
    feature = rng.normal(size=(3, 6, 5))
    base = directional_ssm(Tensor(feature), VERTICAL, params).data
    poked = feature.copy()
    poked[:, 4, 2] += 1.0  # row 4 of column 2
    out = directional_ssm(Tensor(poked), VERTICAL, params).data
    # earlier rows of the same column unchanged
    assert np.allclose(out[:, :4, 2], base[:, :4, 2], atol=1e-15)
    # all other columns unchanged
    mask = np.ones(5, dtype=bool)
    mask[2] = False
    assert np.allclose(out[:, :, mask], base[:, :, mask], atol=1e-15)


def test_scan_rejects_direction_and_shape_errors():
    params = SsmParams.create(2, 2, "e", seed=11)
    with pytest.raises(ValueError, match="direction"):
        directional_ssm(Tensor(np.zeros((2, 3, 3))), "diagonal", params)
    with pytest.raises(ValueError, match="width"):
        directional_ssm(Tensor(np.zeros((3, 3, 3))), VERTICAL, params)


def test_block_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    vp = SsmParams.create(3, 3, "gv", seed=12)
    hp = SsmParams.create(3, 3, "gh", seed=13)
    point = Tensor(rng.normal(size=(3, 5, 4)), requires_grad=True)
    report = grad_check(
        lambda t: reduce_mean(mul(motion_mamba_block(t, vp, hp),
                                  motion_mamba_block(t, vp, hp))),
        point, step=1e-5, tol=1e-4)
    assert report.passed, report


def test_scan_parameter_gradients():
    rng = np.random.default_rng(10)
    feature = np.ascontiguousarray(rng.normal(size=(2, 4, 3)))
    params = SsmParams.create(2, 3, "gp", seed=14)
    for name in ("log_decay", "input_gain", "output_gain", "skip_gain",
                 "dt_hidden_w", "dt_hidden_b", "dt_out_w", "dt_out_b"):
        original = getattr(params, name)
        point = Tensor(original.data.copy(), requires_grad=True)

        def fn(t, name=name, original=original):
            setattr(params, name, t)
            try:
                out = directional_ssm(Tensor(feature), VERTICAL, params)
                return reduce_mean(mul(out, out))
            finally:
                setattr(params, name, original)

        report = grad_check(fn, point, step=1e-5, tol=1e-4)
        assert report.passed, f"{name}: {report}"
