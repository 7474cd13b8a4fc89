import numpy as np
import pytest

from shapediff.denoise import (
    AdamState,
    CheckpointError,
    ConvDenoiser,
    DimMismatch,
    GaussianOracleDenoiser,
    NonFiniteOutput,
    adam_step,
    assemble_input,
    conv3d,
    load_checkpoint,
    loss_and_grads,
    predict,
    save_checkpoint,
    train,
    write_loss_csv,
)
from shapediff.diffuse import forward_to_t
from shapediff.schedule import linear_schedule
from shapediff.voxgrid import Prior2D, synth_shape

SCH = linear_schedule(1000)
T2 = linear_schedule(2, 0.1, 0.2)


def _prior(h, w, rng=None):
    rng = np.random.default_rng(rng)
    m = (rng.random((h, w)) < 0.5).astype(float)
    return Prior2D(m * rng.random((h, w)), m)


def test_assemble_broadcast_and_timestep():
    pr = Prior2D(np.full((5, 6), 0.25), np.ones((5, 6)))
    inp = assemble_input(np.zeros((4, 5, 6)), pr, 2, T2)
    assert inp.shape == (4, 4, 5, 6)
    assert np.array_equal(inp[1], np.ones((4, 5, 6)))
    assert np.array_equal(inp[2], np.full((4, 5, 6), 0.25))
    assert np.allclose(inp[3], 0.72) and np.ptp(inp[3]) == 0


def test_assemble_broadcasts_plane_at_every_depth(rng):
    pr = _prior(7, 7, 1)
    inp = assemble_input(rng.standard_normal((3, 7, 7)), pr, 500, SCH)
    for d in range(3):
        assert np.array_equal(inp[1, d], pr.mask)
        assert np.array_equal(inp[2, d], pr.fluorescence)


def test_assemble_dim_mismatch():
    with pytest.raises(DimMismatch):
        assemble_input(np.zeros((16, 16, 16)), _prior(32, 32), 1, SCH)


def test_assemble_batched(rng):
    pr = _prior(4, 4, 2)
    x = rng.standard_normal((3, 4, 4, 4))
    inp = assemble_input(x, pr, 10, SCH)
    assert inp.shape == (3, 4, 4, 4, 4)
    assert np.array_equal(inp[1], assemble_input(x[1], pr, 10, SCH))


def test_zero_weight_net_outputs_bias(rng):
    net = ConvDenoiser.init(zero=True)
    inp = rng.standard_normal((4, 5, 5, 5))
    assert np.array_equal(predict(net, inp), np.zeros((5, 5, 5)))
    net.biases[-1] = np.array([0.3])
    assert np.allclose(predict(net, inp), 0.3)


def test_output_dims_preserved(rng):
    net = ConvDenoiser.init(0)
    for dims in [(3, 3, 3), (4, 7, 5), (8, 8, 8)]:
        assert predict(net, rng.standard_normal((4,) + dims)).shape == dims


def test_conv_matches_direct_sum(rng):
    x = rng.standard_normal((1, 4, 5, 3, 2))  # channels-last
    w = rng.standard_normal((2, 2, 3, 3, 3))
    b = rng.standard_normal(2)
    out = conv3d(x, w, b)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)), mode="reflect")
    ref = np.zeros_like(out)
    for d, h, ww, o in np.ndindex(4, 5, 3, 2):
        ref[0, d, h, ww, o] = b[o] + np.sum(xp[0, d:d + 3, h:h + 3, ww:ww + 3, :] * np.transpose(w[o], (1, 2, 3, 0)))
    assert np.allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_predict_is_pure(rng):
    inp = rng.standard_normal((4, 4, 4, 4))
    keep = inp.copy()
    predict(ConvDenoiser.init(1), inp)
    predict(GaussianOracleDenoiser(0.2, 0.5, SCH), inp, 30)
    assert np.array_equal(inp, keep)


def test_predict_non_finite():
    net = ConvDenoiser.init(zero=True)
    net.biases[-1] = np.array([np.nan])
    with pytest.raises(NonFiniteOutput):
        predict(net, np.zeros((4, 3, 3, 3)))


def test_oracle_formula_cases(rng):
    m, s, t = 0.3, 0.4, 123
    abar = SCH.alpha_bar[t - 1]
    orc = GaussianOracleDenoiser(m, s, SCH)
    assert np.allclose(orc.predict_eps(np.full((2, 2, 2), np.sqrt(abar) * m), t), 0.0)
    eps = rng.standard_normal((3, 3, 3))
    x_t = np.sqrt(abar) * m + np.sqrt(1 - abar) * eps
    assert np.allclose(GaussianOracleDenoiser(m, 0.0, SCH).predict_eps(x_t, t), eps, atol=1e-12)


def test_oracle_is_conditional_expectation():
    m, s, t = 0.3, 0.4, 250
    r = np.random.default_rng(17)
    n = 100_000
    x0 = m + s * r.standard_normal(n)
    abar = SCH.alpha_bar[t - 1]
    eps = r.standard_normal(n)
    x_t = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * eps
    pred = GaussianOracleDenoiser(m, s, SCH).predict_eps(x_t, t)
    slope, intercept = np.polyfit(pred, eps, 1)
    assert abs(slope - 1) < 0.02 and abs(intercept) < 0.02


def test_loss_zero_at_exact_prediction(rng):
    net = ConvDenoiser.init(zero=True)
    net.biases[-1] = np.array([0.7])
    loss, grads = loss_and_grads(net, rng.standard_normal((4, 4, 4, 4)), np.full((4, 4, 4), 0.7))
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_loss_quadratic_in_target(rng):
    net = ConvDenoiser.init(zero=True)
    inp = rng.standard_normal((4, 4, 4, 4))
    eps = rng.standard_normal((4, 4, 4))
    assert loss_and_grads(net, inp, 2 * eps)[0] == pytest.approx(4 * loss_and_grads(net, inp, eps)[0], rel=1e-12)


def test_loss_shape_mismatch(rng):
    with pytest.raises(DimMismatch):
        loss_and_grads(ConvDenoiser.init(0), rng.standard_normal((4, 4, 4, 4)), np.zeros((4, 4, 5)))


TINY = ((3, 4), (3, 3), (1, 3))


def _lattice_net(seed):
    """Weights on a 1/8 lattice, integer inputs, biases offset by 1/16 and 1/256: every ReLU
    pre-activation sits well clear of zero, so +-1e-4 perturbations never cross a kink and
    central differences are exact up to rounding."""
    r = np.random.default_rng(seed)
    ws = [r.integers(-1, 2, (o, c, 3, 3, 3)) / 8 for o, c in TINY]
    bs = [r.integers(-2, 3, o) / 8 + off for (o, c), off in zip(TINY, (1 / 16, 1 / 256, 0.0))]
    x = r.integers(-1, 2, (1, 4, 6, 6, 6)).astype(float)
    eps = r.integers(-2, 3, (1, 6, 6, 6)).astype(float)
    return ConvDenoiser(ws, bs), x, eps


def _patterns(net, x):
    _, acts = net.forward(x, keep=True)
    return [a > 0 for a in acts[1:-1]]


@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_check_all_parameters(seed):
    net, x, eps = _lattice_net(seed)
    base = _patterns(net, x)
    assert all(0.2 < p.mean() < 0.8 for p in base)  # both ReLU branches exercised
    _, grads = loss_and_grads(net, x, eps)
    params = net.params()
    h = 1e-4
    for i, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            vals = []
            for sgn in (1, -1):
                q = [a.copy() for a in params]
                q[i][idx] += sgn * h
                pert = ConvDenoiser(q[0::2], q[1::2])
                assert all(np.array_equal(a, b) for a, b in zip(_patterns(pert, x), base))
                vals.append(loss_and_grads(pert, x, eps)[0])
            num = (vals[0] - vals[1]) / (2 * h)
            ana = grads[i][idx]
            assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num)) + 1e-10, (i, idx, ana, num)


def test_gradient_check_full_size_random_net():
    # generic float weights: a smaller step keeps the differences clear of ReLU kinks
    r = np.random.default_rng(3)
    net = ConvDenoiser.init(r)
    for b in net.biases:
        b += 0.05 * r.standard_normal(b.shape)
    x = r.standard_normal((1, 4, 6, 6, 6))
    eps = r.standard_normal((1, 6, 6, 6))
    _, grads = loss_and_grads(net, x, eps)
    params = net.params()
    h = 1e-6
    for _ in range(200):
        i = int(r.integers(len(params)))
        idx = tuple(int(r.integers(n)) for n in params[i].shape)
        vals = []
        for sgn in (1, -1):
            q = [a.copy() for a in params]
            q[i][idx] += sgn * h
            vals.append(loss_and_grads(ConvDenoiser(q[0::2], q[1::2]), x, eps)[0])
        num = (vals[0] - vals[1]) / (2 * h)
        ana = grads[i][idx]
        assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num)) + 1e-9


def test_float32_compute_close_to_float64(rng):
    net = ConvDenoiser.init(4)
    inp = rng.standard_normal((2, 4, 6, 6, 6))
    eps = rng.standard_normal((2, 6, 6, 6))
    l64, g64 = loss_and_grads(net, inp, eps)
    net.dtype = np.float32
    l32, g32 = loss_and_grads(net, inp, eps)
    assert l32 == pytest.approx(l64, rel=1e-5)
    for a, b in zip(g32, g64):
        assert np.allclose(a, b, rtol=1e-3, atol=1e-6)


def test_adam_zero_grads_fixed_point(rng):
    p = [rng.standard_normal((3, 2)), rng.standard_normal(4)]
    st = AdamState()
    out = adam_step(st, p, [np.zeros((3, 2)), np.zeros(4)])
    assert all(np.array_equal(a, b) for a, b in zip(out, p))
    assert st.step == 1


def test_adam_first_step_closed_form():
    st = AdamState()
    for g in (3.0, -0.02, 1e-3):
        st = AdamState()
        (w,) = adam_step(st, [np.array([1.0])], [np.array([g])])
        step = 1.0 - w[0]
        assert step == pytest.approx(1e-4 * g / (abs(g) + 1e-8), rel=1e-10)
    assert (st.lr, st.beta1, st.beta2, st.eps, st.weight_decay) == (1e-4, 0.9, 0.999, 1e-8, 0.0)


def test_adam_step_counter_and_shapes(rng):
    st = AdamState()
    p = [rng.standard_normal((2, 2))]
    for k in range(1, 6):
        p = adam_step(st, p, [rng.standard_normal((2, 2))])
        assert st.step == k and st.m[0].shape == (2, 2) and st.v[0].shape == (2, 2)
    with pytest.raises(DimMismatch):
        adam_step(st, p, [np.zeros(3)])


def test_adam_converges_on_quadratic(rng):
    target = rng.standard_normal(5) * 0.003
    w = np.zeros(5)
    st = AdamState(lr=1e-4)
    for _ in range(200):
        (w,) = adam_step(st, [w], [2 * (w - target)])
    assert np.linalg.norm(w - target) < 10 * st.lr


def _balls(n, size=16):
    return [synth_shape("ball", size, s) for s in range(n)]


def test_train_zero_epochs_identity():
    net = ConvDenoiser.init(0)
    out, curve = train(net, _balls(2), SCH, 0, np.random.default_rng(0))
    assert curve == []
    assert all(np.array_equal(a, b) for a, b in zip(out.params(), net.params()))


def test_train_deterministic():
    data = _balls(3)
    runs = []
    for _ in range(2):
        net = ConvDenoiser.init(5, dtype=np.float32)
        model, curve = train(net, data, SCH, 2, np.random.default_rng(12))
        runs.append((model, [(r.step, r.t, r.loss) for r in curve]))
    assert runs[0][1] == runs[1][1]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][0].params(), runs[1][0].params()))
    assert all(np.all(np.isfinite(p)) for p in runs[0][0].params())


@pytest.mark.slow
def test_train_reduces_loss():
    net = ConvDenoiser.init(0, dtype=np.float32)
    _, curve = train(net, _balls(20), SCH, 30, np.random.default_rng(0), lr=1e-4)
    loss = np.array([r.loss for r in curve])
    assert len(loss) == 600
    # pilot (seed 0): first-100 mean 1.03, last-100 mean 0.31
    assert loss[-100:].mean() <= 0.7 * loss[:100].mean()


def test_loss_csv(tmp_path):
    _, curve = train(ConvDenoiser.init(0), _balls(2), SCH, 1, np.random.default_rng(0))
    write_loss_csv(curve, tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "step,t,loss" and len(lines) == 3
    assert float(lines[1].split(",")[2]) == curve[0].loss


def test_checkpoint_roundtrip(tmp_path):
    net = ConvDenoiser.init(9)
    save_checkpoint(net, tmp_path / "m.dnz")
    data = (tmp_path / "m.dnz").read_bytes()
    assert data[:4] == b"DNZ1"
    back = load_checkpoint(tmp_path / "m.dnz")
    for a, b in zip(back.params(), net.params()):
        assert np.array_equal(a, b.astype(np.float32).astype(np.float64))
    (tmp_path / "bad.dnz").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.dnz")
    (tmp_path / "long.dnz").write_bytes(data + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "long.dnz")


def test_oracle_on_forward_pairs_recovers_noise_when_degenerate(rng):
    x0 = np.full((3, 3, 3), 0.3)
    p = forward_to_t(x0, 40, SCH, rng)
    inp = assemble_input(p.x_t, _prior(3, 3), 40, SCH)
    assert np.allclose(GaussianOracleDenoiser(0.3, 0.0, SCH)(inp, 40), p.epsilon, atol=1e-10)
