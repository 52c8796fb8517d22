import numpy as np
import pytest

from conftest import make_tiny_snn_fixture
from sparsespike.network import Linear, NetworkSpec, Relu, preset_convnet, AnnModel
from sparsespike.snn import (
    SnnGradModel,
    SnnModel,
    SpikeTrace,
    SurrogateSpec,
    TRAINING_SURROGATE,
    default_ensemble_members,
    direct_encode,
    lif_step,
    snn_forward,
    surrogate_grad,
    tdbn_forward,
)
from sparsespike.tensor import Rng, Tape, Tensor, batchnorm, cross_entropy, no_grad

ALL_FAMILIES = [
    SurrogateSpec("piecewise_linear", gamma_w=1.0),
    SurrogateSpec("exponential", gamma_d=0.3, gamma_s=2.0),
    SurrogateSpec("rectangular", gamma_w=1.0),
    SurrogateSpec("ste"),
    SurrogateSpec("bptr"),
    SurrogateSpec("conversion_approx"),
]


# ---------------------------------------------------------------------------
# independent hand-unrolled oracle for the 2-neuron fixture


def oracle_forward_backward(w1, w2, x, y, vth, t_steps, spec):
    """Chain rule written out by hand for linear -> spike -> linear over T."""
    if spec.family == "conversion_approx":
        h = np.maximum(x @ w1, 0.0) / vth
        logits = (h @ w2) * t_steps
        p = _softmax(logits)
        dlog = p.copy()
        dlog[0, y[0]] -= 1.0
        dh = (dlog * t_steps) @ w2.T
        dpre = dh * ((x @ w1) > 0) / vth
        return {
            "loss": -np.log(p[0, y[0]]),
            "dx": dpre @ w1.T,
            "dw1": x.T @ dpre,
            "dw2": (h.T @ dlog) * t_steps,
        }
    current = x @ w1  # identical every timestep (direct coding)
    v = np.zeros_like(current)
    spikes, margins = [], []
    logits = np.zeros((1, w2.shape[1]), dtype=np.float64)
    for _ in range(t_steps):
        v_minus = v + current
        u = v_minus - vth
        o = (u >= 0).astype(np.float64)
        spikes.append(o)
        margins.append(u)
        v = v_minus * (1.0 - o)
        logits = logits + o @ w2
    p = _softmax(logits)
    loss = -np.log(p[0, y[0]])
    dlog = p.copy()
    dlog[0, y[0]] -= 1.0
    dw2 = np.zeros_like(w2, dtype=np.float64)
    d_current = np.zeros_like(current, dtype=np.float64)
    dvth = 0.0
    if spec.family == "bptr":
        m = current / vth
        g_loc = ((m > 0) & (m < 1)).astype(np.float64) / vth
        for t in range(t_steps):
            do = dlog @ w2.T
            dw2 += spikes[t].T @ dlog
            d_current += do * g_loc
            dvth += (do * (-m * g_loc)).sum()
    else:
        dv_next = np.zeros_like(current, dtype=np.float64)
        for t in reversed(range(t_steps)):
            do = dlog @ w2.T
            dw2 += spikes[t].T @ dlog
            dv_minus = dv_next * (1.0 - spikes[t])  # reset gate constant in backward
            du = do * spec.derivative(margins[t].astype(np.float32)).astype(np.float64)
            dv_minus = dv_minus + du
            d_current += dv_minus
            dv_next = dv_minus
            dvth += -du.sum()
    return {
        "loss": loss,
        "dx": d_current @ w1.T,
        "dw1": x.T @ d_current,
        "dw2": dw2,
        "dvth": dvth,
    }


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------


class TestDirectEncode:
    def test_single_step(self):
        x = Tensor(Rng(0).uniform(0, 1, (2, 3)))
        frames = direct_encode(x, 1)
        assert len(frames) == 1 and frames[0] is x

    def test_all_steps_identical_and_sum(self):
        x = Tensor(Rng(1).uniform(0, 1, (2, 3)))
        frames = direct_encode(x, 5)
        assert all(f is x for f in frames)
        total = sum(f.data for f in frames)
        np.testing.assert_allclose(total, 5 * x.data, rtol=1e-6)


class TestLifStep:
    def test_zero_input_zero_state(self):
        vth = Tensor(np.float32(1.0))
        o, v = lif_step(None, Tensor(np.float32(0.0)), vth, 1.0, TRAINING_SURROGATE)
        assert float(o.data) == 0.0 and float(v.data) == 0.0

    def test_hand_trace_two_steps(self):
        # tau=1, vth=1, inputs 0.6 then 0.6: no spike, then spike and hard reset
        vth = Tensor(np.float32(1.0))
        o1, v1 = lif_step(None, Tensor(np.float32(0.6)), vth, 1.0, TRAINING_SURROGATE)
        assert float(o1.data) == 0.0
        assert abs(float(v1.data) - 0.6) < 1e-7
        o2, v2 = lif_step(v1, Tensor(np.float32(0.6)), vth, 1.0, TRAINING_SURROGATE)
        assert float(o2.data) == 1.0
        assert float(v2.data) == 0.0  # reset is exact

    def test_spike_at_exact_threshold(self):
        vth = Tensor(np.float32(1.0))
        o, v = lif_step(None, Tensor(np.float32(1.0)), vth, 1.0, TRAINING_SURROGATE)
        assert float(o.data) == 1.0 and float(v.data) == 0.0

    def test_leak_factor(self):
        vth = Tensor(np.float32(10.0))
        o1, v1 = lif_step(None, Tensor(np.float32(2.0)), vth, 0.5, TRAINING_SURROGATE)
        o2, v2 = lif_step(v1, Tensor(np.float32(1.0)), vth, 0.5, TRAINING_SURROGATE)
        assert abs(float(v2.data) - (0.5 * 2.0 + 1.0)) < 1e-7


class TestSurrogates:
    def test_piecewise_peak(self):
        assert surrogate_grad(SurrogateSpec("piecewise_linear", gamma_w=1.0), 1.0, 1.0) == 1.0

    def test_exponential_at_zero(self):
        val = surrogate_grad(SurrogateSpec("exponential", gamma_d=0.3, gamma_s=2.0), 1.0, 1.0)
        assert abs(val - 0.3) < 1e-7

    def test_rectangular_window(self):
        spec = SurrogateSpec("rectangular", gamma_w=2.0)
        assert surrogate_grad(spec, 1.9, 1.0) == 0.5
        assert surrogate_grad(spec, 2.1, 1.0) == 0.0

    def test_ste_everywhere_one(self):
        vals = surrogate_grad(SurrogateSpec("ste"), np.linspace(-5, 5, 11), 0.0)
        np.testing.assert_array_equal(vals, np.ones(11))

    def test_even_around_threshold(self):
        # dyadic offsets are exact in float32, so |v - vth| matches bitwise
        for spec in ALL_FAMILIES[:3]:
            for d in (0.0625, 0.25, 0.875):
                plus = surrogate_grad(spec, 1.0 + d, 1.0)
                minus = surrogate_grad(spec, 1.0 - d, 1.0)
                assert plus == minus, spec.family

    def test_validation(self):
        with pytest.raises(ValueError):
            SurrogateSpec("piecewise_linear")
        with pytest.raises(ValueError):
            SurrogateSpec("exponential", gamma_d=0.3)
        with pytest.raises(ValueError):
            SurrogateSpec("lorentzian")

    def test_labels_unique_for_default_grid(self):
        labels = [m.label() for m in default_ensemble_members()]
        assert len(set(labels)) == len(labels)


class TestSnnForward:
    def test_t_zero_gives_zero_logits(self):
        model = make_tiny_snn_fixture()
        logits, _ = snn_forward(model, Tensor(np.ones((3, 2), dtype=np.float32)), 0)
        np.testing.assert_array_equal(logits.data, np.zeros((3, 2)))

    def test_huge_thresholds_silence_network(self):
        model = make_tiny_snn_fixture(vth=1e9)
        x = Tensor(Rng(2).uniform(0, 1, (4, 2)))
        logits, trace = snn_forward(model, x, 6, record_trace=True)
        np.testing.assert_array_equal(logits.data, np.zeros((4, 2)))
        assert trace.total_spikes() == 0

    def test_two_neuron_forward_matches_hand_unroll(self):
        model = make_tiny_snn_fixture(seed=3, vth=0.8)
        x = np.array([[0.4, 0.7]], dtype=np.float32)
        w1 = model.params["layer0.weight"].data
        w2 = model.params["layer2.weight"].data
        logits, trace = snn_forward(model, Tensor(x), 3, record_trace=True)
        current = x.astype(np.float64) @ w1
        v = np.zeros_like(current)
        expect = np.zeros((1, 2))
        spikes = []
        for _ in range(3):
            vm = v + current
            o = (vm - 0.8 >= 0).astype(np.float64)
            spikes.append(o)
            v = vm * (1 - o)
            expect = expect + o @ w2
        assert np.abs(logits.data - expect).max() < 1e-6
        np.testing.assert_array_equal(
            trace.spikes[0][:, 0, :], np.array(spikes, dtype=np.uint8)[:, 0, :]
        )

    def test_spikes_are_binary_and_deterministic(self):
        spec = preset_convnet((1, 16, 16), 4)
        ann = AnnModel.initialize(spec, Rng(4).spawn("init"))
        ths = {f"vth{j}": Tensor(np.float32(0.4)) for j in range(3)}
        model = SnnModel(spec, ann.params, ann.buffers, ths)
        x = Tensor(Rng(5).uniform(0, 1, (4, 1, 16, 16)))
        _, t1 = snn_forward(model, x, 6, train=True, record_trace=True)
        _, t2 = snn_forward(model, x, 6, train=True, record_trace=True)
        for a, b in zip(t1.spikes, t2.spikes):
            assert set(np.unique(a)) <= {0, 1}
            np.testing.assert_array_equal(a, b)

    def test_no_hidden_layers_degenerates_to_scaled_linear(self):
        # spiking net with only the output integrator: logits = T * (x @ W)
        spec = NetworkSpec([Linear(3, bias=False)], (4,), 3)
        params = {"layer0.weight": Tensor(Rng(6).normal((4, 3)))}
        model = SnnModel(spec, params, {}, {})
        x = Rng(7).uniform(0, 1, (5, 4))
        logits, _ = snn_forward(model, Tensor(x), 8)
        np.testing.assert_allclose(logits.data, 8.0 * (x @ params["layer0.weight"].data),
                                   rtol=1e-5)

    def test_final_layer_must_be_linear(self):
        spec = NetworkSpec([Linear(3, bias=False), Relu()], (4,), 3)
        with pytest.raises(ValueError):
            SnnModel(spec, {"layer0.weight": Tensor(np.zeros((4, 3)))}, {}, {"vth0": Tensor(1.0)})


class TestBptt:
    @pytest.mark.parametrize("spec", ALL_FAMILIES, ids=lambda s: s.family)
    def test_matches_hand_unrolled_oracle(self, spec):
        model = make_tiny_snn_fixture(seed=0, vth=0.9)
        w1 = model.params["layer0.weight"].data.copy()
        w2 = model.params["layer2.weight"].data.copy()
        x = np.array([[0.4, 0.7]], dtype=np.float32)
        y = np.array([1])
        xt = Tensor(x.copy(), requires_grad=True)
        with Tape() as tape:
            logits, _ = snn_forward(model, xt, 3, spec)
            loss = cross_entropy(logits, y)
            tape.backward(loss)
        ref = oracle_forward_backward(
            w1.astype(np.float64), w2.astype(np.float64), x.astype(np.float64), y, 0.9, 3, spec
        )
        assert abs(float(loss.data) - ref["loss"]) < 1e-6
        assert np.abs(xt.grad - ref["dx"]).max() < 1e-6
        assert np.abs(model.params["layer0.weight"].grad - ref["dw1"]).max() < 1e-6
        assert np.abs(model.params["layer2.weight"].grad - ref["dw2"]).max() < 1e-6
        if "dvth" in ref:
            assert abs(float(model.thresholds["vth0"].grad) - ref["dvth"]) < 1e-6

    def test_blocked_surrogate_blocks_hidden_gradients(self):
        # rectangular window so narrow that every |v - vth| falls outside it
        model = make_tiny_snn_fixture(seed=1, vth=0.9)
        x = Tensor(np.array([[0.2, 0.3]], dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            logits, _ = snn_forward(model, x, 3, SurrogateSpec("rectangular", gamma_w=1e-6))
            loss = cross_entropy(logits, np.array([0]))
            tape.backward(loss)
        w1_grad = model.params["layer0.weight"].grad
        assert w1_grad is None or not w1_grad.any()
        assert x.grad is None or not x.grad.any()

    def test_ste_equals_identity_derivative_clone(self):
        # clone network built in-test with a spike op whose derivative is 1
        from sparsespike.tensor import active_tape, add, matmul, mul_const, sub

        model = make_tiny_snn_fixture(seed=2, vth=0.7)
        x = np.array([[0.5, 0.6]], dtype=np.float32)
        y = np.array([0])
        xt = Tensor(x.copy(), requires_grad=True)
        with Tape() as tape:
            logits, _ = snn_forward(model, xt, 3, SurrogateSpec("ste"))
            loss = cross_entropy(logits, y)
            tape.backward(loss)
        engine = {
            "dw1": model.params["layer0.weight"].grad.copy(),
            "dw2": model.params["layer2.weight"].grad.copy(),
            "dx": xt.grad.copy(),
        }

        def unit_spike(u):
            out = Tensor((u.data >= 0).astype(np.float32))
            out.requires_grad = True
            active_tape().record((u,), (out,), lambda g: (g,))
            return out

        w1 = Tensor(model.params["layer0.weight"].data.copy(), requires_grad=True)
        w2 = Tensor(model.params["layer2.weight"].data.copy(), requires_grad=True)
        vth = Tensor(np.float32(0.7), requires_grad=True)
        xt2 = Tensor(x.copy(), requires_grad=True)
        with Tape() as tape:
            current = matmul(xt2, w1)
            v = None
            out = None
            for _ in range(3):
                v_minus = current if v is None else add(v, current)
                o = unit_spike(sub(v_minus, vth))
                v = mul_const(v_minus, 1.0 - o.data)
                term = matmul(o, w2)
                out = term if out is None else add(out, term)
            loss2 = cross_entropy(out, y)
            tape.backward(loss2)
        np.testing.assert_allclose(engine["dw1"], w1.grad, atol=1e-6)
        np.testing.assert_allclose(engine["dw2"], w2.grad, atol=1e-6)
        np.testing.assert_allclose(engine["dx"], xt2.grad, atol=1e-6)


class TestTdbn:
    def test_constant_input_yields_shift(self):
        phi = Tensor(np.array([2.0, 3.0], dtype=np.float32))
        omega = Tensor(np.array([0.5, -0.25], dtype=np.float32))
        frames = [Tensor(np.full((4, 2), 0.7, dtype=np.float32)) for _ in range(3)]
        outs = tdbn_forward(frames, phi, omega, np.zeros(2, np.float32), np.ones(2, np.float32),
                            train=True)
        for o in outs:
            np.testing.assert_allclose(o.data, np.tile(omega.data, (4, 1)), atol=1e-3)

    def test_pooled_moments_unit_variance(self):
        rng = Rng(8)
        phi = Tensor(np.ones(3, dtype=np.float32))
        omega = Tensor(np.zeros(3, dtype=np.float32))
        frames = [Tensor(rng.normal((16, 3)) * 2.0 + 1.0) for _ in range(4)]
        outs = tdbn_forward(frames, phi, omega, np.zeros(3, np.float32), np.ones(3, np.float32),
                            train=True)
        stacked = np.concatenate([o.data for o in outs], axis=0)
        assert np.abs(stacked.mean(axis=0)).max() < 1e-3
        assert np.abs(stacked.var(axis=0) - 1.0).max() < 1e-3

    def test_stats_match_concatenated_batch_oracle(self):
        rng = Rng(9)
        phi = Tensor(np.ones(2, dtype=np.float32))
        omega = Tensor(np.zeros(2, dtype=np.float32))
        frames = [Tensor(rng.normal((8, 2))), Tensor(rng.normal((8, 2)))]
        rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
        outs = tdbn_forward(frames, phi, omega, rm, rv, train=True)
        rm2, rv2 = np.zeros(2, np.float32), np.ones(2, np.float32)
        big = batchnorm(
            Tensor(np.concatenate([f.data for f in frames], axis=0)), phi, omega, rm2, rv2,
            train=True,
        )
        np.testing.assert_array_equal(np.concatenate([o.data for o in outs], axis=0), big.data)
        np.testing.assert_array_equal(rm, rm2)

    def test_eval_mode_uses_running_stats(self):
        phi = Tensor(np.ones(2, dtype=np.float32))
        omega = Tensor(np.zeros(2, dtype=np.float32))
        rm = np.array([1.0, -1.0], dtype=np.float32)
        rv = np.array([4.0, 0.25], dtype=np.float32)
        frames = [Tensor(np.zeros((3, 2), dtype=np.float32))]
        (out,) = tdbn_forward(frames, phi, omega, rm, rv, train=False)
        expected = (0.0 - rm) / np.sqrt(rv + 1e-5)
        np.testing.assert_allclose(out.data, np.tile(expected, (3, 1)), rtol=1e-5)


class TestSpikeTrace:
    def test_save_load_roundtrip(self, tmp_path):
        model = make_tiny_snn_fixture()
        x = Tensor(Rng(10).uniform(0, 1, (4, 2)))
        _, trace = snn_forward(model, x, 5, record_trace=True)
        path = tmp_path / "trace.npz"
        trace.save(path)
        again = SpikeTrace.load(path)
        assert again.stage_names == trace.stage_names
        assert again.t_steps == trace.t_steps and again.batch == trace.batch
        for a, b in zip(again.spikes, trace.spikes):
            np.testing.assert_array_equal(a, b)


class TestSnnGradModel:
    def test_with_surrogate_swaps_backward_only(self):
        model = make_tiny_snn_fixture(seed=4, vth=0.8)
        gm = SnnGradModel(model, t_steps=4)
        x = Rng(11).uniform(0, 1, (6, 2))
        y = np.zeros(6, dtype=np.int64)
        preds = gm.predict(x)
        for member in ALL_FAMILIES:
            gm2 = gm.with_surrogate(member)
            np.testing.assert_array_equal(gm2.predict(x), preds)  # forward unchanged
            g = gm2.input_grad(x, y)
            assert g.shape == x.shape and np.all(np.isfinite(g))

    def test_kl_loss_needs_reference(self):
        model = make_tiny_snn_fixture()
        with pytest.raises(ValueError):
            SnnGradModel(model, 4, loss="kl")
