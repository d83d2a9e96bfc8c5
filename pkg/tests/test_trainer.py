import math

import numpy as np
import pytest

from sttd.autodiff import Tape, Tensor, finite_difference
from sttd.data import DemandTensor, ODGraph, SyntheticSpec, build_adjacency, make_windows, split_chronological, synth_generate
from sttd.encoder import EncoderConfig, init_parameters
from sttd.errors import NonFinite
from sttd.trainer import (
    TrainConfig,
    TrainedModel,
    baseline_ha,
    family_loglik,
    forward,
    loss_total,
    predict,
    predict_windows,
    train,
    tweedie_exact_loglik,
)
from sttd.tweedie import EPS, Family, TweedieParams, log_density_exact, log_density_surrogate


def unit_out(n=1):
    return {k: Tensor(np.full((n, 1), v)) for k, v in (("mu", 1.0), ("phi", 1.0), ("rho", 1.5))}


class TestLoss:
    def test_zero_target(self):
        assert loss_total(unit_out(), np.zeros((1, 1))).value == pytest.approx(2.0)

    def test_positive_target(self):
        assert loss_total(unit_out(), np.ones((1, 1))).value == pytest.approx(8.693147, abs=1e-6)

    def test_l2_term(self):
        leaves = {"theta": Tensor(2.0)}
        assert loss_total(unit_out(), np.zeros((1, 1)), leaves, l2_weight=1.0).value == pytest.approx(6.0)

    def test_matches_surrogate_elementwise(self):
        rng = np.random.default_rng(0)
        mu, phi, rho = rng.uniform(0.2, 4, 6), rng.uniform(0.3, 3, 6), rng.uniform(1.1, 1.9, 6)
        x = np.array([0.0, 0.5, 1.0, 2.0, 5.0, 10.0])
        out = {"mu": Tensor(mu), "phi": Tensor(phi), "rho": Tensor(rho)}
        ll = family_loglik(x, out, Family.TWEEDIE).value
        for i in range(6):
            assert ll[i] == pytest.approx(log_density_surrogate(x[i], TweedieParams(mu[i], phi[i], rho[i])), abs=1e-9)

    def test_exact_objective_matches_series(self):
        rng = np.random.default_rng(1)
        mu, phi, rho = rng.uniform(0.2, 4, 6), rng.uniform(0.3, 3, 6), rng.uniform(1.1, 1.9, 6)
        x = np.array([0.0, 0.5, 1.0, 2.0, 5.0, 10.0])
        ll = tweedie_exact_loglik(x, Tensor(mu), Tensor(phi), Tensor(rho)).value
        for i in range(6):
            assert ll[i] == pytest.approx(log_density_exact(x[i], TweedieParams(mu[i], phi[i], rho[i])), abs=1e-8)

    def test_non_finite_reports_index(self):
        out = {"mu": Tensor(np.ones((2, 1))), "phi": Tensor(np.array([[1.0], [np.nan]])), "rho": Tensor(np.full((2, 1), 1.5))}
        with pytest.raises(NonFinite, match=r"\(1, 0\)"):
            loss_total(out, np.ones((2, 1)))

    @pytest.mark.parametrize("family", [Family.GAUSSIAN, Family.POISSON, Family.GAMMA, Family.INVGAUSS])
    def test_fixed_families_match_scipy(self, family):
        from scipy import stats

        x = np.array([0.0, 1.0, 3.0])
        mu, phi = np.array([0.5, 1.5, 2.0]), np.array([0.7, 1.2, 0.4])
        out = {"mu": Tensor(mu), "phi": Tensor(phi)}
        ll = family_loglik(x, out, family).value
        xf = np.where(x > 0, x, 1e-3)
        ref = {
            Family.GAUSSIAN: stats.norm.logpdf(x, mu, np.sqrt(phi)),
            Family.POISSON: stats.poisson.logpmf(x, mu),
            Family.GAMMA: stats.gamma.logpdf(xf, 1 / phi, scale=phi * mu),
            Family.INVGAUSS: stats.invgauss.logpdf(xf, mu * phi, scale=1 / phi),
        }[family]
        assert np.allclose(ll, ref)


def small_problem(seed=0, nodes=(1, 5), T=230):
    spec = SyntheticSpec(*nodes, T, mu=np.linspace(0.5, 3, nodes[0] * nodes[1]), seed=seed)
    tensor, _ = synth_generate(spec)
    graph = build_adjacency(tensor.pair_index)
    return tensor, graph


def test_loss_total_gradient_small_model():
    rng = np.random.default_rng(0)
    cfg = EncoderConfig(hidden_units=6, embed_dim=5)
    store = init_parameters(cfg, seed=1)
    graph = ODGraph(rng.uniform(size=(4, 4)))
    x = rng.poisson(1.5, (4, 8)).astype(float)
    y = np.array([[0.0], [1.0], [3.0], [2.0]])

    def value(s):
        leaves = {k: Tensor(v) for k, v in s.params.items()}
        return float(loss_total(forward(leaves, x, graph, cfg, Family.TWEEDIE), y, leaves, 1e-3).value)

    leaves = store.bind()
    with Tape() as tape:
        loss = loss_total(forward(leaves, x, graph, cfg, Family.TWEEDIE), y, leaves, 1e-3)
    tape.backward(loss)
    fd = finite_difference(value, store, 1e-5)
    for name, g in store.grads.items():
        assert np.abs(g - fd[name]).max() <= 1e-4 * np.abs(fd[name]).max()


class TestTrain:
    def test_overfit_smoke(self):
        tensor, graph = small_problem()
        # 200 training windows plus validation
        tr = tensor.slice_time(0, 208)
        va = tensor.slice_time(208, 230)
        # dropout off: with it the per-epoch mean is too noisy to decrease strictly
        cfg = EncoderConfig(hidden_units=8, embed_dim=8, dropout=0.0)
        model = train(TrainConfig(max_epochs=10, patience=10), tr, va, graph, cfg)
        losses = [h[1] for h in model.history]
        assert len(losses) == 10
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_early_stopping_with_frozen_weights(self):
        tensor, graph = small_problem(T=120)
        tr, va, _ = split_chronological(tensor)
        model = train(TrainConfig(learning_rate=0.0, patience=3, max_epochs=50, l2_weight=0.0), tr, va, graph,
                      EncoderConfig(hidden_units=4, embed_dim=4))
        assert len(model.history) == 4 and model.best_epoch == 1

    def test_deterministic(self):
        tensor, graph = small_problem(T=120)
        tr, va, _ = split_chronological(tensor)
        cfg = EncoderConfig(hidden_units=4, embed_dim=4)
        a = train(TrainConfig(max_epochs=3), tr, va, graph, cfg)
        b = train(TrainConfig(max_epochs=3), tr, va, graph, cfg)
        assert a.history == b.history
        for n in a.store.params:
            assert np.array_equal(a.store.params[n], b.store.params[n])

    def test_save_load(self, tmp_path):
        tensor, graph = small_problem(T=120)
        tr, va, te = split_chronological(tensor)
        model = train(TrainConfig(max_epochs=2, shuffle=True), tr, va, graph, EncoderConfig(hidden_units=4, embed_dim=4))
        model.save(tmp_path / "m")
        back = TrainedModel.load(tmp_path / "m")
        assert back.history == model.history and back.train_config == model.train_config
        w = make_windows(te, 8, 1)
        assert np.array_equal(predict(back, w.inputs[0], graph).mu, predict(model, w.inputs[0], graph).mu)
        assert (tmp_path / "m" / "history.csv").read_text().startswith("epoch,train_loss,val_loss\n")

    def test_predict_contract(self):
        tensor, graph = small_problem(T=120)
        tr, va, te = split_chronological(tensor)
        cfg = EncoderConfig(hidden_units=4, embed_dim=4, horizon=2, input_len=8)
        model = train(TrainConfig(max_epochs=1), tr, va, graph, cfg)
        w = make_windows(te, 8, 2)
        f = predict(model, w.inputs[0], graph)
        assert f.mu.shape == f.phi.shape == f.rho.shape == (5, 2)
        assert np.array_equal(f.mu, predict(model, w.inputs[0], graph).mu)
        assert np.all(f.mu >= 0) and np.all(f.phi >= EPS) and np.all((f.rho > 1) & (f.rho < 2))
        batch = predict_windows(model, w, graph)
        assert batch.mu.shape == (len(w), 5, 2)
        assert np.allclose(batch.mu[0], f.mu)

    @pytest.mark.parametrize("family", [Family.GAUSSIAN, Family.POISSON, Family.GAMMA, Family.INVGAUSS])
    def test_fixed_families_train(self, family):
        tensor, graph = small_problem(T=120)
        tr, va, _ = split_chronological(tensor)
        model = train(TrainConfig(max_epochs=2), tr, va, graph, EncoderConfig(hidden_units=4, embed_dim=4), family)
        assert all(math.isfinite(h[2]) for h in model.history)


class TestHistoricalAverage:
    def _tensor(self, counts):
        counts = np.asarray(counts)
        return DemandTensor(counts, 60, 0, [(f"o{i}", "d") for i in range(counts.shape[0])])

    def test_constant(self):
        t = self._tensor(np.full((2, 48), 3))
        assert np.all(baseline_ha(t, [48 * 3600, 50 * 3600], weekly=False) == 3.0)

    def test_zero(self):
        assert not baseline_ha(self._tensor(np.zeros((1, 24))), [0], weekly=False).any()

    def test_slot_mean(self):
        counts = np.zeros((1, 48))
        counts[0, 5], counts[0, 29] = 2, 4
        assert baseline_ha(self._tensor(counts), [53 * 3600], weekly=False)[0, 0] == 3.0

    def test_unseen_slot_falls_back(self):
        t = self._tensor(np.arange(24)[None, :])
        # weekly slots: a window a day later is a slot never seen in training
        assert baseline_ha(t, [30 * 3600], weekly=True)[0, 0] == pytest.approx(11.5)
