import numpy as np
import pytest

from avae.autodiff import Tensor, finite_difference_check
from avae.data import Dataset, split_indices
from avae.models import Architecture, ModelParameters, init_params, param_shapes
from avae.training import (AdamState, NumericalError, TrainConfig, TrainReport, adam_step, elbo_loss,
                           evaluate_elbo, loss_and_grads, train)


def tiny_arch(likelihood="bernoulli"):
    return Architecture("vae", (1, 6, 6), 2, likelihood, hidden=(5,))


def tiny_dataset(n=60, seed=0):
    images = np.random.default_rng(seed).uniform(0, 1, (n, 1, 6, 6))
    return Dataset("toy", images, split_indices(n - 10, 10, seed), seed)


def identity_gaussian_model():
    """Gaussian VAE on 1x1x2 images whose decoder copies the latent code."""
    arch = Architecture("vae", (1, 1, 2), 2, "gaussian", hidden=())
    arrays = {k: np.zeros(s) for k, s in param_shapes(arch).items()}
    arrays["dec.out.w"] = np.eye(2)
    return ModelParameters(arch, arrays)


# --- elbo_loss ------------------------------------------------------------

def test_gaussian_perfect_reconstruction_with_standard_posterior_is_zero():
    # zero encoder gives q = N(0, I); noise 0 samples z = 0, decoded to 0 = x
    p = identity_gaussian_model()
    assert elbo_loss(p, np.zeros((3, 1, 1, 2)), np.zeros((3, 2))).item() == 0.0


def test_uniform_bernoulli_predictor_costs_ln2_per_pixel():
    arch = tiny_arch()
    p = ModelParameters(arch, {k: np.zeros(s) for k, s in param_shapes(arch).items()})
    x = (np.random.default_rng(0).uniform(size=(4, 1, 6, 6)) > 0.5).astype(float)
    noise = np.random.default_rng(1).standard_normal((4, 2))
    assert elbo_loss(p, x, noise).item() == pytest.approx(36 * np.log(2.0), rel=1e-12)


def test_bernoulli_clamp_keeps_loss_finite():
    arch = tiny_arch()
    arrays = {k: np.zeros(s) for k, s in param_shapes(arch).items()}
    arrays["dec.out.b"] = np.full(arrays["dec.out.b"].shape, 60.0)    # p == 1 in float64
    loss = elbo_loss(ModelParameters(arch, arrays), np.zeros((1, 1, 6, 6)), np.zeros((1, 2))).item()
    assert np.isfinite(loss) and loss == pytest.approx(-36 * np.log(1e-7), rel=1e-6)


@pytest.mark.parametrize("likelihood", ["bernoulli", "gaussian"])
def test_elbo_gradient_matches_finite_differences(likelihood):
    p = init_params(tiny_arch(likelihood), np.random.default_rng(2))
    x = np.random.default_rng(3).uniform(0, 1, (2, 1, 6, 6))
    noise = np.random.default_rng(4).standard_normal((2, 2))
    w = p.arrays["enc.fc0.w"]

    def f(wt):
        leaves = {k: Tensor(v) for k, v in p.arrays.items()}
        leaves["enc.fc0.w"] = wt
        return elbo_loss(p, x, noise, leaves)

    assert finite_difference_check(f, w) < 1e-3
    _, grads = loss_and_grads(p, x, noise)
    assert set(grads) == set(p.arrays)


# --- adam_step ------------------------------------------------------------

def test_first_adam_step_moves_by_lr_times_sign():
    w = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -4.0, 1e-3])}
    _, out = adam_step(AdamState.zeros_like(w), w, g, lr=0.01)
    np.testing.assert_allclose(out["w"] - w["w"], -0.01 * np.sign(g["w"]), rtol=1e-4)


def test_zero_gradient_leaves_parameters_unchanged():
    w = {"w": np.array([1.0, -2.0])}
    state, out = adam_step(AdamState.zeros_like(w), w, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(out["w"], w["w"])
    assert state.t == 1


def simulate_adam(w0, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-by-scalar loop of the textbook update, used as the oracle."""
    w = list(w0)
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    trace = [list(w)]
    for t in range(1, steps + 1):
        for i in range(len(w)):
            g = 2.0 * w[i]
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            w[i] -= lr * (m[i] / (1 - b1 ** t)) / ((v[i] / (1 - b2 ** t)) ** 0.5 + eps)
        trace.append(list(w))
    return np.array(trace)


def test_adam_on_squared_norm_matches_scalar_simulation():
    w0 = np.array([1.5, -0.7, 0.3])
    state, arrays = AdamState.zeros_like({"w": w0}), {"w": w0}
    norms = [np.linalg.norm(w0)]
    trace = [w0]
    for _ in range(200):
        state, arrays = adam_step(state, arrays, {"w": 2.0 * arrays["w"]}, lr=0.1)
        norms.append(np.linalg.norm(arrays["w"]))
        trace.append(arrays["w"])
    np.testing.assert_allclose(np.array(trace), simulate_adam(w0, 200, 0.1), rtol=1e-12, atol=1e-15)
    assert norms[-1] < 1e-2 * norms[0]


def test_adam_rejects_non_finite_gradient():
    w = {"w": np.ones(2)}
    with pytest.raises(NumericalError, match="'w'"):
        adam_step(AdamState.zeros_like(w), w, {"w": np.array([1.0, np.nan])}, lr=0.1)


# --- train ----------------------------------------------------------------

def test_zero_epochs_returns_initialization():
    arch = tiny_arch()
    p, report = train(arch, tiny_dataset(), TrainConfig(epochs=0, seed=5))
    init = init_params(arch, np.random.default_rng(5))
    for k in init.arrays:
        np.testing.assert_array_equal(p.arrays[k], init.arrays[k])
    assert [e for e, _ in report.val_elbo] == [0] and report.best_epoch == 0


def test_training_improves_validation_elbo_and_checkpoints(tmp_path):
    from avae.checkpoint import load_checkpoint
    data = tiny_dataset()
    p, report = train(tiny_arch(), data, TrainConfig(epochs=20, batch_size=16, lr=1e-2, val_period=5), tmp_path)
    epochs = [e for e, _ in report.val_elbo]
    assert epochs == [0, 5, 10, 15, 20]
    assert report.best_elbo > report.val_elbo[0][1]
    saved = load_checkpoint(tmp_path / "checkpoint.avae")
    for k in p.arrays:
        np.testing.assert_array_equal(saved.arrays[k], p.arrays[k])
    assert evaluate_elbo(p, data.split("validation"), seed=0) > evaluate_elbo(
        init_params(tiny_arch(), np.random.default_rng(0)), data.split("validation"), seed=0)


def test_training_is_deterministic_per_seed():
    cfg = TrainConfig(epochs=3, batch_size=16, lr=1e-2, seed=7)
    a, ra = train(tiny_arch(), tiny_dataset(), cfg)
    b, rb = train(tiny_arch(), tiny_dataset(), cfg)
    assert ra.val_elbo == rb.val_elbo
    assert all(a.arrays[k].tobytes() == b.arrays[k].tobytes() for k in a.arrays)


def test_validation_split_depends_only_on_seed():
    a, b = split_indices(500, 100, seed=3), split_indices(500, 100, seed=3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["validation"], split_indices(500, 100, seed=4)["validation"])


def test_divergence_raises_numerical_error():
    arch = tiny_arch("gaussian")
    data = tiny_dataset()
    with pytest.raises(NumericalError), np.errstate(all="ignore"):
        train(arch, data, TrainConfig(epochs=3, batch_size=8, lr=1e30))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)


def test_report_files(tmp_path):
    r = TrainReport(val_elbo=[(0, -500.0), (10, -300.25)], best_epoch=10, checkpoint=tmp_path / "c.avae")
    r.write(tmp_path)
    text = (tmp_path / "train_report.txt").read_text()
    assert "best_epoch=10" in text and "best_val_elbo=-300.25" in text and "initial_val_elbo=-500.0" in text
    assert (tmp_path / "val_elbo.csv").read_text() == "epoch,value\n0,-500.0\n10,-300.25\n"
