import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avae.attack import (BOUNDARY, RAW_COLUMNS, AttackProblem, attack_objective_latent,
                         attack_objective_output, attack_pair, attack_point, distortion_box, read_raw_csv,
                         sweep_C, target_distances, write_raw_csv)
from avae.gaussian import kl_between
from avae.lbfgsb import LbfgsbConfig
from avae.models import Architecture, ModelParameters, decode, encode, init_params, param_shapes, reconstruct


@pytest.fixture(scope="module")
def toy():
    """Randomly initialized VAE on 6x6 images with two pair images."""
    p = init_params(Architecture("vae", (1, 6, 6), 3, "bernoulli", hidden=(8,)), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    return p, rng.uniform(0, 1, (1, 6, 6)), rng.uniform(0, 1, (1, 6, 6))


def identity_encoder():
    """encode(x) = N(x, 1) on a single pixel."""
    arch = Architecture("vae", (1, 1, 1), 1, "gaussian", hidden=())
    arrays = {k: np.zeros(s) for k, s in param_shapes(arch).items()}
    arrays["enc.mu.w"] = np.ones((1, 1))
    arrays["dec.out.w"] = np.ones((1, 1))
    return ModelParameters(arch, arrays)


# --- sweep_C ----------------------------------------------------------------

def test_sweep_values():
    Cs = sweep_C()
    assert len(Cs) == 51 and Cs[0] == 0.0
    assert Cs[1] == 2.0 ** -20 and Cs[1] == pytest.approx(9.5367e-7, rel=1e-4)
    assert Cs[50] == 1048576.0
    np.testing.assert_allclose(np.diff(np.log2(Cs[1:])), 40 / 49, rtol=1e-12)
    assert np.all(np.diff(Cs) > 0)


def test_reduced_sweep_shares_end_points():
    Cs = sweep_C(11)
    assert len(Cs) == 11 and Cs[0] == 0 and Cs[1] == 2.0 ** -20 and Cs[-1] == 2.0 ** 20


# --- objectives ---------------------------------------------------------------

def test_output_objective_at_zero_distortion_is_reconstruction_error(toy):
    p, x, t = toy
    prob = AttackProblem(p, x, t, C=5.0, layer="output", batch=4, seed=3)
    value, _ = attack_objective_output(prob, np.zeros(4 * 36))
    q = encode(p, x)
    z = q.mu.data + np.exp(0.5 * q.log_var.data) * prob.noise
    expected = np.mean([np.sum((decode(p, zi).data - t) ** 2) for zi in z])
    assert value == pytest.approx(expected, rel=1e-12)


def test_latent_objective_self_attack_is_zero(toy):
    p, x, _ = toy
    value, grad = attack_objective_latent(AttackProblem(p, x, x, C=3.0, batch=2), np.zeros(72))
    assert value == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_latent_objective_value(toy):
    p, x, t = toy
    d = np.random.default_rng(2).uniform(-0.01, 0.01, (2, 1, 6, 6))
    d = np.clip(x + d, 0, 1) - x
    prob = AttackProblem(p, x, t, C=0.5, batch=2)
    value, _ = attack_objective_latent(prob, d.ravel())
    kl = [kl_between(encode(p, x + di), encode(p, t)).item() for di in d]
    assert value == pytest.approx(np.mean(kl) + 0.5 * np.mean(np.sum(d.reshape(2, -1) ** 2, 1)), rel=1e-12)


@pytest.mark.parametrize("layer", ["latent", "output"])
def test_objective_gradients_match_finite_differences(toy, layer):
    p, x, t = toy
    prob = AttackProblem(p, x, t, C=0.3, layer=layer, batch=3, seed=4)
    objective = attack_objective_latent if layer == "latent" else attack_objective_output
    d0 = np.random.default_rng(5).uniform(-0.05, 0.05, 3 * 36)
    eps = 1e-6
    _, g = objective(prob, d0)
    num = np.array([(objective(prob, d0 + eps * e)[0] - objective(prob, d0 - eps * e)[0]) / (2 * eps)
                    for e in np.eye(d0.size)])
    rel = np.abs(num - g) / np.maximum(np.abs(num) + np.abs(g), 1e-8)
    assert rel.max() < 1e-3


def test_large_C_minimizer_is_zero_distortion(toy):
    p, x, t = toy
    for layer in ("latent", "output"):
        point = attack_point(AttackProblem(p, x, t, C=2.0 ** 20, layer=layer, batch=2))
        assert point.mean_input_distortion < 1e-4


def test_identity_encoder_attack_moves_to_target():
    p = identity_encoder()
    x, t = np.full((1, 1, 1), 0.2), np.full((1, 1, 1), 0.7)
    point = attack_point(AttackProblem(p, x, t, C=0.0, batch=3), keep_adversarial=True)
    np.testing.assert_allclose(point.adversarial - x, 0.5, atol=1e-5)


# --- attack_point / attack_pair ----------------------------------------------------

def test_zero_C_latent_attack_descends(toy):
    p, x, t = toy
    prob = AttackProblem(p, x, t, C=0.0, batch=4)
    start, _ = attack_objective_latent(prob, np.zeros(4 * 36))
    point = attack_point(prob, LbfgsbConfig(max_iter=200))
    assert point.objective <= start


def test_adversarials_are_feasible_exactly(toy):
    p, x, t = toy
    x = x.copy()
    x[0, 0, :3] = 0.0
    x[0, 1, :3] = 1.0
    for layer in ("latent", "output"):
        point = attack_point(AttackProblem(p, x, t, C=0.0, layer=layer, batch=2), LbfgsbConfig(max_iter=100),
                             keep_adversarial=True)
        assert point.adversarial.min() >= 0.0 and point.adversarial.max() <= 1.0


def test_attack_point_is_deterministic(toy):
    p, x, t = toy
    prob = AttackProblem(p, x, t, C=0.01, layer="output", batch=3, seed=9)
    a = attack_point(prob, LbfgsbConfig(max_iter=50), keep_adversarial=True)
    b = attack_point(prob.with_C(0.01), LbfgsbConfig(max_iter=50), keep_adversarial=True)
    assert a == b and a.adversarial.tobytes() == b.adversarial.tobytes()


def test_self_pair_clusters_at_self_reconstruction_error(toy):
    p, x, _ = toy
    res = attack_pair(p, x, x, "latent", Cs=sweep_C(5), batch=2)
    assert res.bounds.right == 0.0 and res.bounds.top == res.bounds.bottom
    for point in res.points:
        assert point.mean_target_distance == pytest.approx(res.bounds.bottom, abs=1e-5)


def test_boundaries_by_definition(toy):
    p, x, t = toy
    res = attack_pair(p, x, t, "latent", Cs=[2.0 ** 20], batch=2)
    assert res.bounds.top == pytest.approx(np.linalg.norm(reconstruct(p, x) - t), rel=1e-12)
    assert res.bounds.bottom == pytest.approx(np.linalg.norm(reconstruct(p, t) - t), rel=1e-12)
    assert res.bounds.right == pytest.approx(np.linalg.norm(x - t), rel=1e-12)
    # a distortion-free point sits on the top line
    assert res.points[0].mean_target_distance == pytest.approx(res.bounds.top, abs=1e-4)


def test_large_C_distorts_less_than_zero_C(toy):
    p, x, t = toy
    res = attack_pair(p, x, t, "latent", Cs=[0.0, 2.0 ** 20], batch=2, cfg=LbfgsbConfig(max_iter=300))
    assert res.points[1].mean_input_distortion <= res.points[0].mean_input_distortion


def test_latent_attack_ignores_noise_seed(toy):
    p, x, t = toy
    prob = AttackProblem(p, x, t, C=0.1, batch=2, seed=1)
    other = AttackProblem(p, x, t, C=0.1, batch=2, seed=2)
    d = np.full(72, 0.01)
    assert attack_objective_latent(prob, d)[0] == attack_objective_latent(other, d)[0]


def test_parallel_matches_serial(toy):
    p, x, t = toy
    kw = dict(Cs=sweep_C(3), batch=2, seed=4, cfg=LbfgsbConfig(max_iter=20))
    assert attack_pair(p, x, t, "output", jobs=2, **kw).points == attack_pair(p, x, t, "output", **kw).points


def test_problem_validation(toy):
    p, x, t = toy
    with pytest.raises(ValueError):
        AttackProblem(p, x, t, C=-1.0)
    with pytest.raises(ValueError):
        AttackProblem(p, x, t, C=0.0, layer="hidden")
    with pytest.raises(ValueError):
        AttackProblem(p, x + 1.0, t, C=0.0)
    with pytest.raises(ValueError):
        AttackProblem(p, x[:, :5], t[:, :5], C=0.0)


def test_target_distance_batch(toy):
    p, x, t = toy
    prob = AttackProblem(p, x, t, C=0.0)
    both = target_distances(prob, np.stack([x, t]))
    assert both[0] == pytest.approx(np.linalg.norm(reconstruct(p, x) - t))


# --- the distortion box ---------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 20, elements=st.one_of(st.floats(0, 1), st.sampled_from(
    [0.0, 1.0, 1 - 2 ** -53, 2 ** -1074, 0.1, 0.7, 1 / 3]))))
def test_box_end_points_stay_in_unit_interval(x):
    lo, hi = distortion_box(x)
    assert np.all(lo <= 0) and np.all(hi >= 0)
    for d in (lo, hi):
        y = x + d
        assert y.min() >= 0.0 and y.max() <= 1.0


# --- raw CSV ----------------------------------------------------------------------

def test_raw_csv_round_trip(toy, tmp_path):
    p, x, t = toy
    res = attack_pair(p, x, t, "latent", Cs=sweep_C(3), batch=2, pair_id=7, cfg=LbfgsbConfig(max_iter=20))
    path = tmp_path / "raw.csv"
    treatment = dict(dataset="mnist", model="vae", latent_size=3, timesteps=1)
    write_raw_csv(path, [res], treatment)
    rows = read_raw_csv(path)
    assert tuple(rows[0]) == RAW_COLUMNS and len(rows) == 4
    for row, point in zip(rows, res.points):
        assert float(row["C"]) == point.C
        assert float(row["mean_input_distortion"]) == point.mean_input_distortion
        assert float(row["mean_target_distance"]) == point.mean_target_distance
        assert row["pair_id"] == "7" and row["model"] == "vae"
    b = rows[-1]
    assert b["C"] == BOUNDARY and float(b["mean_target_distance"]) == res.bounds.top
    assert float(b["objective"]) == res.bounds.bottom
    assert float(b["mean_input_distortion"]) == res.bounds.right
    first = path.read_bytes()
    write_raw_csv(path, [res], treatment)
    assert path.read_bytes() == first and b"\r" not in first


def test_raw_csv_missing_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("pair_id,layer\n0,latent\n")
    with pytest.raises(ValueError, match="missing"):
        read_raw_csv(path)
