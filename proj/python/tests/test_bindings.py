import math

import numpy as np
import pytest

import hetsense


def small_config(**extra):
    config = {"model": {"d": 12}, "optimizer": {"m": 300, "steps": 40}}
    config.update(extra)
    return config


def test_version_and_keys():
    assert hetsense.__version__
    assert "optimizer.eta" in hetsense.known_config_keys()


def test_ground_truth_bases_are_orthonormal():
    model = hetsense.make_ground_truth(30, 2, 1, seed=4)
    u = model.u_star
    assert u.shape == (30, 2)
    np.testing.assert_allclose(u.T @ u, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(model.invariant_signal(), u @ u.T, atol=1e-12)
    ortho = hetsense.make_ground_truth(30, 2, 1, seed=4, orthogonal=True)
    assert ortho.epsilon1 < 1e-14
    assert hetsense.subspace_angle(ortho.u_star, ortho.v_star) == pytest.approx(0.0, abs=1e-12)


def test_recovery_error_matches_numpy():
    model = hetsense.make_ground_truth(15, 1, 1, seed=2)
    rng = np.random.default_rng(0)
    u = rng.standard_normal((15, 3))
    expected = np.linalg.norm(u @ u.T - model.invariant_signal())
    assert hetsense.recovery_error(u, model) == pytest.approx(expected, rel=1e-10)
    r, q, e = hetsense.decompose(u, model)
    recomposed = model.u_star @ r.T + model.v_star @ q.T + e
    np.testing.assert_allclose(recomposed, u, atol=1e-12)
    assert hetsense.compute_metrics(u, model)["q_fro"] == pytest.approx(np.linalg.norm(u.T @ model.v_star))


def test_run_is_deterministic_and_shaped():
    a = hetsense.run(small_config(), seed=3)
    b = hetsense.run(small_config(), seed=3)
    rec = a["records"]
    assert len(rec["t"]) == 41
    np.testing.assert_array_equal(rec["recovery_error"], b["records"]["recovery_error"])
    assert all(len(e) == 17 and e[0] == "e" for e in rec["env_id"])
    assert a["final_u"].shape == (12, 12)
    assert not a["diverged"]
    c = hetsense.run(small_config(), seed=4)
    assert not np.array_equal(rec["q_fro"], c["records"]["q_fro"])


def test_divergence_is_reported():
    out = hetsense.run(small_config(optimizer={"m": 200, "steps": 50, "eta": 2.0}, dist={"het": 30}), seed=1)
    assert out["diverged"]
    assert np.all(np.isfinite(out["records"]["recovery_error"]))


def test_config_errors_raise_value_error():
    with pytest.raises(hetsense.ConfigError):
        hetsense.resolve_config({"model": {"dd": 3}})
    with pytest.raises(ValueError):
        hetsense.resolve_config({"optimizer": {"eta": -1}})


def test_digest_ignores_output_location():
    a = hetsense.config_digest(small_config(output_dir="x"))
    b = hetsense.config_digest(small_config(output_dir="y"))
    assert a == b
    assert a != hetsense.config_digest(small_config(optimizer={"alpha": 0.01}))


def test_sweep_writes_summary(tmp_path):
    config = small_config(grid=[0, 5], seeds=[1, 2], output_dir=str(tmp_path), plot=False)
    result = hetsense.run_experiment(config, experiment="sweep-heterogeneity")
    assert result["exit_code"] == 0
    lines = (tmp_path / "summary.csv").read_text().strip().splitlines()
    assert len(lines) == 5


def test_supermartingale_window():
    dist = hetsense.EnvironmentDistribution.two_point(2000.0, 1)
    assert hetsense.check_supermartingale(dist, 7e-6, 20000, 1)["pass"]
    assert not hetsense.check_supermartingale(dist, 0.0, 1000, 1)["pass"]


def test_cr_sequence_recursion():
    seq = hetsense.cr_sequence(1e-3, 0.1, 5)
    for prev, nxt in zip(seq, seq[1:]):
        assert nxt == pytest.approx((1 - 0.1 * prev * prev + 0.1) * prev)
    assert math.isclose(seq[0], 1e-3)
