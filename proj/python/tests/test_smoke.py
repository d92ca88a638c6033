import json
import math

import numpy as np
import pytest

import trj


def test_sas_exact_maps_round_trip_and_alpha():
    sas = trj.sas_target()
    assert sas.num_models == 2
    pi = sas.true_marginals()
    assert pi == pytest.approx([0.25, 0.75], abs=1e-15)
    maps = sas.exact_maps()
    rng = trj.Rng(1)
    x = sas.sample_model(1, rng)
    z, ld = maps[1].forward(x)
    back, ld_inv = maps[1].inverse(z)
    assert np.allclose(back, x, atol=1e-12)
    assert ld == pytest.approx(-ld_inv, abs=1e-10)

    move = trj.TrjMove(maps)
    j = trj.JumpDistribution.uniform_others(2)
    alpha, _ = trj.propose_alpha(sas, move, 1, x, 0, j, rng)
    assert alpha == pytest.approx(trj.acceptance_reduced(sas, 1, 0, j), abs=1e-8)
    assert alpha == pytest.approx(1.0 / 3.0, abs=1e-8)


def test_affine_fit_whitens_samples():
    rng = np.random.default_rng(0)
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    s = rng.multivariate_normal([1.0, -2.0], cov, size=5000)
    m = trj.fit_affine(s)
    z = np.array([m.forward(row)[0] for row in s])
    assert np.allclose(z.mean(axis=0), 0.0, atol=1e-10)
    assert np.allclose(np.cov(z.T), np.eye(2), atol=1e-10)


def test_flow_training_runs():
    rng = np.random.default_rng(1)
    s = rng.normal(size=(600, 2)) * [1.0, 0.5]
    cfg = trj.TrainConfig()
    cfg.epochs = 3
    cfg.flow.hidden = 8
    flow, report = trj.fit_flow(s, cfg)
    assert flow.kind == "spline-flow"
    assert flow.dim == 2
    assert report.epochs_run == 3
    z, ld = flow.forward(s[0])
    assert np.allclose(flow.inverse(z)[0], s[0], atol=1e-8)


def test_chain_and_mbe_on_toy():
    toy = trj.gaussian_toy(1)
    truth = toy.true_marginals()[1]
    rng = trj.Rng(3)
    move = trj.TrjMove(toy.exact_maps())
    j = trj.JumpDistribution.uniform_others(2)
    traj = trj.run_chain(toy, move, j, 0, toy.posterior_mean(0), 0.3, 50000, rng)
    assert len(traj) == 50000
    assert trj.occupancy(traj, 2)[1] == pytest.approx(truth, abs=0.03)
    samples = [toy.sample_models(k, 2000, rng) for k in range(2)]
    est = trj.mbe_from_samples(toy, samples, move, j, rng)
    assert est.valid
    assert est.pi[1] == pytest.approx(truth, abs=1e-10)


def test_tempered_evidence_matches_closed_form():
    toy = trj.gaussian_toy(2)
    rng = trj.Rng(4)
    est = trj.tempered_log_evidence(toy, 0, 12, 4000, 500, rng)
    assert est == pytest.approx(toy.log_evidence(0), abs=0.1)
    assert trj.power_ladder(3) == pytest.approx([0.0, 1.0 / 16.0, 1.0])


def test_ground_truth_and_config(tmp_path):
    g = trj.ground_truth(trj.sas_target(), 100000, 1)
    assert g.method == "analytic"
    assert list(g.pi) == pytest.approx([0.25, 0.75])

    cfg = trj.config_from_dict({"experiment": "sas", "proposals": ["exact"], "n_train": 200, "n_test": 200,
                                "replicates": 2})
    cfg.out_dir = str(tmp_path)
    cfg.validate()
    assert len(cfg.hash()) == 64
    with pytest.raises(ValueError):
        trj.config_from_dict({"experiment": "sas", "bogus": 1})
    mbe, chains, manifest = trj.run_experiment(cfg)
    assert len(mbe["exact"]) == 2
    assert all(abs(p[1] - 0.75) < 0.05 for p in mbe["exact"])
    m = json.loads(manifest)
    assert m["config_hash"] == cfg.hash()
    assert (tmp_path / "manifest.json").exists()
