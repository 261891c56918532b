import warnings

import numpy as np
import pytest

from favae import generation
from favae.data_io import SynthSpec, SynthView, generate_synthetic
from favae.errors import StructuralError
from favae.fa_core import ArdPosterior, Hyperparams, NoisePosterior, ProjectionPosterior
from favae.generation import (ConditionRequest, conditional_generate, cross_generate, decode_global,
                              encode_evidence, generate_from_z, interpolate_global, interpolate_private,
                              lambda_grid, latent_relevance, posterior_z_given)
from favae.model import FAVAE
from favae.trainer import TrainConfig, ViewSettings, build_model, train
from favae.views import MultilabelView, RealView

import oracles


def fixed_model(ws, taus, n=3, w_cov=0.0):
    """A model whose view posteriors are set by hand."""
    k = ws[0].shape[1]
    model = FAVAE(Hyperparams(k_c=k), n, 0)
    for i, (w, tau) in enumerate(zip(ws, taus)):
        v = model.add_view(RealView(f"v{i}", np.zeros((n, w.shape[0]))))
        v.w = ProjectionPosterior(np.asarray(w, float), w_cov * np.eye(k))
        v.tau = NoisePosterior(tau, 1.0)
        v.alpha = ArdPosterior(1.0, np.ones(k))
    model.iteration = 1
    return model


def test_single_view_example():
    model = fixed_model([np.array([[1.0]])], [1.0])
    z = posterior_z_given(model, {"v0": np.array([[2.0]])})
    assert z.cov[0, 0] == pytest.approx(0.5)
    assert z.mean[0, 0] == pytest.approx(1.0)


def test_two_identical_views_add_evidence():
    w = np.array([[1.0]])
    model = fixed_model([w, w], [1.0, 1.0])
    x = np.array([[1.5]])
    z = posterior_z_given(model, {"v0": x, "v1": x})
    assert z.cov[0, 0] == pytest.approx(1 / 3)
    assert z.mean[0, 0] == pytest.approx(2 * 1.5 / 3)


def test_matches_gaussian_conditioning():
    rng = np.random.default_rng(0)
    ws = [rng.standard_normal((d, 3)) for d in (2, 3, 1)]
    taus = [0.5, 2.0, 4.0]
    model = fixed_model(ws, taus)
    xs = [rng.standard_normal((1, w.shape[0])) for w in ws]
    z = posterior_z_given(model, {f"v{i}": x for i, x in enumerate(xs)})
    mean, cov = oracles.gaussian_condition(ws, taus, [x[0] for x in xs])
    assert np.allclose(z.mean[0], mean, rtol=1e-10, atol=1e-12)
    assert np.allclose(z.cov, cov, rtol=1e-10, atol=1e-12)


def test_empty_evidence_returns_prior_with_warning():
    model = fixed_model([np.ones((2, 2))], [1.0])
    with pytest.warns(UserWarning, match="prior"):
        z = posterior_z_given(model, {}, n=4)
    assert np.array_equal(z.mean, np.zeros((4, 2))) and np.array_equal(z.cov, np.eye(2))


def test_evidence_only_shrinks_covariance():
    rng = np.random.default_rng(1)
    ws = [rng.standard_normal((2, 3)) for _ in range(3)]
    model = fixed_model(ws, [1.0, 2.0, 0.5], w_cov=0.05)
    given = {}
    prev = np.eye(3)
    for i in range(3):
        given[f"v{i}"] = rng.standard_normal((1, 2))
        cov = posterior_z_given(model, given).cov
        assert np.linalg.eigvalsh(prev - cov).min() >= -1e-12
        prev = cov


def test_evidence_validation():
    model = fixed_model([np.ones((2, 2))], [1.0])
    with pytest.raises(StructuralError):
        posterior_z_given(model, {"v0": np.ones((1, 3))})
    with pytest.raises(StructuralError):
        posterior_z_given(model, {"v0": np.array([[np.nan, 1.0]])})
    with pytest.raises(StructuralError):
        posterior_z_given(model, {"nope": np.ones((1, 2))})


@pytest.fixture(scope="module")
def trained():
    spec = SynthSpec(n=400, k_true=4, seed=3, views=[
        SynthView("a", d=12, shared_factors=[1, 2], private_factors=[3]),
        SynthView("b", d=12, shared_factors=[1, 2], private_factors=[4]),
        SynthView("lab", kind="multilabel", d=5, shared_factors=[1, 2]),
        SynthView("img", kind="image", d=16, shared_factors=[1, 2], latent_dim=4, hidden=8),
    ])
    ds, truth = generate_synthetic(spec)
    vs = ViewSettings(latent_dim=4, hidden=(16,), prior_mode="mean", pseudo_obs_mode="mean", learning_rate=3e-3)
    model = build_model(ds, Hyperparams(k_c=8), {"img": vs})
    model, _ = train(model, TrainConfig(max_outer_iters=40, inner_epochs=2, per_view={"img": vs}))
    return model, ds, truth


def test_all_views_reproduce_training_update(trained):
    model, ds, _ = trained
    model = build_model(ds.__class__([ds["a"], ds["b"]]), Hyperparams(k_c=6))
    model, _ = train(model, TrainConfig(max_outer_iters=5))
    z = posterior_z_given(model, {n: v.x for n, v in model.views.items()})
    model.update_q_z()
    assert np.array_equal(z.mean, model.z.mean) and np.array_equal(z.covs, model.z.covs)


def test_multilabel_evidence_fixed_point(trained):
    model, ds, _ = trained
    y = ds["lab"].values[:20]
    z = posterior_z_given(model, {"lab": y})
    # at the fixed point the pseudo-observations are consistent with the returned posterior
    w = model["lab"].w
    from favae import fa_core
    xi = np.sqrt(fa_core.expected_sq_predictor(z, w))
    again = posterior_z_given(model, {"lab": y}, max_iter=200, tol=1e-13)
    assert np.allclose(z.mean, again.mean, atol=1e-8)
    assert np.all(np.isfinite(xi))
    with pytest.raises(StructuralError):
        posterior_z_given(model, {"lab": np.full((1, 5), 0.5)})


def test_generate_from_z_properties(trained):
    model, _, _ = trained
    z = np.zeros((2, model.k))
    lab = generate_from_z(model, z, "lab")
    assert np.array_equal(lab.probabilities, np.full((1, 2, 5), 0.5))
    assert np.array_equal(lab.values, np.ones((1, 2, 5)))
    a1 = generate_from_z(model, z, "img", 3, seed=4)
    a2 = generate_from_z(model, z, "img", 3, seed=4)
    assert a1.values.shape == (3, 2, 16) and np.array_equal(a1.values, a2.values)
    with pytest.raises(StructuralError):
        generate_from_z(model, np.zeros((1, model.k + 1)), "a")


def test_noiseless_limit_is_deterministic_decode(trained):
    model, _, _ = trained
    view = model["img"]
    old = view.tau
    view.tau = NoisePosterior(1e300, 1.0)
    try:
        z = np.random.default_rng(0).standard_normal((3, model.k))
        g = generate_from_z(model, z, "img", 2, seed=1)
        from favae.neural import decode
        assert np.allclose(g.values[0], decode(view.net, z @ view.w.mean.T), atol=1e-5)
    finally:
        view.tau = old


def test_untrained_target_rejected():
    model = FAVAE(Hyperparams(k_c=2), 3, 0)
    model.add_view(RealView("r", np.ones((3, 2))))
    with pytest.raises(StructuralError, match="trained"):
        generate_from_z(model, np.zeros((1, 2)), "r")


def test_cross_generate_is_composition(trained):
    model, ds, _ = trained
    x = ds["img"].values[:5]
    out = cross_generate(model, "img", x, "a", n_samples=2, seed=9)
    f = encode_evidence(model, "img", x, 9)
    manual = generate_from_z(model, posterior_z_given(model, {"img": f}).mean, "a", 2, 9)
    assert np.array_equal(out.values, manual.values)


def test_cross_generate_round_trip_and_paired(trained):
    model, ds, truth = trained
    x = ds["a"].values
    rt = cross_generate(model, "a", x, "a", seed=0).values[0]
    assert np.linalg.norm(rt - x) / np.linalg.norm(x) <= 0.1
    pair = cross_generate(model, "a", x, "b", seed=0).values[0]
    assert np.corrcoef(pair.ravel(), truth.clean["b"].ravel())[0, 1] >= 0.8


def test_conditional_generate(trained):
    model, ds, _ = trained
    req = ConditionRequest({"lab": ds["lab"].values[:3]}, "img", n_samples=2, seed=1)
    out = conditional_generate(model, req)
    assert out.values.shape == (2, 3, 16)
    req = ConditionRequest({"lab": ds["lab"].values[:3]}, "img", n_samples=2, seed=1, sample_latent=True)
    a, b = conditional_generate(model, req), conditional_generate(model, req)
    assert np.array_equal(a.values, b.values)
    with pytest.raises(StructuralError):
        conditional_generate(model, ConditionRequest({"img": ds["img"].values[:1]}, "img"))


def test_interpolation():
    f1, f2 = np.array([0.0, 2.0]), np.array([2.0, 0.0])
    out = interpolate_private(f1, f2, [1.0, 0.5, 0.0])
    assert np.array_equal(out[0], f1) and np.array_equal(out[2], f2)
    assert np.array_equal(out[1], [1.0, 1.0])
    rng = np.random.default_rng(0)
    g1, g2 = rng.standard_normal(5), rng.standard_normal(5)
    lam = rng.random(20)
    path = interpolate_global(g1, g2, lam)
    assert np.max(np.abs(path - (lam[:, None] * g1 + (1 - lam[:, None]) * g2))) <= 1e-12
    with pytest.raises(StructuralError):
        interpolate_private(f1, f2, [1.2])
    with pytest.raises(StructuralError):
        interpolate_global(f1, np.ones(3), [0.5])
    assert np.array_equal(lambda_grid(2), [1.0, 0.0])
    assert np.allclose(np.diff(lambda_grid(5)), -0.25)


def test_global_interpolation_decodes_shared_codes(trained, monkeypatch):
    model, _, _ = trained
    seen = []
    real = generation.generate_from_z

    def spy(m, z, target, n_samples=1, seed=0):
        seen.append(np.array(z))
        return real(m, z, target, n_samples, seed)

    monkeypatch.setattr(generation, "generate_from_z", spy)
    rng = np.random.default_rng(1)
    codes = interpolate_global(rng.standard_normal(model.k), rng.standard_normal(model.k), [0.5])
    out = decode_global(model, codes)
    assert set(out) == set(model.views)
    assert all(np.array_equal(s, seen[0]) for s in seen)
    assert all(np.all(np.isfinite(g.values)) for g in out.values())


def test_relevance_report(tmp_path):
    model = fixed_model([np.array([[1.0, 3.0, 0.0], [3.0, 1.0, 0.0]]), np.array([[0.0, -2.0, 0.0]])], [1.0, 1.0])
    rep = latent_relevance(model)
    assert np.array_equal(rep.scores["v0"], [2.0, 2.0, 0.0])
    assert rep.scores["v0"][2] == 0.0
    assert rep.matrix().shape == (2, 3)
    text = rep.to_text()
    assert len(text.strip().splitlines()) == 2 + rep.k
    rep.save_heatmap(tmp_path / "h.png")
    import matplotlib.image as mpimg
    assert mpimg.imread(tmp_path / "h.png").shape[:2] == (2, 3)
    signed = latent_relevance(model, "signed_mean", reference="v1")
    assert signed.scores["v1"][1] == -2.0 and signed.reference == "v1"


def test_relevance_sign_flip_invariance(trained):
    model, _, _ = trained
    before = latent_relevance(model).matrix()
    for v in model.views.values():
        v.w.mean[:, 0] *= -1
    try:
        assert np.array_equal(latent_relevance(model).matrix(), before)
    finally:
        for v in model.views.values():
            v.w.mean[:, 0] *= -1
