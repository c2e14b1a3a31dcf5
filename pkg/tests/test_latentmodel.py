import math

import numpy as np
import pytest
import torch
from _oracles import central_difference_check, gaussian_kl_quadrature
from conftest import TINY_SPEC, buffer_from_states, make_tiny_model
from hypothesis import given, settings
from hypothesis import strategies as st

from replaytriplet.buffer import SamplerConfig, collect_random_walk
from replaytriplet.gridworld import GridSpec, enumerate_state_array, render_batch
from replaytriplet.latentmodel import (
    EncoderDecoder,
    LatentDistribution,
    LossConfig,
    ModelConfig,
    ModelKind,
    TrainConfig,
    TrainingDivergedError,
    ada_gvae_average,
    ada_shared_mask,
    ada_triplet_loss,
    beta_vae_loss,
    build_model,
    compute_loss,
    encode,
    kl_regulariser,
    load_checkpoint,
    observations_to_tensor,
    reconstruction_loss,
    reparameterise,
    save_checkpoint,
    total_loss,
    train,
    triplet_loss,
)

T = torch.tensor
L1 = LossConfig(latent_distance="L1", latent_dim=2)


def _dist(mu, std):
    return LatentDistribution(T(mu, dtype=torch.float64), T(std, dtype=torch.float64))


def _tiny_batch(n=4, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    pos = enumerate_state_array(TINY_SPEC)[rng.integers(0, TINY_SPEC.num_states, size=n)]
    return observations_to_tensor(render_batch(pos, TINY_SPEC), dtype=dtype)


# -- encoder -------------------------------------------------------------------


def test_fresh_encoder_has_unit_stds():
    model = EncoderDecoder(64, 1, 9, (8, 8, 8, 8), 32)
    img = render_batch(enumerate_state_array(GridSpec())[:5], GridSpec())
    d = encode(model, img)
    assert d.means.shape == d.stds.shape == (5, 9)
    assert torch.allclose(d.stds, torch.ones_like(d.stds))
    assert torch.equal(encode(model, img).means, d.means)


def test_encode_single_and_shape_errors():
    model = EncoderDecoder(64, 1, 3, (8, 8), 16)
    d = encode(model, np.zeros((64, 64, 1), dtype=np.float32))
    assert d.means.shape == (3,)
    with pytest.raises(ValueError):
        encode(model, np.zeros((64, 64, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        EncoderDecoder(60, 1, 3, (8, 8, 8))


def test_decoder_output_shape():
    model = EncoderDecoder(64, 3, 5, (8, 8, 8, 8), 16)
    out = model.decode(torch.zeros(2, 5))
    assert out.shape == (2, 3, 64, 64)
    assert out.min() >= 0 and out.max() <= 1


# -- closed-form pieces --------------------------------------------------------


def test_reparameterise_examples():
    assert torch.equal(reparameterise(_dist([1, 2], [1, 1]), T([0.0, 0.0], dtype=torch.float64)), T([1.0, 2.0], dtype=torch.float64))
    assert torch.equal(reparameterise(_dist([0, 0], [2, 3]), T([1.0, -1.0], dtype=torch.float64)), T([2.0, -3.0], dtype=torch.float64))
    with pytest.raises(ValueError):
        reparameterise(_dist([0, 0], [1, 1]), T([1.0]))


def test_reparameterise_gradient_wrt_mean_is_identity():
    mu = T([0.3, -1.2, 2.0], dtype=torch.float64, requires_grad=True)
    std = T([0.5, 1.5, 2.0], dtype=torch.float64)
    eps = T([0.7, -0.1, 1.3], dtype=torch.float64)
    jac = torch.autograd.functional.jacobian(lambda m: reparameterise(LatentDistribution(m, std), eps), mu)
    assert torch.allclose(jac, torch.eye(3, dtype=torch.float64))
    # finite differences agree
    h = 1e-6
    for i in range(3):
        e = torch.zeros(3, dtype=torch.float64)
        e[i] = h
        fd = (reparameterise(LatentDistribution(mu + e, std), eps) - reparameterise(LatentDistribution(mu - e, std), eps)) / (2 * h)
        assert torch.allclose(fd, e / h, atol=1e-8)


def test_kl_examples():
    assert kl_regulariser(_dist([0, 0, 0], [1, 1, 1])).item() == 0.0
    assert kl_regulariser(_dist([1.0], [1.0])).item() == pytest.approx(0.5, abs=1e-12)
    expected = 0.5 * (4 - 1 - math.log(4))
    assert kl_regulariser(_dist([0.0], [2.0])).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.80685, abs=1e-5)
    assert gaussian_kl_quadrature(0.0, 2.0) == pytest.approx(expected, abs=1e-7)


@settings(deadline=None, max_examples=30)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.05, 5)), min_size=1, max_size=4))
def test_kl_nonnegative_and_matches_quadrature(dims):
    mu, sd = zip(*dims)
    kl = kl_regulariser(_dist(list(mu), list(sd))).item()
    assert kl >= 0
    assert kl == pytest.approx(sum(gaussian_kl_quadrature(m, s) for m, s in dims), abs=1e-6)


def test_reconstruction_loss_examples():
    a = torch.zeros(64, 64, 1)
    b = torch.ones(64, 64, 1)
    assert reconstruction_loss(a, a).item() == 0
    assert reconstruction_loss(a, b).item() == 4096
    x, y = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
    assert torch.allclose(reconstruction_loss(x, y), reconstruction_loss(y, x))
    with pytest.raises(ValueError):
        reconstruction_loss(a, torch.zeros(64, 64, 3))


def test_ada_shared_mask_examples():
    assert ada_shared_mask(T([0.1, 0.5, 0.9])).tolist() == [True, False, False]
    assert ada_shared_mask(T([0.3, 0.3, 0.3])).tolist() == [False, False, False]
    assert ada_shared_mask(T([0.0, 1.0])).tolist() == [True, False]
    with pytest.raises(ValueError):
        ada_shared_mask(T([1.0]))


def test_ada_gvae_average_examples():
    a = _dist([0.0], [1.0])
    b = _dist([2.0], [1.0])
    out_a, out_b = ada_gvae_average(a, b, T([True]))
    assert out_a.means.item() == out_b.means.item() == 1.0
    assert out_a.stds.item() == pytest.approx(1.0)
    same = _dist([0.2, -1.0], [0.5, 2.0])
    for mask in ([True, False], [True, True], [False, False]):
        x, y = ada_gvae_average(same, same, T(mask))
        assert torch.allclose(x.means, same.means) and torch.allclose(y.stds, same.stds)


def test_ada_gvae_average_passthrough_and_variance():
    a = _dist([0.0, 5.0, -1.0], [1.0, 2.0, 0.5])
    b = _dist([4.0, 1.0, 3.0], [3.0, 0.1, 0.5])
    mask = T([True, False, True])
    x, y = ada_gvae_average(a, b, mask)
    assert x.means.shape == a.means.shape
    assert x.means[1] == a.means[1] and y.means[1] == b.means[1]
    assert x.stds[1] == a.stds[1] and y.stds[1] == b.stds[1]
    assert x.stds[0].item() ** 2 == pytest.approx(0.5 * (1 + 9))


def test_triplet_loss_examples():
    z = T([0.0, 0.0])
    assert triplet_loss(z, T([1.0, 0.0]), T([0.0, 1.0]), L1).item() == pytest.approx(math.log(2), abs=1e-6)
    assert triplet_loss(z, z, T([1e4, 0.0]), L1).item() == pytest.approx(0.0, abs=1e-12)
    got = triplet_loss(T([0.0]), T([1.0]), T([3.0]), L1).item()
    assert got == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-7)
    assert got == pytest.approx(0.1269, abs=1e-4)
    l2 = LossConfig(latent_distance="L2", latent_dim=2)
    assert triplet_loss(z, T([3.0, 4.0]), T([0.0, 5.0]), l2).item() == pytest.approx(math.log(2), abs=1e-6)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0.01, 3))
def test_triplet_loss_monotone(dap, dan, bump):
    z = T([0.0])
    base = triplet_loss(z, T([dap]), T([dan]), L1).item()
    assert base > 0
    assert triplet_loss(z, T([dap]), T([dan + bump]), L1).item() <= base
    assert triplet_loss(z, T([dap + bump]), T([dan]), L1).item() >= base


def test_ada_triplet_hand_example():
    cfg = LossConfig(latent_distance="L1", shared_weight=0.5, latent_dim=2)
    got = ada_triplet_loss(T([0.0, 0.0]), T([1.0, 1.0]), T([0.1, 2.0]), cfg).item()
    # delta=(0.1, 2), threshold 1.05, dim 0 shared: d_an = 0.5*0.1 + 2, d_ap = 2
    assert got == pytest.approx(math.log1p(math.exp(2 - 2.05)), abs=1e-6)
    assert got == pytest.approx(0.6684, abs=1e-4)


def test_ada_triplet_shared_weight_zero_drops_shared_dims():
    cfg = LossConfig(shared_weight=0.0, latent_dim=3)
    za, zp, zn = T([0.0, 0.0, 0.0]), T([1.0, 0.0, 0.0]), T([0.1, 0.2, 3.0])
    expected = math.log1p(math.exp(1.0 - 3.0))
    assert ada_triplet_loss(za, zp, zn, cfg).item() == pytest.approx(expected, abs=1e-6)


@settings(deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.floats(0.01, 0.99))
def test_ada_triplet_reduces_to_triplet_when_nothing_shared(zp, c, w):
    # anchor-negative gaps all equal: empty shared mask
    za = T([0.0, 0.0, 0.0], dtype=torch.float64)
    zn = T([abs(c[0]) + 0.5] * 3, dtype=torch.float64)
    zp = T(zp, dtype=torch.float64)
    cfg = LossConfig(shared_weight=w, latent_dim=3)
    assert ada_triplet_loss(za, zp, zn, cfg).item() == triplet_loss(za, zp, zn, cfg).item()


def test_triplet_gradient_step_improves_ordering():
    torch.manual_seed(0)
    W = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
    xa, xp, xn = (torch.randn(8, dtype=torch.float64) for _ in range(3))
    cfg = LossConfig(latent_dim=3)

    def margin():
        za, zp, zn = W @ xa, W @ xp, W @ xn
        return (za - zp).abs().sum() - (za - zn).abs().sum()

    before = margin().item()
    triplet_loss(W @ xa, W @ xp, W @ xn, cfg).backward()
    with torch.no_grad():
        W -= 1e-3 * W.grad
    assert margin().item() < before


# -- batch objectives ----------------------------------------------------------


def test_beta_vae_loss_matches_hand_computation(tiny_model):
    x = _tiny_batch(3)
    cfg = LossConfig(model_kind="BetaVAE", beta=4.0, latent_dim=2)
    loss, diag = beta_vae_loss(tiny_model, x, cfg, torch.Generator().manual_seed(5))
    # recompute from intermediates with numpy
    with torch.no_grad():
        d = tiny_model.encode(x)
        eps = torch.randn(d.means.shape, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
        recon = tiny_model.decode(d.means + d.stds * eps).numpy()
    mu, sd, xn = d.means.numpy(), d.stds.numpy(), x.numpy()
    rec = ((recon - xn) ** 2).reshape(3, -1).sum(1)
    kl = 0.5 * (mu ** 2 + sd ** 2 - 1 - np.log(sd ** 2)).sum(1)
    assert loss.item() == pytest.approx(float(np.mean(rec + 4.0 * kl)), abs=1e-5)
    assert diag["recon"] == pytest.approx(rec.mean(), abs=1e-5)


def test_beta_vae_limits(tiny_model):
    x = _tiny_batch(4)
    g = lambda: torch.Generator().manual_seed(1)  # noqa: E731
    l0, d0 = beta_vae_loss(tiny_model, x, LossConfig(model_kind="BetaVAE", beta=0.0, latent_dim=2), g())
    assert l0.item() == pytest.approx(d0["recon"])
    l1, d1 = beta_vae_loss(tiny_model, x, LossConfig(model_kind="BetaVAE", beta=1.0, latent_dim=2), g())
    l4, _ = beta_vae_loss(tiny_model, x, LossConfig(model_kind="BetaVAE", beta=4.0, latent_dim=2), g())
    assert d1["kl"] > 0
    assert l4.item() >= l1.item()
    lv, _ = beta_vae_loss(tiny_model, x, LossConfig(model_kind="VAE", beta=4.0, latent_dim=2), g())
    assert lv.item() == pytest.approx(l1.item())


def test_total_loss_alpha_zero_is_mean_vae(tiny_model):
    xa, xp, xn = _tiny_batch(3, 0), _tiny_batch(3, 1), _tiny_batch(3, 2)
    cfg = LossConfig(model_kind="BetaTVAE", alpha=0.0, beta=2.0, latent_dim=2)
    loss, _ = total_loss(tiny_model, (xa, xp, xn), cfg, torch.Generator().manual_seed(3))
    # same noise draw order as the stacked forward pass
    with torch.no_grad():
        x = torch.cat([xa, xp, xn])
        d = tiny_model.encode(x)
        eps = torch.randn(d.means.shape, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
        rec = reconstruction_loss(tiny_model.decode(d.means + d.stds * eps), x)
        per = rec + 2.0 * kl_regulariser(d)
    expected = sum(per[i * 3:(i + 1) * 3].mean() for i in range(3)) / 3
    assert loss.item() == pytest.approx(expected.item(), abs=1e-10)


def test_total_loss_finite_positive_and_kind_check(tiny_model):
    b = (_tiny_batch(4, 0), _tiny_batch(4, 1), _tiny_batch(4, 2))
    for kind in ("BetaTVAE", "AdaTVAE"):
        loss, diag = total_loss(tiny_model, b, LossConfig(model_kind=kind, latent_dim=2))
        assert math.isfinite(loss.item()) and loss.item() > 0
        assert diag["triplet"] > 0
    with pytest.raises(ValueError):
        total_loss(tiny_model, b, LossConfig(model_kind="BetaVAE", latent_dim=2))


@pytest.mark.parametrize("kind", [k.value for k in ModelKind])
def test_gradients_match_finite_differences(kind):
    model = make_tiny_model(latent_dim=2, seed=1)
    cfg = LossConfig(model_kind=kind, beta=2.0, alpha=3.0, latent_dim=2, shared_weight=0.5)
    batch = tuple(_tiny_batch(3, s) for s in range(ModelKind(kind).batch_arity))
    fn = lambda: compute_loss(model, batch, cfg, torch.Generator().manual_seed(11))[0]  # noqa: E731
    worst = central_difference_check(fn, list(model.parameters()))
    assert worst < 1e-3


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(beta=-1)
    with pytest.raises(ValueError):
        LossConfig(shared_weight=1.5)
    with pytest.raises(ValueError):
        LossConfig(model_kind="FactorVAE")
    assert LossConfig(model_kind="AdaTVAE").to_dict()["model_kind"] == "AdaTVAE"


# -- training loop ---------------------------------------------------------------


def _two_state_buffer():
    spec = GridSpec(square_size_px=4, step_px=4, grid_cells_per_axis=2, image_side_px=8)
    return spec, buffer_from_states(spec, [(0, 0), (1, 1)] * 8)


def test_train_zero_steps_leaves_model_unchanged():
    spec, buf = _two_state_buffer()
    model = build_model(spec, 2, ModelConfig((4, 4), 16), seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    res = train(model, buf, LossConfig(model_kind="BetaVAE", latent_dim=2), TrainConfig(steps=0), seed=0)
    assert res.loss_curve == []
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_train_two_state_reconstruction_drops():
    spec, buf = _two_state_buffer()
    model = build_model(spec, 2, ModelConfig((8, 8), 32), seed=0)
    res = train(model, buf, LossConfig(model_kind="VAE", latent_dim=2),
                TrainConfig(steps=2000, batch_size=16, log_interval=0), seed=0)
    first, last = res.loss_curve[0]["recon"], np.mean([r["recon"] for r in res.loss_curve[-20:]])
    assert last < 0.05 * first


def test_train_is_deterministic():
    spec = GridSpec(square_size_px=2, step_px=2, grid_cells_per_axis=4, image_side_px=8)
    buf = collect_random_walk(spec, 4, 40, seed=0)
    curves = []
    for _ in range(2):
        model = build_model(spec, 2, ModelConfig((4, 4), 16), seed=3)
        cfg = LossConfig(model_kind="AdaTVAE", latent_dim=2)
        res = train(model, buf, cfg, TrainConfig(steps=15, batch_size=4, log_interval=0), SamplerConfig(2, 6), seed=9)
        curves.append([r["loss"] for r in res.loss_curve])
    assert curves[0] == curves[1]


def test_train_every_kind_runs_and_checkpoints(tmp_path):
    spec = GridSpec(square_size_px=2, step_px=2, grid_cells_per_axis=4, image_side_px=8)
    buf = collect_random_walk(spec, 4, 40, seed=0)
    for kind in ModelKind:
        for mode in ("temporal", "ground_truth"):
            if kind is ModelKind.ADA_GVAE and mode == "ground_truth":
                continue
            model = build_model(spec, 2, ModelConfig((4, 4), 16), seed=0)
            res = train(model, buf, LossConfig(model_kind=kind, latent_dim=2),
                        TrainConfig(steps=4, batch_size=4, checkpoint_interval=2, log_interval=0),
                        SamplerConfig(2, 6, mode), seed=0, checkpoint_dir=tmp_path / kind.value / mode)
            assert len(res.loss_curve) == 4
            assert len(res.checkpoints) == 2
            assert res.checkpoints[0].with_suffix(".loss.csv").exists()


def test_ada_gvae_rejects_ground_truth_mode():
    spec = GridSpec(square_size_px=2, step_px=2, grid_cells_per_axis=4, image_side_px=8)
    buf = collect_random_walk(spec, 2, 40, seed=0)
    model = build_model(spec, 2, ModelConfig((4, 4), 16))
    with pytest.raises(ValueError):
        train(model, buf, LossConfig(model_kind="AdaGVAE", latent_dim=2), TrainConfig(steps=1),
              SamplerConfig(mode="ground_truth"))


def test_divergence_aborts():
    spec = GridSpec(square_size_px=2, step_px=2, grid_cells_per_axis=4, image_side_px=8)
    buf = collect_random_walk(spec, 2, 40, seed=0)
    model = build_model(spec, 2, ModelConfig((4, 4), 16))
    with torch.no_grad():
        model.mean_head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError):
        train(model, buf, LossConfig(model_kind="BetaVAE", latent_dim=2), TrainConfig(steps=3, log_interval=0))


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(GridSpec(), 4, ModelConfig((4, 4, 4, 4), 8), seed=0)
    p = save_checkpoint(tmp_path / "m.ckpt", model, step=7, config={"a": 1}, loss_curve=[{"step": 1, "loss": 2.0}])
    back, blob = load_checkpoint(p)
    assert blob["step"] == 7 and blob["config"] == {"a": 1} and blob["format_version"] == 1
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), back.state_dict().values()))
    assert p.with_suffix(".loss.csv").read_text().splitlines()[0] == "step,loss"
