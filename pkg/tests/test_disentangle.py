import math

import pytest
import torch
from torch.optim import Adam

from mrdd.config import LossWeights
from mrdd.services.consistency import ConsistentModel, train_stage1
from mrdd.services.data import iterate_batches
from mrdd.services.disentangle import (
    SpecificModel, club_learning_loss, club_loss, consistent_code, encode_specific, load_stage2, qnet_step,
    reconstruct_samples, recon_loss, save_stage2, stage2_loss, train_stage2,
)
from mrdd.services.nets import GaussianMLP, GaussianPosterior, finite_diff_check, gaussian_log_density


def _specific(d_c=4, d_s=3, channels=(1, 1)):
    torch.manual_seed(0)
    consistent = ConsistentModel(list(channels), 32, d_c=d_c, base_channels=2, dropout=0.0).freeze()
    return SpecificModel(consistent, d_s=d_s, base_channels=2, dropout=0.0, club_hidden=[8])


def _views(n=6, channels=(1, 1), seed=0):
    gen = torch.Generator().manual_seed(seed)
    return [torch.rand(n, c, 32, 32, generator=gen) for c in channels]


def _zero_noise(model, n=6):
    return [torch.zeros(n, model.d_s) for _ in range(model.n_views)]


class TestClub:
    def test_single_sample_is_zero(self):
        torch.manual_seed(0)
        qnet = GaussianMLP(3, 2, hidden=[8])
        value = club_loss(torch.randn(1, 2), torch.randn(1, 3), qnet)
        assert value.item() == pytest.approx(0.0, abs=1e-6)

    def test_matches_pairwise_definition(self):
        torch.manual_seed(0)
        qnet = GaussianMLP(3, 2, hidden=[8]).double()
        gen = torch.Generator().manual_seed(1)
        s = torch.randn(7, 2, dtype=torch.float64, generator=gen)
        c = torch.randn(7, 3, dtype=torch.float64, generator=gen)
        post = qnet(c)
        positive = gaussian_log_density(s, post).mean()
        negative = torch.stack([
            gaussian_log_density(s[l:l + 1].expand_as(s), post) for l in range(7)
        ]).mean()
        torch.testing.assert_close(club_loss(s, c, qnet), positive - negative)

    def test_learning_loss_is_nll(self):
        torch.manual_seed(0)
        qnet = GaussianMLP(3, 2, hidden=[8])
        s, c = torch.randn(5, 2), torch.randn(5, 3)
        torch.testing.assert_close(club_learning_loss(s, c, qnet), -gaussian_log_density(s, qnet(c)).mean())

    def test_empty_batch(self):
        qnet = GaussianMLP(3, 2, hidden=[8])
        with pytest.raises(ValueError):
            club_loss(torch.zeros(0, 2), torch.zeros(0, 3), qnet)

    def test_row_mismatch(self):
        qnet = GaussianMLP(3, 2, hidden=[8])
        with pytest.raises(ValueError, match="rows"):
            club_loss(torch.zeros(4, 2), torch.zeros(3, 3), qnet)


class _ExactConditional(torch.nn.Module):
    """q(s | c) = N(rho * c, 1 - rho^2), the true conditional of a unit Gaussian pair."""

    def __init__(self, rho):
        super().__init__()
        self.rho = rho

    def forward(self, c):
        return GaussianPosterior(self.rho * c, torch.full_like(c, math.log(1 - self.rho ** 2)))


def _gaussian_pair(rho, n, seed=0):
    gen = torch.Generator().manual_seed(seed)
    c = torch.randn(n, 1, dtype=torch.float64, generator=gen)
    s = rho * c + math.sqrt(1 - rho ** 2) * torch.randn(n, 1, dtype=torch.float64, generator=gen)
    return s, c


class TestClubGaussianOracle:
    # With the true conditional, CLUB evaluates to rho^2 / (1 - rho^2), which
    # lies above I(s; c) = -0.5 * log(1 - rho^2) for every rho.
    @pytest.mark.parametrize("rho", [0.0, 0.5, 0.9])
    def test_exact_conditional(self, rho):
        s, c = _gaussian_pair(rho, 20000)
        value = club_loss(s, c, _ExactConditional(rho)).item()
        assert value == pytest.approx(rho ** 2 / (1 - rho ** 2), rel=0.03, abs=0.03)
        assert value >= -0.5 * math.log(1 - rho ** 2) - 0.05

    @pytest.mark.parametrize("rho", [0.0, 0.5, 0.9])
    def test_trained_conditional_is_an_upper_bound(self, rho):
        s, c = _gaussian_pair(rho, 4000, seed=1)
        torch.manual_seed(0)
        qnet = GaussianMLP(1, 1, hidden=[16]).double()
        optimizer = Adam(qnet.parameters(), lr=1e-2)
        for _ in range(1000):
            optimizer.zero_grad()
            club_learning_loss(s, c, qnet).backward()
            optimizer.step()
        with torch.no_grad():
            value = club_loss(s, c, qnet).item()
        assert value >= -0.5 * math.log(1 - rho ** 2) - 0.05
        assert value == pytest.approx(rho ** 2 / (1 - rho ** 2), rel=0.25, abs=0.05)


class TestGradients:
    def test_club_loss(self):
        torch.manual_seed(0)
        qnet = GaussianMLP(3, 2, hidden=[8]).double()
        gen = torch.Generator().manual_seed(4)
        s = torch.randn(4, 2, dtype=torch.float64, generator=gen).requires_grad_()
        c = torch.randn(4, 3, dtype=torch.float64, generator=gen)
        report = finite_diff_check(lambda: club_loss(s, c, qnet), [s, *qnet.parameters()])
        assert report.passed, report.worst

    def test_stage2_loss(self):
        model = _specific(d_c=3, d_s=2).double().eval()
        views = [v.double() for v in _views(n=4)]
        gen = torch.Generator().manual_seed(6)
        eps = [torch.randn(4, 2, dtype=torch.float64, generator=gen) for _ in range(2)]
        weights = LossWeights(lambda_d=0.5)
        report = finite_diff_check(lambda: stage2_loss(model, views, weights, eps=eps)[0], model.parameters(),
                                   n_coords=4)
        assert report.passed, report.worst


class TestSpecificModel:
    def test_needs_frozen_consistent_model(self):
        consistent = ConsistentModel([1, 1], 32, d_c=4, base_channels=2)
        with pytest.raises(ValueError, match="frozen"):
            SpecificModel(consistent, d_s=3)

    def test_decoders_take_c_and_s(self):
        model = _specific(d_c=4, d_s=3)
        assert [d.latent_dim for d in model.decoders] == [7, 7]

    def test_consistent_code_is_posterior_mean(self):
        model = _specific().eval()
        views = _views()
        c = consistent_code(model, views)
        assert not c.requires_grad
        torch.testing.assert_close(c, model.consistent.encoder(views).mean)

    def test_recon_loss_dim_check(self):
        model = _specific()
        views = _views()
        posts = encode_specific(model, views)
        bad_c = torch.zeros(6, 5)
        with pytest.raises(ValueError, match="view 1"):
            recon_loss(model, views, bad_c, [p.mean for p in posts], posts)

    def test_too_many_views(self):
        with pytest.raises(ValueError):
            encode_specific(_specific(), _views(channels=(1, 1, 1)))


class TestStage2Loss:
    def test_total_is_mean_of_weighted_view_losses(self):
        model = _specific().eval()
        weights = LossWeights(lambda_d=0.3, lambda_r=2.0, beta_s=0.5)
        total, parts = stage2_loss(model, _views(), weights, eps=_zero_noise(model))
        expected = sum(0.3 * d + 2.0 * r for d, r in zip(parts["club"], parts["recon"])) / 2
        torch.testing.assert_close(total, expected)
        for r, m, k in zip(parts["recon"], parts["mse"], parts["kl"]):
            torch.testing.assert_close(r, m + 0.5 * k)

    def test_linear_in_lambda_r(self):
        model = _specific().eval()
        views = _views()
        one, _ = stage2_loss(model, views, LossWeights(lambda_d=0.0, lambda_r=1.0), eps=_zero_noise(model))
        three, _ = stage2_loss(model, views, LossWeights(lambda_d=0.0, lambda_r=3.0), eps=_zero_noise(model))
        torch.testing.assert_close(three, 3.0 * one)

    def test_lambda_d_zero_keeps_club_out_of_the_graph(self):
        model = _specific().eval()
        total, parts = stage2_loss(model, _views(), LossWeights(lambda_d=0.0), eps=_zero_noise(model))
        assert all(not d.requires_grad for d in parts["club"])
        total.backward()
        assert all(p.grad is None for p in model.qnet_parameters())

    def test_gradients_never_reach_the_consistent_encoder(self):
        model = _specific()
        total, _ = stage2_loss(model, _views())
        total.backward()
        assert all(p.grad is None for p in model.consistent.encoder.parameters())
        assert any(p.grad is not None for p in model.encoders.parameters())

    def test_noise_count_check(self):
        model = _specific()
        with pytest.raises(ValueError):
            stage2_loss(model, _views(), eps=_zero_noise(model)[:1])


class TestQnet:
    def test_steps_reduce_nll_without_touching_encoders(self):
        model = _specific()
        optimizer = Adam(model.qnet_parameters(), lr=1e-2)
        gen = torch.Generator().manual_seed(0)
        c = torch.randn(32, 4, generator=gen)
        s = [c[:, :3] * 0.5 + 0.1 * torch.randn(32, 3, generator=gen) for _ in range(2)]
        before = [p.clone() for p in model.encoders.parameters()]
        first = qnet_step(model, optimizer, c, s)
        for _ in range(50):
            last = qnet_step(model, optimizer, c, s)
        assert last < first
        for a, b in zip(before, model.encoders.parameters()):
            torch.testing.assert_close(a, b)


class TestTrainStage2:
    def test_alternating_training_keeps_encoder_frozen(self, tiny_config, toy_dataset, tmp_path):
        torch.manual_seed(0)
        consistent, _ = train_stage1(ConsistentModel.from_dataset(toy_dataset, tiny_config), toy_dataset,
                                     tiny_config)
        frozen_hash = consistent.encoder_hash()
        model = SpecificModel.from_config(consistent, tiny_config)
        model, curve = train_stage2(model, toy_dataset, tiny_config, checkpoint_dir=tmp_path)
        assert consistent.encoder_hash() == frozen_hash
        assert [row["epoch"] for row in curve] == [1, 2]
        assert {"total", "qnet_nll", "club_1", "club_2", "recon_1", "recon_2", "lr"} <= set(curve[0])
        restored = load_stage2(tmp_path / "stage2.pt")
        assert restored.consistent.encoder_hash() == frozen_hash

    def test_one_encoder_pass_per_batch(self, tiny_config, toy_dataset):
        model = SpecificModel.from_config(ConsistentModel.from_dataset(toy_dataset, tiny_config).freeze(), tiny_config)
        calls = []
        for i, encoder in enumerate(model.encoders):
            encoder.register_forward_hook(lambda module, args, out, i=i: calls.append(i))
        n_batches = len(list(iterate_batches(toy_dataset, tiny_config.train_split, tiny_config.stage2.batch_size)))
        train_stage2(model, toy_dataset, tiny_config)
        assert len(calls) == model.n_views * n_batches * tiny_config.stage2.epochs
        bn = model.encoders[0].modules()
        tracked = [m.num_batches_tracked.item() for m in bn if isinstance(m, torch.nn.BatchNorm2d)]
        assert tracked and set(tracked) == {n_batches * tiny_config.stage2.epochs}

    def test_rejects_unfrozen_encoder(self, tiny_config, toy_dataset):
        model = _specific()
        model.consistent.frozen = False
        with pytest.raises(ValueError, match="frozen"):
            train_stage2(model, toy_dataset, tiny_config)


class TestCheckpointsAndReconstruction:
    def test_stage2_round_trip(self, tmp_path):
        model = _specific().eval()
        views = _views()
        path = save_stage2(model, tmp_path / "stage2.pt")
        restored = load_stage2(path).eval()
        for a, b in zip(encode_specific(model, views), encode_specific(restored, views)):
            torch.testing.assert_close(a.mean, b.mean)
        assert restored.consistent.frozen

    def test_reconstructions(self):
        model = _specific()
        out = reconstruct_samples(model, _views(n=3))
        assert set(out) == {"original", "from_c", "from_cs"}
        for kind in out.values():
            assert [t.shape for t in kind] == [(3, 1, 32, 32)] * 2
        assert model.training
