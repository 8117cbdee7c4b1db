import math

import numpy as np
import pytest
import torch

from prvr.encoders import EncodedBatch
from prvr.losses import (
    LossConfig,
    base_loss,
    cosine,
    cosine_matrix,
    infonce_from_sim,
    key_moment,
    moment_similarities,
    triplet_from_sim,
    triplet_scalar,
)

from oracles import (
    base_loss_np,
    cosine_np,
    infonce_np,
    moment_pair_matrix_np,
    triplet_hinge_np,
)


class TestCosine:
    def test_self_similarity_is_one(self, rng):
        for _ in range(10):
            x = torch.as_tensor(rng.standard_normal(6))
            assert cosine(x, x).item() == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])).item() == 0.0

    def test_antiparallel(self):
        a = torch.tensor([1.0, 2.0, 3.0])
        assert cosine(a, -a).item() == pytest.approx(-1.0)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            cosine(torch.zeros(3), torch.ones(3))
        with pytest.raises(ValueError, match="zero-norm"):
            cosine_matrix(torch.ones(2, 3), torch.zeros(1, 3))

    def test_scale_invariance(self, rng):
        for _ in range(10):
            a = torch.as_tensor(rng.standard_normal(5))
            b = torch.as_tensor(rng.standard_normal(5))
            alpha, beta = rng.uniform(0.1, 10, size=2)
            assert cosine(alpha * a, beta * b).item() == pytest.approx(
                cosine(a, b).item(), abs=1e-12
            )


class TestKeyMoment:
    def test_exact_match(self):
        V_m = torch.eye(2)
        k, s = key_moment(V_m, torch.tensor([0.0, 1.0]))
        assert k == 1
        assert s.item() == pytest.approx(1.0)

    def test_tie_takes_smallest_index(self):
        row = torch.tensor([0.3, 0.4])
        V_m = torch.stack([row, row, row])
        k, s = key_moment(V_m, torch.tensor([1.0, 1.0]))
        assert k == 0
        assert s.item() == pytest.approx(cosine_np(row.numpy(), np.ones(2)))

    def test_matches_exhaustive_scan(self, rng):
        for _ in range(30):
            V_m = torch.as_tensor(rng.standard_normal((8, 4)))
            q = torch.as_tensor(rng.standard_normal(4))
            k, s = key_moment(V_m, q)
            sims = [cosine_np(V_m[t].numpy(), q.numpy()) for t in range(8)]
            best = max(range(8), key=lambda t: (sims[t], -t))
            assert k == best
            assert s.item() == pytest.approx(sims[best], abs=1e-12)

    def test_rescaling_does_not_move_key(self, rng):
        V_m = torch.as_tensor(rng.standard_normal((6, 4)))
        q = torch.as_tensor(rng.standard_normal(4))
        k0, _ = key_moment(V_m, q)
        scales = torch.as_tensor(rng.uniform(0.5, 4.0, size=(6, 1)))
        k1, _ = key_moment(V_m * scales, q * 2.5)
        assert k0 == k1


class TestTriplet:
    def test_satisfied_margin(self):
        assert triplet_scalar(torch.tensor(1.0), torch.tensor(0.0), 0.2).item() == 0.0

    def test_boundary_equals_margin(self):
        s = torch.tensor(0.4)
        assert triplet_scalar(s, s, 0.2).item() == pytest.approx(0.2)

    def test_batch_matches_enumeration(self, rng):
        for policy in ("hardest", "all"):
            for _ in range(20):
                S = torch.as_tensor(rng.uniform(-1, 1, size=(4, 4)))
                got = triplet_from_sim(S, 0.2, policy).item()
                assert got == pytest.approx(triplet_hinge_np(S.numpy(), 0.2, policy), abs=1e-12)

    def test_single_pair_is_zero(self):
        assert triplet_from_sim(torch.tensor([[0.5]]), 0.2).item() == 0.0


class TestInfoNCE:
    def test_single_pair_is_zero(self):
        assert infonce_from_sim(torch.tensor([[0.9]]), 1.0).item() == 0.0

    def test_two_by_two_closed_form(self):
        S = torch.tensor([[1.0, -1.0], [-1.0, 1.0]], dtype=torch.float64)
        # each anchor: -log(e / (e + e^-1)) = log(1 + e^-2)
        expected = math.log(1 + math.exp(-2))
        assert infonce_from_sim(S, 1.0).item() == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.126928, abs=1e-6)

    def test_constant_rows_give_log_n(self):
        for n in (2, 3, 5):
            S = torch.full((n, n), 0.7, dtype=torch.float64)
            assert infonce_from_sim(S, 0.5).item() == pytest.approx(math.log(n), abs=1e-9)

    def test_matches_enumeration(self, rng):
        for _ in range(20):
            S = torch.as_tensor(rng.uniform(-1, 1, size=(5, 5)))
            got = infonce_from_sim(S, 1 / 30).item()
            assert got == pytest.approx(infonce_np(S.numpy(), 1 / 30), rel=1e-9)


def random_batch(rng, n=3, T_m=4, D=8) -> EncodedBatch:
    return EncodedBatch(
        q=torch.as_tensor(rng.standard_normal((n, D))),
        v=torch.as_tensor(rng.standard_normal((n, D))),
        V_m=torch.as_tensor(rng.standard_normal((n, T_m, D))),
    )


class TestBaseLoss:
    def test_zero_lambdas_leave_triplets_only(self, rng):
        batch = random_batch(rng)
        cfg = LossConfig(lambda1=0.0, lambda2=0.0)
        parts = base_loss(batch, cfg)
        assert parts["base"].item() == pytest.approx(
            (parts["trip_v"] + parts["trip_m"]).item(), abs=1e-12
        )

    def test_aligned_batch_has_zero_triplets(self):
        # Orthogonal pairs: each q is collinear with its v and key moment,
        # cross-similarities are 0 < 1 - margin.
        n, D = 3, 8
        q = torch.eye(D)[:n] * 2.0
        v = torch.eye(D)[:n] * 0.5
        V_m = torch.stack([torch.eye(D)[i].repeat(4, 1) for i in range(n)])
        parts = base_loss(EncodedBatch(q=q, v=v, V_m=V_m), LossConfig(margin=0.2))
        assert parts["trip_v"].item() == 0.0
        assert parts["trip_m"].item() == 0.0

    def test_matches_straightline_oracle(self, rng):
        cfg = LossConfig()
        for _ in range(10):
            batch = random_batch(rng)
            got = base_loss(batch, cfg)["base"].item()
            expected = base_loss_np(
                batch.q.numpy(),
                batch.v.numpy(),
                batch.V_m.numpy(),
                cfg.margin,
                cfg.temperature,
                cfg.lambda1,
                cfg.lambda2,
            )
            assert got == pytest.approx(expected, rel=1e-9)

    def test_moment_matrix_matches_oracle(self, rng):
        batch = random_batch(rng, n=4, T_m=3, D=5)
        _, S_m, _ = moment_similarities(batch.V_m, batch.q)
        np.testing.assert_allclose(
            S_m.numpy(), moment_pair_matrix_np(batch.V_m.numpy(), batch.q.numpy()), atol=1e-12
        )

    def test_single_pair_rejected(self, rng):
        with pytest.raises(ValueError, match="at least 2"):
            base_loss(random_batch(rng, n=1), LossConfig())

    def test_losses_nonnegative_and_finite(self, rng):
        cfg = LossConfig()
        for _ in range(10):
            parts = base_loss(random_batch(rng, n=4), cfg)
            for name, val in parts.items():
                assert math.isfinite(val.item())
                assert val.item() >= 0.0


def check_gradients(loss_fn, tensors: dict, rel_tol=1e-3, abs_tol=1e-6, h=1e-5):
    """Autograd vs central finite differences, per the dual-route contract."""
    leaves = {k: t.clone().detach().requires_grad_(True) for k, t in tensors.items()}
    loss = loss_fn(**leaves)
    loss.backward()
    for name, leaf in leaves.items():
        analytic = leaf.grad.numpy().copy()

        def scalar(x, _name=name):
            args = {k: (torch.as_tensor(x) if k == _name else v.detach()) for k, v in leaves.items()}
            with torch.no_grad():
                return float(loss_fn(**args))

        from oracles import finite_difference

        numeric = finite_difference(scalar, leaf.detach().numpy().copy(), h=h)
        denom = np.maximum(np.abs(numeric), np.abs(analytic))
        small = denom < 1e-6
        rel_err = np.abs(analytic - numeric) / np.where(small, 1.0, denom)
        assert np.all(np.abs(analytic - numeric)[small] <= abs_tol), name
        assert np.all(rel_err[~small] <= rel_tol), f"{name}: max rel err {rel_err[~small].max()}"


class TestGradients:
    def test_base_loss_gradients(self, rng):
        cfg = LossConfig()

        def loss_fn(q, v, V_m):
            return base_loss(EncodedBatch(q=q, v=v, V_m=V_m), cfg)["base"]

        check_gradients(
            loss_fn,
            {
                "q": torch.as_tensor(rng.standard_normal((3, 8))),
                "v": torch.as_tensor(rng.standard_normal((3, 8))),
                "V_m": torch.as_tensor(rng.standard_normal((3, 4, 8))),
            },
        )
