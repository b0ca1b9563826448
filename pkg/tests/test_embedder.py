"""Contrastive loss against a literal double-loop oracle, plus embedder
training/inference contracts."""

import numpy as np
import pytest
import torch

from chirpkit.errors import DataError
from chirpkit.frontend import FixedTFR
from chirpkit.models.autoencoder import new_ae_model
from chirpkit.models.embedder import (
    ContrastiveConfig,
    contrastive_loss,
    embed,
    embed_batch,
    export_similarity_matrix,
    load_embedder,
    load_similarity_matrix,
    new_embedder_model,
    save_embedder,
    similarity,
    train_embedder,
)

from conftest import synthetic_tfr


def loss_oracle(z, beta):
    """Literal transcription: L = sum_p l_{2p,2p-1} + l_{2p-1,2p},
    l_ij = -[z_i.z_j + beta * sum_{k != i,j} min(1 - z_i.z_k, 1)^2]."""
    z = np.asarray(z, dtype=np.float64)
    n2 = z.shape[0]

    def l(i, j):
        acc = 0.0
        for k in range(n2):
            if k == i or k == j:
                continue
            acc += min(1.0 - float(z[i] @ z[k]), 1.0) ** 2
        return -(float(z[i] @ z[j]) + beta * acc)

    total = 0.0
    for p in range(n2 // 2):
        a, b = 2 * p, 2 * p + 1
        total += l(a, b) + l(b, a)
    return total


def unit_rows(rng, n2, dim):
    z = rng.normal(size=(n2, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def basis(dim, i):
    e = np.zeros(dim)
    e[i] = 1.0
    return e


class TestContrastiveLoss:
    def test_identical_pair_no_negatives(self):
        z = np.stack([basis(8, 0), basis(8, 0)])
        assert contrastive_loss(z, 3.0) == pytest.approx(-2.0, abs=1e-12)

    def test_two_orthonormal_pairs(self):
        z = np.stack([basis(8, 0), basis(8, 0), basis(8, 1), basis(8, 1)])
        # each ordered term: -(1 + 3*(1+1)) = -7
        assert contrastive_loss(z, 3.0) == pytest.approx(-28.0, abs=1e-12)

    def test_half_aligned_pairs(self):
        mix = (basis(8, 0) + basis(8, 1)) / np.sqrt(2.0)
        z = np.stack([basis(8, 0), basis(8, 0), mix, mix])
        expected = -4.0 * (1.0 + 3.0 * 2.0 * (1.0 - 1.0 / np.sqrt(2.0)) ** 2)
        assert expected == pytest.approx(-6.05887, abs=5e-6)
        assert contrastive_loss(z, 3.0) == pytest.approx(expected, rel=1e-10)

    def test_matches_oracle_over_random_batches(self, rng):
        for trial in range(100):
            n = int(rng.integers(1, 33))
            dim = int(rng.integers(2, 65))
            beta = float(rng.uniform(0.5, 5.0))
            z = unit_rows(rng, 2 * n, dim)
            got = contrastive_loss(z, beta)
            want = loss_oracle(z, beta)
            assert got == pytest.approx(want, abs=1e-5)

    def test_lower_bound_with_equality_at_orthonormal(self, rng):
        beta = 3.0
        for _ in range(20):
            n = int(rng.integers(1, 9))
            z = unit_rows(rng, 2 * n, 16)
            bound = -2 * n * (1.0 + beta * (2 * n - 2))
            assert contrastive_loss(z, beta) >= bound - 1e-9
        # equality: identical pairs, mutually orthogonal across pairs
        n = 4
        z = np.stack([basis(16, p) for p in range(n) for _ in range(2)])
        bound = -2 * n * (1.0 + beta * (2 * n - 2))
        assert contrastive_loss(z, beta) == pytest.approx(bound, abs=1e-9)

    def test_cap_makes_antipodal_no_better_than_orthogonal(self):
        # moving a non-pair member from orthogonal to antipodal changes nothing
        a, b = basis(8, 0), basis(8, 1)
        z_orth = np.stack([a, a, b, b])
        z_anti = np.stack([a, a, -a, -a])
        assert contrastive_loss(z_orth, 3.0) == pytest.approx(
            contrastive_loss(z_anti, 3.0), abs=1e-9)

    def test_rejects_non_unit_rows(self, rng):
        z = unit_rows(rng, 4, 8)
        z[1] *= 1.01
        with pytest.raises(DataError):
            contrastive_loss(z, 3.0)

    def test_rejects_odd_count(self, rng):
        with pytest.raises(DataError):
            contrastive_loss(unit_rows(rng, 3, 8), 3.0)

    def test_gradient_matches_finite_differences(self, rng):
        # 4 pairs x 8 dims at 64-bit; FD eps small enough to keep rows unit
        z0 = unit_rows(rng, 8, 8)
        beta = 3.0
        zt = torch.tensor(z0, dtype=torch.float64, requires_grad=True)
        loss = contrastive_loss(zt, beta)
        loss.backward()
        analytic = zt.grad.numpy()
        eps = 1e-6
        fd = np.zeros_like(z0)
        for i in range(z0.shape[0]):
            for j in range(z0.shape[1]):
                zp, zm = z0.copy(), z0.copy()
                zp[i, j] += eps
                zm[i, j] -= eps
                fd[i, j] = (loss_oracle(zp, beta) - loss_oracle(zm, beta)) / (2 * eps)
        denom = max(np.linalg.norm(fd), 1e-12)
        assert np.linalg.norm(analytic - fd) / denom <= 1e-4

    def test_torch_input_returns_tensor(self, rng):
        z = torch.tensor(unit_rows(rng, 4, 8))
        out = contrastive_loss(z, 3.0)
        assert isinstance(out, torch.Tensor) and out.ndim == 0


class TestEmbedInference:
    def test_unit_norm_and_deterministic(self, rng):
        model = new_embedder_model(latent_dim=16, hidden_dim=12, embed_dim=10, seed=3)
        code = rng.normal(size=16).astype(np.float32)
        e1, e2 = embed(code, model), embed(code, model)
        assert np.array_equal(e1, e2)
        assert abs(np.linalg.norm(e1) - 1.0) <= 1e-5
        assert similarity(e1, e1) == pytest.approx(1.0, abs=2e-5)

    def test_similarity_fixed_points(self):
        e1, e2 = basis(6, 0), basis(6, 1)
        assert similarity(e1, e1) == 1.0
        assert similarity(e1, e2) == 0.0
        assert similarity(e1, -e1) == -1.0

    def test_shape_mismatch_rejected(self, rng):
        model = new_embedder_model(latent_dim=16, hidden_dim=12, embed_dim=10, seed=0)
        with pytest.raises(DataError):
            embed(rng.normal(size=9).astype(np.float32), model)

    def test_untrained_paired_vs_unpaired_indistinguishable(self, rng):
        model = new_embedder_model(latent_dim=16, hidden_dim=32, embed_dim=24, seed=1)
        codes = rng.normal(size=(64, 16)).astype(np.float32)
        z = embed_batch(codes, model)
        sim = z @ z.T
        idx = np.arange(64)
        paired = sim[idx, idx ^ 1].mean()
        mask = ~np.eye(64, dtype=bool)
        mask[idx, idx ^ 1] = False
        unpaired = sim[mask].mean()
        assert abs(paired - unpaired) < 0.1


def tiny_ae(hw=(32, 64)):
    return new_ae_model(input_hw=hw, channels=(4, 8), latent_dim=16, seed=0)


def jittered_pairs(rng, n_pairs, hw=(32, 64)):
    """Pair = same blob rendered twice with a small column jitter."""
    pairs = []
    for p in range(n_pairs):
        row = int(rng.integers(4, hw[0] - 8))
        col = int(rng.integers(8, 30))
        members = []
        for m in range(2):
            v = np.zeros(hw, dtype=np.float32)
            c = col + int(rng.integers(-2, 3))
            v[row : row + 4, c : c + 6] = rng.uniform(0.6, 1.0, size=(4, 6)).astype(
                np.float32)
            members.append(FixedTFR(values=v, pad_offset=0,
                                    tfr_id=f"p{p}m{m}", provenance=None))
        pairs.append((members[0], members[1]))
    return pairs


class TestTrainEmbedder:
    def test_loss_decreases_and_metrics_tracked(self, rng):
        ae = tiny_ae()
        pairs = jittered_pairs(rng, 24)
        cfg = ContrastiveConfig(seed=11, epochs=6, batch_pairs=8, latent_dim=16,
                                hidden_dim=32, embed_dim=24)
        model = train_embedder(pairs, ae, cfg)
        hist = model.metadata["loss_history"]
        assert len(hist["train_loss"]) == 6
        assert hist["train_loss"][-1] < hist["train_loss"][0]
        assert len(hist["val_paired_sim"]) == 6
        assert model.metadata["n_val_pairs"] == 2  # 10% of 24

    def test_deterministic_given_seed(self, rng):
        ae = tiny_ae()
        pairs = jittered_pairs(rng, 8)
        cfg = ContrastiveConfig(seed=5, epochs=2, batch_pairs=4, latent_dim=16,
                                hidden_dim=16, embed_dim=12)
        m1 = train_embedder(pairs, ae, cfg)
        m2 = train_embedder(pairs, ae, cfg)
        code = np.linspace(-1, 1, 16).astype(np.float32)
        assert np.array_equal(embed(code, m1), embed(code, m2))

    def test_too_few_pairs_rejected(self, rng):
        with pytest.raises(DataError):
            train_embedder(jittered_pairs(rng, 1), tiny_ae(),
                           ContrastiveConfig(seed=0, latent_dim=16))

    def test_config_validation(self):
        with pytest.raises(DataError):
            ContrastiveConfig(seed=0, beta=0.0)
        with pytest.raises(DataError):
            ContrastiveConfig(seed=0, batch_pairs=1)


class TestCheckpointAndExport:
    def test_save_load_round_trip(self, rng, tmp_path):
        model = new_embedder_model(latent_dim=16, hidden_dim=12, embed_dim=10, seed=7)
        model.metadata["note"] = "x"
        path = str(tmp_path / "emb.ckpt")
        save_embedder(model, path)
        loaded = load_embedder(path)
        code = rng.normal(size=16).astype(np.float32)
        assert np.array_equal(embed(code, model), embed(code, loaded))
        assert loaded.metadata["note"] == "x"

    def test_similarity_matrix_round_trip(self, rng, tmp_path):
        ids = ["a", "b", "c"]
        mat = rng.normal(size=(3, 3)).astype(np.float32)
        path = str(tmp_path / "sims.bin")
        export_similarity_matrix(path, ids, mat)
        got_ids, got = load_similarity_matrix(path)
        assert got_ids == ids
        assert np.array_equal(got, mat)

    def test_similarity_matrix_corruption_detected(self, rng, tmp_path):
        path = str(tmp_path / "sims.bin")
        export_similarity_matrix(path, ["a", "b"], np.eye(2, dtype=np.float32))
        raw = bytearray(open(path, "rb").read())
        raw[-6] ^= 0x40
        open(path, "wb").write(bytes(raw))
        from chirpkit.errors import StoreCorruptionError
        with pytest.raises(StoreCorruptionError):
            load_similarity_matrix(path)
