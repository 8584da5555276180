"""Article attention, prototype prediction, and legal-level interaction."""

import math

import numpy as np
import pytest
import torch

from lexmatch.legal import (LEGAL_AFFINITIES, ArticleAttention,
                            ArticleGuidedPooling, ContextEncoder,
                            LegalInteraction, PrototypeClassifier,
                            article_summaries, cosine_rows, legal_affinity,
                            random_affinity, unit_affinity)
from lexmatch.verification import oracle_article_attention

SIGMOID_1 = 1.0 / (1.0 + math.exp(-1.0))


def random_case(rng, n=4, dim=8):
    return torch.tensor(rng.standard_normal((n, dim)), dtype=torch.float32)


class TestContextEncoder:
    def test_width_preserved(self):
        torch.manual_seed(0)
        enc = ContextEncoder(emb_dim=8)
        out = enc(torch.randn(5, 8))
        assert out.shape == (5, 8)

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError, match="even"):
            ContextEncoder(emb_dim=7)

    def test_context_sensitive(self):
        """The same sentence vector maps differently in different contexts."""
        torch.manual_seed(1)
        enc = ContextEncoder(emb_dim=8)
        shared = torch.randn(1, 8)
        a = enc(torch.cat([shared, torch.randn(2, 8)]))
        b = enc(torch.cat([shared, torch.randn(2, 8)]))
        assert not torch.allclose(a[0], b[0])


class TestArticleAttention:
    def test_shapes(self):
        torch.manual_seed(0)
        attn = ArticleAttention(emb_dim=8, attn_dim=6)
        lam, val = attn(torch.randn(5, 8), torch.randn(3, 8))
        assert lam.shape == (5, 3)
        assert val.shape == (5, 6)

    def test_matches_oracle(self):
        """Projected dot-product affinities and summaries match a loop oracle."""
        rng = np.random.default_rng(42)
        for _ in range(20):
            torch.manual_seed(int(rng.integers(1 << 30)))
            attn = ArticleAttention(emb_dim=6, attn_dim=5)
            hidden = random_case(rng, n=4, dim=6)
            memory = random_case(rng, n=3, dim=6)
            lam, val = attn(hidden, memory)
            summaries = article_summaries(lam, val)
            ref_lam, ref_val, ref_sum = oracle_article_attention(
                hidden.numpy().astype(np.float64),
                memory.numpy().astype(np.float64),
                attn.query.weight.detach().numpy().astype(np.float64),
                attn.key.weight.detach().numpy().astype(np.float64),
                attn.value.weight.detach().numpy().astype(np.float64))
            np.testing.assert_allclose(lam.detach().numpy(), ref_lam, atol=1e-5)
            np.testing.assert_allclose(val.detach().numpy(), ref_val, atol=1e-5)
            np.testing.assert_allclose(summaries.detach().numpy(), ref_sum,
                                       atol=1e-5)

    def test_empty_case_rejected(self):
        attn = ArticleAttention(emb_dim=4, attn_dim=4)
        with pytest.raises(ValueError, match="at least one"):
            attn(torch.zeros(0, 4), torch.randn(2, 4))

    def test_summary_weights_normalize_per_article(self):
        rng = np.random.default_rng(0)
        lam = torch.tensor(rng.standard_normal((6, 4)), dtype=torch.float32)
        gamma = torch.softmax(lam, dim=0)
        np.testing.assert_allclose(gamma.sum(dim=0).numpy(), 1.0, atol=1e-6)

    def test_single_sentence_summary_is_its_value(self):
        torch.manual_seed(2)
        attn = ArticleAttention(emb_dim=6, attn_dim=5)
        lam, val = attn(torch.randn(1, 6), torch.randn(3, 6))
        summaries = article_summaries(lam, val)
        for k in range(3):
            np.testing.assert_allclose(summaries[k].detach().numpy(),
                                       val[0].detach().numpy(), atol=1e-6)


class TestPrototypeClassifier:
    def test_sigmoid_of_cosine(self):
        """Summaries aligned with (or opposed to) prototypes give sigmoid(+-1)."""
        torch.manual_seed(0)
        clf = PrototypeClassifier(emb_dim=4, attn_dim=4)
        memory = torch.randn(2, 4)
        prototypes = clf.proto(memory).detach()
        probs, cosines = clf(torch.stack([prototypes[0], -prototypes[1]]),
                             memory)
        np.testing.assert_allclose(cosines.detach().numpy(), [1.0, -1.0],
                                   atol=1e-6)
        np.testing.assert_allclose(probs.detach().numpy(),
                                   [SIGMOID_1, 1.0 - SIGMOID_1], atol=1e-5)

    def test_zero_summary_counts_and_stays_neutral(self):
        torch.manual_seed(1)
        clf = PrototypeClassifier(emb_dim=4, attn_dim=4)
        probs, cosines = clf(torch.zeros(3, 4), torch.randn(3, 4))
        assert clf.zero_norm_hits == 3
        np.testing.assert_allclose(cosines.detach().numpy(), 0.0, atol=1e-6)
        np.testing.assert_allclose(probs.detach().numpy(), 0.5, atol=1e-6)

    def test_probabilities_in_unit_interval(self):
        rng = np.random.default_rng(3)
        torch.manual_seed(3)
        clf = PrototypeClassifier(emb_dim=6, attn_dim=5)
        probs, _ = clf(random_case(rng, n=4, dim=5), random_case(rng, n=4, dim=6))
        assert ((probs > 0) & (probs < 1)).all()


class TestLegalAffinity:
    def test_law_distribution_is_row_cosine(self):
        rng = np.random.default_rng(42)
        lam_x = torch.tensor(rng.standard_normal((3, 5)), dtype=torch.float32)
        lam_y = torch.tensor(rng.standard_normal((4, 5)), dtype=torch.float32)
        out = legal_affinity("law_distribution", lam_x, lam_y, None, None)
        assert out.shape == (3, 4)
        assert (out.abs() <= 1 + 1e-5).all()
        ax, ay = lam_x.numpy(), lam_y.numpy()
        for i in range(3):
            for j in range(4):
                expect = float(np.dot(ax[i], ay[j]) /
                               (np.linalg.norm(ax[i]) * np.linalg.norm(ay[j])))
                assert out[i, j].item() == pytest.approx(expect, abs=1e-5)

    def test_identical_distributions_score_one(self):
        rng = np.random.default_rng(0)
        lam = torch.tensor(rng.standard_normal((4, 6)), dtype=torch.float32)
        out = legal_affinity("law_distribution", lam, 2.0 * lam, None, None)
        np.testing.assert_allclose(out.diagonal().numpy(), 1.0, atol=1e-5)

    def test_article_count_mismatch(self):
        with pytest.raises(ValueError, match="article counts differ"):
            legal_affinity("law_distribution", torch.zeros(2, 3),
                           torch.zeros(2, 4), None, None)

    def test_unit_is_rectangular_identity(self):
        val = torch.zeros(3, 2)
        out = legal_affinity("unit", None, None, val, torch.zeros(5, 2))
        np.testing.assert_allclose(out.numpy(), np.eye(3, 5))

    def test_random_is_repeatable_and_bounded(self):
        val_x, val_y = torch.zeros(4, 2), torch.zeros(6, 2)
        a = legal_affinity("random", None, None, val_x, val_y, seed=9)
        b = legal_affinity("random", None, None, val_x, val_y, seed=9)
        c = legal_affinity("random", None, None, val_x, val_y, seed=10)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)
        assert (a.abs() <= 1).all()

    def test_random_depends_on_shape(self):
        a = random_affinity(3, 4, 0, torch.float32, "cpu")
        b = random_affinity(4, 3, 0, torch.float32, "cpu")
        assert not torch.equal(a, b.T)

    def test_embedding_distance_uses_values(self):
        rng = np.random.default_rng(5)
        val_x = random_case(rng, n=2, dim=4)
        val_y = random_case(rng, n=3, dim=4)
        out = legal_affinity("embedding_distance", None, None, val_x, val_y)
        np.testing.assert_allclose(out.numpy(),
                                   cosine_rows(val_x, val_y).numpy())

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown legal affinity"):
            legal_affinity("cosmic", None, None, torch.zeros(1, 1),
                           torch.zeros(1, 1))

    def test_affinity_names_stable(self):
        assert LEGAL_AFFINITIES == ("law_distribution", "unit", "random",
                                    "embedding_distance")


class TestCosineRows:
    def test_zero_rows_give_zero(self):
        out = cosine_rows(torch.zeros(2, 3), torch.ones(2, 3))
        np.testing.assert_allclose(out.numpy(), 0.0, atol=1e-6)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(8)
        a = random_case(rng, n=4, dim=5)
        b = random_case(rng, n=6, dim=5)
        perm = torch.tensor([2, 0, 1, 3])
        np.testing.assert_allclose(cosine_rows(a[perm], b).numpy(),
                                   cosine_rows(a, b)[perm].numpy(), atol=1e-6)


class TestLegalInteraction:
    def test_shapes_and_pooling(self):
        torch.manual_seed(0)
        rng = np.random.default_rng(0)
        module = LegalInteraction(attn_dim=5, out_dim=8)
        val_x = random_case(rng, n=3, dim=5)
        val_y = random_case(rng, n=4, dim=5)
        affinity = cosine_rows(val_x, val_y)
        hidden_x, hidden_y, rep_x, rep_y = module(affinity, val_x, val_y)
        assert hidden_x.shape == (3, 8) and hidden_y.shape == (4, 8)
        np.testing.assert_allclose(rep_x.detach().numpy(),
                                   hidden_x.max(dim=0).values.detach().numpy())
        np.testing.assert_allclose(rep_y.detach().numpy(),
                                   hidden_y.max(dim=0).values.detach().numpy())

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError, match="even"):
            LegalInteraction(attn_dim=4, out_dim=7)


class TestArticleGuidedPooling:
    def test_weights_normalize(self):
        torch.manual_seed(0)
        rng = np.random.default_rng(0)
        pool = ArticleGuidedPooling(emb_dim=6, attn_dim=5, hidden_dim=8)
        hidden = random_case(rng, n=5, dim=8)
        embs = random_case(rng, n=3, dim=6)
        pooled, psi = pool(hidden, embs, torch.tensor([True, False, True]))
        assert pooled.shape == (8,)
        assert psi.sum().item() == pytest.approx(1.0, abs=1e-6)
        assert (psi > 0).all()

    def test_pooled_is_weighted_sum(self):
        torch.manual_seed(1)
        rng = np.random.default_rng(1)
        pool = ArticleGuidedPooling(emb_dim=4, attn_dim=4, hidden_dim=6)
        hidden = random_case(rng, n=4, dim=6)
        embs = random_case(rng, n=2, dim=4)
        pooled, psi = pool(hidden, embs, torch.tensor([True, True]))
        np.testing.assert_allclose(pooled.detach().numpy(),
                                   (psi @ hidden).detach().numpy(), atol=1e-6)

    def test_no_prediction_falls_back_to_all_articles(self):
        """An empty predicted set pools with the mean over every article."""
        torch.manual_seed(2)
        rng = np.random.default_rng(2)
        pool = ArticleGuidedPooling(emb_dim=4, attn_dim=4, hidden_dim=6)
        hidden = random_case(rng, n=3, dim=6)
        embs = random_case(rng, n=4, dim=4)
        none_pooled, none_psi = pool(hidden, embs,
                                     torch.zeros(4, dtype=torch.bool))
        all_pooled, all_psi = pool(hidden, embs,
                                   torch.ones(4, dtype=torch.bool))
        np.testing.assert_allclose(none_pooled.detach().numpy(),
                                   all_pooled.detach().numpy(), atol=1e-6)
        np.testing.assert_allclose(none_psi.detach().numpy(),
                                   all_psi.detach().numpy(), atol=1e-6)

    def test_guide_changes_weights(self):
        torch.manual_seed(3)
        rng = np.random.default_rng(3)
        pool = ArticleGuidedPooling(emb_dim=4, attn_dim=4, hidden_dim=6)
        hidden = random_case(rng, n=3, dim=6)
        embs = 5.0 * random_case(rng, n=2, dim=4)
        _, psi_a = pool(hidden, embs, torch.tensor([True, False]))
        _, psi_b = pool(hidden, embs, torch.tensor([False, True]))
        assert not torch.allclose(psi_a, psi_b)
