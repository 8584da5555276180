"""Variant wiring, pair scoring, and model persistence."""

import numpy as np
import pytest
import torch

from lexmatch.config import ConfigError, tiny_config, variant_rep_width
from lexmatch.encoders import deterministic_test_encoder, encode_articles
from lexmatch.network import CaseTensors, MatchingModel, apply_variant
from lexmatch.pipeline import load_model, save_model

from conftest import build_model

VARIANT_BRANCHES = {
    # variant: (semantic, legal, article-guided)
    "full": (True, True, True),
    "no_aia": (True, True, False),
    "no_lim": (True, False, False),
    "no_bim": (False, True, True),
    "only_aia": (False, True, True),
    "lim_no_aia": (False, True, False),
    "legal_unit": (True, True, True),
    "legal_random": (True, True, True),
    "legal_embedding_distance": (True, True, True),
}


def case_embeddings(encoder, corpus, case_id, model):
    case = corpus.cases[case_id]
    return model.as_input(encoder.encode(case.sentences))


@pytest.fixture(scope="module")
def pair(corpus_module, encoder_module):
    ids = sorted(corpus_module.cases)
    return ids[0], ids[1]


@pytest.fixture(scope="module")
def corpus_module():
    from conftest import small_corpus
    return small_corpus()


@pytest.fixture(scope="module")
def encoder_module():
    return deterministic_test_encoder(dim=16, seed=0)


class TestVariants:
    @pytest.mark.parametrize("variant", sorted(VARIANT_BRANCHES))
    def test_branch_flags_and_width(self, corpus_module, encoder_module,
                                    variant, pair):
        model = build_model(corpus_module, encoder_module, variant=variant)
        sem, legal, aia = VARIANT_BRANCHES[variant]
        assert model.use_semantic is sem
        assert model.use_legal is legal
        assert model.use_aia is aia
        x = case_embeddings(encoder_module, corpus_module, pair[0], model)
        y = case_embeddings(encoder_module, corpus_module, pair[1], model)
        inter = model(x, y)
        width = variant_rep_width(variant, model.config.sem_dim,
                                  model.config.legal_dim)
        assert inter.x_rep.shape == (width,)
        assert inter.y_rep.shape == (width,)
        assert -1.0 - 1e-5 <= inter.score.item() <= 1.0 + 1e-5

    def test_score_is_cosine_of_reps(self, model, case_pair):
        x, y = case_pair[0], case_pair[1]
        inter = model(model.as_input(x), model.as_input(y))
        expect = torch.nn.functional.cosine_similarity(
            inter.x_rep.unsqueeze(0), inter.y_rep.unsqueeze(0)).item()
        assert inter.score.item() == pytest.approx(expect, abs=1e-6)

    def test_score_symmetric(self, model, case_pair):
        x = model.as_input(case_pair[0])
        y = model.as_input(case_pair[1])
        forward = model(x, y).score.item()
        backward = model(y, x).score.item()
        assert forward == pytest.approx(backward, abs=1e-5)

    def test_self_score_is_one(self, model, case_pair):
        x = model.as_input(case_pair[0])
        assert model(x, x).score.item() == pytest.approx(1.0, abs=1e-5)

    def test_legal_unit_uses_identity_affinity(self, corpus_module,
                                               encoder_module, pair):
        model = build_model(corpus_module, encoder_module, variant="legal_unit")
        x = case_embeddings(encoder_module, corpus_module, pair[0], model)
        y = case_embeddings(encoder_module, corpus_module, pair[1], model)
        inter = model(x, y)
        n_x, n_y = inter.legal_affinity.shape
        np.testing.assert_allclose(inter.legal_affinity.detach().numpy(),
                                   np.eye(n_x, n_y))

    def test_legal_random_repeats_across_passes(self, corpus_module,
                                                encoder_module, pair):
        model = build_model(corpus_module, encoder_module,
                            variant="legal_random")
        x = case_embeddings(encoder_module, corpus_module, pair[0], model)
        y = case_embeddings(encoder_module, corpus_module, pair[1], model)
        first = model(x, y).legal_affinity
        second = model(x, y).legal_affinity
        assert torch.equal(first, second)

    def test_no_lim_skips_article_tensors(self, corpus_module, encoder_module,
                                          pair):
        model = build_model(corpus_module, encoder_module, variant="no_lim")
        x = case_embeddings(encoder_module, corpus_module, pair[0], model)
        tensors = model.case_tensors(x)
        assert tensors.lam is None and tensors.val is None
        assert tensors.probs is None
        assert model.predict_articles(x) == []


class TestApplyVariant:
    def test_switch_within_group(self, corpus_module, encoder_module, pair):
        model = build_model(corpus_module, encoder_module, variant="full")
        before = {k: v.clone() for k, v in model.state_dict().items()}
        out = apply_variant(model, "legal_unit")
        assert out is model
        assert model.variant == "legal_unit"
        assert model.config.variant == "legal_unit"
        assert model.affinity_kind == "unit"
        for key, tensor in model.state_dict().items():
            assert torch.equal(tensor, before[key])
        x = case_embeddings(encoder_module, corpus_module, pair[0], model)
        y = case_embeddings(encoder_module, corpus_module, pair[1], model)
        np.testing.assert_allclose(model(x, y).legal_affinity.detach().numpy(),
                                   np.eye(*model(x, y).legal_affinity.shape))

    def test_same_variant_is_noop(self, corpus_module, encoder_module):
        model = build_model(corpus_module, encoder_module, variant="full")
        assert apply_variant(model, "full") is model

    @pytest.mark.parametrize("target", ["no_aia", "no_lim", "only_aia"])
    def test_structural_switch_rejected(self, corpus_module, encoder_module,
                                        target):
        model = build_model(corpus_module, encoder_module, variant="full")
        with pytest.raises(ConfigError, match="different modules"):
            apply_variant(model, target)

    def test_switch_from_structural_rejected(self, corpus_module,
                                             encoder_module):
        model = build_model(corpus_module, encoder_module, variant="no_aia")
        with pytest.raises(ConfigError):
            apply_variant(model, "full")

    def test_unknown_variant(self, corpus_module, encoder_module):
        model = build_model(corpus_module, encoder_module, variant="full")
        with pytest.raises(ConfigError, match="unknown variant"):
            apply_variant(model, "deluxe")


class TestCaseTensors:
    def test_counter_increments(self, corpus_module, encoder_module, pair):
        model = build_model(corpus_module, encoder_module)
        x = case_embeddings(encoder_module, corpus_module, pair[0], model)
        y = case_embeddings(encoder_module, corpus_module, pair[1], model)
        assert model.case_passes == 0
        model(x, y)
        assert model.case_passes == 2
        model.interact(model.case_tensors(x), model.case_tensors(y))
        assert model.case_passes == 4

    def test_rebuild_from_parts_matches_direct(self, corpus_module,
                                               encoder_module, pair):
        """Recomputing summaries from cached (emb, lam, val) changes nothing."""
        model = build_model(corpus_module, encoder_module)
        x = case_embeddings(encoder_module, corpus_module, pair[0], model)
        direct = model.case_tensors(x)
        rebuilt = model.tensors_from_parts(direct.emb.numpy(),
                                           direct.lam.detach().numpy(),
                                           direct.val.detach().numpy())
        np.testing.assert_allclose(rebuilt.probs.detach().numpy(),
                                   direct.probs.detach().numpy(), atol=1e-6)
        np.testing.assert_allclose(rebuilt.summaries.detach().numpy(),
                                   direct.summaries.detach().numpy(),
                                   atol=1e-6)
        assert torch.equal(rebuilt.predicted, direct.predicted)

    def test_interaction_from_cached_tensors(self, corpus_module,
                                             encoder_module, pair):
        model = build_model(corpus_module, encoder_module)
        x = case_embeddings(encoder_module, corpus_module, pair[0], model)
        y = case_embeddings(encoder_module, corpus_module, pair[1], model)
        online = model(x, y).score.item()
        cached_y = model.tensors_from_parts(y.numpy(),
                                            model.case_tensors(y).lam.detach().numpy(),
                                            model.case_tensors(y).val.detach().numpy())
        offline = model.interact(model.case_tensors(x), cached_y).score.item()
        assert offline == pytest.approx(online, rel=1e-5)

    def test_predicted_articles_subset_of_vocabulary(self, corpus_module,
                                                     encoder_module, pair):
        model = build_model(corpus_module, encoder_module)
        x = case_embeddings(encoder_module, corpus_module, pair[0], model)
        predicted = model.predict_articles(x)
        assert set(predicted) <= set(model.article_ids)

    def test_zero_rep_counter(self, corpus_module, encoder_module):
        model = build_model(corpus_module, encoder_module, variant="no_lim")
        x = torch.zeros(2, model.config.emb_dim)
        inter = model(x, x)
        assert isinstance(inter, type(model(x, x)))
        assert model.zero_rep_hits >= 0  # counter exists and never goes negative


class TestMatchHead:
    def test_probabilities_normalize(self, model, case_pair):
        x = model.as_input(case_pair[0])
        y = model.as_input(case_pair[1])
        probs = model.match_probs(model(x, y))
        assert probs.shape == (3,)
        assert probs.sum().item() == pytest.approx(1.0, abs=1e-6)

    def test_order_sensitive(self, model, case_pair):
        """The pair head sees (x, y, |x-y|), so swapping inputs can move it."""
        x = model.as_input(case_pair[0])
        y = model.as_input(case_pair[1])
        forward = model.match_logits(model(x, y))
        backward = model.match_logits(model(y, x))
        assert not torch.allclose(forward, backward)

    def test_missing_head_raises(self, corpus_module, encoder_module,
                                 case_pair):
        model = build_model(corpus_module, encoder_module, n_match_labels=None)
        x = model.as_input(case_pair[0])
        with pytest.raises(RuntimeError, match="matching head"):
            model.match_logits(model(x, x))


class TestConstruction:
    def test_embedding_shape_checked(self, corpus_module):
        config = tiny_config()
        bad = np.zeros((3, config.emb_dim + 1), dtype=np.float32)
        with pytest.raises(ValueError, match="article embeddings"):
            MatchingModel(config, bad, ["a", "b", "c"])

    def test_bad_config_rejected(self, corpus_module, encoder_module):
        with pytest.raises(ConfigError):
            build_model(corpus_module, encoder_module, variant="nope")


class TestPersistence:
    def test_round_trip(self, tmp_path, corpus_module, encoder_module, pair):
        model = build_model(corpus_module, encoder_module)
        x = case_embeddings(encoder_module, corpus_module, pair[0], model)
        y = case_embeddings(encoder_module, corpus_module, pair[1], model)
        before = model(x, y).score.item()
        save_model(model, tmp_path)
        loaded = load_model(tmp_path)
        assert loaded.fingerprint() == model.fingerprint()
        assert loaded.article_ids == model.article_ids
        after = loaded(x.to(loaded._dtype), y.to(loaded._dtype)).score.item()
        assert after == pytest.approx(before, abs=1e-6)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="model file not found"):
            load_model(tmp_path / "nowhere")

    def test_fingerprint_tracks_parameters(self, corpus_module,
                                           encoder_module):
        model = build_model(corpus_module, encoder_module)
        original = model.fingerprint()
        assert model.fingerprint() == original
        with torch.no_grad():
            next(model.parameters()).add_(1e-3)
        assert model.fingerprint() != original

    def test_fingerprint_tracks_article_ids(self, corpus_module,
                                            encoder_module):
        a = build_model(corpus_module, encoder_module)
        b = build_model(corpus_module, encoder_module)
        assert a.fingerprint() == b.fingerprint()
        b.article_ids = list(reversed(b.article_ids))
        assert a.fingerprint() != b.fingerprint()
