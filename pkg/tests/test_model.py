"""Segmenter wiring: interaction arithmetic, heads, prediction entry point."""

import inspect

import pytest
import torch

from fewseg.backbone import TinyBackbone
from fewseg.config import dataclass_replace, synthetic_desk_config
from fewseg.data import episode_tensors, sample_episode
from fewseg.model import (
    FewShotSegmenter,
    build_model,
    foreground_probability,
    logits_to_mask,
    upsample_logits,
)


@pytest.fixture(scope="module")
def episode_batch():
    from fewseg.config import synthetic_desk_config
    from fewseg.data import build_dataset, make_folds

    cfg = synthetic_desk_config(synthetic_images=40, out_dir="/tmp/fewseg-tests")
    ds = build_dataset(cfg)
    fold = make_folds("synthetic", 0)
    ep = sample_episode(ds, fold, "train", 1, 2, 5)
    return cfg, ds, fold, ep, episode_tensors(ep, ds, train=True, seed=5)


class TestInteractionArithmetic:
    def test_default_channel_count(self):
        model = FewShotSegmenter(TinyBackbone(), c_merged=256, c_local=64,
                                 attn_heads=8)
        assert model.interaction_in_channels == 256 + 64 + 256 + 1  # 577

    def test_mode_channel_counts(self):
        gp = FewShotSegmenter(TinyBackbone(), c_merged=64, c_local=32,
                              prototype_mode="gp", attn_heads=4)
        assert gp.interaction_in_channels == 64 + 64 + 1
        gpgp = FewShotSegmenter(TinyBackbone(), c_merged=64, c_local=32,
                                prototype_mode="gp+gp", attn_heads=4)
        assert gpgp.interaction_in_channels == 64 + 64 + 64 + 1

    def test_zero_prototypes_and_prior_isolate_feature_term(self, episode_batch):
        cfg, ds, fold, ep, t = episode_batch
        torch.manual_seed(0)
        model = build_model(cfg)
        merged = torch.randn(cfg.c_merged, 8, 8)
        from fewseg.prototypes import PriorMask

        zero_prior = PriorMask(torch.zeros(8, 8), "high")
        from fewseg.prototypes import LocalPrototypeGrid, grid_geometry

        zero_local = LocalPrototypeGrid(torch.zeros(cfg.c_local, 4, 4),
                                        grid_geometry(8, 8, 4))
        out, _, _ = model._interact(torch.zeros(cfg.c_merged), merged,
                                    zero_prior, zero_prior, zero_local)
        # zero prototype and prior channels: only the feature slice of the
        # 1x1 kernel participates
        w = model.interaction.weight[:, cfg.c_merged + cfg.c_local:-1]
        want = torch.nn.functional.relu(
            torch.einsum("oc,chw->ohw", w[:, :, 0, 0], merged)
            + model.interaction.bias[:, None, None])
        torch.testing.assert_close(out, want, atol=1e-5, rtol=1e-5)

    def test_output_shapes(self, episode_batch):
        cfg, ds, fold, ep, t = episode_batch
        model = build_model(cfg)
        state = model.build_support_state(t.support_images, t.support_masks)
        out = model.segment(t.query_image, state)
        h = w = cfg.image_size // 4  # merged feature stride
        assert out.logits.shape == (2, h, w)
        assert out.aux_logits.shape == (2, h, w)
        assert out.augmented.shape == (cfg.c_merged, h, w)
        assert out.local_prototypes.grid.shape == (cfg.c_local, 4, 4)


class TestPrototypeModes:
    @pytest.mark.parametrize("mode", ["gp", "gp+gp", "gp+lp"])
    def test_all_modes_run_and_classify(self, episode_batch, mode):
        cfg, ds, fold, ep, t = episode_batch
        cfg = dataclass_replace(cfg, prototype_mode=mode)
        torch.manual_seed(0)
        model = build_model(cfg)
        state = model.build_support_state(t.support_images, t.support_masks)
        out = model.segment(t.query_image, state)
        assert torch.isfinite(out.logits).all()
        if mode == "gp+lp":
            assert out.local_prototypes is not None
            assert model.prototype_payload(out) is out.local_prototypes
        elif mode == "gp+gp":
            assert out.global_query_vector is not None
            assert model.prototype_payload(out) is out.global_query_vector
        else:
            assert model.prototype_payload(out) is None


class TestClassificationHead:
    def test_zero_features_zero_head_predict_background(self):
        model = FewShotSegmenter(TinyBackbone(), c_merged=16, c_local=8,
                                 attn_heads=2)
        torch.nn.init.zeros_(model.classifier.weight)
        torch.nn.init.zeros_(model.classifier.bias)
        feats = torch.zeros(16, 6, 6)
        refined = feats + torch.relu(model.refine(feats[None])[0])
        logits = model.classifier(refined[None])[0]
        assert torch.all(logits == 0)
        # uniform logits: the tie falls to background
        assert torch.all(logits_to_mask(logits) == 0)

    def test_argmax_invariant_to_constant_shift(self, rng):
        logits = torch.from_numpy(rng.standard_normal((2, 8, 8)))
        shifted = logits + 3.25
        assert torch.equal(logits_to_mask(logits), logits_to_mask(shifted))

    def test_upsample_shape(self):
        logits = torch.randn(2, 8, 8)
        up = upsample_logits(logits, (32, 32))
        assert up.shape == (2, 32, 32)

    def test_foreground_probability_normalized(self, rng):
        logits = torch.from_numpy(rng.standard_normal((2, 5, 5)))
        p = foreground_probability(logits)
        assert torch.all(p >= 0) and torch.all(p <= 1)


class TestPredictionEntryPoint:
    def test_signature_has_no_unlabeled_surface(self):
        params = list(inspect.signature(FewShotSegmenter.predict).parameters)
        assert params == ["self", "support_images", "support_masks", "query_image"]
        params = list(inspect.signature(FewShotSegmenter.predict_mask).parameters)
        assert params == ["self", "support_images", "support_masks", "query_image"]

    def test_backbone_forwards_are_exactly_k_plus_one(self, episode_batch):
        cfg, ds, fold, ep, t = episode_batch
        model = build_model(cfg)
        model.eval()
        with torch.no_grad():
            model.backbone.reset_counter()
            model.predict(t.support_images, t.support_masks, t.query_image)
        assert model.backbone.forward_count == len(t.support_images) + 1

    def test_five_shot_counts(self, desk_dataset, synthetic_fold, desk_cfg):
        ep = sample_episode(desk_dataset, synthetic_fold, "train", 5, 0, 3)
        t = episode_tensors(ep, desk_dataset, train=False, seed=3)
        model = build_model(desk_cfg)
        model.eval()
        with torch.no_grad():
            model.backbone.reset_counter()
            logits = model.predict(t.support_images, t.support_masks, t.query_image)
        assert model.backbone.forward_count == 6
        assert logits.shape == (2, 64, 64)

    def test_predict_mask_is_binary_image_sized(self, episode_batch):
        cfg, ds, fold, ep, t = episode_batch
        model = build_model(cfg)
        with torch.no_grad():
            mask = model.predict_mask(t.support_images, t.support_masks,
                                      t.query_image)
        assert mask.shape == (64, 64)
        assert set(mask.unique().tolist()) <= {0, 1}


class TestSharedMergePath:
    def test_single_merger_serves_every_branch(self, episode_batch):
        cfg, ds, fold, ep, t = episode_batch
        model = build_model(cfg)
        mergers = [m for m in model.modules()
                   if m.__class__.__name__ == "FeatureMerger"]
        assert len(mergers) == 1

    def test_merged_features_identical_across_call_sites(self, episode_batch):
        cfg, ds, fold, ep, t = episode_batch
        model = build_model(cfg)
        model.eval()
        with torch.no_grad():
            # the query path and the unlabeled path run the same features()
            _, via_query = model.features(t.query_image)
            _, via_unlabeled = model.features(t.query_image)
        assert torch.equal(via_query, via_unlabeled)


class TestGradientRouting:
    def test_interaction_gradient_flows_through_main_and_aux(self, episode_batch):
        from fewseg.losses import main_loss

        cfg, ds, fold, ep, t = episode_batch
        torch.manual_seed(4)
        model = build_model(cfg)
        for head in (model.classifier, model.aux_head):
            torch.nn.init.normal_(head.weight, std=0.2)

        def interaction_grad(use_main, use_aux):
            model.zero_grad(set_to_none=True)
            state = model.build_support_state(t.support_images, t.support_masks)
            out = model.segment(t.query_image, state)
            total, aux = main_loss(out.logits, t.query_mask, out.aux_logits)
            term = (total - aux) if use_main and not use_aux else \
                   (aux if use_aux and not use_main else total)
            term.backward()
            return model.interaction.weight.grad.clone()

        assert interaction_grad(True, False).abs().sum() > 0
        assert interaction_grad(False, True).abs().sum() > 0


class TestSupportState:
    def test_token_count_scales_with_shots(self, desk_dataset, synthetic_fold,
                                           desk_cfg):
        ep = sample_episode(desk_dataset, synthetic_fold, "train", 5, 0, 9)
        t = episode_tensors(ep, desk_dataset, train=False, seed=9)
        model = build_model(desk_cfg)
        state = model.build_support_state(t.support_images, t.support_masks)
        hw = (desk_cfg.image_size // 4) ** 2
        assert state.support_tokens.shape == (5 * hw, desk_cfg.c_merged)
        assert state.support_labels.shape == (5 * hw,)
        assert state.shots == 5

    def test_foreground_banks_cover_requested_sources(self, episode_batch):
        cfg, ds, fold, ep, t = episode_batch
        model = build_model(cfg)
        state = model.build_support_state(t.support_images, t.support_masks)
        assert set(state.fg_banks) == {"high", "low"}
        for bank in state.fg_banks.values():
            assert bank.shape[0] > 0

    def test_double_precision_supported(self, episode_batch):
        cfg, ds, fold, ep, t64 = episode_batch
        t = episode_tensors(ep, ds, train=True, seed=5, dtype=torch.float64)
        model = build_model(cfg).double()
        state = model.build_support_state(t.support_images, t.support_masks)
        out = model.segment(t.query_image, state)
        assert out.logits.dtype == torch.float64
