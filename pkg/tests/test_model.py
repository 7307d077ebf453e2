import numpy as np
import pytest

from camoguide.model import CamoModel, ModelConfig
from camoguide.tensor import Tensor, randn
from camoguide.training import bce_seg_loss, total_loss
from camoguide.memory import classification_loss

import oracles


def small_model(channels=8, categories=3, size=64, **kw):
    cfg = ModelConfig(channels=channels, categories=categories, input_size=size, **kw)
    return CamoModel(cfg, rng=np.random.default_rng(0))


@pytest.fixture
def model():
    return small_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1)


class TestEncodeQuery:
    def test_stage_sizes_64(self, model, rng):
        stages = model.encode_query(randn(rng, (3, 64, 64)))
        assert [s.shape[1] for s in stages] == [16, 8, 4, 2]
        assert all(s.shape[0] == 8 for s in stages)

    def test_stage_sizes_384(self, rng):
        model = small_model(channels=4, size=384)
        stages = model.encode_query(randn(rng, (3, 384, 384)))
        assert [s.shape[1] for s in stages] == [96, 48, 24, 12]

    def test_zero_input_zero_biases_gives_zero(self, model):
        stages = model.encode_query(Tensor(np.zeros((3, 64, 64), dtype=np.float32)))
        for s in stages:
            assert np.array_equal(s.data, np.zeros_like(s.data))

    def test_bad_size_errors(self, model, rng):
        with pytest.raises(ValueError, match="divisible"):
            model.encode_query(randn(rng, (3, 60, 60)))


class TestEncodeReference:
    def test_zero_mask_annihilates(self, model, rng):
        img = randn(rng, (3, 64, 64))
        r = model.encode_reference(img, Tensor(np.zeros((1, 64, 64), dtype=np.float32)))
        assert np.array_equal(r.data, np.zeros(8, dtype=np.float32))

    def test_full_mask_is_plain_pooling(self, model, rng):
        img = randn(rng, (3, 64, 64))
        r = model.encode_reference(img, Tensor(np.ones((1, 64, 64), dtype=np.float32)))
        feats = model.ref_encoder.forward_top(img)
        assert np.abs(r.data - feats.data.mean(axis=(1, 2))).max() < 1e-6

    def test_pooling_linearity_in_mask(self, model, rng):
        img = randn(rng, (3, 64, 64))
        half = np.zeros((1, 64, 64), dtype=np.float32)
        half[:, :32] = 1.0
        r_half = model.encode_reference(img, Tensor(half))
        r_comp = model.encode_reference(img, Tensor(1.0 - half))
        r_full = model.encode_reference(img, Tensor(np.ones_like(half)))
        assert np.abs(r_half.data + r_comp.data - r_full.data).max() < 1e-5
        r_soft = model.encode_reference(img, Tensor(np.full_like(half, 0.5)))
        assert np.abs(r_soft.data - 0.5 * r_full.data).max() < 1e-6

    def test_mask_shape_mismatch(self, model, rng):
        with pytest.raises(ValueError, match="mask"):
            model.encode_reference(randn(rng, (3, 64, 64)),
                                   Tensor(np.zeros((1, 32, 32), dtype=np.float32)))

    def test_counter_increments(self, model, rng):
        before = model.ref_encoder_calls
        model.encode_reference(randn(rng, (3, 64, 64)),
                               Tensor(np.ones((1, 64, 64), dtype=np.float32)))
        assert model.ref_encoder_calls == before + 1


class TestQueryDescriptor:
    def test_constant_stage(self, model):
        stages = [Tensor(np.zeros((8, s, s), dtype=np.float32)) for s in (16, 8, 4, 2)]
        stages[3] = Tensor(np.full((8, 2, 2), 1.5, dtype=np.float32))
        q = model.query_descriptor(stages)
        assert np.allclose(q.data, 1.5)

    def test_matches_pool_oracle(self, model, rng):
        stages = [randn(rng, (8, s, s)) for s in (16, 8, 4, 2)]
        q = model.query_descriptor(stages)
        assert np.abs(q.data - oracles.gap_loops(stages[3].data)).max() < 1e-6


class TestRelevanceSeed:
    def test_parallel_gives_ones(self, model, rng):
        v = randn(rng, (8,))
        x4 = Tensor(np.broadcast_to(np.abs(v.data[:, None, None]) + 0.1,
                                    (8, 2, 2)).copy())
        # make every position exactly parallel to v
        x4 = Tensor(np.tile(v.data[:, None, None] * 2.0, (1, 2, 2)))
        seed = model.relevance_seed(x4, v)
        assert np.abs(seed.data - 1.0).max() < 1e-4

    def test_zero_guidance_gives_zero(self, model, rng):
        seed = model.relevance_seed(randn(rng, (8, 2, 2)),
                                    Tensor(np.zeros(8, dtype=np.float32)))
        assert np.abs(seed.data).max() < 1e-6

    def test_orthogonal_gives_zero(self, model):
        x4 = np.zeros((8, 1, 1), dtype=np.float32)
        x4[0] = 1.0
        v = np.zeros(8, dtype=np.float32)
        v[1] = 1.0
        seed = model.relevance_seed(Tensor(x4), Tensor(v))
        assert abs(seed.data[0, 0, 0]) < 1e-6

    def test_range(self, model, rng):
        seed = model.relevance_seed(randn(rng, (8, 4, 4)), randn(rng, (8,)))
        assert (seed.data >= -1.0 - 1e-5).all() and (seed.data <= 1.0 + 1e-5).all()


class TestDecodeMask:
    def test_zero_weights_zero_logits(self, model, rng):
        for name, p in model.decoder.parameters("dec").items():
            p.data[...] = 0.0
        stages = [randn(rng, (8, s, s)) for s in (16, 8, 4, 2)]
        seed = randn(rng, (1, 2, 2))
        logits = model.decode_mask(stages, seed)
        assert np.array_equal(logits.data, np.zeros((1, 64, 64), dtype=np.float32))

    @pytest.mark.parametrize("size,channels", [(64, 8), (384, 4)])
    def test_output_matches_input_size(self, size, channels, rng):
        model = small_model(channels=channels, size=size)
        probs, _ = _infer_with_memory(model, rng, size)
        assert probs.shape == (1, size, size)

    def test_gradient_reaches_every_stage(self, model, rng):
        stages = [randn(rng, (8, s, s), requires_grad=True) for s in (16, 8, 4, 2)]
        seed = randn(rng, (1, 2, 2), requires_grad=True)
        model.decode_mask(stages, seed).sum().backward()
        for s in stages:
            assert s.grad is not None and np.any(s.grad)
        assert seed.grad is not None and np.any(seed.grad)


def _infer_with_memory(model, rng, size=64):
    model.memory.ema_update(rng.standard_normal(model.cfg.channels).astype(np.float32), 0)
    model.memory.ema_update(rng.standard_normal(model.cfg.channels).astype(np.float32), 1)
    img = Tensor(rng.random((3, size, size)).astype(np.float32))
    return model.forward_infer(img)


class TestForwardTrain:
    def test_cold_start_falls_back_to_reference(self, model, rng):
        img = randn(rng, (3, 64, 64))
        r = randn(rng, (8,))
        assert not model.memory.any_initialized()
        logits, a, v = model.forward_train(img, r, 1)
        assert v is None  # fallback path: guidance was the raw reference
        assert logits.shape == (1, 64, 64)
        assert a.shape == (3,)

    def test_deterministic_logits(self, model, rng):
        img = randn(rng, (3, 64, 64))
        r = randn(rng, (8,))
        out1, _, _ = model.forward_train(img, r, 0)
        out2, _, _ = model.forward_train(img, r, 0)
        assert np.array_equal(out1.data, out2.data)

    def test_gradients_reach_predictor_and_ref_encoder(self, rng):
        model = small_model()
        model.memory.ema_update(rng.standard_normal(8).astype(np.float32), 0)
        model.memory.ema_update(rng.standard_normal(8).astype(np.float32), 1)
        img = randn(rng, (3, 64, 64))
        ref_img = randn(rng, (3, 64, 64))
        mask = (rng.random((1, 64, 64)) > 0.6).astype(np.float32)
        r = model.encode_reference(ref_img, Tensor(mask))
        logits, a, v = model.forward_train(img, r, 1)
        gt = (rng.random((1, 64, 64)) > 0.7).astype(np.float32)
        loss = total_loss(bce_seg_loss(logits, gt), classification_loss(a, 1), 0.03)
        loss.backward()
        pred_grads = [p.grad for p in model.predictor.parameters().values()]
        assert all(g is not None and np.any(g) for g in pred_grads)
        ref_grads = [p.grad for p in model.ref_encoder.parameters("ref").values()]
        assert all(g is not None and np.any(g) for g in ref_grads)

    def test_all_parameters_receive_gradient(self, rng):
        model = small_model()
        model.memory.ema_update(rng.standard_normal(8).astype(np.float32), 0)
        img = randn(rng, (3, 64, 64))
        ref_img = randn(rng, (3, 64, 64))
        mask = np.ones((1, 64, 64), dtype=np.float32)
        r = model.encode_reference(ref_img, Tensor(mask))
        logits, a, v = model.forward_train(img, r, 0)
        gt = (rng.random((1, 64, 64)) > 0.5).astype(np.float32)
        total_loss(bce_seg_loss(logits, gt), classification_loss(a, 0), 0.03).backward()
        dead = [n for n, p in model.parameters().items()
                if p.grad is None or not np.any(p.grad)]
        assert dead == []


class TestForwardInfer:
    def test_deterministic_and_bounded(self, model, rng):
        probs1, pi1 = _infer_with_memory(model, np.random.default_rng(5))
        probs2, pi2 = _infer_with_memory(small_model(), np.random.default_rng(5))
        assert np.array_equal(probs1.data, probs2.data)
        assert (probs1.data >= 0).all() and (probs1.data <= 1).all()
        assert abs(pi1.sum() - 1.0) < 1e-6 and (pi1 >= 0).all()

    def test_reference_encoder_never_invoked(self, model, rng):
        _infer_with_memory(model, rng)
        assert model.ref_encoder_calls == 0

    def test_oracle_without_label_refuses(self, rng):
        model = small_model(guidance_mode="oracle")
        model.memory.ema_update(rng.standard_normal(8).astype(np.float32), 0)
        with pytest.raises(ValueError, match="refuses"):
            model.forward_infer(Tensor(rng.random((3, 64, 64)).astype(np.float32)))

    def test_guidance_mode_changes_only_v(self, rng):
        seen = {}
        for mode in ("mixture", "oracle"):
            model = small_model(guidance_mode=mode)
            r = np.random.default_rng(7)
            model.memory.ema_update(r.standard_normal(8).astype(np.float32), 0)
            model.memory.ema_update(r.standard_normal(8).astype(np.float32), 1)
            img = Tensor(r.random((3, 64, 64)).astype(np.float32))
            stages = model.encode_query(img)
            seen[mode] = np.concatenate([s.data.ravel() for s in stages])
            probs, _ = model.forward_infer(img, y=1 if mode == "oracle" else None)
            seen[mode + "_out"] = probs.data
        assert np.array_equal(seen["mixture"], seen["oracle"])
        assert not np.array_equal(seen["mixture_out"], seen["oracle_out"])


class TestBaseline:
    def test_structure(self):
        model = small_model(no_ref_baseline=True)
        assert model.ref_encoder is None
        assert model.predictor is None
        assert model.memory is None
        assert model.baa_params == []

    def test_encoder_decoder_parity_with_full(self):
        full = small_model()
        base = small_model(no_ref_baseline=True)
        fp = full.parameters()
        bp = base.parameters()
        f_shared = {n: p.data.shape for n, p in fp.items()
                    if n.startswith(("enc.", "dec."))}
        b_shared = {n: p.data.shape for n, p in bp.items()}
        assert f_shared == b_shared

    def test_inference_works(self, rng):
        model = small_model(no_ref_baseline=True)
        probs, pi = model.forward_infer(Tensor(rng.random((3, 64, 64)).astype(np.float32)))
        assert probs.shape == (1, 64, 64)
        assert pi is None

    def test_forward_train_has_no_aux_outputs(self, rng):
        model = small_model(no_ref_baseline=True)
        logits, a, v = model.forward_train(
            Tensor(rng.random((3, 64, 64)).astype(np.float32)), None, None)
        assert a is None and v is None
