import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import checks
from promptdet.exceptions import InputError, ShapeError
from promptdet.synthdata import DatasetConfig, caption_for, generate_scene
from promptdet.vlm import (ClassEmbeddings, DenseFeatureMap, EncoderParams, ImageEncoder, PretrainConfig,
                           TextEncoder, ToyVLM, Tokenizer, class_embeddings, contrastive_loss,
                           dense_score_map, encode_image_dense, encode_text, init_encoders,
                           pretrain_contrastive)


def feature_map(values):
    values = torch.as_tensor(np.asarray(values, dtype=np.float64))
    return DenseFeatureMap(values, (1, values.shape[0]), 4)


class TestImageEncoder:
    def test_zero_image_bias_free(self):
        params = init_encoders(dim=4, channels=(3, 3), kernel=3, bias=False)
        # pixels of 0.5 are centred to exactly zero
        F = encode_image_dense(params, np.full((8, 8, 3), 0.5, dtype=np.float32))
        assert F.values.shape == (4, 4)
        assert torch.all(F.values == 0)

    def test_identical_images(self, tiny_encoders, rng):
        img = rng.random((8, 8, 3))
        a = encode_image_dense(tiny_encoders, img).values
        b = encode_image_dense(tiny_encoders, img.copy()).values
        assert torch.equal(a, b)

    def test_pointwise_linear_layer(self):
        """A 1x1 projection alone equals a per-pixel matrix product."""
        enc = ImageEncoder(dim=2, channels=(), kernel=1).double()
        W = np.array([[1.0, -2.0, 0.5], [0.25, 3.0, -1.0]])
        b = np.array([0.1, -0.2])
        with torch.no_grad():
            enc.proj.weight.copy_(torch.as_tensor(W).reshape(2, 3, 1, 1))
            enc.proj.bias.copy_(torch.as_tensor(b))
        params = EncoderParams(enc, TextEncoder(len(Tokenizer()), 2, 2).double())
        img = np.arange(12, dtype=np.float64).reshape(2, 2, 3) / 12
        F = encode_image_dense(params, img)
        expected = (img.reshape(4, 3) - 0.5) @ W.T + b
        assert F.grid == (2, 2)
        np.testing.assert_allclose(F.values.detach().numpy(), expected, atol=1e-12)

    def test_stride_mismatch(self, tiny_encoders):
        with pytest.raises(ShapeError):
            encode_image_dense(tiny_encoders, np.zeros((6, 8, 3)))


class TestTextEncoder:
    def test_empty(self, tiny_encoders):
        assert encode_text(tiny_encoders, []).values.shape == (0, 4)

    def test_one_token(self, tiny_encoders):
        te = tiny_encoders.text_encoder
        row = encode_text(tiny_encoders, [[5]]).values[0]
        direct = te.linear.weight @ te.table.weight[5] + te.linear.bias
        np.testing.assert_allclose(row.detach().numpy(), (direct / direct.norm()).detach().numpy(), atol=1e-12)

    def test_two_tokens(self, tiny_encoders):
        te = tiny_encoders.text_encoder
        row = encode_text(tiny_encoders, [[3, 9]], normalize=False).values[0].detach().numpy()
        table = te.table.weight.detach().numpy()
        W, b = te.linear.weight.detach().numpy(), te.linear.bias.detach().numpy()
        expected = W @ ((table[3] + table[9]) / 2) + b
        np.testing.assert_allclose(row, expected, atol=1e-12)

    def test_bad_token(self, tiny_encoders):
        with pytest.raises(InputError):
            encode_text(tiny_encoders, [[999]])
        with pytest.raises(InputError):
            Tokenizer().encode("a photo of a purple blob")

    def test_names_map_to_template(self, tiny_encoders):
        tok = tiny_encoders.tokenizer
        assert tok.template_tokens("red-circle") == tok.encode("a photo of a red circle")
        emb = class_embeddings(tiny_encoders, ["red-circle", "blue-cross"], "a photo of a {}")
        assert emb.names == ("red-circle", "blue-cross") and emb.values.shape == (2, 4)


class TestScoreMap:
    def test_pick_out(self):
        S = dense_score_map(feature_map([[1.0, 0.0]]), ClassEmbeddings(torch.eye(2, dtype=torch.float64)))
        assert S.values.tolist() == [[1.0, 0.0]]

    def test_zero_row(self):
        T = ClassEmbeddings(torch.as_tensor(np.random.default_rng(0).normal(size=(3, 2))))
        S = dense_score_map(feature_map([[0.0, 0.0]]), T)
        assert torch.all(S.values == 0)

    def test_triple_loop_oracle(self, rng):
        F = rng.normal(size=(3, 5))
        T = rng.normal(size=(4, 5))
        S = dense_score_map(feature_map(F), ClassEmbeddings(torch.as_tensor(T))).values.numpy()
        for p in range(3):
            for c in range(4):
                acc = 0.0
                for d in range(5):
                    acc += F[p, d] * T[c, d]
                assert abs(S[p, c] - acc) < 1e-12

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            dense_score_map(feature_map([[1.0, 0.0]]), ClassEmbeddings(torch.zeros(2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100.0))
    def test_scale_covariance(self, seed, a):
        r = np.random.default_rng(seed)
        F, T = r.normal(size=(6, 3)), ClassEmbeddings(torch.as_tensor(r.normal(size=(4, 3))))
        S = dense_score_map(feature_map(F), T).values
        Sa = dense_score_map(feature_map(a * F), T).values
        np.testing.assert_allclose(Sa.numpy(), a * S.numpy(), rtol=1e-10, atol=1e-12)
        assert torch.equal(S.argmax(dim=1), Sa.argmax(dim=1))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_equivariance(self, seed):
        r = np.random.default_rng(seed)
        F, T = r.normal(size=(5, 3)), r.normal(size=(4, 3))
        perm = r.permutation(4)
        S = dense_score_map(feature_map(F), ClassEmbeddings(torch.as_tensor(T))).values.numpy()
        Sp = dense_score_map(feature_map(F), ClassEmbeddings(torch.as_tensor(T[perm]))).values.numpy()
        np.testing.assert_array_equal(Sp, S[:, perm])


class TestPretraining:
    def test_uniform_loss_is_log_batch(self):
        """Random high-dimensional unit vectors give nearly uniform logits."""
        gen = torch.Generator().manual_seed(0)
        for b in (4, 8, 16):
            img = torch.nn.functional.normalize(torch.randn(b, 512, generator=gen), dim=1)
            txt = torch.nn.functional.normalize(torch.randn(b, 512, generator=gen), dim=1)
            loss = contrastive_loss(img, txt, 1.0).item()
            assert abs(loss - math.log(b)) <= 0.15 * math.log(b)

    def test_duplicate_captions_masked(self):
        img = torch.eye(3, dtype=torch.float64)
        txt = torch.eye(3, dtype=torch.float64)
        txt[1] = txt[0]
        masked = contrastive_loss(img, txt, 1.0, labels=[0, 0, 1])
        unmasked = contrastive_loss(img, txt, 1.0)
        assert masked < unmasked

    def _corpus(self, n=12):
        cfg = DatasetConfig()
        scenes = [generate_scene(cfg, 0, f"p{i}") for i in range(n)]
        return [s[0] for s in scenes], [caption_for(s[1], cfg.categories) for s in scenes]

    def test_zero_epochs_is_identity(self):
        images, captions = self._corpus()
        params = init_encoders(seed=1)
        before = params.state_hash()
        out, losses = pretrain_contrastive(images, captions, PretrainConfig(epochs=0), params)
        assert out.state_hash() == before and losses == [] and out.frozen

    def test_loss_decreases_and_freezes(self):
        images, captions = self._corpus(32)
        params, losses = pretrain_contrastive(images, captions, PretrainConfig(epochs=6, batch_size=16))
        assert losses[-1] < losses[0]
        assert all(not p.requires_grad for p in params.parameters())

    def test_needs_two_captions(self):
        images, _ = self._corpus(3)
        with pytest.raises(InputError):
            pretrain_contrastive(images, ["a photo of a red circle"] * 3, PretrainConfig(epochs=1))
        with pytest.raises(InputError):
            pretrain_contrastive(images, ["a photo of a red circle"], PretrainConfig(epochs=1))

    def test_gradients(self):
        assert max(checks.pretrain_errors()) < 1e-4

    def test_checkpoint_round_trip(self, tmp_path):
        params = init_encoders(seed=2)
        params.save(tmp_path / "v.p3ckpt")
        back = EncoderParams.load(tmp_path / "v.p3ckpt")
        assert back.state_hash() == params.state_hash()


class TestEstimator:
    def test_fit_transform(self):
        images, captions = TestPretraining()._corpus(16)
        from promptdet.synthdata import reference_categories
        vlm = ToyVLM(epochs=1, batch_size=8).fit(images, captions, reference_categories())
        maps = vlm.transform(images[:2])
        assert len(maps) == 2 and maps[0].values.shape == (144, 16)
        assert vlm.get_params()["epochs"] == 1
        with pytest.raises(InputError):
            ToyVLM(epochs=1).fit(images, captions).transform(images[:1])
