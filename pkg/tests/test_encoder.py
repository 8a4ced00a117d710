import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etusb.encoder import (
    Batch,
    ModelConfig,
    check_params,
    embed,
    encoder_block,
    export_attention,
    forward,
    forward_batch,
    init_params,
    load_checkpoint,
    loss_and_grads,
    multi_head,
    param_shapes,
    save_checkpoint,
    scaled_dot_attention,
    sinusoid_table,
)
from etusb.journey import Sample
from etusb.numerics import NumericError, ShapeError, finite_diff_grad, make_rng

from conftest import TINY, random_batch
from reference_model import reference_forward


def grad_check(config, params, batch, *, train=False, seed=None):
    """Worst elementwise relative error of the analytic gradient, over |g| > 1e-8."""

    def loss(p):
        rng = None if seed is None else make_rng(seed)
        return loss_and_grads(batch, p, config, train=train, rng=rng)[0]

    _, grads = loss_and_grads(batch, params, config, train=train,
                              rng=None if seed is None else make_rng(seed))
    worst = 0.0
    for name, value in params.items():
        def f(v, name=name):
            q = dict(params)
            q[name] = v
            return loss(q)

        num = finite_diff_grad(f, value, h=1e-5)
        g = grads[name]
        big = (np.abs(g) > 1e-8) | (np.abs(num) > 1e-8)
        if big.any():
            rel = np.abs(g - num)[big] / np.maximum(np.abs(g), np.abs(num))[big]
            worst = max(worst, float(rel.max()))
    return worst


class TestShapes:
    def test_parameter_inventory(self, tiny_config):
        shapes = param_shapes(tiny_config)
        assert shapes["E"] == (10, 8) and shapes["P"] == (5, 8)
        assert shapes["block0.Wq"] == (8, 8) and shapes["block0.W1"] == (8, 16)
        assert shapes["tower.W1"] == (4, 6) and shapes["tower.W2"] == (6, 5)
        assert shapes["out.W"] == (8 + 5, 3)

    def test_baseline_has_no_sequence_tensors(self, tiny_config):
        shapes = param_shapes(replace(tiny_config, use_sequence=False))
        assert "E" not in shapes and shapes["out.W"] == (5, 3)

    def test_heads_must_divide_d(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=5, n_features=1, d=10, heads=3)

    def test_check_params(self, tiny_config, tiny_params):
        check_params(tiny_params, tiny_config)
        bad = dict(tiny_params, E=np.zeros((3, 3)))
        with pytest.raises(ShapeError):
            check_params(bad, tiny_config)

    def test_init_is_deterministic_and_finite(self, tiny_config):
        a = init_params(tiny_config, make_rng(3))
        b = init_params(tiny_config, make_rng(3))
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
            assert np.isfinite(a[k]).all()
        assert (a["block0.ln1_g"] == 1).all() and (a["out.b"] == 0).all()

    def test_position_table_options(self, tiny_config):
        sin = init_params(tiny_config, make_rng(0))["P"]
        np.testing.assert_array_equal(sin, sinusoid_table(5, 8))
        zero = init_params(replace(tiny_config, position_init="zero"), make_rng(0))["P"]
        assert (zero == 0).all()
        xav = init_params(replace(tiny_config, position_init="xavier"), make_rng(0))["P"]
        assert np.abs(xav).max() <= math.sqrt(6 / 13)

    def test_sinusoid_values(self):
        t = sinusoid_table(3, 4)
        np.testing.assert_allclose(t[0], [0, 1, 0, 1])
        np.testing.assert_allclose(t[2], [math.sin(2), math.cos(2), math.sin(0.02), math.cos(0.02)])

    def test_per_head_xavier_bound(self):
        cfg = ModelConfig(vocab_size=5, n_features=1, d=64, heads=8)
        p = init_params(cfg, make_rng(0))
        # per-head draws are d x d/h, so their bound is wider than a d x d draw
        assert np.abs(p["block0.Wq"]).max() > math.sqrt(6 / 128)
        assert np.abs(p["block0.Wq"]).max() <= math.sqrt(6 / (64 + 8))


class TestLayers:
    def test_single_head_attention_by_hand(self):
        Q = np.array([[1.0, 0.0], [0.0, 1.0]])
        K = np.array([[1.0, 0.0], [1.0, 1.0]])
        V = np.array([[1.0, 2.0], [3.0, 4.0]])
        out, A = scaled_dot_attention(Q, K, V)
        s = 1 / math.sqrt(2)
        row1 = np.exp([s, s]) / np.exp([s, s]).sum()
        row2 = np.exp([0, s]) / np.exp([0, s]).sum()
        np.testing.assert_allclose(A, [row1, row2], atol=1e-15)
        np.testing.assert_allclose(out, A @ V, atol=1e-15)

    def test_masked_key_and_query(self):
        rng = make_rng(0)
        Q, K, V = rng.normal(size=(3, 3, 2))
        out, A = scaled_dot_attention(Q, K, V, mask=[True, True, False])
        assert (A[:, 2] == 0).all() and (A[2] == 0).all() and (out[2] == 0).all()
        np.testing.assert_allclose(A[:2].sum(axis=1), 1.0, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            scaled_dot_attention(np.zeros((2, 2)), np.zeros((3, 2)), np.zeros((3, 2)))

    def test_embed_position_contract(self, tiny_params):
        s = Sample("c", np.array([4, 4, 0, 0, 0]), np.array([0, 1, 0, 0, 0]),
                   np.array([True, True, False, False, False]), np.zeros(4))
        X = embed(s, tiny_params)
        np.testing.assert_allclose(X[0] - X[1], tiny_params["P"][0] - tiny_params["P"][1], atol=1e-15)
        assert (X[2:] == 0).all()

    def test_embed_range_checks(self, tiny_params):
        s = Sample("c", np.array([12, 0]), np.array([0, 0]), np.array([True, False]), np.zeros(4))
        with pytest.raises(IndexError):
            embed(s, tiny_params)

    def test_ffn_is_position_wise(self, tiny_config, tiny_params):
        x = np.tile(make_rng(1).normal(size=8), (3, 1))
        out, A = encoder_block(x, tiny_params, config=tiny_config)
        np.testing.assert_allclose(out[0], out[1], atol=1e-14)
        assert A.shape == (2, 3, 3)

    def test_multi_head_matches_per_head_loop(self, tiny_params):
        x = make_rng(2).normal(size=(4, 8))
        p = {k[len("block0."):]: v for k, v in tiny_params.items() if k.startswith("block0.")}
        parts = []
        for h in range(2):
            c = slice(4 * h, 4 * h + 4)
            parts.append(scaled_dot_attention(x @ p["Wq"][:, c], x @ p["Wk"][:, c], x @ p["Wv"][:, c])[0])
        expect = np.concatenate(parts, axis=1) @ p["Wo"]
        np.testing.assert_allclose(multi_head(x, tiny_params, heads=2), expect, atol=1e-13)


class TestForward:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_reference(self, tiny_config, seed):
        cfg = replace(tiny_config, blocks=2)
        params = init_params(cfg, make_rng(seed))
        batch = random_batch(cfg, make_rng(100 + seed), 4)
        tr = forward_batch(batch, params, cfg)
        for i in range(4):
            n = int(batch.mask[i].sum())
            probs, logits, att = reference_forward(batch.token_ids[i, :n].tolist(), list(range(n)),
                                                   batch.nonseq[i].tolist(), params, heads=2, blocks=2)
            np.testing.assert_allclose(tr.logits[i], logits, rtol=0, atol=1e-10)
            np.testing.assert_allclose(tr.probs[i], probs, rtol=0, atol=1e-12)
            for b in range(2):
                np.testing.assert_allclose(tr.attention[b][i][:, :n, :n], att[b], atol=1e-12)

    def test_padding_rows_zero_in_attention(self, tiny_config, tiny_params):
        batch = random_batch(tiny_config, make_rng(3), 6)
        A = forward_batch(batch, tiny_params, tiny_config).attention[0]
        for i in range(6):
            n = int(batch.mask[i].sum())
            assert (A[i][:, n:, :] == 0).all() and (A[i][:, :, n:] == 0).all()

    def test_dropout_only_in_training(self, tiny_config, tiny_params):
        cfg = replace(tiny_config, dropout_rate=0.5)
        batch = random_batch(cfg, make_rng(4), 3)
        ev1 = forward_batch(batch, tiny_params, cfg).logits
        ev2 = forward_batch(batch, tiny_params, cfg).logits
        tr = forward_batch(batch, tiny_params, cfg, train=True, rng=make_rng(0)).logits
        np.testing.assert_array_equal(ev1, ev2)
        assert not np.allclose(ev1, tr)
        with pytest.raises(ValueError):
            forward_batch(batch, tiny_params, cfg, train=True)

    def test_zero_dropout_train_equals_eval(self, tiny_config, tiny_params):
        batch = random_batch(tiny_config, make_rng(5), 3)
        a = forward_batch(batch, tiny_params, tiny_config).logits
        b = forward_batch(batch, tiny_params, tiny_config, train=True, rng=make_rng(1)).logits
        np.testing.assert_array_equal(a, b)

    def test_duplicate_single_token(self, tiny_config, tiny_params):
        p = dict(tiny_params, P=np.zeros_like(tiny_params["P"]))
        ns = make_rng(6).normal(size=4)
        one = Sample("a", np.array([7, 0, 0, 0, 0]), np.zeros(5, int), np.array([1, 0, 0, 0, 0], bool), ns)
        two = Sample("b", np.array([7, 7, 0, 0, 0]), np.array([0, 1, 0, 0, 0]), np.array([1, 1, 0, 0, 0], bool), ns)
        np.testing.assert_allclose(forward(one, p, tiny_config).logits, forward(two, p, tiny_config).logits,
                                   atol=1e-12)

    def test_empty_sample_rejected(self, tiny_config, tiny_params):
        batch = random_batch(tiny_config, make_rng(7), 2)
        batch.mask[1] = False
        with pytest.raises(NumericError):
            forward_batch(batch, tiny_params, tiny_config)

    def test_shape_errors(self, tiny_config, tiny_params):
        batch = random_batch(tiny_config, make_rng(8), 2)
        with pytest.raises(ShapeError):
            forward_batch(Batch(batch.token_ids, batch.position_ids, batch.mask, np.zeros((2, 9))),
                          tiny_params, tiny_config)
        bad = batch.token_ids.copy()
        bad[0, 0] = 10
        with pytest.raises(IndexError):
            forward_batch(Batch(bad, batch.position_ids, batch.mask, batch.nonseq), tiny_params, tiny_config)

    def test_baseline_ignores_tokens(self, tiny_config):
        cfg = replace(tiny_config, use_sequence=False)
        p = init_params(cfg, make_rng(0))
        b1 = random_batch(tiny_config, make_rng(9), 3)
        b2 = Batch(np.roll(b1.token_ids, 1, axis=1), b1.position_ids, b1.mask, b1.nonseq)
        np.testing.assert_array_equal(forward_batch(b1, p, cfg).logits, forward_batch(b2, p, cfg).logits)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 5))
    def test_probabilities_are_distributions(self, seed, n):
        params = init_params(TINY, make_rng(seed))
        batch = random_batch(TINY, make_rng(seed + 1), n)
        probs = forward_batch(batch, params, TINY).probs
        assert (probs >= 0).all()
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


class TestGradients:
    def test_two_blocks_with_dropout(self, tiny_config):
        cfg = replace(tiny_config, blocks=2, dropout_rate=0.2, l_max=4, d_ff=8)
        params = init_params(cfg, make_rng(21))
        rng = make_rng(22)
        for k, v in params.items():
            if v.ndim == 1:
                params[k] = v + 0.1 * rng.normal(size=v.shape)
        batch = random_batch(cfg, make_rng(23), 3)
        assert grad_check(cfg, params, batch, train=True, seed=5) < 1e-4

    def test_baseline_gradients(self, tiny_config):
        cfg = replace(tiny_config, use_sequence=False)
        params = init_params(cfg, make_rng(1))
        batch = random_batch(tiny_config, make_rng(2), 4)
        assert grad_check(cfg, params, batch) < 1e-4

    def test_padding_gets_no_gradient(self, tiny_config, tiny_params):
        batch = random_batch(tiny_config, make_rng(3), 4, min_len=1)
        batch.mask[:, 3:] = False
        _, g = loss_and_grads(batch, tiny_params, tiny_config, train=False)
        # positions 3 and 4 never occur as real positions
        assert (g["P"][3:] == 0).all()

    def test_uniform_start_loss(self):
        cfg = ModelConfig(vocab_size=12, n_features=3, d=16, heads=4, d_ff=32, l_max=6, n_classes=24)
        p = init_params(cfg, make_rng(0), zero_output=True)
        batch = random_batch(cfg, make_rng(1), 32)
        loss, _ = loss_and_grads(batch, p, cfg, train=True, rng=make_rng(2))
        assert loss == pytest.approx(math.log(24), abs=1e-12)

    def test_unlabelled_batch_rejected(self, tiny_config, tiny_params):
        batch = random_batch(tiny_config, make_rng(4), 2, labels=False)
        with pytest.raises(ValueError):
            loss_and_grads(batch, tiny_params, tiny_config)


class TestAttentionExport:
    def test_crop_and_labels(self, tiny_config, tiny_params):
        s = Sample("c", np.array([3, 4, 5, 0, 0]), np.array([0, 1, 2, 0, 0]),
                   np.array([1, 1, 1, 0, 0], bool), np.zeros(4), tokens=("a", "b", "c"))
        (amap,) = export_attention(s, tiny_params, tiny_config)
        assert amap.scores.shape == (2, 3, 3) and amap.labels == ("a", "b", "c")
        np.testing.assert_allclose(amap.scores.sum(axis=2), 1.0, atol=1e-12)

    def test_baseline_has_no_attention(self, tiny_config):
        cfg = replace(tiny_config, use_sequence=False)
        s = Sample("c", np.array([3, 0, 0, 0, 0]), np.zeros(5, int), np.array([1, 0, 0, 0, 0], bool), np.zeros(4))
        with pytest.raises(ValueError):
            export_attention(s, init_params(cfg, make_rng(0)), cfg)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, tiny_config, tiny_params):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_params, tiny_config, {"note": "x"})
        params, cfg, extra = load_checkpoint(path)
        assert cfg == tiny_config and extra == {"note": "x"}
        for k in tiny_params:
            assert params[k].tobytes() == tiny_params[k].tobytes()
        batch = random_batch(tiny_config, make_rng(0), 5)
        a = forward_batch(batch, tiny_params, tiny_config).logits
        b = forward_batch(batch, params, cfg).logits
        assert a.tobytes() == b.tobytes()

    def test_identical_bytes(self, tmp_path, tiny_config, tiny_params):
        save_checkpoint(tmp_path / "a", tiny_params, tiny_config)
        save_checkpoint(tmp_path / "b", tiny_params, tiny_config)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_readable_with_numpy(self, tmp_path, tiny_config, tiny_params):
        save_checkpoint(tmp_path / "m.npz", tiny_params, tiny_config)
        with np.load(tmp_path / "m.npz") as z:
            np.testing.assert_array_equal(z["E"], tiny_params["E"])
            assert z["E"].dtype == np.dtype("<f8")

    def test_missing_tensor(self, tmp_path, tiny_config, tiny_params):
        p = dict(tiny_params)
        del p["out.b"]
        save_checkpoint(tmp_path / "m", p, tiny_config)
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "m")
