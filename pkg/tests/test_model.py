import numpy as np
import pytest

from mladapt.autodiff import NumericError, Tape, Tensor, finite_diff_check
from mladapt.checkpoint import (
    Checkpoint,
    CheckpointFormatError,
    load_checkpoint,
    restore_params,
    save_checkpoint,
    snapshot_params,
)
from mladapt.model import (
    AdaptationPlan,
    AsrModel,
    DownstreamModel,
    Featurizer,
    LowRankAdapter,
    ModelConfig,
    REFERENCE_WINDOWS,
    UpstreamModel,
    apply_plan,
    build_model,
)


def small_model(vocab_size=7, seed=0, layers=3):
    cfg = ModelConfig(
        upstream_layers=layers, dim=8, upstream_heads=2, upstream_ffn=16,
        d_proj=6, d_down=8, down_layers=1, down_heads=2, down_ffn=16,
        subsample=2,
    )
    return build_model(cfg, vocab_size, seed)


class TestUpstream:
    def test_returns_all_layer_outputs_with_input_shape(self):
        rng = np.random.default_rng(0)
        up = UpstreamModel(2, 4, 2, 8, rng)
        outs = up.forward(Tensor(rng.normal(size=(3, 4))))
        assert len(outs) == 2
        assert all(z.shape == (3, 4) for z in outs)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 8))
        m1 = small_model(seed=3)
        m2 = small_model(seed=3)
        a = m1.upstream.forward(Tensor(x))
        b = m2.upstream.forward(Tensor(x))
        for za, zb in zip(a, b):
            assert za.data.tobytes() == zb.data.tobytes()

    def test_needs_two_layers(self):
        with pytest.raises(ValueError, match="2 layers"):
            UpstreamModel(1, 4, 2, 8, np.random.default_rng(0))

    def test_non_finite_activations_name_the_layer(self):
        m = small_model()
        m.upstream.layers[1].ffn.w2.w.data[:] = np.inf
        with np.errstate(invalid="ignore"):
            with pytest.raises(NumericError, match="layer 2"):
                m.upstream.forward(
                    Tensor(np.random.default_rng(0).normal(size=(4, 8)))
                )


class TestFeaturizer:
    def test_uniform_weights_average(self):
        f = Featurizer(2)
        z1 = Tensor([[1.0, 1.0]])
        z2 = Tensor([[3.0, 3.0]])
        np.testing.assert_allclose(f([z1, z2]).data, [[2.0, 2.0]], atol=1e-15)

    def test_softmax_saturation_selects_one_layer(self):
        f = Featurizer(2)
        f.raw = Tensor(np.array([20.0, -20.0]), requires_grad=True)
        z1 = Tensor([[1.0, -1.0]])
        z2 = Tensor([[5.0, 5.0]])
        np.testing.assert_allclose(f([z1, z2]).data, z1.data, atol=1e-8)

    def test_weights_sum_to_one(self):
        f = Featurizer(4)
        f.raw = Tensor(np.random.default_rng(0).normal(size=4) * 3,
                       requires_grad=True)
        assert abs(f.effective_weights.sum() - 1.0) <= 1e-12

    def test_gradient_flows_to_raw_weights(self):
        rng = np.random.default_rng(2)
        outs = [Tensor(rng.normal(size=(3, 4))) for _ in range(3)]
        f = Featurizer(3)

        def loss(raw):
            f.raw = raw
            z = f(outs)
            return (z * z).sum()

        err = finite_diff_check(loss, Tensor(rng.normal(size=3)))
        assert err <= 1e-5
        f.raw.requires_grad = True
        with Tape() as tape:
            tape.backward(loss(f.raw))
        assert np.abs(f.raw.grad).max() > 0

    def test_empty_layer_list_rejected(self):
        with pytest.raises(ValueError):
            Featurizer(0)([])


class TestDownstream:
    def _build(self, subsample, seed=0):
        return DownstreamModel(
            d_in=8, d_proj=6, d_down=8, n_layers=1, heads=2, ffn_dim=16,
            vocab_size=5, subsample=subsample, rng=np.random.default_rng(seed),
        )

    def test_subsampled_frame_count(self):
        down = self._build(2)
        out = down(Tensor(np.random.default_rng(0).normal(size=(10, 8))))
        assert out.shape == (5, 5)

    def test_linear_input_layer_keeps_frames(self):
        down = self._build(1)
        out = down(Tensor(np.random.default_rng(0).normal(size=(10, 8))))
        assert out.shape == (10, 5)

    def test_rows_are_log_distributions(self):
        down = self._build(2)
        out = down(Tensor(np.random.default_rng(1).normal(size=(9, 8))))
        np.testing.assert_allclose(np.exp(out.data).sum(axis=1), 1.0, atol=1e-10)

    @pytest.mark.parametrize("subsample", [1, 2, 3])
    def test_output_length_formula_for_all_small_t(self, subsample):
        down = self._build(subsample)
        for t in range(2, 201, 7):
            x = Tensor(np.zeros((t, 8)))
            expected = t if subsample == 1 else (t - 1) // subsample + 1
            assert down(x).shape[0] == expected
            assert down.out_frames(t) == expected


class TestAdaptationPlans:
    def test_frozen_trains_featurizer_and_downstream_only(self):
        m = small_model()
        trainable = apply_plan(m, AdaptationPlan.frozen())
        names = [n for n, _ in trainable]
        assert "featurizer.weights" in names
        assert all(not n.startswith("upstream.") for n in names)
        upstream_trainable = [p for _, p in m.upstream.params() if p.requires_grad]
        assert upstream_trainable == []

    def test_window_trains_exactly_those_layers(self):
        m = small_model(layers=4)
        trainable = apply_plan(m, AdaptationPlan.finetune_window(2, 3))
        names = {n for n, _ in trainable}
        for name, p in m.upstream.params():
            inside = name.startswith(("upstream.layer2.", "upstream.layer3."))
            assert p.requires_grad == inside
            assert (name in names) == inside
        assert not m.featurizer.raw.requires_grad

    def test_window_out_of_range_rejected(self):
        m = small_model(layers=3)
        with pytest.raises(ValueError, match="window"):
            apply_plan(m, AdaptationPlan.finetune_window(2, 5))

    def test_lora_attaches_adapters_and_freezes_base(self):
        m = small_model()
        trainable = apply_plan(m, AdaptationPlan.low_rank(rank=2, alpha=2.0))
        names = [n for n, _ in trainable]
        lora = [n for n in names if ".lora." in n]
        # four projections per layer, two factors each
        assert len(lora) == m.upstream.n_layers * 8
        assert all(
            ".lora." in n or n.startswith("downstream.") for n in names
        )
        for layer in m.upstream.layers:
            for proj in layer.attn.projections():
                assert isinstance(proj, LowRankAdapter)
                assert not proj.base.w.requires_grad

    def test_lora_at_init_matches_base_exactly(self):
        rng = np.random.default_rng(5)
        base = small_model(seed=9)
        adapted = small_model(seed=9)
        # same last-layer routing on both sides; only the adapters differ
        apply_plan(base, AdaptationPlan.finetune_window(1, 3))
        apply_plan(adapted, AdaptationPlan.low_rank(rank=4, alpha=4.0))
        for _ in range(50):
            x = rng.normal(size=(6, 8))
            hb, _ = base.forward(x)
            ha, _ = adapted.forward(x)
            assert np.max(np.abs(hb.data - ha.data)) == 0.0

    def test_double_adapter_attachment_rejected(self):
        m = small_model()
        apply_plan(m, AdaptationPlan.low_rank(rank=2, alpha=2.0))
        with pytest.raises(ValueError, match="already"):
            apply_plan(m, AdaptationPlan.low_rank(rank=2, alpha=2.0))

    def test_reference_windows_fit_their_depths(self):
        for depth, window, lid_layers in REFERENCE_WINDOWS.values():
            low, high = window
            assert 1 <= low <= high <= depth
            assert set(lid_layers) <= set(range(low, high + 1))

    def test_out_of_window_gradients_are_absent_after_backward(self):
        from mladapt.ctc import ctc_loss

        m = small_model(layers=4)
        apply_plan(m, AdaptationPlan.finetune_window(2, 3))
        x = np.random.default_rng(0).normal(size=(9, 8))
        with Tape() as tape:
            h, _ = m.forward(x)
            loss = ctc_loss(h, [1, 2])
        tape.backward(loss)
        for name, p in m.upstream.params():
            inside = name.startswith(("upstream.layer2.", "upstream.layer3."))
            if inside:
                assert p.grad is not None
            else:
                assert p.grad is None


class TestCheckpointFormat:
    def test_roundtrip_is_bitwise(self, tmp_path):
        m = small_model(seed=4)
        ckpt = Checkpoint(params=snapshot_params(m.named_params()),
                          val_loss=1.25, step=17)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, ckpt)
        loaded = load_checkpoint(path)
        assert loaded.val_loss == 1.25 and loaded.step == 17
        assert loaded.params.keys() == ckpt.params.keys()
        for name, arr in ckpt.params.items():
            assert loaded.params[name].tobytes() == arr.tobytes()

    def test_corrupted_magic_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, Checkpoint(params={"a": np.zeros(2)}))
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_restore_by_prefix(self, tmp_path):
        donor = small_model(seed=1)
        ckpt = Checkpoint(params=snapshot_params(donor.named_params()))
        target = small_model(seed=2)
        restore_params(target.named_params(), ckpt, prefix="upstream.")
        donor_named = donor.named_params()
        target_named = target.named_params()
        for name in donor_named:
            if name.startswith("upstream."):
                assert (
                    target_named[name].data.tobytes()
                    == donor_named[name].data.tobytes()
                )
        # seed-dependent downstream weights must be untouched
        assert (
            target_named["downstream.proj.w"].data.tobytes()
            != donor_named["downstream.proj.w"].data.tobytes()
        )

    def test_restore_shape_mismatch_rejected(self):
        m = small_model()
        ckpt = Checkpoint(params={"featurizer.weights": np.zeros(99)})
        with pytest.raises(ValueError, match="shape mismatch"):
            restore_params(m.named_params(), ckpt, prefix="featurizer.")


class TestAsrModel:
    def test_frozen_mode_uses_featurizer(self):
        m = small_model()
        apply_plan(m, AdaptationPlan.frozen())
        m.featurizer.raw = Tensor(np.array([50.0, 0.0, 0.0]), requires_grad=True)
        x = np.random.default_rng(0).normal(size=(6, 8))
        h1, outs = m.forward(x)
        # saturated featurizer reproduces feeding layer 1 alone
        direct = m.downstream(outs[0])
        np.testing.assert_allclose(h1.data, direct.data, atol=1e-8)

    def test_finetune_mode_uses_last_layer(self):
        m = small_model()
        apply_plan(m, AdaptationPlan.finetune_window(1, 2))
        x = np.random.default_rng(0).normal(size=(6, 8))
        h, outs = m.forward(x)
        direct = m.downstream(outs[-1])
        assert h.data.tobytes() == direct.data.tobytes()

    def test_spec_mask_zeroes_rows(self):
        m = small_model()
        apply_plan(m, AdaptationPlan.finetune_window(1, 2))
        x = np.random.default_rng(0).normal(size=(6, 8))
        mask = np.ones((6, 8))
        mask[2:4] = 0.0
        h_masked, _ = m.forward(x, spec_mask=mask)
        assert h_masked.shape == (3, len(m.downstream.head.b.data))
