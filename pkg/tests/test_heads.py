import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffpolicy import tensor as T
from diffpolicy.diffusion import DiffusionBatch, DiffusionConfig, build_schedule, diffusion_loss
from diffpolicy.heads import (
    BinSpec,
    ConditionTrunk,
    DiscretizedHeadModel,
    MlpDiffusionHeadModel,
    SingleTokenChunkHeadModel,
    discretize,
    undiscretize,
    validate_head_kind,
)
from diffpolicy.model import ConfigError, ModelConfig
from diffpolicy.seeding import make_rng
from diffpolicy.tensor import Tensor

from gradcheck import finite_diff_grad, rel_error

VOCAB = ("pick the red cube", "pick the blue bar")


def tiny_cfg(**kw):
    base = dict(hidden_dim=32, n_blocks=2, n_heads=4, n_queries=2,
                qformer_depth=1, n_obs=1, chunk_len=4, vocab=VOCAB,
                image_hw=16, patch_size=8, t_max=50)
    base.update(kw)
    return ModelConfig(**base)


def batch_inputs(cfg, b=2, seed=0):
    rng = make_rng(seed, "bi")
    m = ConditionTrunk(cfg, seed=0)
    ids = np.stack([m.instr.token_ids(VOCAB[0])] * b)
    images = rng.integers(0, 256,
                          size=(b, cfg.n_obs, cfg.image_hw, cfg.image_hw, 3))
    chunks = rng.uniform(-1, 1, size=(b, cfg.chunk_len, 7))
    return ids, images, chunks


class TestBinSpec:
    def test_validation(self):
        with pytest.raises(ConfigError):
            BinSpec(lo=1.0, hi=-1.0)
        with pytest.raises(ConfigError):
            BinSpec(n_bins=1)

    def test_head_kind_validation(self):
        validate_head_kind("dit")
        with pytest.raises(ConfigError):
            validate_head_kind("unet1d")


class TestDiscretize:
    def test_edges(self):
        spec = BinSpec()
        a = np.full(7, -1.0)
        assert np.all(discretize(a, spec) == 0)
        assert np.all(discretize(np.full(7, 1.0), spec) == 255)

    def test_midpoint(self):
        spec = BinSpec()
        assert discretize(np.zeros(7), spec)[0] == 128

    def test_out_of_range_clamps(self):
        spec = BinSpec()
        assert discretize(np.full(7, -9.0), spec)[0] == 0
        assert discretize(np.full(7, 9.0), spec)[0] == 255

    def test_monotone(self):
        spec = BinSpec()
        rng = np.random.default_rng(0)
        a = rng.uniform(-1, 1, 7)
        b = a + rng.uniform(0, 0.5, 7)
        assert np.all(discretize(a, spec) <= discretize(b, spec))

    def test_undiscretize_centers(self):
        spec = BinSpec()
        assert undiscretize(np.array([0]), spec)[0] == pytest.approx(
            -1.0 + 1.0 / 256)
        assert undiscretize(np.array([128]), spec)[0] == pytest.approx(
            0.00390625)

    def test_undiscretize_range_check(self):
        with pytest.raises(IndexError):
            undiscretize(np.array([256]), BinSpec())

    def test_exhaustive_roundtrip_grid(self):
        spec = BinSpec()
        grid = np.linspace(-1, 1, 10_000)
        back = undiscretize(discretize(grid, spec), spec)
        assert np.abs(grid - back).max() <= (spec.hi - spec.lo) / 512 + 1e-12

    @given(st.floats(-1, 1))
    @settings(max_examples=60, deadline=None)
    def test_roundtrip_bound_property(self, v):
        spec = BinSpec()
        err = abs(undiscretize(discretize(np.array([v]), spec), spec)[0] - v)
        assert err <= (spec.hi - spec.lo) / 512 + 1e-12


class TestDiscretizedHead:
    def test_loss_saturated_and_uniform(self):
        cfg = tiny_cfg()
        m = DiscretizedHeadModel(cfg, seed=1)
        ids, images, chunks = batch_inputs(cfg)
        labels = discretize(chunks, m.bins)
        # saturated logits at the labels -> loss ~ 0
        b, k = chunks.shape[:2]
        logits = np.zeros((b * k * 7, 256))
        logits[np.arange(b * k * 7), labels.reshape(-1)] = 20.0
        assert T.cross_entropy(Tensor(logits),
                               labels.reshape(-1)).item() < 1e-3
        # uniform logits -> ln 256
        assert T.cross_entropy(Tensor(np.zeros((8, 256))),
                               np.zeros(8, dtype=int)).item() == pytest.approx(
            np.log(256), abs=1e-9)

    def test_loss_runs_and_masks(self):
        cfg = tiny_cfg()
        m = DiscretizedHeadModel(cfg, seed=1)
        ids, images, chunks = batch_inputs(cfg)
        valid = np.ones((2, cfg.chunk_len))
        valid[0, 2:] = 0.0
        with T.no_grad():
            full = m.loss(ids, images, chunks, valid=None).item()
            chunks2 = chunks.copy()
            chunks2[0, 2:] = 0.77  # only masked positions change
            a = m.loss(ids, images, chunks, valid=valid).item()
            b = m.loss(ids, images, chunks2, valid=valid).item()
        assert a == b
        assert a != full

    def test_gradient_check(self):
        from gradcheck import finite_diff_grad_at

        cfg = tiny_cfg(hidden_dim=16, n_heads=2, n_blocks=1, chunk_len=2)
        m = DiscretizedHeadModel(cfg, seed=2)
        ids, images, chunks = batch_inputs(cfg, b=1, seed=3)

        def loss_fn():
            return m.loss(ids, images, chunks)

        params = {k: p for k, p in m.trainable_params().items()
                  if k in ("head.w", "qformer.queries", "action_queries")}
        for p in params.values():
            p.grad = None
        loss_fn().backward()

        def value():
            with T.no_grad():
                return float(loss_fn().data)

        rng = np.random.default_rng(0)
        for name, p in params.items():
            idx = rng.choice(p.size, size=min(40, p.size), replace=False)
            num = finite_diff_grad_at(value, p.data, idx)
            ana = p.grad.ravel()[idx]
            assert rel_error(ana, num) <= 1e-4, name

    def test_decode_deterministic(self):
        cfg = tiny_cfg()
        m = DiscretizedHeadModel(cfg, seed=1)
        ids, images, _ = batch_inputs(cfg, b=1)
        a = m.sample_actions(ids, images, None, make_rng(0, "x"))
        b = m.sample_actions(ids, images, None, make_rng(99, "y"))
        assert np.array_equal(a, b)
        assert a.shape == (cfg.chunk_len, 7)


class TestMlpDiffusionHead:
    def test_weight_sharing_permutation(self):
        cfg = tiny_cfg()
        m = MlpDiffusionHeadModel(cfg, seed=1)
        rng = make_rng(4, "perm")
        emb = Tensor(rng.standard_normal((1, cfg.chunk_len, cfg.hidden_dim)))
        noised = rng.standard_normal((1, cfg.chunk_len, 7))
        t = np.array([5])
        with T.no_grad():
            base = m.denoise_from_embeddings(noised, emb, t).data
            perm = np.array([2, 0, 3, 1])
            out = m.denoise_from_embeddings(
                noised[:, perm], Tensor(emb.data[:, perm]), t).data
        np.testing.assert_allclose(out, base[:, perm], atol=1e-12)

    def test_output_shape(self):
        cfg = tiny_cfg()
        m = MlpDiffusionHeadModel(cfg, seed=1)
        ids, images, chunks = batch_inputs(cfg)
        sched = build_schedule(DiffusionConfig(T_train=50, T_sample=50))
        denoiser = m.loss_denoiser(ids, images)
        out = denoiser(chunks, None, np.array([3, 7]))
        assert out.shape == (2, cfg.chunk_len, 7)

    def test_trunk_never_sees_noised_actions(self):
        # The conditioning embeddings must be identical whatever the
        # noised actions are; only the head consumes them.
        cfg = tiny_cfg()
        m = MlpDiffusionHeadModel(cfg, seed=1)
        ids, images, chunks = batch_inputs(cfg)
        with T.no_grad():
            e1 = m.action_embeddings(ids, images).data
            e2 = m.action_embeddings(ids, images).data
        assert np.array_equal(e1, e2)

    def test_sampling_shape_and_determinism(self):
        cfg = tiny_cfg()
        m = MlpDiffusionHeadModel(cfg, seed=1)
        ids, images, _ = batch_inputs(cfg, b=1)
        dcfg = DiffusionConfig(T_train=50, T_sample=5)
        a = m.sample_actions(ids, images, dcfg, make_rng(7, "s"))
        b = m.sample_actions(ids, images, dcfg, make_rng(7, "s"))
        assert a.shape == (cfg.chunk_len, 7)
        assert np.array_equal(a, b)


class TestSingleTokenChunkHead:
    def test_output_length(self):
        cfg = tiny_cfg(chunk_len=8, hidden_dim=16, n_heads=2)
        m = SingleTokenChunkHeadModel(cfg, seed=1)
        ids, images, chunks = batch_inputs(cfg)
        with T.no_grad():
            emb = m.action_embeddings(ids, images)
            out = m.denoise_from_embeddings(chunks, emb, np.array([3, 4]))
        assert out.shape == (2, 8, 7)
        assert emb.shape[1] == 1  # single summary token

    def test_k8_gives_56_vector(self):
        cfg = tiny_cfg(chunk_len=8, hidden_dim=16, n_heads=2)
        m = SingleTokenChunkHeadModel(cfg, seed=1)
        assert m.fc3.w.shape[1] == 56

    def test_width_limit(self):
        with pytest.raises(ConfigError):
            SingleTokenChunkHeadModel(tiny_cfg(chunk_len=32, hidden_dim=16,
                                               n_heads=2), seed=0)

    def test_echo_denoiser_zero_loss(self):
        cfg = tiny_cfg(chunk_len=4)
        m = SingleTokenChunkHeadModel(cfg, seed=1)
        sched = build_schedule(DiffusionConfig(T_train=50, T_sample=50))
        chunks = make_rng(5, "e").uniform(-1, 1, (3, 4, 7))

        def echo(noised, cond, t):
            ab = sched.alpha_bar[np.asarray(t) - 1][:, None, None]
            return Tensor((noised - np.sqrt(ab) * chunks) / np.sqrt(1 - ab))

        loss = diffusion_loss(echo, DiffusionBatch(chunks=chunks), sched,
                              make_rng(6, "l"))
        assert loss.item() < 1e-20


class TestSharedConditioning:
    def test_same_config_hash_across_heads(self):
        cfg = tiny_cfg()
        models = [DiscretizedHeadModel(cfg, seed=0),
                  MlpDiffusionHeadModel(cfg, seed=0)]
        hashes = {m.cfg.config_hash() for m in models}
        assert len(hashes) == 1
