"""Baseline action decoders sharing the in-context trunk.

All baselines consume the same conditioning as the in-context denoiser
(instruction tokens, compressed observation tokens) but replace the
noised action tokens with learned per-position query tokens, so noised
actions only ever reach the small head. That is the architectural
contrast the closed-loop comparisons isolate:

    dit                 the trunk itself is the denoiser (model.PolicyModel)
    discretized         256-way classifier per action dimension
    mlp_diffusion       3-layer MLP denoises each position's action,
                        conditioned on that position's trunk embedding
    single_token_chunk  one MLP denoises the whole flattened chunk from a
                        single summary embedding
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .diffusion import sample_chunk
from .model import (
    ACTION_DIM,
    Attention,
    ConfigError,
    InstructionEncoder,
    LayerNorm,
    Linear,
    ModelConfig,
    QFormer,
    SequenceLayout,
    TransformerTrunk,
    VisionEncoder,
    _register,
    causal_mask,
    sinusoid_embedding,
)
from .seeding import make_rng
from .tensor import Tensor

HEAD_KINDS = ("dit", "discretized", "mlp_diffusion", "single_token_chunk")


def validate_head_kind(kind):
    if kind not in HEAD_KINDS:
        raise ConfigError(f"unknown head kind {kind!r}; known: {HEAD_KINDS}")
    return kind


@dataclass
class BinSpec:
    n_bins: int = 256
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.lo >= self.hi:
            raise ConfigError("need lo < hi")
        if self.n_bins < 2:
            raise ConfigError("need n_bins >= 2")


def discretize(a, spec: BinSpec):
    """Per-dimension bin indices; out-of-range values clamp to edge bins."""
    a = np.asarray(a, dtype=np.float64)
    raw = np.floor((a - spec.lo) / (spec.hi - spec.lo) * spec.n_bins)
    return np.clip(raw, 0, spec.n_bins - 1).astype(np.int64)


def undiscretize(indices, spec: BinSpec):
    """Bin centers for the given indices."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= spec.n_bins):
        raise IndexError(f"bin index outside [0, {spec.n_bins})")
    width = (spec.hi - spec.lo) / spec.n_bins
    return spec.lo + (idx + 0.5) * width


class ConditionTrunk:
    """Shared encoders + causal trunk over [instruction | obs | queries].

    The trunk never sees noised actions or the diffusion timestep, so one
    trunk pass per environment step can serve every denoising iteration.
    """

    def __init__(self, cfg: ModelConfig, seed=0, n_action_tokens=None):
        self.cfg = cfg
        self.n_action_tokens = (cfg.chunk_len if n_action_tokens is None
                                else n_action_tokens)
        self.params = {}
        rng = make_rng(seed, "model-init")
        d = cfg.hidden_dim
        self.instr = InstructionEncoder(self.params, cfg, rng)
        self.vision = VisionEncoder(self.params, cfg, rng)
        self.qformer = QFormer(self.params, cfg, rng)
        self.action_queries = _register(
            self.params, "action_queries",
            0.02 * rng.standard_normal((self.n_action_tokens, d)))
        self.type_emb = _register(self.params, "type_emb",
                                  0.02 * rng.standard_normal((3, d)))
        self.slot_emb = _register(self.params, "slot_emb",
                                  0.02 * rng.standard_normal((cfg.n_obs, d)))
        n_max = (cfg.max_instruction_len() + cfg.n_obs * cfg.n_queries
                 + self.n_action_tokens)
        self.pos_emb = _register(self.params, "pos_emb",
                                 0.02 * rng.standard_normal((n_max, d)))
        self.trunk = TransformerTrunk(self.params, cfg, rng)
        self._mask_cache = {}

    def layout_for(self, instruction_len):
        return SequenceLayout(
            instruction=instruction_len,
            observation=self.cfg.n_obs * self.cfg.n_queries,
            timestep=0,
            action=self.n_action_tokens,
        )

    def action_embeddings(self, instr_ids, images):
        """(B, L) ids + (B, n_obs, H, W, 3) images -> (B, Kq, d) trunk
        outputs at the action-query positions."""
        cfg = self.cfg
        b, n_obs = images.shape[:2]
        if n_obs != cfg.n_obs:
            raise ConfigError(f"expected {cfg.n_obs} observation frames")
        instr_tokens = self.instr(instr_ids)
        flat = images.reshape((b * n_obs,) + images.shape[2:])
        patches = self.vision(flat)
        pooled_src = Tensor(np.repeat(instr_tokens.data, n_obs, axis=0))
        obs = self.qformer(patches, pooled_src)
        obs = obs.reshape(b, n_obs * cfg.n_queries, cfg.hidden_dim)

        layout = self.layout_for(instr_ids.shape[1])
        slot_rows = np.repeat(np.arange(cfg.n_obs), cfg.n_queries)
        queries = self.action_queries.reshape(
            1, self.n_action_tokens, cfg.hidden_dim) + Tensor(
            np.zeros((b, self.n_action_tokens, cfg.hidden_dim)))
        parts = [
            instr_tokens + self.type_emb[0:1, :],
            obs + self.type_emb[1:2, :] + T.embedding(self.slot_emb, slot_rows),
            queries + self.type_emb[2:3, :],
        ]
        tokens = T.concat(parts, axis=1)
        n = layout.total
        tokens = tokens + T.embedding(self.pos_emb, np.arange(n))
        if n not in self._mask_cache:
            self._mask_cache[n] = causal_mask(n)
        h = self.trunk(tokens, self._mask_cache[n])
        return h[:, layout.action_slice(), :]

    def trainable_params(self):
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def param_count(self, trainable_only=False):
        items = self.trainable_params() if trainable_only else self.params
        return sum(p.size for p in items.values())

    def state_arrays(self):
        return {k: p.data for k, p in self.params.items()}

    def load_state(self, arrays):
        for k, p in self.params.items():
            if k not in arrays:
                raise ConfigError(f"checkpoint missing parameter {k}")
            if arrays[k].shape != p.shape:
                raise ConfigError(f"checkpoint shape mismatch for {k}")
            p.data = np.asarray(arrays[k], dtype=np.float64)


class DiscretizedHeadModel(ConditionTrunk):
    """256-bin classification per action dimension, decoded by argmax."""

    head_kind = "discretized"

    def __init__(self, cfg: ModelConfig, seed=0, bins: BinSpec = None):
        super().__init__(cfg, seed=seed)
        self.bins = bins or BinSpec()
        rng = make_rng(seed, "head-init")
        self.head = Linear(self.params, "head", cfg.hidden_dim,
                           ACTION_DIM * self.bins.n_bins, rng, scale=0.02)

    def logits(self, instr_ids, images):
        emb = self.action_embeddings(instr_ids, images)
        b, k, _ = emb.shape
        return self.head(emb).reshape(b, k, ACTION_DIM, self.bins.n_bins)

    def loss(self, instr_ids, images, chunks, valid=None):
        """Mean cross-entropy over the K x 7 decisions at valid positions."""
        logits = self.logits(instr_ids, images)
        b, k = logits.shape[:2]
        labels = discretize(chunks, self.bins).reshape(-1)
        flat = logits.reshape(b * k * ACTION_DIM, self.bins.n_bins)
        if valid is not None:
            keep = np.repeat(valid.reshape(-1).astype(bool), ACTION_DIM)
            rows = np.nonzero(keep)[0]
            flat = flat[rows]
            labels = labels[rows]
        return T.cross_entropy(flat, labels)

    def sample_actions(self, instr_ids, images, diffusion_cfg, rng):
        """Argmax decode; deterministic, rng unused."""
        with T.no_grad():
            logits = self.logits(instr_ids, images)
        idx = logits.data[0].argmax(axis=-1)
        return undiscretize(idx, self.bins)


class _TimestepMlp:
    def __init__(self, params, name, dim, rng):
        self.dim = dim
        self.fc1 = Linear(params, name + ".fc1", dim, dim, rng)
        self.fc2 = Linear(params, name + ".fc2", dim, dim, rng)

    def __call__(self, t):
        sin = Tensor(sinusoid_embedding(np.atleast_1d(t), self.dim))
        return self.fc2(T.gelu(self.fc1(sin)))


class MlpDiffusionHeadModel(ConditionTrunk):
    """Per-position noise predictor: three affine layers with GELU, shared
    across positions, conditioned on concat(embedding, noised, t-embed)."""

    head_kind = "mlp_diffusion"

    def __init__(self, cfg: ModelConfig, seed=0):
        super().__init__(cfg, seed=seed)
        d = cfg.hidden_dim
        hidden = 4 * d
        rng = make_rng(seed, "head-init")
        self.t_embed = _TimestepMlp(self.params, "head.time", d, rng)
        in_dim = d + ACTION_DIM + d
        self.fc1 = Linear(self.params, "head.fc1", in_dim, hidden, rng)
        self.fc2 = Linear(self.params, "head.fc2", hidden, hidden, rng)
        self.fc3 = Linear(self.params, "head.fc3", hidden, ACTION_DIM, rng,
                          scale=0.001)

    def denoise_from_embeddings(self, noised, emb, t):
        """noised (B, K, 7), emb (B, K, d) Tensor, t (B,) -> (B, K, 7)."""
        b, k, _ = noised.shape
        temb = self.t_embed(t)                      # (B, d)
        temb = temb.reshape(b, 1, self.cfg.hidden_dim) + Tensor(
            np.zeros((b, k, self.cfg.hidden_dim)))
        x = T.concat([emb, Tensor(np.asarray(noised)), temb], axis=2)
        return self.fc3(T.gelu(self.fc2(T.gelu(self.fc1(x)))))

    def loss_denoiser(self, instr_ids, images):
        """Returns a denoiser closure with the trunk inside the graph."""
        emb = self.action_embeddings(instr_ids, images)

        def denoiser(noised, _cond, t):
            return self.denoise_from_embeddings(noised, emb, t)

        return denoiser

    def sample_actions(self, instr_ids, images, diffusion_cfg, rng):
        cfg = self.cfg
        with T.no_grad():
            emb = self.action_embeddings(instr_ids, images)

            def denoiser(values, _cond, t):
                out = self.denoise_from_embeddings(
                    values[None, ...], emb, np.array([t]))
                return out.data[0]

            return sample_chunk(denoiser, None, diffusion_cfg, rng,
                                chunk_shape=(cfg.chunk_len, ACTION_DIM))


class SingleTokenChunkHeadModel(ConditionTrunk):
    """Whole-chunk denoiser: one summary embedding, one MLP over the
    flattened K*7 action vector."""

    head_kind = "single_token_chunk"

    def __init__(self, cfg: ModelConfig, seed=0):
        super().__init__(cfg, seed=seed, n_action_tokens=1)
        d = cfg.hidden_dim
        hidden = 4 * d
        flat_dim = cfg.chunk_len * ACTION_DIM
        if flat_dim > hidden:
            raise ConfigError(
                f"flattened chunk ({flat_dim}) exceeds head width ({hidden})")
        rng = make_rng(seed, "head-init")
        self.t_embed = _TimestepMlp(self.params, "head.time", d, rng)
        self.fc1 = Linear(self.params, "head.fc1", d + flat_dim + d, hidden,
                          rng)
        self.fc2 = Linear(self.params, "head.fc2", hidden, hidden, rng)
        self.fc3 = Linear(self.params, "head.fc3", hidden, flat_dim, rng,
                          scale=0.001)

    def denoise_from_embeddings(self, noised, emb, t):
        """noised (B, K, 7), emb (B, 1, d) -> (B, K, 7)."""
        b, k, _ = noised.shape
        flat = Tensor(np.asarray(noised).reshape(b, k * ACTION_DIM))
        temb = self.t_embed(t)
        x = T.concat([emb.reshape(b, self.cfg.hidden_dim), flat, temb], axis=1)
        out = self.fc3(T.gelu(self.fc2(T.gelu(self.fc1(x)))))
        return out.reshape(b, k, ACTION_DIM)

    def loss_denoiser(self, instr_ids, images):
        emb = self.action_embeddings(instr_ids, images)

        def denoiser(noised, _cond, t):
            return self.denoise_from_embeddings(noised, emb, t)

        return denoiser

    def sample_actions(self, instr_ids, images, diffusion_cfg, rng):
        cfg = self.cfg
        with T.no_grad():
            emb = self.action_embeddings(instr_ids, images)

            def denoiser(values, _cond, t):
                out = self.denoise_from_embeddings(
                    values[None, ...], emb, np.array([t]))
                return out.data[0]

            return sample_chunk(denoiser, None, diffusion_cfg, rng,
                                chunk_shape=(cfg.chunk_len, ACTION_DIM))
