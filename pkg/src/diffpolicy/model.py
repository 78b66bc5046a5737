"""In-context transformer policy that denoises action chunks.

The pipeline: a frozen word-embedding instruction encoder, a trainable
patchify+project vision encoder, a small cross-attention compressor
(instruction-FiLM-conditioned) that squeezes patch features into a fixed
query budget, and a causal pre-norm transformer trunk that reads the
token layout [instruction | observations | timestep | noised actions]
and predicts the injected noise at the action positions.

All modules register their weights into one ordered name -> Tensor dict
so optimizers, checkpoints, and learning-rate groups can address them by
dotted path. Vision-encoder weights live under the "vision." prefix.
"""

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .diffusion import DiffusionConfig, sample_chunk
from .seeding import make_rng
from .tensor import Tensor

ACTION_DIM = 7


class VocabularyError(ValueError):
    """Instruction contains words outside the closed task vocabulary."""


class ConfigError(ValueError):
    """Model configuration is internally inconsistent."""


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    n_queries: int = 8
    qformer_depth: int = 2
    n_obs: int = 2
    chunk_len: int = 32
    vocab: tuple = ()
    image_hw: int = 32
    patch_size: int = 8
    t_max: int = 1000

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        if self.hidden_dim < ACTION_DIM:
            raise ConfigError(f"hidden_dim must be >= {ACTION_DIM}")
        if self.n_obs < 1 or self.chunk_len < 1:
            raise ConfigError("n_obs and chunk_len must be >= 1")
        if self.image_hw % self.patch_size:
            raise ConfigError("image size must be divisible by patch size")
        self.vocab = tuple(self.vocab)

    @property
    def n_patches(self):
        return (self.image_hw // self.patch_size) ** 2

    def words(self):
        """Ordered unique words over all vocab phrases."""
        seen = {}
        for phrase in self.vocab:
            for w in phrase.split():
                seen.setdefault(w, len(seen))
        return list(seen)

    def max_instruction_len(self):
        return max((len(p.split()) for p in self.vocab), default=1)

    def to_json(self):
        return json.dumps(
            {k: (list(v) if isinstance(v, tuple) else v)
             for k, v in self.__dict__.items()},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        raw["vocab"] = tuple(raw.get("vocab", ()))
        return cls(**raw)

    def config_hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass
class SequenceLayout:
    """Segment lengths of one assembled token sequence, in order."""

    instruction: int
    observation: int
    timestep: int
    action: int

    @property
    def total(self):
        return self.instruction + self.observation + self.timestep + self.action

    def action_slice(self):
        start = self.instruction + self.observation + self.timestep
        return slice(start, start + self.action)

    def segment_slices(self):
        bounds = np.cumsum([0, self.instruction, self.observation,
                            self.timestep, self.action])
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


@dataclass
class ConditioningContext:
    instruction_tokens: Tensor        # (B, L, d)
    obs_tokens: Tensor                # (B, n_obs * n_queries, d)
    timestep_token: Tensor | None = None  # (B, 1, d), filled per denoise call
    instruction_len: int = 0


@dataclass
class TokenSequence:
    tokens: Tensor                    # (B, N, d)
    layout: SequenceLayout


def film(features, gamma, beta):
    """Feature-wise affine modulation broadcast over rows."""
    return features * gamma + beta


def causal_mask(n):
    """(n, n) boolean; entry [i, j] True iff j <= i."""
    return np.tril(np.ones((n, n), dtype=bool))


def sinusoid_embedding(t, dim):
    """Classic sin/cos embedding of integer timesteps; t is (B,)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


class Linear:
    def __init__(self, params, name, d_in, d_out, rng, scale=None, bias=True):
        s = (1.0 / np.sqrt(d_in)) if scale is None else scale
        self.w = _register(params, name + ".w",
                           rng.standard_normal((d_in, d_out)) * s)
        self.b = _register(params, name + ".b", np.zeros(d_out)) if bias else None

    def __call__(self, x):
        out = x @ self.w
        return out + self.b if self.b is not None else out


class LayerNorm:
    def __init__(self, params, name, dim):
        self.g = _register(params, name + ".g", np.ones(dim))
        self.b = _register(params, name + ".b", np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x, self.g, self.b)


def _register(params, name, data, trainable=True):
    if name in params:
        raise ConfigError(f"duplicate parameter name {name}")
    p = Tensor(np.asarray(data, dtype=np.float64), requires_grad=trainable)
    params[name] = p
    return p


def _split_heads(x, n_heads):
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose((0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose((0, 2, 1, 3)).reshape(b, n, h * dh)


class Attention:
    """Multi-head attention; self- or cross- depending on kv input."""

    def __init__(self, params, name, dim, n_heads, rng, out_scale=None):
        self.n_heads = n_heads
        self.scale = 1.0 / np.sqrt(dim // n_heads)
        self.wq = Linear(params, name + ".q", dim, dim, rng)
        self.wk = Linear(params, name + ".k", dim, dim, rng)
        self.wv = Linear(params, name + ".v", dim, dim, rng)
        self.wo = Linear(params, name + ".o", dim, dim, rng, scale=out_scale)

    def __call__(self, q_in, kv_in, mask=None):
        q = _split_heads(self.wq(q_in), self.n_heads)
        k = _split_heads(self.wk(kv_in), self.n_heads)
        v = _split_heads(self.wv(kv_in), self.n_heads)
        scores = (q @ k.transpose((0, 1, 3, 2))) * self.scale
        if mask is not None:
            scores = scores + np.where(mask, 0.0, -1e9)
        att = T.softmax_lastdim(scores)
        return self.wo(_merge_heads(att @ v))


class FeedForward:
    def __init__(self, params, name, dim, rng, out_scale=None):
        self.fc1 = Linear(params, name + ".fc1", dim, 4 * dim, rng)
        self.fc2 = Linear(params, name + ".fc2", 4 * dim, dim, rng,
                          scale=out_scale)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class InstructionEncoder:
    """Frozen random word embeddings + frozen positions; closed vocabulary."""

    def __init__(self, params, cfg, rng):
        self.cfg = cfg
        self.word_list = cfg.words()
        self.word_index = {w: i for i, w in enumerate(self.word_list)}
        n_words = max(len(self.word_list), 1)
        max_len = cfg.max_instruction_len()
        self.word_emb = _register(
            params, "instr.word_emb",
            rng.standard_normal((n_words, cfg.hidden_dim)), trainable=False)
        self.pos_emb = _register(
            params, "instr.pos_emb",
            0.02 * rng.standard_normal((max_len, cfg.hidden_dim)),
            trainable=False)

    def token_ids(self, text):
        words = text.split()
        if not words:
            raise VocabularyError("empty instruction")
        unknown = [w for w in words if w not in self.word_index]
        if unknown and text not in self.cfg.vocab:
            raise VocabularyError(
                f"unknown words {unknown} in {text!r}; known phrases: "
                f"{list(self.cfg.vocab)}"
            )
        return np.array([self.word_index[w] for w in words], dtype=np.int64)

    def __call__(self, ids):
        """ids: (B, L) int array -> (B, L, d) frozen embeddings."""
        emb = T.embedding(self.word_emb, ids)
        pos = T.embedding(self.pos_emb,
                          np.broadcast_to(np.arange(ids.shape[1]), ids.shape))
        return emb + pos


class VisionEncoder:
    """Non-overlapping patchify + linear projection + learned 2-D positions.

    Trainable end-to-end; its parameters live under "vision." so the
    trainer can give them their own learning rate.
    """

    def __init__(self, params, cfg, rng):
        self.cfg = cfg
        p = cfg.patch_size
        self.proj = Linear(params, "vision.patch_proj", p * p * 3,
                           cfg.hidden_dim, rng)
        self.pos_emb = _register(
            params, "vision.pos_emb",
            0.02 * rng.standard_normal((cfg.n_patches, cfg.hidden_dim)))

    def patchify(self, images):
        """uint images (B, H, W, 3) -> float patches (B, P, p*p*3)."""
        b, h, w, c = images.shape
        if h != self.cfg.image_hw or w != self.cfg.image_hw:
            raise T.DimensionError(
                f"expected {self.cfg.image_hw}x{self.cfg.image_hw} images, "
                f"got {h}x{w}")
        p = self.cfg.patch_size
        x = np.asarray(images, dtype=np.float64) / 127.5 - 1.0
        x = x.reshape(b, h // p, p, w // p, p, c)
        x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, -1, p * p * c)
        return x

    def __call__(self, images):
        patches = Tensor(self.patchify(images))
        return self.proj(patches) + self.pos_emb


class QFormerBlock:
    def __init__(self, params, name, cfg, rng):
        d = cfg.hidden_dim
        self.ln_q = LayerNorm(params, name + ".ln_q", d)
        self.xattn = Attention(params, name + ".xattn", d, cfg.n_heads, rng)
        self.ln_f = LayerNorm(params, name + ".ln_f", d)
        self.film_proj = Linear(params, name + ".film", d, 2 * d, rng,
                                scale=0.02)
        self.ln_m = LayerNorm(params, name + ".ln_m", d)
        self.mlp = FeedForward(params, name + ".mlp", d, rng)

    def __call__(self, queries, patches, pooled_instr):
        x = queries + self.xattn(self.ln_q(queries), patches)
        gb = self.film_proj(pooled_instr)          # (B, 2d)
        d = gb.shape[-1] // 2
        gamma = gb[:, :d].reshape(-1, 1, d)
        beta = gb[:, d:].reshape(-1, 1, d)
        x = x + film(self.ln_f(x), gamma, beta)
        return x + self.mlp(self.ln_m(x))


class QFormer:
    """Learned queries cross-attending to patch features, FiLM-steered by
    the mean-pooled instruction embedding."""

    def __init__(self, params, cfg, rng):
        self.cfg = cfg
        self.queries = _register(
            params, "qformer.queries",
            0.02 * rng.standard_normal((cfg.n_queries, cfg.hidden_dim)))
        self.blocks = [QFormerBlock(params, f"qformer.{i}", cfg, rng)
                       for i in range(cfg.qformer_depth)]
        self.ln_out = LayerNorm(params, "qformer.ln_out", cfg.hidden_dim)

    def __call__(self, patches, instr_tokens):
        b = patches.shape[0]
        pooled = instr_tokens.mean(axis=1)         # (B, d)
        # Broadcast the learned queries across the batch, keeping grads.
        x = self.queries.reshape(1, self.cfg.n_queries, self.cfg.hidden_dim) + \
            Tensor(np.zeros((b, self.cfg.n_queries, self.cfg.hidden_dim)))
        for blk in self.blocks:
            x = blk(x, patches, pooled)
        return self.ln_out(x)


class TrunkBlock:
    def __init__(self, params, name, cfg, rng):
        d = cfg.hidden_dim
        out_scale = 1.0 / (np.sqrt(d) * np.sqrt(2.0 * cfg.n_blocks))
        self.ln1 = LayerNorm(params, name + ".ln1", d)
        self.attn = Attention(params, name + ".attn", d, cfg.n_heads, rng,
                              out_scale=out_scale)
        self.ln2 = LayerNorm(params, name + ".ln2", d)
        self.mlp = FeedForward(params, name + ".mlp", d, rng,
                               out_scale=out_scale / 2.0)

    def __call__(self, x, mask):
        normed = self.ln1(x)
        x = x + self.attn(normed, normed, mask=mask)
        return x + self.mlp(self.ln2(x))


class TransformerTrunk:
    def __init__(self, params, cfg, rng):
        self.blocks = [TrunkBlock(params, f"trunk.{i}", cfg, rng)
                       for i in range(cfg.n_blocks)]
        self.ln_out = LayerNorm(params, "trunk.ln_out", cfg.hidden_dim)

    def __call__(self, x, mask):
        for i, blk in enumerate(self.blocks):
            try:
                x = blk(x, mask)
            except T.NumericError as e:
                raise T.NumericError(f"trunk block {i}: {e}") from e
        return self.ln_out(x)


def trunk_param_budget(cfg: ModelConfig):
    """Exact trunk parameter count by accounting, without allocating.

    Mirrors TrunkBlock/TransformerTrunk construction; a test pins this
    against a real instantiation at small scale so the paper-shape count
    can be checked without building an 85M-float model.
    """
    d = cfg.hidden_dim
    attn = 4 * (d * d + d)                  # q, k, v, o projections
    mlp = (d * 4 * d + 4 * d) + (4 * d * d + d)
    norms = 2 * (2 * d)
    return cfg.n_blocks * (attn + mlp + norms) + 2 * d  # + final norm


def pad_action_tokens(actions, hidden_dim):
    """(..., 7) action values -> (..., d) with dims 7..d exactly zero."""
    actions = np.asarray(actions, dtype=np.float64)
    if hidden_dim < actions.shape[-1]:
        raise ConfigError("hidden_dim smaller than action dim")
    pad = np.zeros(actions.shape[:-1] + (hidden_dim - actions.shape[-1],))
    return np.concatenate([actions, pad], axis=-1)


class PolicyModel:
    """The in-context denoiser: condition tokens in front, noised action
    tokens behind, one causal transformer predicting the noise."""

    SEGMENTS = ("instruction", "observation", "timestep", "action")

    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        self.params = {}
        rng = make_rng(seed, "model-init")
        d = cfg.hidden_dim
        self.instr = InstructionEncoder(self.params, cfg, rng)
        self.vision = VisionEncoder(self.params, cfg, rng)
        self.qformer = QFormer(self.params, cfg, rng)
        self.time_fc1 = Linear(self.params, "time.fc1", d, 4 * d, rng)
        self.time_fc2 = Linear(self.params, "time.fc2", 4 * d, d, rng)
        self.action_in = Linear(self.params, "action_in", d, d, rng)
        self.type_emb = _register(self.params, "type_emb",
                                  0.02 * rng.standard_normal((4, d)))
        self.slot_emb = _register(self.params, "slot_emb",
                                  0.02 * rng.standard_normal((cfg.n_obs, d)))
        n_max = (cfg.max_instruction_len() + cfg.n_obs * cfg.n_queries + 1
                 + cfg.chunk_len)
        self.pos_emb = _register(self.params, "pos_emb",
                                 0.02 * rng.standard_normal((n_max, d)))
        self.trunk = TransformerTrunk(self.params, cfg, rng)
        self.head = Linear(self.params, "head", d, ACTION_DIM, rng, scale=0.001)
        self._mask_cache = {}

    # -- encoders --

    def encode_instruction(self, text):
        """Single instruction -> (L, d) token matrix (frozen, deterministic)."""
        ids = self.instr.token_ids(text)
        return self.instr(ids[None, :]).reshape(len(ids), self.cfg.hidden_dim)

    def encode_observation(self, images):
        """(B, H, W, 3) integer images -> (B, P, d) patch features."""
        return self.vision(images)

    def embed_timestep(self, t):
        """(B,) integer timesteps -> (B, 1, d) token."""
        t = np.atleast_1d(np.asarray(t))
        if t.min() < 1 or t.max() > self.cfg.t_max:
            raise T.ParameterError(f"timestep outside [1, {self.cfg.t_max}]")
        sin = Tensor(sinusoid_embedding(t, self.cfg.hidden_dim))
        out = self.time_fc2(T.gelu(self.time_fc1(sin)))
        return out.reshape(t.shape[0], 1, self.cfg.hidden_dim)

    def condition(self, instr_ids, images):
        """Encode instruction ids (B, L) and images (B, n_obs, H, W, 3).

        The expensive observation path runs once per environment step;
        the timestep token is re-embedded for every denoising call.
        """
        cfg = self.cfg
        b, n_obs = images.shape[:2]
        if n_obs != cfg.n_obs:
            raise ConfigError(f"expected {cfg.n_obs} observation frames")
        instr_tokens = self.instr(instr_ids)
        flat = images.reshape((b * n_obs,) + images.shape[2:])
        patches = self.vision(flat)
        # The instruction encoder is frozen, so detaching the per-frame
        # copies loses no gradients.
        pooled_src = Tensor(np.repeat(instr_tokens.data, n_obs, axis=0))
        obs = self.qformer(patches, pooled_src)    # (B*n_obs, nq, d)
        obs = obs.reshape(b, n_obs * cfg.n_queries, cfg.hidden_dim)
        return ConditioningContext(
            instruction_tokens=instr_tokens,
            obs_tokens=obs,
            instruction_len=instr_ids.shape[1],
        )

    # -- sequence assembly and the denoiser --

    def layout_for(self, instruction_len):
        cfg = self.cfg
        return SequenceLayout(
            instruction=instruction_len,
            observation=cfg.n_obs * cfg.n_queries,
            timestep=1,
            action=cfg.chunk_len,
        )

    def assemble_sequence(self, ctx: ConditioningContext, noised) -> TokenSequence:
        """[instruction | obs oldest->newest | timestep | actions 1..K]."""
        cfg = self.cfg
        d = cfg.hidden_dim
        if ctx.timestep_token is None:
            raise T.ContractError("conditioning context has no timestep token")
        layout = self.layout_for(ctx.instruction_len)
        padded = Tensor(pad_action_tokens(noised, d))
        act_tokens = self.action_in(padded)

        slot_rows = np.repeat(np.arange(cfg.n_obs), cfg.n_queries)
        parts = [
            ctx.instruction_tokens + self.type_emb[0:1, :],
            ctx.obs_tokens + self.type_emb[1:2, :]
            + T.embedding(self.slot_emb, slot_rows),
            ctx.timestep_token + self.type_emb[2:3, :],
            act_tokens + self.type_emb[3:4, :],
        ]
        tokens = T.concat(parts, axis=1)
        n = layout.total
        if tokens.shape[1] != n:
            raise T.ContractError(
                f"assembled {tokens.shape[1]} tokens, layout says {n}")
        tokens = tokens + T.embedding(self.pos_emb, np.arange(n))
        return TokenSequence(tokens=tokens, layout=layout)

    def _mask(self, n):
        if n not in self._mask_cache:
            self._mask_cache[n] = causal_mask(n)
        return self._mask_cache[n]

    def denoise_forward(self, seq: TokenSequence):
        """Trunk + linear head at the K action positions -> (B, K, 7)."""
        h = self.trunk(seq.tokens, self._mask(seq.layout.total))
        act = h[:, seq.layout.action_slice(), :]
        return self.head(act)

    def denoise(self, noised, ctx: ConditioningContext, t):
        """eps prediction for noised (B, K, 7) at per-element timesteps t."""
        ctx = replace(ctx, timestep_token=self.embed_timestep(t))
        return self.denoise_forward(self.assemble_sequence(ctx, noised))

    def sample_actions(self, instr_ids, images, diffusion_cfg, rng):
        """Normalized (K, 7) chunk for one (instruction, obs window)."""
        cfg = self.cfg
        with T.no_grad():
            ctx = self.condition(instr_ids, images)

            def denoiser(values, _cond, t):
                out = self.denoise(values[None, ...], ctx, np.array([t]))
                return out.data[0]

            return sample_chunk(denoiser, ctx, diffusion_cfg, rng,
                                chunk_shape=(cfg.chunk_len, ACTION_DIM))

    # -- bookkeeping --

    def trainable_params(self):
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def param_count(self, trainable_only=False):
        items = self.trainable_params() if trainable_only else self.params
        return sum(p.size for p in items.values())

    def trunk_param_count(self):
        return sum(p.size for k, p in self.params.items()
                   if k.startswith("trunk."))

    def state_arrays(self):
        return {k: p.data for k, p in self.params.items()}

    def load_state(self, arrays):
        for k, p in self.params.items():
            if k not in arrays:
                raise ConfigError(f"checkpoint missing parameter {k}")
            if arrays[k].shape != p.shape:
                raise ConfigError(f"checkpoint shape mismatch for {k}")
            p.data = np.asarray(arrays[k], dtype=np.float64)


class ActionPolicy:
    """Inference-time wrapper: model + normalization + sampler config.

    Works for any model exposing cfg, instr, and
    sample_actions(instr_ids, images, diffusion_cfg, rng).
    """

    def __init__(self, model, diffusion_cfg: DiffusionConfig, norm=None):
        self.model = model
        self.diffusion_cfg = diffusion_cfg
        self.norm = norm

    @property
    def n_obs(self):
        return self.model.cfg.n_obs

    @property
    def chunk_len(self):
        return self.model.cfg.chunk_len

    def predict_actions(self, instruction, obs_history, rng):
        """Sample one denormalized (K, 7) action chunk.

        obs_history is a list of n_obs images, oldest first; callers
        repeat the earliest frame when the episode is younger than n_obs.
        """
        cfg = self.model.cfg
        if len(obs_history) != cfg.n_obs:
            raise ConfigError(f"need exactly {cfg.n_obs} observation frames")
        ids = self.model.instr.token_ids(instruction)[None, :]
        images = np.stack(obs_history)[None, ...]
        chunk = self.model.sample_actions(ids, images, self.diffusion_cfg, rng)
        if self.norm is not None:
            chunk = self.norm.denormalize(chunk)
        return chunk
