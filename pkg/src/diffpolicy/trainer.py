"""Training loops: mixture batches in, checkpoints and loss curves out.

Every source of randomness is derived from (seed, purpose[, step]), so a
(seed, config) pair fully determines the checkpoint bytes, and resuming
from step s replays the identical batch and noise sequence the
uninterrupted run would have seen.
"""

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    MixtureSpec,
    chunk_trajectory,
    filter_outliers,
    fit_normalization,
    mixture_sampler,
    normalize_samples,
)
from .diffusion import DiffusionBatch, DiffusionConfig, build_schedule, diffusion_loss
from .heads import (
    DiscretizedHeadModel,
    MlpDiffusionHeadModel,
    SingleTokenChunkHeadModel,
    validate_head_kind,
)
from .model import ModelConfig, PolicyModel
from .optim import AdamWState, adamw_step, clip_grad_norm, zero_grads
from .seeding import derive_seed, make_rng
from .tensor import NumericError, ParameterError


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr_main: float = 1e-4
    lr_vision: float = 1e-5
    warmup_steps: int | None = None     # None: 5% of steps
    schedule: str = "cosine_decay"
    seed: int = 0
    head_kind: str = "dit"
    n_obs: int = 2
    chunk_len: int = 32
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    checkpoint_every: int = 0           # 0: final checkpoint only
    outlier_bound: float = 1.0
    outlier_slack: float = 5.0

    def __post_init__(self):
        validate_head_kind(self.head_kind)
        if self.warmup_steps is None:
            self.warmup_steps = max(1, self.steps // 20)
        if not self.steps > self.warmup_steps >= 0:
            raise ParameterError("need steps > warmup_steps >= 0")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.schedule not in ("constant", "cosine_decay"):
            raise ParameterError(f"unknown schedule {self.schedule!r}")


@dataclass
class TrainLogRow:
    step: int
    loss: float
    loss_kind: str
    lr: float
    grad_norm: float
    wallclock: float


def lr_at(step, cfg: TrainConfig, base_lr=None):
    """Linear warmup to base_lr, then half-cycle cosine decay to zero."""
    lr = cfg.lr_main if base_lr is None else base_lr
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return lr * step / cfg.warmup_steps
    if cfg.schedule == "constant":
        return lr
    span = max(cfg.steps - 1 - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / span
    return lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def build_model(head_kind, model_cfg: ModelConfig, seed):
    validate_head_kind(head_kind)
    if head_kind == "dit":
        return PolicyModel(model_cfg, seed=seed)
    if head_kind == "discretized":
        return DiscretizedHeadModel(model_cfg, seed=seed)
    if head_kind == "mlp_diffusion":
        return MlpDiffusionHeadModel(model_cfg, seed=seed)
    return SingleTokenChunkHeadModel(model_cfg, seed=seed)


def prepare_corpus(trajectories, n_obs, chunk_len, outlier_bound=1.0,
                   outlier_slack=5.0):
    """Fit normalization, window into samples, filter, clip.

    Returns (samples grouped by dataset tag, NormStats, OutlierReport).
    """
    norm = fit_normalization(trajectories)
    samples = []
    for traj in trajectories:
        samples.extend(chunk_trajectory(traj, n_obs, chunk_len))
    samples = normalize_samples(samples, norm, clip=False)
    kept, report = filter_outliers(samples, bound=outlier_bound,
                                   slack=outlier_slack)
    per_tag = {}
    for s in kept:
        s.chunk = np.clip(s.chunk, -1.0, 1.0)
        per_tag.setdefault(s.dataset_tag, []).append(s)
    return per_tag, norm, report


def _batch_arrays(samples, model):
    """Stack a list of TrainingSamples into per-length batch groups."""
    groups = {}
    for s in samples:
        ids = model.instr.token_ids(s.instruction)
        groups.setdefault(len(ids), []).append((ids, s))
    out = []
    for length in sorted(groups):
        members = groups[length]
        ids = np.stack([m[0] for m in members])
        images = np.stack([np.stack([np.asarray(o) for o in m[1].observations])
                           for m in members])
        chunks = np.stack([m[1].chunk for m in members])
        valid = np.stack([m[1].valid for m in members])
        out.append((ids, images, chunks, valid))
    return out


def _group_loss(model, head_kind, ids, images, chunks, valid, sched, rng):
    """Scalar loss Tensor and the element count it averages over."""
    if head_kind == "discretized":
        loss = model.loss(ids, images, chunks, valid=valid)
        count = int(valid.sum()) * chunks.shape[-1]
        return loss, count
    if head_kind == "dit":
        ctx = model.condition(ids, images)
        batch = DiffusionBatch(chunks=chunks, cond=ctx, valid=valid)
        loss = diffusion_loss(
            lambda nv, cond, t: model.denoise(nv, cond, t), batch, sched, rng)
    else:
        denoiser = model.loss_denoiser(ids, images)
        batch = DiffusionBatch(chunks=chunks, cond=None, valid=valid)
        loss = diffusion_loss(denoiser, batch, sched, rng)
    count = int(valid.sum()) * chunks.shape[-1]
    return loss, count


def train(trajectories, model_cfg: ModelConfig, cfg: TrainConfig, out_dir,
          mixture: MixtureSpec = None, resume_from=None):
    """Full training run; writes checkpoint(s), norm stats, and a log CSV.

    Returns (model, norm_stats, log_rows).
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    model_cfg = replace(model_cfg, n_obs=cfg.n_obs, chunk_len=cfg.chunk_len)
    per_tag, norm, report = prepare_corpus(
        trajectories, cfg.n_obs, cfg.chunk_len,
        outlier_bound=cfg.outlier_bound, outlier_slack=cfg.outlier_slack)
    if mixture is None:
        mixture = MixtureSpec(weights=[(tag, float(len(v)))
                                       for tag, v in sorted(per_tag.items())])
    stream = mixture_sampler(mixture, per_tag, make_rng(cfg.seed, "mixture"))

    model = build_model(cfg.head_kind, model_cfg, cfg.seed)
    sched = build_schedule(cfg.diffusion)
    loss_kind = "cross_entropy" if cfg.head_kind == "discretized" else "mse"

    trainable = model.trainable_params()
    vision = {k: p for k, p in trainable.items() if k.startswith("vision.")}
    main = {k: p for k, p in trainable.items() if not k.startswith("vision.")}
    opt_main = AdamWState(main.values(), lr=cfg.lr_main,
                          weight_decay=cfg.weight_decay)
    opt_vision = AdamWState(vision.values(), lr=cfg.lr_vision,
                            weight_decay=cfg.weight_decay)

    start_step = 0
    if resume_from is not None:
        start_step = _load_training_state(resume_from, model, opt_main,
                                          opt_vision)
        for _ in range(start_step * cfg.batch_size):
            next(stream)  # replay the consumed part of the mixture stream

    rows = []
    t0 = time.perf_counter()
    all_params = list(trainable.values())
    for step_i in range(start_step, cfg.steps):
        batch = [next(stream) for _ in range(cfg.batch_size)]
        step_rng = make_rng(cfg.seed, "batch", step_i)
        zero_grads(all_params)

        total = None
        total_count = 0
        for ids, images, chunks, valid in _batch_arrays(batch, model):
            loss_g, count = _group_loss(model, cfg.head_kind, ids, images,
                                        chunks, valid, sched, step_rng)
            piece = loss_g * float(count)
            total = piece if total is None else total + piece
            total_count += count
        loss = total * (1.0 / total_count)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericError(
                f"non-finite loss at step {step_i}; replay with "
                f"batch_seed={derive_seed(cfg.seed, 'batch', step_i)}")
        loss.backward()
        grad_norm = clip_grad_norm(all_params, cfg.grad_clip)
        adamw_step(opt_main, lr=lr_at(step_i, cfg, cfg.lr_main))
        adamw_step(opt_vision, lr=lr_at(step_i, cfg, cfg.lr_vision))

        rows.append(TrainLogRow(
            step=step_i, loss=loss_val, loss_kind=loss_kind,
            lr=lr_at(step_i, cfg, cfg.lr_main),
            grad_norm=grad_norm,
            wallclock=time.perf_counter() - t0,
        ))
        if cfg.checkpoint_every and (step_i + 1) % cfg.checkpoint_every == 0 \
                and step_i + 1 < cfg.steps:
            _save_training_state(
                f"{out_dir}/checkpoint_step{step_i + 1}.ckpt", model,
                opt_main, opt_vision, step_i + 1)

    _save_training_state(f"{out_dir}/checkpoint.ckpt", model, opt_main,
                         opt_vision, cfg.steps)
    with open(f"{out_dir}/normstats.json", "w") as f:
        f.write(norm.to_json())
    with open(f"{out_dir}/model_config.json", "w") as f:
        f.write(model_cfg.to_json())
    write_log_csv(f"{out_dir}/train_log.csv", rows)
    return model, norm, rows


def write_log_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "loss_kind", "lr", "grad_norm",
                    "wallclock"])
        for r in rows:
            w.writerow([r.step, repr(r.loss), r.loss_kind, repr(r.lr),
                        repr(r.grad_norm), f"{r.wallclock:.3f}"])


def read_log_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def _save_training_state(path, model, opt_main, opt_vision, step):
    arrays = dict(model.state_arrays())
    for tag, opt in (("main", opt_main), ("vision", opt_vision)):
        for i, m in enumerate(opt.m):
            arrays[f"__opt__/{tag}/m/{i}"] = m
        for i, v in enumerate(opt.v):
            arrays[f"__opt__/{tag}/v/{i}"] = v
        arrays[f"__opt__/{tag}/step_count"] = np.array(float(opt.step_count))
    arrays["__meta__/step"] = np.array(float(step))
    save_checkpoint(path, arrays)


def _load_training_state(path, model, opt_main, opt_vision):
    arrays = load_checkpoint(path)
    model.load_state(arrays)
    for tag, opt in (("main", opt_main), ("vision", opt_vision)):
        for i in range(len(opt.m)):
            opt.m[i] = arrays[f"__opt__/{tag}/m/{i}"].copy()
            opt.v[i] = arrays[f"__opt__/{tag}/v/{i}"].copy()
        opt.step_count = int(arrays[f"__opt__/{tag}/step_count"])
    return int(arrays["__meta__/step"])


def load_model_for_eval(checkpoint_path, model_config_path, head_kind, seed=0):
    """Rebuild a model skeleton and fill it from a checkpoint."""
    with open(model_config_path) as f:
        model_cfg = ModelConfig.from_json(f.read())
    model = build_model(head_kind, model_cfg, seed)
    model.load_state(load_checkpoint(checkpoint_path))
    return model
