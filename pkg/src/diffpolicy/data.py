"""Trajectory corpora: storage, normalization, chunking, mixture sampling.

Raw actions are 7-vectors (translation meters, axis-angle rotation,
gripper in [0, 1]). Normalization maps each dimension's [q01, q99] span
affinely onto [-1, 1]; applied values clip to that range. Corpora are
JSON-Lines, one trajectory per line.
"""

import json
from dataclasses import dataclass, field

import numpy as np

ACTION_DIM = 7


class DataError(ValueError):
    """Corpus-level problem: empty, malformed, or internally inconsistent."""


class CorpusParseError(DataError):
    def __init__(self, lineno, why):
        super().__init__(f"corpus line {lineno}: {why}")
        self.lineno = lineno


@dataclass
class TrajectoryRecord:
    instruction: str
    observations: list          # list of (H, W, 3) uint8-valued int arrays
    actions: np.ndarray         # (n, 7) float64, raw units
    dataset_tag: str = "default"

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.actions.ndim != 2 or self.actions.shape[1] != ACTION_DIM:
            raise DataError("actions must be (n, 7)")
        n_obs, n_act = len(self.observations), len(self.actions)
        if n_obs - n_act not in (0, 1):
            raise DataError(
                f"got {n_obs} observations for {n_act} actions; the final "
                "frame may lack an action but nothing else")


@dataclass
class NormStats:
    """Per-dimension affine maps taking [q01, q99] onto [-1, 1]."""

    q01: np.ndarray
    q99: np.ndarray
    scale: np.ndarray
    offset: np.ndarray
    degenerate: np.ndarray      # bool per dim: True = identity transform

    def normalize(self, actions, clip=True):
        out = np.asarray(actions) * self.scale + self.offset
        return np.clip(out, -1.0, 1.0) if clip else out

    def denormalize(self, actions):
        return (np.asarray(actions) - self.offset) / self.scale

    def to_json(self):
        return json.dumps({
            "q01": self.q01.tolist(), "q99": self.q99.tolist(),
            "scale": self.scale.tolist(), "offset": self.offset.tolist(),
            "degenerate": self.degenerate.astype(int).tolist(),
        })

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        return cls(
            q01=np.array(raw["q01"]), q99=np.array(raw["q99"]),
            scale=np.array(raw["scale"]), offset=np.array(raw["offset"]),
            degenerate=np.array(raw["degenerate"], dtype=bool),
        )


@dataclass
class TrainingSample:
    instruction: str
    observations: list          # n_obs frames, oldest first
    chunk: np.ndarray           # (K, 7) raw or normalized actions
    valid: np.ndarray           # (K,) 1.0 = real action, 0.0 = repeated tail
    dataset_tag: str = "default"


@dataclass
class MixtureSpec:
    weights: list               # [(dataset_tag, weight >= 0), ...]

    def __post_init__(self):
        if not any(w > 0 for _, w in self.weights):
            raise DataError("mixture needs at least one positive weight")
        if any(w < 0 for _, w in self.weights):
            raise DataError("mixture weights must be >= 0")


def _sorted_quantile(sorted_vals, q):
    """Linear-interpolation quantile on pre-sorted values."""
    n = len(sorted_vals)
    pos = q * (n - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return sorted_vals[lo] * (1 - frac) + sorted_vals[hi] * frac


def fit_normalization(trajectories):
    """Exact q01/q99 per dimension via full sort, then affine to [-1, 1]."""
    rows = [t.actions for t in trajectories if len(t.actions)]
    if not rows:
        raise DataError("cannot fit normalization on an empty corpus")
    stacked = np.concatenate(rows, axis=0)
    q01 = np.empty(ACTION_DIM)
    q99 = np.empty(ACTION_DIM)
    for d in range(ACTION_DIM):
        vals = np.sort(stacked[:, d])
        q01[d] = _sorted_quantile(vals, 0.01)
        q99[d] = _sorted_quantile(vals, 0.99)
    degenerate = q99 <= q01
    span = np.where(degenerate, 1.0, q99 - q01)
    scale = np.where(degenerate, 1.0, 2.0 / span)
    offset = np.where(degenerate, 0.0, -(q01 + q99) / span)
    return NormStats(q01=q01, q99=q99, scale=scale, offset=offset,
                     degenerate=degenerate)


@dataclass
class OutlierReport:
    dropped_per_tag: dict
    kept: int

    @property
    def dropped(self):
        return sum(self.dropped_per_tag.values())


def normalize_samples(samples, norm: NormStats, clip=False):
    """Apply the fitted affine to every chunk; pre-clip by default so the
    outlier filter can still see extreme values."""
    return [TrainingSample(
        instruction=s.instruction,
        observations=s.observations,
        chunk=norm.normalize(s.chunk, clip=clip),
        valid=s.valid,
        dataset_tag=s.dataset_tag,
    ) for s in samples]


def filter_outliers(samples, bound=1.0, slack=5.0):
    """Drop chunks containing any pre-clip normalized value beyond
    bound*slack; chunks must already be normalized (unclipped)."""
    threshold = bound * slack
    kept = []
    dropped = {}
    for s in samples:
        if np.any(np.abs(s.chunk) > threshold):
            dropped[s.dataset_tag] = dropped.get(s.dataset_tag, 0) + 1
        else:
            kept.append(s)
    return kept, OutlierReport(dropped_per_tag=dropped, kept=len(kept))


def chunk_trajectory(traj: TrajectoryRecord, n_obs, k):
    """One sample per action index: clamped obs window, masked tail chunk."""
    n = len(traj.actions)
    if n == 0:
        return []
    samples = []
    for tau in range(n):
        window = [traj.observations[max(tau - n_obs + 1 + i, 0)]
                  for i in range(n_obs)]
        idx = np.minimum(np.arange(tau, tau + k), n - 1)
        chunk = traj.actions[idx]
        valid = (np.arange(tau, tau + k) < n).astype(np.float64)
        samples.append(TrainingSample(
            instruction=traj.instruction,
            observations=window,
            chunk=chunk,
            valid=valid,
            dataset_tag=traj.dataset_tag,
        ))
    return samples


def mixture_sampler(spec: MixtureSpec, per_dataset_samples, rng):
    """Infinite stream: pick a dataset by weight, then draw from a shuffled
    pass over it, reshuffling on exhaustion."""
    tags = [t for t, _ in spec.weights]
    missing = [t for t in tags if t not in per_dataset_samples
               or not per_dataset_samples[t]]
    if missing:
        raise DataError(f"mixture tags without samples: {missing}")
    weights = np.array([w for _, w in spec.weights], dtype=np.float64)
    probs = weights / weights.sum()
    queues = {t: [] for t in tags}

    def stream():
        while True:
            tag = tags[rng.choice(len(tags), p=probs)]
            if not queues[tag]:
                order = rng.permutation(len(per_dataset_samples[tag]))
                queues[tag] = list(order)
            idx = queues[tag].pop()
            yield per_dataset_samples[tag][idx]

    return stream()


# ---- JSONL corpus I/O ----


def write_corpus(trajectories, path):
    with open(path, "w") as f:
        for traj in trajectories:
            obs = [np.asarray(o) for o in traj.observations]
            shape = list(obs[0].shape) if obs else [0, 0, 3]
            rec = {
                "instruction": traj.instruction,
                "dataset_tag": traj.dataset_tag,
                "image_shape": shape,
                "observations": [o.reshape(-1).astype(int).tolist()
                                 for o in obs],
                "actions": [[float(v) for v in row] for row in traj.actions],
            }
            f.write(json.dumps(rec) + "\n")


def read_corpus(path):
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                shape = tuple(rec["image_shape"])
                obs = [np.array(flat, dtype=np.int64).reshape(shape)
                       for flat in rec["observations"]]
                traj = TrajectoryRecord(
                    instruction=rec["instruction"],
                    observations=obs,
                    actions=np.array(rec["actions"], dtype=np.float64),
                    dataset_tag=rec["dataset_tag"],
                )
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise CorpusParseError(lineno, str(e)) from e
            out.append(traj)
    return out


def corpus_hash(path):
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
