"""Training loop for the TCN ranker.

Binds the ranking losses to the network: relevance normalization,
SpecAugment mel-band masking, strategy-specific batch construction
(point-wise samples, time-aligned RankNet chunk pairs, ListNet chunk
lists), SGD with momentum and weight decay, per-epoch validation by mean
selected-channel relevance, and exactly-resumable training state.

Training is deterministic: (dataset, config, seed) fully determine the
trained model, and restoring a saved state reproduces the remaining
trajectory bit for bit.
"""

from __future__ import annotations

import json
import struct
import time
import warnings
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .base import ParamMixin
from .dsp import LOG_FLOOR_DB
from .losses import (build_pair_set, listnet_loss, pairwise_label,
                     pointwise_mse, pointwise_xce, ranknet_loss)
from .selectors import ChannelScores
from .tcn import (RankerConfig, RankerModel, chunk_utterance, save_checkpoint,
                  score_utterance)

STRATEGIES = ("pointwise_xce", "pointwise_mse", "ranknet", "listnet")
STATE_MAGIC = b"CRTS"
STATE_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite."""


@dataclass
class SpecAugmentConfig:
    """Mel-band masking: with probability ``prob`` apply ``num_masks``
    contiguous band masks of width uniform in [1, max_width]."""

    num_masks: int = 2
    max_width: int = 8
    prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("specaugment prob must be in [0, 1]")
        if self.num_masks < 0 or self.max_width < 1:
            raise ValueError("invalid specaugment mask configuration")


@dataclass
class TrainConfig:
    strategy: str = "listnet"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_utterances: int = 8
    epochs: int = 20
    delta: float = 0.0
    specaugment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)
    seed: int = 0
    relevance_metric: str = "raw"
    single_term_xce: bool = False
    plateau_patience: int = 0  # halve lr after this many stale epochs; 0 = constant
    clip_grad_norm: float = 5.0  # global gradient-norm cap; 0 disables

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.lr < 0:
            # lr == 0 is allowed: it freezes the parameters, which the
            # determinism tests rely on
            raise ValueError("lr must be >= 0")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.batch_utterances < 1 or self.epochs < 0:
            raise ValueError("batch_utterances must be >= 1 and epochs >= 0")
        if self.clip_grad_norm < 0:
            raise ValueError("clip_grad_norm must be >= 0 (0 disables)")
        if isinstance(self.specaugment, dict):
            self.specaugment = SpecAugmentConfig(**self.specaugment)


@dataclass
class RankingUtterance:
    """One training/validation utterance: per-channel features + labels."""

    utt_id: str
    features: list          # per channel, (T, n_mels) arrays
    relevance: np.ndarray   # per channel

    def __post_init__(self):
        self.features = [np.asarray(f, dtype=np.float64) for f in self.features]
        t = min(f.shape[0] for f in self.features)
        self.features = [f[:t] for f in self.features]
        self.relevance = np.asarray(self.relevance, dtype=np.float64)
        if len(self.relevance) != len(self.features):
            raise ValueError(f"{self.utt_id}: relevance/channel count mismatch")

    @property
    def n_channels(self) -> int:
        return len(self.features)

    @property
    def n_frames(self) -> int:
        return self.features[0].shape[0]


def normalize_relevance(metric: str, value: float, strategy: str = "ranknet") -> float:
    """Map a raw label to the trainable relevance w.

    wa clamps to [0, 1]; wer maps to word accuracy 1 - value clamped to
    [0, 1]; raw passes through. Raw values outside [0, 1] are only legal
    for the pair-wise strategy, which needs relative order, not an
    absolute bounded measure.
    """
    value = float(value)
    if not np.isfinite(value):
        raise ValueError("relevance value must be finite")
    if metric == "wa":
        return float(np.clip(value, 0.0, 1.0))
    if metric == "wer":
        return float(np.clip(1.0 - value, 0.0, 1.0))
    if metric == "raw":
        if strategy != "ranknet" and not 0.0 <= value <= 1.0:
            raise ValueError(
                f"raw relevance {value} outside [0, 1] is only allowed with "
                f"the ranknet strategy, not {strategy}"
            )
        return value
    raise ValueError(f"unknown relevance metric {metric!r}")


def specaugment_mask(feats, cfg: SpecAugmentConfig,
                     rng: np.random.Generator) -> np.ndarray:
    """Apply mel-band masking to a copy of a (T, F) feature matrix.

    Masked bands are set to the log-mel floor ln(1e-10); the time axis is
    never touched. Masking an already-masked band has no further effect.
    """
    frames = np.asarray(getattr(feats, "frames", feats), dtype=np.float64)
    n_bands = frames.shape[1]
    if cfg.max_width > n_bands:
        raise ValueError(
            f"specaugment max_width {cfg.max_width} exceeds {n_bands} bands"
        )
    out = frames.copy()
    if cfg.prob > 0.0 and rng.random() < cfg.prob:
        for _ in range(cfg.num_masks):
            width = int(rng.integers(1, cfg.max_width + 1))
            start = int(rng.integers(0, n_bands - width + 1))
            out[:, start:start + width] = LOG_FLOOR_DB
    return out


# ----------------------------------------------------------------------
# batch construction
# ----------------------------------------------------------------------


@dataclass
class TrainBatch:
    """Chunk tensor plus the strategy-specific target structure."""

    chunks: np.ndarray          # (N, chunk_frames, F)
    valid: np.ndarray           # (N,)
    point_w: Optional[np.ndarray] = None        # (N,)
    pair_i: Optional[np.ndarray] = None         # (P,) indices into chunks
    pair_j: Optional[np.ndarray] = None
    pair_y: Optional[np.ndarray] = None
    list_groups: Optional[np.ndarray] = None    # (L, M) indices
    list_w: Optional[np.ndarray] = None         # (L, M)


def _usable(utt: RankingUtterance, strategy: str) -> bool:
    if strategy in ("ranknet", "listnet") and utt.n_channels < 2:
        warnings.warn(
            f"{utt.utt_id}: fewer than 2 channels, skipped under {strategy}"
        )
        return False
    return True


def make_training_batches(dataset: Sequence[RankingUtterance],
                          ranker_cfg: RankerConfig, cfg: TrainConfig,
                          rng: np.random.Generator):
    """One epoch of shuffled batches for the configured strategy.

    Every chunk of an utterance carries that utterance's relevance.
    RankNet pairs compare time-aligned chunks (same chunk index, two
    channels); ListNet lists gather all channels of one chunk index.
    """
    usable = [u for u in dataset if _usable(u, cfg.strategy)]
    if not usable:
        raise ValueError("no usable utterances for this strategy")
    order = rng.permutation(len(usable))
    for lo in range(0, len(order), cfg.batch_utterances):
        batch_utts = [usable[i] for i in order[lo:lo + cfg.batch_utterances]]
        chunks, valid = [], []
        point_w = []
        pair_i, pair_j, pair_y = [], [], []
        list_groups, list_w = [], []
        next_slot = 0
        for utt in batch_utts:
            per_channel_slots = []
            n_chunks = None
            for ch in range(utt.n_channels):
                feats = specaugment_mask(utt.features[ch], cfg.specaugment, rng)
                cb = chunk_utterance(feats, "train", ranker_cfg)
                per_channel_slots.append(
                    np.arange(next_slot, next_slot + len(cb.valid))
                )
                next_slot += len(cb.valid)
                chunks.append(cb.chunks)
                valid.append(cb.valid)
                n_chunks = len(cb.valid)
                point_w.extend([utt.relevance[ch]] * n_chunks)
            w = utt.relevance
            if cfg.strategy == "ranknet":
                for (i, j) in build_pair_set(w, cfg.delta).pairs:
                    y = pairwise_label(w[i], w[j])
                    for c in range(n_chunks):
                        pair_i.append(per_channel_slots[i][c])
                        pair_j.append(per_channel_slots[j][c])
                        pair_y.append(float(y))
            elif cfg.strategy == "listnet":
                for c in range(n_chunks):
                    list_groups.append([per_channel_slots[ch][c]
                                        for ch in range(utt.n_channels)])
                    list_w.append(list(w))
        batch = TrainBatch(
            chunks=np.concatenate(chunks), valid=np.concatenate(valid)
        )
        if cfg.strategy.startswith("pointwise"):
            batch.point_w = np.asarray(point_w)
        elif cfg.strategy == "ranknet":
            if not pair_i:
                continue  # every utterance fully tied under delta
            batch.pair_i = np.asarray(pair_i, dtype=np.int64)
            batch.pair_j = np.asarray(pair_j, dtype=np.int64)
            batch.pair_y = np.asarray(pair_y)
        else:
            # channel counts may differ across utterances; group lists of
            # equal width together (M is constant within one utterance)
            widths = {len(g) for g in list_groups}
            if len(widths) == 1:
                batch.list_groups = np.asarray(list_groups, dtype=np.int64)
                batch.list_w = np.asarray(list_w)
            else:
                batch.list_groups = list_groups
                batch.list_w = list_w
        yield batch


def batch_loss_and_score_grads(scores: np.ndarray, batch: TrainBatch,
                               cfg: TrainConfig):
    """Mean batch loss and its gradient w.r.t. every chunk score."""
    dscores = np.zeros_like(scores)
    if cfg.strategy == "pointwise_xce":
        losses, grads = pointwise_xce(batch.point_w, scores,
                                      single_term=cfg.single_term_xce)
        dscores += grads / len(scores)
        return float(np.mean(losses)), dscores
    if cfg.strategy == "pointwise_mse":
        losses, grads = pointwise_mse(batch.point_w, scores)
        dscores += grads / len(scores)
        return float(np.mean(losses)), dscores
    if cfg.strategy == "ranknet":
        f_i, f_j = scores[batch.pair_i], scores[batch.pair_j]
        losses, g_i, g_j = ranknet_loss(f_i, f_j, batch.pair_y)
        p = len(losses)
        np.add.at(dscores, batch.pair_i, g_i / p)
        np.add.at(dscores, batch.pair_j, g_j / p)
        return float(np.mean(losses)), dscores
    # listnet
    groups, targets = batch.list_groups, batch.list_w
    if isinstance(groups, np.ndarray):
        losses, grads = listnet_loss(targets, scores[groups])
        l = len(losses)
        np.add.at(dscores, groups.ravel(), (grads / l).ravel())
        return float(np.mean(losses)), dscores
    total = 0.0
    l = len(groups)
    for g, w in zip(groups, targets):
        g = np.asarray(g)
        loss, grad = listnet_loss(np.asarray(w), scores[g])
        total += float(loss)
        np.add.at(dscores, g, grad / l)
    return total / l, dscores


# ----------------------------------------------------------------------
# SGD state and the loop
# ----------------------------------------------------------------------


@dataclass
class TrainState:
    """Everything needed to continue training exactly where it stopped."""

    ranker_config: RankerConfig
    train_config: TrainConfig
    epoch: int
    lr_current: float
    params: dict
    velocities: dict
    best_params: dict
    best_metric: float
    best_epoch: int
    rng_state: dict
    history: list


@dataclass
class TrainResult:
    model: RankerModel        # best-validation checkpoint
    final_model: RankerModel  # parameters after the last epoch
    history: list
    state: TrainState


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm. The deep residual trunk occasionally emits
    gradient spikes along its shared-bias direction; without a cap those
    single steps can blow up the unbounded losses.
    """
    total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                        for g in grads.values()))
    if max_norm > 0 and total > max_norm and np.isfinite(total):
        scale = max_norm / total
        for g in grads.values():
            g *= np.asarray(scale, dtype=g.dtype)
    return float(total)


def sgd_step(params: dict, grads: dict, velocities: dict, lr: float,
             momentum: float, weight_decay: float) -> None:
    """v <- momentum v + (g + wd p); p <- p - lr v, in place."""
    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p
        v = velocities[name]
        v *= momentum
        v += g
        p -= lr * v


def validation_metric(model: RankerModel,
                      valid_set: Sequence[RankingUtterance]) -> float:
    """Mean relevance of the selected channel, inference-mode chunking."""
    picked = []
    for utt in valid_set:
        scores = score_utterance(model, utt.features).scores
        picked.append(utt.relevance[int(np.argmax(scores))])
    return float(np.mean(picked))


def train(train_set: Sequence[RankingUtterance],
          valid_set: Sequence[RankingUtterance],
          ranker_cfg: Optional[RankerConfig] = None,
          cfg: Optional[TrainConfig] = None,
          resume_state: Optional[TrainState] = None,
          state_path=None,
          log=None) -> TrainResult:
    """SGD training; returns the best-validation model and full history.

    ``cfg.epochs`` is the total epoch target: resuming a state trained for
    e1 epochs with epochs=e1+e2 runs exactly e2 more and lands on the same
    parameters as an uninterrupted run.
    """
    ranker_cfg = ranker_cfg or RankerConfig()
    cfg = cfg or TrainConfig()
    if not train_set or not valid_set:
        raise ValueError("train and validation sets must be nonempty")

    if resume_state is not None:
        ranker_cfg = resume_state.ranker_config
        model = RankerModel(ranker_cfg,
                            {k: v.copy() for k, v in resume_state.params.items()},
                            seed=resume_state.train_config.seed)
        velocities = {k: v.copy() for k, v in resume_state.velocities.items()}
        best_params = {k: v.copy() for k, v in resume_state.best_params.items()}
        best_metric = resume_state.best_metric
        best_epoch = resume_state.best_epoch
        lr = resume_state.lr_current
        history = list(resume_state.history)
        start_epoch = resume_state.epoch
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_state.rng_state
    else:
        model = RankerModel.build(ranker_cfg, seed=cfg.seed, dtype=np.float32)
        velocities = model.zero_grads()
        best_params = {k: v.copy() for k, v in model.params.items()}
        best_metric = -np.inf
        best_epoch = -1
        lr = cfg.lr
        history = []
        start_epoch = 0
        rng = np.random.default_rng([cfg.seed, 101])

    stale = 0
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for batch in make_training_batches(train_set, ranker_cfg, cfg, rng):
            scores, cache = model.forward(batch.chunks, batch.valid)
            loss, dscores = batch_loss_and_score_grads(scores, batch, cfg)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}"
                )
            grads, _ = model.backward(cache, dscores)
            clip_gradients(grads, cfg.clip_grad_norm)
            sgd_step(model.params, grads, velocities, lr,
                     cfg.momentum, cfg.weight_decay)
            losses.append(loss)
        metric = validation_metric(model, valid_set)
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "valid_metric": metric,
            "lr": lr,
            "wall_time": round(time.perf_counter() - t0, 3),
        }
        history.append(entry)
        if log is not None:
            log(entry)
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
            stale = 0
        else:
            stale += 1
            if cfg.plateau_patience and stale >= cfg.plateau_patience:
                lr *= 0.5
                stale = 0
        if state_path is not None:
            state = TrainState(
                ranker_config=ranker_cfg, train_config=cfg, epoch=epoch + 1,
                lr_current=lr, params=model.params, velocities=velocities,
                best_params=best_params, best_metric=best_metric,
                best_epoch=best_epoch, rng_state=rng.bit_generator.state,
                history=history,
            )
            save_train_state(state_path, state)

    state = TrainState(
        ranker_config=ranker_cfg, train_config=cfg, epoch=cfg.epochs,
        lr_current=lr, params=model.params, velocities=velocities,
        best_params=best_params, best_metric=best_metric,
        best_epoch=best_epoch, rng_state=rng.bit_generator.state,
        history=history,
    )
    best_model = RankerModel(ranker_cfg,
                             {k: v.copy() for k, v in best_params.items()},
                             seed=cfg.seed)
    return TrainResult(model=best_model, final_model=model,
                       history=history, state=state)


# ----------------------------------------------------------------------
# training-state container
# ----------------------------------------------------------------------


def save_train_state(path, state: TrainState) -> None:
    tensor_sections = []
    blobs = []
    for section, tensors in (("params", state.params),
                             ("velocities", state.velocities),
                             ("best_params", state.best_params)):
        for name, arr in tensors.items():
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            tensor_sections.append(
                {"section": section, "name": name, "shape": list(arr.shape)}
            )
            blobs.append(arr32.tobytes())
    header = {
        "format_version": STATE_VERSION,
        "ranker_config": asdict(state.ranker_config),
        "train_config": asdict(state.train_config),
        "epoch": state.epoch,
        "lr_current": state.lr_current,
        "best_metric": state.best_metric,
        "best_epoch": state.best_epoch,
        "rng_state": json.loads(json.dumps(state.rng_state)),
        "history": state.history,
        "tensors": tensor_sections,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(STATE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for b in blobs:
            fh.write(b)


def load_train_state(path) -> TrainState:
    with open(path, "rb") as fh:
        if fh.read(4) != STATE_MAGIC:
            raise ValueError(f"{path}: not a training-state file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header["format_version"] != STATE_VERSION:
            raise ValueError(f"{path}: unsupported state version")
        sections: dict[str, dict] = {"params": {}, "velocities": {},
                                     "best_params": {}}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(count * 4), dtype="<f4")
            sections[entry["section"]][entry["name"]] = \
                data.reshape(shape).astype(np.float32)
    tc = dict(header["train_config"])
    tc["specaugment"] = SpecAugmentConfig(**tc["specaugment"])
    rng_state = header["rng_state"]
    # json turns the PCG64 state ints into ints already; keep as-is
    return TrainState(
        ranker_config=RankerConfig(**header["ranker_config"]),
        train_config=TrainConfig(**tc),
        epoch=header["epoch"],
        lr_current=header["lr_current"],
        params=sections["params"],
        velocities=sections["velocities"],
        best_params=sections["best_params"],
        best_metric=header["best_metric"],
        best_epoch=header["best_epoch"],
        rng_state=rng_state,
        history=header["history"],
    )


class NeuralChannelRanker(ParamMixin):
    """Estimator facade over the ranker: fit on labeled utterances, then
    score or select channels for new ones.

    X is a sequence of utterances, each a sequence of per-channel
    (T, n_mels) log-mel matrices; y holds the matching relevance arrays.
    """

    def __init__(self, strategy: str = "listnet", lr: float = 0.05,
                 momentum: float = 0.9, weight_decay: float = 1e-4,
                 batch_utterances: int = 8, epochs: int = 20,
                 delta: float = 0.0, seed: int = 0,
                 specaugment: Optional[SpecAugmentConfig] = None,
                 config: Optional[RankerConfig] = None):
        self.strategy = strategy
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_utterances = batch_utterances
        self.epochs = epochs
        self.delta = delta
        self.seed = seed
        self.specaugment = specaugment
        self.config = config
        self.model_: Optional[RankerModel] = None
        self.history_: Optional[list] = None

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            strategy=self.strategy, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_utterances=self.batch_utterances, epochs=self.epochs,
            delta=self.delta, seed=self.seed,
            specaugment=self.specaugment or SpecAugmentConfig(),
        )

    def fit(self, X, y, X_valid=None, y_valid=None):
        train_set = [RankingUtterance(f"train{i:05d}", list(ch), rel)
                     for i, (ch, rel) in enumerate(zip(X, y))]
        if X_valid is None:
            valid_set = train_set
        else:
            valid_set = [RankingUtterance(f"valid{i:05d}", list(ch), rel)
                         for i, (ch, rel) in enumerate(zip(X_valid, y_valid))]
        result = train(train_set, valid_set, self.config, self._train_config())
        self.model_ = result.model
        self.history_ = result.history
        return self

    def score_channels(self, feats_per_channel) -> ChannelScores:
        self._check_fitted("model_")
        return score_utterance(self.model_, feats_per_channel)

    def predict(self, X) -> np.ndarray:
        """Selected (argmax-score) channel index per utterance."""
        return np.array([int(np.argmax(self.score_channels(u).scores)) for u in X])
