"""Classical and oracle channel scorers.

Envelope Variance (optionally with trained sub-band weights), Cepstral
Distance in blind and informed modes, posterior-entropy scoring of
externally produced posterior matrices, a least-squares-projection SDR
oracle, plus the random and closest-microphone baselines. Higher score
always means a better channel; ties are broken by the lower channel index
at ranking time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
import scipy.signal

from .base import ParamMixin, check_finite
from .dsp import SubbandEnvelopes, CepstralFrames, Waveform
from .losses import softmax

if TYPE_CHECKING:
    from .scene import ScenePlacement

CD_SCALE = 10.0 / np.log(10.0)
SDR_CAP_DB = 60.0
SDR_MAX_LAG = 1600  # +-100 ms at 16 kHz


@dataclass
class ChannelScores:
    """Per-channel scores (higher is better) plus the producing method."""

    scores: np.ndarray
    method: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        check_finite(f"{self.method} scores", self.scores)


@dataclass
class EvWeights:
    """Envelope-variance sub-band weights: non-negative, summing to 1."""

    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if np.any(self.alpha < 0):
            raise ValueError("EV weights must be non-negative")
        if not np.isclose(self.alpha.sum(), 1.0, atol=1e-8):
            raise ValueError("EV weights must sum to 1")

    @classmethod
    def uniform(cls, n_bands: int = 40) -> "EvWeights":
        return cls(alpha=np.full(n_bands, 1.0 / n_bands))


def _envelope_variance_matrix(envs: Sequence[SubbandEnvelopes]) -> np.ndarray:
    """Across-channel-normalized envelope variances, shape (M, B).

    Per channel and band the envelope is cube-root compressed and divided
    by its time mean (gain removal); the variance over time is then scaled
    by the per-band maximum across channels so every entry lies in [0, 1].
    """
    mats = [np.asarray(e.env, dtype=np.float64) for e in envs]
    t = mats[0].shape[0]
    if any(m.shape != mats[0].shape for m in mats):
        raise ValueError("all channels must share the same envelope shape")
    if t < 2:
        raise ValueError("envelope variance needs at least 2 frames")
    var = np.empty((len(mats), mats[0].shape[1]))
    for i, env in enumerate(mats):
        compressed = np.cbrt(env)
        mean = compressed.mean(axis=0)
        normed = np.divide(compressed, mean, out=np.zeros_like(compressed),
                           where=mean > 0)
        var[i] = normed.var(axis=0)
    band_max = var.max(axis=0)
    return np.divide(var, band_max, out=np.zeros_like(var), where=band_max > 0)


def envelope_variance(envs: Sequence[SubbandEnvelopes],
                      weights: Optional[EvWeights] = None) -> ChannelScores:
    """Envelope-Variance scores: weighted sum of normalized band variances.

    Reverberation smooths sub-band envelopes and lowers their variance, so
    drier channels score higher.
    """
    v = _envelope_variance_matrix(envs)
    if weights is None:
        weights = EvWeights.uniform(v.shape[1])
    if len(weights.alpha) != v.shape[1]:
        raise ValueError("weight count does not match band count")
    return ChannelScores(scores=v @ weights.alpha, method="ev")


def train_ev_weights(dataset: Sequence[tuple], lr: float = 1.0,
                     epochs: int = 50, seed: int = 0) -> EvWeights:
    """Tune EV sub-band weights by SGD on best-channel cross-entropy.

    ``dataset`` holds (envelopes, best_channel) tuples per utterance where
    envelopes is a length-M sequence of SubbandEnvelopes. Weights are
    parameterized as softmax(theta) with theta initialized to zero, so zero
    training steps return the uniform weighting.
    """
    if not dataset:
        raise ValueError("empty EV training set")
    prepared = []
    for envs, best in dataset:
        if len(envs) < 2:
            raise ValueError("EV weight training needs >= 2 channels per utterance")
        prepared.append((_envelope_variance_matrix(envs), int(best)))
    n_bands = prepared[0][0].shape[1]
    theta = np.zeros(n_bands)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(prepared))
        for idx in order:
            v, best = prepared[idx]
            alpha = softmax(theta)
            p = softmax(v @ alpha)
            dscore = p.copy()
            dscore[best] -= 1.0
            dalpha = v.T @ dscore
            dtheta = alpha * (dalpha - np.dot(alpha, dalpha))
            theta -= lr * dtheta
    return EvWeights(alpha=softmax(theta))


def ev_training_loss(dataset: Sequence[tuple], weights: EvWeights) -> float:
    """Mean best-channel cross-entropy of EV scores under given weights."""
    total = 0.0
    for envs, best in dataset:
        v = _envelope_variance_matrix(envs)
        p = softmax(v @ weights.alpha)
        total += -np.log(max(p[int(best)], 1e-300))
    return total / len(dataset)


def cepstral_distance(ceps: Sequence[CepstralFrames],
                      reference: Optional[CepstralFrames] = None) -> ChannelScores:
    """Cepstral-distance scores, informed (given clean reference) or blind.

    Blind mode reconstructs the reference as the frame-wise mean cepstrum
    across channels. Per frame the distance is
    (10/ln 10) sqrt(2 sum_k (ref_k - c_k)^2); the score is its negated
    time mean, so identical-to-reference channels score 0 (maximal).
    """
    mats = [np.asarray(c.frames, dtype=np.float64) for c in ceps]
    if not mats:
        raise ValueError("no channels given")
    k = mats[0].shape[1]
    if any(m.shape[1] != k for m in mats):
        raise ValueError("all channels must share the cepstral order K")
    t = min(m.shape[0] for m in mats)
    if reference is not None:
        ref = np.asarray(reference.frames, dtype=np.float64)
        if ref.shape[1] != k:
            raise ValueError("reference cepstral order K does not match channels")
        t = min(t, ref.shape[0])
    if t < 1:
        raise ValueError("no frames left after truncation to the common length")
    mats = [m[:t] for m in mats]
    if reference is None:
        ref = np.mean(mats, axis=0)
        method = "cd-blind"
    else:
        ref = ref[:t]
        method = "cd-informed"
    scores = np.empty(len(mats))
    for i, c in enumerate(mats):
        d = CD_SCALE * np.sqrt(2.0 * np.sum((ref - c) ** 2, axis=1))
        scores[i] = -d.mean()
    return ChannelScores(scores=scores, method=method)


def posterior_entropy(posteriors: Sequence[np.ndarray]) -> ChannelScores:
    """Negated mean frame entropy (nats) of per-channel posterior matrices.

    Confident (low-entropy) acoustic-model posteriors indicate a cleaner
    channel; one-hot posteriors reach the maximal score 0, uniform
    posteriors the minimal score -ln C.
    """
    scores = np.empty(len(posteriors))
    for i, p in enumerate(posteriors):
        p = np.asarray(p, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] < 2:
            raise ValueError(f"channel {i}: posteriors must be T x C with C >= 2")
        if np.any(p < 0):
            raise ValueError(f"channel {i}: negative posterior probabilities")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError(f"channel {i}: posterior rows must sum to 1")
        plogp = np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0)
        scores[i] = plogp.sum(axis=1).mean()
    return ChannelScores(scores=scores, method="entropy")


def _best_lag(estimate: np.ndarray, reference: np.ndarray, max_lag: int) -> int:
    """Lag d maximizing sum_t estimate[t + d] * reference[t], |d| <= max_lag."""
    c = scipy.signal.correlate(estimate, reference, mode="full", method="fft")
    lags = np.arange(-(len(reference) - 1), len(estimate))
    inside = np.abs(lags) <= max_lag
    return int(lags[inside][np.argmax(c[inside])])


def sdr(estimate: Waveform, reference: Waveform, max_lag: int = SDR_MAX_LAG) -> float:
    """Signal-to-distortion ratio in dB via least-squares projection.

    The estimate is first aligned to the reference at the cross-correlation
    peak within +-100 ms, then projected onto it; the SDR is the energy
    ratio of the projection to the residual, capped to [-60, +60] dB.
    Scaling the estimate leaves the value unchanged.
    """
    x = np.asarray(estimate.samples, dtype=np.float64)
    s = np.asarray(reference.samples, dtype=np.float64)
    if not np.any(s):
        raise ValueError("SDR reference must be nonzero")
    lag = _best_lag(x, s, max_lag)
    if lag >= 0:
        x = x[lag:]
    else:
        s = s[-lag:]
    n = min(len(x), len(s))
    x, s = x[:n], s[:n]
    ss = np.dot(s, s)
    if n == 0 or ss == 0.0:
        raise ValueError("no nonzero reference overlap after alignment")
    alpha = np.dot(x, s) / ss
    target = alpha * s
    resid_energy = np.dot(x - target, x - target)
    target_energy = alpha * alpha * ss
    if resid_energy == 0.0:
        return SDR_CAP_DB
    if target_energy == 0.0:
        return -SDR_CAP_DB
    value = 10.0 * np.log10(target_energy / resid_energy)
    return float(np.clip(value, -SDR_CAP_DB, SDR_CAP_DB))


def sdr_scores(channels: Sequence[Waveform], reference: Waveform) -> ChannelScores:
    """SDR oracle: score each channel against the clean reference."""
    return ChannelScores(
        scores=np.array([sdr(c, reference) for c in channels]), method="sdr"
    )


def random_select(n_channels: int, seed: int) -> ChannelScores:
    """Seeded random ranking: scores are a random permutation of 0..M-1."""
    if n_channels < 1:
        raise ValueError("need at least one channel")
    rng = np.random.default_rng(seed)
    return ChannelScores(
        scores=rng.permutation(n_channels).astype(np.float64), method="random"
    )


def closest_select(placement: "ScenePlacement") -> ChannelScores:
    """Distance oracle: score is the negated mic-to-speaker distance.

    Equidistant microphones tie and resolve to the lower channel index
    when ranked.
    """
    mic = np.asarray(placement.mic_pos, dtype=np.float64)
    spk = np.asarray(placement.speaker_pos, dtype=np.float64)
    return ChannelScores(
        scores=-np.linalg.norm(mic - spk[None, :], axis=1), method="closest"
    )


class EnvelopeVarianceSelector(ParamMixin):
    """Envelope-Variance channel selector with trainable sub-band weights.

    Without fitting, ``score_channels`` uses uniform weights (the classic
    selector). ``fit`` tunes the weights on (envelopes, best-channel)
    supervision.
    """

    def __init__(self, lr: float = 1.0, epochs: int = 50, seed: int = 0):
        self.lr = lr
        self.epochs = epochs
        self.seed = seed
        self.weights_: Optional[EvWeights] = None

    def fit(self, X: Sequence[Sequence[SubbandEnvelopes]], y: Sequence[int]):
        dataset = list(zip(X, y))
        self.weights_ = train_ev_weights(
            dataset, lr=self.lr, epochs=self.epochs, seed=self.seed
        )
        return self

    def score_channels(self, envs: Sequence[SubbandEnvelopes]) -> ChannelScores:
        return envelope_variance(envs, self.weights_)

    def predict(self, X: Sequence[Sequence[SubbandEnvelopes]]) -> np.ndarray:
        return np.array([int(np.argmax(self.score_channels(e).scores)) for e in X])


class CepstralDistanceSelector(ParamMixin):
    """Cepstral-distance selector; ``mode`` is 'blind' or 'informed'."""

    def __init__(self, mode: str = "blind"):
        if mode not in ("blind", "informed"):
            raise ValueError("mode must be 'blind' or 'informed'")
        self.mode = mode

    def score_channels(self, ceps: Sequence[CepstralFrames],
                       reference: Optional[CepstralFrames] = None) -> ChannelScores:
        if self.mode == "informed":
            if reference is None:
                raise ValueError("informed mode needs a clean reference")
            return cepstral_distance(ceps, reference)
        return cepstral_distance(ceps, None)
