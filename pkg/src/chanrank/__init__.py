"""chanrank: channel selection for ad-hoc microphone networks.

Learned channel ranking (a compact TCN trained with point-wise, pair-wise
or list-wise objectives) next to classical signal-based selectors, a
synthetic acoustic-scene simulator for end-to-end validation, and an
evaluation harness.
"""

import os as _os

# Thread count must be pinned before numpy first loads its BLAS; honoring
# CHANRANK_THREADS here works whenever chanrank is imported before numpy
# (always true for the console script).
if "CHANRANK_THREADS" in _os.environ:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["CHANRANK_THREADS"])

__version__ = "0.1.0"

from .base import NotFittedError, ParamMixin
from .dsp import (CepstralFrames, LogMelFeatures, SubbandEnvelopes, Waveform,
                  cepstral_frames, logmel_features, read_wav,
                  subband_envelopes, write_wav)
from .losses import (PairSet, build_pair_set, listnet_loss, pairwise_label,
                     pointwise_mse, pointwise_xce, ranknet_loss)
from .scene import (RoomSpec, Rir, ScenePlacement, SimulatedUtterance,
                    image_source_rir, proxy_relevance, render_scene,
                    sample_scene, simulate_dataset, speech_shaped_burst)
from .selectors import (ChannelScores, CepstralDistanceSelector,
                        EnvelopeVarianceSelector, EvWeights, cepstral_distance,
                        closest_select, envelope_variance, posterior_entropy,
                        random_select, sdr, sdr_scores, train_ev_weights)
from .tcn import (ChunkBatch, RankerConfig, RankerModel, chunk_utterance,
                  forward_chunk, load_checkpoint, parameter_census,
                  save_checkpoint, score_utterance)
from .training import (NeuralChannelRanker, RankingUtterance,
                       SpecAugmentConfig, TrainConfig, TrainResult,
                       TrainingDivergedError, load_train_state,
                       normalize_relevance, save_train_state,
                       specaugment_mask, train)
from .evaluation import (EvalReport, RankingResult, correlation,
                         evaluate_methods, format_report_table, rank_channels,
                         selection_accuracy, selection_metrics)

__all__ = [name for name in dir() if not name.startswith("_")]
