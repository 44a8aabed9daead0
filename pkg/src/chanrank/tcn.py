"""Temporal-convolutional channel ranker with handwritten backprop.

A compact TCN maps a 200-frame x 40-band log-mel chunk to one scalar
relevance score: chunk-global input normalization (exactly gain-invariant
in the log domain), a 40->64 projection, 15 dilated residual blocks
(3 groups of 5, dilations 1..16, bottleneck 64, hidden 128, kernel 3,
PReLU and globally-normalized activations), a final normalization of the
residual stream, then a 64->1 per-frame projection and masked mean pooling
over valid frames.

Forward and backward passes are implemented directly in numpy so the
analytic gradients can be verified against finite differences. Activations
are kept in (channels, batch, time) layout: pointwise convolutions then
reduce to single GEMMs on contiguous 2-D views.

Padded frames are inert by construction: every parametered layer re-zeroes
them, normalization statistics count only valid frames, pooling excludes
them, and the gradient reaching padded input frames is exactly zero.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .base import check_finite
from .selectors import ChannelScores

NORM_EPS = 1e-5
CHECKPOINT_MAGIC = b"CRKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class RankerConfig:
    """Architecture hyperparameters; defaults give the 266.9k-param ranker."""

    n_mels: int = 40
    input_proj: int = 64
    bottleneck: int = 64
    hidden: int = 128
    kernel: int = 3
    blocks: int = 3
    sub_blocks: int = 5
    chunk_frames: int = 200
    inference_overlap_factor: int = 4

    def __post_init__(self):
        if self.input_proj != self.bottleneck:
            raise ValueError("input_proj must equal bottleneck (residual width)")
        if self.kernel % 2 != 1 or self.kernel < 1:
            raise ValueError("kernel must be odd and positive")
        for name in ("n_mels", "input_proj", "hidden", "blocks", "sub_blocks",
                     "chunk_frames", "inference_overlap_factor"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def dilations(self) -> tuple[int, ...]:
        return tuple(2 ** i for i in range(self.sub_blocks))

    @property
    def n_blocks(self) -> int:
        return self.blocks * self.sub_blocks

    @property
    def inference_hop(self) -> int:
        return max(1, self.chunk_frames // self.inference_overlap_factor)


def parameter_shapes(cfg: RankerConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) table; the order fixes init and serialization."""
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("in_norm.gain", (cfg.n_mels,)),
        ("in_norm.bias", (cfg.n_mels,)),
        ("in_proj.weight", (cfg.bottleneck, cfg.n_mels)),
        ("in_proj.bias", (cfg.bottleneck,)),
    ]
    for b in range(cfg.n_blocks):
        shapes += [
            (f"block{b}.pw_in.weight", (cfg.hidden, cfg.bottleneck)),
            (f"block{b}.pw_in.bias", (cfg.hidden,)),
            (f"block{b}.prelu1", (1,)),
            (f"block{b}.norm1.gain", (cfg.hidden,)),
            (f"block{b}.norm1.bias", (cfg.hidden,)),
            (f"block{b}.dw.weight", (cfg.hidden, cfg.kernel)),
            (f"block{b}.dw.bias", (cfg.hidden,)),
            (f"block{b}.prelu2", (1,)),
            (f"block{b}.norm2.gain", (cfg.hidden,)),
            (f"block{b}.norm2.bias", (cfg.hidden,)),
            (f"block{b}.pw_out.weight", (cfg.bottleneck, cfg.hidden)),
            (f"block{b}.pw_out.bias", (cfg.bottleneck,)),
        ]
    shapes += [
        ("out_norm.gain", (cfg.bottleneck,)),
        ("out_norm.bias", (cfg.bottleneck,)),
        ("out_proj.weight", (1, cfg.bottleneck)),
        ("out_proj.bias", (1,)),
    ]
    return shapes


def parameter_census(cfg: RankerConfig) -> dict[str, int]:
    """Per-layer-group parameter counts plus the grand total."""
    census: dict[str, int] = {}
    for name, shape in parameter_shapes(cfg):
        group = name.split(".")[0]
        census[group] = census.get(group, 0) + int(np.prod(shape))
    census["total"] = sum(v for k, v in census.items() if k != "total")
    return census


class RankerModel:
    """Parameter container plus forward/backward over chunk batches."""

    def __init__(self, config: RankerConfig, params: dict[str, np.ndarray],
                 seed: int = 0):
        self.config = config
        self.params = params
        self.seed = seed
        self.dtype = next(iter(params.values())).dtype

    @classmethod
    def build(cls, config: RankerConfig, seed: int = 0,
              dtype=np.float32) -> "RankerModel":
        """He-uniform weights, unit norm gains, zero biases, PReLU 0.25.

        The final score projection is scaled down by 100 so initial chunk
        scores start near zero: a full-size final layer on top of the
        15-block residual trunk yields an initial score spread of several
        units, which every ranking loss first has to collapse and which
        destabilizes SGD at useful learning rates.
        """
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        for name, shape in parameter_shapes(config):
            kind = name.rsplit(".", 1)[-1]
            if kind == "weight":
                fan_in = shape[1]
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, shape)
                if name == "out_proj.weight":
                    w *= 0.01
                params[name] = w.astype(dtype)
            elif kind == "gain":
                params[name] = np.ones(shape, dtype=dtype)
            elif kind == "bias":
                params[name] = np.zeros(shape, dtype=dtype)
            else:  # prelu slope
                params[name] = np.full(shape, 0.25, dtype=dtype)
        return cls(config, params, seed=seed)

    def astype(self, dtype) -> "RankerModel":
        return RankerModel(
            self.config, {k: v.astype(dtype) for k, v in self.params.items()},
            seed=self.seed,
        )

    def copy(self) -> "RankerModel":
        return RankerModel(
            self.config, {k: v.copy() for k, v in self.params.items()},
            seed=self.seed,
        )

    def census(self) -> dict[str, int]:
        return parameter_census(self.config)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # ------------------------------------------------------------------
    # forward / backward
    # ------------------------------------------------------------------

    def forward(self, chunks: np.ndarray, valid: np.ndarray,
                need_cache: bool = True):
        """Score a chunk batch.

        chunks: (N, T, F) feature chunks, padded frames zeroed.
        valid:  (N,) count of real frames per chunk, 1 <= valid <= T.
        Returns (scores (N,), cache for backward). With need_cache=False the
        cache is None and intermediate activations are dropped as soon as
        possible, which keeps inference over large batches lean.
        """
        cfg = self.config
        chunks = np.asarray(chunks)
        if chunks.ndim != 3 or chunks.shape[2] != cfg.n_mels:
            raise ValueError(
                f"chunks must be (N, T, {cfg.n_mels}), got {chunks.shape}"
            )
        valid = np.asarray(valid, dtype=np.int64)
        n, t, _ = chunks.shape
        if np.any(valid < 1) or np.any(valid > t):
            raise ValueError("valid frame counts must lie in [1, T]")
        # diverging training can overflow float32 inside the trunk; the
        # non-finite loss is caught by the trainer, so do not warn here
        with np.errstate(over="ignore", invalid="ignore"):
            return self._forward_impl(chunks, valid, need_cache)

    def _forward_impl(self, chunks: np.ndarray, valid: np.ndarray,
                      need_cache: bool):
        cfg = self.config
        p = self.params
        n, t, _ = chunks.shape

        # computation is cropped to the longest valid prefix; padded frames
        # beyond it cannot influence any score
        tc = int(valid.max())
        x = np.ascontiguousarray(chunks[:, :tc, :].transpose(2, 0, 1),
                                 dtype=self.dtype)
        if np.all(valid == tc):
            mask = None
        else:
            mask = (np.arange(tc)[None, :] < valid[:, None]).astype(self.dtype)
            x = x * mask
        counts = valid.astype(self.dtype)

        cache: dict = {"n": n, "tc": tc, "mask": mask, "counts": counts,
                       "valid": valid, "t_in": t}

        # input normalization over the whole chunk (all bands x valid
        # frames, per-band gain/bias). A waveform gain shifts every log-mel
        # entry by the same constant, so the global statistics remove it
        # exactly while the temporal envelope dynamics that carry the
        # channel-quality signal survive; frame-wise normalization would
        # erase them
        h, cache["in_norm"] = self._gln(p["in_norm.gain"], p["in_norm.bias"],
                                        x, mask, counts)
        h, cache["in_proj_input"] = self._pw(
            p["in_proj.weight"], p["in_proj.bias"], h, mask
        )
        blocks = []
        for b in range(cfg.n_blocks):
            d = cfg.dilations[b % cfg.sub_blocks]
            blk: dict = {"dilation": d}
            res = h

            y1, blk["pw_in_input"] = self._pw(
                p[f"block{b}.pw_in.weight"], p[f"block{b}.pw_in.bias"], h, mask
            )
            a1, blk["prelu1"] = self._prelu(p[f"block{b}.prelu1"], y1)
            n1, blk["norm1"] = self._gln(p[f"block{b}.norm1.gain"],
                                         p[f"block{b}.norm1.bias"], a1,
                                         mask, counts)
            del y1, a1
            y2, blk["dw"] = self._dwconv(p[f"block{b}.dw.weight"],
                                         p[f"block{b}.dw.bias"], n1, d, mask)
            a2, blk["prelu2"] = self._prelu(p[f"block{b}.prelu2"], y2)
            n2, blk["norm2"] = self._gln(p[f"block{b}.norm2.gain"],
                                         p[f"block{b}.norm2.bias"], a2,
                                         mask, counts)
            del y2, a2
            y3, blk["pw_out_input"] = self._pw(
                p[f"block{b}.pw_out.weight"], p[f"block{b}.pw_out.bias"], n2, mask
            )
            h = res + y3
            if need_cache:
                blocks.append(blk)
            del blk
        cache["blocks"] = blocks

        # the residual stream is unnormalized and its magnitude grows with
        # depth; normalizing before the score projection keeps the score
        # scale and its parameter sensitivity depth-independent
        h, cache["out_norm"] = self._gln(p["out_norm.gain"], p["out_norm.bias"],
                                         h, mask, counts)
        frame_scores, cache["out_proj_input"] = self._pw(
            p["out_proj.weight"], p["out_proj.bias"], h, mask
        )
        s = frame_scores[0]  # (N, Tc)
        if mask is None:
            scores = s.sum(axis=1) / counts
        else:
            scores = (s * mask).sum(axis=1) / counts
        return scores.astype(np.float64), (cache if need_cache else None)

    def backward(self, cache: dict, dscores: np.ndarray):
        """Gradients of sum(dscores * scores) w.r.t. parameters and input.

        Returns (grads dict, dchunks (N, T, F)).
        """
        with np.errstate(over="ignore", invalid="ignore"):
            return self._backward_impl(cache, dscores)

    def _backward_impl(self, cache: dict, dscores: np.ndarray):
        cfg = self.config
        p = self.params
        mask = cache["mask"]
        counts = cache["counts"]
        n, tc = cache["n"], cache["tc"]
        grads = self.zero_grads()

        ds = (np.asarray(dscores, dtype=self.dtype) / counts)[:, None]
        ds = np.broadcast_to(ds, (n, tc)).copy()
        if mask is not None:
            ds *= mask
        dh = self._pw_backward("out_proj", grads, ds[None, :, :],
                               cache["out_proj_input"], mask)
        dh = self._gln_backward("out_norm", grads, dh, cache["out_norm"],
                                mask, counts)

        for b in reversed(range(cfg.n_blocks)):
            blk = cache["blocks"][b]
            dres = dh
            dn2 = self._pw_backward(f"block{b}.pw_out", grads, dh,
                                    blk["pw_out_input"], mask)
            da2 = self._gln_backward(f"block{b}.norm2", grads, dn2,
                                     blk["norm2"], mask, counts)
            dy2 = self._prelu_backward(f"block{b}.prelu2", grads, da2,
                                       blk["prelu2"])
            dn1 = self._dwconv_backward(f"block{b}.dw", grads, dy2,
                                        blk["dw"], blk["dilation"], mask)
            da1 = self._gln_backward(f"block{b}.norm1", grads, dn1,
                                     blk["norm1"], mask, counts)
            dy1 = self._prelu_backward(f"block{b}.prelu1", grads, da1,
                                       blk["prelu1"])
            dh = dres + self._pw_backward(f"block{b}.pw_in", grads, dy1,
                                          blk["pw_in_input"], mask)

        dxn = self._pw_backward("in_proj", grads, dh, cache["in_proj_input"], mask)
        dx = self._gln_backward("in_norm", grads, dxn, cache["in_norm"],
                                mask, counts)
        f = dx.shape[0]

        dchunks = np.zeros((n, cache["t_in"], f), dtype=self.dtype)
        dchunks[:, :tc, :] = dx.transpose(1, 2, 0)
        if mask is not None:
            dchunks[:, :tc, :] *= mask[:, :, None]
        return grads, dchunks

    # ------------------------------------------------------------------
    # layer primitives (channel, batch, time layout)
    # ------------------------------------------------------------------

    @staticmethod
    def _pw(w, b, x, mask):
        c, n, t = x.shape
        y = (w @ x.reshape(c, n * t)).reshape(w.shape[0], n, t)
        y += b[:, None, None]
        if mask is not None:
            y *= mask
        return y, x

    def _pw_backward(self, prefix, grads, dy, x, mask):
        if mask is not None:
            dy = dy * mask
        o, n, t = dy.shape
        c = x.shape[0]
        dy2 = dy.reshape(o, n * t)
        x2 = x.reshape(c, n * t)
        grads[f"{prefix}.weight"] += dy2 @ x2.T
        grads[f"{prefix}.bias"] += dy2.sum(axis=1)
        w = self.params[f"{prefix}.weight"]
        return (w.T @ dy2).reshape(c, n, t)

    @staticmethod
    def _prelu(alpha, x):
        neg = np.minimum(x, 0)
        y = np.maximum(x, 0)
        y += alpha[0] * neg
        return y, (neg, x > 0)

    def _prelu_backward(self, name, grads, dy, cache_entry):
        neg, pos = cache_entry
        grads[name] += np.array([(dy * neg).sum()], dtype=self.dtype)
        alpha = self.params[name][0]
        return np.where(pos, dy, alpha * dy)

    @staticmethod
    def _gln(gain, bias, x, mask, counts):
        """Global layer norm per chunk; statistics over channels x valid frames."""
        c = x.shape[0]
        k = c * counts
        s1 = np.einsum("cnt->n", x)
        s2 = np.einsum("cnt,cnt->n", x, x)
        mu = s1 / k
        var = np.maximum(s2 / k - mu * mu, 0.0)
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (x - mu[None, :, None]) * inv[None, :, None]
        y = gain[:, None, None] * xhat + bias[:, None, None]
        if mask is not None:
            y *= mask
        return y, (xhat, inv)

    def _gln_backward(self, prefix, grads, dy, cache_entry, mask, counts):
        xhat, inv = cache_entry
        if mask is not None:
            dy = dy * mask
        c = xhat.shape[0]
        k = c * counts
        grads[f"{prefix}.gain"] += np.einsum("cnt,cnt->c", dy, xhat)
        grads[f"{prefix}.bias"] += np.einsum("cnt->c", dy)
        dxhat = dy * self.params[f"{prefix}.gain"][:, None, None]
        s1 = np.einsum("cnt->n", dxhat) / k
        s2 = np.einsum("cnt,cnt->n", dxhat, xhat) / k
        return inv[None, :, None] * (dxhat - s1[None, :, None]
                                     - xhat * s2[None, :, None])

    def _dwconv(self, w, b, x, dilation, mask):
        """Depthwise 1-D conv, odd kernel, symmetric zero padding."""
        c, n, t = x.shape
        k = w.shape[1]
        half = (k - 1) // 2
        y = np.empty_like(x)
        y[:] = b[:, None, None]
        for j in range(k):
            off = (j - half) * dilation
            src_lo, src_hi = max(0, off), min(t, t + off)
            if src_lo >= src_hi:
                continue
            dst_lo, dst_hi = src_lo - off, src_hi - off
            y[:, :, dst_lo:dst_hi] += w[:, j, None, None] * x[:, :, src_lo:src_hi]
        if mask is not None:
            y *= mask
        return y, x

    def _dwconv_backward(self, prefix, grads, dy, x, dilation, mask):
        if mask is not None:
            dy = dy * mask
        w = self.params[f"{prefix}.weight"]
        c, n, t = x.shape
        k = w.shape[1]
        half = (k - 1) // 2
        dx = np.zeros_like(x)
        dw = np.zeros_like(w)
        for j in range(k):
            off = (j - half) * dilation
            src_lo, src_hi = max(0, off), min(t, t + off)
            if src_lo >= src_hi:
                continue
            dst_lo, dst_hi = src_lo - off, src_hi - off
            dy_s = dy[:, :, dst_lo:dst_hi]
            dw[:, j] = np.einsum("cnt,cnt->c", dy_s, x[:, :, src_lo:src_hi])
            dx[:, :, src_lo:src_hi] += w[:, j, None, None] * dy_s
        grads[f"{prefix}.weight"] += dw
        grads[f"{prefix}.bias"] += dy.sum(axis=(1, 2))
        return dx


# ----------------------------------------------------------------------
# chunking and utterance-level scoring
# ----------------------------------------------------------------------


@dataclass
class ChunkBatch:
    """Fixed-width chunks of one feature matrix plus valid-frame counts."""

    chunks: np.ndarray   # (N, chunk_frames, F)
    valid: np.ndarray    # (N,)
    starts: np.ndarray   # (N,) frame offset of each chunk in the utterance


def train_chunk_count(t: int, chunk_frames: int = 200) -> int:
    return -(-t // chunk_frames)  # ceil


def infer_chunk_count(t: int, chunk_frames: int = 200, hop: int = 50) -> int:
    return max(1, (max(t, chunk_frames) - chunk_frames) // hop + 1)


def chunk_utterance(feats, mode: str, cfg: Optional[RankerConfig] = None) -> ChunkBatch:
    """Split a T x F feature matrix into fixed-width chunks.

    Train mode: consecutive non-overlapping chunks, last one zero-padded.
    Infer mode: chunk starts at a quarter-chunk stride with the final chunk
    moved to end exactly at T (single padded chunk when T is short).
    """
    if mode not in ("train", "infer"):
        raise ValueError("mode must be 'train' or 'infer'")
    cfg = cfg or RankerConfig()
    frames = np.asarray(getattr(feats, "frames", feats), dtype=np.float64)
    t, f = frames.shape
    if t < 1:
        raise ValueError("empty feature matrix")
    w = cfg.chunk_frames
    if mode == "train":
        starts = np.arange(train_chunk_count(t, w)) * w
    else:
        hop = cfg.inference_hop
        n = infer_chunk_count(t, w, hop)
        starts = (np.arange(n) * hop).astype(np.int64)
        starts[-1] = max(t - w, 0)
    chunks = np.zeros((len(starts), w, f))
    valid = np.empty(len(starts), dtype=np.int64)
    for i, s in enumerate(starts):
        stop = min(s + w, t)
        chunks[i, : stop - s] = frames[s:stop]
        valid[i] = stop - s
    return ChunkBatch(chunks=chunks, valid=valid, starts=np.asarray(starts))


def forward_chunk(model: RankerModel, chunk: np.ndarray,
                  valid: Optional[int] = None):
    """Score a single chunk (chunk_frames x n_mels); returns (score, cache)."""
    chunk = np.asarray(chunk)
    cfg = model.config
    if chunk.shape != (cfg.chunk_frames, cfg.n_mels):
        raise ValueError(
            f"chunk must be {cfg.chunk_frames} x {cfg.n_mels}, got {chunk.shape}"
        )
    v = cfg.chunk_frames if valid is None else int(valid)
    scores, cache = model.forward(chunk[None, :, :], np.array([v]))
    return float(scores[0]), cache


def score_utterance(model: RankerModel, feats_per_channel) -> ChannelScores:
    """Utterance-level channel scores: mean over inference-mode chunk scores.

    The network sees each channel independently; scores are the plain mean
    of its chunk scores.
    """
    if len(feats_per_channel) == 0:
        raise ValueError("no channels to score")
    all_chunks, all_valid, owner = [], [], []
    for ch, feats in enumerate(feats_per_channel):
        batch = chunk_utterance(feats, "infer", model.config)
        all_chunks.append(batch.chunks)
        all_valid.append(batch.valid)
        owner.extend([ch] * len(batch.valid))
    scores, _ = model.forward(np.concatenate(all_chunks),
                              np.concatenate(all_valid), need_cache=False)
    owner = np.asarray(owner)
    out = np.array([scores[owner == ch].mean()
                    for ch in range(len(feats_per_channel))])
    return ChannelScores(scores=out, method="micrank")


# ----------------------------------------------------------------------
# checkpoint container
# ----------------------------------------------------------------------


def save_checkpoint(path, model: RankerModel) -> None:
    """Self-describing binary checkpoint: JSON header + float32 tensors."""
    names = [name for name, _ in parameter_shapes(model.config)]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.seed,
        "tensors": [
            {"name": n, "shape": list(model.params[n].shape), "dtype": "float32"}
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> RankerModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a ranker checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint version {header['format_version']}"
            )
        cfg = RankerConfig(**header["config"])
        params = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(count * 4), dtype="<f4")
            if data.size != count:
                raise ValueError(f"{path}: truncated tensor {entry['name']}")
            params[entry["name"]] = data.reshape(shape).astype(np.float32)
    expected = [name for name, _ in parameter_shapes(cfg)]
    if list(params) != expected:
        raise ValueError(f"{path}: tensor list does not match the config")
    for name, shape in parameter_shapes(cfg):
        if params[name].shape != shape:
            raise ValueError(f"{path}: tensor {name} has shape {params[name].shape}, "
                             f"expected {shape}")
    for name, arr in params.items():
        check_finite(name, arr)
    return RankerModel(cfg, params, seed=header["seed"])
