"""Fast self-verification suite behind ``chanrank verify``.

Checks the mathematical load-bearing parts in under a minute: analytic
gradients against central finite differences (losses alone and losses
composed with the full ranker), exact loss identities, chunk-count
formulas, the parameter census, image-source direct-path geometry and SDR
reference cases. Each check yields one PASS/FAIL line.

Setting the environment variable CHANRANK_FAULT_GRAD perturbs one analytic
gradient entry before comparison; the gradient check must then fail, which
gives the suite a way to prove it can actually detect a broken backward
pass.
"""

from __future__ import annotations

import math
import os
from typing import Callable

import numpy as np

from . import losses, scene, selectors
from .dsp import Waveform
from .tcn import (RankerConfig, RankerModel, infer_chunk_count,
                  parameter_census, train_chunk_count, chunk_utterance)
from .training import STRATEGIES, TrainConfig, batch_loss_and_score_grads, TrainBatch

LOSS_FD_STEP = 1e-5   # smooth losses: the textbook step
FD_STEP = 1e-6        # through the ranker: stays clear of PReLU kinks
GRAD_SUBSET = 50


class CheckFailure(AssertionError):
    pass


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise CheckFailure(msg)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-4)


# ----------------------------------------------------------------------
# individual checks
# ----------------------------------------------------------------------


def check_loss_identities() -> str:
    rng = np.random.default_rng(7)
    # ListNet shift invariance
    for _ in range(50):
        m = int(rng.integers(2, 9))
        w = rng.uniform(0, 1, m)
        f = rng.normal(0, 2, m)
        c = rng.normal(0, 5)
        l0, g0 = losses.listnet_loss(w, f)
        l1, g1 = losses.listnet_loss(w, f + c)
        _require(abs(l0 - l1) <= 1e-12, f"listnet shift invariance: {l0} vs {l1}")
        _require(np.max(np.abs(g0 - g1)) <= 1e-12, "listnet gradient shift")
    # RankNet antisymmetry and swap symmetry
    for _ in range(200):
        fi, fj = rng.normal(0, 3, 2)
        p = losses.sigmoid(fi - fj)
        q = losses.sigmoid(fj - fi)
        _require(abs(float(p) + float(q) - 1.0) <= 1e-12, "ranknet P + P' != 1")
        for y in (0.0, 1.0):
            l_a, _, _ = losses.ranknet_loss(fi, fj, y)
            l_b, _, _ = losses.ranknet_loss(fj, fi, 1.0 - y)
            _require(abs(float(l_a) - float(l_b)) <= 1e-12, "ranknet swap symmetry")
    # pair-set bound and the tie rule
    for _ in range(100):
        m = int(rng.integers(2, 10))
        w = np.round(rng.uniform(0, 1, m), 1)
        delta = float(rng.choice([0.0, 0.05, 0.2]))
        ps = losses.build_pair_set(w, delta)
        _require(len(ps) <= m * (m - 1) // 2, "pair-set bound exceeded")
        for (i, j) in ps.pairs:
            _require(abs(w[i] - w[j]) > delta, "pair below delta emitted")
    _require(float(losses.pairwise_label(0.5, 0.5)) == 0.0, "tie label must be 0")
    _require(float(losses.pairwise_label(0.8, 0.3)) == 1.0, "label(0.8,0.3) != 1")
    # point-wise XCE gradient identity
    for _ in range(100):
        w = float(rng.uniform(0, 1))
        f = float(rng.normal(0, 3))
        _, g = losses.pointwise_xce(w, f)
        _require(abs(float(g) - (float(losses.sigmoid(f)) - w)) <= 1e-12,
                 "xce gradient != sigmoid(f) - w")
    return "loss identities hold (shift, antisymmetry, pair bound, xce grad)"


def check_loss_gradients_fd() -> str:
    """Analytic loss gradients vs central differences, rel err < 1e-6."""
    rng = np.random.default_rng(11)
    worst = 0.0

    def fd(fun, x0):
        return (fun(x0 + LOSS_FD_STEP) - fun(x0 - LOSS_FD_STEP)) / (2 * LOSS_FD_STEP)

    for _ in range(100):
        w = float(rng.uniform(0.05, 0.95))
        f = float(rng.normal(0, 2))
        for single in (False, True):
            _, g = losses.pointwise_xce(w, f, single_term=single)
            n = fd(lambda z: float(losses.pointwise_xce(w, z, single_term=single)[0]), f)
            worst = max(worst, _rel_err(float(g), n))
        _, g = losses.pointwise_mse(w, f)
        n = fd(lambda z: float(losses.pointwise_mse(w, z)[0]), f)
        worst = max(worst, _rel_err(float(g), n))
        fj = float(rng.normal(0, 2))
        y = float(rng.integers(0, 2))
        _, gi, gj = losses.ranknet_loss(f, fj, y)
        worst = max(worst, _rel_err(
            float(gi), fd(lambda z: float(losses.ranknet_loss(z, fj, y)[0]), f)))
        worst = max(worst, _rel_err(
            float(gj), fd(lambda z: float(losses.ranknet_loss(f, z, y)[0]), fj)))
        m = int(rng.integers(2, 7))
        wv = rng.uniform(0, 1, m)
        fv = rng.normal(0, 2, m)
        _, gl = losses.listnet_loss(wv, fv)
        for idx in range(m):
            def at(z, idx=idx):
                fz = fv.copy()
                fz[idx] = z
                return float(losses.listnet_loss(wv, fz)[0])
            worst = max(worst, _rel_err(float(gl[idx]), fd(at, fv[idx])))
    _require(worst < 1e-6, f"loss gradient FD mismatch: worst rel err {worst:.3e}")
    return f"loss gradients match finite differences (worst rel err {worst:.1e})"


def _gradcheck_batch(cfg: RankerConfig, rng: np.random.Generator):
    """Small 3-channel single-chunk batch with one padded chunk."""
    n_frames = min(40, cfg.chunk_frames)
    short = max(1, (3 * n_frames) // 4)
    chunks = np.zeros((3, cfg.chunk_frames, cfg.n_mels))
    chunks[:, :n_frames, :] = rng.normal(-4.0, 2.0, (3, n_frames, cfg.n_mels))
    valid = np.array([n_frames, n_frames, short])
    chunks[2, short:, :] = 0.0
    w = np.array([0.2, 0.9, 0.55])
    return chunks, valid, w


def _strategy_batch(strategy: str, chunks, valid, w) -> tuple[TrainBatch, TrainConfig]:
    batch = TrainBatch(chunks=chunks, valid=valid)
    if strategy.startswith("pointwise"):
        batch.point_w = w
    elif strategy == "ranknet":
        ps = losses.build_pair_set(w, 0.0)
        batch.pair_i = np.array([i for i, _ in ps.pairs])
        batch.pair_j = np.array([j for _, j in ps.pairs])
        batch.pair_y = np.array([float(losses.pairwise_label(w[i], w[j]))
                                 for i, j in ps.pairs])
    else:
        batch.list_groups = np.arange(len(w))[None, :]
        batch.list_w = w[None, :]
    return batch, TrainConfig(strategy=strategy, epochs=0)


def ranker_gradient_check(strategy: str, dtype=np.float64,
                          n_entries: int = GRAD_SUBSET, seed: int = 15,
                          cfg: RankerConfig | None = None,
                          inject_fault: bool = False) -> float:
    """Worst relative error of analytic vs FD gradients through the ranker.

    The step 1e-6 keeps central differences clear of PReLU kinks while
    staying far above double-precision roundoff. For a single-precision
    model the analytic gradients come from the float32 pass but the finite
    differences are evaluated on a float64 copy of the same parameters:
    float32 loss evaluations are too coarse for differencing.
    """
    cfg = cfg or RankerConfig()
    rng = np.random.default_rng(seed)
    model = RankerModel.build(cfg, seed=seed, dtype=dtype)
    chunks, valid, w = _gradcheck_batch(cfg, rng)
    batch, tcfg = _strategy_batch(strategy, chunks, valid, w)

    fd_model = model if model.dtype == np.float64 else model.astype(np.float64)

    def loss_of(m: RankerModel) -> float:
        scores, _ = m.forward(batch.chunks, batch.valid)
        loss, _ = batch_loss_and_score_grads(scores, batch, tcfg)
        return loss

    scores, cache = model.forward(batch.chunks, batch.valid)
    _, dscores = batch_loss_and_score_grads(scores, batch, tcfg)
    grads, _ = model.backward(cache, dscores)

    names = sorted(model.params)
    sizes = np.array([model.params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    picks = rng.choice(total, size=min(n_entries, total), replace=False)

    if inject_fault or os.environ.get("CHANRANK_FAULT_GRAD"):
        gi = int(picks[0])
        li = int(np.searchsorted(offsets, gi, side="right") - 1)
        flat_idx = gi - offsets[li]
        bad = grads[names[li]].reshape(-1)
        bad[flat_idx] = bad[flat_idx] * 1.5 + 1e-3

    worst = 0.0
    h = FD_STEP
    for gi in picks:
        gi = int(gi)
        li = int(np.searchsorted(offsets, gi, side="right") - 1)
        name = names[li]
        flat_idx = gi - offsets[li]
        param = fd_model.params[name].reshape(-1)
        orig = param[flat_idx]
        param[flat_idx] = orig + h
        lp = loss_of(fd_model)
        param[flat_idx] = orig - h
        lm = loss_of(fd_model)
        param[flat_idx] = orig
        numeric = (lp - lm) / (2.0 * h)
        analytic = float(grads[name].reshape(-1)[flat_idx])
        worst = max(worst, _rel_err(analytic, numeric))
    return worst


def check_ranker_gradients() -> str:
    tol = 1e-5
    worst_all = 0.0
    for strategy in STRATEGIES:
        worst = ranker_gradient_check(strategy, dtype=np.float64)
        worst_all = max(worst_all, worst)
        _require(worst < tol,
                 f"{strategy}: ranker gradient rel err {worst:.3e} >= {tol}")
    return f"ranker gradients match finite differences (worst rel err {worst_all:.1e})"


def check_chunk_formulas(n_lengths: int = 1000) -> str:
    cfg = RankerConfig()
    rng = np.random.default_rng(5)
    lengths = rng.integers(1, 5001, size=n_lengths)
    for t in lengths:
        t = int(t)
        feats = np.zeros((t, cfg.n_mels))
        train_b = chunk_utterance(feats, "train", cfg)
        _require(len(train_b.valid) == train_chunk_count(t, cfg.chunk_frames),
                 f"train chunk count wrong for T={t}")
        _require(int(train_b.valid.sum()) == t, f"train chunks drop frames at T={t}")
        infer_b = chunk_utterance(feats, "infer", cfg)
        expect = infer_chunk_count(t, cfg.chunk_frames, cfg.inference_hop)
        _require(len(infer_b.valid) == expect,
                 f"infer chunk count wrong for T={t}")
        last_start = int(infer_b.starts[-1])
        covered = last_start + int(infer_b.valid[-1])
        _require(covered == t, f"infer tail not covered for T={t}")
    return f"chunk-count formulas hold for {n_lengths} random lengths"


def check_parameter_census() -> str:
    cfg = RankerConfig()
    census = parameter_census(cfg)
    total = census["total"]
    _require(abs(total - 266000) / 266000 <= 0.10,
             f"census {total} outside 266k +- 10%")
    _require(cfg.dilations == (1, 2, 4, 8, 16),
             f"dilations {cfg.dilations} != (1, 2, 4, 8, 16)")
    model = RankerModel.build(cfg, seed=0)
    live = sum(p.size for p in model.params.values())
    _require(live == total, "census disagrees with instantiated tensors")
    return f"parameter census total: {total} (266k +- 10%), dilations 2^0..2^4"


def check_rir_geometry() -> str:
    room = scene.RoomSpec(length=6.0, width=5.0, t60=0.4)
    src = np.array([2.0, 2.5, 1.5])
    mic = np.array([4.0, 2.5, 1.5])
    to_src = (src - mic) / np.linalg.norm(src - mic)
    rir = scene.image_source_rir(room, src, mic, to_src, absorption=1.0)
    nz = np.flatnonzero(rir.taps)
    _require(len(nz) == 1, "anechoic RIR must be a single tap")
    dist = np.linalg.norm(src - mic)
    expect_idx = int(round(dist / scene.SPEED_OF_SOUND * 16000))
    _require(abs(int(nz[0]) - expect_idx) <= 1, "direct-path delay wrong")
    expect_amp = 1.0 / dist  # on-axis cardioid gain is 1
    _require(math.isclose(rir.taps[nz[0]], expect_amp, rel_tol=1e-9),
             "direct-path amplitude wrong")
    away = -to_src
    rir0 = scene.image_source_rir(room, src, mic, away, absorption=1.0)
    _require(not np.any(rir0.taps), "anti-axis cardioid tap must be exactly 0")
    return "image-source direct path and cardioid null correct"


def check_sdr_cases() -> str:
    rng = np.random.default_rng(9)
    s = rng.normal(0, 0.1, 16000)
    ref = Waveform(samples=s)
    _require(selectors.sdr(Waveform(samples=s.copy()), ref) == 60.0,
             "identity SDR must hit the +60 dB cap")
    _require(selectors.sdr(Waveform(samples=2.0 * s), ref) == 60.0,
             "scaled-identity SDR must hit the cap")
    n = rng.normal(0, 1.0, 16000)
    n -= (np.dot(n, s) / np.dot(s, s)) * s
    n *= np.sqrt(np.dot(s, s) / np.dot(n, n))
    val = selectors.sdr(Waveform(samples=s + n), ref)
    _require(abs(val) <= 0.01, f"orthogonal equal-energy SDR {val} != 0 +- 0.01")
    return "SDR reference cases correct (cap, scale invariance, 0 dB)"


ALL_CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("loss_identities", check_loss_identities),
    ("loss_gradients_fd", check_loss_gradients_fd),
    ("ranker_gradients_fd", check_ranker_gradients),
    ("chunk_formulas", check_chunk_formulas),
    ("parameter_census", check_parameter_census),
    ("rir_geometry", check_rir_geometry),
    ("sdr_cases", check_sdr_cases),
]


def run_all(out=print) -> bool:
    ok = True
    for name, fn in ALL_CHECKS:
        try:
            detail = fn()
            out(f"PASS {name}: {detail}")
        except Exception as exc:  # report and continue with the remaining checks
            ok = False
            out(f"FAIL {name}: {exc}")
    return ok
