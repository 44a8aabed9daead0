"""Synthetic acoustic scene generator.

Samples shoebox rooms with an ad-hoc network of 8 cardioid microphones, a
speech source and an optional point noise source under placement
constraints, renders the multi-channel reverberant audio with a CPU
image-source model, and attaches per-channel proxy relevance labels
derived from the SDR against the dry source.

Everything is a pure function of (seed, source material): the same seed
reproduces the same scene, impulse responses, audio and labels bit for
bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.signal

from .dsp import SAMPLE_RATE, Waveform, write_wav
from .selectors import sdr as sdr_db

SPEED_OF_SOUND = 343.0
ROOM_HEIGHT = 2.7
AREA_RANGE = (10.0, 60.0)
T60_RANGE = (0.2, 0.6)
MIN_SPEAKER_CLEARANCE = 0.5  # from walls and from every mic
MIN_MIC_SPACING = 0.5
WALL_MARGIN = 0.1  # mics and noise stay strictly inside
SNR_RANGE_DB = (5.0, 20.0)
RETRY_CAP = 10000
DEFAULT_MAX_ORDER = 20
RIR_TAIL_FACTOR = 1.25


class SceneSamplingError(RuntimeError):
    """Placement constraints could not be satisfied within the retry cap."""


@dataclass
class RoomSpec:
    """Shoebox room: floor area in [10, 60] m2, T60 in [0.2, 0.6] s."""

    length: float
    width: float
    t60: float
    height: float = ROOM_HEIGHT

    def __post_init__(self):
        area = self.length * self.width
        if not (AREA_RANGE[0] - 1e-9 <= area <= AREA_RANGE[1] + 1e-9):
            raise ValueError(f"room area {area:.2f} m2 outside {AREA_RANGE}")
        if not (T60_RANGE[0] - 1e-9 <= self.t60 <= T60_RANGE[1] + 1e-9):
            raise ValueError(f"t60 {self.t60:.3f} s outside {T60_RANGE}")

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length, self.width, self.height])

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def surface(self) -> float:
        l, w, h = self.length, self.width, self.height
        return 2.0 * (l * w + l * h + w * h)

    def sabine_absorption(self) -> float:
        """Uniform wall absorption reproducing t60 (Sabine), capped at 1."""
        return min(1.0, 0.161 * self.volume / (self.surface * self.t60))


@dataclass
class ScenePlacement:
    """Speaker, noise and microphone positions plus mic orientations."""

    speaker_pos: np.ndarray
    noise_pos: np.ndarray
    mic_pos: np.ndarray       # (M, 3)
    mic_orient: np.ndarray    # (M, 3), unit vectors

    def __post_init__(self):
        self.speaker_pos = np.asarray(self.speaker_pos, dtype=np.float64)
        self.noise_pos = np.asarray(self.noise_pos, dtype=np.float64)
        self.mic_pos = np.asarray(self.mic_pos, dtype=np.float64)
        self.mic_orient = np.asarray(self.mic_orient, dtype=np.float64)
        if self.mic_pos.ndim != 2 or self.mic_pos.shape[1] != 3:
            raise ValueError("mic_pos must be (M, 3)")
        if self.mic_orient.shape != self.mic_pos.shape:
            raise ValueError("mic_orient must match mic_pos shape")

    @property
    def n_mics(self) -> int:
        return self.mic_pos.shape[0]


@dataclass
class Rir:
    """Room impulse response at 16 kHz."""

    taps: np.ndarray
    sample_rate: int = SAMPLE_RATE


@dataclass
class SimulatedUtterance:
    """Rendered 8-channel utterance with dry reference and labels."""

    channels: list
    clean_ref: Waveform
    relevance: np.ndarray
    room: RoomSpec
    placement: ScenePlacement
    seed: int


def placement_violations(room: RoomSpec, p: ScenePlacement) -> list[str]:
    """All placement-constraint violations (empty list when valid)."""
    bad = []
    dims = room.dims

    def inside(pos, margin, what):
        if np.any(pos < margin - 1e-12) or np.any(pos > dims - margin + 1e-12):
            bad.append(f"{what} outside room margins")

    inside(p.speaker_pos, MIN_SPEAKER_CLEARANCE, "speaker")
    inside(p.noise_pos, WALL_MARGIN, "noise")
    for i in range(p.n_mics):
        inside(p.mic_pos[i], WALL_MARGIN, f"mic {i}")
    dist_to_spk = np.linalg.norm(p.mic_pos - p.speaker_pos[None, :], axis=1)
    for i, d in enumerate(dist_to_spk):
        if d < MIN_SPEAKER_CLEARANCE - 1e-12:
            bad.append(f"mic {i} within {MIN_SPEAKER_CLEARANCE} m of speaker")
    for i in range(p.n_mics):
        for j in range(i + 1, p.n_mics):
            if np.linalg.norm(p.mic_pos[i] - p.mic_pos[j]) < MIN_MIC_SPACING - 1e-12:
                bad.append(f"mics {i} and {j} closer than {MIN_MIC_SPACING} m")
    for i in range(p.n_mics):
        if abs(np.linalg.norm(p.mic_orient[i]) - 1.0) > 1e-9:
            bad.append(f"mic {i} orientation is not a unit vector")
    return bad


def _uniform_in_box(rng: np.random.Generator, dims: np.ndarray, margin) -> np.ndarray:
    lo = np.broadcast_to(np.asarray(margin, dtype=np.float64), (3,))
    hi = dims - lo
    return lo + rng.random(3) * (hi - lo)


def _random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n


def sample_scene(seed: int, n_mics: int = 8) -> tuple[RoomSpec, ScenePlacement]:
    """Sample a room and a constraint-satisfying placement, deterministically.

    Floor area is uniform in [10, 60] m2 with a uniform aspect ratio in
    [0.5, 2]; T60 is uniform in [0.2, 0.6] s. Microphones are placed by
    rejection sampling with a global retry cap.
    """
    rng = np.random.default_rng(seed)
    area = rng.uniform(*AREA_RANGE)
    aspect = rng.uniform(0.5, 2.0)
    width = float(np.sqrt(area / aspect))
    length = area / width
    t60 = rng.uniform(*T60_RANGE)
    room = RoomSpec(length=length, width=width, t60=t60)
    dims = room.dims

    speaker = _uniform_in_box(rng, dims, MIN_SPEAKER_CLEARANCE)
    noise = _uniform_in_box(rng, dims, WALL_MARGIN)

    mics: list[np.ndarray] = []
    retries = 0
    while len(mics) < n_mics:
        cand = _uniform_in_box(rng, dims, WALL_MARGIN)
        ok = np.linalg.norm(cand - speaker) >= MIN_SPEAKER_CLEARANCE and all(
            np.linalg.norm(cand - m) >= MIN_MIC_SPACING for m in mics
        )
        if ok:
            mics.append(cand)
        else:
            retries += 1
            if retries > RETRY_CAP:
                raise SceneSamplingError(
                    f"placement rejection sampling exceeded {RETRY_CAP} retries"
                )
    orients = np.stack([_random_unit_vector(rng) for _ in range(n_mics)])
    placement = ScenePlacement(
        speaker_pos=speaker, noise_pos=noise,
        mic_pos=np.stack(mics), mic_orient=orients,
    )
    return room, placement


def _require_inside(room: RoomSpec, pos: np.ndarray, what: str) -> None:
    if np.any(pos <= 0.0) or np.any(pos >= room.dims):
        raise ValueError(f"{what} position {pos} is outside the room")


class _ImageField:
    """Image-source lattice for one source in one room, shared across mics.

    Image positions and per-image reflection attenuations depend only on
    the source, so they are computed once and reused for every microphone.
    ``max_order`` bounds the image lattice index per axis.
    """

    def __init__(self, room: RoomSpec, src: np.ndarray, t_max: float,
                 max_order: int, beta: float):
        dims = room.dims
        reach = SPEED_OF_SOUND * t_max
        axes_pos = []
        axes_refl = []
        for a in range(3):
            n_a = min(max_order, int(np.ceil(reach / (2.0 * dims[a]))))
            r = np.arange(-n_a, n_a + 1)
            # mirror parity p in {0, 1}: position (1 - 2p) src + 2 (r + p) L
            pos0 = src[a] + 2.0 * r * dims[a]
            refl0 = 2 * np.abs(r)
            pos1 = -src[a] + 2.0 * (r + 1) * dims[a]
            refl1 = np.abs(r + 1) + np.abs(r)
            axes_pos.append(np.concatenate([pos0, pos1]))
            axes_refl.append(np.concatenate([refl0, refl1]))
        px, py, pz = np.meshgrid(*axes_pos, indexing="ij")
        rx, ry, rz = np.meshgrid(*axes_refl, indexing="ij")
        self.positions = np.stack([px.ravel(), py.ravel(), pz.ravel()], axis=1)
        n_refl = (rx + ry + rz).ravel()
        self.attenuation = beta ** n_refl if beta > 0.0 else (n_refl == 0).astype(np.float64)

    def rir(self, mic_pos: np.ndarray, mic_orient: np.ndarray, n_taps: int) -> np.ndarray:
        delta = self.positions - mic_pos[None, :]
        dist = np.linalg.norm(delta, axis=1)
        dist = np.maximum(dist, 1e-9)
        cos_theta = (delta @ mic_orient) / dist
        gain = 0.5 * (1.0 + cos_theta)
        amp = self.attenuation * gain / dist
        idx = np.rint(dist / SPEED_OF_SOUND * SAMPLE_RATE).astype(np.int64)
        keep = idx < n_taps
        return np.bincount(idx[keep], weights=amp[keep], minlength=n_taps)


def image_source_rir(room: RoomSpec, src, mic_pos, mic_orient,
                     max_order: int = DEFAULT_MAX_ORDER,
                     absorption: Optional[float] = None) -> Rir:
    """Image-source RIR for a cardioid microphone in a shoebox room.

    Uniform wall absorption is derived from t60 via Sabine's formula unless
    overridden. Each image arrival is weighted by the cardioid gain
    0.5 (1 + cos theta) toward the arrival direction and 1/distance
    spreading, and lands on the nearest sample.
    """
    src = np.asarray(src, dtype=np.float64)
    mic_pos = np.asarray(mic_pos, dtype=np.float64)
    mic_orient = np.asarray(mic_orient, dtype=np.float64)
    _require_inside(room, src, "source")
    _require_inside(room, mic_pos, "microphone")
    alpha = room.sabine_absorption() if absorption is None else float(absorption)
    beta = float(np.sqrt(max(0.0, 1.0 - alpha)))
    direct_t = np.linalg.norm(src - mic_pos) / SPEED_OF_SOUND
    tail = 0.002 if beta == 0.0 else room.t60 * RIR_TAIL_FACTOR
    t_max = direct_t + tail
    n_taps = int(np.ceil(t_max * SAMPLE_RATE)) + 1
    field = _ImageField(room, src, t_max, max_order, beta)
    return Rir(taps=field.rir(mic_pos, mic_orient, n_taps))


def proxy_relevance(channels: Sequence[Waveform], clean_ref: Waveform) -> np.ndarray:
    """Bounded per-channel quality labels: logistic(SDR / 10) in (0, 1).

    A channel identical to the reference approaches logistic(6) ~ 0.9975
    (the SDR cap); an all-zero channel gets exactly 0.
    """
    if not np.any(clean_ref.samples):
        raise ValueError("clean reference is silent; relevance undefined")
    rel = np.empty(len(channels))
    for i, ch in enumerate(channels):
        if not np.any(ch.samples):
            rel[i] = 0.0
        else:
            rel[i] = 1.0 / (1.0 + np.exp(-sdr_db(ch, clean_ref) / 10.0))
    return rel


def render_scene(clean: Waveform, noise: Optional[Waveform], room: RoomSpec,
                 placement: ScenePlacement, seed: int,
                 max_order: int = DEFAULT_MAX_ORDER,
                 absorption: Optional[float] = None) -> SimulatedUtterance:
    """Render the microphone channels for one scene.

    channel_i = clean * rir(speaker -> mic_i) + a * noise * rir(noise -> mic_i),
    with the noise gain ``a`` drawn so the SNR at the closest-to-speaker
    microphone is uniform in [5, 20] dB. The dry source is kept as the
    reference and proxy relevance labels are attached.
    """
    if not np.any(clean.samples):
        raise ValueError("clean input is silent; cannot render a scene")
    rng = np.random.default_rng([seed, 3])
    alpha = room.sabine_absorption() if absorption is None else float(absorption)
    beta = float(np.sqrt(max(0.0, 1.0 - alpha)))
    diag = float(np.linalg.norm(room.dims))
    tail = 0.002 if beta == 0.0 else room.t60 * RIR_TAIL_FACTOR
    t_max = diag / SPEED_OF_SOUND + tail
    n_taps = int(np.ceil(t_max * SAMPLE_RATE)) + 1

    speaker_field = _ImageField(room, placement.speaker_pos, t_max, max_order, beta)
    signal_parts = [
        scipy.signal.fftconvolve(
            clean.samples, speaker_field.rir(placement.mic_pos[i],
                                             placement.mic_orient[i], n_taps)
        )
        for i in range(placement.n_mics)
    ]

    if noise is not None and np.any(noise.samples):
        noise_field = _ImageField(room, placement.noise_pos, t_max, max_order, beta)
        src = noise.samples
        if len(src) < len(clean.samples):
            reps = int(np.ceil(len(clean.samples) / len(src)))
            src = np.tile(src, reps)
        src = src[: len(clean.samples)]
        noise_parts = [
            scipy.signal.fftconvolve(
                src, noise_field.rir(placement.mic_pos[i],
                                     placement.mic_orient[i], n_taps)
            )
            for i in range(placement.n_mics)
        ]
        closest = int(np.argmin(
            np.linalg.norm(placement.mic_pos - placement.speaker_pos[None, :], axis=1)
        ))
        snr_db = rng.uniform(*SNR_RANGE_DB)
        e_sig = float(np.dot(signal_parts[closest], signal_parts[closest]))
        e_noise = float(np.dot(noise_parts[closest], noise_parts[closest]))
        gain = 0.0 if e_noise == 0.0 else float(
            np.sqrt(e_sig / (e_noise * 10.0 ** (snr_db / 10.0)))
        )
        mixed = [s + gain * n for s, n in zip(signal_parts, noise_parts)]
    else:
        mixed = signal_parts

    channels = [Waveform(samples=m) for m in mixed]
    relevance = proxy_relevance(channels, clean)
    return SimulatedUtterance(
        channels=channels, clean_ref=clean, relevance=relevance,
        room=room, placement=placement, seed=seed,
    )


def speech_shaped_burst(duration_s: float, seed: int) -> Waveform:
    """Built-in source material: speech-shaped noise with 4 Hz syllabic AM.

    White noise is spectrally tilted toward the long-term speech spectrum
    (band-passed around 120-600 Hz with a gentle high-frequency rolloff)
    and amplitude-modulated at the syllabic rate, then peak-normalized.
    """
    rng = np.random.default_rng([seed, 1])
    n = int(round(duration_s * SAMPLE_RATE))
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    shape = (f / (f + 120.0)) / (1.0 + f / 600.0)
    x = np.fft.irfft(spec * shape, n=n)
    t = np.arange(n) / SAMPLE_RATE
    phase = rng.uniform(0.0, 2.0 * np.pi)
    am = 0.1 + 0.9 * 0.5 * (1.0 + np.sin(2.0 * np.pi * 4.0 * t + phase))
    x *= am
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= 0.5 / peak
    return Waveform(samples=x)


def stationary_noise(duration_s: float, seed: int) -> Waveform:
    """Built-in point-noise material: stationary low-tilted noise."""
    rng = np.random.default_rng([seed, 2])
    n = int(round(duration_s * SAMPLE_RATE))
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    shape = 1.0 / np.sqrt(1.0 + f / 300.0)
    x = np.fft.irfft(spec * shape, n=n)
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= 0.5 / peak
    return Waveform(samples=x)


def utterance_record(utt_id: str, utt: SimulatedUtterance,
                     channel_paths: list[str], clean_path: str) -> dict:
    """Manifest record for one rendered utterance."""
    return {
        "id": utt_id,
        "seed": utt.seed,
        "channel_paths": channel_paths,
        "clean_path": clean_path,
        "relevance": [float(r) for r in utt.relevance],
        "room": {
            "length": utt.room.length,
            "width": utt.room.width,
            "height": utt.room.height,
            "t60": utt.room.t60,
        },
        "positions": {
            "speaker": list(utt.placement.speaker_pos),
            "noise": list(utt.placement.noise_pos),
            "mics": [list(p) for p in utt.placement.mic_pos],
            "mic_orientations": [list(o) for o in utt.placement.mic_orient],
        },
    }


def simulate_dataset(out_dir, n_utterances: int, seed: int = 0,
                     duration_s: float = 2.0, with_noise: bool = True,
                     n_mics: int = 8, max_order: int = DEFAULT_MAX_ORDER,
                     wav_format: str = "float32",
                     source_wavs: Optional[Sequence[Path]] = None,
                     noise_wavs: Optional[Sequence[Path]] = None,
                     progress=None) -> Path:
    """Render a dataset directory plus JSON-lines manifest; returns its path.

    Utterance i uses seed ``seed + i`` for everything: scene sampling,
    source material (built-in generator unless WAV corpora are given) and
    the SNR draw, so a fixed seed reproduces the dataset byte for byte.
    """
    from .dsp import read_wav  # local import to keep module load light

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    records = []
    for i in range(n_utterances):
        utt_seed = seed + i
        rng_pick = np.random.default_rng([utt_seed, 4])
        room, placement = sample_scene(utt_seed, n_mics=n_mics)
        if source_wavs:
            clean = read_wav(source_wavs[int(rng_pick.integers(len(source_wavs)))])
        else:
            clean = speech_shaped_burst(duration_s, utt_seed)
        if not with_noise:
            noise = None
        elif noise_wavs:
            noise = read_wav(noise_wavs[int(rng_pick.integers(len(noise_wavs)))])
        else:
            noise = stationary_noise(duration_s, utt_seed)
        utt = render_scene(clean, noise, room, placement, utt_seed,
                           max_order=max_order)
        utt_id = f"utt{i:05d}"
        ch_paths = []
        for c, wav in enumerate(utt.channels):
            rel = f"{utt_id}.ch{c}.wav"
            write_wav(out_dir / rel, wav, fmt=wav_format)
            ch_paths.append(rel)
        clean_rel = f"{utt_id}.clean.wav"
        write_wav(out_dir / clean_rel, utt.clean_ref, fmt=wav_format)
        records.append(utterance_record(utt_id, utt, ch_paths, clean_rel))
        if progress is not None:
            progress(i + 1, n_utterances)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return manifest_path
