import math

import numpy as np
import pytest
import scipy.stats

from chanrank.dsp import Waveform
from chanrank.scene import (AREA_RANGE, SPEED_OF_SOUND, T60_RANGE, RoomSpec,
                            image_source_rir, placement_violations,
                            proxy_relevance, render_scene, sample_scene,
                            speech_shaped_burst, stationary_noise)


class TestSampleScene:
    def test_same_seed_same_scene(self):
        room_a, plc_a = sample_scene(42)
        room_b, plc_b = sample_scene(42)
        assert room_a == room_b
        assert np.array_equal(plc_a.mic_pos, plc_b.mic_pos)
        assert np.array_equal(plc_a.mic_orient, plc_b.mic_orient)
        assert np.array_equal(plc_a.speaker_pos, plc_b.speaker_pos)

    def test_constraints_hold_across_seeds(self):
        for seed in range(1000):
            room, plc = sample_scene(seed)
            assert placement_violations(room, plc) == []

    def test_room_distributions_match_protocol(self):
        areas, t60s = [], []
        for seed in range(1000):
            room, _ = sample_scene(seed)
            areas.append(room.length * room.width)
            t60s.append(room.t60)
        areas, t60s = np.asarray(areas), np.asarray(t60s)
        assert areas.min() >= AREA_RANGE[0] and areas.max() <= AREA_RANGE[1]
        assert t60s.min() >= T60_RANGE[0] and t60s.max() <= T60_RANGE[1]
        # uniform sampling should fill the range
        assert areas.min() < 15 and areas.max() > 55
        assert t60s.min() < 0.25 and t60s.max() > 0.55

    def test_eight_mics_with_orientations(self):
        _, plc = sample_scene(7)
        assert plc.mic_pos.shape == (8, 3)
        norms = np.linalg.norm(plc.mic_orient, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-9)

    def test_room_spec_validation(self):
        with pytest.raises(ValueError):
            RoomSpec(length=1.0, width=1.0, t60=0.3)  # area below range
        with pytest.raises(ValueError):
            RoomSpec(length=5.0, width=5.0, t60=1.5)  # t60 out of range


class TestImageSourceRir:
    def room(self):
        return RoomSpec(length=6.0, width=5.0, t60=0.4)

    def test_anechoic_single_direct_tap(self):
        room = self.room()
        src = np.array([2.0, 2.5, 1.5])
        mic = np.array([4.5, 2.0, 1.3])
        orient = (src - mic) / np.linalg.norm(src - mic)
        rir = image_source_rir(room, src, mic, orient, absorption=1.0)
        nz = np.flatnonzero(rir.taps)
        assert len(nz) == 1
        dist = np.linalg.norm(src - mic)
        assert nz[0] == round(dist / SPEED_OF_SOUND * 16000)
        assert math.isclose(rir.taps[nz[0]], 1.0 / dist, rel_tol=1e-12)

    def test_cardioid_null_is_exactly_zero(self):
        room = self.room()
        src = np.array([2.0, 2.5, 1.5])
        mic = np.array([4.0, 2.5, 1.5])
        toward = np.array([-1.0, 0.0, 0.0])  # pointing at the source
        away = np.array([1.0, 0.0, 0.0])
        on_axis = image_source_rir(room, src, mic, toward, absorption=1.0)
        off_axis = image_source_rir(room, src, mic, away, absorption=1.0)
        assert np.flatnonzero(on_axis.taps).size == 1
        assert not np.any(off_axis.taps)

    def test_first_tap_at_direct_delay(self):
        rng = np.random.default_rng(0)
        for seed in range(5):
            room, plc = sample_scene(seed)
            rir = image_source_rir(room, plc.speaker_pos, plc.mic_pos[0],
                                   plc.mic_orient[0])
            nz = np.flatnonzero(rir.taps)
            direct = np.linalg.norm(plc.speaker_pos - plc.mic_pos[0])
            expect = round(direct / SPEED_OF_SOUND * 16000)
            assert abs(int(nz[0]) - expect) <= 1

    def test_schroeder_decay_near_nominal_t60(self):
        room = RoomSpec(length=5.0, width=5.0, t60=0.4)
        src = np.array([1.5, 2.0, 1.4])
        mic = np.array([3.5, 3.0, 1.6])
        rir = image_source_rir(room, src, mic, np.array([1.0, 0.0, 0.0]))
        energy = rir.taps ** 2
        edc = np.cumsum(energy[::-1])[::-1]
        edc_db = 10.0 * np.log10(np.maximum(edc / edc[0], 1e-30))
        direct_idx = round(np.linalg.norm(src - mic) / SPEED_OF_SOUND * 16000)
        crossing = int(np.argmax(edc_db <= -60.0))
        t60_measured = (crossing - direct_idx) / 16000.0
        assert 0.4 * 0.7 <= t60_measured <= 0.4 * 1.3

    def test_outside_positions_rejected(self):
        room = self.room()
        with pytest.raises(ValueError):
            image_source_rir(room, np.array([7.0, 1.0, 1.0]),
                             np.array([1.0, 1.0, 1.0]), np.array([1.0, 0, 0]))
        with pytest.raises(ValueError):
            image_source_rir(room, np.array([1.0, 1.0, 1.0]),
                             np.array([1.0, -0.5, 1.0]), np.array([1.0, 0, 0]))


class TestRenderScene:
    def test_anechoic_channels_are_scaled_delayed_clean(self):
        room, plc = sample_scene(3)
        clean = speech_shaped_burst(0.5, 3)
        utt = render_scene(clean, None, room, plc, seed=3, absorption=1.0)
        assert len(utt.channels) == 8
        lengths = {len(c.samples) for c in utt.channels}
        assert len(lengths) == 1
        n = len(clean.samples)
        for i, ch in enumerate(utt.channels):
            delta = plc.speaker_pos - plc.mic_pos[i]
            dist = np.linalg.norm(delta)
            cos_t = float(delta @ plc.mic_orient[i] / dist)
            gain = 0.5 * (1.0 + cos_t) / dist
            delay = round(dist / SPEED_OF_SOUND * 16000)
            expect = np.zeros(len(ch.samples))
            expect[delay:delay + n] = gain * clean.samples
            assert np.allclose(ch.samples, expect, atol=1e-12)

    def test_same_seed_bit_identical(self):
        room, plc = sample_scene(5)
        clean = speech_shaped_burst(0.4, 5)
        noise = stationary_noise(0.4, 5)
        a = render_scene(clean, noise, room, plc, seed=5)
        b = render_scene(clean, noise, room, plc, seed=5)
        for ca, cb in zip(a.channels, b.channels):
            assert ca.samples.tobytes() == cb.samples.tobytes()
        assert np.array_equal(a.relevance, b.relevance)

    def test_silent_clean_rejected(self):
        room, plc = sample_scene(6)
        with pytest.raises(ValueError):
            render_scene(Waveform(samples=np.zeros(8000)), None, room, plc, 6)

    def test_rendered_energy_finite_nonzero(self):
        room, plc = sample_scene(8)
        utt = render_scene(speech_shaped_burst(0.4, 8), None, room, plc, 8)
        for ch in utt.channels:
            e = float(np.dot(ch.samples, ch.samples))
            assert np.isfinite(e) and e > 0.0

    def test_relevance_bounded(self):
        room, plc = sample_scene(9)
        utt = render_scene(speech_shaped_burst(0.4, 9),
                           stationary_noise(0.4, 9), room, plc, 9)
        assert np.all(utt.relevance > 0.0) and np.all(utt.relevance < 1.0)


class TestProxyRelevance:
    def test_identity_channel_approaches_cap(self):
        clean = speech_shaped_burst(0.5, 11)
        rel = proxy_relevance([clean], clean)
        assert math.isclose(rel[0], 1.0 / (1.0 + math.exp(-6.0)), rel_tol=1e-9)
        assert abs(rel[0] - 0.9975) < 1e-3

    def test_zero_channel_gets_zero(self):
        clean = speech_shaped_burst(0.5, 12)
        rel = proxy_relevance([Waveform(samples=np.zeros(len(clean)))], clean)
        assert rel[0] == 0.0

    def test_noise_channel_below_half(self):
        rng = np.random.default_rng(13)
        clean = speech_shaped_burst(0.5, 13)
        noise = Waveform(samples=rng.normal(0, 0.1, len(clean)))
        rel = proxy_relevance([noise], clean)
        assert rel[0] <= 0.5

    def test_monotone_in_sdr(self):
        rng = np.random.default_rng(14)
        clean = speech_shaped_burst(0.5, 14)
        n = rng.normal(0, 0.05, len(clean))
        low = Waveform(samples=clean.samples + 4.0 * n)
        high = Waveform(samples=clean.samples + 0.5 * n)
        rel = proxy_relevance([high, low], clean)
        assert rel[0] > rel[1]

    def test_silent_reference_rejected(self):
        with pytest.raises(ValueError):
            proxy_relevance([speech_shaped_burst(0.2, 1)],
                            Waveform(samples=np.zeros(3200)))


@pytest.mark.slow
class TestGeometrySanity:
    def test_closer_mics_rank_better_on_average(self):
        rhos = []
        for seed in range(200):
            room, plc = sample_scene(seed + 20000)
            clean = speech_shaped_burst(0.5, seed + 20000)
            utt = render_scene(clean, None, room, plc, seed + 20000)
            dist = np.linalg.norm(plc.mic_pos - plc.speaker_pos[None, :], axis=1)
            rho = scipy.stats.spearmanr(dist, utt.relevance).statistic
            rhos.append(rho)
        assert np.mean(rhos) < -0.3
