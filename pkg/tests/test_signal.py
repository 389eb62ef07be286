"""Synthesis, mixing, and audio I/O checks."""

import numpy as np
import pytest
from scipy.optimize import brentq

from facspeech import signal as sig
from facspeech.errors import LexiconError


@pytest.fixture(scope="module")
def voice():
    table = sig.default_phone_table()
    lexicon = {"sil": ["sil"], "hum": ["p0", "p2"], "hiss": ["p1"],
               "buzz": ["p4", "p5"]}
    return sig.Voice(table, lexicon)


class TestSynthUtterance:
    def test_seed_determinism(self, voice):
        w1 = sig.synth_utterance(["sil", "hum", "sil"], voice, seed=11)
        w2 = sig.synth_utterance(["sil", "hum", "sil"], voice, seed=11)
        assert np.array_equal(w1.samples, w2.samples)

    def test_different_seeds_differ(self, voice):
        w1 = sig.synth_utterance(["hum"], voice, seed=1)
        w2 = sig.synth_utterance(["hum"], voice, seed=2)
        assert not np.array_equal(w1.samples, w2.samples)

    def test_silence_energy_near_zero(self, voice):
        quiet = sig.synth_utterance(["sil"], voice, seed=3)
        voiced = sig.synth_utterance(["hum"], voice, seed=3)
        ratio = (quiet.energy() / len(quiet)) / (voiced.energy() / len(voiced))
        assert ratio < 1e-4

    def test_duration_is_sum_of_segments(self, voice):
        w, segs = sig.synth_utterance_aligned(["hum", "buzz"], voice, seed=5)
        assert len(w) == segs[-1].end
        assert segs[0].start == 0
        for a, b in zip(segs[:-1], segs[1:]):
            assert a.end == b.start

    def test_band_energy_concentration(self, voice):
        # independent FFT oracle: energy inside the template band dominates
        w, segs = sig.synth_utterance_aligned(["hum", "hiss", "buzz"], voice,
                                              seed=9)
        for seg in segs:
            tpl = voice.phone_table[seg.phone]
            if tpl.kind == "silence":
                continue
            chunk = w.samples[seg.start:seg.end]
            spec = np.abs(np.fft.rfft(chunk)) ** 2
            freqs = np.fft.rfftfreq(len(chunk), d=1.0 / w.sample_rate)
            lo, hi = tpl.band
            pad = 25.0  # fade transients leak a little outside the band
            inside = spec[(freqs >= lo - pad) & (freqs <= hi + pad)].sum()
            assert inside / spec.sum() > 0.9, seg.phone

    def test_unknown_word_raises(self, voice):
        with pytest.raises(LexiconError):
            sig.synth_utterance(["nope"], voice, seed=0)

    def test_empty_word_seq_raises(self, voice):
        with pytest.raises(ValueError):
            sig.synth_utterance([], voice, seed=0)


class TestGainFromTmr:
    def test_zero_tmr_equal_energy(self):
        assert sig.gain_from_tmr(0.0, 2.5, 2.5) == pytest.approx(1.0)

    def test_minus_six_db(self):
        # analytically forced: g = 10^{0.3}
        assert sig.gain_from_tmr(-6.0, 1.0, 1.0) == pytest.approx(
            10 ** 0.3, abs=1e-12)

    def test_tmr_six_fourfold_energy(self):
        # independent numeric solve of 10*log10(4/g^2) = 6
        oracle = brentq(lambda g: 10 * np.log10(4.0 / g ** 2) - 6.0, 0.1, 10.0,
                        xtol=1e-13)
        assert sig.gain_from_tmr(6.0, 4.0, 1.0) == pytest.approx(oracle,
                                                                 abs=1e-10)

    def test_round_trip_tmr(self):
        # measuring the TMR realized by g recovers the request to 1e-9 dB
        rng = np.random.default_rng(0)
        for _ in range(20):
            ea, eb = rng.uniform(0.1, 10.0, size=2)
            tmr = rng.uniform(-12.0, 12.0)
            g = sig.gain_from_tmr(tmr, ea, eb)
            measured = 10.0 * np.log10(ea / (g ** 2 * eb))
            assert measured == pytest.approx(tmr, abs=1e-9)

    def test_nonpositive_energy_raises(self):
        with pytest.raises(ValueError):
            sig.gain_from_tmr(0.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            sig.gain_from_tmr(0.0, 1.0, -2.0)


class TestMix:
    def _waves(self, seed=0, n1=800, n2=650):
        rng = np.random.default_rng(seed)
        return (sig.Waveform(rng.normal(size=n1) * 0.1),
                sig.Waveform(rng.normal(size=n2) * 0.1))

    def test_zero_gain_returns_target(self):
        wa, wb = self._waves()
        y = sig.mix(wa, wb, sig.MixSpec(explicit_gain=0.0))
        assert np.array_equal(y.samples[: len(wa)], wa.samples)
        assert np.all(y.samples[len(wa):] == 0.0)

    def test_unit_gain_cancellation(self):
        wa, _ = self._waves()
        wb = sig.Waveform(-wa.samples)
        y = sig.mix(wa, wb, sig.MixSpec(explicit_gain=1.0))
        assert np.all(y.samples == 0.0)

    def test_elementwise_oracle(self):
        wa, wb = self._waves(seed=3)
        y = sig.mix(wa, wb, sig.MixSpec(explicit_gain=0.5))
        n = max(len(wa), len(wb))
        expect = np.zeros(n)
        for t in range(n):
            a = wa.samples[t] if t < len(wa) else 0.0
            b = wb.samples[t] if t < len(wb) else 0.0
            expect[t] = a + 0.5 * b
        assert np.array_equal(y.samples, expect)

    def test_linearity(self):
        wa, wb = self._waves(seed=4)
        spec = sig.MixSpec(explicit_gain=0.7)
        alpha = 3.7
        y1 = sig.mix(sig.Waveform(alpha * wa.samples),
                     sig.Waveform(alpha * wb.samples), spec)
        y2 = sig.mix(wa, wb, spec)
        assert np.allclose(y1.samples, alpha * y2.samples, rtol=1e-12, atol=0)

    def test_sample_rate_mismatch(self):
        wa = sig.Waveform(np.zeros(100), 8000)
        wb = sig.Waveform(np.zeros(100), 16000)
        with pytest.raises(ValueError):
            sig.mix(wa, wb, sig.MixSpec(explicit_gain=1.0))

    def test_mixspec_exclusivity(self):
        with pytest.raises(ValueError):
            sig.MixSpec()
        with pytest.raises(ValueError):
            sig.MixSpec(tmr_db=0.0, explicit_gain=1.0)
        assert sig.MixSpec(tmr_db=3.0).gain_mode == "from_tmr"
        assert sig.MixSpec(explicit_gain=2.0).gain_mode == "explicit_gain"


class TestWaveformInvariants:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            sig.Waveform(np.array([0.0, np.nan]))

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            sig.Waveform(np.zeros(4), 0)


class TestIo:
    def test_wav_round_trip(self, tmp_path, voice):
        w = sig.synth_utterance(["hum", "buzz"], voice, seed=2)
        path = tmp_path / "x.wav"
        sig.write_wav(path, w)
        back = sig.read_wav(path)
        assert back.sample_rate == w.sample_rate
        assert len(back) == len(w)
        assert np.max(np.abs(back.samples - w.samples)) <= 1.0 / 32768.0

    def test_manifest_round_trip(self, tmp_path):
        records = [
            sig.UtteranceRecord("u1", "s0", "wav/u1.wav", ("sil", "hum", "sil")),
            sig.UtteranceRecord("u2", "s1", "wav/u2.wav", ("buzz",)),
        ]
        path = tmp_path / "manifest.tsv"
        sig.write_manifest(path, records)
        assert sig.read_manifest(path) == records

    def test_speakers_deterministic(self):
        a = sig.make_speakers(8)
        b = sig.make_speakers(8)
        assert a == b
        genders = {s.gender for s in a}
        assert genders == {"high", "low"}
