"""Front-end checks: STFT, mel filterbank, MFCC, deltas, input composition."""

import numpy as np
import pytest

from facspeech import features as ft
from facspeech import signal as sig


@pytest.fixture(scope="module")
def frontend():
    return ft.Frontend()


@pytest.fixture(scope="module")
def square_frontend():
    # n_cep == n_mel makes the cepstral basis exactly invertible
    return ft.Frontend(n_cep=12, n_mel=12)


def _tone(freq, n=4000, sr=8000, amp=0.4):
    t = np.arange(n) / sr
    return sig.Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


class TestFrontendMatrices:
    def test_dct_pinv_identity(self):
        for d, m in [(13, 24), (19, 27), (12, 12), (8, 50)]:
            c = ft.dct_matrix(d, m)
            assert np.abs(c @ c.T - np.eye(d)).max() < 1e-10

    def test_mel_rows_positive(self, frontend):
        assert np.all(frontend.mel_matrix.sum(axis=1) > 0)

    def test_mel_column_weight_bound(self, frontend):
        assert frontend.mel_matrix.sum(axis=0).max() <= 1.0 + 1e-9

    def test_dimension_ordering_enforced(self):
        with pytest.raises(ValueError):
            ft.Frontend(n_cep=30, n_mel=24)

    def test_starved_filterbank_rejected(self):
        with pytest.raises(ValueError):
            ft.Frontend(fft_size=64, frame_len=64, n_mel=24, n_cep=13)


class TestStftPower:
    def test_zero_waveform(self, frontend):
        w = sig.Waveform(np.zeros(1000))
        p = ft.stft_power(w, frontend)
        assert p.shape == (frontend.n_frames(1000), frontend.fft_size // 2 + 1)
        assert np.all(p == 0.0)

    def test_too_short_raises(self, frontend):
        with pytest.raises(ValueError):
            ft.stft_power(sig.Waveform(np.zeros(frontend.frame_len - 1)),
                          frontend)

    def test_bin_centered_sinusoid_dominates(self):
        # closed-form DFT: with a rectangular window spanning the whole
        # transform, all energy lands in one bin at a bin-centered frequency
        f = ft.Frontend(window="rect", frame_len=256, frame_shift=128,
                        fft_size=256)
        k = 20
        freq = k * f.sample_rate / f.fft_size
        w = _tone(freq, n=f.fft_size * 4)
        p = ft.stft_power(w, f)
        ratio = p[:, k] / p.sum(axis=1)
        assert np.all(ratio >= 0.99)

    def test_parseval(self, frontend):
        # time-domain oracle: sum over all fft bins of |X|^2 equals
        # fft_size times the windowed frame energy
        rng = np.random.default_rng(7)
        w = sig.Waveform(rng.normal(size=2000) * 0.3)
        p = ft.stft_power(w, frontend)
        full = np.copy(p)
        full[:, 1:-1] *= 2.0  # rfft halves the off-DC/Nyquist bins
        idx = (np.arange(p.shape[0])[:, None] * frontend.frame_shift
               + np.arange(frontend.frame_len)[None, :])
        frames = w.samples[idx] * np.hamming(frontend.frame_len)
        energy = (frames ** 2).sum(axis=1)
        assert np.allclose(full.sum(axis=1), frontend.fft_size * energy,
                           rtol=1e-6)


class TestMfcc:
    def test_zero_waveform_hits_floor(self, frontend):
        w = sig.Waveform(np.zeros(1000))
        y = ft.mfcc(w, frontend)
        expect = frontend.dct @ (np.log(frontend.log_floor)
                                 * np.ones(frontend.n_mel))
        assert np.allclose(y.frames, expect[None, :], atol=1e-12)
        assert y.kind == "mfcc_static"
        assert y.dim == frontend.n_cep

    def test_gain_shift_identity(self, frontend):
        # scaling the waveform by g shifts every unfloored frame by
        # 2 ln(g) * (C 1); verified numerically on a loud signal
        rng = np.random.default_rng(3)
        w = sig.Waveform(0.5 * rng.normal(size=3000))
        g = 2.5
        y1 = ft.mfcc(w, frontend)
        y2 = ft.mfcc(sig.Waveform(g * w.samples), frontend)
        shift = 2.0 * np.log(g) * (frontend.dct @ np.ones(frontend.n_mel))
        assert np.allclose(y2.frames - y1.frames, shift[None, :], atol=1e-8)

    def test_invert_then_forward_square(self, square_frontend):
        f = square_frontend
        rng = np.random.default_rng(4)
        w = sig.Waveform(0.4 * rng.normal(size=2500))
        y = ft.mfcc(w, f).frames
        back = np.log(np.exp(y @ f.dct_pinv.T)) @ f.dct.T
        assert np.allclose(back, y, atol=1e-8)

    def test_projection_residual_when_lossy(self, frontend):
        # d < M: reconstruction projects onto the cepstral subspace
        rng = np.random.default_rng(5)
        w = sig.Waveform(0.4 * rng.normal(size=2500))
        lm = ft.log_mel(w, frontend).frames
        projected = lm @ frontend.dct.T @ frontend.dct_pinv.T @ frontend.dct.T
        assert np.allclose(projected, lm @ frontend.dct.T, atol=1e-10)


class TestDeltas:
    def test_constant_sequence_zero_delta(self):
        fs = ft.FeatureSequence(np.ones((10, 3)), "mfcc_static", 0.01)
        out = ft.append_deltas(fs)
        assert out.kind == "mfcc_with_delta"
        assert out.dim == 6
        assert np.all(out.frames[:, 3:] == 0.0)

    def test_linear_ramp_constant_slope(self):
        slope = 0.37
        frames = np.zeros((12, 2))
        frames[:, 0] = slope * np.arange(12)
        out = ft.append_deltas(ft.FeatureSequence(frames, "mfcc_static", 0.01))
        interior = out.frames[2:-2, 2]
        assert np.allclose(interior, slope, atol=1e-12)

    def test_matches_bruteforce_regression(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(15, 4))
        out = ft.append_deltas(ft.FeatureSequence(x, "mfcc_static", 0.01))
        K = ft.DELTA_HALF_WINDOW
        denom = 2 * sum(k * k for k in range(1, K + 1))
        for t in range(15):
            acc = np.zeros(4)
            for k in range(1, K + 1):
                hi = x[min(t + k, 14)]
                lo = x[max(t - k, 0)]
                acc += k * (hi - lo)
            assert np.allclose(out.frames[t, 4:], acc / denom, atol=1e-12)

    def test_requires_static_kind(self):
        fs = ft.FeatureSequence(np.ones((4, 3)), "log_mel", 0.01)
        with pytest.raises(ValueError):
            ft.append_deltas(fs)


class TestLogMel:
    def test_zero_waveform(self, frontend):
        w = sig.Waveform(np.zeros(1000))
        lm = ft.log_mel(w, frontend)
        assert np.allclose(lm.frames, np.log(frontend.log_floor))
        assert lm.dim == frontend.n_mel

    def test_mfcc_is_dct_of_log_mel(self, frontend):
        rng = np.random.default_rng(8)
        w = sig.Waveform(0.3 * rng.normal(size=2000))
        lm = ft.log_mel(w, frontend)
        y = ft.mfcc(w, frontend)
        assert np.allclose(y.frames, lm.frames @ frontend.dct.T, atol=1e-12)

    def test_amplification_monotone(self, frontend):
        rng = np.random.default_rng(9)
        for trial in range(5):
            w = sig.Waveform(0.2 * rng.normal(size=1500))
            lm1 = ft.log_mel(w, frontend).frames
            lm2 = ft.log_mel(sig.Waveform(3.0 * w.samples), frontend).frames
            assert np.all(lm2 >= lm1 - 1e-12)

    def test_adversarial_near_zero_signals_finite(self, frontend):
        rng = np.random.default_rng(10)
        for scale in [0.0, 1e-300, 1e-30, 1e-8]:
            w = sig.Waveform(scale * rng.normal(size=1200))
            lm = ft.log_mel(w, frontend)
            y = ft.mfcc_with_deltas(w, frontend)
            assert np.all(np.isfinite(lm.frames))
            assert np.all(np.isfinite(y.frames))


class TestComposeInput:
    def _spec(self, c, frontend, pairs=(("s0", "s1"), ("s1", "s0"))):
        stats = ft.Standardization(np.zeros(frontend.n_mel),
                                   np.ones(frontend.n_mel), 0.0, 1.0)
        return ft.InputSpec(c, frontend.n_mel, tuple(pairs), stats)

    def test_zero_context_single_frame(self, frontend):
        rng = np.random.default_rng(11)
        fs = ft.FeatureSequence(rng.normal(size=(6, frontend.n_mel)),
                                "log_mel", 0.01)
        spec = self._spec(0, frontend)
        item = ft.compose_dnn_input(fs, 3, spec, ("s0", "s1"), 0.0)
        assert item.window.shape == (1, frontend.n_mel)
        assert np.allclose(item.window[0], fs.frames[3])

    def test_edge_replication(self, frontend):
        rng = np.random.default_rng(12)
        fs = ft.FeatureSequence(rng.normal(size=(8, frontend.n_mel)),
                                "log_mel", 0.01)
        spec = self._spec(2, frontend)
        item = ft.compose_dnn_input(fs, 0, spec, ("s0", "s1"), 0.0)
        assert np.allclose(item.window[0], fs.frames[0])
        assert np.allclose(item.window[1], fs.frames[0])
        assert np.allclose(item.window[2], fs.frames[0])

    def test_one_hot_and_gain(self, frontend):
        rng = np.random.default_rng(13)
        fs = ft.FeatureSequence(rng.normal(size=(5, frontend.n_mel)),
                                "log_mel", 0.01)
        spec = self._spec(1, frontend)
        item = ft.compose_dnn_input(fs, 2, spec, ("s1", "s0"), -6.0)
        assert item.speaker_pair_code.sum() == 1.0
        assert item.speaker_pair_code[1] == 1.0
        assert item.gain_feature == -6.0
        vec = item.vector()
        assert vec.shape == (spec.dim,)

    def test_unknown_pair_raises(self, frontend):
        fs = ft.FeatureSequence(np.zeros((4, frontend.n_mel)), "log_mel", 0.01)
        spec = self._spec(1, frontend)
        with pytest.raises(KeyError):
            ft.compose_dnn_input(fs, 0, spec, ("s9", "s9"), 0.0)

    def test_paper_window_dimensions(self):
        # 17-frame window of 50 mel filters: 850 continuous dimensions
        f = ft.paper_dnn_frontend()
        stats = ft.Standardization(np.zeros(f.n_mel), np.ones(f.n_mel))
        spec = ft.InputSpec(8, f.n_mel, (("s0", "s1"),), stats)
        assert spec.window_frames == 17
        assert spec.n_continuous == 850

    def test_standardization_invariant(self, frontend):
        # standardized dims: |mean| < 0.1, variance in [0.5, 2] on the
        # training material the stats came from
        rng = np.random.default_rng(14)
        mel = 4.0 * rng.normal(size=(500, frontend.n_mel)) - 2.0
        gains = rng.uniform(-9, 6, size=500)
        stats = ft.fit_standardization(mel, gains)
        spec = ft.InputSpec(2, frontend.n_mel, (("s0", "s1"),), stats)
        fs = ft.FeatureSequence(mel, "log_mel", 0.01)
        rows = ft.compose_input_matrix(fs, spec, ("s0", "s1"), float(gains[0]))
        window = rows[:, : spec.n_continuous]
        assert np.abs(window.mean(axis=0)).max() < 0.1
        assert window.var(axis=0).min() > 0.5
        assert window.var(axis=0).max() < 2.0


class TestArchive:
    def test_round_trip(self, tmp_path, frontend):
        rng = np.random.default_rng(15)
        items = {
            "utt1": ft.FeatureSequence(rng.normal(size=(7, 5)), "mfcc_static",
                                       0.01),
            "utt2": ft.FeatureSequence(rng.normal(size=(3, 5)), "log_mel",
                                       0.0125),
        }
        path = tmp_path / "feats.bin"
        ft.write_feature_archive(path, items)
        back = ft.read_feature_archive(path)
        assert set(back) == set(items)
        for key in items:
            assert back[key].kind == items[key].kind
            assert back[key].frame_shift_s == items[key].frame_shift_s
            assert np.array_equal(back[key].frames, items[key].frames)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.bin"
        path.write_bytes(b"not an archive")
        with pytest.raises(ValueError):
            ft.read_feature_archive(path)


class TestFrameLabels:
    def test_center_sample_rule(self, frontend):
        segs = [sig.Segment("a", 0, 1000), sig.Segment("b", 1000, 2000)]
        labels = ft.frame_labels(segs, frontend, frontend.n_frames(2000))
        switch = next(t for t, ph in enumerate(labels) if ph == "b")
        center = frontend.frame_center_sample(switch)
        assert center >= 1000
        assert frontend.frame_center_sample(switch - 1) < 1000
