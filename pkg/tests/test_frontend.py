import wave

import numpy as np
import pytest
import scipy.io.wavfile
from hypothesis import given, settings, strategies as st

from byola import frontend as fe
from byola.errors import ContractViolation, FormatError, TooShortError

from oracles import dft_magnitude, logmel_direct, slaney_hz, slaney_mel


def _tone(freq, seconds=0.5, sr=16000, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def test_int16_scaling(tmp_path):
    path = tmp_path / "a.wav"
    scipy.io.wavfile.write(path, 16000, np.array([32767, -32768, 0], dtype=np.int16))
    clip = fe.load_wav(path)
    np.testing.assert_array_equal(clip.samples, [32767 / 32768, -1.0, 0.0])


def test_stereo_averaged(tmp_path):
    path = tmp_path / "s.wav"
    scipy.io.wavfile.write(path, 16000, np.array([[0.5, -0.5], [0.25, 0.25]], dtype=np.float32))
    np.testing.assert_allclose(fe.load_wav(path).samples, [0.0, 0.25])


def test_uint8_and_int32(tmp_path):
    scipy.io.wavfile.write(tmp_path / "u8.wav", 8000, np.array([0, 128, 255], dtype=np.uint8))
    np.testing.assert_allclose(fe.load_wav(tmp_path / "u8.wav").samples, [-1.0, 0.0, 127 / 128])
    scipy.io.wavfile.write(tmp_path / "i32.wav", 8000, np.array([2 ** 30], dtype=np.int32))
    assert fe.load_wav(tmp_path / "i32.wav").samples[0] == 0.5


def test_24bit_pcm(tmp_path):
    path = tmp_path / "p24.wav"
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(3)
        w.setframerate(16000)
        w.writeframes((2 ** 22).to_bytes(3, "little", signed=True))
    assert fe.load_wav(path).samples[0] == pytest.approx(0.5)


def test_one_second_length(tmp_path):
    fe.save_wav(tmp_path / "x.wav", fe.AudioClip(np.zeros(16000), 16000))
    assert fe.load_wav(tmp_path / "x.wav").samples.size == 16000


def test_malformed_header(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"RIFF\x00\x00\x00\x00JUNK")
    with pytest.raises(FormatError):
        fe.load_wav(path)


def test_clip_invariants():
    with pytest.raises(ContractViolation):
        fe.AudioClip(np.zeros(0), 16000)
    with pytest.raises(ContractViolation):
        fe.AudioClip(np.zeros(3), 0)


def test_resample_identity():
    clip = fe.AudioClip(np.random.default_rng(0).normal(size=100) * 0.1, 16000)
    np.testing.assert_array_equal(fe.resample(clip, 16000).samples, clip.samples)


@pytest.mark.parametrize("src", [8000, 22050, 44100, 48000])
def test_resample_preserves_dc_and_length(src):
    clip = fe.AudioClip(np.full(src, 0.3), src)
    out = fe.resample(clip, 16000)
    assert out.samples.size == 16000
    np.testing.assert_allclose(out.samples, 0.3, atol=1e-3)


def test_resample_tone_peak_with_dft_oracle():
    clip = fe.AudioClip(_tone(1000.0, 0.25, 48000), 48000)
    out = fe.resample(clip, 16000)
    freqs = np.arange(100.0, 8000.0, 4.0)
    mags = dft_magnitude(out.samples, freqs, 16000)
    assert freqs[np.argmax(mags)] == pytest.approx(1000.0, abs=4.0)


def test_mel_scale_matches_oracle():
    for f in (0.0, 60.0, 500.0, 1000.0, 3000.0, 7800.0):
        assert float(fe.hz_to_mel(f)) == pytest.approx(slaney_mel(f), abs=1e-10)
        assert float(fe.mel_to_hz(slaney_mel(f))) == pytest.approx(slaney_hz(slaney_mel(f)))


def test_frame_count_formula():
    assert fe.num_frames(16000) == 94
    # 0.96 s: (15360 - 1024) // 160 + 1
    assert fe.num_frames(15360) == 90
    spec = fe.logmel(fe.AudioClip(np.zeros(15360), 16000))
    assert spec.shape == (64, 90)
    unit = fe.crop_or_pad(spec.values, 96)
    assert unit.shape == (64, 96)
    np.testing.assert_array_equal(unit[:, 90:], 0.0)


def test_silence_hits_floor():
    spec = fe.logmel(fe.AudioClip(np.zeros(4000), 16000))
    np.testing.assert_array_equal(spec.values, np.log(1e-7))


def test_too_short_and_wrong_rate():
    with pytest.raises(TooShortError):
        fe.logmel(fe.AudioClip(np.zeros(1023), 16000))
    with pytest.raises(ContractViolation):
        fe.logmel(fe.AudioClip(np.zeros(2048), 8000))


def test_logmel_matches_direct_dft_oracle():
    x = np.random.default_rng(5).normal(size=1024 + 160 * 3) * 0.1
    got = fe.logmel(fe.AudioClip(x, 16000)).values
    np.testing.assert_allclose(got, logmel_direct(x), atol=1e-8)


@pytest.mark.parametrize("k", [5, 20, 40, 60])
def test_tone_at_filter_centre_peaks_there(k):
    centre = fe.mel_center_frequencies()[k]
    spec = fe.logmel(fe.AudioClip(_tone(centre), 16000)).values
    mid = spec[:, spec.shape[1] // 2]
    assert int(np.argmax(mid)) == k
    oracle = logmel_direct(_tone(centre)[: 1024 + 160 * 2])[:, 1]
    assert int(np.argmax(oracle)) == k


def test_determinism():
    x = _tone(440.0)
    a = fe.logmel(fe.AudioClip(x, 16000)).values
    b = fe.logmel(fe.AudioClip(x.copy(), 16000)).values
    assert a.tobytes() == b.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.floats(1.01, 20.0), st.integers(0, 2 ** 31 - 1))
def test_amplitude_monotonicity(gain, seed):
    x = np.random.default_rng(seed).normal(size=2048) * 0.01
    lo = fe.logmel(fe.AudioClip(x, 16000)).values
    hi = fe.logmel(fe.AudioClip(x * gain, 16000)).values
    assert np.all(hi >= lo)
    assert hi.shape[0] == 64


def test_crop_or_pad_random_and_centre(rng):
    x = np.arange(10.0)[None]
    np.testing.assert_array_equal(fe.crop_or_pad(x, 4), [[3, 4, 5, 6]])
    starts = {fe.crop_or_pad(x, 4, rng)[0, 0] for _ in range(200)}
    assert starts == set(range(7))
    np.testing.assert_array_equal(fe.crop_or_pad(x, 12)[0, 10:], [0, 0])
