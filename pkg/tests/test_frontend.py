import numpy as np
import pytest

from speechbridge.frontend import (FrontendError, MelSpectrogram, PROMPT_FRAMES,
                                   extract_pitch, invert_mel, load_mel,
                                   mel_filterbank, mel_spectrogram,
                                   random_prompt_clip, save_mel)


def _sine(freq, seconds=1.0, rate=24000, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


# ---------------------------------------------------------------------------
# mel analysis
# ---------------------------------------------------------------------------

def test_frame_count_is_ceil_len_over_hop():
    assert mel_spectrogram(np.zeros(24000)).n_frames == 100
    assert mel_spectrogram(np.zeros(1920)).n_frames == 8
    assert mel_spectrogram(np.zeros(1921)).n_frames == 9
    assert mel_spectrogram(np.zeros(239)).n_frames == 1


def test_silence_maps_to_log_floor_everywhere():
    mel = mel_spectrogram(np.zeros(4800))
    assert np.allclose(mel.frames, mel.log_floor)


def test_mel_is_pure_bitwise():
    wav = _sine(440.0)
    a = mel_spectrogram(wav)
    b = mel_spectrogram(wav.copy())
    assert a.frames.tobytes() == b.frames.tobytes()


def test_energy_monotonicity_under_gain():
    wav = _sine(300.0, seconds=0.5)
    base = mel_spectrogram(wav)
    louder = mel_spectrogram(2.0 * wav)
    above_floor = base.frames > base.log_floor + 1e-6
    assert above_floor.any()
    assert np.all(louder.frames[above_floor] > base.frames[above_floor])


def test_mel_has_40_bands_and_finite_values():
    mel = mel_spectrogram(_sine(1000.0, seconds=0.2))
    assert mel.frames.shape[1] == 40
    assert np.all(np.isfinite(mel.frames))


def test_mel_rejects_bad_inputs():
    with pytest.raises(FrontendError):
        mel_spectrogram(np.zeros(0))
    with pytest.raises(FrontendError):
        mel_spectrogram(np.zeros(100), sample_rate=16000)
    with pytest.raises(FrontendError):
        MelSpectrogram(frames=np.zeros((5, 30)))


def test_filterbank_rows_are_unit_sum():
    bank = mel_filterbank()
    assert bank.shape == (40, 481)
    np.testing.assert_allclose(bank.sum(axis=1), np.ones(40), atol=1e-9)


def test_tone_peaks_in_the_right_band():
    # energy of a 3 kHz tone should concentrate near the band whose center
    # matches 3 kHz, nowhere near the lowest bands
    mel = mel_spectrogram(_sine(3000.0))
    profile = mel.frames.mean(axis=0)
    assert 15 < int(np.argmax(profile)) < 35


# ---------------------------------------------------------------------------
# pitch
# ---------------------------------------------------------------------------

def test_pitch_recovers_pure_tone_within_3hz():
    contour = extract_pitch(_sine(200.0))
    interior = contour.f0[5:-5]
    assert np.all(np.abs(interior - 200.0) <= 3.0)


def test_pitch_white_noise_mostly_unvoiced():
    rng = np.random.default_rng(12)
    contour = extract_pitch(0.3 * rng.standard_normal(24000))
    assert np.mean(contour.f0 == 0) >= 0.9


def test_pitch_silence_all_zero():
    contour = extract_pitch(np.zeros(12000))
    assert np.all(contour.f0 == 0)


def test_pitch_rejects_empty():
    with pytest.raises(FrontendError):
        extract_pitch(np.zeros(0))


def test_pitch_frame_count_matches_mel():
    wav = _sine(150.0, seconds=0.33)
    assert len(extract_pitch(wav).f0) == mel_spectrogram(wav).n_frames


# ---------------------------------------------------------------------------
# prompt clips
# ---------------------------------------------------------------------------

def _mel_of_frames(n):
    rng = np.random.default_rng(n)
    frames = rng.uniform(-11.5, 0.0, size=(n, 40)).astype(np.float32)
    return MelSpectrogram(frames=frames)


def test_clip_long_source_window_bounds_and_determinism():
    mel = _mel_of_frames(1000)
    starts = set()
    for seed in range(40):
        clip = random_prompt_clip(mel, seed)
        assert clip.frames.shape == (PROMPT_FRAMES, 40)
        assert clip.n_valid == PROMPT_FRAMES
        assert 0 <= clip.start <= 700
        starts.add(clip.start)
        again = random_prompt_clip(mel, seed)
        assert again.start == clip.start
    assert len(starts) > 1  # actually random over seeds


def test_clip_is_verbatim_submatrix():
    mel = _mel_of_frames(512)
    clip = random_prompt_clip(mel, seed=3)
    np.testing.assert_array_equal(
        clip.frames, mel.frames[clip.start:clip.start + PROMPT_FRAMES])


def test_clip_exact_length_source():
    mel = _mel_of_frames(PROMPT_FRAMES)
    clip = random_prompt_clip(mel, seed=0)
    assert clip.start == 0 and clip.n_valid == PROMPT_FRAMES
    np.testing.assert_array_equal(clip.frames, mel.frames)


def test_clip_short_source_padded_with_log_floor():
    mel = _mel_of_frames(100)
    clip = random_prompt_clip(mel, seed=9)
    assert clip.n_valid == 100 and clip.start == 0
    np.testing.assert_array_equal(clip.frames[:100], mel.frames)
    assert np.allclose(clip.frames[100:], mel.log_floor)


# ---------------------------------------------------------------------------
# containers and inversion
# ---------------------------------------------------------------------------

def test_mel_container_round_trip(tmp_path):
    mel = _mel_of_frames(37)
    path = tmp_path / "x.mel"
    save_mel(mel, path)
    loaded = load_mel(path)
    np.testing.assert_array_equal(loaded.frames, mel.frames)
    assert (loaded.hop, loaded.sample_rate) == (mel.hop, mel.sample_rate)
    assert loaded.floor == pytest.approx(mel.floor)


def test_mel_container_rejects_garbage(tmp_path):
    path = tmp_path / "bad.mel"
    path.write_bytes(b"not a mel container at all")
    with pytest.raises(FrontendError):
        load_mel(path)


def test_invert_mel_keeps_pitch_recognizable():
    wav = _sine(220.0, seconds=0.8)
    mel = mel_spectrogram(wav)
    rebuilt = invert_mel(mel, n_iter=16)
    assert len(rebuilt) == mel.n_frames * mel.hop
    contour = extract_pitch(rebuilt)
    voiced = contour.f0[contour.f0 > 0]
    assert len(voiced) > 10
    assert abs(np.median(voiced) - 220.0) < 10.0
