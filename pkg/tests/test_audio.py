import numpy as np
import pytest

from voxvid.audio import (
    FEATURE_RATE,
    HOP_SAMPLES,
    LOG_FLOOR,
    N_MELS,
    SAMPLE_RATE,
    AudioError,
    AudioFeatures,
    AudioProjector,
    LogMelExtractor,
    align_windows,
    load_wav,
    resample_linear,
    save_wav,
)
from voxvid.nn import ParamStore
from voxvid.tensor import Tensor, finite_diff_check


@pytest.fixture(scope="module")
def extractor():
    return LogMelExtractor()


def test_one_second_gives_50_frames(extractor):
    feats = extractor.extract(np.zeros(SAMPLE_RATE))
    assert feats.data.shape == (1, FEATURE_RATE, N_MELS)


def test_frame_count_is_ceil(extractor):
    assert extractor.extract(np.zeros(HOP_SAMPLES * 3)).data.shape[1] == 3
    assert extractor.extract(np.zeros(HOP_SAMPLES * 3 + 1)).data.shape[1] == 4
    assert extractor.extract(np.zeros(1)).data.shape[1] == 1


def test_silence_hits_log_floor(extractor):
    feats = extractor.extract(np.zeros(SAMPLE_RATE))
    np.testing.assert_array_equal(feats.data, np.log(LOG_FLOOR))


def test_tone_bin_stable(extractor):
    t = np.arange(SAMPLE_RATE) / SAMPLE_RATE
    feats = extractor.extract(np.sin(2 * np.pi * 440.0 * t)).data[0]
    # Skip edge frames where the window is partially zero-padded.
    bins = feats[2:-2].argmax(axis=-1)
    assert len(np.unique(bins)) == 1
    # And the hot bin follows the mel mapping of 440 Hz: low region of 80 bins.
    assert 5 <= bins[0] <= 25


def test_wav_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    samples = np.clip(rng.standard_normal(1600) * 0.2, -0.9, 0.9)
    path = tmp_path / "x.wav"
    save_wav(path, samples)
    back, rate = load_wav(path)
    assert rate == SAMPLE_RATE
    # 16-bit truncating quantizer plus the 32767/32768 scale ratio.
    np.testing.assert_allclose(back, samples, atol=2.0 / 32768)


def test_wav_rejects_bad_inputs(tmp_path, extractor):
    with pytest.raises(AudioError):
        extractor.extract(np.zeros(100), sample_rate=44100)
    with pytest.raises(AudioError):
        extractor.extract(np.array([]))
    with pytest.raises(AudioError):
        extractor.extract(np.zeros((2, 100)))


def test_resample_linear_preserves_length_ratio():
    x = np.sin(np.linspace(0, 20, 44100))
    y = resample_linear(x, 44100, 16000)
    assert y.size == 16000
    assert np.array_equal(resample_linear(x, 16000, 16000), x)


def test_align_window_zero_gets_own_frames():
    data = np.arange(20.0).reshape(1, 10, 2)  # 10 feature frames, c=2
    feats = AudioFeatures(data=data)
    out = align_windows(feats, frames=5, window=0)
    # k = 2: video frame f gets exactly feature frames 2f and 2f+1.
    np.testing.assert_array_equal(out[0], data[0, 0:2].ravel())
    np.testing.assert_array_equal(out[3], data[0, 6:8].ravel())


def test_align_window_width():
    data = np.ones((1, 50, 80))
    out = align_windows(AudioFeatures(data=data), frames=10, window=2)
    assert out.shape == (10, (2 * 2 + 1) * 2 * 80)
    assert out.shape[1] == 800


def test_align_edges_zero_padded():
    data = np.ones((1, 50, 4))
    out = align_windows(AudioFeatures(data=data), frames=25, window=2)
    # Frame 0 misses features [-4, 0): exactly 4 of 10 rows are zeros.
    first = out[0].reshape(10, 4)
    assert np.all(first[:4] == 0.0) and np.all(first[4:] == 1.0)
    assert np.all(out[12] == 1.0)


def test_align_rate_mismatch():
    feats = AudioFeatures(data=np.zeros((1, 50, 4)))
    with pytest.raises(AudioError):
        align_windows(feats, frames=2, video_fps=30)


def _projector(layers=1, seed=0):
    store = ParamStore(np.random.default_rng(seed), np.float64)
    proj = AudioProjector(
        store, "p.", feature_dim=12, hidden=8, tokens=3, width=6, layers=layers
    )
    return proj, store


def test_projector_shape_and_zero_input():
    proj, _ = _projector()
    out = proj.forward(Tensor(np.zeros((2, 5, 12))))
    assert out.shape == (2, 5, 3, 6)
    # Zero biases: silence maps to exactly zero tokens.
    np.testing.assert_array_equal(out.data, 0.0)


def test_projector_gradient():
    proj, store = _projector(seed=1)
    for p in store.params.values():
        p.data[...] = np.random.default_rng(2).standard_normal(p.data.shape) * 0.3
    x = Tensor(np.random.default_rng(3).standard_normal(12))

    def f(t):
        out = proj.forward(t.reshape(1, 1, 12))
        return (out * out).sum()

    assert finite_diff_check(f, x) < 1e-4
