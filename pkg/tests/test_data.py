from collections import Counter

import numpy as np
import pytest

from taskmerge import data as sd


def test_generate_deterministic():
    a = list(sd.generate("S", "train", 8, 7))
    b = list(sd.generate("S", "train", 8, 7))
    assert all(x.signal.tobytes() == y.signal.tobytes() and x.labels == y.labels for x, y in zip(a, b))


def test_splits_and_seeds_differ():
    base = sd.make_example("M", "train", 3, 0).signal
    assert base.tobytes() != sd.make_example("M", "dev", 3, 0).signal.tobytes()
    assert base.tobytes() != sd.make_example("M", "train", 3, 1).signal.tobytes()


def test_examples_are_pure_functions_of_index():
    stream = list(sd.generate("M", "test", 10, 4))
    assert stream[7].signal.tobytes() == sd.make_example("M", "test", 7, 4).signal.tobytes()
    tail = list(sd.generate("M", "test", 3, 4, start=7))
    assert tail[0].signal.tobytes() == stream[7].signal.tobytes()


def test_pitch_balance_1200():
    counts = Counter(sd.label_for("M", "train", i, 0, "pitch_class") for i in range(1200))
    assert len(counts) == 12
    assert all(99 <= c <= 101 for c in counts.values())


@pytest.mark.parametrize("domain", ["S", "M"])
def test_every_prefix_balanced_within_one(domain):
    for task, k in sd.TASKS[domain].items():
        counts = np.zeros(k, int)
        for i in range(3 * k + 5):
            counts[sd.label_for(domain, "train", i, 2, task)] += 1
            assert counts.max() - counts.min() <= 1


@pytest.mark.parametrize("domain", ["S", "M", "A"])
def test_signal_contract(domain):
    for ex in sd.generate(domain, "train", 20, 0):
        assert ex.signal.shape == (sd.N_SAMPLES,) and ex.signal.dtype == np.float32
        assert np.abs(ex.signal).max() <= 1.0
        assert set(ex.labels) == set(sd.TASKS[domain])
        assert ex.domain == domain


def _spectrum_peaks(signal, n_peaks):
    mag = np.abs(np.fft.rfft(signal.astype(np.float64) * np.hanning(len(signal))))
    freqs = np.fft.rfftfreq(len(signal))
    local = [i for i in range(2, len(mag) - 1) if mag[i] >= mag[i - 1] and mag[i] >= mag[i + 1]]
    top = sorted(local, key=lambda i: -mag[i])[:n_peaks]
    return sorted(freqs[top])


def test_music_spectrum_has_three_harmonics():
    resolution = 1.0 / sd.N_SAMPLES
    for i in range(36):
        ex = sd.make_example("M", "train", i, 0)
        f0 = sd.FUNDAMENTALS[ex.labels["pitch_class"]]
        peaks = _spectrum_peaks(ex.signal, 3)
        # ±2% pitch jitter plus one DFT bin
        for h, p in zip((1, 2, 3), peaks):
            assert abs(p - h * f0) <= 0.02 * h * f0 + 1.5 * resolution, (i, h, p, h * f0)


def test_speech_segments_follow_family():
    seg = sd.N_SAMPLES // sd.N_SEGMENTS
    for i in range(10):
        ex = sd.make_example("S", "train", i, 0)
        family = sd.FAMILIES[ex.labels["seq_class"]]
        for j, sym in enumerate(family):
            (peak,) = _spectrum_peaks(ex.signal[j * seg : (j + 1) * seg], 1)
            f = sd.SYMBOL_FREQS[sym]
            assert abs(peak - f) <= 0.01 * f + 1.5 / seg


def test_noise_level():
    ex = sd.make_example("A", "train", 0, 0)
    x = ex.signal.astype(np.float64)
    # white noise bursts on top of sigma=0.05 background; the quietest stretch is background only
    quiet = min(np.std(x[i : i + 100]) for i in range(0, len(x) - 100, 50))
    assert 0.03 < quiet < 0.07


def test_mixture_single_domain_is_generate():
    a = list(sd.mixture([("S", 1.0)], 12, 3))
    b = list(sd.generate("S", "train", 12, 3))
    assert all(x.signal.tobytes() == y.signal.tobytes() for x, y in zip(a, b))


def test_mixture_counts():
    counts = Counter(sd.mixture_domains([("S", 0.5), ("M", 0.5)], 1000))
    assert abs(counts["S"] - 500) <= 1 and abs(counts["M"] - 500) <= 1
    counts = Counter(sd.mixture_domains([("M", 0.4), ("S", 0.4), ("A", 0.2)], 1000))
    assert (counts["M"], counts["S"], counts["A"]) == (400, 400, 200)


def test_mixture_streams_keep_own_indices():
    mixed = list(sd.mixture([("S", 0.5), ("M", 0.5)], 6, 0))
    s = [e for e in mixed if e.domain == "S"]
    assert s[1].signal.tobytes() == sd.make_example("S", "train", 1, 0).signal.tobytes()


def test_mixture_offset_window():
    full = list(sd.mixture([("S", 0.5), ("M", 0.3), ("A", 0.2)], 20, 1))
    window = list(sd.mixture([("S", 0.5), ("M", 0.3), ("A", 0.2)], 5, 1, start=15))
    assert [e.signal.tobytes() for e in full[15:]] == [e.signal.tobytes() for e in window]


@pytest.mark.parametrize(
    "specs",
    [[], [("S", 0.5)], [("S", 0.5), ("M", -0.5)], [("Q", 1.0)], [("S", 0.7), ("M", 0.7)]],
)
def test_mixture_rejects_bad_specs(specs):
    with pytest.raises(sd.DataError):
        list(sd.mixture(specs, 4, 0))


def test_parse_mixture():
    assert sd.parse_mixture("S") == [("S", 1.0)]
    assert sd.parse_mixture("M:0.5, S:0.5") == [("M", 0.5), ("S", 0.5)]
    with pytest.raises(sd.DataError):
        sd.parse_mixture("S:0.2,M:0.2")


def test_generate_rejects_bad_arguments():
    with pytest.raises(sd.DataError):
        list(sd.generate("S", "train", 0, 0))
    with pytest.raises(sd.DataError):
        list(sd.generate("X", "train", 1, 0))
    with pytest.raises(sd.DataError):
        list(sd.generate("S", "validation", 1, 0))


def test_dataset_container_roundtrip(tmp_path):
    examples = list(sd.mixture([("S", 0.5), ("M", 0.5)], 6, 2))
    sd.export_dataset(tmp_path / "d.safetensors", examples, {"seed": 2})
    back, meta = sd.import_dataset(tmp_path / "d.safetensors")
    assert meta["seed"] == "2"
    for a, b in zip(examples, back):
        assert a.domain == b.domain and a.labels == b.labels
        assert a.signal.tobytes() == b.signal.tobytes()
