"""Synthetic desk-scale corpus, WAV I/O, and batch assembly.

Clean "speech" surrogates are sums of 2-5 harmonically related,
amplitude-modulated tones interrupted by pauses, peak-normalized to 0.5;
their difficulty is controlled entirely by the mixing SNR, which makes
input-adaptive behaviour measurable without a licensed corpus. Noise is a
white/lowpassed mixture with a random spectral tilt. Everything is
deterministic given the seed.

Corpus layout on disk: <dir>/clean/NAME.wav, <dir>/noisy/NAME.wav and a
tab-separated manifest listing every pair with its mixing SNR.
"""

import os
import wave
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .errors import DataError
from .rng import CORPUS, philox

PCM_SCALE = 32767.0


@dataclass
class AudioSignal:
    """Mono waveform plus its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"audio must be mono 1-D, got shape "
                            f"{self.samples.shape}")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def synth_clean(rng, duration, sample_rate=16000):
    """Deterministic clean-signal surrogate: modulated harmonic tones with
    pauses, peak 0.5."""
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(100.0, 280.0)
    n_harm = int(rng.integers(2, 6))
    sig = np.zeros(n)
    for h in range(1, n_harm + 1):
        amp = rng.uniform(0.4, 1.0) / h
        am_rate = rng.uniform(1.5, 6.0)
        am_phase = rng.uniform(0.0, 2 * np.pi)
        am = 0.5 * (1.0 + np.sin(2 * np.pi * am_rate * t + am_phase))
        phase = rng.uniform(0.0, 2 * np.pi)
        sig += amp * am * np.sin(2 * np.pi * f0 * h * t + phase)
    sig *= _voicing_mask(rng, n, sample_rate)
    peak = np.abs(sig).max()
    if peak == 0.0:
        raise DataError("synthesized silence; voicing mask degenerate")
    return sig * (0.5 / peak)


def _voicing_mask(rng, n, sample_rate):
    """Speech-like on/off envelope with raised-cosine 10 ms ramps. The
    first segment is always voiced so the signal is never empty."""
    mask = np.zeros(n)
    ramp_len = max(1, int(0.01 * sample_rate))
    ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp_len) / ramp_len))
    pos = 0
    first = True
    while pos < n:
        seg = int(rng.uniform(0.2, 0.7) * sample_rate)
        gap = 0 if first else int(rng.uniform(0.05, 0.3) * sample_rate)
        start = min(n, pos + (0 if first else gap))
        stop = min(n, start + seg)
        if stop > start:
            mask[start:stop] = 1.0
            up = min(ramp_len, stop - start)
            mask[start:start + up] = ramp[:up]
            down = min(ramp_len, stop - start)
            mask[stop - down:stop] = np.minimum(
                mask[stop - down:stop], ramp[::-1][:down])
        pos = stop
        first = False
    return mask


def synth_noise(rng, duration, sample_rate=16000):
    """Broadband noise with a random spectral tilt, unit RMS."""
    n = int(round(duration * sample_rate))
    white = rng.standard_normal(n)
    alpha = rng.uniform(0.2, 0.9)
    tilted = lfilter([1.0 - alpha], [1.0, -alpha], white)
    mix = rng.uniform(0.3, 1.0)
    out = mix * white + (1.0 - mix) * tilted / max(1e-12, tilted.std())
    return out / out.std()


def mix_at_snr(clean, noise, snr_db):
    """clean + g * noise with g chosen so the mix hits snr_db exactly."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise DataError(f"mix_at_snr: length mismatch {clean.shape} vs "
                        f"{noise.shape}")
    e_s = float(np.dot(clean, clean))
    e_n = float(np.dot(noise, noise))
    if e_s == 0.0 or e_n == 0.0:
        raise DataError("mix_at_snr: zero-energy input")
    gain = np.sqrt(e_s / (e_n * 10.0 ** (snr_db / 10.0)))
    return clean + gain * noise


def save_wav(path, signal: AudioSignal):
    """16-bit PCM mono writer."""
    samples = np.clip(signal.samples, -1.0, 1.0)
    pcm = np.round(samples * PCM_SCALE).astype("<i2")
    with wave.open(path, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(signal.sample_rate)
        fh.writeframes(pcm.tobytes())


def load_wav(path):
    """16-bit PCM mono reader; refuses anything else."""
    try:
        with wave.open(path, "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            frames = fh.getnframes()
            raw = fh.readframes(frames)
    except (wave.Error, EOFError) as exc:
        raise DataError(f"unreadable WAV file {path}: {exc}") from exc
    if channels != 1:
        raise DataError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise DataError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if frames == 0:
        raise DataError(f"{path}: empty file")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    return AudioSignal(samples, rate)


@dataclass
class CorpusEntry:
    name: str
    snr_db: float


class Corpus:
    """Paired clean/noisy directory with a manifest."""

    def __init__(self, root, entries, sample_rate):
        self.root = root
        self.entries = entries
        self.sample_rate = sample_rate

    def __len__(self):
        return len(self.entries)

    def path(self, kind, name):
        return os.path.join(self.root, kind, f"{name}.wav")

    def load_pair(self, entry):
        noisy = load_wav(self.path("noisy", entry.name))
        clean = load_wav(self.path("clean", entry.name))
        for sig in (noisy, clean):
            if sig.sample_rate != self.sample_rate:
                raise DataError(
                    f"{entry.name}: sample rate {sig.sample_rate} != "
                    f"manifest rate {self.sample_rate}; no silent "
                    f"resampling")
        if len(noisy.samples) != len(clean.samples):
            raise DataError(f"{entry.name}: clean/noisy length mismatch")
        return noisy.samples, clean.samples

    @classmethod
    def load(cls, root):
        manifest = os.path.join(root, "manifest.tsv")
        if not os.path.isfile(manifest):
            raise DataError(f"no manifest at {manifest}")
        entries = []
        sample_rate = None
        with open(manifest) as fh:
            header = fh.readline().strip().split("\t")
            if header[:3] != ["name", "snr_db", "sample_rate"]:
                raise DataError(f"{manifest}: unexpected header {header}")
            for line in fh:
                if not line.strip():
                    continue
                name, snr, rate = line.strip().split("\t")
                entries.append(CorpusEntry(name, float(snr)))
                rate = int(rate)
                if sample_rate is None:
                    sample_rate = rate
                elif rate != sample_rate:
                    raise DataError(f"{manifest}: mixed sample rates")
        if not entries:
            raise DataError(f"{manifest}: empty corpus")
        return cls(root, entries, sample_rate)


def synth_corpus(out_dir, n_utterances, spec, seed):
    """Generate a paired corpus on disk; returns the Corpus."""
    if n_utterances < 1:
        raise DataError("need at least one utterance")
    os.makedirs(os.path.join(out_dir, "clean"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "noisy"), exist_ok=True)
    entries = []
    with open(os.path.join(out_dir, "manifest.tsv"), "w") as fh:
        fh.write("name\tsnr_db\tsample_rate\n")
        for i in range(n_utterances):
            rng = philox(seed, CORPUS, i)
            name = f"u{i:05d}"
            clean = synth_clean(rng, spec.utterance_seconds,
                                spec.sample_rate)
            noise = synth_noise(rng, spec.utterance_seconds,
                                spec.sample_rate)
            snr = rng.uniform(spec.snr_low_db, spec.snr_high_db)
            noisy = mix_at_snr(clean, noise, snr)
            save_wav(os.path.join(out_dir, "clean", f"{name}.wav"),
                     AudioSignal(clean, spec.sample_rate))
            save_wav(os.path.join(out_dir, "noisy", f"{name}.wav"),
                     AudioSignal(noisy, spec.sample_rate))
            fh.write(f"{name}\t{snr:.4f}\t{spec.sample_rate}\n")
            entries.append(CorpusEntry(name, snr))
    return Corpus(out_dir, entries, spec.sample_rate)


def split_corpus(corpus, val_fraction, seed):
    """Deterministic train/validation split by shuffled index."""
    order = philox(seed, CORPUS, 0xFFFF).permutation(len(corpus))
    n_val = max(1, int(round(len(corpus) * val_fraction)))
    if n_val >= len(corpus):
        raise DataError("validation split swallows the whole corpus")
    val_idx = set(order[:n_val].tolist())
    train = [e for i, e in enumerate(corpus.entries) if i not in val_idx]
    val = [e for i, e in enumerate(corpus.entries) if i in val_idx]
    return train, val


def batch_segments(corpus, entries, spec, rng, batch_size, pad_to):
    """One epoch of augmented fixed-size batches.

    Random crop to segment_seconds, circular shift up to 0.5 s and a
    +-6 dB gain applied coherently to noisy and clean, then right
    zero-padding via pad_to (the model's valid_length). Partial trailing
    batches are dropped so every batch has identical shape.
    """
    seg_len = int(round(spec.segment_seconds * spec.sample_rate))
    order = rng.permutation(len(entries))
    max_shift = int(0.5 * spec.sample_rate)
    batch_x, batch_s = [], []
    for idx in order:
        noisy, clean = corpus.load_pair(entries[idx])
        if len(noisy) < seg_len:
            raise DataError(f"utterance {entries[idx].name} shorter than "
                            f"segment ({len(noisy)} < {seg_len})")
        start = int(rng.integers(0, len(noisy) - seg_len + 1))
        x = noisy[start:start + seg_len]
        s = clean[start:start + seg_len]
        shift = int(rng.integers(-max_shift, max_shift + 1))
        x = np.roll(x, shift)
        s = np.roll(s, shift)
        gain = 10.0 ** (rng.uniform(-6.0, 6.0) / 20.0)
        x = x * gain
        s = s * gain
        target = pad_to(seg_len)
        x = np.pad(x, (0, target - seg_len))
        s = np.pad(s, (0, target - seg_len))
        batch_x.append(x)
        batch_s.append(s)
        if len(batch_x) == batch_size:
            yield np.stack(batch_x), np.stack(batch_s)
            batch_x, batch_s = [], []
