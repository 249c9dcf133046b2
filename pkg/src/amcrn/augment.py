"""Synthetic data augmentation: additive interferers and reverberation.

The additive kinds mix a synthetic interferer (colored noise, a tone
mixture, or band-limited noise bursts) into the input at a requested SNR.
Reverb convolves with a synthetic exponentially decaying impulse response.
A file-based interferer hook accepts real noise recordings when available.
"""

import numpy as np
from scipy import signal as sp_signal

from .audio import AudioBuffer
from .errors import ConfigError

ADDITIVE_KINDS = ("noise", "music-like", "babble-like")
KINDS = ADDITIVE_KINDS + ("reverb",)


def _colored_noise(rng, n, sample_rate):
    """Gaussian noise shaped by a random one-pole lowpass."""
    white = rng.standard_normal(n)
    pole = rng.uniform(0.2, 0.9)
    return sp_signal.lfilter([1.0 - pole], [1.0, -pole], white)


def _tone_mixture(rng, n, sample_rate):
    """Sum of a few slowly amplitude-modulated sinusoids."""
    t = np.arange(n) / sample_rate
    out = np.zeros(n)
    for _ in range(rng.integers(3, 6)):
        freq = rng.uniform(100.0, 2000.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        mod_rate = rng.uniform(0.5, 4.0)
        env = 0.5 * (1.0 + np.sin(2.0 * np.pi * mod_rate * t + rng.uniform(0, 2 * np.pi)))
        out += env * np.sin(2.0 * np.pi * freq * t + phase)
    return out


def _babble(rng, n, sample_rate):
    """Sum of band-limited noise bursts with random on/off envelopes."""
    out = np.zeros(n)
    for _ in range(6):
        low = rng.uniform(100.0, 1500.0)
        high = low + rng.uniform(200.0, 2000.0)
        high = min(high, 0.45 * sample_rate)
        sos = sp_signal.butter(2, [low, high], btype="band", fs=sample_rate, output="sos")
        band = sp_signal.sosfilt(sos, rng.standard_normal(n))
        # Random bursts: smooth on/off gate.
        gate = rng.random(max(1, n // (sample_rate // 4) + 1)) > 0.4
        env = np.repeat(gate.astype(float), sample_rate // 4)[:n]
        if len(env) < n:
            env = np.pad(env, (0, n - len(env)), constant_values=env[-1] if len(env) else 1.0)
        out += band * env
    return out


_GENERATORS = {
    "noise": _colored_noise,
    "music-like": _tone_mixture,
    "babble-like": _babble,
}


def _mix_at_snr(clean, interferer, snr_db):
    p_clean = float(np.mean(clean**2))
    p_noise = float(np.mean(interferer**2))
    if p_noise <= 0.0 or p_clean <= 0.0:
        return clean.copy()
    scale = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + scale * interferer


def augment(audio: AudioBuffer, kind: str, snr_db: float, seed: int,
            interferer: AudioBuffer = None) -> AudioBuffer:
    """Return a corrupted copy of the audio; deterministic given seed.

    `snr_db = inf` is a no-op for the additive kinds. An explicit
    `interferer` buffer (looped/truncated to length) overrides the
    synthetic interferer for the additive kinds.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown augmentation kind: {kind!r}")
    rng = np.random.default_rng(seed)
    x = audio.samples
    if kind == "reverb":
        ir_len = min(len(x), int(0.25 * audio.sample_rate))
        decay = rng.uniform(0.02, 0.08)  # seconds to 1/e
        t = np.arange(ir_len) / audio.sample_rate
        ir = rng.standard_normal(ir_len) * np.exp(-t / decay)
        ir[0] = 1.0
        ir /= np.sqrt(np.sum(ir**2))
        wet = sp_signal.fftconvolve(x, ir)[: len(x)]
        out = wet
    else:
        if not np.isfinite(snr_db):
            return AudioBuffer(x.copy(), audio.sample_rate)
        if interferer is not None:
            reps = int(np.ceil(len(x) / max(1, len(interferer.samples))))
            noise = np.tile(interferer.samples, reps)[: len(x)]
        else:
            noise = _GENERATORS[kind](rng, len(x), audio.sample_rate)
        out = _mix_at_snr(x, noise, snr_db)
    return AudioBuffer(np.clip(out, -1.0, 1.0), audio.sample_rate)
