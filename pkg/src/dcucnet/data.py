"""Synthetic audio-visual scenes: harmonic toy speech, a mouth-like video
whose aperture follows the speech envelope, and SNR-controlled mixtures."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import dump_kv, read_kv
from .dsp.stft import Waveform
from .dsp.wavio import read_wav, write_wav
from .errors import FormatError, InvalidInput
from .visual import VideoFrames, read_dvid, write_dvid

NOISE_KINDS = ("white", "pink", "speech")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class CorpusSpec:
    num_scenes: int = 64
    duration_s: float = 2.0
    snr_lo_db: float = 0.0
    snr_hi_db: float = 10.0
    sample_rate: int = 16000
    fps: float = 25.0
    frame_size: tuple[int, ...] = (32, 32)
    seed: int = 0

    def __post_init__(self):
        if self.num_scenes < 1:
            raise InvalidInput("num_scenes must be >= 1")
        if not self.duration_s > 0:
            raise InvalidInput("duration_s must be positive")
        if self.snr_lo_db > self.snr_hi_db:
            raise InvalidInput(f"snr range is empty: lo {self.snr_lo_db} > hi {self.snr_hi_db}")


@dataclass
class ToyScene:
    clean: Waveform
    noise: Waveform  # already scaled: noisy == clean + noise
    noisy: Waveform
    video: VideoFrames
    snr_db: float
    seed: int
    meta: dict = field(default_factory=dict)


def _envelope(rng, n, sample_rate):
    """Syllable-like envelope: raised-cosine bursts separated by silent gaps."""
    env = np.zeros(n)
    t = int(rng.uniform(0.0, 0.15) * sample_rate)
    while t < n:
        length = int(rng.uniform(0.12, 0.4) * sample_rate)
        level = rng.uniform(0.5, 1.0)
        stop = min(t + length, n)
        phase = np.arange(stop - t) / max(length - 1, 1)
        env[t:stop] = level * np.sin(np.pi * phase) ** 0.5
        t = stop + int(rng.uniform(0.06, 0.3) * sample_rate)
    return env


def synth_clean(seed: int, duration: float = 2.0, sample_rate: int = 16000):
    """Harmonic toy speech; returns (waveform peaked at 0.5, per-sample envelope)."""
    if duration < 0.5:
        raise InvalidInput(f"duration must be at least 0.5 s, got {duration}")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(100.0, 300.0)
    # slow pitch glide keeps harmonics narrow but not stationary
    glide = 1.0 + 0.05 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * t + rng.uniform(0, 2 * np.pi))
    phase0 = 2 * np.pi * np.cumsum(f0 * glide) / sample_rate
    carrier = np.zeros(n)
    for h in range(1, int(rng.integers(3, 6)) + 1):
        carrier += rng.uniform(0.4, 1.0) / h * np.sin(h * phase0 + rng.uniform(0, 2 * np.pi))
    env = _envelope(rng, n, sample_rate)
    x = env * carrier
    peak = np.max(np.abs(x))
    if peak == 0.0:
        # every draw has at least one burst, but guard the division anyway
        raise InvalidInput("degenerate envelope")
    # dividing first makes the peak sample exactly +-1 before halving
    return Waveform((x / peak) * 0.5, sample_rate), env


def synth_video(envelope, fps: float = 25.0, frame_size=(32, 32), seed: int = 0,
                sample_rate: int = 16000) -> VideoFrames:
    """Dark ellipse on a light background; vertical aperture tracks the envelope."""
    envelope = np.asarray(envelope, dtype=np.float64)
    h, w = frame_size
    rng = np.random.default_rng(seed)
    texture = rng.integers(-8, 9, size=(h, w))
    num = max(1, int(round(len(envelope) / sample_rate * fps)))
    mid = np.minimum(((np.arange(num) + 0.5) * sample_rate / fps).astype(int), len(envelope) - 1)
    peak = envelope.max() if envelope.size and envelope.max() > 0 else 1.0
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    half_width = 0.35 * w
    frames = np.empty((num, h, w), dtype=np.uint8)
    for k, idx in enumerate(mid):
        half_height = 0.5 + (0.4 * h - 0.5) * envelope[idx] / peak
        inside = ((yy - cy) / half_height) ** 2 + ((xx - cx) / half_width) ** 2 <= 1.0
        img = np.where(inside, 40, 210) + texture
        frames[k] = np.clip(img, 0, 255).astype(np.uint8)
    return VideoFrames(frames, fps)


def power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def mix_components(clean: Waveform, noise: Waveform, snr_db: float):
    """Returns (clean, scaled noise, noisy, meta) with noisy = clean + scaled noise.

    When the mixture would clip, all three signals are rescaled jointly; the
    factor is recorded as ``meta["rescale"]``.
    """
    if len(clean) != len(noise):
        raise InvalidInput(f"length mismatch: clean {len(clean)} vs noise {len(noise)}")
    p_clean = power(clean.samples)
    if p_clean == 0.0:
        raise InvalidInput("clean signal has zero power")
    if math.isinf(snr_db) and snr_db > 0:
        gain = 0.0
    else:
        p_noise = power(noise.samples)
        if p_noise == 0.0:
            raise InvalidInput("noise signal has zero power")
        gain = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    s = clean.samples
    n = gain * noise.samples
    mix = s + n
    peak = float(np.max(np.abs(mix)))
    rescale = 1.0
    if peak > 1.0:
        rescale = 0.99 / peak
        s, n = s * rescale, n * rescale
        mix = s + n
    meta = {"snr_db": snr_db, "noise_gain": gain, "rescale": rescale}
    sr = clean.sample_rate
    return Waveform(s, sr), Waveform(n, sr), Waveform(mix, sr), meta


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    return mix_components(clean, noise, snr_db)[2]


def pink_noise(rng, n):
    spectrum = rng.normal(size=n // 2 + 1) + 1j * rng.normal(size=n // 2 + 1)
    f = np.arange(n // 2 + 1, dtype=np.float64)
    f[0] = 1.0
    spectrum /= np.sqrt(f)
    spectrum[0] = 0.0
    x = np.fft.irfft(spectrum, n)
    return x / np.std(x)


def scene_seed(corpus_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, index]).generate_state(1, np.uint64)[0] >> 1)


def noise_kind(index: int) -> str:
    return NOISE_KINDS[index % len(NOISE_KINDS)]


def make_scene(spec: CorpusSpec, index: int) -> ToyScene:
    seed = scene_seed(spec.seed, index)
    rng = np.random.default_rng(seed)
    clean_seed, noise_seed, video_seed = (int(s) for s in rng.integers(0, 2**31, 3))
    snr = float(rng.uniform(spec.snr_lo_db, spec.snr_hi_db))
    clean, env = synth_clean(clean_seed, spec.duration_s, spec.sample_rate)
    kind = noise_kind(index)
    n = len(clean)
    if kind == "white":
        noise = np.random.default_rng(noise_seed).normal(size=n)
    elif kind == "pink":
        noise = pink_noise(np.random.default_rng(noise_seed), n)
    else:
        noise = synth_clean(noise_seed, spec.duration_s, spec.sample_rate)[0].samples
    clean, noise, noisy, meta = mix_components(clean, Waveform(noise, spec.sample_rate), snr)
    video = synth_video(env, spec.fps, spec.frame_size, video_seed, spec.sample_rate)
    meta.update(index=index, seed=seed, noise_kind=kind)
    return ToyScene(clean, noise, noisy, video, snr, seed, meta)


def check_scene(scene: ToyScene, tol: float = 1e-6) -> None:
    """Raise InvalidInput if any scene invariant is violated."""
    n = len(scene.clean)
    if not len(scene.noise) == len(scene.noisy) == n:
        raise InvalidInput("clean/noise/noisy lengths differ")
    if np.max(np.abs(scene.noisy.samples - scene.clean.samples - scene.noise.samples)) > tol:
        raise InvalidInput("noisy != clean + noise")
    if scene.meta.get("noise_gain", 1.0) > 0:
        measured = 10 * math.log10(power(scene.clean.samples) / power(scene.noise.samples))
        if abs(measured - scene.snr_db) > 1e-6:
            raise InvalidInput(f"measured SNR {measured} differs from recorded {scene.snr_db}")
    if abs(scene.video.duration - scene.clean.duration) > 1.0 / scene.video.fps + 1e-9:
        raise InvalidInput("video and audio durations differ by more than one frame")
    if np.max(np.abs(scene.noisy.samples)) > 1.0:
        raise InvalidInput("mixture exceeds full scale")


def split_indices(num_scenes: int) -> dict[str, list[int]]:
    """80/10/10 split by scene index."""
    n_train = int(num_scenes * 0.8)
    n_val = int(num_scenes * 0.1)
    idx = list(range(num_scenes))
    return {
        "train": idx[:n_train],
        "val": idx[n_train : n_train + n_val],
        "test": idx[n_train + n_val :],
    }


def scene_checksum(scene: ToyScene) -> str:
    h = hashlib.sha256()
    for arr in (scene.clean.samples, scene.noise.samples, scene.noisy.samples, scene.video.frames):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class Corpus:
    """Scene collection; generated lazily from a CorpusSpec or read from a directory."""

    def __init__(self, spec: CorpusSpec, root: Path | None = None):
        self.spec = spec
        self.root = Path(root) if root is not None else None
        self.splits = split_indices(spec.num_scenes)
        self._cache: dict[int, ToyScene] = {}

    def __len__(self):
        return self.spec.num_scenes

    def scene(self, index: int) -> ToyScene:
        if not 0 <= index < self.spec.num_scenes:
            raise IndexError(index)
        if index not in self._cache:
            if self.root is not None:
                self._cache[index] = _read_scene(self.root / "scenes" / str(index))
            else:
                self._cache[index] = make_scene(self.spec, index)
        return self._cache[index]

    def split(self, name: str) -> list[ToyScene]:
        if name not in self.splits:
            raise InvalidInput(f"unknown split {name!r}; choose from {', '.join(SPLITS)}")
        return [self.scene(i) for i in self.splits[name]]

    def checksums(self) -> list[str]:
        return [scene_checksum(self.scene(i)) for i in range(len(self))]

    def write(self, root) -> Path:
        root = Path(root)
        (root / "scenes").mkdir(parents=True, exist_ok=True)
        (root / "corpus.txt").write_text(dump_kv(_spec_dict(self.spec)), encoding="utf-8")
        for i in range(len(self)):
            s = self.scene(i)
            d = root / "scenes" / str(i)
            d.mkdir(exist_ok=True)
            write_wav(d / "clean.wav", s.clean)
            write_wav(d / "noise.wav", s.noise)
            write_wav(d / "noisy.wav", s.noisy)
            write_dvid(d / "video.dvid", s.video)
            (d / "meta.txt").write_text(dump_kv(s.meta), encoding="utf-8")
        return root


def _spec_dict(spec: CorpusSpec) -> dict:
    from dataclasses import asdict

    return asdict(spec)


def build_corpus(spec: CorpusSpec, out_dir=None) -> Corpus:
    corpus = Corpus(spec)
    if out_dir is not None:
        corpus.write(out_dir)
    return corpus


def load_corpus(root) -> Corpus:
    from .config import build

    root = Path(root)
    spec_file = root / "corpus.txt"
    if not spec_file.is_file():
        raise FileNotFoundError(f"{spec_file}: corpus description not found")
    spec = build(CorpusSpec, read_kv(spec_file))
    return Corpus(spec, root)


def _read_scene(d: Path) -> ToyScene:
    try:
        meta_raw = read_kv(d / "meta.txt")
        clean = read_wav(d / "clean.wav")
        noise = read_wav(d / "noise.wav")
        noisy = read_wav(d / "noisy.wav")
        video = read_dvid(d / "video.dvid")
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{d}: incomplete scene ({exc.filename} missing)") from exc
    meta = {k: _parse_meta(v) for k, v in meta_raw.items()}
    return ToyScene(clean, noise, noisy, video, float(meta.get("snr_db", "nan")),
                    int(meta.get("seed", 0)), meta)


def _parse_meta(v: str):
    try:
        return json.loads(v)
    except ValueError:
        return v
