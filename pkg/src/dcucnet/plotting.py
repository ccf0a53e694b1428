"""Figure rendering for the CLI report paths (PNG files, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dsp.stft import StftConfig, Waveform, conv_stft  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.titlesize": 9,
    "figure.dpi": 110,
    "savefig.bbox": "tight",
})


def _log_mag(x: Waveform, cfg: StftConfig):
    s = conv_stft(x, cfg).data
    return 20.0 * np.log10(np.abs(s) + 1e-6)


def plot_spectrograms(panels: dict[str, Waveform], path, cfg: StftConfig = StftConfig()):
    """One log-magnitude panel per waveform, shared colour scale, frequency on the y axis."""
    mags = {k: _log_mag(v, cfg) for k, v in panels.items()}
    vmax = max(m.max() for m in mags.values())
    fig, axes = plt.subplots(1, len(mags), figsize=(3.2 * len(mags), 2.6), sharey=True)
    axes = np.atleast_1d(axes)
    for ax, (title, m) in zip(axes, mags.items()):
        dur = m.shape[1] * cfg.hop_length / cfg.sample_rate
        im = ax.imshow(m, origin="lower", aspect="auto", vmin=vmax - 80, vmax=vmax, cmap="magma",
                       extent=(0, dur, 0, cfg.sample_rate / 2000))
        ax.set_title(title)
        ax.set_xlabel("time [s]")
    axes[0].set_ylabel("frequency [kHz]")
    fig.colorbar(im, ax=axes.tolist(), label="dB", shrink=0.9)
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_history(history, path):
    steps = [h["step"] for h in history]
    loss = [h["loss"] for h in history]
    fig, ax = plt.subplots(figsize=(4.5, 2.8))
    ax.plot(steps, loss, lw=0.8, color="0.6", label="step")
    if len(loss) >= 10:
        k = max(5, len(loss) // 20)
        smooth = np.convolve(loss, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1 :], smooth, lw=1.5, color="C0", label=f"{k}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("loss (negative SI-SNR, dB)")
    ax.legend(frameon=False)
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_improvements(labels, noisy_db, enhanced_db, path):
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(labels) + 1.5), 2.8))
    ax.bar(x - 0.2, noisy_db, 0.4, label="noisy", color="0.7")
    ax.bar(x + 0.2, enhanced_db, 0.4, label="enhanced", color="C0")
    ax.set_xticks(x, labels, rotation=60, ha="right")
    ax.set_ylabel("SI-SNR [dB]")
    ax.axhline(0, color="k", lw=0.5)
    ax.legend(frameon=False)
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
