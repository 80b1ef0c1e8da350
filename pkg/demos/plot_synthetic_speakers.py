"""
Synthetic speakers and spoofing attacks
=======================================

Every speaker is a harmonic source at its own f0 shaped by three
resonances. An attack converts another speaker's speech toward the
target's spectral envelope; the long-term spectrum shows how close it
gets and what it leaves behind.
"""

import sys
from pathlib import Path

import numpy as np
from scipy import signal

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from sasvjoint.synth_corpus import RECIPES, AttackProfile, SpeakerProfile, apply_attack, synth_utterance

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_output")
out.mkdir(parents=True, exist_ok=True)

source = SpeakerProfile("src", 100.0, (600.0, 1500.0, 2800.0), (80.0, 110.0, 140.0), 4.0, 0.5, 0.04, 1)
target = SpeakerProfile("tgt", 180.0, (450.0, 1900.0, 3300.0), (70.0, 100.0, 150.0), 4.5, 0.4, 0.03, 2)


def spectrum(x):
    f, p = signal.welch(x, fs=16000, nperseg=2048)
    return f, 10 * np.log10(p + 1e-12)

###############################################################################
# Bona fide renders of both speakers.

x_src = synth_utterance(source, 3.0, np.random.default_rng(0))
x_tgt = synth_utterance(target, 3.0, np.random.default_rng(1))
print(f"peak amplitude {np.abs(x_src).max():.6f}, {len(x_src)} samples")

###############################################################################
# Each attack recipe at full strength, source speech converted toward the target.

fig, axes = plt.subplots(len(RECIPES), 1, figsize=(7, 7), sharex=True)
for ax, recipe in zip(axes, RECIPES):
    y = apply_attack(x_src, AttackProfile("A", recipe, 1.0), target, np.random.default_rng(2))
    for x, label in ((x_src, "source"), (x_tgt, "target"), (y, "attack")):
        ax.plot(*spectrum(x), label=label, lw=0.8)
    for r in target.resonances:
        ax.axvline(r, color="k", ls=":", lw=0.6)
    ax.set_title(recipe)
    ax.set_ylabel("dB")
axes[0].legend()
axes[-1].set_xlabel("Hz")
fig.tight_layout()
fig.savefig(out / "attack_spectra.png")
print(f"figure: {out / 'attack_spectra.png'}")
