"""
Three equal error rates from one score list
===========================================

A SASV score list holds three kinds of trial: targets, zero-effort
impostors (nontargets) and spoofs. Each EER uses the targets as the
positive class and a different negative set.
"""

import sys
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from sasvjoint.metrics import MetricKind, compute_all, metric_report
from sasvjoint.protocol_io import ScoreSet, Trial, TrialClass

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_output")
out.mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(0)

###############################################################################
# A system that separates impostors well but is fooled by some spoofs.

def score_list(spoof_mean, partition):
    scores = {
        TrialClass.TARGET: rng.normal(0.7, 0.1, 200),
        TrialClass.NONTARGET: rng.normal(0.1, 0.1, 400),
        TrialClass.SPOOF: rng.normal(spoof_mean, 0.15, 400),
    }
    entries = [(Trial("spk", f"{c.value}{i}", c), s) for c, xs in scores.items() for i, s in enumerate(xs)]
    return ScoreSet(tuple(entries), partition), scores


dev, dev_scores = score_list(0.45, "dev")
for kind, res in compute_all(dev).items():
    print(f"{kind.label:<9} {100 * res.eer:6.2f}%  threshold {res.threshold:+.3f}  "
          f"({res.n_positive} vs {res.n_negative} trials)")

###############################################################################
# The results table: one row per system, dev and eval per metric.

systems = {
    "spoof-prone": {"dev": dev, "eval": score_list(0.5, "eval")[0]},
    "spoof-aware": {"dev": score_list(0.2, "dev")[0], "eval": score_list(0.25, "eval")[0]},
}
print(metric_report(systems))

###############################################################################
# Score distributions, with the SASV-EER threshold.

thr = compute_all(dev)[MetricKind.SASV_EER].threshold
bins = np.linspace(-0.4, 1.2, 60)
plt.figure(figsize=(6, 3))
for cls, xs in dev_scores.items():
    plt.hist(xs, bins, alpha=0.5, label=cls.value)
plt.axvline(thr, color="k", ls="--", label="SASV-EER threshold")
plt.xlabel("score")
plt.legend()
plt.tight_layout()
plt.savefig(out / "sasv_score_distributions.png")
print(f"figure: {out / 'sasv_score_distributions.png'}")
