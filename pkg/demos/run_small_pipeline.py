"""
A small end-to-end run through the library API
==============================================

Generate a miniature corpus, pre-train the speaker and spoofing
sub-systems, train the SASV back-end with the sub-systems fixed and
jointly, and compare. Takes a few minutes on one CPU core; the default
sized run is driven by the ``sasvjoint`` command instead.
"""

import copy
import logging
import sys
from pathlib import Path

import numpy as np

from sasvjoint.asv_encoder import AsvConfig, AsvTrainConfig, asv_pretrain
from sasvjoint.backend import build_backend
from sasvjoint.cm_encoder import CmTrainConfig, cm_pretrain
from sasvjoint.metrics import metric_report
from sasvjoint.protocol_io import Corpus
from sasvjoint.synth_corpus import CorpusConfig, generate_corpus, summarise
from sasvjoint.trainer import TrainingConfig, infer, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_output")

###############################################################################
# Eight training speakers, four each in dev and eval.

cfg = CorpusConfig(n_speakers=8, utts_per_speaker=8, n_attacks=4, seed=1, nontarget_per_speaker=6,
                   duration_range=(2.0, 3.0))
generate_corpus(cfg, out / "corpus", overwrite=True)
corpus = Corpus(out / "corpus")
for part, counts in summarise(corpus.manifest).items():
    print(part, counts)

###############################################################################
# Sub-system pre-training; each keeps the epoch with the best dev EER.

asv, asv_hist, _ = asv_pretrain(corpus, AsvConfig(n_speakers=8), AsvTrainConfig(epochs=3, batch_speakers=8),
                                np.random.default_rng([1, 10]))
cm, cm_hist, _ = cm_pretrain(corpus, train=CmTrainConfig(epochs=3), rng=np.random.default_rng([1, 11]))
print("ASV dev SV-EER by epoch:", [round(h["dev_sv_eer"], 3) for h in asv_hist])
print("CM dev EER by epoch:", [round(h["dev_cm_eer"], 3) for h in cm_hist])

###############################################################################
# The back-end, once with the sub-systems frozen and once trained jointly.

systems = {}
for mode in ("fixed", "joint"):
    a, c = copy.deepcopy(asv), copy.deepcopy(cm)
    backend = build_backend(seed=1)
    _, run = train(a, c, backend, corpus, TrainingConfig(mode=mode, epochs=3, seed=1))
    print(mode, run.summary())
    systems[mode] = {p: infer(a, c, backend, corpus, p) for p in ("dev", "eval")}

print(metric_report(systems))
