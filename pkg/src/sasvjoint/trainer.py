"""SASV training in the two regimes (sub-systems fixed, or jointly optimised),
per-epoch dev model selection, and concatenated-enrolment inference."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np
import torch

from . import audio_frontend as af
from .asv_encoder import AsvEncoder, features_tensor
from .audio_frontend import concat_enrolment
from .backend import SasvBackend
from .checkpoint_store import ModelCheckpoint, config_hash, section_from_module
from .cm_encoder import CmEncoder, waves_tensor
from .metrics import MetricKind, compute_all
from .protocol_io import ScoreSet, Trial, TrialClass

log = logging.getLogger(__name__)

MODES = ("fixed", "joint")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    mode: str = "fixed"
    epochs: int = 20
    batch_size: int = 20
    lr0: float = 5e-5
    decay: float = 0.95
    decay_every: int = 200
    seed: int = 0
    enrolment_cap_dev: float = 60.0
    enrolment_cap_eval: float = 90.0
    segment_samples: int = af.CM_INPUT_SAMPLES
    eval_batch: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("epochs", "batch_size", "lr0", "decay", "decay_every", "enrolment_cap_dev",
                     "enrolment_cap_eval", "segment_samples", "eval_batch"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def enrolment_cap(self, partition: str) -> float:
        return {"dev": self.enrolment_cap_dev, "eval": self.enrolment_cap_eval}[partition]


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    sasv_eer: float
    spf_eer: float
    sv_eer: float
    lr: float


@dataclass
class TrainingRun:
    epochs: list = field(default_factory=list)
    selected_epoch: int = -1
    steps: int = 0

    def to_csv(self) -> str:
        lines = ["epoch,loss,dev_sasv_eer,dev_spf_eer,dev_sv_eer,lr"]
        for r in self.epochs:
            vals = (r.loss, r.sasv_eer, r.spf_eer, r.sv_eer, r.lr)
            lines.append(f"{int(r.epoch)}," + ",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        r = self.epochs[self.selected_epoch]
        return (f"selected epoch {r.epoch}: dev SASV-EER {100 * r.sasv_eer:.2f}%, "
                f"SPF-EER {100 * r.spf_eer:.2f}%, SV-EER {100 * r.sv_eer:.2f}%")


def select_epoch(records: Sequence[EpochRecord]) -> int:
    """Index of the lowest dev SASV-EER; earliest wins ties."""
    best = 0
    for i, r in enumerate(records):
        if r.sasv_eer < records[best].sasv_eer:
            best = i
    return best


def lr_at(step: int, config: TrainingConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return config.lr0 * config.decay ** (step // config.decay_every)


@dataclass(frozen=True)
class TrainingExample:
    enrol_utterance_id: str
    test_utterance_id: str
    label: int  # 1 bona fide target, 0 otherwise
    trial: Trial


def check_protocol(protocol: Sequence[Trial]) -> None:
    classes = {t.trial_class for t in protocol}
    if TrialClass.TARGET not in classes:
        raise TrainingError("training protocol has no target trials")
    if not classes & {TrialClass.NONTARGET, TrialClass.SPOOF}:
        raise TrainingError("training protocol has no negative (nontarget or spoof) trials")
    if len({t.enrol_speaker_id for t in protocol}) < 2:
        raise TrainingError("training protocol needs at least 2 speakers")


def make_batches(enrolment: dict, protocol: Sequence[Trial], batch_size: int,
                 rng: np.random.Generator) -> Iterator[list[TrainingExample]]:
    """One epoch: the protocol in a random order, each trial paired with an
    enrolment utterance of its speaker drawn from ``enrolment`` (excluding
    the test utterance when possible)."""
    check_protocol(protocol)
    order = rng.permutation(len(protocol))
    batch = []
    for i in order:
        t = protocol[i]
        pool = enrolment.get(t.enrol_speaker_id)
        if not pool:
            raise TrainingError(f"speaker {t.enrol_speaker_id} has no enrolment utterances")
        choices = [u for u in pool if u != t.test_utterance_id] or list(pool)
        enrol = choices[int(rng.integers(len(choices)))]
        batch.append(TrainingExample(enrol, t.test_utterance_id, int(t.trial_class is TrialClass.TARGET), t))
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


class _EmbeddingSource:
    """ASV/CM embeddings of fixed-length segments, with features cached.

    In fixed mode the embeddings themselves are cached as well; in joint mode
    they are recomputed with gradients on every call.
    """

    def __init__(self, corpus, asv: AsvEncoder, cm: CmEncoder, config: TrainingConfig, cache_embeddings: bool):
        self.corpus = corpus
        self.asv, self.cm = asv, cm
        self.n = config.segment_samples
        self.cache = cache_embeddings
        self._feats: dict = {}
        self._waves: dict = {}
        self._asv: dict = {}
        self._cm: dict = {}

    def _segment(self, u):
        if u not in self._waves:
            self._waves[u] = af.pad_or_crop(self.corpus.audio(u), self.n)
        return self._waves[u]

    def _feat(self, u):
        if u not in self._feats:
            self._feats[u] = features_tensor([self._segment(u)])[0]
        return self._feats[u]

    def asv_batch(self, utts):
        if self.cache:
            missing = [u for u in dict.fromkeys(utts) if u not in self._asv]
            if missing:
                with torch.no_grad():
                    emb = self.asv(torch.stack([self._feat(u) for u in missing]))
                self._asv.update(zip(missing, emb))
            return torch.stack([self._asv[u] for u in utts])
        uniq = list(dict.fromkeys(utts))
        emb = self.asv(torch.stack([self._feat(u) for u in uniq]))
        pos = {u: i for i, u in enumerate(uniq)}
        return emb[[pos[u] for u in utts]]

    def cm_batch(self, utts):
        if self.cache:
            missing = [u for u in dict.fromkeys(utts) if u not in self._cm]
            if missing:
                with torch.no_grad():
                    emb, _ = self.cm(waves_tensor([self._segment(u) for u in missing]))
                self._cm.update(zip(missing, emb))
            return torch.stack([self._cm[u] for u in utts])
        emb, _ = self.cm(waves_tensor([self._segment(u) for u in utts]))
        return emb


def _set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def train(asv: AsvEncoder, cm: CmEncoder, backend: SasvBackend, corpus, config: TrainingConfig,
          protocol: Sequence[Trial] | None = None, max_steps: int | None = None,
          step_callback=None):
    """Train the back-end (fixed) or all three networks (joint).

    The modules are trained in place and left holding the selected epoch's
    parameters. Returns ``(ModelCheckpoint, TrainingRun)``. ``max_steps``
    truncates training (each truncated epoch is still evaluated);
    ``step_callback(step, loss)`` observes every update.
    """
    joint = config.mode == "joint"
    protocol = list(protocol if protocol is not None else corpus.trials("train"))
    check_protocol(protocol)
    enrolment = corpus.enrolment("train")
    rng = np.random.default_rng([config.seed, 1])

    _set_requires_grad(asv, joint)
    _set_requires_grad(cm, joint)
    asv.eval()
    cm.eval()
    params = list(backend.parameters())
    if joint:
        params = list(asv.parameters()) + list(cm.parameters()) + params
    opt = torch.optim.Adam(params, lr=lr_at(0, config))
    source = _EmbeddingSource(corpus, asv, cm, config, cache_embeddings=not joint)
    dev_cache = DevCache() if not joint else None

    run = TrainingRun()
    best_state = None
    step = 0
    for epoch in range(config.epochs):
        backend.train()
        losses = []
        for batch in make_batches(enrolment, protocol, config.batch_size, rng):
            if max_steps is not None and step >= max_steps:
                break
            for g in opt.param_groups:
                g["lr"] = lr_at(step, config)
            e_enr = source.asv_batch([ex.enrol_utterance_id for ex in batch])
            tests = [ex.test_utterance_id for ex in batch]
            e_tst = source.asv_batch(tests)
            e_cm = source.cm_batch(tests)
            scores, _ = backend(e_enr, e_tst, e_cm)
            loss = backend.loss(scores, torch.tensor([ex.label for ex in batch]))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if step_callback is not None:
                step_callback(step, loss.item())
            step += 1
        backend.eval()
        with torch.no_grad():
            scores = infer(asv, cm, backend, corpus, "dev", config, cache=dev_cache)
        res = compute_all(scores)
        rec = EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"),
                          res[MetricKind.SASV_EER].eer, res[MetricKind.SPF_EER].eer,
                          res[MetricKind.SV_EER].eer, lr_at(step, config))
        run.epochs.append(rec)
        log.info("%s epoch %d loss %.4f dev SASV %.4f SPF %.4f SV %.4f", config.mode, epoch, rec.loss,
                 rec.sasv_eer, rec.spf_eer, rec.sv_eer)
        if select_epoch(run.epochs) == epoch:
            best_state = [copy.deepcopy(m.state_dict()) for m in (asv, cm, backend)]
        if max_steps is not None and step >= max_steps:
            break
    run.selected_epoch = select_epoch(run.epochs)
    run.steps = step
    for m, state in zip((asv, cm, backend), best_state):
        m.load_state_dict(state)
    _set_requires_grad(asv, True)
    _set_requires_grad(cm, True)
    asv.eval()
    cm.eval()
    backend.eval()

    ckpt = ModelCheckpoint(
        sections={"asv": section_from_module(asv), "cm": section_from_module(cm),
                  "backend": section_from_module(backend)},
        config_hash=config_hash(asdict(config)),
        seed=config.seed,
        selected_epoch=run.selected_epoch,
        meta={"mode": config.mode, "training": asdict(config)},
    )
    return ckpt, run


class DevCache:
    """Sub-system embeddings reused across epochs when the sub-systems are frozen."""

    def __init__(self):
        self.enrol: dict = {}
        self.asv: dict = {}
        self.cm: dict = {}


def enrolment_embeddings(asv: AsvEncoder, corpus, speakers, partition: str, cap_seconds: float):
    """One ASV embedding per speaker from the capped concatenation of its
    enrolment utterances."""
    enrol = corpus.enrolment(partition)
    out = {}
    for spk in speakers:
        if spk not in enrol:
            raise TrainingError(f"no enrolment for speaker {spk} in {partition}")
        wave = concat_enrolment([corpus.audio(u) for u in enrol[spk]], cap_seconds)
        with torch.no_grad():
            out[spk] = asv(features_tensor([wave]))[0]
    return out


def infer(asv: AsvEncoder, cm: CmEncoder, backend: SasvBackend, corpus, partition: str,
          config: TrainingConfig | None = None, trials: Sequence[Trial] | None = None,
          cache: DevCache | None = None) -> ScoreSet:
    """Score every trial of ``partition``; enrolment embeddings are computed
    once per speaker (60 s cap for dev, 90 s for eval by default)."""
    config = config or TrainingConfig()
    trials = list(trials if trials is not None else corpus.trials(partition))
    cap = config.enrolment_cap(partition)
    speakers = list(dict.fromkeys(t.enrol_speaker_id for t in trials))
    enrol_known = corpus.enrolment(partition)
    for spk in speakers:
        if spk not in enrol_known:
            raise TrainingError(f"no enrolment for speaker {spk} in {partition}")

    with torch.no_grad():
        if cache is not None and cache.enrol:
            enr = cache.enrol
        else:
            enr = enrolment_embeddings(asv, corpus, speakers, partition, cap)
            if cache is not None:
                cache.enrol = enr
        tests = list(dict.fromkeys(t.test_utterance_id for t in trials))
        todo = [u for u in tests if cache is None or u not in cache.asv]
        asv_t, cm_t = {}, {}
        for s in range(0, len(todo), config.eval_batch):
            chunk = todo[s:s + config.eval_batch]
            segs = [af.pad_or_crop(corpus.audio(u), config.segment_samples) for u in chunk]
            a = asv(features_tensor(segs))
            c, _ = cm(waves_tensor(segs))
            asv_t.update(zip(chunk, a))
            cm_t.update(zip(chunk, c))
        if cache is not None:
            cache.asv.update(asv_t)
            cache.cm.update(cm_t)
            asv_t, cm_t = cache.asv, cache.cm
        scores = []
        for s in range(0, len(trials), config.eval_batch):
            chunk = trials[s:s + config.eval_batch]
            sc, _ = backend(torch.stack([enr[t.enrol_speaker_id] for t in chunk]),
                            torch.stack([asv_t[t.test_utterance_id] for t in chunk]),
                            torch.stack([cm_t[t.test_utterance_id] for t in chunk]))
            scores += sc.tolist()
    return ScoreSet.from_scores(trials, scores, partition)


def enrolment_strategy_diagnostic(asv: AsvEncoder, cm: CmEncoder, backend: SasvBackend, corpus,
                                  partition: str, config: TrainingConfig | None = None) -> dict:
    """Dev/eval EERs with the concatenated enrolment embedding versus the mean
    of per-utterance enrolment embeddings. Reported only; no threshold."""
    config = config or TrainingConfig()
    trials = list(corpus.trials(partition))
    concat = compute_all(infer(asv, cm, backend, corpus, partition, config, trials))
    cache = DevCache()
    enrol = corpus.enrolment(partition)
    with torch.no_grad():
        for spk in dict.fromkeys(t.enrol_speaker_id for t in trials):
            # utterances differ in length, so embed them one at a time
            embs = [asv(features_tensor([corpus.audio(u)]))[0] for u in enrol[spk]]
            cache.enrol[spk] = torch.stack(embs).mean(0)
    averaged = compute_all(infer(asv, cm, backend, corpus, partition, config, trials, cache))
    return {
        "concatenated": {k.label: r.eer for k, r in concat.items()},
        "averaged": {k.label: r.eer for k, r in averaged.items()},
    }
