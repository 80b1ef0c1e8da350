"""Speaker embedding network: log Mel input, four conv+SE stages, attentive
statistics pooling and a 512-d projection, trained with softmax plus angular
prototypical loss."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import audio_frontend as af
from .nn_utils import seeded_init

log = logging.getLogger(__name__)

ASP_EPS = 1e-6


@dataclass(frozen=True)
class AsvConfig:
    n_mels: int = af.N_MELS
    widths: tuple = (16, 32, 64, 128)
    strides: tuple = ((2, 2), (2, 2), (2, 2), (2, 1))
    se_reduction: int = 8
    groups: int = 4
    attention_dim: int = 128
    embedding_dim: int = 512
    n_speakers: int = 20
    ap_init_w: float = 10.0
    ap_init_b: float = -5.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["strides"] = [list(s) for s in self.strides]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AsvConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["strides"] = tuple(tuple(s) for s in d["strides"])
        return cls(**d)


@dataclass
class AsvTrainConfig:
    epochs: int = 5
    batch_speakers: int = 10
    crop_seconds: float = 2.0
    lr: float = 1e-3
    enrol_cap_seconds: float = 60.0
    eval_batch: int = 16


class SEBlock(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        s = x.mean(dim=(2, 3))
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return x * s[:, :, None, None]


class ConvSEStage(nn.Module):
    def __init__(self, cin: int, cout: int, stride, reduction: int, groups: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(min(groups, cout), cout)
        self.se = SEBlock(cout, reduction)

    def forward(self, x):
        return self.se(F.relu(self.norm(self.conv(x))))


def asp_pool(h, weight, bias, vector, offset=0.0, eps: float = ASP_EPS):
    """Attentive statistics pooling over the frame axis.

    ``h`` is ``(..., T, C)``. Frame scores are
    ``vector . tanh(weight @ h_t + bias) + offset``; their softmax over T
    weights the mean and standard deviation, which are concatenated to
    ``(..., 2C)``. The variance is floored at ``eps``.
    """
    e = torch.tanh(h @ weight.T + bias) @ vector + offset
    alpha = torch.softmax(e, dim=-1).unsqueeze(-1)
    mu = (alpha * h).sum(dim=-2)
    var = (alpha * h * h).sum(dim=-2) - mu * mu
    sigma = torch.sqrt(torch.clamp(var, min=eps))
    return torch.cat([mu, sigma], dim=-1)


class AttentiveStatsPool(nn.Module):
    def __init__(self, channels: int, attention_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(attention_dim, channels))
        self.bias = nn.Parameter(torch.zeros(attention_dim))
        self.vector = nn.Parameter(torch.empty(attention_dim))
        nn.init.xavier_uniform_(self.weight)
        nn.init.uniform_(self.vector, -attention_dim**-0.5, attention_dim**-0.5)

    def forward(self, h):
        return asp_pool(h, self.weight, self.bias, self.vector)


def angular_prototypical_loss(embeddings, w, b):
    """Angular prototypical loss for an ``(N speakers, M utts, D)`` batch.

    Utterance 0 of each speaker is the query, the mean of the rest the
    prototype; logits are ``max(w, 1e-6) * cos(query_i, proto_j) + b``.
    """
    if embeddings.dim() != 3:
        raise ValueError("embeddings must be (N, M, D)")
    n, m, _ = embeddings.shape
    if n < 2 or m < 2:
        raise ValueError(f"need N >= 2 speakers and M >= 2 utterances, got N={n}, M={m}")
    query = embeddings[:, 0]
    proto = embeddings[:, 1:].mean(dim=1)
    qn = query.norm(dim=-1)
    pn = proto.norm(dim=-1)
    if bool((qn == 0).any()) or bool((pn == 0).any()):
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    cos = (query / qn[:, None]) @ (proto / pn[:, None]).T
    logits = torch.clamp(w, min=1e-6) * cos + b
    labels = torch.arange(n, device=embeddings.device)
    return F.cross_entropy(logits, labels)


class AsvEncoder(nn.Module):
    """Maps log Mel features ``(B, T, 64)`` to 512-d embeddings.

    The softmax speaker head and the angular prototypical scale/bias are
    held here too so they travel with the checkpoint.
    """

    arch = "asv"

    def __init__(self, config: AsvConfig = AsvConfig()):
        super().__init__()
        self.config = config
        stages = []
        cin = 1
        freq = config.n_mels
        for width, stride in zip(config.widths, config.strides):
            stages.append(ConvSEStage(cin, width, stride, config.se_reduction, config.groups))
            cin = width
            freq = (freq - 1) // stride[0] + 1
        self.stages = nn.Sequential(*stages)
        pooled = cin * freq
        self.pool = AttentiveStatsPool(pooled, config.attention_dim)
        self.projection = nn.Linear(2 * pooled, config.embedding_dim)
        self.speaker_head = nn.Linear(config.embedding_dim, config.n_speakers)
        self.ap_w = nn.Parameter(torch.tensor(config.ap_init_w))
        self.ap_b = nn.Parameter(torch.tensor(config.ap_init_b))

    def forward(self, feats):
        x = feats - feats.mean(dim=1, keepdim=True)
        x = self.stages(x.transpose(1, 2).unsqueeze(1))  # (B, C, F, T)
        b, c, f, t = x.shape
        x = x.reshape(b, c * f, t).transpose(1, 2)
        return self.projection(self.pool(x))

    def loss(self, emb, labels):
        """Softmax + angular prototypical loss for an ``(N, M, D)`` batch."""
        n, m, d = emb.shape
        ce = F.cross_entropy(self.speaker_head(emb.reshape(n * m, d)), labels.repeat_interleave(m))
        return ce + angular_prototypical_loss(emb, self.ap_w, self.ap_b)


def build_asv(config: AsvConfig = AsvConfig(), seed: int = 0) -> AsvEncoder:
    with seeded_init(seed):
        return AsvEncoder(config)


def features_tensor(waveforms) -> torch.Tensor:
    """Stack equal-length waveforms into a ``(B, T, 64)`` float32 feature batch."""
    feats = [af.log_mel_features(w) for w in waveforms]
    return torch.from_numpy(np.stack(feats).astype(np.float32))


def asv_embed(model: AsvEncoder, waveform) -> np.ndarray:
    with torch.no_grad():
        return model(features_tensor([waveform]))[0].numpy()


def asv_embed_batch(model: AsvEncoder, waveforms, batch: int = 16) -> np.ndarray:
    """Embeddings for many waveforms; equal lengths are batched together."""
    out = [None] * len(waveforms)
    by_len: dict[int, list[int]] = {}
    for i, w in enumerate(waveforms):
        by_len.setdefault(len(w), []).append(i)
    with torch.no_grad():
        for idx in by_len.values():
            for s in range(0, len(idx), batch):
                chunk = idx[s:s + batch]
                emb = model(features_tensor([waveforms[i] for i in chunk])).numpy()
                for i, e in zip(chunk, emb):
                    out[i] = e
    return np.stack(out)


def _pair_batches(by_speaker: dict[str, list[str]], batch_speakers: int, rng):
    pairs = {}
    for spk in sorted(by_speaker):
        utts = list(by_speaker[spk])
        rng.shuffle(utts)
        pairs[spk] = [utts[i:i + 2] for i in range(0, len(utts) - 1, 2)]
    batches = []
    while True:
        live = [s for s in sorted(pairs) if pairs[s]]
        if len(live) < 2:
            break
        rng.shuffle(live)
        chosen = live[:batch_speakers]
        batches.append([(s, pairs[s].pop()) for s in chosen])
    return batches


def asv_pretrain(corpus, config: AsvConfig | None = None, train: AsvTrainConfig | None = None,
                 rng: np.random.Generator | None = None):
    """Train on 2 s random crops of train-partition bona fide speech.

    Returns ``(model, history, selected_epoch)``; the model is the epoch
    with the lowest SV-EER on the dev partition's target/nontarget trials.
    """
    from .metrics import MetricKind, compute_metric
    from .protocol_io import TrialClass

    train = train or AsvTrainConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    by_speaker = {
        s: u for s, u in corpus.manifest.bonafide_by_speaker("train").items() if len(u) >= 2
    }
    if len(by_speaker) < 2:
        raise ValueError("ASV pre-training needs at least 2 train speakers with >= 2 bona fide utterances")
    speakers = sorted(by_speaker)
    if config is None:
        config = AsvConfig(n_speakers=len(speakers))
    if config.n_speakers != len(speakers):
        raise ValueError(f"config.n_speakers={config.n_speakers} but corpus has {len(speakers)} train speakers")
    index = {s: i for i, s in enumerate(speakers)}
    model = build_asv(config, int(rng.integers(2**31)))
    opt = torch.optim.Adam(model.parameters(), lr=train.lr)
    crop = int(train.crop_seconds * af.SAMPLE_RATE)

    dev_trials = [t for t in corpus.trials("dev") if t.trial_class is not TrialClass.SPOOF]
    history = []
    best = (np.inf, None, -1)
    for epoch in range(train.epochs):
        model.train()
        losses = []
        for batch in _pair_batches(by_speaker, train.batch_speakers, rng):
            waves = [af.random_crop(corpus.audio(u), crop, rng) for _, pair in batch for u in pair]
            feats = features_tensor(waves)
            labels = torch.tensor([index[s] for s, _ in batch])
            emb = model(feats).reshape(len(batch), 2, -1)
            loss = model.loss(emb, labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        model.eval()
        scores = score_trials_cosine(model, corpus, dev_trials, "dev", train.enrol_cap_seconds, train.eval_batch)
        eer = compute_metric(scores, MetricKind.SV_EER).eer
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "dev_sv_eer": eer})
        log.info("asv epoch %d loss %.4f dev SV-EER %.4f", epoch, history[-1]["loss"], eer)
        if eer < best[0]:
            best = (eer, copy.deepcopy(model.state_dict()), epoch)
    model.load_state_dict(best[1])
    model.eval()
    return model, history, best[2]


def score_trials_cosine(model, corpus, trials, partition, cap_seconds, batch=16):
    """Cosine scoring of enrolment vs test embeddings (no back-end)."""
    from .protocol_io import ScoreSet

    speakers = sorted({t.enrol_speaker_id for t in trials})
    enrol = corpus.enrolment(partition)
    enr = asv_embed_batch(
        model, [af.concat_enrolment([corpus.audio(u) for u in enrol[s]], cap_seconds) for s in speakers], batch
    )
    enr = dict(zip(speakers, enr))
    tests = sorted({t.test_utterance_id for t in trials})
    tst = asv_embed_batch(model, [af.pad_or_crop(corpus.audio(u), af.CM_INPUT_SAMPLES) for u in tests], batch)
    tst = dict(zip(tests, tst))
    scores = []
    for t in trials:
        a, b = enr[t.enrol_speaker_id], tst[t.test_utterance_id]
        scores.append(float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12)))
    return ScoreSet.from_scores(trials, scores, partition)
