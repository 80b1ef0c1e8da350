"""Raw-waveform spoofing countermeasure: learnable sinc band-pass front end,
a small 1-D conv stack, attention pooling, a 160-d penultimate embedding and
a 2-class output layer (index 0 bona fide, index 1 spoof)."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import audio_frontend as af
from .nn_utils import seeded_init

log = logging.getLogger(__name__)

BONAFIDE, SPOOF = 0, 1


@dataclass(frozen=True)
class CmConfig:
    n_filters: int = 16
    kernel_size: int = 65
    sinc_stride: int = 2
    min_low_hz: float = 30.0
    min_band_hz: float = 50.0
    channels: tuple = (32, 64, 64)
    pools: tuple = (4, 4, 4, 2)
    groups: int = 4
    attention_dim: int = 64
    embedding_dim: int = 160

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["pools"] = list(self.pools)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CmConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["pools"] = tuple(d["pools"])
        return cls(**d)


@dataclass
class CmTrainConfig:
    epochs: int = 5
    batch_size: int = 16
    lr: float = 1e-3
    class_weights: tuple = (0.1, 0.9)
    eval_batch: int = 32


class SincConv(nn.Module):
    """Band-pass filterbank whose low cut-off and bandwidth are learned (Hz)."""

    def __init__(self, n_filters: int, kernel_size: int, stride: int, sample_rate: int,
                 min_low_hz: float, min_band_hz: float):
        super().__init__()
        if kernel_size % 2 == 0:
            kernel_size += 1
        self.kernel_size = kernel_size
        self.stride = stride
        self.sample_rate = sample_rate
        self.min_low_hz = min_low_hz
        self.min_band_hz = min_band_hz
        top = sample_rate / 2 - min_low_hz - min_band_hz
        hz = af.mel_to_hz(np.linspace(af.hz_to_mel(min_low_hz), af.hz_to_mel(top), n_filters + 1))
        self.low_hz = nn.Parameter(torch.tensor(hz[:-1] - min_low_hz, dtype=torch.float32))
        self.band_hz = nn.Parameter(torch.tensor(np.diff(hz), dtype=torch.float32))
        half = (kernel_size - 1) // 2
        n = torch.arange(-half, half + 1, dtype=torch.float32) / sample_rate
        self.register_buffer("t", 2 * math.pi * n, persistent=False)
        self.register_buffer("window", torch.hamming_window(kernel_size, periodic=False), persistent=False)

    def filters(self):
        low = self.min_low_hz + self.low_hz.abs()
        high = torch.clamp(low + self.min_band_hz + self.band_hz.abs(), self.min_low_hz, self.sample_rate / 2)
        t = self.t[None, :]

        def lowpass(f):
            arg = f[:, None] * t
            safe = torch.where(arg == 0, torch.ones_like(arg), arg)
            return torch.where(arg == 0, 2 * f[:, None], 2 * f[:, None] * torch.sin(safe) / safe)

        band = (lowpass(high) - lowpass(low)) * self.window
        band = band / band.abs().amax(dim=1, keepdim=True)
        return band.unsqueeze(1)

    def forward(self, x):
        return F.conv1d(x, self.filters(), stride=self.stride, padding=self.kernel_size // 2)


class CmEncoder(nn.Module):
    arch = "cm"

    def __init__(self, config: CmConfig = CmConfig()):
        super().__init__()
        self.config = config
        self.sinc = SincConv(config.n_filters, config.kernel_size, config.sinc_stride, af.SAMPLE_RATE,
                             config.min_low_hz, config.min_band_hz)
        self.sinc_norm = nn.GroupNorm(min(config.groups, config.n_filters), config.n_filters)
        convs, norms = [], []
        cin = config.n_filters
        for cout in config.channels:
            convs.append(nn.Conv1d(cin, cout, 5, padding=2))
            norms.append(nn.GroupNorm(min(config.groups, cout), cout))
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.attention = nn.Sequential(nn.Conv1d(cin, config.attention_dim, 1), nn.Tanh(),
                                       nn.Conv1d(config.attention_dim, 1, 1))
        self.hidden = nn.Linear(2 * cin, config.embedding_dim)
        self.output = nn.Linear(config.embedding_dim, 2)

    def embed(self, wave):
        """``(B, samples)`` waveforms to ``(B, 160)`` penultimate embeddings."""
        pools = self.config.pools
        x = self.sinc(wave.unsqueeze(1)).abs()
        x = F.leaky_relu(self.sinc_norm(F.max_pool1d(x, pools[0])), 0.3)
        for conv, norm, p in zip(self.convs, self.norms, pools[1:] + (1,) * len(self.convs)):
            x = F.leaky_relu(norm(conv(x)), 0.3)
            if p > 1:
                x = F.max_pool1d(x, p)
        alpha = torch.softmax(self.attention(x), dim=-1)
        mu = (alpha * x).sum(-1)
        sigma = torch.sqrt(torch.clamp((alpha * x * x).sum(-1) - mu * mu, min=1e-6))
        return F.leaky_relu(self.hidden(torch.cat([mu, sigma], dim=-1)), 0.3)

    def forward(self, wave):
        emb = self.embed(wave)
        return emb, self.output(emb)


def build_cm(config: CmConfig = CmConfig(), seed: int = 0) -> CmEncoder:
    with seeded_init(seed):
        return CmEncoder(config)


def weighted_cross_entropy(logits, labels, class_weights=(0.1, 0.9)):
    """Mean over the batch of ``w[y] * -log softmax(logits)[y]``."""
    w = torch.as_tensor(class_weights, dtype=logits.dtype)
    if bool((w <= 0).any()):
        raise ValueError("class weights must be positive")
    nll = -torch.log_softmax(logits, dim=-1).gather(1, labels.view(-1, 1)).squeeze(1)
    return (w[labels] * nll).mean()


def waves_tensor(waveforms) -> torch.Tensor:
    return torch.from_numpy(np.stack([af.pad_or_crop(w, af.CM_INPUT_SAMPLES) for w in waveforms]).astype(np.float32))


def cm_embed(model: CmEncoder, waveform):
    """Returns ``(embedding[160], logits[2])`` for one waveform."""
    with torch.no_grad():
        emb, logits = model(waves_tensor([waveform]))
    return emb[0].numpy(), logits[0].numpy()


def cm_embed_batch(model: CmEncoder, waveforms, batch: int = 32):
    embs, logits = [], []
    with torch.no_grad():
        for s in range(0, len(waveforms), batch):
            e, l = model(waves_tensor(waveforms[s:s + batch]))
            embs.append(e.numpy())
            logits.append(l.numpy())
    return np.concatenate(embs), np.concatenate(logits)


def cm_score(logits) -> np.ndarray:
    """Bona fide log-odds; higher means more likely bona fide."""
    logits = np.asarray(logits)
    return logits[:, BONAFIDE] - logits[:, SPOOF]


def cm_pretrain(corpus, config: CmConfig | None = None, train: CmTrainConfig | None = None,
                rng: np.random.Generator | None = None):
    """Weighted cross-entropy training on the train partition.

    Returns ``(model, history, selected_epoch)``; selection is by bona fide
    vs spoof EER over all dev utterances.
    """
    from .metrics import compute_eer

    config = config or CmConfig()
    train = train or CmTrainConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    recs = corpus.manifest.records("train")
    labels = np.array([BONAFIDE if r.is_bonafide else SPOOF for r in recs])
    if len(set(labels.tolist())) < 2:
        raise ValueError("CM training needs both bona fide and spoofed train utterances")
    utts = [r.utterance_id for r in recs]
    dev = corpus.manifest.records("dev")
    dev_bona = np.array([r.is_bonafide for r in dev])
    if dev_bona.all() or not dev_bona.any():
        raise ValueError("CM model selection needs bona fide and spoofed dev utterances")

    model = build_cm(config, int(rng.integers(2**31)))
    opt = torch.optim.Adam(model.parameters(), lr=train.lr)
    history = []
    best = (np.inf, None, -1)
    for epoch in range(train.epochs):
        model.train()
        order = rng.permutation(len(utts))
        losses = []
        for s in range(0, len(order), train.batch_size):
            idx = order[s:s + train.batch_size]
            x = waves_tensor([corpus.audio(utts[i]) for i in idx])
            _, logits = model(x)
            loss = weighted_cross_entropy(logits, torch.from_numpy(labels[idx]), train.class_weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        model.eval()
        _, logits = cm_embed_batch(model, [corpus.audio(r.utterance_id) for r in dev], train.eval_batch)
        scores = cm_score(logits)
        eer = compute_eer(scores[dev_bona], scores[~dev_bona]).eer
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "dev_cm_eer": eer})
        log.info("cm epoch %d loss %.4f dev EER %.4f", epoch, history[-1]["loss"], eer)
        if eer < best[0]:
            best = (eer, copy.deepcopy(model.state_dict()), epoch)
    model.load_state_dict(best[1])
    model.eval()
    return model, history, best[2]
