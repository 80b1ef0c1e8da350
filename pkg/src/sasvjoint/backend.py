"""Stacked-embedding back-end with one-class softmax scoring.

Shape trace of one trial::

    [3,512] -> conv [64,512] -> [128,512] -> [256,512] -> pool [256,4]
            -> flatten [1024] -> [512] -> [256] -> cosine with w_hat -> score
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .nn_utils import seeded_init

ASV_DIM = 512
CM_DIM = 160


@dataclass(frozen=True)
class BackendConfig:
    asv_dim: int = ASV_DIM
    cm_dim: int = CM_DIM
    conv_channels: tuple = (64, 128, 256)
    kernel_size: int = 3
    pool_bins: int = 4
    hidden_dims: tuple = (512, 256)
    negative_slope: float = 0.3
    alpha: float = 10.0
    m_pos: float = 0.8
    m_neg: float = 0.2

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not -1 < self.m_neg < self.m_pos < 1:
            raise ValueError("margins must satisfy -1 < m_neg < m_pos < 1")
        if self.asv_dim % self.pool_bins:
            raise ValueError("asv_dim must be divisible by pool_bins")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackendConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        d["hidden_dims"] = tuple(d["hidden_dims"])
        return cls(**d)


def adaptive_avg_pool(x, bins: int):
    """Mean over ``bins`` equal contiguous segments of the last axis."""
    *lead, n = x.shape
    if n % bins:
        raise ValueError(f"length {n} not divisible into {bins} bins")
    return x.reshape(*lead, bins, n // bins).mean(dim=-1)


def oc_softmax_loss(scores, labels, alpha: float = 10.0, m_pos: float = 0.8, m_neg: float = 0.2):
    """Mean one-class softmax loss.

    ``labels`` are 1 for the positive class (bona fide target) and 0 for
    negatives; positives pay ``softplus(alpha * (m_pos - s))``, negatives
    ``softplus(alpha * (s - m_neg))``.
    """
    scores = torch.as_tensor(scores)
    labels = torch.as_tensor(labels, dtype=torch.bool)
    if scores.numel() == 0:
        raise ValueError("empty batch")
    margin = torch.where(labels, alpha * (m_pos - scores), alpha * (scores - m_neg))
    return F.softplus(margin).mean()


class SasvBackend(nn.Module):
    arch = "backend"

    def __init__(self, config: BackendConfig = BackendConfig()):
        super().__init__()
        self.config = config
        c = config
        self.cm_projection = nn.Linear(c.cm_dim, c.asv_dim)
        convs = []
        cin = 3
        for cout in c.conv_channels:
            convs.append(nn.Conv1d(cin, cout, c.kernel_size, padding=c.kernel_size // 2))
            cin = cout
        self.convs = nn.ModuleList(convs)
        dims = [cin * c.pool_bins, *c.hidden_dims]
        self.linears = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.w_hat = nn.Parameter(torch.empty(dims[-1]))
        nn.init.normal_(self.w_hat)

    def stack(self, e_asv_enr, e_asv_tst, e_cm_tst):
        """``(B, 3, 512)``: enrolment, test, projected CM embedding."""
        c = self.config
        for name, e, d in (("e_asv_enr", e_asv_enr, c.asv_dim), ("e_asv_tst", e_asv_tst, c.asv_dim),
                           ("e_cm_tst", e_cm_tst, c.cm_dim)):
            if e.shape[-1] != d:
                raise ValueError(f"{name} has dimension {e.shape[-1]}, expected {d}")
        return torch.stack([e_asv_enr, e_asv_tst, self.cm_projection(e_cm_tst)], dim=-2)

    def features(self, stacked, trace: list | None = None):
        """256-d representation of ``(B, 3, 512)`` stacked embeddings."""
        if stacked.dim() != 3 or tuple(stacked.shape[1:]) != (3, self.config.asv_dim):
            raise ValueError(f"expected (B, 3, {self.config.asv_dim}), got {tuple(stacked.shape)}")
        slope = self.config.negative_slope
        x = stacked
        _record(trace, x)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), slope)
            _record(trace, x)
        x = adaptive_avg_pool(x, self.config.pool_bins)
        _record(trace, x)
        x = x.flatten(1)
        _record(trace, x)
        for i, lin in enumerate(self.linears):
            x = lin(x)
            if i < len(self.linears) - 1:
                x = F.leaky_relu(x, slope)
            _record(trace, x)
        return x

    def score(self, feats):
        return F.normalize(feats, dim=-1) @ F.normalize(self.w_hat, dim=0)

    def forward(self, e_asv_enr, e_asv_tst, e_cm_tst, trace: list | None = None):
        feats = self.features(self.stack(e_asv_enr, e_asv_tst, e_cm_tst), trace)
        score = self.score(feats)
        _record(trace, score)
        return score, feats

    def loss(self, scores, labels):
        c = self.config
        return oc_softmax_loss(scores, labels, c.alpha, c.m_pos, c.m_neg)


def _record(trace, x):
    if trace is not None:
        trace.append(tuple(x.shape[1:]))


def build_backend(config: BackendConfig = BackendConfig(), seed: int = 0) -> SasvBackend:
    with seeded_init(seed):
        return SasvBackend(config)


def _row(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float32))[None]


def stack_embeddings(model: SasvBackend, e_asv_enr, e_asv_tst, e_cm_tst) -> np.ndarray:
    with torch.no_grad():
        return model.stack(_row(e_asv_enr), _row(e_asv_tst), _row(e_cm_tst))[0].numpy()


def backend_forward(model: SasvBackend, stacked, trace: list | None = None):
    """``(score, feature_256)`` for one ``[3, 512]`` stacked input."""
    with torch.no_grad():
        feats = model.features(torch.as_tensor(np.asarray(stacked, dtype=np.float32))[None], trace)
        score = model.score(feats)
    _record(trace, score)
    return float(score[0]), feats[0].numpy()


def sasv_score(model: SasvBackend, e_asv_enr, e_asv_tst, e_cm_tst) -> float:
    return backend_forward(model, stack_embeddings(model, e_asv_enr, e_asv_tst, e_cm_tst))[0]
