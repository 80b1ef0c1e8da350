"""Training-speaker sweep: retrain the back-end (fixed) or the whole system
(joint) on nested subsets of the train speakers and record dev EERs."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .backend import BackendConfig, build_backend
from .metrics import MetricKind, compute_all
from .protocol_io import filter_speakers
from .trainer import MODES, TrainingConfig, infer, train

log = logging.getLogger(__name__)

DEFAULT_COUNTS = (4, 8, 12, 16, 20)
SERIES_LABELS = {"fixed": "pre-trained, fixed", "joint": "jointly-optimised"}
DATA_COLUMNS = ("n_speakers", "mode", "sv_eer", "spf_eer", "sasv_eer", "seed")


class AblationError(ValueError):
    pass


@dataclass
class AblationRow:
    n_speakers: int
    mode: str
    sv_eer: float
    spf_eer: float
    sasv_eer: float
    seed: int
    asv_digest: str = ""
    cm_digest: str = ""
    backend_digest: str = ""


@dataclass
class AblationResult:
    rows: list = field(default_factory=list)
    subsets: dict = field(default_factory=dict)  # n_speakers -> sorted speaker ids

    def check(self) -> None:
        keys = [(r.n_speakers, r.mode, r.seed) for r in self.rows]
        if len(keys) != len(set(keys)):
            raise AblationError("duplicate (n_speakers, mode, seed) row")
        for r in self.rows:
            for v in (r.sv_eer, r.spf_eer, r.sasv_eer):
                if not 0.0 <= v <= 1.0:
                    raise AblationError(f"EER {v} outside [0, 1]")

    def counts(self) -> list[int]:
        return sorted({r.n_speakers for r in self.rows})

    def series(self, mode: str) -> tuple[list[int], list[float]]:
        """Dev SV-EER (%) per speaker count, averaged over seeds."""
        xs = sorted({r.n_speakers for r in self.rows if r.mode == mode})
        ys = [100.0 * float(np.mean([r.sv_eer for r in self.rows if r.mode == mode and r.n_speakers == x]))
              for x in xs]
        return xs, ys


def nested_subsets(speakers: Sequence[str], counts: Sequence[int], seed: int) -> dict[int, list[str]]:
    """Prefixes of one seeded permutation, so smaller subsets nest in larger ones."""
    counts = list(counts)
    if not counts:
        raise AblationError("no speaker counts given")
    pool = sorted(speakers)
    for k in counts:
        if k < 2:
            raise AblationError(f"speaker count {k} is below 2")
        if k > len(pool):
            raise AblationError(f"speaker count {k} exceeds the {len(pool)} available train speakers")
    order = [pool[i] for i in np.random.default_rng([seed, 2]).permutation(len(pool))]
    return {k: sorted(order[:k]) for k in sorted(set(counts))}


def run_ablation(corpus, asv, cm, speaker_counts: Sequence[int] = DEFAULT_COUNTS,
                 modes: Sequence[str] = MODES, config: TrainingConfig | None = None,
                 backend_config: BackendConfig | None = None, seeds: Sequence[int] | None = None
                 ) -> AblationResult:
    """One training run per (count, mode, seed), all starting from the same
    pre-trained ``asv``/``cm`` (which are copied, never modified)."""

    config = config or TrainingConfig()
    backend_config = backend_config or BackendConfig()
    seeds = list(seeds) if seeds is not None else [config.seed]
    for m in modes:
        if m not in MODES:
            raise AblationError(f"unknown mode {m!r}")
    if not modes:
        raise AblationError("no modes given")

    result = AblationResult()
    for seed in seeds:
        subsets = nested_subsets(corpus.manifest.speakers("train"), speaker_counts, seed)
        if len(seeds) == 1:
            result.subsets = subsets
        for k in speaker_counts:
            sub = corpus.restrict(filter_speakers(corpus.manifest, subsets[k]))
            for mode in modes:
                cfg = replace(config, mode=mode, seed=seed)
                a, c = copy.deepcopy(asv), copy.deepcopy(cm)
                be = build_backend(backend_config, seed)
                ckpt, run = train(a, c, be, sub, cfg)
                res = compute_all(infer(a, c, be, sub, "dev", cfg))
                row = AblationRow(k, mode, res[MetricKind.SV_EER].eer, res[MetricKind.SPF_EER].eer,
                                  res[MetricKind.SASV_EER].eer, seed,
                                  ckpt.sections["asv"].digest(), ckpt.sections["cm"].digest(),
                                  ckpt.sections["backend"].digest())
                log.info("ablation n=%d %s seed %d: SV %.4f SPF %.4f SASV %.4f", k, mode, seed,
                         row.sv_eer, row.spf_eer, row.sasv_eer)
                result.rows.append(row)
    result.check()
    return result


def write_ablation(result: AblationResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DATA_COLUMNS)
        for r in result.rows:
            eers = (repr(float(v)) for v in (r.sv_eer, r.spf_eer, r.sasv_eer))
            w.writerow([int(r.n_speakers), r.mode, *eers, int(r.seed)])


def read_ablation(path) -> AblationResult:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or tuple(reader.fieldnames) != DATA_COLUMNS:
            raise AblationError(f"{path}: expected columns {','.join(DATA_COLUMNS)}")
        rows = [AblationRow(int(d["n_speakers"]), d["mode"], float(d["sv_eer"]), float(d["spf_eer"]),
                            float(d["sasv_eer"]), int(d["seed"])) for d in reader]
    result = AblationResult(rows)
    result.check()
    return result


@dataclass
class PlotSummary:
    """What was drawn, read back from the axes."""

    series: dict  # legend label -> (xs, ys)
    xlabel: str
    ylabel: str


def plot_ablation(result: AblationResult, out_path, data_path=None) -> PlotSummary:
    """Dev SV-EER against training speakers, one line per mode.

    Also writes the data file (default: ``out_path`` with a ``.csv``
    suffix).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not result.rows:
        raise AblationError("empty ablation result")
    if len(result.counts()) < 2:
        raise AblationError("plot needs at least 2 distinct speaker counts")
    out_path = Path(out_path)
    data_path = Path(data_path) if data_path is not None else out_path.with_suffix(".csv")
    write_ablation(result, data_path)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode in MODES:
        if any(r.mode == mode for r in result.rows):
            ax.plot(*result.series(mode), marker="o", label=SERIES_LABELS[mode])
    ax.set_xlabel("training speakers")
    ax.set_ylabel("dev SV-EER (%)")
    ax.set_xticks(result.counts())
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, metadata={"Software": None} if out_path.suffix == ".png" else None)
    _, labels = ax.get_legend_handles_labels()
    summary = PlotSummary(
        {line.get_label(): (list(line.get_xdata()), list(line.get_ydata())) for line in ax.get_lines()},
        ax.get_xlabel(), ax.get_ylabel())
    assert sorted(labels) == sorted(summary.series)
    plt.close(fig)
    return summary
