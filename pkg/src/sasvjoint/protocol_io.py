"""Trial protocols, enrolment maps, corpus manifests and score files.

File layouts (UTF-8, LF, ``#`` comment lines and blank lines skipped):

trial file
    ``<speaker_id> <utterance_id> <target|nontarget|spoof>``
enrolment file
    ``<speaker_id> <utt_id>[,<utt_id>]*``
score file
    one finite decimal per line, aligned with the trial file
manifest
    one utterance per line as ``key=value`` tokens; required keys are
    ``utt speaker partition bonafide attack duration path``, anything else is
    kept verbatim in :attr:`UtteranceRecord.meta`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

PARTITIONS = ("train", "dev", "eval")


class ProtocolError(ValueError):
    """Malformed protocol, enrolment, manifest or score content."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class TrialClass(str, enum.Enum):
    TARGET = "target"
    NONTARGET = "nontarget"
    SPOOF = "spoof"

    @property
    def bonafide_test(self) -> bool:
        return self is not TrialClass.SPOOF


@dataclass(frozen=True)
class Trial:
    enrol_speaker_id: str
    test_utterance_id: str
    trial_class: TrialClass

    def to_line(self) -> str:
        return f"{self.enrol_speaker_id} {self.test_utterance_id} {self.trial_class.value}"


@dataclass(frozen=True)
class ScoreSet:
    entries: tuple  # of (Trial, float)
    partition: str = "dev"

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((t, float(s)) for t, s in self.entries))
        for t, s in self.entries:
            if not math.isfinite(s):
                raise ProtocolError(f"non-finite score {s!r} for trial {t.to_line()!r}")

    @classmethod
    def from_scores(cls, trials: Sequence[Trial], scores: Iterable[float], partition: str = "dev"):
        scores = list(scores)
        if len(scores) != len(trials):
            raise ProtocolError(f"expected {len(trials)} scores, found {len(scores)}")
        return cls(tuple(zip(trials, scores)), partition)

    @property
    def trials(self) -> list[Trial]:
        return [t for t, _ in self.entries]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.entries]

    def by_class(self, trial_class: TrialClass) -> list[float]:
        return [s for t, s in self.entries if t.trial_class is trial_class]

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    partition: str
    is_bonafide: bool
    attack_id: str | None
    duration_s: float
    path: str
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.partition not in PARTITIONS:
            raise ProtocolError(f"utterance {self.utterance_id}: unknown partition {self.partition!r}")
        if self.is_bonafide == (self.attack_id is not None):
            raise ProtocolError(
                f"utterance {self.utterance_id}: is_bonafide={self.is_bonafide} "
                f"inconsistent with attack_id={self.attack_id!r}"
            )
        if not self.duration_s > 0:
            raise ProtocolError(f"utterance {self.utterance_id}: duration must be > 0")


@dataclass(frozen=True)
class CorpusManifest:
    """Utterance metadata for a corpus, keyed by utterance id (insertion ordered)."""

    utterances: Mapping[str, UtteranceRecord]

    def __post_init__(self):
        owner: dict[str, str] = {}
        for rec in self.utterances.values():
            prev = owner.setdefault(rec.speaker_id, rec.partition)
            if prev != rec.partition:
                raise ProtocolError(
                    f"speaker {rec.speaker_id} appears in partitions {prev} and {rec.partition}"
                )

    def __getitem__(self, utt_id: str) -> UtteranceRecord:
        return self.utterances[utt_id]

    def __contains__(self, utt_id) -> bool:
        return utt_id in self.utterances

    def __len__(self):
        return len(self.utterances)

    def records(self, partition: str | None = None, bonafide: bool | None = None) -> list[UtteranceRecord]:
        out = []
        for rec in self.utterances.values():
            if partition is not None and rec.partition != partition:
                continue
            if bonafide is not None and rec.is_bonafide != bonafide:
                continue
            out.append(rec)
        return out

    def speakers(self, partition: str) -> list[str]:
        seen = dict.fromkeys(r.speaker_id for r in self.records(partition))
        return list(seen)

    def attacks(self, partition: str) -> set[str]:
        return {r.attack_id for r in self.records(partition, bonafide=False)}

    def bonafide_by_speaker(self, partition: str) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for r in self.records(partition, bonafide=True):
            out.setdefault(r.speaker_id, []).append(r.utterance_id)
        return out


def _content_lines(path) -> Iterator[tuple[int, str]]:
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield lineno, line


# -- trials ------------------------------------------------------------------


def parse_trial_line(line: str, lineno: int | None = None, path=None) -> Trial:
    fields = line.split()
    if len(fields) != 3:
        raise ProtocolError(f"expected 3 fields, got {len(fields)}", path, lineno)
    spk, utt, cls = fields
    try:
        trial_class = TrialClass(cls)
    except ValueError:
        raise ProtocolError(f"unknown trial class {cls!r}", path, lineno) from None
    return Trial(spk, utt, trial_class)


def parse_trial_file(path) -> list[Trial]:
    return [parse_trial_line(line, n, path) for n, line in _content_lines(path)]


def write_trial_file(trials: Iterable[Trial], path) -> None:
    Path(path).write_text("".join(t.to_line() + "\n" for t in trials), encoding="utf-8")


# -- enrolment ---------------------------------------------------------------


def parse_enrolment_file(path) -> dict[str, list[str]]:
    enrol: dict[str, list[str]] = {}
    for n, line in _content_lines(path):
        fields = line.split()
        if len(fields) != 2:
            raise ProtocolError(f"expected '<speaker> <utt,...>', got {len(fields)} fields", path, n)
        spk, joined = fields
        utts = [u for u in joined.split(",") if u]
        if not utts:
            raise ProtocolError(f"speaker {spk} has an empty utterance list", path, n)
        if spk in enrol:
            raise ProtocolError(f"duplicate speaker {spk}", path, n)
        if len(set(utts)) != len(utts):
            raise ProtocolError(f"duplicate utterance id in enrolment list of {spk}", path, n)
        enrol[spk] = utts
    return enrol


def write_enrolment_file(enrolment: Mapping[str, Sequence[str]], path) -> None:
    lines = [f"{spk} {','.join(utts)}\n" for spk, utts in enrolment.items()]
    Path(path).write_text("".join(lines), encoding="utf-8")


def validate_protocol(
    trials: Sequence[Trial],
    enrolment: Mapping[str, Sequence[str]],
    manifest: CorpusManifest | None = None,
) -> None:
    """Check speakers resolve in ``enrolment`` and, given a manifest, that test
    utterances exist with a bona fide flag matching their trial class."""
    for i, t in enumerate(trials, start=1):
        if t.enrol_speaker_id not in enrolment:
            raise ProtocolError(f"speaker {t.enrol_speaker_id} has no enrolment", line=i)
        if manifest is None:
            continue
        if t.test_utterance_id not in manifest:
            raise ProtocolError(f"unknown test utterance {t.test_utterance_id}", line=i)
        if manifest[t.test_utterance_id].is_bonafide != t.trial_class.bonafide_test:
            raise ProtocolError(
                f"trial class {t.trial_class.value} inconsistent with utterance "
                f"{t.test_utterance_id}",
                line=i,
            )
    if manifest is not None:
        for spk, utts in enrolment.items():
            for u in utts:
                if u not in manifest or not manifest[u].is_bonafide:
                    raise ProtocolError(f"enrolment utterance {u} of {spk} is not bona fide")


# -- scores ------------------------------------------------------------------


def format_score(score: float) -> str:
    return format(float(score), ".17g")


def write_scores(score_set: ScoreSet, path) -> None:
    Path(path).write_text("".join(format_score(s) + "\n" for s in score_set.scores), encoding="utf-8")


def read_scores(path, trials: Sequence[Trial], partition: str = "dev") -> ScoreSet:
    lines = list(_content_lines(path))
    if len(lines) != len(trials):
        raise ProtocolError(f"expected {len(trials)} scores, found {len(lines)}", path)
    scores = []
    for n, line in lines:
        try:
            s = float(line)
        except ValueError:
            raise ProtocolError(f"not a number: {line!r}", path, n) from None
        if not math.isfinite(s):
            raise ProtocolError(f"non-finite score {line!r}", path, n)
        scores.append(s)
    return ScoreSet.from_scores(trials, scores, partition)


# -- manifest ----------------------------------------------------------------

_REQUIRED = ("utt", "speaker", "partition", "bonafide", "attack", "duration", "path")


def record_to_line(rec: UtteranceRecord) -> str:
    parts = [
        f"utt={rec.utterance_id}",
        f"speaker={rec.speaker_id}",
        f"partition={rec.partition}",
        f"bonafide={int(rec.is_bonafide)}",
        f"attack={rec.attack_id or '-'}",
        f"duration={rec.duration_s!r}",
        f"path={rec.path}",
    ]
    parts += [f"{k}={v}" for k, v in sorted(rec.meta.items())]
    return " ".join(parts)


def write_manifest(manifest: CorpusManifest, path) -> None:
    body = "".join(record_to_line(r) + "\n" for r in manifest.utterances.values())
    Path(path).write_text("# sasvjoint corpus manifest\n" + body, encoding="utf-8")


def read_manifest(path) -> CorpusManifest:
    records: dict[str, UtteranceRecord] = {}
    for n, line in _content_lines(path):
        kv = {}
        for tok in line.split():
            key, sep, value = tok.partition("=")
            if not sep:
                raise ProtocolError(f"token {tok!r} is not key=value", path, n)
            kv[key] = value
        missing = [k for k in _REQUIRED if k not in kv]
        if missing:
            raise ProtocolError(f"missing keys {missing}", path, n)
        if kv["bonafide"] not in ("0", "1"):
            raise ProtocolError(f"bonafide must be 0 or 1, got {kv['bonafide']!r}", path, n)
        try:
            rec = UtteranceRecord(
                utterance_id=kv["utt"],
                speaker_id=kv["speaker"],
                partition=kv["partition"],
                is_bonafide=kv["bonafide"] == "1",
                attack_id=None if kv["attack"] == "-" else kv["attack"],
                duration_s=float(kv["duration"]),
                path=kv["path"],
                meta={k: v for k, v in kv.items() if k not in _REQUIRED},
            )
        except ProtocolError as exc:
            raise ProtocolError(str(exc), path, n) from None
        if rec.utterance_id in records:
            raise ProtocolError(f"duplicate utterance {rec.utterance_id}", path, n)
        records[rec.utterance_id] = rec
    return CorpusManifest(records)


def filter_speakers(manifest: CorpusManifest, keep: Iterable[str]) -> CorpusManifest:
    """Restrict the train partition to ``keep``; dev and eval pass through."""
    keep = set(keep)
    if not keep:
        raise ProtocolError("keep must name at least one speaker")
    unknown = keep - set(manifest.speakers("train"))
    if unknown:
        raise ProtocolError(f"speakers not in train partition: {sorted(unknown)}")
    kept = {
        uid: rec
        for uid, rec in manifest.utterances.items()
        if rec.partition != "train" or rec.speaker_id in keep
    }
    return replace(manifest, utterances=kept)


def filter_trials(trials: Sequence[Trial], manifest: CorpusManifest) -> list[Trial]:
    """Drop trials whose speaker or test utterance is absent from ``manifest``."""
    speakers = {r.speaker_id for r in manifest.utterances.values()}
    return [t for t in trials if t.enrol_speaker_id in speakers and t.test_utterance_id in manifest]


class Corpus:
    """A generated corpus directory: manifest, protocols, enrolment and audio.

    Audio is loaded lazily and cached as float32.
    """

    def __init__(self, root, manifest: CorpusManifest | None = None):
        self.root = Path(root)
        if not (self.root / "manifest.txt").exists():
            raise FileNotFoundError(f"{self.root}: no manifest.txt")
        self.manifest = manifest if manifest is not None else read_manifest(self.root / "manifest.txt")
        self._audio: dict = {}
        self._trials: dict = {}

    def audio(self, utt_id: str):
        if utt_id not in self._audio:
            from .audio_frontend import read_wav

            self._audio[utt_id] = read_wav(self.root / self.manifest[utt_id].path)
        return self._audio[utt_id]

    def trials(self, partition: str) -> list[Trial]:
        if partition not in self._trials:
            trials = parse_trial_file(self.root / "protocols" / f"{partition}.txt")
            self._trials[partition] = filter_trials(trials, self.manifest)
        return self._trials[partition]

    def enrolment(self, partition: str) -> dict[str, list[str]]:
        if partition == "train":
            return self.manifest.bonafide_by_speaker("train")
        return parse_enrolment_file(self.root / "enrolment" / f"{partition}.txt")

    def restrict(self, manifest: CorpusManifest) -> "Corpus":
        """Same directory viewed through a filtered manifest; shares the audio cache."""
        other = Corpus(self.root, manifest)
        other._audio = self._audio
        return other
