"""Deterministic toy corpus: source-filter speakers, spoofing attacks and
SASV protocols.

Each speaker is a glottal-like harmonic source (f0 with vibrato and jitter)
plus aspiration noise, shaped by three cascaded resonators, with a
high-band frication component. Attacks map a different speaker's speech
toward the target's spectral envelope and leave recipe-specific artefacts
plus a common band limitation.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from . import audio_frontend as af
from .protocol_io import (
    CorpusManifest,
    Trial,
    TrialClass,
    UtteranceRecord,
    write_enrolment_file,
    write_manifest,
    write_trial_file,
)

SR = af.SAMPLE_RATE
PEAK = 0.9
RECIPES = ("resonance_shift", "harmonic_resynthesis", "envelope_smoothing")

STFT_NFFT = 1024
STFT_HOP = 256
LIFTER = 45


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    f0: float
    resonances: tuple  # 3 centre frequencies, Hz
    bandwidths: tuple  # Hz
    am_rate: float  # syllable-like amplitude modulation, Hz
    am_depth: float
    breathiness: float
    seed: int

    def vector(self) -> np.ndarray:
        """Log-parameters used for the inter-speaker gap."""
        return np.log([self.f0, *self.resonances])


@dataclass(frozen=True)
class AttackProfile:
    attack_id: str
    recipe: str
    strength: float = 1.0

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ValueError(f"unknown attack recipe {self.recipe!r}")
        if not 0 <= self.strength <= 1:
            raise ValueError("attack strength must be in [0, 1]")


@dataclass
class CorpusConfig:
    n_speakers: int = 20  # train speakers; dev and eval get half each
    utts_per_speaker: int = 10
    n_attacks: int = 4
    seed: int = 0
    n_dev_speakers: int | None = None
    n_eval_speakers: int | None = None
    n_enrol: int = 4
    nontarget_per_speaker: int = 10
    spoofs_per_speaker: int | None = None  # defaults to utts_per_speaker
    min_gap: float = 0.1
    utt_jitter: float = 0.015
    duration_range: tuple = (3.5, 5.0)
    attack_strength: float = 1.0

    def __post_init__(self):
        if self.n_speakers < 4:
            raise ValueError(f"n_speakers must be >= 4, got {self.n_speakers}")
        if self.utts_per_speaker < 4:
            raise ValueError(f"utts_per_speaker must be >= 4, got {self.utts_per_speaker}")
        if self.n_attacks < 2:
            raise ValueError(f"need at least 2 attacks, got {self.n_attacks}")
        if not 1 <= self.n_enrol < self.utts_per_speaker:
            raise ValueError("n_enrol must leave at least one test utterance per speaker")

    @property
    def partition_sizes(self) -> dict[str, int]:
        half = max(2, self.n_speakers // 2)
        return {
            "train": self.n_speakers,
            "dev": self.n_dev_speakers or half,
            "eval": self.n_eval_speakers or half,
        }

    @property
    def n_spoofs(self) -> int:
        return self.spoofs_per_speaker or self.utts_per_speaker

    def attacks(self) -> list[AttackProfile]:
        return [
            AttackProfile(f"A{i + 1:02d}", RECIPES[i % len(RECIPES)], self.attack_strength)
            for i in range(self.n_attacks)
        ]

    def visible_attacks(self) -> list[AttackProfile]:
        """Attacks present in train and dev; the rest appear only in eval."""
        atk = self.attacks()
        return atk[: max(1, len(atk) // 2)]


def utterance_rng(seed: int, key: str) -> np.random.Generator:
    """Generator determined by (seed, key) only, independent of call order."""
    return np.random.default_rng([int(seed), zlib.crc32(key.encode("utf-8"))])


# -- speakers ----------------------------------------------------------------


def _draw_profile(speaker_id: str, rng) -> SpeakerProfile:
    f0 = float(np.exp(rng.uniform(np.log(85), np.log(280))))
    res = (rng.uniform(300, 800), rng.uniform(1100, 2200), rng.uniform(2600, 3600))
    bw = (rng.uniform(60, 110), rng.uniform(80, 140), rng.uniform(100, 180))
    return SpeakerProfile(
        speaker_id=speaker_id,
        f0=f0,
        resonances=tuple(float(r) for r in res),
        bandwidths=tuple(float(b) for b in bw),
        am_rate=float(rng.uniform(3.0, 6.0)),
        am_depth=float(rng.uniform(0.3, 0.6)),
        breathiness=float(rng.uniform(0.02, 0.06)),
        seed=int(rng.integers(2**31)),
    )


def make_speakers(ids: list[str], seed: int, min_gap: float) -> list[SpeakerProfile]:
    """Rejection-sample profiles whose log-parameter vectors differ by at least
    ``min_gap`` (max-abs) from every earlier profile."""
    rng = utterance_rng(seed, "speakers")
    out: list[SpeakerProfile] = []
    for sid in ids:
        for _ in range(10000):
            p = _draw_profile(sid, rng)
            if all(np.max(np.abs(p.vector() - q.vector())) >= min_gap for q in out):
                out.append(p)
                break
        else:
            raise ValueError("could not place speaker profiles with the requested gap")
    return out


def jitter_profile(profile: SpeakerProfile, amount: float, rng) -> SpeakerProfile:
    """Per-utterance variant: f0 and resonances scaled by exp(U(-amount, amount))."""
    f = np.exp(rng.uniform(-amount, amount, size=4))
    return SpeakerProfile(
        profile.speaker_id,
        profile.f0 * f[0],
        tuple(r * k for r, k in zip(profile.resonances, f[1:])),
        profile.bandwidths,
        profile.am_rate,
        profile.am_depth,
        profile.breathiness,
        profile.seed,
    )


# -- synthesis ---------------------------------------------------------------


def resonator_coeffs(freq: float, bw: float):
    c = -np.exp(-2 * np.pi * bw / SR)
    b = 2 * np.exp(-np.pi * bw / SR) * np.cos(2 * np.pi * freq / SR)
    a = 1 - b - c
    return np.array([a]), np.array([1.0, -b, -c])


def resonator_response(profile: SpeakerProfile, freqs) -> np.ndarray:
    """Magnitude response of the profile's resonator cascade at ``freqs`` Hz."""
    h = np.ones(len(freqs), dtype=complex)
    for f, bw in zip(profile.resonances, profile.bandwidths):
        num, den = resonator_coeffs(f, bw)
        _, hk = signal.freqz(num, den, worN=np.asarray(freqs, dtype=float), fs=SR)
        h *= hk
    return np.abs(h)


def _harmonics(f0_track, max_freq: float = 7600.0) -> np.ndarray:
    """Equal-amplitude harmonic sum, sum_k sin(k * phase), in closed form."""
    phase = np.mod(2 * np.pi * np.cumsum(f0_track) / SR, 2 * np.pi)
    k = max(1, int(max_freq // np.max(f0_track)))
    den = np.sin(phase / 2)
    safe = np.where(np.abs(den) < 1e-9, 1.0, den)
    out = np.sin(k * phase / 2) * np.sin((k + 1) * phase / 2) / safe
    return np.where(np.abs(den) < 1e-9, 0.0, out)


def _smooth_noise(n: int, rng, cutoff_hz: float) -> np.ndarray:
    sos = signal.butter(2, cutoff_hz, fs=SR, output="sos")
    x = signal.sosfilt(sos, rng.standard_normal(n))
    return x / (np.std(x) + 1e-12)


def _peak_normalise(x) -> np.ndarray:
    return PEAK * x / np.max(np.abs(x))


def synth_utterance(profile: SpeakerProfile, duration_s: float, rng) -> np.ndarray:
    if duration_s < 0.5:
        raise ValueError("duration must be >= 0.5 s")
    n = int(round(duration_s * SR))
    t = np.arange(n) / SR
    vibrato = 1 + 0.04 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 2 * np.pi))
    jitter = 1 + 0.005 * _smooth_noise(n, rng, 30.0)
    source = signal.lfilter([1.0], [1.0, -0.97], _harmonics(profile.f0 * vibrato * jitter))
    source /= np.std(source)
    excitation = source + profile.breathiness * 4 * rng.standard_normal(n)
    voiced = excitation
    for f, bw in zip(profile.resonances, profile.bandwidths):
        num, den = resonator_coeffs(f, bw)
        voiced = signal.lfilter(num, den, voiced)
    hp = signal.butter(4, 4000, btype="highpass", fs=SR, output="sos")
    frication = signal.sosfilt(hp, rng.standard_normal(n))
    voiced /= np.std(voiced)
    x = voiced + profile.breathiness * frication
    am = 1 - profile.am_depth * 0.5 * (1 + np.sin(2 * np.pi * profile.am_rate * t + rng.uniform(0, 2 * np.pi)))
    return _peak_normalise(x * am)


# -- attacks -----------------------------------------------------------------


def _stft(x):
    _, _, z = signal.stft(x, fs=SR, nperseg=STFT_NFFT, noverlap=STFT_NFFT - STFT_HOP, boundary="even")
    return z


def _istft(z, n):
    _, x = signal.istft(z, fs=SR, nperseg=STFT_NFFT, noverlap=STFT_NFFT - STFT_HOP, boundary=True)
    return pad_to(x, n)


def pad_to(x, n):
    return x[:n] if len(x) >= n else np.pad(x, (0, n - len(x)))


def cepstral_envelope(logmag, lifter: int = LIFTER) -> np.ndarray:
    """Smooth log-magnitude spectra along frequency (axis 0) by liftering."""
    full = np.concatenate([logmag, logmag[-2:0:-1]], axis=0)
    cep = np.fft.ifft(full, axis=0).real
    cep[lifter + 1:-lifter] = 0
    return np.fft.fft(cep, axis=0).real[: logmag.shape[0]]


def mean_envelope(x) -> np.ndarray:
    """Long-term envelope; the lifter tracks the median pitch period."""
    mag = np.abs(_stft(x))
    energy = (mag**2).sum(axis=0)
    keep = energy > 0.05 * energy.max()
    lifter = int(0.7 * SR / np.median(_estimate_f0(x)))
    return cepstral_envelope(np.log(mag[:, keep] + 1e-8), lifter).mean(axis=1)


def _estimate_f0(x, frame: int = 640, hop: int = STFT_HOP, lo: float = 70.0, hi: float = 400.0):
    """Frame-wise autocorrelation pitch; silent frames take the median."""
    lags = np.arange(int(SR / hi), int(SR / lo) + 1)
    if len(x) < frame:
        x = np.pad(x, (0, frame - len(x)))
    frames = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop]
    frames = frames - frames.mean(axis=1, keepdims=True)
    spec = np.fft.rfft(frames, n=2 * frame)
    ac = np.fft.irfft(spec.real**2 + spec.imag**2, axis=1)
    f0 = SR / lags[np.argmax(ac[:, lags], axis=1)]
    voiced = ac[:, 0] > 1e-3 * ac[:, 0].max()
    if not voiced.any():
        return np.full(len(f0), 120.0)
    return np.where(voiced, f0, np.median(f0[voiced]))


def _semitone_quantise(f0):
    return 440.0 * 2 ** (np.round(12 * np.log2(f0 / 440.0)) / 12)


def apply_attack(wave, attack: AttackProfile, target: SpeakerProfile, rng) -> np.ndarray:
    """Convert ``wave`` toward ``target``; output length equals input length."""
    x = np.asarray(wave, dtype=np.float64)
    n = len(x)
    s = attack.strength
    if s == 0:
        return x.copy()
    reference = synth_utterance(target, 1.5, rng)
    shift = s * (mean_envelope(reference) - mean_envelope(x))  # per-bin log gain

    z = _stft(x)
    mag, phase = np.abs(z), np.angle(z)
    if attack.recipe == "resonance_shift":
        phase = phase + s * 0.5 * np.pi * rng.uniform(-1, 1, size=phase.shape)
        y = _istft(mag * np.exp(shift)[:, None] * np.exp(1j * phase), n)
    elif attack.recipe == "harmonic_resynthesis":
        f0 = _estimate_f0(x)
        f0_target = f0 * (target.f0 / np.median(f0)) ** s
        f0_new = np.exp((1 - s) * np.log(f0) + s * np.log(_semitone_quantise(f0_target)))
        track = np.interp(np.arange(n), np.arange(len(f0_new)) * STFT_HOP, f0_new)
        excitation = _harmonics(track)
        ze = _stft(excitation)
        env = cepstral_envelope(np.log(mag + 1e-8)) + shift[:, None]
        flat = cepstral_envelope(np.log(np.abs(ze) + 1e-8))
        resynth = _istft(ze * np.exp(env - flat), n)
        resynth *= np.std(x) / (np.std(resynth) + 1e-12)
        y = (1 - s) * x + s * resynth
    else:  # envelope_smoothing
        logmag = np.log(mag + 1e-8)
        env = cepstral_envelope(logmag)
        coarse = cepstral_envelope(logmag, lifter=15)
        k = 9
        coarse = signal.convolve2d(coarse, np.ones((1, k)) / k, mode="same", boundary="symm")
        new_env = (1 - s) * env + s * coarse + shift[:, None]
        y = _istft(np.exp(logmag - env + new_env) * np.exp(1j * phase), n)

    cutoff = 8000 - 2500 * s
    if cutoff < 7900:
        y = signal.sosfiltfilt(signal.butter(8, cutoff, fs=SR, output="sos"), y)
    return _peak_normalise(y)


# -- corpus ------------------------------------------------------------------

_PREFIX = {"train": "T", "dev": "D", "eval": "E"}


def _speaker_ids(cfg: CorpusConfig) -> dict[str, list[str]]:
    return {p: [f"{_PREFIX[p]}{i:03d}" for i in range(k)] for p, k in cfg.partition_sizes.items()}


def _plan(cfg: CorpusConfig):
    """Utterance plan and protocols, without rendering audio."""
    ids = _speaker_ids(cfg)
    all_ids = [s for p in ("train", "dev", "eval") for s in ids[p]]
    profiles = {p.speaker_id: p for p in make_speakers(all_ids, cfg.seed, cfg.min_gap)}
    visible = cfg.visible_attacks()
    attacks = cfg.attacks()
    plan = []  # (utt_id, speaker, partition, attack or None, source speaker, duration)
    trials: dict[str, list[Trial]] = {}
    enrolment: dict[str, dict[str, list[str]]] = {}
    for part in ("train", "dev", "eval"):
        rng = utterance_rng(cfg.seed, f"plan/{part}")
        spks = ids[part]
        pool = visible if part != "eval" else attacks
        bona: dict[str, list[str]] = {}
        spoof: dict[str, list[str]] = {}
        for si, spk in enumerate(spks):
            bona[spk] = []
            for k in range(cfg.utts_per_speaker):
                uid = f"{spk}_{k:03d}"
                plan.append((uid, spk, part, None, None, float(rng.uniform(*cfg.duration_range))))
                bona[spk].append(uid)
            spoof[spk] = []
            for k in range(cfg.n_spoofs):
                uid = f"{spk}_S{k:03d}"
                atk = pool[(si + k) % len(pool)]
                others = [o for o in spks if o != spk]
                src = others[int(rng.integers(len(others)))]
                plan.append((uid, spk, part, atk, src, float(rng.uniform(*cfg.duration_range))))
                spoof[spk].append(uid)

        part_trials = []
        if part == "train":
            test_bona = bona
        else:
            enrolment[part] = {spk: bona[spk][: cfg.n_enrol] for spk in spks}
            test_bona = {spk: bona[spk][cfg.n_enrol:] for spk in spks}
        for spk in spks:
            part_trials += [Trial(spk, u, TrialClass.TARGET) for u in test_bona[spk]]
            others = [u for o in spks if o != spk for u in test_bona[o]]
            pick = rng.choice(len(others), size=min(cfg.nontarget_per_speaker, len(others)), replace=False)
            part_trials += [Trial(spk, others[i], TrialClass.NONTARGET) for i in sorted(pick)]
            part_trials += [Trial(spk, u, TrialClass.SPOOF) for u in spoof[spk]]
        trials[part] = part_trials
    return profiles, plan, trials, enrolment


def render_utterance(cfg: CorpusConfig, profiles, uid, spk, attack, src, duration) -> tuple[np.ndarray, SpeakerProfile]:
    rng = utterance_rng(cfg.seed, uid)
    if attack is None:
        prof = jitter_profile(profiles[spk], cfg.utt_jitter, rng)
        return synth_utterance(prof, duration, rng), prof
    prof = jitter_profile(profiles[src], cfg.utt_jitter, rng)
    source = synth_utterance(prof, duration, rng)
    return apply_attack(source, attack, profiles[spk], rng), prof


def generate_corpus(cfg: CorpusConfig, out_dir, overwrite: bool = False) -> CorpusManifest:
    """Render the corpus tree under ``out_dir``:
    ``wav/``, ``manifest.txt``, ``protocols/{train,dev,eval}.txt``,
    ``enrolment/{dev,eval}.txt``, ``speakers.json`` and ``corpus.json``."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} exists and is not empty (use overwrite)")
        shutil.rmtree(out)
    (out / "wav").mkdir(parents=True)
    (out / "protocols").mkdir()
    (out / "enrolment").mkdir()

    profiles, plan, trials, enrolment = _plan(cfg)
    records = {}
    for uid, spk, part, attack, src, duration in plan:
        wave, prof = render_utterance(cfg, profiles, uid, spk, attack, src, duration)
        rel = f"wav/{uid}.wav"
        af.write_wav(out / rel, wave)
        meta = {
            "f0": f"{prof.f0:.3f}",
            "res": ",".join(f"{r:.3f}" for r in prof.resonances),
        }
        if attack is not None:
            meta["source"] = src
            meta["recipe"] = attack.recipe
        records[uid] = UtteranceRecord(uid, spk, part, attack is None,
                                       None if attack is None else attack.attack_id,
                                       round(len(wave) / SR, 6), rel, meta)
    manifest = CorpusManifest(records)
    write_manifest(manifest, out / "manifest.txt")
    for part, tr in trials.items():
        write_trial_file(tr, out / "protocols" / f"{part}.txt")
    for part, enr in enrolment.items():
        write_enrolment_file(enr, out / "enrolment" / f"{part}.txt")
    (out / "speakers.json").write_text(
        json.dumps([asdict(p) for p in profiles.values()], indent=1, sort_keys=True) + "\n")
    cfg_dict = asdict(cfg)
    cfg_dict["attacks"] = [asdict(a) for a in cfg.attacks()]
    cfg_dict["visible_attacks"] = [a.attack_id for a in cfg.visible_attacks()]
    (out / "corpus.json").write_text(json.dumps(cfg_dict, indent=1, sort_keys=True) + "\n")
    return manifest


def tree_digest(root) -> str:
    """SHA-256 over relative paths and contents of every file under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def load_profiles(root) -> dict[str, SpeakerProfile]:
    data = json.loads((Path(root) / "speakers.json").read_text())
    return {d["speaker_id"]: SpeakerProfile(**{**d, "resonances": tuple(d["resonances"]),
                                              "bandwidths": tuple(d["bandwidths"])}) for d in data}


def summarise(manifest: CorpusManifest) -> dict[str, dict[str, int]]:
    out = {}
    for part in ("train", "dev", "eval"):
        recs = manifest.records(part)
        out[part] = {
            "speakers": len(manifest.speakers(part)),
            "utterances": len(recs),
            "bonafide": sum(r.is_bonafide for r in recs),
            "spoof": sum(not r.is_bonafide for r in recs),
            "attacks": len(manifest.attacks(part)),
        }
    return out
