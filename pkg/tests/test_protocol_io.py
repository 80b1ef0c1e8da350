import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sasvjoint.protocol_io import (
    CorpusManifest,
    ProtocolError,
    ScoreSet,
    Trial,
    TrialClass,
    UtteranceRecord,
    filter_speakers,
    filter_trials,
    parse_enrolment_file,
    parse_trial_file,
    read_manifest,
    read_scores,
    validate_protocol,
    write_enrolment_file,
    write_manifest,
    write_scores,
    write_trial_file,
)


def write(tmp_path, text, name="f.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


def rec(uid, spk, part="train", attack=None):
    return UtteranceRecord(uid, spk, part, attack is None, attack, 1.5, f"wav/{uid}.wav")


def small_manifest(n_train=20):
    recs = []
    for i in range(n_train):
        recs += [rec(f"T{i:02d}_0", f"T{i:02d}"), rec(f"T{i:02d}_S", f"T{i:02d}", attack="A01")]
    recs += [rec("D0_0", "D0", "dev"), rec("D0_1", "D0", "dev"), rec("D0_S", "D0", "dev", "A01")]
    recs += [rec("E0_0", "E0", "eval"), rec("E0_S", "E0", "eval", "A03")]
    return CorpusManifest({r.utterance_id: r for r in recs})


# -- trial class -------------------------------------------------------------

def test_three_trial_classes():
    assert {c.value for c in TrialClass} == {"target", "nontarget", "spoof"}
    assert TrialClass.TARGET.bonafide_test and TrialClass.NONTARGET.bonafide_test
    assert not TrialClass.SPOOF.bonafide_test


# -- trial files -------------------------------------------------------------

def test_parse_trial_lines(tmp_path):
    p = write(tmp_path, "spkA u001 target\nspkA u017 spoof\n")
    assert parse_trial_file(p) == [Trial("spkA", "u001", TrialClass.TARGET),
                                   Trial("spkA", "u017", TrialClass.SPOOF)]


def test_two_field_line_reports_line_number(tmp_path):
    p = write(tmp_path, "spkA u001\n")
    with pytest.raises(ProtocolError) as e:
        parse_trial_file(p)
    assert e.value.line == 1


def test_unknown_class_names_token(tmp_path):
    p = write(tmp_path, "spkA u001 target\nspkA u002 impostor\n")
    with pytest.raises(ProtocolError, match="impostor") as e:
        parse_trial_file(p)
    assert e.value.line == 2


def test_comments_and_blank_lines_skipped(tmp_path):
    p = write(tmp_path, "# header\n\nspkA u1 nontarget\n")
    assert parse_trial_file(p) == [Trial("spkA", "u1", TrialClass.NONTARGET)]


ident = st.text(alphabet="abcdefXYZ0123_-", min_size=1, max_size=8)
trial_st = st.builds(Trial, ident, ident, st.sampled_from(list(TrialClass)))


@settings(max_examples=100, deadline=None)
@given(st.lists(trial_st, max_size=20))
def test_trial_file_round_trip(tmp_path_factory, trials):
    p = tmp_path_factory.mktemp("rt") / "t.txt"
    write_trial_file(trials, p)
    assert parse_trial_file(p) == trials
    text = p.read_text()
    write_trial_file(parse_trial_file(p), p)
    assert p.read_text() == text


# -- enrolment ---------------------------------------------------------------

def test_parse_enrolment(tmp_path):
    p = write(tmp_path, "spkA u1,u2,u3\nspkB u9\n")
    assert parse_enrolment_file(p) == {"spkA": ["u1", "u2", "u3"], "spkB": ["u9"]}


def test_enrolment_duplicate_speaker(tmp_path):
    with pytest.raises(ProtocolError, match="duplicate speaker"):
        parse_enrolment_file(write(tmp_path, "spkA u1\nspkA u2\n"))


def test_enrolment_empty_list(tmp_path):
    with pytest.raises(ProtocolError, match="empty"):
        parse_enrolment_file(write(tmp_path, "spkA ,\n"))


def test_enrolment_duplicate_utterance(tmp_path):
    with pytest.raises(ProtocolError, match="duplicate utterance"):
        parse_enrolment_file(write(tmp_path, "spkA u1,u1\n"))


def test_enrolment_round_trip(tmp_path):
    enr = {"b": ["x", "y"], "a": ["z"]}
    write_enrolment_file(enr, tmp_path / "e.txt")
    assert parse_enrolment_file(tmp_path / "e.txt") == enr


# -- scores ------------------------------------------------------------------

TRIALS = [Trial("a", "u1", TrialClass.TARGET), Trial("a", "u2", TrialClass.NONTARGET),
          Trial("a", "u3", TrialClass.SPOOF)]


def test_score_round_trip_exact(tmp_path):
    ss = ScoreSet.from_scores(TRIALS, [0.5, -0.25, 1.0])
    write_scores(ss, tmp_path / "s.txt")
    assert len((tmp_path / "s.txt").read_text().splitlines()) == 3
    assert read_scores(tmp_path / "s.txt", TRIALS) == ss


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=3, max_size=3))
def test_score_round_trip_any_float(tmp_path_factory, values):
    p = tmp_path_factory.mktemp("s") / "s.txt"
    write_scores(ScoreSet.from_scores(TRIALS, values), p)
    assert read_scores(p, TRIALS).scores == values


def test_score_count_mismatch(tmp_path):
    with pytest.raises(ProtocolError, match="expected 3 scores, found 2"):
        read_scores(write(tmp_path, "0.1\n0.2\n"), TRIALS)


def test_score_nan(tmp_path):
    with pytest.raises(ProtocolError, match="non-finite"):
        read_scores(write(tmp_path, "0.1\nNaN\n0.3\n"), TRIALS)


def test_scoreset_rejects_non_finite():
    with pytest.raises(ProtocolError):
        ScoreSet.from_scores(TRIALS, [0.0, math.inf, 1.0])


def test_scoreset_preserves_order():
    ss = ScoreSet.from_scores(TRIALS, [3.0, 2.0, 1.0])
    assert ss.trials == TRIALS and ss.scores == [3.0, 2.0, 1.0]
    assert ss.by_class(TrialClass.SPOOF) == [1.0]


# -- manifest ----------------------------------------------------------------

def test_bonafide_iff_no_attack():
    with pytest.raises(ProtocolError):
        UtteranceRecord("u", "s", "train", True, "A01", 1.0, "p")
    with pytest.raises(ProtocolError):
        UtteranceRecord("u", "s", "train", False, None, 1.0, "p")


def test_duration_positive():
    with pytest.raises(ProtocolError):
        UtteranceRecord("u", "s", "train", True, None, 0.0, "p")


def test_speakers_partition_disjoint():
    with pytest.raises(ProtocolError, match="partitions"):
        CorpusManifest({"a": rec("a", "X", "train"), "b": rec("b", "X", "dev")})


def test_manifest_round_trip(tmp_path):
    m = small_manifest(3)
    write_manifest(m, tmp_path / "m.txt")
    assert read_manifest(tmp_path / "m.txt") == m


def test_manifest_missing_key(tmp_path):
    with pytest.raises(ProtocolError, match="missing keys"):
        read_manifest(write(tmp_path, "utt=a speaker=b partition=train bonafide=1 attack=-\n"))


# -- filtering ---------------------------------------------------------------

def test_filter_keeps_exact_train_speakers():
    m = small_manifest(20)
    keep = [f"T{i:02d}" for i in range(8)]
    f = filter_speakers(m, keep)
    assert sorted(f.speakers("train")) == keep
    for part in ("dev", "eval"):
        assert f.records(part) == m.records(part)


def test_filter_all_is_identity_and_idempotent():
    m = small_manifest(5)
    everyone = m.speakers("train")
    assert filter_speakers(m, everyone) == m
    once = filter_speakers(m, everyone[:2])
    assert filter_speakers(once, everyone[:2]) == once


def test_filter_unknown_speaker():
    with pytest.raises(ProtocolError, match="spkZZ"):
        filter_speakers(small_manifest(3), {"T00", "spkZZ"})


def test_filter_empty_keep():
    with pytest.raises(ProtocolError):
        filter_speakers(small_manifest(3), [])


def test_filter_trials_drops_removed_speakers():
    m = filter_speakers(small_manifest(3), ["T00"])
    trials = [Trial("T00", "T00_0", TrialClass.TARGET), Trial("T01", "T01_0", TrialClass.TARGET),
              Trial("T00", "T01_0", TrialClass.NONTARGET)]
    assert filter_trials(trials, m) == trials[:1]


# -- validation --------------------------------------------------------------

def test_validate_accepts_consistent():
    m = small_manifest(1)
    trials = [Trial("D0", "D0_1", TrialClass.TARGET), Trial("D0", "D0_S", TrialClass.SPOOF)]
    validate_protocol(trials, {"D0": ["D0_0"]}, m)


def test_validate_unenrolled_speaker():
    with pytest.raises(ProtocolError, match="no enrolment"):
        validate_protocol([Trial("D9", "D0_1", TrialClass.TARGET)], {"D0": ["D0_0"]})


def test_validate_class_mismatch():
    m = small_manifest(1)
    with pytest.raises(ProtocolError, match="inconsistent"):
        validate_protocol([Trial("D0", "D0_S", TrialClass.TARGET)], {"D0": ["D0_0"]}, m)


def test_validate_spoofed_enrolment():
    m = small_manifest(1)
    with pytest.raises(ProtocolError, match="not bona fide"):
        validate_protocol([], {"D0": ["D0_S"]}, m)


def test_generated_corpus_protocols_valid(tiny_corpus):
    for part in ("dev", "eval"):
        validate_protocol(tiny_corpus.trials(part), tiny_corpus.enrolment(part), tiny_corpus.manifest)
    validate_protocol(tiny_corpus.trials("train"), tiny_corpus.enrolment("train"), tiny_corpus.manifest)
