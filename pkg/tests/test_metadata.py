import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dicomce.errors import TableFormatError, UnknownStudyDescription, UnrecognizedTransducer
from dicomce.metadata import (
    StudyDescriptionTable,
    StudyGroup,
    TransducerClass,
    WeakLabel,
    audit_manifest,
    build_manifest,
    categorize_study_description,
    encode_label,
    load_default_table,
    parse_transducer,
    read_manifest,
    write_manifest,
)
from tests.golden import APPENDIX_ROWS

C, L = TransducerClass.CURVILINEAR, TransducerClass.LINEAR


@pytest.fixture(scope="module")
def table():
    return load_default_table()


def test_table_size_matches_appendix(table):
    assert len(table) == len(APPENDIX_ROWS) == 44


@pytest.mark.parametrize("desc,groups", APPENDIX_ROWS, ids=[r[0] for r in APPENDIX_ROWS])
def test_every_appendix_row(table, desc, groups):
    assert categorize_study_description(desc, table) == {StudyGroup(g) for g in groups}


def test_whitespace_normalization(table):
    assert categorize_study_description("  US   BIOPSY LIVER\tNONFOCAL ", table) == {
        StudyGroup.LIVER,
        StudyGroup.ABDOMEN,
    }


def test_lookup_is_case_sensitive(table):
    with pytest.raises(UnknownStudyDescription):
        categorize_study_description("us biopsy liver nonfocal", table)


def test_unknown_description_lenient(table, caplog):
    assert categorize_study_description("US KNEE", table, strict=False) == frozenset()
    assert "US KNEE" in caplog.text


def test_suspicious_row_kept_verbatim(table):
    # kidney biopsy mapped to liver in the published table
    assert table["US BIOPSY KIDNEY FOCAL (LEFT)"] == {StudyGroup.LIVER, StudyGroup.ABDOMEN}


def test_table_text_roundtrip(table):
    again = StudyDescriptionTable.from_text(table.to_text())
    assert dict(again) == dict(table)


@pytest.mark.parametrize(
    "text",
    ["A\tliver\nA\tkidney\n", "A\t\n", "A\tspleen\n", "no tab here\n"],
)
def test_table_rejects_malformed(text):
    with pytest.raises(TableFormatError):
        StudyDescriptionTable.from_text(text)


@pytest.mark.parametrize(
    "raw,expected",
    [("SC6-1", C), ("SL10-2", L), ("SL15-4", L), (" SC6-1 ", C), ("SC3-12", C)],
)
def test_parse_transducer(raw, expected):
    assert parse_transducer(raw) is expected


@pytest.mark.parametrize("raw", ["XP5", "", "   ", "S6-1", "SX6-1", "sc6-1", "SC6", "C6-1"])
def test_parse_transducer_rejects(raw):
    with pytest.raises(UnrecognizedTransducer):
        parse_transducer(raw)


@given(st.text(alphabet="SABDEFGHIJKMNOPQRTUVWXYZ0123456789- ", max_size=12))
def test_parse_transducer_needs_geometry_letter(raw):
    # no C or L in the alphabet, so nothing may parse
    with pytest.raises(UnrecognizedTransducer):
        parse_transducer(raw)


def test_encode_label_examples():
    assert encode_label(C, {StudyGroup.LIVER, StudyGroup.ABDOMEN}).encoded == (1, 0, 1, 0, 0, 1, 0, 0, 0, 0)
    assert encode_label(L, set()).encoded == (0, 1, 0, 0, 0, 0, 0, 0, 0, 0)
    assert encode_label(C, set(StudyGroup)).encoded == (1, 0, 1, 1, 1, 1, 1, 1, 1, 1)


def test_encode_label_injective():
    seen = {}
    groups = list(StudyGroup)
    for t in TransducerClass:
        for r in range(len(groups) + 1):
            for combo in itertools.combinations(groups, r):
                enc = encode_label(t, combo).encoded
                assert len(enc) == 10 and set(enc) <= {0, 1}
                assert enc not in seen
                seen[enc] = (t, frozenset(combo))
    assert len(seen) == 2 * 2**8


def test_weak_label_roundtrip():
    lab = encode_label(L, {StudyGroup.THYROID, StudyGroup.NODULE})
    again = WeakLabel.from_encoded(lab.encoded)
    assert again == lab
    assert again.transducer is L
    assert again.groups == {StudyGroup.THYROID, StudyGroup.NODULE}


def test_weak_label_validation():
    with pytest.raises(ValueError):
        WeakLabel((1, 1), (0,) * 8)
    with pytest.raises(ValueError):
        WeakLabel.from_encoded([1, 0, 0])


def _rows(n):
    descs = [r[0] for r in APPENDIX_ROWS]
    probes = ["SC6-1", "SL10-2", "SL15-4"]
    return [(f"img_{i:03d}.png", probes[i % 3], descs[i % len(descs)]) for i in range(n)]


def test_build_manifest_split_counts_and_determinism(table, tmp_path):
    a = build_manifest(_rows(10), table, split_fraction=0.8, seed=7)
    b = build_manifest(_rows(10), table, split_fraction=0.8, seed=7)
    assert sum(r.split == "train" for r in a) == 8
    assert sum(r.split == "val" for r in a) == 2
    write_manifest(a, tmp_path / "a.jsonl")
    write_manifest(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert read_manifest(tmp_path / "a.jsonl") == a


def test_build_manifest_seed_changes_split(table):
    a = build_manifest(_rows(40), table, seed=1)
    b = build_manifest(_rows(40), table, seed=2)
    assert [r.split for r in a] != [r.split for r in b]


def test_reference_split_sizes():
    from dicomce.metadata import split_indices

    assert split_indices(12267, 0.8, 0).sum() == 9814


def test_build_manifest_strict_unknown(table):
    rows = _rows(3) + [("x.png", "SC6-1", "US KNEE")]
    with pytest.raises(UnknownStudyDescription):
        build_manifest(rows, table)
    recs = build_manifest(rows, table, strict=False)
    assert audit_manifest(recs).n_unknown == 1
    assert recs[-1].label.group_multihot == (0,) * 8


def test_build_manifest_empty(table):
    recs = build_manifest([], table, seed=3)
    assert recs == []
    audit = audit_manifest(recs)
    assert audit.n_records == 0 and audit.n_unknown == 0


def test_manifest_labels_consistent_with_raw(table):
    for rec in build_manifest(_rows(44), table):
        again = encode_label(parse_transducer(rec.transducer_raw), categorize_study_description(rec.study_description_raw, table))
        assert again == rec.label


def test_manifest_line_format(table, tmp_path):
    recs = build_manifest(_rows(2), table, seed=0)
    write_manifest(recs, tmp_path / "m.jsonl")
    raw = (tmp_path / "m.jsonl").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    first = raw.split(b"\n")[0].decode()
    assert first.startswith('{"image_path": "img_000.png", "transducer_raw": "SC6-1"')
    assert '"label": [1, 0, 1, 0, 0, 1, 0, 0, 0, 0]' in first


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
def test_build_manifest_bad_fraction(table, frac):
    with pytest.raises(ValueError):
        build_manifest(_rows(4), table, split_fraction=frac)
