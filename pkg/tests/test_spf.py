import random
import warnings
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from bimshare.errors import SpfError
from bimshare.model import Model, ModelBuilder, compress_guid
from bimshare.spf import (SchemaMismatchWarning, decode_string, encode_string, format_real, parse_fragments,
                          parse_spf, write_fragments, write_spf)

from strategies import random_model

TWO_ZONES = Path(__file__).parent / "fixtures" / "two_zones.ifc"
GID = "0000000000000000000001"


def doc(body, schema_name="MINI_IFC"):
    return ("ISO-10303-21;\nHEADER;\nFILE_DESCRIPTION((''),'2;1');\nFILE_NAME('','',(''),(''),'','','');\n"
            f"FILE_SCHEMA(('{schema_name}'));\nENDSEC;\nDATA;\n{body}\nENDSEC;\nEND-ISO-10303-21;\n")


def test_single_record(schema):
    m = parse_spf(doc(f"#1=IFCCOLUMN('{GID}',$,$,$,$,$,$);"), schema)
    assert len(m) == 1
    assert len(list(m.rooted())) == 1
    assert m.global_ids == {GID}


def test_dangling_reference_position(schema):
    with pytest.raises(SpfError, match="dangling") as info:
        parse_spf(doc(f"#1=IFCCOLUMN('{GID}',#9,$,$,$,$,$);"), schema)
    assert (info.value.line, info.value.column) == (8, 39)


@pytest.mark.parametrize("body, message", [
    (f"#1=IFCCOLUMN('{GID}',*,$,$,$,$,$);", "derived"),
    (f"#1=IFCCOLUMN('{GID}',$,$,$,$,$);", "takes 7 attributes"),
    (f"#1=IFCFOO('{GID}');", "unknown entity type"),
    (f"#1=IFCCOLUMN('{GID}',$,3,$,$,$,$);", "does not match kind"),
    (f"#1=IFCCOLUMN('{GID}',$,$,$,$,$,$);\n#1=IFCBEAM('{GID[:-1]}2',$,$,$,$,$,$);", "duplicate"),
    ("#1=IFCCOLUMN('unterminated", "unexpected"),
])
def test_diagnosed_errors(schema, body, message):
    with pytest.raises(SpfError, match=message) as info:
        parse_spf(doc(body), schema)
    assert info.value.line is not None


def test_two_zones_fixture(schema):
    m = parse_spf(TWO_ZONES.read_text(), schema)
    rooted = [e for e in m.rooted() if not schema[e.type_name].relationship]
    assert len(rooted) == 6
    assert len(list(m.relations())) == 2
    assert sorted(e.type_name for e in rooted) == ["IfcBeam", "IfcColumn", "IfcColumn", "IfcSlab", "IfcTask",
                                                     "IfcTask"]
    assert len(m) == 9


def test_canonical_fixture_is_byte_identical(schema):
    text = TWO_ZONES.read_text()
    assert write_spf(parse_spf(text, schema)) == text


def test_absent_optional_written_as_dollar(schema):
    b = ModelBuilder(schema)
    b.add("IfcColumn", GID, Name="C")
    line = [x for x in write_spf(b.build()).splitlines() if x.startswith("#1=")][0]
    assert line == f"#1=IFCCOLUMN('{GID}',$,'C',$,$,$,$);"


def test_empty_model(schema):
    text = write_spf(Model(schema))
    assert "DATA;\nENDSEC;" in text
    assert len(parse_spf(text, schema)) == 0


def test_enum_and_boolean_literals(schema):
    m = parse_spf(TWO_ZONES.read_text(), schema)
    text = write_spf(m)
    assert ".NOCHANGE." in text and ".F." in text and ".FLOOR." in text


def test_file_schema_mismatch_is_a_warning(schema):
    with pytest.warns(SchemaMismatchWarning):
        m = parse_spf(doc(f"#1=IFCCOLUMN('{GID}',$,$,$,$,$,$);", "IFC2X3"), schema)
    assert len(m) == 1


def test_rooted_labels_first(schema):
    b = ModelBuilder(schema)
    oh = b.add("IfcOwnerHistory", "me", None, 0)
    b.add("IfcColumn", GID, oh)
    text = write_spf(b.build())
    assert f"#1=IFCCOLUMN('{GID}',#2," in text
    assert "#2=IFCOWNERHISTORY('me',$,0);" in text


@pytest.mark.parametrize("raw, text", [
    ("it''s", "it's"),
    ("\\X2\\00E9\\X0\\", "é"),
    ("\\X4\\0001F600\\X0\\", "😀"),
    ("a\\\\b", "a\\b"),
    ("\\S\\D", "Ä"),
])
def test_decode_escapes(raw, text):
    assert decode_string(raw) == text


@given(st.text())
def test_string_escape_round_trip(s):
    encoded = encode_string(s)
    assert all(32 <= ord(ch) < 127 for ch in encoded)
    assert encoded[0] == encoded[-1] == "'"
    assert decode_string(encoded[1:-1]) == s


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_real_round_trip(x):
    text = format_real(x)
    assert "." in text
    assert float(text) == x


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 60))
def test_model_round_trip(seed, size):
    from bimshare.schema import bundled_schema
    schema = bundled_schema()
    m = random_model(schema, random.Random(seed), size)
    text = write_spf(m)
    again = parse_spf(text, schema)
    assert again.canonical() == m.canonical()
    assert write_spf(again) == text


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32), st.data())
def test_parser_is_total(seed, data):
    """Corrupting a valid file yields a model or a diagnosed SpfError, nothing else."""
    from bimshare.schema import bundled_schema
    schema = bundled_schema()
    text = write_spf(random_model(schema, random.Random(seed), 12))
    pos = data.draw(st.integers(0, len(text) - 1))
    junk = data.draw(st.sampled_from(["", "#", "'", "(", ")", ",", "$", "*", ".", "#99", "\\", "é", ";", "=",
                                      "IFCBEAM", "1.5E", "-"]))
    cut = data.draw(st.integers(0, 3))
    broken = text[:pos] + junk + text[pos + cut:]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SchemaMismatchWarning)
        try:
            parse_spf(broken, schema)
        except SpfError as exc:
            assert exc.line is not None


def test_fragments_round_trip(schema):
    m = parse_spf(TWO_ZONES.read_text(), schema)
    from bimshare.model import fragments_of
    frags = fragments_of(m)
    text = write_fragments(frags.values(), schema)
    assert parse_fragments(text, schema) == frags


def test_fragment_reference_section(schema):
    task = compress_guid(77)
    rel = compress_guid(5)
    text = doc(f"#1=IFCRELASSIGNSTOPROCESS('{rel}',$,$,$,(#2),#3);").replace(
        "DATA;", f"REFERENCE;\n#2=<#{GID}>;\n#3=<#{task}>;\nENDSEC;\nDATA;")
    f = parse_fragments(text, schema)[rel]
    assert sorted(f.external.values()) == sorted([GID, task])
    assert parse_fragments(write_fragments([f], schema), schema)[rel] == f
