import random

import pytest
from hypothesis import given, settings, strategies as st

from bimshare.errors import ModelError, SchemaError
from bimshare.model import ModelBuilder, compress_guid, expand_exchangeable, is_relation
from bimshare.schema import Kind, RelationKind, bundled_schema_text, load_schema

from strategies import random_model

MINIMAL = """SCHEMA TINY
TYPE Root ABSTRACT ROOTED
  ATTR GlobalId : STRING
END
"""


def test_bundled_schema_has_named_types(schema):
    for name in ("IfcRoot", "IfcRelationship", "IfcTask", "IfcColumn", "IfcBeam", "IfcSlab",
                 "IfcProject", "IfcBuildingStorey", "IfcOrganization", "IfcRelAggregates",
                 "IfcRelContainedInSpatialStructure", "IfcRelAssignsToProcess", "IfcRelFillsElement"):
        assert name in schema
    assert schema.root_type == "IfcRoot"
    assert schema.relationship_type == "IfcRelationship"


def test_bundled_schema_text_reloads_identically(schema):
    again = load_schema(bundled_schema_text())
    assert again.to_text() == schema.to_text()
    assert load_schema(schema.to_text()).to_text() == schema.to_text()


def test_cyclic_inheritance_rejected():
    text = MINIMAL + "TYPE A EXTENDS B\nEND\nTYPE B EXTENDS A\nEND\n"
    with pytest.raises(SchemaError, match="cyclic"):
        load_schema(text)


def test_unknown_supertype_rejected():
    with pytest.raises(SchemaError, match="unknown type"):
        load_schema(MINIMAL + "TYPE A EXTENDS Nope\nEND\n")


def test_relationship_without_related_attribute_rejected():
    text = MINIMAL + """TYPE Rel EXTENDS Root ABSTRACT RELATIONSHIP
END
TYPE Thing EXTENDS Root
END
TYPE IfcRelAggregates EXTENDS Rel
  ATTR RelatingObject : REF(Thing)
  ATTR Parts : LIST(Thing)
END
"""
    with pytest.raises(SchemaError, match="Related"):
        load_schema(text)


def test_parse_error_carries_position():
    with pytest.raises(SchemaError) as info:
        load_schema(MINIMAL + "TYPE A\n  ATTR x : WIBBLE\nEND\n")
    assert info.value.line == 6
    assert info.value.column is not None


def test_missing_end_reported():
    with pytest.raises(SchemaError, match="missing END"):
        load_schema("TYPE Root ROOTED\n  ATTR GlobalId : STRING\n")


def test_attribute_kinds_parsed(schema):
    oh = schema["IfcOwnerHistory"]
    assert oh.attribute("ChangeAction").kind is Kind.ENUM
    assert "DELETED" in oh.attribute("ChangeAction").tags
    agg = schema["IfcRelAggregates"]
    assert agg.attribute("RelatedObjects").kind is Kind.LIST


def test_is_relation_kinds(schema):
    b = ModelBuilder(schema)
    col = b.add("IfcColumn", compress_guid(1))
    proj = b.add("IfcProject", compress_guid(2), Name="P")
    agg = b.add("IfcRelAggregates", compress_guid(3), RelatingObject=proj, RelatedObjects=(col,))
    op = b.add("IfcOpeningElement", compress_guid(4))
    fills = b.add("IfcRelFillsElement", compress_guid(5), RelatingOpeningElement=op, RelatedBuildingElement=col)
    m = b.build()
    assert is_relation(schema, m[agg.label]) is RelationKind.ONE_TO_MANY
    assert is_relation(schema, m[fills.label]) is RelationKind.ONE_TO_ONE
    assert is_relation(schema, m[col.label]) is RelationKind.NONE


def _chain_model(schema):
    b = ModelBuilder(schema)
    pt = b.add("IfcCartesianPoint", 0.0, 0.0, 0.0)
    axis = b.add("IfcAxis2Placement3D", pt)
    place = b.add("IfcLocalPlacement", None, axis)
    col = b.add("IfcColumn", compress_guid(10), ObjectPlacement=place)
    bare = b.add("IfcBeam", compress_guid(11))
    task = b.add("IfcTask", compress_guid(12), Name="T", TaskId="T", IsMilestone=False)
    b.add("IfcRelAssignsToProcess", compress_guid(13), RelatingProcess=task, RelatedObjects=(col,))
    return b.build(), (pt, axis, place, col, bare)


def test_expand_exchangeable_chain(schema):
    m, (pt, axis, place, col, bare) = _chain_model(schema)
    ex = expand_exchangeable(m, compress_guid(10))
    assert ex.root.label == col.label
    assert [r.label for r in ex.resources] == sorted([pt.label, axis.label, place.label])


def test_expand_exchangeable_empty_and_stops_at_rooted(schema):
    m, (*_, col, bare) = _chain_model(schema)
    assert expand_exchangeable(m, compress_guid(11)).resources == ()
    rel = expand_exchangeable(m, compress_guid(13))
    assert rel.resources == ()
    assert col.label not in rel.labels


def test_expand_exchangeable_errors(schema):
    m, _ = _chain_model(schema)
    with pytest.raises(KeyError):
        expand_exchangeable(m, compress_guid(999))


def test_resource_gid_lookup_rejected(schema):
    b = ModelBuilder(schema)
    b.add("IfcOrganization", None, "org")
    m = b.build()
    with pytest.raises((KeyError, ModelError)):
        expand_exchangeable(m, "org")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 60))
def test_exchangeable_partition_and_idempotence(seed, size):
    from bimshare.schema import bundled_schema
    schema = bundled_schema()
    m = random_model(schema, random.Random(seed), size)
    covered = set()
    for e in m.rooted():
        gid = m.gid_of(e)
        ex = expand_exchangeable(m, gid)
        assert ex == expand_exchangeable(m, gid)
        assert all(not m.is_rooted(r) for r in ex.resources)
        covered |= ex.labels
    # every resource hangs off some rooted entity, so the closures cover the model
    assert covered == set(m.entities)
    # every reference walk resolves
    for e in m:
        for label in m.references(e):
            assert label in m
