import itertools
import random
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from bimshare.errors import MvdError
from bimshare.model import ModelBuilder, compress_guid
from bimshare.mvd import (FALSE, TRUE, And, AttributeConstraint, Or, make_rule, matches, parse_mvd, to_dnf,
                          type_only_view, write_mvd)
from bimshare.spf import parse_spf
from bimshare.synth import SynthConfig, generate, random_expression

from oracles import tree_holds

TWO_ZONES = Path(__file__).parent / "fixtures" / "two_zones.ifc"

ZONE_B = """<ModelView name="zone-b">
  <Rule type="IfcTask"><Eq path="Name" value="Zone B"/></Rule>
  <Rule type="IfcColumn"/>
</ModelView>"""

ATOMS = [AttributeConstraint(("Name",), "eq", x) for x in "abcd"]
a, b, c, d = ATOMS


def test_parse_two_zones_view(schema):
    view = parse_mvd(ZONE_B, schema)
    assert len(view.rules) == 2
    task = view.rule_for("IfcTask")
    assert task.clauses == (frozenset([AttributeConstraint(("Name",), "eq", "Zone B")]),)
    assert view.rule_for("IfcColumn").type_only


def test_unknown_type(schema):
    with pytest.raises(MvdError, match="IfcFoo"):
        parse_mvd('<ModelView name="x"><Rule type="IfcFoo"/></ModelView>', schema)


@pytest.mark.parametrize("xml, message", [
    ('<ModelView name="x"><Rule type="IfcTask"><Eq path="Nope" value="1"/></Rule></ModelView>', "Nope"),
    ('<ModelView name="x"><Rule type="IfcTask"><Like path="Name" value="1"/></Rule></ModelView>', "Like"),
    ('<ModelView name="x"><Rule type="IfcTask">', "XML"),
    ('<ModelView name="x"><Rule type="IfcTask"><Eq path="Priority" value="high"/></Rule></ModelView>', "Priority"),
])
def test_parse_errors(schema, xml, message):
    with pytest.raises(MvdError, match=message):
        parse_mvd(xml, schema)


def test_duplicate_rules_merge(schema):
    view = parse_mvd("""<ModelView name="x">
      <Rule type="IfcTask"><Eq path="Name" value="Zone A"/></Rule>
      <Rule type="IfcTask"><Eq path="Name" value="Zone B"/></Rule>
    </ModelView>""", schema)
    assert len(view.rules) == 1
    assert {next(iter(cl)).value for cl in view.rules[0].clauses} == {"Zone A", "Zone B"}


def test_typed_values_and_paths(schema):
    view = parse_mvd("""<ModelView name="x">
      <Rule type="IfcTask">
        <Eq path="IsMilestone" value="true"/>
        <In path="Priority" values="1|2"/>
        <Contains path="OwnerHistory.OwningUser" value="cons"/>
        <Exists path="WorkMethod"/>
      </Rule>
    </ModelView>""", schema)
    (clause,) = view.rule_for("IfcTask").clauses
    values = {x.op: x.value for x in clause}
    assert values == {"eq": True, "in": (1, 2), "contains": "cons", "exists": None}


def test_templates_inline_and_write_round_trip(schema):
    xml = """<ModelView name="x">
      <ExchangeRequirement name="handover"/>
      <Template id="zoned"><In path="WorkMethod" values="Zone A|Zone B"/></Template>
      <Rule type="IfcTask"><Or><Use template="zoned"/><Eq path="Name" value="T"/></Or></Rule>
    </ModelView>"""
    view = parse_mvd(xml, schema)
    assert view.provenance == ("handover",)
    assert len(view.rule_for("IfcTask").clauses) == 2
    assert parse_mvd(write_mvd(view), schema) == view


def test_dnf_distribution():
    assert set(to_dnf(And((a, Or((b, c)))))) == {frozenset([a, b]), frozenset([a, c])}


def test_dnf_identity_and_constants():
    assert to_dnf(a) == [frozenset([a])]
    assert to_dnf(TRUE) == [frozenset()]
    assert to_dnf(FALSE) == []


def test_dnf_absorption_truth_table():
    expr = Or((a, And((a, b))))
    assert to_dnf(expr) == [frozenset([a])]
    for va, vb in itertools.product([False, True], repeat=2):
        truth = {a: va, b: vb}
        assert (va or (va and vb)) == any(all(truth[x] for x in cl) for cl in to_dnf(expr))


def _trees(depth):
    leaf = st.sampled_from(ATOMS)
    return st.recursive(leaf, lambda inner: st.builds(
        lambda kind, items: (And if kind else Or)(tuple(items)), st.booleans(), st.lists(inner, max_size=3)),
        max_leaves=8)


def _eval(expr, truth):
    if isinstance(expr, AttributeConstraint):
        return truth[expr]
    if isinstance(expr, And):
        return all(_eval(x, truth) for x in expr.items)
    return any(_eval(x, truth) for x in expr.items)


@given(_trees(3))
def test_dnf_equivalent_and_minimal(expr):
    clauses = to_dnf(expr)
    for bits in itertools.product([False, True], repeat=4):
        truth = dict(zip(ATOMS, bits))
        assert _eval(expr, truth) == any(all(truth[x] for x in cl) for cl in clauses)
    for x, y in itertools.permutations(clauses, 2):
        assert not x <= y


def _two_zones(schema):
    return parse_spf(TWO_ZONES.read_text(), schema)


def test_matches_two_zones(schema):
    m = _two_zones(schema)
    rule = make_rule(schema, "IfcTask", AttributeConstraint(("Name",), "eq", "Zone B"))
    by_name = {e.attrs[2]: e for e in m.instances_of("IfcTask")}
    assert matches(rule, by_name["Zone B"], m)
    assert not matches(rule, by_name["Zone A"], m)
    type_rule = make_rule(schema, "IfcTask")
    assert all(matches(type_rule, e, m) for e in m.instances_of("IfcTask"))


def test_absent_optional_along_path_is_false(schema):
    b = ModelBuilder(schema)
    b.add("IfcColumn", compress_guid(1))
    m = b.build()
    rule = make_rule(schema, "IfcColumn", AttributeConstraint(("OwnerHistory", "OwningUser"), "eq", "x"))
    assert not matches(rule, m[1], m)
    exists = make_rule(schema, "IfcColumn", AttributeConstraint(("Name",), "exists"))
    assert not matches(exists, m[1], m)


def test_real_tolerance_and_case_sensitivity(schema):
    b = ModelBuilder(schema)
    b.add("IfcCartesianPoint", 1.0 + 1e-12, 0.0, 0.0)
    m = b.build()
    from bimshare.mvd import evaluate
    assert evaluate(AttributeConstraint(("X",), "eq", 1.0), m[1], m)
    assert not evaluate(AttributeConstraint(("X",), "eq", 1.001), m[1], m)
    b2 = ModelBuilder(schema)
    b2.add("IfcColumn", compress_guid(2), Name="Zone B")
    m2 = b2.build()
    assert not evaluate(AttributeConstraint(("Name",), "eq", "zone b"), m2[1], m2)


def test_subtype_closure(schema):
    m = _two_zones(schema)
    rule = make_rule(schema, "IfcBuildingElement")
    hits = {e.type_name for e in m if matches(rule, e, m)}
    assert hits == {"IfcColumn", "IfcBeam", "IfcSlab"}
    for t in schema.descendants("IfcBuildingElement"):
        assert schema.is_subtype(t, "IfcBuildingElement")


@pytest.fixture(scope="module")
def synthetic(schema):
    return generate(schema, 3, SynthConfig.for_size(600)).model


TYPES = ("IfcTask", "IfcColumn", "IfcWall", "IfcBuildingStorey", "IfcElement", "IfcRelAggregates")


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(TYPES), st.integers(1, 4))
def test_dnf_matching_equals_tree_oracle(synthetic, seed, type_name, budget):
    from bimshare.schema import bundled_schema
    schema = bundled_schema()
    rng = random.Random(seed)
    expr = random_expression(schema, type_name, rng, budget, synthetic)
    rule = make_rule(schema, type_name, expr)
    for e in synthetic.instances_of(type_name):
        assert matches(rule, e, synthetic) == tree_holds(synthetic, e, expr)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(TYPES), st.integers(1, 3))
def test_adding_constraint_is_monotone(synthetic, seed, type_name, budget):
    from bimshare.schema import bundled_schema
    schema = bundled_schema()
    rng = random.Random(seed)
    base = random_expression(schema, type_name, rng, budget, synthetic)
    extra = random_expression(schema, type_name, rng, 1, synthetic)
    wide = make_rule(schema, type_name, base)
    narrow = make_rule(schema, type_name, And((base, extra)))
    for e in synthetic.instances_of(type_name):
        if matches(narrow, e, synthetic):
            assert matches(wide, e, synthetic)


def test_view_covers(schema):
    wide = type_only_view("wide", ["IfcTask", "IfcElement"], schema)
    narrow = parse_mvd(ZONE_B, schema)
    assert wide.covers(narrow, schema)
    assert not narrow.covers(wide, schema)
