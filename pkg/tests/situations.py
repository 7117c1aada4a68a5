"""Micro-fixtures for the eighteen relationship integration situations.

Situation 2.6 has two variants (2.6-1 marks the related entity, 2.6-2 the
relation), so there are nineteen cases.  Each case carries a base model, a
sub-model and the expected outcome written down by hand: which entities
survive and what the relation R looks like afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

from bimshare.model import Model, ModelBuilder, compress_guid, is_delete_marked
from bimshare.schema import Schema, bundled_schema

IDS = {name: compress_guid(0x5100 + i) for i, name in enumerate("ABCDER")}


@dataclass(frozen=True)
class Situation:
    name: str
    caption: str
    base: Model
    sub: Model
    expect_ids: frozenset[str]
    # None when R must be gone, else (relating letter, related letters, R name)
    expect_r: tuple[str, tuple[str, ...], str] | None


def _add(b: ModelBuilder, letter: str, type_name: str, deleted=False, name=None, **attrs):
    oh = b.add("IfcOwnerHistory", "party", "DELETED" if deleted else "NOCHANGE", 1000)
    return b.add(type_name, IDS[letter], oh, name or letter, **attrs)


def _one_to_one(sub_spec: dict) -> tuple[Model, Model]:
    """Base A-R-B with R an IfcRelFillsElement."""
    schema = bundled_schema()
    b = ModelBuilder(schema)
    a = _add(b, "A", "IfcOpeningElement")
    bb = _add(b, "B", "IfcDoor")
    _add(b, "R", "IfcRelFillsElement", RelatingOpeningElement=a, RelatedBuildingElement=bb)
    base = b.build()
    s = ModelBuilder(schema)
    refs = {}
    for letter in ("A", "B"):
        if letter in sub_spec:
            opts = sub_spec[letter]
            refs[letter] = _add(s, letter, "IfcOpeningElement" if letter == "A" else "IfcDoor",
                                deleted=opts.get("deleted", False), name=opts.get("name"))
    if "R" in sub_spec:
        _add(s, "R", "IfcRelFillsElement", deleted=sub_spec["R"].get("deleted", False),
             RelatingOpeningElement=refs["A"], RelatedBuildingElement=refs["B"])
    return base, s.build()


def _one_to_many(sub_spec: dict) -> tuple[Model, Model]:
    """Base A-R-[B,C] with R an IfcRelAssignsToProcess; E is a spare task."""
    schema = bundled_schema()
    b = ModelBuilder(schema)
    a = _add(b, "A", "IfcTask", TaskId="A", IsMilestone=False)
    bb = _add(b, "B", "IfcColumn")
    c = _add(b, "C", "IfcColumn")
    _add(b, "E", "IfcTask", TaskId="E", IsMilestone=False)
    _add(b, "R", "IfcRelAssignsToProcess", RelatingProcess=a, RelatedObjects=(bb, c))
    base = b.build()
    s = ModelBuilder(schema)
    refs = {}
    for letter in ("A", "B", "C", "D", "E"):
        if letter not in sub_spec:
            continue
        opts = sub_spec[letter]
        extra = {"TaskId": letter, "IsMilestone": False} if letter in "AE" else {}
        refs[letter] = _add(s, letter, "IfcTask" if letter in "AE" else "IfcColumn",
                            deleted=opts.get("deleted", False), name=opts.get("name"), **extra)
    if "R" in sub_spec:
        opts = sub_spec["R"]
        _add(s, "R", "IfcRelAssignsToProcess", deleted=opts.get("deleted", False), name=opts.get("name"),
             RelatingProcess=refs[opts.get("relating", "A")],
             RelatedObjects=tuple(refs[x] for x in opts["related"]))
    return base, s.build()


def _case(name, caption, builder, sub_spec, survivors, expect_r):
    base, sub = builder(sub_spec)
    return Situation(name, caption, base, sub, frozenset(IDS[x] for x in survivors), expect_r)


def all_situations() -> list[Situation]:
    keep, dele = {}, {"deleted": True}
    one, many = _one_to_one, _one_to_many
    return [
        _case("1.1", "only A in sub-model, unmarked: R kept", one, {"A": keep}, "ABR", ("A", ("B",), "R")),
        _case("1.2", "only A in sub-model, marked DELETE: R deleted", one, {"A": dele}, "B", None),
        _case("1.3", "A and B in sub-model, R absent: R deleted", one, {"A": keep, "B": keep}, "AB", None),
        _case("1.4", "A modified and B in sub-model, R absent: R deleted", one,
              {"A": {"name": "A modified"}, "B": keep}, "AB", None),
        _case("1.5", "A, B and R in sub-model: R kept", one, {"A": keep, "B": keep, "R": keep}, "ABR",
              ("A", ("B",), "R")),
        _case("1.6", "A, B and R in sub-model, B marked DELETE: R deleted", one,
              {"A": keep, "B": dele, "R": keep}, "A", None),
        _case("2.1", "only relating A in sub-model: R unchanged", many, {"A": keep}, "ABCER",
              ("A", ("B", "C"), "R")),
        _case("2.2", "only relating A, marked DELETE: R deleted", many, {"A": dele}, "BCE", None),
        _case("2.3", "A marked DELETE and B in sub-model, R absent: R deleted", many,
              {"A": dele, "B": keep}, "BCE", None),
        _case("2.4", "A and B marked DELETE, R absent: R deleted", many, {"A": dele, "B": dele}, "CE", None),
        _case("2.5", "A, B and R=[B], nothing deleted: R keeps [B,C]", many,
              {"A": keep, "B": keep, "R": {"related": "B"}}, "ABCER", ("A", ("B", "C"), "R")),
        _case("2.6-1", "related B marked DELETE: B removed from R", many,
              {"A": keep, "B": dele, "R": {"related": "B"}}, "ACER", ("A", ("C",), "R")),
        _case("2.6-2", "relation R marked DELETE: B removed from R", many,
              {"A": keep, "B": keep, "R": {"related": "B", "deleted": True}}, "ABCER", ("A", ("C",), "R")),
        _case("2.7", "R modified in sub-model: R updated", many,
              {"A": keep, "B": keep, "R": {"related": "B", "name": "R modified"}}, "ABCER",
              ("A", ("B", "C"), "R modified")),
        _case("2.8", "R re-pointed to another relating entity: R updated", many,
              {"E": keep, "B": keep, "R": {"related": "B", "relating": "E"}}, "ABCER",
              ("E", ("B", "C"), "R")),
        _case("2.9", "new related D added: related lists merged", many,
              {"A": keep, "B": keep, "C": keep, "D": keep, "R": {"related": "BCD"}}, "ABCDER",
              ("A", ("B", "C", "D"), "R")),
        _case("2.10", "related B marked DELETE: B removed from R", many,
              {"A": keep, "B": dele, "C": keep, "R": {"related": "BC"}}, "ACER", ("A", ("C",), "R")),
        _case("2.11", "B dropped from R's list: B removed from R, B kept", many,
              {"A": keep, "B": keep, "C": keep, "R": {"related": "C"}}, "ABCER", ("A", ("C",), "R")),
        _case("2.12", "B marked DELETE and dropped from R's list", many,
              {"A": keep, "B": dele, "C": keep, "R": {"related": "C"}}, "ACER", ("A", ("C",), "R")),
    ]


def expected_canonical(s: Situation) -> dict:
    """Label-free expected result, assembled by hand from the case description."""
    schema: Schema = s.base.schema
    base = s.base.canonical()
    sub = s.sub.canonical()
    sub_marked = {gid for gid in sub if _marked(s.sub, gid)}
    out = {}
    for gid in s.expect_ids:
        if gid in sub and gid not in sub_marked:
            out[gid] = sub[gid]
        else:
            out[gid] = base[gid]
    if s.expect_r is not None:
        relating, related, name = s.expect_r
        type_name, attrs = out[IDS["R"]]
        td = schema.types[type_name]
        attrs = list(attrs)
        attrs[td.index("Name")] = name
        attrs[td.relating_indexes[0]] = ("@", IDS[relating])
        rel_i = td.related_indexes[0]
        if isinstance(attrs[rel_i], tuple) and attrs[rel_i] and attrs[rel_i][0] == "@":
            attrs[rel_i] = ("@", IDS[related[0]])
        else:
            attrs[rel_i] = tuple(("@", IDS[x]) for x in related)
        out[IDS["R"]] = (type_name, tuple(attrs))
    return out


def _marked(model: Model, gid: str) -> bool:
    return is_delete_marked(model, model.by_gid(gid))
