"""Declarative mini-schema: typed attributes, inheritance, rooted and relationship types.

Schema files are line oriented::

    SCHEMA MINI_IFC
    TYPE IfcRoot ABSTRACT ROOTED
      ATTR GlobalId : STRING
      ATTR OwnerHistory : REF(IfcOwnerHistory) OPTIONAL
    END

Kinds are ``STRING``, ``INTEGER``, ``REAL``, ``BOOLEAN``, ``ENUM(a,b,...)``,
``REF(Type)`` and ``LIST(Type)``.  Lines starting with ``--`` or ``#`` are
comments.  ``ROOTED`` marks the single rooted base type; when no type carries
the marker a base type named ``IfcRoot`` is used.  Relationship types are the
descendants of ``IfcRelationship`` (or of a type marked ``RELATIONSHIP``).
"""

from __future__ import annotations

import enum
import functools
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import SchemaError

ROOT_NAME = "IfcRoot"
RELATIONSHIP_NAME = "IfcRelationship"
GLOBAL_ID_ATTR = "GlobalId"
OWNER_HISTORY_ATTR = "OwnerHistory"
CHANGE_ACTION_ATTR = "ChangeAction"
RELATING_PREFIX = "Relating"
RELATED_PREFIX = "Related"


class Kind(enum.Enum):
    STRING = "STRING"
    INTEGER = "INTEGER"
    REAL = "REAL"
    BOOLEAN = "BOOLEAN"
    ENUM = "ENUM"
    REF = "REF"
    LIST = "LIST"

    @property
    def is_reference(self) -> bool:
        return self in (Kind.REF, Kind.LIST)


class RelationKind(enum.Enum):
    NONE = "none"
    ONE_TO_ONE = "one_to_one"
    ONE_TO_MANY = "one_to_many"


@dataclass(frozen=True)
class AttrDef:
    name: str
    kind: Kind
    optional: bool = False
    target: str | None = None  # REF / LIST target type
    tags: tuple[str, ...] = ()  # ENUM literals

    def spec(self) -> str:
        if self.kind is Kind.ENUM:
            text = f"ENUM({','.join(self.tags)})"
        elif self.kind.is_reference:
            text = f"{self.kind.value}({self.target})"
        else:
            text = self.kind.value
        return text + (" OPTIONAL" if self.optional else "")


@dataclass
class TypeDef:
    name: str
    supertype: str | None
    own_attributes: tuple[AttrDef, ...]
    abstract: bool = False
    rooted_marker: bool = False
    relationship_marker: bool = False
    # filled in by Schema
    attributes: tuple[AttrDef, ...] = ()
    ancestors: tuple[str, ...] = ()
    rooted: bool = False
    relationship: bool = False
    relation_kind: RelationKind = RelationKind.NONE
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def index(self, attr_name: str) -> int:
        try:
            return self._index[attr_name]
        except KeyError:
            raise KeyError(f"{self.name} has no attribute {attr_name!r}") from None

    def attribute(self, attr_name: str) -> AttrDef:
        return self.attributes[self.index(attr_name)]

    def has_attribute(self, attr_name: str) -> bool:
        return attr_name in self._index

    @functools.cached_property
    def relating_indexes(self) -> tuple[int, ...]:
        return tuple(i for i, a in enumerate(self.attributes) if a.name.startswith(RELATING_PREFIX))

    @functools.cached_property
    def related_indexes(self) -> tuple[int, ...]:
        return tuple(i for i, a in enumerate(self.attributes) if a.name.startswith(RELATED_PREFIX))

    @functools.cached_property
    def reference_indexes(self) -> tuple[int, ...]:
        return tuple(i for i, a in enumerate(self.attributes) if a.kind.is_reference)


class Schema:
    """A validated set of type definitions.  Immutable once constructed."""

    def __init__(self, name: str, types: list[TypeDef]):
        self.name = name
        self.types: dict[str, TypeDef] = {}
        for t in types:
            if t.name in self.types:
                raise SchemaError(f"duplicate type {t.name}")
            self.types[t.name] = t
        self._upper = {name.upper(): name for name in self.types}
        self._descendants: dict[str, frozenset[str]] = {}
        self._resolve()

    def __contains__(self, name: str) -> bool:
        return name in self.types

    def __getitem__(self, name: str) -> TypeDef:
        return self.types[name]

    def __iter__(self):
        return iter(self.types.values())

    def lookup(self, name: str) -> TypeDef | None:
        """Case-insensitive lookup, as SPF files carry upper-case type names."""
        canonical = self._upper.get(name.upper())
        return self.types[canonical] if canonical else None

    def is_subtype(self, name: str, ancestor: str) -> bool:
        return ancestor in self.types[name].ancestors

    def descendants(self, name: str) -> frozenset[str]:
        """``name`` and every type that inherits from it."""
        cached = self._descendants.get(name)
        if cached is None:
            cached = frozenset(t.name for t in self.types.values() if name in t.ancestors)
            self._descendants[name] = cached
        return cached

    def concrete_descendants(self, name: str) -> frozenset[str]:
        return frozenset(n for n in self.descendants(name) if not self.types[n].abstract)

    def relation_kind(self, name: str) -> RelationKind:
        return self.types[name].relation_kind

    @property
    def rooted_types(self) -> frozenset[str]:
        return self.descendants(self.root_type)

    @property
    def relationship_types(self) -> frozenset[str]:
        if self.relationship_type is None:
            return frozenset()
        return self.descendants(self.relationship_type)

    # -- validation ---------------------------------------------------------

    def _resolve(self) -> None:
        for t in self.types.values():
            if t.supertype is not None and t.supertype not in self.types:
                raise SchemaError(f"type {t.name} extends unknown type {t.supertype}")

        for t in self.types.values():
            chain = [t.name]
            seen = {t.name}
            cur = t
            while cur.supertype is not None:
                if cur.supertype in seen:
                    raise SchemaError(f"cyclic inheritance through {' -> '.join(chain + [cur.supertype])}")
                seen.add(cur.supertype)
                chain.append(cur.supertype)
                cur = self.types[cur.supertype]
            t.ancestors = tuple(chain)

        for t in self.types.values():
            attrs: list[AttrDef] = []
            for anc in reversed(t.ancestors):
                attrs.extend(self.types[anc].own_attributes)
            names = [a.name for a in attrs]
            dupes = {n for n in names if names.count(n) > 1}
            if dupes:
                raise SchemaError(f"type {t.name} declares attribute(s) {sorted(dupes)} more than once")
            t.attributes = tuple(attrs)
            t._index = {a.name: i for i, a in enumerate(attrs)}
            for a in t.own_attributes:
                if a.kind.is_reference and a.target not in self.types:
                    raise SchemaError(f"{t.name}.{a.name} references unknown type {a.target}")

        marked = [t for t in self.types.values() if t.rooted_marker]
        if not marked and ROOT_NAME in self.types:
            marked = [self.types[ROOT_NAME]]
        if len(marked) != 1:
            raise SchemaError(f"exactly one rooted base type required, found {len(marked)}")
        root = marked[0]
        if root.supertype is not None:
            raise SchemaError(f"rooted base type {root.name} must not have a supertype")
        if not root.has_attribute(GLOBAL_ID_ATTR) or root.attribute(GLOBAL_ID_ATTR).kind is not Kind.STRING:
            raise SchemaError(f"rooted base type {root.name} must declare {GLOBAL_ID_ATTR} : STRING")
        if root.index(GLOBAL_ID_ATTR) != 0:
            raise SchemaError(f"{GLOBAL_ID_ATTR} must be the first attribute of {root.name}")
        if root.attribute(GLOBAL_ID_ATTR).optional:
            raise SchemaError(f"{root.name}.{GLOBAL_ID_ATTR} must not be optional")
        self.root_type = root.name

        rel_marked = [t for t in self.types.values() if t.relationship_marker]
        if not rel_marked and RELATIONSHIP_NAME in self.types:
            rel_marked = [self.types[RELATIONSHIP_NAME]]
        if len(rel_marked) > 1:
            raise SchemaError("more than one relationship base type")
        self.relationship_type = rel_marked[0].name if rel_marked else None

        for t in self.types.values():
            t.rooted = self.root_type in t.ancestors
            t.relationship = self.relationship_type is not None and self.relationship_type in t.ancestors
            if t.relationship and not t.rooted:
                raise SchemaError(f"relationship type {t.name} must descend from {self.root_type}")
            if t.relationship:
                self._check_relationship(t)

        history = self._owner_history_type()
        if history is not None:
            ht = self.types[history]
            if ht.rooted:
                raise SchemaError(f"{history} must be a resource type")
            if ht.has_attribute(CHANGE_ACTION_ATTR):
                ca = ht.attribute(CHANGE_ACTION_ATTR)
                if ca.kind is not Kind.ENUM or "DELETED" not in ca.tags:
                    raise SchemaError(f"{history}.{CHANGE_ACTION_ATTR} must be an ENUM containing DELETED")

    def _check_relationship(self, t: TypeDef) -> None:
        relating = [t.attributes[i] for i in t.relating_indexes]
        related = [t.attributes[i] for i in t.related_indexes]
        for a in relating:
            if a.kind is not Kind.REF:
                raise SchemaError(f"{t.name}.{a.name}: relating attributes must be REF")
        for a in related:
            if not a.kind.is_reference:
                raise SchemaError(f"{t.name}.{a.name}: related attributes must be REF or LIST")
        if t.abstract:
            return
        if not relating:
            raise SchemaError(f"relationship type {t.name} lacks a '{RELATING_PREFIX}' attribute")
        if not related:
            raise SchemaError(f"relationship type {t.name} lacks a '{RELATED_PREFIX}' attribute")
        many = any(a.kind is Kind.LIST for a in related)
        t.relation_kind = RelationKind.ONE_TO_MANY if many else RelationKind.ONE_TO_ONE

    def _owner_history_type(self) -> str | None:
        root = self.types[self.root_type]
        if root.has_attribute(OWNER_HISTORY_ATTR):
            attr = root.attribute(OWNER_HISTORY_ATTR)
            if attr.kind is Kind.REF:
                return attr.target
        return None

    @property
    def owner_history_type(self) -> str | None:
        return self._owner_history_type()

    def to_text(self) -> str:
        lines = [f"SCHEMA {self.name}", ""]
        for t in self.types.values():
            head = f"TYPE {t.name}"
            if t.supertype:
                head += f" EXTENDS {t.supertype}"
            if t.abstract:
                head += " ABSTRACT"
            if t.rooted_marker:
                head += " ROOTED"
            if t.relationship_marker:
                head += " RELATIONSHIP"
            lines.append(head)
            lines.extend(f"  ATTR {a.name} : {a.spec()}" for a in t.own_attributes)
            lines.append("END")
            lines.append("")
        return "\n".join(lines)


_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_KIND = re.compile(
    r"(?P<simple>STRING|INTEGER|REAL|BOOLEAN)\Z"
    r"|ENUM\((?P<tags>[^)]*)\)\Z"
    r"|(?P<ref>REF|LIST)\((?P<target>[A-Za-z_][A-Za-z0-9_]*)\)\Z"
)


def _parse_kind(text: str, line: int, column: int) -> tuple[Kind, str | None, tuple[str, ...]]:
    m = _KIND.match(text.replace(" ", ""))
    if not m:
        raise SchemaError(f"unknown attribute kind {text!r}", line, column)
    if m.group("simple"):
        return Kind(m.group("simple")), None, ()
    if m.group("ref"):
        return Kind(m.group("ref")), m.group("target"), ()
    tags = tuple(t for t in m.group("tags").split(",") if t)
    if not tags or any(not _IDENT.match(t) for t in tags):
        raise SchemaError(f"bad enumeration literal list {text!r}", line, column)
    if len(set(tags)) != len(tags):
        raise SchemaError(f"duplicate enumeration literal in {text!r}", line, column)
    return Kind.ENUM, None, tags


def load_schema(text: str) -> Schema:
    """Parse and validate schema-file text."""
    name = "SCHEMA"
    types: list[TypeDef] = []
    current: dict | None = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("--") or stripped.startswith("#"):
            continue
        col = len(raw) - len(raw.lstrip()) + 1
        words = stripped.split()
        head = words[0]

        if head == "SCHEMA":
            if current is not None or types:
                raise SchemaError("SCHEMA must precede all TYPE blocks", lineno, col)
            if len(words) != 2 or not _IDENT.match(words[1]):
                raise SchemaError("expected 'SCHEMA <name>'", lineno, col)
            name = words[1]
        elif head == "TYPE":
            if current is not None:
                raise SchemaError(f"TYPE {current['name']} is missing END", lineno, col)
            if len(words) < 2 or not _IDENT.match(words[1]):
                raise SchemaError("expected type name after TYPE", lineno, col)
            current = {"name": words[1], "super": None, "abstract": False, "rooted": False,
                       "relationship": False, "attrs": []}
            rest = [(m.group(), m.start() + 1) for m in re.finditer(r"\S+", raw)][2:]
            i = 0
            while i < len(rest):
                word, word_col = rest[i]
                if word == "EXTENDS":
                    if i + 1 >= len(rest) or not _IDENT.match(rest[i + 1][0]):
                        raise SchemaError("expected supertype name after EXTENDS", lineno, word_col)
                    current["super"] = rest[i + 1][0]
                    i += 2
                    continue
                flag = {"ABSTRACT": "abstract", "ROOTED": "rooted", "RELATIONSHIP": "relationship"}.get(word)
                if flag is None:
                    raise SchemaError(f"unexpected token {word!r}", lineno, word_col)
                current[flag] = True
                i += 1
        elif head == "ATTR":
            if current is None:
                raise SchemaError("ATTR outside of a TYPE block", lineno, col)
            m = re.match(r"ATTR\s+(\S+)\s*:\s*(.+?)\s*$", stripped)
            if not m or not _IDENT.match(m.group(1)):
                raise SchemaError("expected 'ATTR <name> : <kind> [OPTIONAL]'", lineno, col)
            kind_text = m.group(2)
            optional = False
            if kind_text.endswith("OPTIONAL"):
                optional = True
                kind_text = kind_text[: -len("OPTIONAL")].rstrip()
            kind_col = raw.index(m.group(2)) + 1
            kind, target, tags = _parse_kind(kind_text, lineno, kind_col)
            current["attrs"].append(AttrDef(m.group(1), kind, optional, target, tags))
        elif head == "END":
            if current is None or len(words) != 1:
                raise SchemaError("unexpected END", lineno, col)
            types.append(TypeDef(
                name=current["name"],
                supertype=current["super"],
                own_attributes=tuple(current["attrs"]),
                abstract=current["abstract"],
                rooted_marker=current["rooted"],
                relationship_marker=current["relationship"],
            ))
            current = None
        else:
            raise SchemaError(f"unexpected token {head!r}", lineno, col)

    if current is not None:
        raise SchemaError(f"TYPE {current['name']} is missing END", len(text.splitlines()) + 1, 1)
    return Schema(name, types)


def load_schema_file(path: str | Path) -> Schema:
    return load_schema(Path(path).read_text(encoding="utf-8"))


def bundled_schema_text() -> str:
    return resources.files("bimshare.data").joinpath("mini_ifc.schema").read_text(encoding="utf-8")


@functools.lru_cache(maxsize=1)
def bundled_schema() -> Schema:
    """The mini-IFC schema shipped with the package."""
    return load_schema(bundled_schema_text())
