"""Typed entity graphs, GlobalIds, exchangeable entities and per-entity fragments.

Attribute values use plain Python types: ``str`` (STRING and ENUM), ``int``,
``float``, ``bool``, :class:`Ref` for references, ``tuple`` of :class:`Ref`
for lists, and ``None`` for an absent optional attribute.
"""

from __future__ import annotations

import logging
import math
import random
import uuid
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field

from .errors import ModelError
from .schema import (
    CHANGE_ACTION_ATTR,
    GLOBAL_ID_ATTR,
    OWNER_HISTORY_ATTR,
    Kind,
    RelationKind,
    Schema,
    TypeDef,
)

logger = logging.getLogger(__name__)

GLOBAL_ID_ALPHABET = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz_$"
_GID_INDEX = {c: i for i, c in enumerate(GLOBAL_ID_ALPHABET)}

CHANGE_ACTIONS = ("NOCHANGE", "ADDED", "MODIFIED", "DELETED", "NOTDEFINED")
DELETED = "DELETED"


# -- GlobalId -----------------------------------------------------------------

def compress_guid(value: int) -> str:
    """Encode a 128-bit integer into the 22-character GlobalId form."""
    if not 0 <= value < 1 << 128:
        raise ValueError("GlobalId must encode a 128-bit value")
    chars = []
    for _ in range(22):
        chars.append(GLOBAL_ID_ALPHABET[value & 63])
        value >>= 6
    return "".join(reversed(chars))


def expand_guid(gid: str) -> int:
    if not is_valid_global_id(gid):
        raise ValueError(f"not a GlobalId: {gid!r}")
    value = 0
    for c in gid:
        value = (value << 6) | _GID_INDEX[c]
    return value


def is_valid_global_id(gid: object) -> bool:
    return (
        isinstance(gid, str)
        and len(gid) == 22
        and gid[0] in "0123"
        and all(c in _GID_INDEX for c in gid)
    )


def new_global_id(rng: random.Random | None = None) -> str:
    bits = rng.getrandbits(128) if rng is not None else uuid.uuid4().int
    return compress_guid(bits)


# -- entities -----------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Ref:
    label: int

    def __repr__(self) -> str:
        return f"#{self.label}"


@dataclass(frozen=True, slots=True)
class Entity:
    label: int
    type_name: str
    attrs: tuple

    def replace(self, **changes) -> Entity:
        return Entity(changes.get("label", self.label), changes.get("type_name", self.type_name),
                      changes.get("attrs", self.attrs))


@dataclass(frozen=True)
class OwnerHistory:
    owning_party: str
    change_action: str | None
    timestamp: int


def iter_refs(typedef: TypeDef, attrs: tuple) -> Iterator[int]:
    for i in typedef.reference_indexes:
        v = attrs[i]
        if v is None:
            continue
        if isinstance(v, Ref):
            yield v.label
        else:
            for r in v:
                yield r.label


def map_refs(typedef: TypeDef, attrs: tuple, fn) -> tuple:
    """Rewrite every reference through ``fn(label) -> Ref | None``.

    A ``None`` from ``fn`` removes the element from a list, or clears a
    scalar reference.
    """
    out = list(attrs)
    for i in typedef.reference_indexes:
        v = attrs[i]
        if v is None:
            continue
        if isinstance(v, Ref):
            out[i] = fn(v.label)
        else:
            out[i] = tuple(r for r in (fn(x.label) for x in v) if r is not None)
    return tuple(out)


def check_value(schema: Schema, typedef: TypeDef, index: int, value) -> str | None:
    """Return a problem description, or None if ``value`` fits the attribute kind."""
    attr = typedef.attributes[index]
    if value is None:
        return None if attr.optional else f"{typedef.name}.{attr.name} is mandatory"
    kind = attr.kind
    if kind is Kind.STRING:
        ok = isinstance(value, str)
    elif kind is Kind.INTEGER:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is Kind.REAL:
        ok = isinstance(value, float) and math.isfinite(value)
    elif kind is Kind.BOOLEAN:
        ok = isinstance(value, bool)
    elif kind is Kind.ENUM:
        ok = isinstance(value, str) and value in attr.tags
    elif kind is Kind.REF:
        ok = isinstance(value, Ref)
    else:
        ok = isinstance(value, tuple) and all(isinstance(r, Ref) for r in value)
    if not ok:
        return f"{typedef.name}.{attr.name}: {value!r} is not a valid {attr.spec()}"
    return None


# -- models -------------------------------------------------------------------

class Model:
    """An entity table keyed by local label plus a GlobalId index.

    Treat instances as immutable; :class:`ModelBuilder` produces new ones.
    """

    def __init__(self, schema: Schema, entities: Iterable[Entity] = (), *, validate: bool = True):
        self.schema = schema
        self._entities: dict[int, Entity] = {}
        for e in sorted(entities, key=lambda e: e.label):
            if e.label in self._entities:
                raise ModelError(f"duplicate label #{e.label}")
            self._entities[e.label] = e
        self._by_gid: dict[str, int] = {}
        self._by_type: dict[str, list[int]] | None = None
        for e in self._entities.values():
            td = schema.types.get(e.type_name)
            if td is None:
                raise ModelError(f"#{e.label}: unknown type {e.type_name}")
            if len(e.attrs) != len(td.attributes):
                raise ModelError(
                    f"#{e.label}: {e.type_name} takes {len(td.attributes)} attributes, got {len(e.attrs)}")
            if td.rooted:
                gid = e.attrs[0]
                if gid in self._by_gid:
                    raise ModelError(f"GlobalId {gid} used by #{self._by_gid[gid]} and #{e.label}")
                self._by_gid[gid] = e.label
        if validate:
            self.validate()

    # mapping-ish access
    def __len__(self) -> int:
        return len(self._entities)

    def __iter__(self) -> Iterator[Entity]:
        return iter(self._entities.values())

    def __contains__(self, label: int) -> bool:
        return label in self._entities

    def __repr__(self) -> str:
        return f"<Model {self.schema.name} entities={len(self)} rooted={len(self._by_gid)}>"

    @property
    def entities(self) -> Mapping[int, Entity]:
        return self._entities

    def get(self, label: int) -> Entity | None:
        return self._entities.get(label)

    def __getitem__(self, label: int) -> Entity:
        return self._entities[label]

    def typedef(self, entity: Entity) -> TypeDef:
        return self.schema.types[entity.type_name]

    def attr(self, entity: Entity, name: str):
        return entity.attrs[self.schema.types[entity.type_name].index(name)]

    # rooted index
    def gid_of(self, entity: Entity) -> str | None:
        td = self.schema.types[entity.type_name]
        return entity.attrs[td.index(GLOBAL_ID_ATTR)] if td.rooted else None

    def by_gid(self, gid: str) -> Entity:
        try:
            return self._entities[self._by_gid[gid]]
        except KeyError:
            raise KeyError(f"no rooted entity with GlobalId {gid}") from None

    def label_of(self, gid: str) -> int | None:
        return self._by_gid.get(gid)

    def has_gid(self, gid: str) -> bool:
        return gid in self._by_gid

    @property
    def global_ids(self) -> frozenset[str]:
        return frozenset(self._by_gid)

    def is_rooted(self, entity: Entity) -> bool:
        return self.schema.types[entity.type_name].rooted

    def rooted(self) -> Iterator[Entity]:
        return (self._entities[label] for label in sorted(self._by_gid.values()))

    def resources(self) -> Iterator[Entity]:
        return (e for e in self._entities.values() if not self.schema.types[e.type_name].rooted)

    def relations(self) -> Iterator[Entity]:
        return (e for e in self.rooted() if self.schema.types[e.type_name].relationship)

    def instances_of(self, type_name: str, subtypes: bool = True) -> list[Entity]:
        if self._by_type is None:
            index: dict[str, list[int]] = {}
            for e in self._entities.values():
                index.setdefault(e.type_name, []).append(e.label)
            self._by_type = index
        names = self.schema.descendants(type_name) if subtypes else {type_name}
        labels: list[int] = []
        for n in names:
            labels.extend(self._by_type.get(n, ()))
        labels.sort()
        return [self._entities[label] for label in labels]

    def references(self, entity: Entity) -> Iterator[int]:
        return iter_refs(self.schema.types[entity.type_name], entity.attrs)

    @property
    def max_label(self) -> int:
        return max(self._entities, default=0)

    # validation
    def validate(self) -> None:
        """Check schema conformance, GlobalIds and reference closure."""
        schema = self.schema
        for e in self._entities.values():
            td = schema.types[e.type_name]
            if td.abstract:
                raise ModelError(f"#{e.label}: {e.type_name} is abstract")
            if len(e.attrs) != len(td.attributes):
                raise ModelError(
                    f"#{e.label}: {e.type_name} takes {len(td.attributes)} attributes, got {len(e.attrs)}")
            for i, v in enumerate(e.attrs):
                problem = check_value(schema, td, i, v)
                if problem:
                    raise ModelError(f"#{e.label}: {problem}")
            if td.rooted and not is_valid_global_id(e.attrs[td.index(GLOBAL_ID_ATTR)]):
                raise ModelError(f"#{e.label}: malformed GlobalId {e.attrs[td.index(GLOBAL_ID_ATTR)]!r}")
            for i in td.reference_indexes:
                v = e.attrs[i]
                if v is None:
                    continue
                target_type = td.attributes[i].target
                for r in ((v,) if isinstance(v, Ref) else v):
                    target = self._entities.get(r.label)
                    if target is None:
                        raise ModelError(f"#{e.label}: dangling reference #{r.label} in {td.attributes[i].name}")
                    if target_type not in schema.types[target.type_name].ancestors:
                        raise ModelError(
                            f"#{e.label}: {td.attributes[i].name} expects {target_type}, "
                            f"#{r.label} is {target.type_name}")

    def dangling_references(self) -> list[tuple[int, int]]:
        """(source label, missing label) pairs; empty for a valid model."""
        out = []
        for e in self._entities.values():
            for label in self.references(e):
                if label not in self._entities:
                    out.append((e.label, label))
        return out

    def orphan_resources(self) -> set[int]:
        """Resource entities not reachable from any rooted entity."""
        reachable: set[int] = set()
        stack = list(self._by_gid.values())
        while stack:
            label = stack.pop()
            for ref in self.references(self._entities[label]):
                target = self._entities.get(ref)
                if target is None or ref in reachable or self.schema.types[target.type_name].rooted:
                    continue
                reachable.add(ref)
                stack.append(ref)
        return {e.label for e in self.resources()} - reachable

    def canonical(self) -> dict[str, tuple]:
        """Label-independent content: GlobalId -> (type, attributes).

        References to rooted entities become ``("@", gid)``; resources are
        inlined as nested ``(type, attributes)`` tuples, so shared and
        duplicated resources compare equal.
        """
        memo: dict[int, tuple] = {}
        schema = self.schema

        def value(v, active: frozenset[int]):
            if isinstance(v, Ref):
                return node(v.label, active)
            if isinstance(v, tuple):
                return tuple(node(r.label, active) for r in v)
            return v

        def node(label: int, active: frozenset[int]):
            target = self._entities[label]
            td = schema.types[target.type_name]
            if td.rooted:
                return ("@", target.attrs[td.index(GLOBAL_ID_ATTR)])
            if label in memo:
                return memo[label]
            if label in active:
                raise ModelError(f"reference cycle through resource #{label}")
            inner = active | {label}
            result = (target.type_name, tuple(value(v, inner) for v in target.attrs))
            memo[label] = result
            return result

        out = {}
        for gid, label in self._by_gid.items():
            e = self._entities[label]
            out[gid] = (e.type_name, tuple(value(v, frozenset()) for v in e.attrs))
        return out


class ModelBuilder:
    """Mutable staging area that produces :class:`Model` values."""

    def __init__(self, schema: Schema, model: Model | None = None):
        self.schema = schema
        self.entities: dict[int, Entity] = dict(model.entities) if model is not None else {}
        self._next = (max(self.entities, default=0) + 1)
        self._gids: dict[str, int] = {}
        for e in self.entities.values():
            td = schema.types[e.type_name]
            if td.rooted:
                self._gids[e.attrs[td.index(GLOBAL_ID_ATTR)]] = e.label

    def next_label(self) -> int:
        label = self._next
        self._next += 1
        return label

    def add(self, type_name: str, *values, label: int | None = None, **named) -> Ref:
        """Append an entity; attributes are positional, by name, or both."""
        td = self.schema.types.get(type_name)
        if td is None:
            raise ModelError(f"unknown type {type_name}")
        attrs = list(values) + [None] * (len(td.attributes) - len(values))
        if len(attrs) != len(td.attributes):
            raise ModelError(f"{type_name} takes {len(td.attributes)} attributes")
        for name, v in named.items():
            attrs[td.index(name)] = v
        if label is None:
            label = self.next_label()
        else:
            self._next = max(self._next, label + 1)
        self.put(Entity(label, type_name, tuple(attrs)))
        return Ref(label)

    def put(self, entity: Entity) -> None:
        td = self.schema.types[entity.type_name]
        old = self.entities.get(entity.label)
        if old is not None:
            self._forget(old)
        self.entities[entity.label] = entity
        self._next = max(self._next, entity.label + 1)
        if td.rooted:
            self._gids[entity.attrs[td.index(GLOBAL_ID_ATTR)]] = entity.label

    def remove(self, label: int) -> Entity:
        e = self.entities.pop(label)
        self._forget(e)
        return e

    def _forget(self, e: Entity) -> None:
        td = self.schema.types[e.type_name]
        if td.rooted:
            gid = e.attrs[td.index(GLOBAL_ID_ATTR)]
            if self._gids.get(gid) == e.label:
                del self._gids[gid]

    def get(self, label: int) -> Entity | None:
        return self.entities.get(label)

    def label_of(self, gid: str) -> int | None:
        return self._gids.get(gid)

    def by_gid(self, gid: str) -> Entity:
        return self.entities[self._gids[gid]]

    @property
    def global_ids(self) -> set[str]:
        return set(self._gids)

    def set(self, label: int, **named) -> Entity:
        e = self.entities[label]
        td = self.schema.types[e.type_name]
        attrs = list(e.attrs)
        for name, v in named.items():
            attrs[td.index(name)] = v
        new = Entity(label, e.type_name, tuple(attrs))
        self.put(new)
        return new

    def collect_garbage(self) -> int:
        """Drop resource entities no rooted entity reaches; returns how many."""
        schema = self.schema
        reachable: set[int] = set()
        stack = list(self._gids.values())
        while stack:
            label = stack.pop()
            e = self.entities.get(label)
            if e is None:
                continue
            for ref in iter_refs(schema.types[e.type_name], e.attrs):
                target = self.entities.get(ref)
                if target is None or ref in reachable or schema.types[target.type_name].rooted:
                    continue
                reachable.add(ref)
                stack.append(ref)
        doomed = [label for label, e in self.entities.items()
                  if not schema.types[e.type_name].rooted and label not in reachable]
        for label in doomed:
            del self.entities[label]
        return len(doomed)

    def build(self, validate: bool = True) -> Model:
        return Model(self.schema, self.entities.values(), validate=validate)


# -- owner history ------------------------------------------------------------

def owner_history(model, entity: Entity) -> OwnerHistory | None:
    """The OwnerHistory of a rooted entity, read through ``model.get``."""
    schema = model.schema
    td = schema.types[entity.type_name]
    if not td.rooted or not td.has_attribute(OWNER_HISTORY_ATTR):
        return None
    ref = entity.attrs[td.index(OWNER_HISTORY_ATTR)]
    if ref is None:
        return None
    oh = model.get(ref.label)
    if oh is None:
        return None
    ohd = schema.types[oh.type_name]
    get = lambda name: oh.attrs[ohd.index(name)] if ohd.has_attribute(name) else None  # noqa: E731
    return OwnerHistory(get("OwningUser"), get(CHANGE_ACTION_ATTR), get("CreationDate"))


def is_delete_marked(model, entity: Entity) -> bool:
    history = owner_history(model, entity)
    return history is not None and history.change_action == DELETED


def set_change_action(builder: ModelBuilder, gid: str, action: str | None, *,
                      owning_party: str = "unknown", timestamp: int = 0) -> None:
    """Give the rooted entity a private OwnerHistory carrying ``action``.

    A fresh OwnerHistory is always created, so marking one entity never
    leaks onto others that happened to share the old one.
    """
    schema = builder.schema
    history_type = schema.owner_history_type
    if history_type is None:
        raise ModelError("schema has no owner history type")
    root = builder.by_gid(gid)
    td = schema.types[root.type_name]
    old_ref = root.attrs[td.index(OWNER_HISTORY_ATTR)]
    htd = schema.types[history_type]
    if old_ref is not None and old_ref.label in builder.entities:
        attrs = list(builder.entities[old_ref.label].attrs)
    else:
        attrs = [None] * len(htd.attributes)
        if htd.has_attribute("OwningUser"):
            attrs[htd.index("OwningUser")] = owning_party
        if htd.has_attribute("CreationDate"):
            attrs[htd.index("CreationDate")] = timestamp
    attrs[htd.index(CHANGE_ACTION_ATTR)] = action
    new_ref = builder.add(history_type, *attrs)
    builder.set(root.label, **{OWNER_HISTORY_ATTR: new_ref})


# -- relations ----------------------------------------------------------------

def is_relation(schema: Schema, entity: Entity) -> RelationKind:
    return schema.types[entity.type_name].relation_kind


def relating_labels(schema: Schema, entity: Entity) -> list[int]:
    td = schema.types[entity.type_name]
    out = []
    for i in td.relating_indexes:
        v = entity.attrs[i]
        if v is not None:
            out.append(v.label)
    return out


def related_labels(schema: Schema, entity: Entity) -> list[int]:
    td = schema.types[entity.type_name]
    out: list[int] = []
    for i in td.related_indexes:
        v = entity.attrs[i]
        if v is None:
            continue
        if isinstance(v, Ref):
            out.append(v.label)
        else:
            out.extend(r.label for r in v)
    return out


# -- exchangeable entities ----------------------------------------------------

@dataclass(frozen=True)
class ExchangeableEntity:
    root: Entity
    resources: tuple[Entity, ...]

    @property
    def labels(self) -> frozenset[int]:
        return frozenset([self.root.label, *(r.label for r in self.resources)])


def _resource_closure(lookup, schema: Schema, root: Entity) -> list[Entity]:
    seen: set[int] = set()
    out: list[Entity] = []
    stack = [root]
    while stack:
        e = stack.pop()
        for label in iter_refs(schema.types[e.type_name], e.attrs):
            if label in seen:
                continue
            target = lookup(label)
            if target is None or schema.types[target.type_name].rooted:
                continue
            seen.add(label)
            out.append(target)
            stack.append(target)
    out.sort(key=lambda e: e.label)
    return out


def expand_exchangeable(model: Model, root_id: str) -> ExchangeableEntity:
    """A rooted entity plus every resource it reaches without crossing another rooted entity."""
    label = model.label_of(root_id)
    if label is None:
        raise KeyError(f"unknown GlobalId {root_id}")
    root = model[label]
    if not model.is_rooted(root):
        raise ModelError(f"{root_id} is not a rooted entity")
    return ExchangeableEntity(root, tuple(_resource_closure(model.get, model.schema, root)))


# -- fragments ----------------------------------------------------------------

@dataclass(frozen=True)
class Fragment:
    """One exchangeable entity detached from its model.

    Labels are local: the root is ``#1``, resources follow in their original
    order, and references to other rooted entities point at labels listed in
    ``external`` (label -> GlobalId).
    """

    root: Entity
    resources: tuple[Entity, ...]
    external: Mapping[int, str] = field(default_factory=dict)

    @property
    def gid(self) -> str:
        return self.root.attrs[0]

    @property
    def type_name(self) -> str:
        return self.root.type_name

    def get(self, label: int) -> Entity | None:
        if label == self.root.label:
            return self.root
        for r in self.resources:
            if r.label == label:
                return r
        return None

    def entities(self) -> tuple[Entity, ...]:
        return (self.root, *self.resources)

    @property
    def referenced_ids(self) -> frozenset[str]:
        return frozenset(self.external.values())

    def view(self, schema: Schema) -> FragmentView:
        return FragmentView(schema, self)


class FragmentView:
    """Read-only model-like wrapper so rule evaluation can run on a fragment."""

    def __init__(self, schema: Schema, fragment: Fragment):
        self.schema = schema
        self.fragment = fragment
        self._by_label = {e.label: e for e in fragment.entities()}

    def get(self, label: int) -> Entity | None:
        return self._by_label.get(label)

    @property
    def root(self) -> Entity:
        return self.fragment.root


def make_fragment(schema: Schema, root: Entity, resources: Iterable[Entity], lookup) -> Fragment:
    """Relabel ``root`` and its resources into fragment-local labels.

    ``lookup(label)`` resolves references that leave the closure; they must
    land on rooted entities and are recorded in ``external``.
    """
    resources = sorted(resources, key=lambda e: e.label)
    mapping = {root.label: 1}
    for i, r in enumerate(resources, start=2):
        mapping[r.label] = i
    outside: dict[str, int] = {}
    next_label = len(mapping) + 1
    pending = []
    for e in (root, *resources):
        for label in iter_refs(schema.types[e.type_name], e.attrs):
            if label not in mapping:
                target = lookup(label)
                if target is None:
                    raise ModelError(f"#{e.label} references unknown #{label}")
                td = schema.types[target.type_name]
                if not td.rooted:
                    raise ModelError(f"#{label} is a resource outside the exchangeable closure")
                pending.append(target.attrs[td.index(GLOBAL_ID_ATTR)])
    for gid in sorted(set(pending)):
        outside[gid] = next_label
        next_label += 1
    for e in (root, *resources):
        for label in iter_refs(schema.types[e.type_name], e.attrs):
            if label not in mapping:
                target = lookup(label)
                td = schema.types[target.type_name]
                mapping[label] = outside[target.attrs[td.index(GLOBAL_ID_ATTR)]]

    def remap(entity: Entity) -> Entity:
        td = schema.types[entity.type_name]
        return Entity(mapping[entity.label], entity.type_name,
                      map_refs(td, entity.attrs, lambda x: Ref(mapping[x])))

    return Fragment(remap(root), tuple(remap(r) for r in resources),
                    {label: gid for gid, label in outside.items()})


def fragments_of(model: Model, gids: Iterable[str] | None = None) -> dict[str, Fragment]:
    """Split a model into per-GlobalId fragments (all rooted entities by default)."""
    schema = model.schema
    out = {}
    for gid in (sorted(model.global_ids) if gids is None else gids):
        root = model.by_gid(gid)
        resources = _resource_closure(model.get, schema, root)
        out[gid] = make_fragment(schema, root, resources, model.get)
    return out


def assemble(schema: Schema, fragments: Iterable[Fragment], *, strict: bool = False,
             dropped: list[str] | None = None) -> Model:
    """Join fragments back into one self-contained model.

    References to GlobalIds that no fragment supplies are repaired: relation
    endpoint lists are narrowed, relations that lose a mandatory endpoint or
    their last related entity are dropped, and other entities lose optional
    references or are dropped when the reference was mandatory.  Drops
    cascade to a fixed point.  With ``strict`` any unresolved reference is an
    error instead.  Dropped GlobalIds are appended to ``dropped``.
    """
    fragments = list(fragments)
    present: dict[str, Fragment] = {}
    for f in fragments:
        if f.gid in present:
            raise ModelError(f"GlobalId {f.gid} supplied twice")
        present[f.gid] = f

    alive = set(present)
    while True:
        doomed = set()
        for gid in alive:
            f = present[gid]
            if _unresolvable(schema, f, alive, strict):
                doomed.add(gid)
        if not doomed:
            break
        alive -= doomed
        if dropped is not None:
            dropped.extend(sorted(doomed))

    builder = ModelBuilder(schema)
    root_labels: dict[str, int] = {}
    label = 1
    order = [f for f in fragments if f.gid in alive]
    for f in order:
        root_labels[f.gid] = label
        label += 1
    for f in order:
        local = {f.root.label: root_labels[f.gid]}
        for r in f.resources:
            local[r.label] = label
            label += 1
        for ext_label, gid in f.external.items():
            if gid in alive:
                local[ext_label] = root_labels[gid]
        for e in f.entities():
            td = schema.types[e.type_name]
            attrs = map_refs(td, e.attrs, lambda x: Ref(local[x]) if x in local else None)
            builder.put(Entity(local[e.label], e.type_name, attrs))
    return builder.build()


def _unresolvable(schema: Schema, f: Fragment, alive: set[str], strict: bool) -> bool:
    missing = {label for label, gid in f.external.items() if gid not in alive}
    if not missing:
        return False
    if strict:
        raise ModelError(f"{f.gid} references unavailable entities {sorted(f.external[m] for m in missing)}")
    for e in f.entities():
        td = schema.types[e.type_name]
        is_root_relation = e is f.root and td.relationship
        for i in td.reference_indexes:
            v = e.attrs[i]
            if v is None:
                continue
            attr = td.attributes[i]
            if isinstance(v, Ref):
                if v.label in missing and not attr.optional:
                    return True
            else:
                kept = [r for r in v if r.label not in missing]
                if is_root_relation and i in td.related_indexes and not kept:
                    return True
    return False
