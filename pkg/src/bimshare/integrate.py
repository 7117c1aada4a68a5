"""Merging a modified sub-model back into a base model.

Four steps: classify every rooted entity of the sub-model (ADD, UPDATE or
DELETE), pre-correct relations carried by the sub-model, apply the
operations, then post-correct relations in the merged result.

Rule numbers used in edits and logs:

1. a [1:1] relation loses its relating or related entity -> delete it
2. a [1:n] relation loses its relating entity -> delete it
3. both ends of a base [1:1] relation are in the sub-model, the relation is not -> delete it
4. a delete-marked [1:n] relation still has related entities outside the
   sub-model -> keep it, minus the related entities the sub-model carries
5. a related entity is deleted -> remove it from the [1:n] list
6. a new (ADD) related entity -> add it to the [1:n] list
7. a [1:n] relation whose related list ends up empty -> delete it
"""

from __future__ import annotations

import enum
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

from .errors import ConflictError, IntegrityError, ModelError
from .model import (
    Entity,
    Model,
    ModelBuilder,
    Ref,
    _resource_closure,
    is_delete_marked,
)
from .schema import Kind, RelationKind

logger = logging.getLogger(__name__)


class EntityState(str, enum.Enum):
    ADD = "ADD"
    UPDATE = "UPDATE"
    DELETE = "DELETE"


@dataclass(frozen=True)
class RelationEdit:
    action: str  # delete | narrow | widen
    relation: str
    endpoints: tuple[str, ...] = ()
    rule: int = 0


@dataclass
class IntegrationPlan:
    states: dict[str, EntityState]
    relation_edits: list[RelationEdit] = field(default_factory=list)
    base_ids: frozenset[str] | None = None  # ids in the base when states were analysed
    sub_ids: frozenset[str] = frozenset()
    log: list[str] = field(default_factory=list)

    def deleted_relations(self) -> set[str]:
        return {e.relation for e in self.relation_edits if e.action == "delete"}

    def removed_endpoints(self, relation: str) -> set[str]:
        out: set[str] = set()
        for e in self.relation_edits:
            if e.action == "narrow" and e.relation == relation:
                out.update(e.endpoints)
        return out


def _model(sub) -> Model:
    return sub if isinstance(sub, Model) else sub.model


def _gid(model: Model, label: int) -> str | None:
    e = model.get(label)
    return None if e is None else model.gid_of(e)


def analyze_states(sub, base: Model) -> dict[str, EntityState]:
    sub = _model(sub)
    states = {}
    for e in sub.rooted():
        gid = sub.gid_of(e)
        if is_delete_marked(sub, e):
            states[gid] = EntityState.DELETE
        elif base.has_gid(gid):
            states[gid] = EntityState.UPDATE
        else:
            states[gid] = EntityState.ADD
    return states


def _ends(model: Model, rel: Entity) -> tuple[list[str | None], list[str | None]]:
    td = model.schema.types[rel.type_name]
    relating = [_gid(model, rel.attrs[i].label) for i in td.relating_indexes if rel.attrs[i] is not None]
    related: list[str | None] = []
    for i in td.related_indexes:
        v = rel.attrs[i]
        if v is None:
            continue
        refs = v if isinstance(v, tuple) else (v,)
        related.extend(_gid(model, r.label) for r in refs)
    return relating, related


def precorrect(sub, states: Mapping[str, EntityState]) -> list[RelationEdit]:
    """Rules 1, 2, 5 and 6 over the relations the sub-model carries."""
    sub = _model(sub)
    schema = sub.schema
    edits = []
    for rel in sub.relations():
        gid = sub.gid_of(rel)
        if states.get(gid) is EntityState.DELETE:
            continue  # delete-marked relations are settled by apply and rule 4
        kind = schema.types[rel.type_name].relation_kind
        relating, related = _ends(sub, rel)
        deleted = lambda g: states.get(g) is EntityState.DELETE  # noqa: E731
        if kind is RelationKind.ONE_TO_ONE:
            if any(deleted(g) for g in relating + related):
                edits.append(RelationEdit("delete", gid, rule=1))
        elif kind is RelationKind.ONE_TO_MANY:
            if any(deleted(g) for g in relating):
                edits.append(RelationEdit("delete", gid, rule=2))
                continue
            gone = tuple(g for g in related if deleted(g))
            if gone:
                edits.append(RelationEdit("narrow", gid, gone, rule=5))
            new = tuple(g for g in related if states.get(g) is EntityState.ADD)
            if new:
                edits.append(RelationEdit("widen", gid, new, rule=6))
    return edits


def make_plan(sub, base: Model) -> IntegrationPlan:
    sub_model = _model(sub)
    states = analyze_states(sub_model, base)
    return IntegrationPlan(states, precorrect(sub_model, states), base.global_ids, sub_model.global_ids)


def _merge_list(base_list: list[str], sub_list: list[str], sub_ids: frozenset[str],
                removed: set[str]) -> list[str]:
    """Base members the sub-model did not see stay; members it saw follow its list."""
    kept = [g for g in base_list if g not in sub_ids or g in sub_list]
    seen = set(kept)
    kept += [g for g in sub_list if g not in seen]
    return [g for g in kept if g not in removed]


def apply(base: Model, sub, plan: IntegrationPlan | Mapping[str, EntityState]) -> Model:
    """Carry out ADD, UPDATE and DELETE plus the pre-computed relation edits.

    The result is not validated: references to deleted entities may remain
    until :func:`postcorrect` repairs them.
    """
    sub = _model(sub)
    if not isinstance(plan, IntegrationPlan):
        plan = IntegrationPlan(dict(plan), precorrect(sub, plan), None, sub.global_ids)
    schema = base.schema
    states = plan.states
    sub_ids = plan.sub_ids or sub.global_ids
    builder = ModelBuilder(schema, base)
    drop = plan.deleted_relations()

    reserved: dict[str, int] = {}

    def label_for(gid: str) -> int:
        label = builder.label_of(gid)
        if label is None:
            label = reserved.get(gid)
        if label is None:
            label = base.label_of(gid)
        if label is None:
            label = builder.next_label()  # dangling on purpose; postcorrect removes it
            reserved[gid] = label
        return label

    for gid, state in sorted(states.items()):
        if state is EntityState.UPDATE and builder.label_of(gid) is None:
            raise ConflictError(gid)
        if state is EntityState.DELETE and builder.label_of(gid) is None and plan.base_ids is not None \
                and gid in plan.base_ids:
            raise ConflictError(gid)

    for gid, state in sorted(states.items()):
        if state is EntityState.ADD and gid not in drop:
            reserved[gid] = builder.next_label()

    # deletions first so re-inserted entities never collide with removed ones
    for gid, state in sorted(states.items()):
        if state is not EntityState.DELETE and gid not in drop:
            continue
        label = builder.label_of(gid)
        if label is None:
            continue
        entity = builder.get(label)
        td = schema.types[entity.type_name]
        if state is EntityState.DELETE and td.relation_kind is RelationKind.ONE_TO_MANY:
            _, base_related = _ends(base, base[label])
            if any(g not in sub_ids for g in base_related):
                plan.log.append(f"rule 4 deferred for {gid}")
                continue
        builder.remove(label)
        plan.log.append(f"deleted {gid}" + (" (relation edit)" if gid in drop else ""))

    for gid, state in sorted(states.items()):
        if state is EntityState.DELETE or gid in drop:
            continue
        root = sub.by_gid(gid)
        td = schema.types[root.type_name]
        target = builder.label_of(gid) if state is EntityState.UPDATE else reserved[gid]
        resources = _resource_closure(sub.get, schema, root)
        local = {root.label: target}
        for r in resources:
            local[r.label] = builder.next_label()

        def remap(label: int) -> int:
            if label in local:
                return local[label]
            return label_for(sub.gid_of(sub[label]))

        attrs = list(root.attrs)
        for i in td.reference_indexes:
            v = attrs[i]
            if v is None:
                continue
            if isinstance(v, Ref):
                attrs[i] = Ref(remap(v.label))
                continue
            sub_list = [sub.gid_of(sub[r.label]) for r in v]
            removed = plan.removed_endpoints(gid)
            if i in td.related_indexes and td.attributes[i].kind is Kind.LIST:
                old = base.get(base.label_of(gid)) if state is EntityState.UPDATE else None
                if old is not None and old.type_name == root.type_name and old.attrs[i] is not None:
                    base_list = [base.gid_of(base[r.label]) for r in old.attrs[i]]
                    merged = _merge_list(base_list, sub_list, sub_ids, removed)
                else:
                    merged = [g for g in sub_list if g not in removed]
                attrs[i] = tuple(Ref(label_for(g)) for g in merged)
            else:
                attrs[i] = tuple(Ref(label_for(g)) for g in sub_list)
        builder.put(Entity(target, root.type_name, tuple(attrs)))
        for r in resources:
            rtd = schema.types[r.type_name]
            r_attrs = tuple(
                (Ref(remap(v.label)) if isinstance(v, Ref)
                 else tuple(Ref(remap(x.label)) for x in v) if isinstance(v, tuple) else v)
                for v in r.attrs
            ) if rtd.reference_indexes else r.attrs
            builder.put(Entity(local[r.label], r.type_name, r_attrs))
        plan.log.append(f"{state.value.lower()} {gid}")

    builder.collect_garbage()
    return builder.build(validate=False)


def postcorrect(model: Model, plan: IntegrationPlan | None = None) -> Model:
    """Rules 3, 4 and 7 plus re-checks of rules 1, 2 and 5, to a fixed point.

    Rules 3 and 4 need to know what the sub-model carried, so they only run
    when ``plan`` is given.  Remaining dangling references outside relation
    endpoints raise :class:`IntegrityError`.
    """
    schema = model.schema
    builder = ModelBuilder(schema, model)
    sub_ids = plan.sub_ids if plan is not None else frozenset()
    log = plan.log if plan is not None else []
    rule4_done: set[str] = set()

    def gid_at(label: int) -> str | None:
        e = builder.get(label)
        if e is None:
            return None
        td = schema.types[e.type_name]
        return e.attrs[0] if td.rooted else None

    changed = True
    while changed:
        changed = False
        for label in sorted(builder.entities):
            rel = builder.get(label)
            if rel is None:
                continue
            td = schema.types[rel.type_name]
            if not td.relationship or td.relation_kind is RelationKind.NONE:
                continue
            gid = rel.attrs[0]
            relating = [rel.attrs[i].label for i in td.relating_indexes if rel.attrs[i] is not None]
            attrs = list(rel.attrs)

            if plan is not None and td.relation_kind is RelationKind.ONE_TO_MANY \
                    and plan.states.get(gid) is EntityState.DELETE and gid not in rule4_done:
                rule4_done.add(gid)
                for i in td.related_indexes:
                    if isinstance(attrs[i], tuple):
                        attrs[i] = tuple(r for r in attrs[i] if gid_at(r.label) not in sub_ids)
                log.append(f"rule 4 narrowed {gid}")

            if any(builder.get(x) is None for x in relating):
                builder.remove(label)
                log.append(f"rule {1 if td.relation_kind is RelationKind.ONE_TO_ONE else 2} deleted {gid}")
                changed = True
                continue

            if td.relation_kind is RelationKind.ONE_TO_ONE:
                ends = relating + [rel.attrs[i].label for i in td.related_indexes if rel.attrs[i] is not None]
                if any(builder.get(x) is None for x in ends):
                    builder.remove(label)
                    log.append(f"rule 1 deleted {gid}")
                    changed = True
                    continue
                if plan is not None and gid not in sub_ids and ends \
                        and all(gid_at(x) in sub_ids for x in ends):
                    builder.remove(label)
                    log.append(f"rule 3 deleted {gid}")
                    changed = True
                    continue
            else:
                empty = False
                for i in td.related_indexes:
                    v = attrs[i]
                    if isinstance(v, tuple):
                        alive = tuple(r for r in v if builder.get(r.label) is not None)
                        if alive != v:
                            log.append(f"rule 5 narrowed {gid}")
                        attrs[i] = alive
                        empty = empty or not alive
                    elif v is not None and builder.get(v.label) is None:
                        empty = True
                if empty:
                    builder.remove(label)
                    log.append(f"rule 7 deleted {gid}")
                    changed = True
                    continue
            if tuple(attrs) != rel.attrs:
                builder.put(Entity(label, rel.type_name, tuple(attrs)))
                changed = True

    builder.collect_garbage()
    result = builder.build(validate=False)
    dangling = result.dangling_references()
    if dangling:
        src, missing = dangling[0]
        raise IntegrityError(
            f"{len(dangling)} dangling reference(s) remain after correction, e.g. #{src} -> #{missing}")
    try:
        result.validate()
    except ModelError as exc:
        raise IntegrityError(str(exc)) from None
    return result


def integrate(base: Model, sub, plan_out: list | None = None) -> Model:
    """analyze -> precorrect -> apply -> postcorrect."""
    plan = make_plan(sub, base)
    merged = apply(base, sub, plan)
    result = postcorrect(merged, plan)
    if plan_out is not None:
        plan_out.append(plan)
    return result
