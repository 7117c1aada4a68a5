"""Brute-force reference implementations used to cross-check the library.

These deliberately share no evaluation code with ``bimshare.mvd`` or
``bimshare.extract``: constraint trees are walked as written (no DNF),
attribute paths are followed by name, and relation retention rescans every
relation until nothing changes.
"""

from __future__ import annotations

import math

from bimshare.model import Model, Ref
from bimshare.mvd import AttributeConstraint, And, Or

DELETED = "DELETED"


def _supertypes(schema, type_name):
    t = type_name
    while t is not None:
        yield t
        t = schema.types[t].supertype


def _attr_value(schema, entity, name):
    td = schema.types[entity.type_name]
    for i, a in enumerate(td.attributes):
        if a.name == name:
            return entity.attrs[i], a
    raise KeyError(name)


def _terminal_values(model, entity, path):
    """Every value reachable along ``path``, fanning out over lists."""
    frontier = [entity]
    for name in path[:-1]:
        nxt = []
        for e in frontier:
            v, _ = _attr_value(model.schema, e, name)
            refs = [v] if isinstance(v, Ref) else list(v or ())
            for r in refs:
                target = model.get(r.label)
                if target is not None:
                    nxt.append(target)
        frontier = nxt
    out = []
    for e in frontier:
        v, a = _attr_value(model.schema, e, path[-1])
        if v is not None:
            out.append((v, a))
    return out


def _same(a, b):
    if isinstance(a, float) and isinstance(b, float):
        return a == b or math.isclose(a, b, rel_tol=1e-9)
    return type(a) is type(b) and a == b


def leaf_holds(model, entity, c: AttributeConstraint) -> bool:
    for v, a in _terminal_values(model, entity, c.path):
        if c.op == "exists":
            if a.kind.value == "LIST":
                if len(v) > 0:
                    return True
            else:
                return True
        elif c.op == "contains":
            if c.value in v:
                return True
        elif c.op == "eq":
            if _same(v, c.value):
                return True
        elif c.op == "in":
            if any(_same(v, w) for w in c.value):
                return True
    return False


def tree_holds(model, entity, expr) -> bool:
    if isinstance(expr, AttributeConstraint):
        return leaf_holds(model, entity, expr)
    if isinstance(expr, And):
        return all(tree_holds(model, entity, x) for x in expr.items)
    if isinstance(expr, Or):
        return any(tree_holds(model, entity, x) for x in expr.items)
    raise TypeError(expr)


def _all_false(expr) -> bool:
    """Value of a monotone tree with every leaf false: true iff it is a tautology."""
    if isinstance(expr, AttributeConstraint):
        return False
    if isinstance(expr, And):
        return all(_all_false(x) for x in expr.items)
    return any(_all_false(x) for x in expr.items)


def _gid(entity):
    return entity.attrs[0]


def _is_relation(schema, type_name):
    return "IfcRelationship" in _supertypes(schema, type_name)


def _endpoint_groups(schema, rel):
    """(relating labels, related label groups) read from attribute names."""
    td = schema.types[rel.type_name]
    relating, related = [], []
    for a, v in zip(td.attributes, rel.attrs):
        if v is None:
            continue
        if a.name.startswith("Relating"):
            relating.append(v.label)
        elif a.name.startswith("Related"):
            related.append([v.label] if isinstance(v, Ref) else [r.label for r in v])
    return relating, related


def _targets_relations(schema, view) -> bool:
    """Does some rule's type have a relationship type at or below it?"""
    return any(_is_relation(schema, t) for r in view.rules for t in schema.types
               if r.entity_type in _supertypes(schema, t))


def select(model: Model, view) -> dict[int, str]:
    """label -> "constrained" / "type" for every rooted entity some rule selects."""
    schema = model.schema
    targets_relations = _targets_relations(schema, view)
    out = {}
    for e in model:
        if not schema.types[e.type_name].rooted:
            continue
        if _is_relation(schema, e.type_name) and not targets_relations:
            continue
        kind = None
        for rule in view.rules:
            if rule.entity_type not in _supertypes(schema, e.type_name):
                continue
            if tree_holds(model, e, rule.expr):
                if _all_false(rule.expr):
                    kind = kind or "type"
                else:
                    kind = "constrained"
        if kind:
            out[e.label] = kind
    return out


def _closure(model, selected, candidates):
    retained = set()
    while True:
        alive = selected | retained
        grew = False
        for rel in candidates:
            if rel.label in retained:
                continue
            relating, related = _endpoint_groups(model.schema, rel)
            if related and all(x in alive for x in relating) and \
                    all(any(x in alive for x in g) for g in related):
                retained.add(rel.label)
                grew = True
        if not grew:
            return retained


def oracle_extract(model: Model, view, mode: str = "strict") -> dict:
    """Canonical form (as ``Model.canonical``) of the expected extraction result."""
    schema = model.schema
    kinds = select(model, view)
    relations = [e for e in model if schema.types[e.type_name].rooted and _is_relation(schema, e.type_name)]
    targets_relations = _targets_relations(schema, view)
    selected_kinds = {k: v for k, v in kinds.items() if not _is_relation(schema, model[k].type_name)}
    if targets_relations:
        candidates = [model[k] for k in kinds if _is_relation(schema, model[k].type_name)]
    else:
        candidates = relations
    selected = set(selected_kinds)
    retained = _closure(model, selected, candidates)
    if mode == "strict" and any(not _all_false(r.expr) for r in view.rules):
        linked = set()
        for label in retained:
            relating, related = _endpoint_groups(schema, model[label])
            ends = [x for x in relating if x in selected] + [x for g in related for x in g if x in selected]
            if any(selected_kinds.get(x) == "constrained" for x in ends):
                linked.update(ends)
        selected = {x for x in selected if selected_kinds[x] == "constrained" or x in linked}
        retained = _closure(model, selected, candidates)
    keep = selected | retained

    # Drop entities whose mandatory references leave the kept set, to a fixed point.
    rooted = {e.label for e in model if schema.types[e.type_name].rooted}
    while True:
        doomed = set()
        for label in keep:
            e = model[label]
            if _is_relation(schema, e.type_name):
                relating, related = _endpoint_groups(schema, e)
                if any(x not in keep for x in relating) or any(not any(x in keep for x in g) for g in related):
                    doomed.add(label)
                    continue
            for target, optional in _rooted_refs(model, e, set()):
                if target in rooted and target not in keep and not optional and \
                        not _is_relation(schema, e.type_name):
                    doomed.add(label)
        if not doomed:
            break
        keep -= doomed
    return {(_gid(model[label])): _canon(model, model[label], keep, rooted, top=True) for label in keep}


def _rooted_refs(model, e, seen):
    """(target label, reference is optional) for references out of e's resource closure."""
    schema = model.schema
    td = schema.types[e.type_name]
    for a, v in zip(td.attributes, e.attrs):
        refs = [v] if isinstance(v, Ref) else (list(v) if isinstance(v, tuple) and v and isinstance(v[0], Ref)
                                               else [])
        for r in refs:
            t = model[r.label]
            if schema.types[t.type_name].rooted:
                yield r.label, a.optional
            elif r.label not in seen:
                seen.add(r.label)
                yield from _rooted_refs(model, t, seen)


def _canon(model, e, keep, rooted, top=False):
    schema = model.schema
    td = schema.types[e.type_name]
    attrs = []
    for a, v in zip(td.attributes, e.attrs):
        if isinstance(v, Ref):
            if v.label in rooted:
                attrs.append(("@", _gid(model[v.label])) if v.label in keep else None)
            else:
                attrs.append(_canon(model, model[v.label], keep, rooted))
        elif isinstance(v, tuple) and a.kind.value == "LIST":
            kept = tuple(("@", _gid(model[r.label])) if r.label in rooted else _canon(model, model[r.label], keep,
                                                                                         rooted)
                         for r in v if r.label not in rooted or r.label in keep)
            attrs.append(kept)
        else:
            attrs.append(v)
    if e.type_name == "IfcOwnerHistory" and attrs[1] == DELETED:
        attrs[1] = "NOCHANGE"
    return (e.type_name, tuple(attrs))
