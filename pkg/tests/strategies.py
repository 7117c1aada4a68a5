"""Random generators for property tests: arbitrary schema-valid models and wire messages."""

from __future__ import annotations

import random

from bimshare.model import Model, ModelBuilder, Ref, new_global_id
from bimshare.schema import Kind

# Characters that stress SPF string escaping: quotes, backslashes, non-ASCII, astral.
TRICKY = "a'b\\cÄé中😀 \u0007 '' \\X2\\ \\S\\"


def random_text(rng: random.Random, max_len: int = 12) -> str:
    pool = "abcXYZ 019_-" + TRICKY
    return "".join(rng.choice(pool) for _ in range(rng.randint(0, max_len)))


def random_real(rng: random.Random) -> float:
    choice = rng.random()
    if choice < 0.2:
        return float(rng.randint(-5, 5))
    if choice < 0.4:
        return rng.choice([1e20, -2.5e-12, 0.1, 1 / 3, 123456789.125, 0.0])
    return rng.uniform(-1e6, 1e6)


def _value(rng, attr, pool_by_type, schema):
    if attr.optional and rng.random() < 0.25:
        return None
    k = attr.kind
    if k is Kind.STRING:
        return random_text(rng)
    if k is Kind.INTEGER:
        return rng.randint(-10**12, 10**12)
    if k is Kind.REAL:
        return random_real(rng)
    if k is Kind.BOOLEAN:
        return rng.random() < 0.5
    if k is Kind.ENUM:
        return rng.choice(attr.tags)
    candidates = [label for t in schema.descendants(attr.target) for label in pool_by_type.get(t, ())]
    if k is Kind.REF:
        if not candidates:
            return None if attr.optional else _MISSING
        return Ref(rng.choice(candidates))
    if not candidates:
        return None if attr.optional else _MISSING
    return tuple(Ref(x) for x in rng.sample(candidates, rng.randint(1, min(4, len(candidates)))))


_MISSING = object()


def random_model(schema, rng: random.Random, size: int) -> Model:
    """A schema-valid model of about ``size`` entities using every concrete type."""
    b = ModelBuilder(schema)
    pool: dict[str, list[int]] = {}
    concrete = sorted(t.name for t in schema.types.values() if not t.abstract)
    resources = [t for t in concrete if not schema.types[t].rooted]
    attempts = 0
    while len(b.entities) < size and attempts < size * 20:
        attempts += 1
        # resources first so rooted entities have something to point at
        t = rng.choice(resources if len(b.entities) < size // 4 else concrete)
        td = schema.types[t]
        attrs = []
        for i, a in enumerate(td.attributes):
            if td.rooted and i == 0:
                attrs.append(new_global_id(rng))
                continue
            v = _value(rng, a, pool, schema)
            if v is _MISSING:
                break
            attrs.append(v)
        else:
            ref = b.add(t, *attrs)
            pool.setdefault(t, []).append(ref.label)
    b.collect_garbage()
    return b.build()


KIND_NAMES = ("RegisterParty", "RegisterShared", "Locate", "Authorize", "TransferOwner",
              "PropagateNotify", "Replicate", "FetchEntities", "Ack", "Error")


def random_json(rng: random.Random, depth: int = 0):
    r = rng.random()
    if depth > 2 or r < 0.3:
        return rng.choice([None, True, False, rng.randint(-2**40, 2**40), rng.uniform(-1e9, 1e9),
                           random_text(rng)])
    if r < 0.65:
        return [random_json(rng, depth + 1) for _ in range(rng.randint(0, 4))]
    return {random_text(rng, 6): random_json(rng, depth + 1) for _ in range(rng.randint(0, 4))}


def random_case(schema, seed: int, max_entities: int = 2000, max_constraints: int = 4):
    """A seeded (model, view) pair: a synthetic model of varying size and shape plus a random view."""
    from bimshare.synth import SynthConfig, generate, random_view

    rng = random.Random(seed)
    config = SynthConfig.for_size(rng.randint(20, max_entities // 2),
                                  opening_rate=rng.choice([0.0, 0.3, 0.8]),
                                  placements=rng.random() < 0.7)
    model = generate(schema, seed, config).model
    view = random_view(schema, rng, model, max_constraints=max_constraints)
    return model, view


def mutate(sub_model: Model, rng: random.Random, edits: int = 4) -> Model:
    """Random edits a party might make to an extracted sub-model.

    Renames, DELETE marks, new products hooked into relations, relation list
    members dropped and relations removed outright.  The result is a valid
    model over the same schema.
    """
    from bimshare.model import set_change_action
    from bimshare.schema import Kind

    schema = sub_model.schema
    b = ModelBuilder(schema, sub_model)
    for _ in range(edits):
        rooted = sorted(b.global_ids)
        if not rooted:
            break
        gid = rng.choice(rooted)
        entity = b.by_gid(gid)
        td = schema.types[entity.type_name]
        op = rng.choice(["rename", "delete", "add", "drop-member", "drop-relation"])
        if op == "rename":
            b.set(entity.label, Name=f"edited {rng.randrange(10**6)}")
        elif op == "delete":
            set_change_action(b, gid, "DELETED", owning_party="editor")
        elif op == "add":
            lists = [(e, i) for e in list(b.entities.values()) if schema.types[e.type_name].relationship
                     for i in schema.types[e.type_name].related_indexes
                     if schema.types[e.type_name].attributes[i].kind is Kind.LIST
                     and schema.is_subtype("IfcColumn", schema.types[e.type_name].attributes[i].target)]
            gid = new_global_id(rng)
            while b.label_of(gid) is not None:
                gid = new_global_id(rng)
            col = b.add("IfcColumn", gid, None, f"new {rng.randrange(10**6)}",
                        ObjectType=rng.choice(["Structural", "Drainage"]))
            if lists:
                rel, i = rng.choice(lists)
                attrs = list(b.get(rel.label).attrs)
                attrs[i] = tuple(attrs[i]) + (col,)
                b.set(rel.label, **{schema.types[rel.type_name].attributes[i].name: attrs[i]})
        elif op == "drop-member":
            if not td.relationship:
                continue
            for i in td.related_indexes:
                v = entity.attrs[i]
                if isinstance(v, tuple) and len(v) > 1:
                    keep = list(v)
                    keep.pop(rng.randrange(len(keep)))
                    b.set(entity.label, **{td.attributes[i].name: tuple(keep)})
                    break
        elif op == "drop-relation":
            if td.relationship:
                b.remove(entity.label)
    b.collect_garbage()
    return b.build()
