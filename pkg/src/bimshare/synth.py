"""Seeded synthetic building models and random views.

Models follow a familiar shape: one project, a site, buildings split into
storeys, products contained in storeys (walls carry openings filled by doors
or windows), tasks assigned to products, actors assigned to tasks and type
objects defining products.  Everything is drawn from ``random.Random(seed)``
so a seed always yields the same model.
"""

from __future__ import annotations

import random
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

from .model import Fragment, Model, ModelBuilder, Ref, fragments_of, new_global_id
from .mvd import AttributeConstraint, And, ModelView, Or, make_rule
from .schema import Kind, Schema
from .spf import write_fragments

PRODUCT_TYPES = ("IfcColumn", "IfcBeam", "IfcSlab", "IfcWall")
DISCIPLINES = ("Structural", "Drainage", "HVAC", "Electrical", "Architectural")
STATUSES = ("NOTSTARTED", "STARTED", "COMPLETED")
ZONES = ("Zone A", "Zone B", "Zone C", "Zone D")


@dataclass
class SynthConfig:
    buildings: int = 1
    storeys: int = 3
    products_per_storey: int = 8
    opening_rate: float = 0.3  # share of walls with an opening and a filling
    tasks: int = 4
    max_task_products: int = 4
    actors: int = 2
    element_types: int = 2
    placements: bool = True
    owning_user: str = "designer"
    product_types: tuple[str, ...] = PRODUCT_TYPES

    @classmethod
    def for_size(cls, entities: int, **overrides) -> SynthConfig:
        """A configuration whose model has roughly ``entities`` instances."""
        storeys = max(1, min(40, entities // 400))
        per_storey = max(1, entities // (storeys * 5))
        tasks = max(1, entities // 60)
        return cls(storeys=storeys, products_per_storey=per_storey, tasks=tasks,
                   actors=max(1, tasks // 10), **overrides)


@dataclass
class Synthetic:
    """A generated model and which rooted entities are its own.

    Entities in ``foreign`` are stand-ins for other parties' products that
    this model's relations point at; they are not part of the party's data.
    """

    model: Model
    foreign: frozenset[str] = frozenset()
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def own_ids(self) -> list[str]:
        return sorted(self.model.global_ids - self.foreign)

    def fragments(self) -> dict[str, Fragment]:
        return fragments_of(self.model, self.own_ids)

    def spf(self) -> str:
        """Own entities as one SPF file; foreign targets go in its REFERENCE section."""
        return write_fragments(self.fragments().values(), self.model.schema)


class _Gen:
    def __init__(self, schema: Schema, rng: random.Random, config: SynthConfig):
        self.schema = schema
        self.rng = rng
        self.cfg = config
        self.b = ModelBuilder(schema)
        self.counts: dict[str, int] = {}
        self.history = self.b.add("IfcOwnerHistory", config.owning_user, "NOCHANGE", 1_700_000_000)

    def gid(self) -> str:
        return new_global_id(self.rng)

    def rooted(self, type_name: str, name: str | None, **named) -> Ref:
        self.counts[type_name] = self.counts.get(type_name, 0) + 1
        return self.b.add(type_name, self.gid(), self.history, name, None, **named)

    def placement(self, parent: Ref | None) -> Ref | None:
        if not self.cfg.placements:
            return None
        rng = self.rng
        point = self.b.add("IfcCartesianPoint", round(rng.uniform(0, 60), 3),
                           round(rng.uniform(0, 40), 3), round(rng.uniform(0, 30), 3))
        axes = self.b.add("IfcAxis2Placement3D", point)
        return self.b.add("IfcLocalPlacement", parent, axes)

    def product(self, type_name: str, storey: int, i: int, parent: Ref | None) -> Ref:
        rng = self.rng
        named = {"ObjectType": rng.choice(DISCIPLINES), "Tag": f"T{rng.randrange(1000):03d}",
                 "ObjectPlacement": self.placement(parent)}
        if type_name == "IfcSlab":
            named["PredefinedType"] = rng.choice(("FLOOR", "ROOF", "LANDING", "BASESLAB"))
        if type_name in ("IfcDoor", "IfcWindow"):
            named["OverallHeight"] = rng.choice((0.9, 1.2, 2.1))
            named["OverallWidth"] = rng.choice((0.6, 0.9, 1.2))
        short = type_name[3:]
        return self.rooted(type_name, f"{short} {storey}-{i}", **named)

    def relation(self, type_name: str, **named) -> Ref:
        return self.rooted(type_name, None, **named)


def generate(schema: Schema, seed: int, config: SynthConfig | None = None,
             foreign_products: Mapping[str, str] | None = None) -> Synthetic:
    """Generate a model; ``foreign_products`` (GlobalId -> type) may be assigned to tasks."""
    cfg = config or SynthConfig()
    rng = random.Random(seed)
    g = _Gen(schema, rng, cfg)
    b = g.b

    project = g.rooted("IfcProject", "Project", LongName="Synthetic project", Phase="Construction")
    site_place = g.placement(None)
    site = g.rooted("IfcSite", "Site", ObjectPlacement=site_place, CompositionType="ELEMENT")
    g.relation("IfcRelAggregates", RelatingObject=project, RelatedObjects=(site,))
    products: list[Ref] = []
    buildings = []
    for bi in range(cfg.buildings):
        bplace = g.placement(site_place)
        building = g.rooted("IfcBuilding", f"Building {bi}", ObjectPlacement=bplace, CompositionType="ELEMENT")
        buildings.append(building)
        storeys = []
        for si in range(cfg.storeys):
            splace = g.placement(bplace)
            storey = g.rooted("IfcBuildingStorey", f"Storey {bi}-{si}", ObjectPlacement=splace,
                              Elevation=round(3.5 * si, 2))
            storeys.append(storey)
            contained = []
            for pi in range(cfg.products_per_storey):
                t = rng.choice(cfg.product_types)
                p = g.product(t, si, pi, splace)
                contained.append(p)
                if t == "IfcWall" and rng.random() < cfg.opening_rate:
                    opening = g.product("IfcOpeningElement", si, pi, splace)
                    g.relation("IfcRelVoidsElement", RelatingBuildingElement=p, RelatedOpeningElement=opening)
                    fill = g.product(rng.choice(("IfcDoor", "IfcWindow")), si, pi, splace)
                    g.relation("IfcRelFillsElement", RelatingOpeningElement=opening, RelatedBuildingElement=fill)
                    contained.append(fill)
            if contained:
                g.relation("IfcRelContainedInSpatialStructure", RelatedElements=tuple(contained),
                           RelatingStructure=storey)
            products.extend(contained)
        if storeys:
            g.relation("IfcRelAggregates", RelatingObject=building, RelatedObjects=tuple(storeys))
    if buildings:
        g.relation("IfcRelAggregates", RelatingObject=site, RelatedObjects=tuple(buildings))

    foreign: list[Ref] = []
    for gid, t in sorted((foreign_products or {}).items()):
        b.add(t, gid)
        foreign.append(Ref(b.label_of(gid)))
    assignable = products + foreign

    tasks = []
    for ti in range(cfg.tasks):
        task = g.rooted("IfcTask", f"Task {ti}", ObjectType=rng.choice(DISCIPLINES), TaskId=f"A{ti:04d}",
                        Status=rng.choice(STATUSES), WorkMethod=rng.choice(ZONES),
                        IsMilestone=rng.random() < 0.1, Priority=rng.randrange(1, 6))
        tasks.append(task)
        if assignable:
            k = rng.randint(1, min(cfg.max_task_products, len(assignable)))
            members = tuple(sorted(rng.sample(assignable, k), key=lambda r: r.label))
            g.relation("IfcRelAssignsToProcess", RelatedObjects=members, RelatingProcess=task)
    for ai in range(cfg.actors):
        org = b.add("IfcOrganization", f"O{ai}", rng.choice(("Consultant", "Contractor", "Supplier")))
        actor = g.rooted("IfcActor", f"Actor {ai}", TheActor=org)
        if tasks:
            k = rng.randint(1, min(3, len(tasks)))
            g.relation("IfcRelAssignsToActor", RelatedObjects=tuple(sorted(rng.sample(tasks, k),
                                                                           key=lambda r: r.label)),
                       RelatingActor=actor)
    for ei in range(cfg.element_types):
        etype = g.rooted("IfcBuildingElementType", f"Type {ei}", ElementType=rng.choice(DISCIPLINES))
        if products:
            k = rng.randint(1, min(5, len(products)))
            g.relation("IfcRelDefinesByType", RelatedObjects=tuple(sorted(rng.sample(products, k),
                                                                          key=lambda r: r.label)),
                       RelatingType=etype)

    model = b.build()
    return Synthetic(model, frozenset(foreign_products or ()), dict(sorted(g.counts.items())))


# -- random views -------------------------------------------------------------

def attribute_paths(schema: Schema, type_name: str, depth: int = 3) -> list[tuple[str, ...]]:
    """Attribute paths usable in constraints, following references up to ``depth`` hops."""
    out: list[tuple[str, ...]] = []

    def walk(t: str, prefix: tuple[str, ...]):
        for attr in schema.types[t].attributes:
            path = prefix + (attr.name,)
            out.append(path)
            if attr.kind.is_reference and len(path) < depth:
                walk(attr.target, path)

    walk(type_name, ())
    return out


def _values_at(model: Model, entities: Iterable, path_steps) -> list:
    """Terminal values reached along ``path_steps`` from sample entities."""
    found = []
    for e in entities:
        frontier = [e]
        for name in path_steps[:-1]:
            nxt = []
            for x in frontier:
                v = model.attr(x, name)
                if isinstance(v, Ref):
                    v = (v,)
                for r in v or ():
                    t = model.get(r.label)
                    if t is not None:
                        nxt.append(t)
            frontier = nxt
        for x in frontier:
            v = model.attr(x, path_steps[-1])
            if v is not None:
                found.append(v)
    return found


def random_constraint(schema: Schema, type_name: str, rng: random.Random, model: Model | None = None):
    paths = attribute_paths(schema, type_name)
    path = rng.choice(paths)
    attr = schema.types[type_name]
    for name in path[:-1]:
        attr = schema.types[attr.attribute(name).target]
    a = attr.attribute(path[-1])
    if a.kind.is_reference or a.name == "GlobalId" or rng.random() < 0.15:
        return AttributeConstraint(path, "exists")
    samples = []
    if model is not None:
        pool = model.instances_of(type_name)
        samples = _values_at(model, rng.sample(pool, min(len(pool), 12)), path)
    if a.kind is Kind.ENUM:
        candidates = list(a.tags)
    elif a.kind is Kind.BOOLEAN:
        candidates = [True, False]
    elif a.kind is Kind.INTEGER:
        candidates = [1, 2, 3, 4, 5]
    elif a.kind is Kind.REAL:
        candidates = [0.0, 3.5, 7.0, 0.9, 2.1]
    else:
        candidates = list(DISCIPLINES + ZONES + STATUSES)
    pool = samples + candidates if samples else candidates
    if a.kind is Kind.STRING and rng.random() < 0.3:
        word = rng.choice(pool)
        return AttributeConstraint(path, "contains", word[: rng.randint(1, max(1, len(word)))])
    if rng.random() < 0.3:
        return AttributeConstraint(path, "in", tuple(dict.fromkeys(rng.choice(pool) for _ in range(rng.randint(1, 3)))))
    return AttributeConstraint(path, "eq", rng.choice(pool))


def random_expression(schema: Schema, type_name: str, rng: random.Random, budget: int,
                      model: Model | None = None):
    """A random And/Or tree holding exactly ``budget`` constraints."""
    if budget == 1:
        return random_constraint(schema, type_name, rng, model)
    split = rng.randint(1, budget - 1)
    parts = (random_expression(schema, type_name, rng, split, model),
             random_expression(schema, type_name, rng, budget - split, model))
    return And(parts) if rng.random() < 0.5 else Or(parts)


def random_view(schema: Schema, rng: random.Random, model: Model | None = None, *, max_rules: int = 4,
                max_constraints: int = 4, relation_rate: float = 0.15, name: str = "random") -> ModelView:
    """A view over random concrete rooted types with up to ``max_constraints`` constraints per rule."""
    concrete = sorted(t.name for t in schema.types.values() if t.rooted and not t.abstract)
    plain = [t for t in concrete if not schema.types[t].relationship]
    abstract = sorted(t.name for t in schema.types.values()
                      if t.rooted and t.abstract and not t.relationship and t.name != schema.root_type)
    rules = []
    for _ in range(rng.randint(1, max_rules)):
        r = rng.random()
        if r < relation_rate:
            t = rng.choice([x for x in concrete if schema.types[x].relationship])
        elif r < relation_rate + 0.15:
            t = rng.choice(abstract)
        else:
            t = rng.choice(plain)
        if rng.random() < 0.35 or max_constraints == 0:
            rules.append(make_rule(schema, t))
        else:
            n = rng.randint(1, max_constraints)
            rules.append(make_rule(schema, t, random_expression(schema, t, rng, n, model)))
    return ModelView(name, rules, schema=schema)
