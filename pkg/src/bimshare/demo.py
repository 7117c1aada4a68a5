"""A scripted federation on the simulated network.

A controller and N parties each upload a generated model, share part of it
and receive other parties' shared data according to generated requirement
views.  One party then extracts a cross-party sub-model and integrates it
into another party's model.  The report checks the outcome against
brute-force recomputation.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass

from .controller import AccessLevel, Controller
from .extract import ExtractionMode, ParallelLevel, extract, extract_parallel
from .integrate import integrate
from .party import PartyConfig, PartyNode
from .schema import Schema, bundled_schema
from .synth import DISCIPLINES, ZONES, SynthConfig, generate
from .wire import SimNet

REPORT_VERSION = 1

# The view everyone shares: all but one discipline's products, plus
# spatial structure, tasks and relations.
SHARE_XML = """<ModelView name="share">
  <Rule type="IfcProject"/>
  <Rule type="IfcSite"/>
  <Rule type="IfcBuilding"/>
  <Rule type="IfcBuildingStorey"/>
  <Rule type="IfcElement"><In path="ObjectType" values="{disciplines}"/></Rule>
  <Rule type="IfcTask"/>
  <Rule type="IfcActor"/>
  <Rule type="IfcRelationship"/>
</ModelView>
"""

# Extraction run by the contractor: spatial structure, structural and
# drainage products and the tasks of two zones, with their links.
EXTRACT_XML = """<ModelView name="cross-party">
  <ExchangeRequirement name="coordination"/>
  <Rule type="IfcSpatialStructureElement"><Exists path="Name"/></Rule>
  <Rule type="IfcProject"><Exists path="Name"/></Rule>
  <Rule type="IfcBuildingElement"><In path="ObjectType" values="Structural|Drainage"/></Rule>
  <Rule type="IfcTask"><In path="WorkMethod" values="Zone A|Zone B"/></Rule>
  <Rule type="IfcRelContainedInSpatialStructure"/>
  <Rule type="IfcRelAggregates"/>
  <Rule type="IfcRelAssignsToProcess"/>
</ModelView>
"""

PRODUCTS = ("IfcColumn", "IfcBeam", "IfcSlab", "IfcWall", "IfcDoor", "IfcWindow")


def party_names(n: int) -> list[str]:
    names = ["consultant", "contractor"]
    return names[:n] + [f"party{i}" for i in range(3, n + 1)]


def requirements_xml(rng: random.Random, name: str) -> str:
    """A generated requirement view: some product types and disciplines, some zones' tasks."""
    types = sorted(rng.sample(PRODUCTS, rng.randint(1, 3)))
    disciplines = sorted(rng.sample(DISCIPLINES, rng.randint(1, 3)))
    zones = sorted(rng.sample(ZONES, rng.randint(1, 2)))
    lines = [f'<ModelView name="{name}-requirements">']
    for t in types:
        lines.append(f'  <Rule type="{t}"><In path="ObjectType" values="{"|".join(disciplines)}"/></Rule>')
    lines.append(f'  <Rule type="IfcTask"><In path="WorkMethod" values="{"|".join(zones)}"/></Rule>')
    if rng.random() < 0.5:
        lines.append('  <Rule type="IfcBuildingStorey"/>')
    if rng.random() < 0.5:
        lines.append('  <Rule type="IfcRelAssignsToProcess"/>')
    lines.append("</ModelView>")
    return "\n".join(lines) + "\n"


@dataclass
class Federation:
    net: SimNet
    controller: Controller
    parties: dict[str, PartyNode]


def build_federation(n: int, seed: int, size: int = 240, schema: Schema | None = None,
                     net: SimNet | None = None) -> Federation:
    """Register, upload, share and replicate; returns once the network is quiet."""
    schema = schema or bundled_schema()
    rng = random.Random(seed)
    net = net or SimNet("fifo", seed)
    controller = Controller(schema, clock=lambda: net.clock)
    net.register(controller)
    parties: dict[str, PartyNode] = {}
    for name in party_names(n):
        cfg = PartyConfig(name, manager_token=f"{name}-manager", member_tokens=frozenset({f"{name}-member"}),
                          requirements=requirements_xml(rng, name))
        node = PartyNode(schema, cfg)
        node.attach(net.register(node))
        node.register()
        parties[name] = node

    config = SynthConfig.for_size(size, owning_user="")
    consultant_products: dict[str, str] = {}
    for i, (name, node) in enumerate(parties.items()):
        config.owning_user = name
        foreign = consultant_products if name == "contractor" else None
        syn = generate(schema, seed * 1000 + i, config, foreign_products=foreign)
        if name == "consultant":
            consultant_products = {syn.model.gid_of(e): e.type_name for e in syn.model.rooted()
                                   if e.type_name in ("IfcColumn", "IfcBeam")}
        node.upload_model(syn.spf(), node.config.manager_token)
    for name, node in parties.items():
        private = rng.choice(DISCIPLINES)
        shared = "|".join(d for d in DISCIPLINES if d != private)
        node.share(SHARE_XML.format(disciplines=shared), node.config.manager_token)
        net.run_until_idle()
    return Federation(net, controller, parties)


def expected_external(fed: Federation, name: str) -> dict[str, int]:
    """Brute force: every other party's Shared entity this party's view selects, with its version."""
    node = fed.parties[name]
    view = node.requirements
    out = {}
    for other, o in fed.parties.items():
        if other == name:
            continue
        for gid, s in o.snapshot().items():
            if s.access_level is AccessLevel.SHARED and view is not None \
                    and view.matches(s.fragment.root, s.fragment.view(node.schema)):
                out[gid] = s.local_version
    return out


def verify_distribution(fed: Federation) -> list[str]:
    failures = []
    for name, node in fed.parties.items():
        actual = {gid: s.local_version for gid, s in node.snapshot().items()
                  if s.access_level is AccessLevel.EXTERNAL}
        want = expected_external(fed, name)
        if actual != want:
            missing = sorted(set(want) - set(actual))[:3]
            extra = sorted(set(actual) - set(want))[:3]
            failures.append(f"{name}: External store differs from requirement filter "
                            f"(missing {missing}, unexpected {extra})")
        for gid, s in node.snapshot().items():
            if s.access_level is AccessLevel.EXTERNAL:
                owner = fed.parties[s.origin_party].store.get(gid)
                if owner is None or owner.fragment != s.fragment:
                    failures.append(f"{name}: replica {gid} differs from its owner's copy")
    return failures


def index_counts(fed: Federation) -> dict[str, dict[str, int]]:
    counts = {name: {"shared": 0, "external": 0} for name in fed.parties}
    for rec in fed.controller.records():
        counts[rec.owner_party]["shared"] += 1
        for p in rec.replica_servers:
            counts[p]["external"] += 1
    return counts


def _ms(fn) -> tuple[object, float]:
    t0 = time.perf_counter()
    out = fn()
    return out, round((time.perf_counter() - t0) * 1000, 3)


def run_demo(n: int = 3, seed: int = 7, size: int = 240, workers: int = 2,
             omit_timings: bool = False) -> dict:
    if n < 2:
        raise ValueError("the demo needs at least two parties")
    fed = build_federation(n, seed, size)
    failures = verify_distribution(fed)

    counts = index_counts(fed)
    for name, node in fed.parties.items():
        local = node.index_counts()
        if local["Shared"] != counts[name]["shared"] or local["External"] != counts[name]["external"]:
            failures.append(f"{name}: local counts {local} disagree with the index {counts[name]}")

    contractor = fed.parties["contractor"]
    result = contractor.cross_party_extract(EXTRACT_XML, ExtractionMode.STRICT)
    sub = result.sub
    origins = sorted(set(sub.provenance.values()))
    if len(origins) < 2:
        failures.append(f"cross-party extraction drew on {origins} only")
    if sub.model.dangling_references():
        failures.append("cross-party extraction has dangling references")
    kinds = {"spatial": "IfcSpatialStructureElement", "products": "IfcBuildingElement", "tasks": "IfcTask"}
    for label, t in kinds.items():
        by_origin = {sub.provenance[sub.model.gid_of(e)] for e in sub.model.instances_of(t)}
        if len(by_origin) < 2:
            failures.append(f"cross-party extraction has {label} from {sorted(by_origin)} only")

    consultant = fed.parties["consultant"]
    base = consultant.own_model()
    merged = integrate(base, sub.model)
    if merged.dangling_references():
        failures.append("integrated model has dangling references")

    local = contractor.local_model()
    view = contractor._parse_view(EXTRACT_XML)
    seq, seq_ms = _ms(lambda: extract(local, view, ExtractionMode.STRICT))
    par, par_ms = _ms(lambda: extract_parallel([local], view, ExtractionMode.STRICT, ParallelLevel.INSTANCE,
                                               workers))
    if seq.model.canonical() != par.model.canonical():
        failures.append("parallel extraction differs from sequential")

    entity_counts = {}
    for name, node in fed.parties.items():
        c = node.index_counts()
        entity_counts[name] = {"private": c["Private"], "shared": c["Shared"], "external": c["External"],
                               "total": sum(c.values())}
    return {
        "report_version": REPORT_VERSION,
        "seed": seed,
        "parties": list(fed.parties),
        "entity_counts": entity_counts,
        "index_counts": counts,
        "extraction": {"party": "contractor", "entities": len(sub.model), "rooted": len(sub.global_ids),
                       "origins": origins, "remote_calls": result.remote_calls,
                       "warnings": len(result.warnings)},
        "integration": {"base": "consultant", "entities": len(merged), "rooted": len(merged.global_ids)},
        "extract_ms": {"sequential": None if omit_timings else seq_ms,
                       "parallel": None if omit_timings else par_ms, "workers": workers},
        "messages": fed.net.clock,
        "verification": {"passed": not failures, "failures": failures},
    }
