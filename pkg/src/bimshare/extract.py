"""View-driven sub-model extraction, sequential and parallel.

The pipeline: select rooted entities matched by the view, retain relation
entities whose endpoints survive (narrowing list endpoints), optionally drop
entities that only a type-only rule selected and that are not linked to a
constrained match, then copy every survivor with its own resources.
"""

from __future__ import annotations

import enum
import logging
import multiprocessing
import os
from collections.abc import Sequence
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import ExtractionError, MvdError, ReplicaDivergenceError
from .model import (
    DELETED,
    Entity,
    Fragment,
    Model,
    assemble,
    fragments_of,
    owner_history,
)
from .mvd import ModelView, matches
from .schema import CHANGE_ACTION_ATTR, Kind

logger = logging.getLogger(__name__)

CONSTRAINED = 2
TYPE_ONLY = 1


class ExtractionMode(str, enum.Enum):
    BROAD = "broad"
    STRICT = "strict"


class ParallelLevel(str, enum.Enum):
    SERVER = "server"
    TYPE = "type"
    INSTANCE = "instance"


@dataclass
class SubModel:
    model: Model
    origin: str = ""
    view_name: str = ""
    provenance: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def global_ids(self) -> frozenset[str]:
        return self.model.global_ids

    def __len__(self) -> int:
        return len(self.model)


# -- phases -------------------------------------------------------------------

def _check_view(model: Model, view: ModelView) -> None:
    try:
        view.validate(model.schema)
    except MvdError as exc:
        raise ExtractionError(f"view {view.name!r} does not fit schema {model.schema.name}: {exc}") from None


def _view_targets_relations(model: Model, view: ModelView) -> bool:
    return any(model.schema.types[r.entity_type].relationship
               or model.schema.relationship_type in model.schema.descendants(r.entity_type)
               for r in view.rules)


def candidate_entities(model: Model, view: ModelView) -> list[Entity]:
    """Rooted entities phase 1 must evaluate: non-relations, plus relations when rules target them."""
    schema = model.schema
    with_relations = _view_targets_relations(model, view)
    return [e for e in model.rooted() if with_relations or not schema.types[e.type_name].relationship]


def classify(model: Model, view: ModelView, entities) -> dict[int, int]:
    """label -> CONSTRAINED or TYPE_ONLY for each matched entity."""
    out = {}
    schema = model.schema
    for e in entities:
        best = 0
        for rule in view.applicable(schema, e.type_name):
            if matches(rule, e, model):
                if not rule.type_only:
                    best = CONSTRAINED
                    break
                best = TYPE_ONLY
        if best:
            out[e.label] = best
    return out


def classify_rules(model: Model, view: ModelView, rule_indexes: Sequence[int]) -> dict[int, int]:
    """Phase 1 restricted to some rules, visiting only instances of each rule's type."""
    out: dict[int, int] = {}
    schema = model.schema
    with_relations = _view_targets_relations(model, view)
    for i in rule_indexes:
        rule = view.rules[i]
        level = TYPE_ONLY if rule.type_only else CONSTRAINED
        for e in model.instances_of(rule.entity_type):
            td = schema.types[e.type_name]
            if not td.rooted or (td.relationship and not with_relations):
                continue
            if out.get(e.label, 0) >= level:
                continue
            if matches(rule, e, model):
                out[e.label] = level
    return out


def _endpoints(model: Model, rel: Entity):
    td = model.schema.types[rel.type_name]
    relating = [rel.attrs[i].label for i in td.relating_indexes if rel.attrs[i] is not None]
    related = []
    for i in td.related_indexes:
        v = rel.attrs[i]
        if v is None:
            continue
        if td.attributes[i].kind is Kind.LIST:
            related.append(tuple(r.label for r in v))
        else:
            related.append((v.label,))
    return relating, related, td


def retain_relations(model: Model, selected: set[int], candidates: list[Entity]) -> set[int]:
    """Fixed point of relation retention over ``selected``; returns retained relation labels."""
    retained: set[int] = set()
    pending = list(candidates)
    changed = True
    while changed and pending:
        changed = False
        alive = selected | retained
        rest = []
        for rel in pending:
            relating, related, td = _endpoints(model, rel)
            ok = all(label in alive for label in relating) and bool(related)
            if ok:
                for group in related:
                    if not any(label in alive for label in group):
                        ok = False
                        break
            if ok:
                retained.add(rel.label)
                changed = True
            else:
                rest.append(rel)
        pending = rest
    return retained


def _strict_filter(model: Model, kinds: dict[int, int], retained: set[int]) -> set[int]:
    """Drop type-only selections not one relation hop away from a constrained selection."""
    selected = set(kinds)
    keep = {label for label, k in kinds.items() if k == CONSTRAINED}
    linked: set[int] = set()
    for label in retained:
        relating, related, _ = _endpoints(model, model[label])
        ends = [x for x in relating if x in selected]
        for group in related:
            ends.extend(x for x in group if x in selected)
        if any(kinds.get(x) == CONSTRAINED for x in ends):
            linked.update(ends)
    keep |= {label for label in selected if label in linked}
    return keep


def _copy_without_delete_marks(model: Model, fragment: Fragment) -> Fragment:
    history = owner_history(fragment.view(model.schema), fragment.root)
    if history is None or history.change_action != DELETED:
        return fragment
    schema = model.schema
    resources = []
    for r in fragment.resources:
        if r.type_name == schema.owner_history_type:
            td = schema.types[r.type_name]
            attrs = list(r.attrs)
            attrs[td.index(CHANGE_ACTION_ATTR)] = "NOCHANGE"
            r = Entity(r.label, r.type_name, tuple(attrs))
        resources.append(r)
    return Fragment(fragment.root, tuple(resources), fragment.external)


def finish(model: Model, view: ModelView, mode: ExtractionMode, kinds: dict[int, int],
           relation_candidates: list[Entity] | None = None, origin: str = "") -> SubModel:
    """Phases 2-4 given the phase-1 classification."""
    schema = model.schema
    mode = ExtractionMode(mode)
    relation_labels = {e.label for e in model.relations()}
    selected_kinds = {label: k for label, k in kinds.items() if label not in relation_labels}
    if relation_candidates is None:
        if _view_targets_relations(model, view):
            relation_candidates = [model[label] for label in sorted(kinds) if label in relation_labels]
        else:
            relation_candidates = list(model.relations())

    selected = set(selected_kinds)
    retained = retain_relations(model, selected, relation_candidates)
    if mode is ExtractionMode.STRICT and view.has_constrained_rules:
        selected = _strict_filter(model, selected_kinds, retained)
        retained = retain_relations(model, selected, relation_candidates)

    keep = sorted(selected | retained)
    gids = [model.gid_of(model[label]) for label in keep]
    frags = fragments_of(model, gids)
    cleaned = [_copy_without_delete_marks(model, frags[g]) for g in gids]
    dropped: list[str] = []
    sub = assemble(schema, cleaned, dropped=dropped)
    warnings = [f"dropped {g}: mandatory reference outside the extraction" for g in dropped]
    return SubModel(sub, origin, view.name, {g: origin for g in sub.global_ids}, warnings)


def extract(model: Model, view: ModelView, mode: ExtractionMode | str = ExtractionMode.STRICT,
            origin: str = "") -> SubModel:
    """Extract the self-contained sub-model ``view`` selects from ``model``."""
    _check_view(model, view)
    kinds = classify(model, view, candidate_entities(model, view))
    return finish(model, view, mode, kinds, origin=origin)


# -- parallel -----------------------------------------------------------------

# Inherited by forked workers so the model is never pickled.
_SHARED: dict = {}


def _task_rules(args):
    replica, rule_indexes = args
    model = _SHARED["replicas"][replica]
    found = classify_rules(model, _SHARED["view"], rule_indexes)
    return [(model.gid_of(model[label]), k) for label, k in found.items()]


def _task_chunk(args):
    start, stop = args
    model = _SHARED["replicas"][0]
    entities = _SHARED["candidates"][start:stop]
    return list(classify(model, _SHARED["view"], entities).items())


def _executor(workers: int) -> Executor:
    if "fork" in multiprocessing.get_all_start_methods():
        return ProcessPoolExecutor(max_workers=workers, mp_context=multiprocessing.get_context("fork"))
    return ThreadPoolExecutor(max_workers=workers)


def _run(fn, tasks: list, workers: int) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with _executor(min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def _check_replicas(replicas: Sequence[Model], selected_gids: set[str]) -> None:
    first = replicas[0]
    reference = None
    for i, other in enumerate(replicas[1:], start=1):
        if other.global_ids != first.global_ids:
            diff = sorted(other.global_ids ^ first.global_ids)[:3]
            raise ReplicaDivergenceError(f"replica {i} holds a different entity set (e.g. {diff})")
        if reference is None:
            reference = first.canonical()
        canon = other.canonical()
        for gid in sorted(selected_gids):
            if canon[gid] != reference[gid]:
                raise ReplicaDivergenceError(f"replica {i} disagrees on entity {gid}")


def extract_parallel(replicas: Sequence[Model] | Model, view: ModelView,
                     mode: ExtractionMode | str = ExtractionMode.STRICT,
                     level: ParallelLevel | str = ParallelLevel.INSTANCE,
                     workers: int = 1, origin: str = "") -> SubModel:
    """Phase 1 split across workers; phases 2-4 run once on the merged selection.

    ``server`` partitions the view's rules across replicas, ``type`` runs one
    task per rule (entity type), ``instance`` splits the candidate instances
    into ``workers`` chunks.
    """
    if isinstance(replicas, Model):
        replicas = [replicas]
    replicas = list(replicas)
    if not replicas:
        raise ExtractionError("no model replicas given")
    if workers < 1:
        raise ExtractionError("workers must be positive")
    level = ParallelLevel(level)
    model = replicas[0]
    _check_view(model, view)

    _SHARED.clear()
    _SHARED.update(replicas=replicas, view=view)
    try:
        if level is ParallelLevel.INSTANCE:
            candidates = candidate_entities(model, view)
            _SHARED["candidates"] = candidates
            n = len(candidates)
            parts = max(1, workers)
            bounds = [(n * k // parts, n * (k + 1) // parts) for k in range(parts)]
            kinds: dict[int, int] = {}
            for found in _run(_task_chunk, [b for b in bounds if b[0] < b[1]], workers):
                kinds.update(found)
        else:
            rule_ids = list(range(len(view.rules)))
            if level is ParallelLevel.TYPE:
                tasks = [(0, [i]) for i in rule_ids]
            else:
                groups = max(1, len(replicas))
                tasks = [(k, rule_ids[k::groups]) for k in range(groups)]
                tasks = [t for t in tasks if t[1]]
            merged: dict[str, int] = {}
            for found in _run(_task_rules, tasks, workers):
                for gid, k in found:
                    if merged.get(gid, 0) < k:
                        merged[gid] = k
            if level is ParallelLevel.SERVER and len(replicas) > 1:
                _check_replicas(replicas, set(merged))
            kinds = {model.label_of(gid): k for gid, k in merged.items()}
    finally:
        _SHARED.clear()
    return finish(model, view, mode, kinds, origin=origin)


def cpu_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1

