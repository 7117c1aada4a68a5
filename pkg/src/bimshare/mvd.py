"""Model views: per-type attribute rules in disjunctive normal form.

A view is written in a small mvdXML-like dialect::

    <ModelView name="zone-b">
      <ExchangeRequirement name="schedule review"/>
      <Rule type="IfcTask"><Eq path="Name" value="Zone B"/></Rule>
      <Rule type="IfcColumn"/>
    </ModelView>

Leaves are ``Eq``, ``Contains``, ``In`` (``values="a|b"``) and ``Exists``;
``And``/``Or`` nest freely and bare leaves under ``Rule`` are a conjunction.
``<Template id="...">`` blocks hold reusable constraint groups that rules
pull in with ``<Use template="..."/>``; they are inlined at parse time.
"""

from __future__ import annotations

import itertools
import math
import xml.etree.ElementTree as ET
from collections.abc import Iterable
from dataclasses import dataclass, field
from xml.sax.saxutils import quoteattr

from .errors import MvdError
from .model import Entity, Ref
from .schema import Kind, Schema

OPS = ("eq", "contains", "in", "exists")
REAL_REL_TOL = 1e-9

_TAGS = {"Eq": "eq", "Contains": "contains", "In": "in", "Exists": "exists"}
_TAG_OF = {v: k for k, v in _TAGS.items()}


# -- expressions --------------------------------------------------------------

@dataclass(frozen=True)
class AttributeConstraint:
    """One predicate over the value reached by following ``path``.

    ``value`` is already converted to the terminal attribute's Python type;
    for ``in`` it is a tuple of such values, for ``exists`` it is None.
    """

    path: tuple[str, ...]
    op: str
    value: object = None

    def __post_init__(self):
        if not self.path:
            raise ValueError("constraint path must not be empty")
        if self.op not in OPS:
            raise ValueError(f"unsupported predicate {self.op!r}")

    def sort_key(self) -> tuple:
        return (self.path, self.op, repr(self.value))

    def __str__(self) -> str:
        p = ".".join(self.path)
        if self.op == "exists":
            return f"exists({p})"
        return f"{p} {self.op} {self.value!r}"


@dataclass(frozen=True)
class And:
    items: tuple = ()


@dataclass(frozen=True)
class Or:
    items: tuple = ()


TRUE = And(())
FALSE = Or(())

Clause = frozenset  # of AttributeConstraint


def to_dnf(expr) -> list[frozenset]:
    """Rewrite an And/Or tree into a minimal list of conjunctive clauses.

    Duplicate clauses and clauses that are supersets of another clause are
    removed.  ``And()`` is true (one empty clause), ``Or()`` is false (no
    clauses).
    """
    return _minimize(_dnf(expr))


def _dnf(expr) -> list[frozenset]:
    if isinstance(expr, AttributeConstraint):
        return [frozenset([expr])]
    if isinstance(expr, And):
        result = [frozenset()]
        for item in expr.items:
            sub = _minimize(_dnf(item))
            result = _minimize([a | b for a in result for b in sub])
            if not result:
                return []
        return result
    if isinstance(expr, Or):
        out = []
        for item in expr.items:
            out.extend(_dnf(item))
        return out
    raise TypeError(f"not a constraint expression: {expr!r}")


def _clause_key(clause: frozenset) -> tuple:
    return (len(clause), sorted(c.sort_key() for c in clause))


def _minimize(clauses: Iterable[frozenset]) -> list[frozenset]:
    unique = sorted(set(clauses), key=_clause_key)
    kept: list[frozenset] = []
    for c in unique:
        if not any(k <= c for k in kept):
            kept.append(c)
    return kept


def expr_constraints(expr) -> list[AttributeConstraint]:
    if isinstance(expr, AttributeConstraint):
        return [expr]
    return [c for item in expr.items for c in expr_constraints(item)]


# -- evaluation ---------------------------------------------------------------

def _reals_equal(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=REAL_REL_TOL, abs_tol=0.0)


def _leaf_test(c: AttributeConstraint, kind: Kind):
    """Predicate on a terminal (non-None) attribute value."""
    op, want = c.op, c.value
    if op == "exists":
        if kind is Kind.LIST:
            return lambda v: len(v) > 0
        return lambda v: True
    if op == "contains":
        return lambda v: want in v
    if kind is Kind.REAL:
        if op == "eq":
            return lambda v: _reals_equal(v, want)
        return lambda v: any(_reals_equal(v, w) for w in want)
    if op == "eq":
        return lambda v: v == want and type(v) is type(want)
    allowed = frozenset(want)
    return lambda v: v in allowed


@dataclass(frozen=True)
class _Step:
    index: int
    kind: Kind


def _compile(schema: Schema, type_name: str, c: AttributeConstraint):
    steps = resolve_path(schema, type_name, c.path)
    test = _leaf_test(c, steps[-1].kind)
    *hops, last = steps
    last_index = last.index

    def walk(entity: Entity, get, depth: int) -> bool:
        if depth == len(hops):
            v = entity.attrs[last_index]
            return v is not None and test(v)
        v = entity.attrs[hops[depth].index]
        if v is None:
            return False
        if isinstance(v, Ref):
            target = get(v.label)
            return target is not None and walk(target, get, depth + 1)
        for r in v:
            target = get(r.label)
            if target is not None and walk(target, get, depth + 1):
                return True
        return False

    if not hops:
        return lambda entity, get: (lambda v: v is not None and test(v))(entity.attrs[last_index])
    return lambda entity, get: walk(entity, get, 0)


def resolve_path(schema: Schema, type_name: str, path: tuple[str, ...]) -> list[_Step]:
    """Resolve attribute names to positions; intermediate hops must be references."""
    steps = []
    current = type_name
    for i, name in enumerate(path):
        td = schema.types[current]
        if not td.has_attribute(name):
            raise MvdError(f"{current} has no attribute {name!r} (path {'.'.join(path)})")
        attr = td.attribute(name)
        steps.append(_Step(td.index(name), attr.kind))
        if i < len(path) - 1:
            if not attr.kind.is_reference:
                raise MvdError(f"{current}.{name} is not a reference; cannot continue path {'.'.join(path)}")
            current = attr.target
    return steps


def terminal_attr(schema: Schema, type_name: str, path: tuple[str, ...]):
    current = type_name
    for name in path[:-1]:
        current = schema.types[current].attribute(name).target
    return schema.types[current].attribute(path[-1])


@dataclass(frozen=True)
class ConceptRule:
    entity_type: str
    clauses: tuple[frozenset, ...]
    expr: object = TRUE
    _compiled: tuple = field(default=(), compare=False, repr=False, hash=False)

    @property
    def type_only(self) -> bool:
        """True when some clause is empty, i.e. every instance of the type matches."""
        return any(not c for c in self.clauses)

    def compiled(self, schema: Schema) -> tuple:
        if not self._compiled:
            comp = tuple(
                tuple(_compile(schema, self.entity_type, c) for c in sorted(clause, key=AttributeConstraint.sort_key))
                for clause in self.clauses
            )
            object.__setattr__(self, "_compiled", comp)
        return self._compiled


def make_rule(schema: Schema, entity_type: str, expr=TRUE) -> ConceptRule:
    if entity_type not in schema.types:
        raise MvdError(f"unknown entity type {entity_type}")
    for c in expr_constraints(expr):
        check_constraint(schema, entity_type, c)
    return ConceptRule(entity_type, tuple(to_dnf(expr)), expr)


def check_constraint(schema: Schema, entity_type: str, c: AttributeConstraint) -> None:
    resolve_path(schema, entity_type, c.path)
    attr = terminal_attr(schema, entity_type, c.path)
    if c.op == "exists":
        return
    if attr.kind.is_reference:
        raise MvdError(f"{c.op} cannot compare reference attribute {'.'.join(c.path)}")
    if c.op == "contains" and attr.kind is not Kind.STRING:
        raise MvdError(f"contains needs a STRING attribute, {'.'.join(c.path)} is {attr.spec()}")
    values = c.value if c.op == "in" else (c.value,)
    for v in values:
        if not _fits(attr, v):
            raise MvdError(f"value {v!r} does not fit {'.'.join(c.path)} ({attr.spec()})")


def _fits(attr, v) -> bool:
    k = attr.kind
    if k is Kind.STRING:
        return isinstance(v, str)
    if k is Kind.ENUM:
        return isinstance(v, str) and v in attr.tags
    if k is Kind.BOOLEAN:
        return isinstance(v, bool)
    if k is Kind.INTEGER:
        return isinstance(v, int) and not isinstance(v, bool)
    return isinstance(v, float)


def matches(rule: ConceptRule, entity: Entity, model) -> bool:
    """Does ``entity`` satisfy some clause of ``rule``?  ``model`` needs ``schema`` and ``get``."""
    schema = model.schema
    if rule.entity_type not in schema.types[entity.type_name].ancestors:
        return False
    get = model.get
    return any(all(test(entity, get) for test in clause) for clause in rule.compiled(schema))


def evaluate(expr, entity: Entity, model, entity_type: str | None = None) -> bool:
    """Direct recursive evaluation of an And/Or tree (no DNF)."""
    if isinstance(expr, AttributeConstraint):
        t = entity_type or entity.type_name
        return _compile(model.schema, t, expr)(entity, model.get)
    if isinstance(expr, And):
        return all(evaluate(e, entity, model, entity_type) for e in expr.items)
    return any(evaluate(e, entity, model, entity_type) for e in expr.items)


# -- views --------------------------------------------------------------------

class ModelView:
    """A named set of concept rules, at most one per entity type."""

    def __init__(self, name: str, rules: Iterable[ConceptRule], provenance: Iterable[str] = (),
                 schema: Schema | None = None):
        self.name = name
        merged: dict[str, ConceptRule] = {}
        for r in rules:
            prev = merged.get(r.entity_type)
            if prev is None:
                merged[r.entity_type] = r
            else:
                expr = Or((prev.expr, r.expr))
                merged[r.entity_type] = ConceptRule(r.entity_type, tuple(to_dnf(expr)), expr)
        self.rules: tuple[ConceptRule, ...] = tuple(merged.values())
        self.provenance: tuple[str, ...] = tuple(provenance)
        self.schema = schema
        self._applicable: dict[str, tuple[ConceptRule, ...]] = {}

    def __repr__(self) -> str:
        return f"<ModelView {self.name!r} rules={[r.entity_type for r in self.rules]}>"

    def __eq__(self, other) -> bool:
        return (isinstance(other, ModelView) and self.name == other.name
                and {r.entity_type: r.clauses for r in self.rules} == {r.entity_type: r.clauses for r in other.rules})

    def __hash__(self):
        return hash(self.name)

    def rule_for(self, entity_type: str) -> ConceptRule | None:
        for r in self.rules:
            if r.entity_type == entity_type:
                return r
        return None

    def applicable(self, schema: Schema, type_name: str) -> tuple[ConceptRule, ...]:
        """Rules whose entity type is ``type_name`` or one of its supertypes."""
        cached = self._applicable.get(type_name)
        if cached is None:
            ancestors = schema.types[type_name].ancestors
            cached = tuple(r for r in self.rules if r.entity_type in ancestors)
            self._applicable[type_name] = cached
        return cached

    @property
    def has_constrained_rules(self) -> bool:
        return any(not r.type_only for r in self.rules)

    def matches(self, entity: Entity, model) -> bool:
        return any(matches(r, entity, model) for r in self.applicable(model.schema, entity.type_name))

    def match_kind(self, entity: Entity, model) -> str | None:
        """``"constrained"`` if a rule with constraints matches, ``"type"`` if only type-only rules do."""
        result = None
        for r in self.applicable(model.schema, entity.type_name):
            if matches(r, entity, model):
                if not r.type_only:
                    return "constrained"
                result = "type"
        return result

    def covers(self, other: ModelView, schema: Schema) -> bool:
        """Conservative check that every entity ``other`` selects is selected here too.

        True when each rule of ``other`` is implied by a rule of this view on
        the same type or a supertype: some clause here is a subset of every
        clause there.
        """
        for r in other.rules:
            ok = False
            for mine in self.rules:
                if mine.entity_type not in schema.types[r.entity_type].ancestors:
                    continue
                if all(any(m <= c for m in mine.clauses) for c in r.clauses):
                    ok = True
                    break
            if not ok:
                return False
        return True

    def validate(self, schema: Schema) -> None:
        for r in self.rules:
            if r.entity_type not in schema.types:
                raise MvdError(f"unknown entity type {r.entity_type}")
            for c in expr_constraints(r.expr):
                check_constraint(schema, r.entity_type, c)


def type_only_view(name: str, types: Iterable[str], schema: Schema) -> ModelView:
    return ModelView(name, [make_rule(schema, t) for t in types], schema=schema)


# -- XML ----------------------------------------------------------------------

def convert_value(schema: Schema, entity_type: str, path: tuple[str, ...], text: str):
    """Convert attribute text from XML to the terminal attribute's Python type."""
    attr = terminal_attr(schema, entity_type, path)
    k = attr.kind
    try:
        if k is Kind.INTEGER:
            return int(text)
        if k is Kind.REAL:
            v = float(text)
            if not math.isfinite(v):
                raise ValueError
            return v
    except ValueError:
        raise MvdError(f"{text!r} is not a valid {k.value} for {'.'.join(path)}") from None
    if k is Kind.BOOLEAN:
        t = text.strip().upper()
        if t in ("T", "TRUE", ".T."):
            return True
        if t in ("F", "FALSE", ".F."):
            return False
        raise MvdError(f"{text!r} is not a boolean for {'.'.join(path)}")
    if k is Kind.ENUM:
        t = text.strip().strip(".")
        if t not in attr.tags:
            raise MvdError(f"{text!r} is not one of {', '.join(attr.tags)} for {'.'.join(path)}")
        return t
    return text


def parse_mvd(xml: str, schema: Schema) -> ModelView:
    try:
        root = ET.fromstring(xml)
    except ET.ParseError as exc:
        line, col = exc.position
        raise MvdError(f"XML syntax error at line {line}, column {col + 1}: {exc}") from None
    if root.tag != "ModelView":
        raise MvdError(f"root element must be <ModelView>, found <{root.tag}>")
    name = root.get("name")
    if not name:
        raise MvdError("<ModelView> needs a name attribute")

    templates: dict[str, ET.Element] = {}
    for el in root:
        if el.tag == "Template":
            tid = el.get("id")
            if not tid or tid in templates:
                raise MvdError("<Template> needs a unique id")
            templates[tid] = el

    rules = []
    provenance = []
    for el in root:
        if el.tag == "ExchangeRequirement":
            provenance.append(el.get("name") or (el.text or "").strip())
        elif el.tag == "Rule":
            etype = el.get("type")
            if not etype:
                raise MvdError("<Rule> needs a type attribute")
            td = schema.lookup(etype)
            if td is None:
                raise MvdError(f"unknown entity type {etype}")
            expr = And(tuple(_parse_expr(child, schema, td.name, templates, ()) for child in el))
            if len(expr.items) == 1 and not isinstance(expr.items[0], AttributeConstraint):
                expr = expr.items[0]
            rule = make_rule(schema, td.name, expr)
            if not rule.clauses:
                raise MvdError(f"rule on {td.name} can never match")
            rules.append(rule)
        elif el.tag != "Template":
            raise MvdError(f"unsupported element <{el.tag}>")
    return ModelView(name, rules, provenance, schema=schema)


def _parse_expr(el: ET.Element, schema: Schema, etype: str, templates, active: tuple):
    tag = el.tag
    if tag in ("And", "Or"):
        items = tuple(_parse_expr(c, schema, etype, templates, active) for c in el)
        return And(items) if tag == "And" else Or(items)
    if tag == "Use":
        tid = el.get("template")
        if tid not in templates:
            raise MvdError(f"unknown template {tid!r}")
        if tid in active:
            raise MvdError(f"template {tid!r} uses itself")
        return And(tuple(_parse_expr(c, schema, etype, templates, active + (tid,)) for c in templates[tid]))
    op = _TAGS.get(tag)
    if op is None:
        raise MvdError(f"unsupported predicate <{tag}>")
    path_text = el.get("path")
    if not path_text:
        raise MvdError(f"<{tag}> needs a path attribute")
    path = tuple(path_text.split("."))
    resolve_path(schema, etype, path)
    if op == "exists":
        value = None
    elif op == "in":
        raw = el.get("values")
        if raw is None:
            raise MvdError("<In> needs a values attribute")
        converted = {convert_value(schema, etype, path, v) for v in raw.split("|")}
        value = tuple(sorted(converted, key=repr))
    else:
        raw = el.get("value")
        if raw is None:
            raise MvdError(f"<{tag}> needs a value attribute")
        value = convert_value(schema, etype, path, raw)
    c = AttributeConstraint(path, op, value)
    check_constraint(schema, etype, c)
    return c


def _value_text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_mvd(view: ModelView) -> str:
    """Serialize a view; ``parse_mvd(write_mvd(v))`` yields an equal view."""
    lines = [f"<ModelView name={quoteattr(view.name)}>"]
    for p in view.provenance:
        lines.append(f"  <ExchangeRequirement name={quoteattr(p)}/>")
    for r in view.rules:
        body = _expr_xml(r.expr, 2)
        if body:
            lines.append(f"  <Rule type={quoteattr(r.entity_type)}>")
            lines.extend(body)
            lines.append("  </Rule>")
        else:
            lines.append(f"  <Rule type={quoteattr(r.entity_type)}/>")
    lines.append("</ModelView>")
    return "\n".join(lines) + "\n"


def _expr_xml(expr, depth: int, top: bool = True) -> list[str]:
    pad = "  " * depth
    if isinstance(expr, AttributeConstraint):
        tag = _TAG_OF[expr.op]
        path = quoteattr(".".join(expr.path))
        if expr.op == "exists":
            return [f"{pad}<{tag} path={path}/>"]
        if expr.op == "in":
            return [f"{pad}<{tag} path={path} values={quoteattr('|'.join(_value_text(v) for v in expr.value))}/>"]
        return [f"{pad}<{tag} path={path} value={quoteattr(_value_text(expr.value))}/>"]
    if top and isinstance(expr, And):
        return [line for item in expr.items for line in _expr_xml(item, depth, False)]
    tag = "And" if isinstance(expr, And) else "Or"
    if not expr.items:
        return [f"{pad}<{tag}/>"]
    inner = [line for item in expr.items for line in _expr_xml(item, depth + 1, False)]
    return [f"{pad}<{tag}>", *inner, f"{pad}</{tag}>"]


def all_clauses(view: ModelView) -> Iterable[tuple[str, frozenset]]:
    return itertools.chain.from_iterable(((r.entity_type, c) for c in r.clauses) for r in view.rules)
