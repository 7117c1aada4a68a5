"""ISO 10303-21 (STEP physical file, ``*.ifc``) reading and writing.

Only the subset needed here is supported: a HEADER section, an optional
REFERENCE section mapping instance names to ``<#GlobalId>`` anchors (used for
fragments that point at rooted entities held elsewhere), and a DATA section
of simple entity instances.
"""

from __future__ import annotations

import re
import warnings
from collections.abc import Iterable
from dataclasses import dataclass, field

from .errors import ModelError, SpfError
from .model import (
    Entity,
    Fragment,
    Model,
    Ref,
    _resource_closure,
    check_value,
    is_valid_global_id,
    make_fragment,
)
from .schema import Kind, Schema, TypeDef


class SchemaMismatchWarning(UserWarning):
    pass


_TOKEN = re.compile(r"""
    (?P<ws>\s+|/\*.*?\*/)
  | (?P<string>'(?:[^']|'')*')
  | (?P<ref>\#[0-9]+)
  | (?P<enum>\.[A-Za-z_][A-Za-z0-9_]*\.)
  | (?P<real>[+-]?[0-9]+\.[0-9]*(?:[Ee][+-]?[0-9]+)?)
  | (?P<int>[+-]?[0-9]+)
  | (?P<kw>[A-Za-z_][A-Za-z0-9_\-]*)
  | (?P<uri><[^>]*>)
  | (?P<punct>[()=;,$*])
""", re.S | re.X)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


@dataclass
class SpfDocument:
    header: dict[str, list] = field(default_factory=dict)
    entities: dict[int, Entity] = field(default_factory=dict)
    references: dict[int, str] = field(default_factory=dict)

    @property
    def file_schema(self) -> str | None:
        args = self.header.get("FILE_SCHEMA")
        try:
            first = args[0]
            return first[0] if isinstance(first, list) else first
        except (TypeError, IndexError):
            return None


def _position(text: str, pos: int) -> tuple[int, int]:
    line = text.count("\n", 0, pos) + 1
    return line, pos - (text.rfind("\n", 0, pos) + 1) + 1


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    n = len(text)
    match = _TOKEN.match
    while pos < n:
        m = match(text, pos)
        if m is None:
            raise SpfError(f"unexpected character {text[pos]!r}", *_position(text, pos))
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), pos))
        pos = m.end()
    return toks


def decode_string(raw: str) -> str:
    """Decode the body of a quoted Part-21 string (quotes already stripped)."""
    out = []
    i = 0
    n = len(raw)
    while i < n:
        c = raw[i]
        if c == "'":
            # lexer guarantees doubled apostrophes
            out.append("'")
            i += 2
            continue
        if c != "\\":
            out.append(c)
            i += 1
            continue
        if raw.startswith("\\\\", i):
            out.append("\\")
            i += 2
        elif raw.startswith("\\X2\\", i) or raw.startswith("\\X4\\", i):
            width = 4 if raw[i + 2] == "2" else 8
            end = raw.find("\\X0\\", i + 4)
            if end < 0:
                raise ValueError("unterminated \\X2\\/\\X4\\ escape")
            digits = raw[i + 4:end]
            if len(digits) % width:
                raise ValueError("bad hex group length in unicode escape")
            for k in range(0, len(digits), width):
                out.append(chr(int(digits[k:k + width], 16)))
            i = end + 4
        elif raw.startswith("\\X\\", i):
            out.append(chr(int(raw[i + 3:i + 5], 16)))
            i += 5
        elif raw.startswith("\\S\\", i):
            out.append(chr(ord(raw[i + 3]) + 128))
            i += 4
        elif re.match(r"\\P[A-I]\\", raw[i:i + 4]):
            i += 4
        else:
            raise ValueError(f"bad escape sequence {raw[i:i + 4]!r}")
    return "".join(out)


def encode_string(s: str) -> str:
    out = ["'"]
    i = 0
    n = len(s)
    while i < n:
        c = s[i]
        o = ord(c)
        if c == "'":
            out.append("''")
            i += 1
        elif c == "\\":
            out.append("\\\\")
            i += 1
        elif 0x20 <= o <= 0x7E:
            out.append(c)
            i += 1
        else:
            astral = o > 0xFFFF
            j = i
            group = []
            while j < n and not (0x20 <= ord(s[j]) <= 0x7E) and (ord(s[j]) > 0xFFFF) == astral:
                group.append(f"{ord(s[j]):08X}" if astral else f"{ord(s[j]):04X}")
                j += 1
            out.append(("\\X4\\" if astral else "\\X2\\") + "".join(group) + "\\X0\\")
            i = j
    out.append("'")
    return "".join(out)


def format_real(x: float) -> str:
    r = repr(float(x))
    if "e" in r or "E" in r:
        mantissa, exp = r.lower().split("e")
        if "." not in mantissa:
            mantissa += "."
        return f"{mantissa}E{exp}"
    if "." not in r:
        r += "."
    return r


# -- parsing ------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def error(self, message: str, tok: _Tok | None = None) -> SpfError:
        if tok is None:
            tok = self.toks[self.i] if self.i < len(self.toks) else None
        if tok is None:
            return SpfError(message + " (unexpected end of file)", *_position(self.text, len(self.text)))
        return SpfError(message, *_position(self.text, tok.pos))

    def peek(self) -> _Tok | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def next(self) -> _Tok:
        tok = self.peek()
        if tok is None:
            raise self.error("unexpected end of file")
        self.i += 1
        return tok

    def expect(self, text: str) -> _Tok:
        tok = self.next()
        if tok.text != text:
            raise self.error(f"expected {text!r}, found {tok.text!r}", tok)
        return tok

    def value(self):
        """One parameter as a (kind, payload, token) triple."""
        tok = self.next()
        k = tok.kind
        if k == "string":
            try:
                return ("string", decode_string(tok.text[1:-1]), tok)
            except (ValueError, IndexError) as exc:
                raise self.error(f"bad string literal: {exc}", tok) from None
        if k == "int":
            return ("int", int(tok.text), tok)
        if k == "real":
            return ("real", float(tok.text), tok)
        if k == "enum":
            return ("enum", tok.text[1:-1], tok)
        if k == "ref":
            return ("ref", int(tok.text[1:]), tok)
        if tok.text == "$":
            return ("absent", None, tok)
        if tok.text == "*":
            return ("derived", None, tok)
        if tok.text == "(":
            items = []
            if self.peek() is not None and self.peek().text == ")":
                self.next()
                return ("list", items, tok)
            while True:
                items.append(self.value())
                sep = self.next()
                if sep.text == ")":
                    return ("list", items, tok)
                if sep.text != ",":
                    raise self.error(f"expected ',' or ')', found {sep.text!r}", sep)
        if k == "kw":
            return ("typed", tok.text, tok)
        raise self.error(f"unexpected token {tok.text!r}", tok)

    def args(self) -> list:
        self.expect("(")
        items = []
        if self.peek() is not None and self.peek().text == ")":
            self.next()
            return items
        while True:
            item = self.value()
            if item[0] == "typed":
                raise self.error(f"typed parameters such as {item[1]}(...) are not supported", item[2])
            items.append(item)
            sep = self.next()
            if sep.text == ")":
                return items
            if sep.text != ",":
                raise self.error(f"expected ',' or ')', found {sep.text!r}", sep)


def _plain(item):
    kind, payload, _ = item
    if kind == "list":
        return [_plain(x) for x in payload]
    return payload


def _convert(parser: _Parser, td: TypeDef, index: int, item):
    attr = td.attributes[index]
    kind, payload, tok = item
    where = f"{td.name}.{attr.name}"
    if kind == "derived":
        raise parser.error(f"{where}: derived value '*' is not supported", tok)
    if kind == "absent":
        if not attr.optional:
            raise parser.error(f"{where} is mandatory but '$' was given", tok)
        return None
    k = attr.kind
    if k is Kind.STRING and kind == "string":
        return payload
    if k is Kind.INTEGER and kind == "int":
        return payload
    if k is Kind.REAL and kind == "real":
        return payload
    if k is Kind.BOOLEAN and kind == "enum" and payload in ("T", "F"):
        return payload == "T"
    if k is Kind.ENUM and kind == "enum":
        if payload not in attr.tags:
            raise parser.error(f"{where}: .{payload}. is not one of {', '.join(attr.tags)}", tok)
        return payload
    if k is Kind.REF and kind == "ref":
        return Ref(payload)
    if k is Kind.LIST and kind == "list":
        out = []
        for sub in payload:
            if sub[0] != "ref":
                raise parser.error(f"{where}: list members must be references", sub[2])
            out.append(Ref(sub[1]))
        return tuple(out)
    raise parser.error(f"{where}: {kind} value does not match kind {attr.spec()}", tok)


def read_document(text: str, schema: Schema, *, allow_references: bool = False) -> SpfDocument:
    p = _Parser(text)
    doc = SpfDocument()
    p.expect("ISO-10303-21")
    p.expect(";")
    p.expect("HEADER")
    p.expect(";")
    while p.peek() is not None and p.peek().text != "ENDSEC":
        tok = p.next()
        if tok.kind != "kw":
            raise p.error(f"expected header record, found {tok.text!r}", tok)
        doc.header[tok.text.upper()] = [_plain(a) for a in p.args()]
        p.expect(";")
    p.expect("ENDSEC")
    p.expect(";")

    label_pos: dict[int, _Tok] = {}
    ref_uses: list[tuple[int, _Tok]] = []

    tok = p.peek()
    if tok is not None and tok.text == "REFERENCE":
        if not allow_references:
            raise p.error("REFERENCE section is not allowed in a self-contained model file", tok)
        p.next()
        p.expect(";")
        while p.peek() is not None and p.peek().text != "ENDSEC":
            name = p.next()
            if name.kind != "ref":
                raise p.error(f"expected instance name, found {name.text!r}", name)
            label = int(name.text[1:])
            p.expect("=")
            uri = p.next()
            if uri.kind != "uri" or not uri.text.startswith("<#"):
                raise p.error("expected <#GlobalId> reference", uri)
            if label in doc.references:
                raise p.error(f"duplicate instance name #{label}", name)
            doc.references[label] = uri.text[2:-1]
            label_pos[label] = name
            p.expect(";")
        p.expect("ENDSEC")
        p.expect(";")

    p.expect("DATA")
    p.expect(";")
    while p.peek() is not None and p.peek().text != "ENDSEC":
        name = p.next()
        if name.kind != "ref":
            raise p.error(f"expected entity instance '#n=', found {name.text!r}", name)
        label = int(name.text[1:])
        if label <= 0:
            raise p.error("instance names must be positive", name)
        if label in doc.entities or label in doc.references:
            raise p.error(f"duplicate instance name #{label}", name)
        p.expect("=")
        type_tok = p.next()
        if type_tok.text == "(":
            raise p.error("complex entity instances are not supported", type_tok)
        if type_tok.kind != "kw":
            raise p.error(f"expected entity type, found {type_tok.text!r}", type_tok)
        td = schema.lookup(type_tok.text)
        if td is None:
            raise p.error(f"unknown entity type {type_tok.text}", type_tok)
        if td.abstract:
            raise p.error(f"entity type {td.name} is abstract", type_tok)
        args = p.args()
        if len(args) != len(td.attributes):
            raise p.error(f"{td.name} takes {len(td.attributes)} attributes, found {len(args)}", type_tok)
        values = []
        for i, item in enumerate(args):
            v = _convert(p, td, i, item)
            if isinstance(v, Ref):
                ref_uses.append((v.label, item[2]))
            elif isinstance(v, tuple):
                ref_uses.extend((r.label, sub[2]) for r, sub in zip(v, item[1]))
            values.append(v)
        p.expect(";")
        doc.entities[label] = Entity(label, td.name, tuple(values))
        label_pos[label] = name
    p.expect("ENDSEC")
    p.expect(";")
    p.expect("END-ISO-10303-21")
    p.expect(";")
    if p.peek() is not None:
        raise p.error("content after END-ISO-10303-21")

    for label, tok in ref_uses:
        if label not in doc.entities and label not in doc.references:
            raise p.error(f"dangling reference #{label}", tok)

    expected = schema.name
    named = doc.file_schema
    if named is not None and named.upper() != expected.upper():
        warnings.warn(f"FILE_SCHEMA {named!r} differs from loaded schema {expected!r}",
                      SchemaMismatchWarning, stacklevel=3)
    doc._label_pos = label_pos  # type: ignore[attr-defined]
    doc._text = text  # type: ignore[attr-defined]
    return doc


def _model_error(doc: SpfDocument, exc: ModelError) -> SpfError:
    m = re.match(r"#(\d+)", str(exc))
    tok = doc._label_pos.get(int(m.group(1))) if m else None  # type: ignore[attr-defined]
    if tok is None:
        return SpfError(str(exc))
    return SpfError(str(exc), *_position(doc._text, tok.pos))  # type: ignore[attr-defined]


def parse_spf(text: str, schema: Schema) -> Model:
    """Parse a self-contained SPF file into a validated model."""
    doc = read_document(text, schema)
    try:
        return Model(schema, doc.entities.values())
    except ModelError as exc:
        raise _model_error(doc, exc) from None


def parse_fragments(text: str, schema: Schema) -> dict[str, Fragment]:
    """Parse an SPF file that may reference rooted entities held elsewhere.

    Every rooted instance becomes a fragment; references to other rooted
    instances in the file and to REFERENCE-section anchors become external.
    """
    doc = read_document(text, schema, allow_references=True)
    schema_types = schema.types
    placeholders: dict[int, Entity] = {}
    root_type = schema.root_type
    root_td = schema_types[root_type]
    # Stand-in rooted entities so make_fragment can resolve external GlobalIds.
    for label, gid in doc.references.items():
        attrs = [None] * len(root_td.attributes)
        attrs[0] = gid
        placeholders[label] = Entity(label, root_type, tuple(attrs))

    def lookup(label: int) -> Entity | None:
        return doc.entities.get(label) or placeholders.get(label)

    try:
        Model(schema, [e for e in doc.entities.values() if schema_types[e.type_name].rooted], validate=False)
    except ModelError as exc:
        raise _model_error(doc, exc) from None

    out: dict[str, Fragment] = {}
    for e in doc.entities.values():
        td = schema_types[e.type_name]
        if not td.rooted:
            continue
        resources = _resource_closure(lookup, schema, e)
        try:
            frag = make_fragment(schema, e, resources, lookup)
            fragment_model_check(schema, frag)
        except ModelError as exc:
            raise _model_error(doc, exc) from None
        out[frag.gid] = frag
    return out


def fragment_model_check(schema: Schema, fragment: Fragment) -> None:
    """Validate a fragment's attribute kinds and target types."""
    entities = list(fragment.entities())
    root_td = schema.types[schema.root_type]
    for label, gid in fragment.external.items():
        attrs = [None] * len(root_td.attributes)
        attrs[0] = gid
        entities.append(Entity(label, schema.root_type, tuple(attrs)))
    lookup = {e.label: e for e in entities}
    for e in fragment.entities():
        td = schema.types[e.type_name]
        if td.abstract or len(e.attrs) != len(td.attributes):
            raise ModelError(f"#{e.label}: malformed {e.type_name}")
        for i, v in enumerate(e.attrs):
            problem = check_value(schema, td, i, v)
            if problem:
                raise ModelError(f"#{e.label}: {problem}")
            if v is None or not td.attributes[i].kind.is_reference:
                continue
            for r in ((v,) if isinstance(v, Ref) else v):
                target = lookup.get(r.label)
                if target is None:
                    raise ModelError(f"#{e.label}: dangling reference #{r.label}")
                if r.label in fragment.external:
                    continue  # type of a remote entity is unknown here
                if td.attributes[i].target not in schema.types[target.type_name].ancestors:
                    raise ModelError(f"#{e.label}: {td.attributes[i].name} expects {td.attributes[i].target}")
    if not is_valid_global_id(fragment.gid):
        raise ModelError(f"#{fragment.root.label}: malformed GlobalId {fragment.gid!r}")


# -- writing ------------------------------------------------------------------

def _format_value(attr_kind: Kind, v) -> str:
    if v is None:
        return "$"
    if isinstance(v, Ref):
        return f"#{v.label}"
    if isinstance(v, tuple):
        return "(" + ",".join(f"#{r.label}" for r in v) + ")"
    if isinstance(v, bool):
        return ".T." if v else ".F."
    if attr_kind is Kind.ENUM:
        return f".{v}."
    if isinstance(v, str):
        return encode_string(v)
    if isinstance(v, int):
        return str(v)
    return format_real(v)


def _format_entity(schema: Schema, e: Entity) -> str:
    td = schema.types[e.type_name]
    args = ",".join(_format_value(a.kind, v) for a, v in zip(td.attributes, e.attrs))
    return f"#{e.label}={e.type_name.upper()}({args});"


def _header(schema: Schema, description: str) -> list[str]:
    return [
        "ISO-10303-21;",
        "HEADER;",
        f"FILE_DESCRIPTION(({encode_string(description)}),'2;1');",
        "FILE_NAME('','',(''),(''),'bimshare','bimshare','');",
        f"FILE_SCHEMA(({encode_string(schema.name)}));",
        "ENDSEC;",
    ]


def canonical_order(model: Model) -> list[Entity]:
    rooted = [e for e in model if model.is_rooted(e)]
    resources = [e for e in model if not model.is_rooted(e)]
    return rooted + resources


def write_spf(model: Model, description: str = "ViewDefinition [bimshare]") -> str:
    """Canonical serialization: rooted entities first, then resources, renumbered from #1."""
    schema = model.schema
    order = canonical_order(model)
    mapping = {e.label: i for i, e in enumerate(order, start=1)}
    lines = _header(schema, description)
    lines.append("DATA;")
    for e in order:
        td = schema.types[e.type_name]
        attrs = tuple(
            Ref(mapping[v.label]) if isinstance(v, Ref)
            else tuple(Ref(mapping[r.label]) for r in v) if isinstance(v, tuple)
            else v
            for v in e.attrs
        ) if td.reference_indexes else e.attrs
        lines.append(_format_entity(schema, Entity(mapping[e.label], e.type_name, attrs)))
    lines += ["ENDSEC;", "END-ISO-10303-21;", ""]
    return "\n".join(lines)


def write_fragment(fragment: Fragment, schema: Schema) -> str:
    """Serialize one fragment; external rooted entities go in a REFERENCE section."""
    return write_fragments([fragment], schema)


def write_fragments(fragments: Iterable[Fragment], schema: Schema) -> str:
    """Serialize fragments into one file, relabelling so their labels do not collide."""
    fragments = list(fragments)
    lines = _header(schema, "ExchangeableEntities [bimshare]")
    data = []
    refs: dict[str, int] = {}
    roots: dict[str, int] = {}
    next_label = 1
    for f in fragments:
        roots[f.gid] = next_label
        next_label += len(f.resources) + 1
    for f in fragments:
        for gid in sorted(f.external.values()):
            if gid not in roots and gid not in refs:
                refs[gid] = next_label
                next_label += 1
    for f in fragments:
        base = roots[f.gid]
        local = {f.root.label: base}
        for k, r in enumerate(f.resources, start=1):
            local[r.label] = base + k
        for label, gid in f.external.items():
            local[label] = roots.get(gid) or refs[gid]
        for e in f.entities():
            td = schema.types[e.type_name]
            attrs = tuple(
                Ref(local[v.label]) if isinstance(v, Ref)
                else tuple(Ref(local[r.label]) for r in v) if isinstance(v, tuple)
                else v
                for v in e.attrs
            ) if td.reference_indexes else e.attrs
            data.append(_format_entity(schema, Entity(local[e.label], e.type_name, attrs)))
    if refs:
        lines.append("REFERENCE;")
        for gid, label in sorted(refs.items(), key=lambda kv: kv[1]):
            lines.append(f"#{label}=<#{gid}>;")
        lines.append("ENDSEC;")
    lines.append("DATA;")
    lines.extend(data)
    lines += ["ENDSEC;", "END-ISO-10303-21;", ""]
    return "\n".join(lines)
