"""A party server: local store, sharing workflow, replication and cross-party extraction.

Every stored entity is one exchangeable entity (a fragment) tagged with an
access level.  Private and Shared entries belong to this party; External
entries are read-only replicas of other parties' shared data that arrived
because this party's requirement view selects them.
"""

from __future__ import annotations

import logging
import os
import threading
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

from .controller import CONTROLLER, AccessLevel, IndexRecord
from .errors import AuthDenied, BadPayload, BimShareError, FederationError, MvdError, NotFound, NotOwner, SpfError
from .extract import ExtractionMode, ParallelLevel, SubModel, extract, extract_parallel
from .model import Fragment, Model, assemble
from .mvd import ModelView, parse_mvd
from .schema import Schema
from .spf import parse_fragments, write_fragment, write_spf
from .wire import Endpoint, Message, Service

logger = logging.getLogger(__name__)

STORE_INDEX = "store.tsv"


@dataclass(frozen=True)
class StoredEntity:
    fragment: Fragment
    access_level: AccessLevel
    origin_party: str
    local_version: int

    @property
    def owned(self) -> bool:
        return self.access_level is not AccessLevel.EXTERNAL


@dataclass
class PartyConfig:
    party_id: str
    manager_token: str = ""
    member_tokens: frozenset[str] = frozenset()
    requirements: str = ""  # MVD-XML text
    controller: str = CONTROLLER
    controller_address: str = ""
    address: str = ""
    data_dir: str = ""

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> PartyConfig:
        """Build from flat key=value settings; ``requirements`` names an MVD file."""
        known = {"party_id", "manager_token", "member_tokens", "requirements", "controller",
                 "controller_address", "address", "data_dir"}
        unknown = set(values) - known
        if unknown:
            raise BadPayload(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        if not values.get("party_id"):
            raise BadPayload("configuration needs party_id")
        requirements = ""
        if values.get("requirements"):
            requirements = Path(values["requirements"]).read_text(encoding="utf-8")
        members = frozenset(t.strip() for t in values.get("member_tokens", "").split(",") if t.strip())
        return cls(values["party_id"], values.get("manager_token", ""), members, requirements,
                   values.get("controller", CONTROLLER), values.get("controller_address", ""),
                   values.get("address", ""), values.get("data_dir", ""))


@dataclass
class Extraction:
    """A cross-party extraction with where each entity came from."""

    sub: SubModel
    remote_calls: int = 0
    warnings: list[str] = field(default_factory=list)


def _payload(fragment: Fragment, schema: Schema) -> str:
    return write_fragment(fragment, schema)


class PartyNode(Service):
    def __init__(self, schema: Schema, config: PartyConfig, endpoint: Endpoint | None = None):
        super().__init__()
        self.schema = schema
        self.config = config
        self.name = config.party_id
        self.endpoint = endpoint
        self.store: dict[str, StoredEntity] = {}
        self.tombstones: dict[str, int] = {}  # evicted External id -> version at eviction
        self.rejected: list[tuple[str, str]] = []  # (entity id, reason) for refused replicas
        self.call_log: list[tuple[str, str]] = []  # outgoing (destination, kind)
        self._lock = threading.RLock()
        self.requirements: ModelView | None = None
        if config.requirements:
            self.requirements = self._parse_view(config.requirements)

    # -- plumbing -----------------------------------------------------------

    def attach(self, endpoint: Endpoint) -> None:
        self.endpoint = endpoint

    def _call(self, dest: str, kind: str, body: dict) -> dict:
        if self.endpoint is None:
            raise FederationError("party is not connected")
        self.call_log.append((dest, kind))
        reply = self.endpoint.call(dest, kind, body)
        if "addresses" in reply:
            self.endpoint.learn(reply["addresses"])
        return reply

    def _send(self, dest: str, kind: str, body: dict) -> None:
        if self.endpoint is None:
            raise FederationError("party is not connected")
        self.call_log.append((dest, kind))
        self.endpoint.send(dest, kind, body, self._log_async_error)

    def _log_async_error(self, reply: Message) -> None:
        if reply.kind == "Error":
            logger.warning("%s: async request failed at %s: %s", self.name, reply.sender, reply.body)

    def _controller(self, kind: str, body: dict) -> dict:
        return self._call(self.config.controller, kind, {**body, "token": self.config.manager_token})

    def _parse_view(self, text: str) -> ModelView:
        try:
            return parse_mvd(text, self.schema)
        except MvdError as exc:
            raise BadPayload(f"view: {exc}") from None

    def _require_manager(self, token: str) -> None:
        if token != self.config.manager_token:
            raise AuthDenied(f"only the manager of {self.name} may do this")

    def _require_member(self, token: str) -> None:
        if token != self.config.manager_token and token not in self.config.member_tokens:
            raise AuthDenied(f"not a member of {self.name}")

    # -- membership ---------------------------------------------------------

    def register(self, rejoin: bool = False) -> list[str]:
        reply = self._call(self.config.controller, "RegisterParty", {
            "party_id": self.name, "address": self.config.address,
            "requirements": self.config.requirements, "token": self.config.manager_token,
            "rejoin": rejoin,
        })
        return reply["parties"]

    def define_requirements(self, xml: str, token: str) -> int:
        """Replace the requirement view and pull matching shared data already in the federation.

        Returns the number of External entries added.
        """
        self._require_manager(token)
        view = self._parse_view(xml)
        self._controller("RegisterParty", {"party_id": self.name, "requirements": xml, "requirements_only": True})
        with self._lock:
            self.config.requirements = xml
            self.requirements = view
            stale = [gid for gid, s in self.store.items()
                     if not s.owned and not view.matches(s.fragment.root, s.fragment.view(self.schema))]
            for gid in stale:
                del self.store[gid]
        types = sorted({r.entity_type for r in view.rules})
        records = [IndexRecord.from_json(d) for d in self._controller("Locate", {"types": types})["records"]]
        fetched = self._fetch([r for r in records if r.owner_party != self.name], view)
        added = 0
        with self._lock:
            for gid, (frag, version, origin) in fetched.items():
                if self._store_replica(frag, version, origin):
                    added += 1
        self._controller("RegisterParty", {"party_id": self.name, "requirements_only": True,
                                           "subscribe": sorted(fetched), "unsubscribe": sorted(stale)})
        return added

    # -- own data -----------------------------------------------------------

    def upload_model(self, text: str, token: str | None = None) -> int:
        """Store every rooted entity of an SPF file; new entities are Private."""
        if token is not None:
            self._require_member(token)
        fragments = parse_fragments(text, self.schema)
        with self._lock:
            for gid in fragments:
                s = self.store.get(gid)
                if s is not None and not s.owned:
                    raise NotOwner(f"{gid} is a replica owned by {s.origin_party}")
            changed_shared = []
            for gid, frag in fragments.items():
                s = self.store.get(gid)
                if s is None:
                    self.store[gid] = StoredEntity(frag, AccessLevel.PRIVATE, self.name, 1)
                elif s.access_level is AccessLevel.SHARED:
                    if s.fragment != frag:
                        changed_shared.append(frag)
                elif s.fragment != frag:
                    self.store[gid] = StoredEntity(frag, AccessLevel.PRIVATE, self.name, s.local_version + 1)
        for frag in changed_shared:
            self._write_shared(frag)
        return len(fragments)

    def own_model(self) -> Model:
        with self._lock:
            frags = [s.fragment for gid, s in sorted(self.store.items()) if s.owned]
        return assemble(self.schema, frags)

    def share(self, view: ModelView | str, token: str) -> int:
        """Make Private entities selected by ``view`` Shared and distribute them.

        Entities that are already Shared are left alone; returns how many changed.
        """
        self._require_manager(token)
        if isinstance(view, str):
            view = self._parse_view(view)
        model = self.own_model()
        gids = sorted(model.gid_of(e) for e in model.rooted() if view.matches(e, model))
        with self._lock:
            chosen = {gid: self.store[gid] for gid in gids
                      if gid in self.store and self.store[gid].access_level is AccessLevel.PRIVATE}
        if not chosen:
            return 0
        items = [{"entity_id": gid, "entity_type": s.fragment.type_name,
                  "payload": _payload(s.fragment, self.schema)} for gid, s in chosen.items()]
        reply = self._controller("RegisterShared", {"records": items})
        records = [IndexRecord.from_json(d) for d in reply["records"]]
        with self._lock:
            for rec in records:
                s = self.store[rec.entity_id]
                self.store[rec.entity_id] = StoredEntity(s.fragment, AccessLevel.SHARED, self.name, rec.version)
        self._replicate(records, {r.entity_id: chosen[r.entity_id].fragment for r in records})
        return len(records)

    def unshare(self, gids: Iterable[str], token: str) -> int:
        self._require_manager(token)
        gids = sorted(gids)
        with self._lock:
            for gid in gids:
                s = self.store.get(gid)
                if s is None:
                    raise NotFound(f"{gid} is not stored here")
                if not s.owned:
                    raise NotOwner(f"{gid} is owned by {s.origin_party}")
        reply = self._controller("RegisterShared", {"unshare": True, "entity_ids": gids})
        records = [IndexRecord.from_json(d) for d in reply["records"]]
        with self._lock:
            for rec in records:
                s = self.store[rec.entity_id]
                self.store[rec.entity_id] = StoredEntity(s.fragment, AccessLevel.PRIVATE, self.name, s.local_version)
        for rec in records:
            for party in sorted(rec.replica_servers):
                self._send(party, "Replicate", {"entities": [], "evict": {rec.entity_id: rec.version}})
        return len(records)

    def _replicate(self, records: list[IndexRecord], fragments: dict[str, Fragment],
                   transfer_to: str | None = None) -> None:
        batches: dict[str, list[dict]] = {}
        for rec in records:
            item = {"entity_id": rec.entity_id, "version": rec.version, "origin": rec.owner_party,
                    "payload": _payload(fragments[rec.entity_id], self.schema)}
            for party in sorted(rec.replica_servers):
                if party != self.name:
                    batches.setdefault(party, []).append(item)
            if transfer_to is not None:
                batches.setdefault(transfer_to, []).append({**item, "transfer": True})
        for party, items in sorted(batches.items()):
            self._send(party, "Replicate", {"entities": items})

    def local_write(self, token: str, payload: str | Fragment) -> int:
        """Replace an owned entity; returns its new version."""
        self._require_member(token)
        frag = payload if isinstance(payload, Fragment) else self._single_fragment(payload)
        with self._lock:
            s = self.store.get(frag.gid)
            if s is None:
                raise NotFound(f"{frag.gid} is not stored here")
            if not s.owned:
                raise NotOwner(f"{frag.gid} is a read-only copy owned by {s.origin_party}")
            if s.fragment.type_name != frag.type_name:
                raise BadPayload(f"{frag.gid} cannot change type from {s.fragment.type_name}")
            if s.access_level is AccessLevel.PRIVATE:
                self.store[frag.gid] = StoredEntity(frag, s.access_level, self.name, s.local_version + 1)
                return s.local_version + 1
        return self._write_shared(frag)

    def _write_shared(self, frag: Fragment) -> int:
        with self._lock:
            version = self.store[frag.gid].local_version + 1
        reply = self._controller("PropagateNotify", {
            "entity_id": frag.gid, "version": version, "payload": _payload(frag, self.schema)})
        rec = IndexRecord.from_json(reply["record"])
        with self._lock:
            self.store[frag.gid] = StoredEntity(frag, AccessLevel.SHARED, self.name, rec.version)
        self._replicate([rec], {frag.gid: frag})
        for party in reply["evict"]:
            if party != self.name:
                self._send(party, "Replicate", {"entities": [], "evict": {frag.gid: rec.version}})
        return rec.version

    def _single_fragment(self, text: str) -> Fragment:
        frags = parse_fragments(text, self.schema)
        if len(frags) != 1:
            raise BadPayload(f"expected one rooted entity, got {len(frags)}")
        return next(iter(frags.values()))

    def transfer_out(self, gid: str, to_party: str, token: str) -> IndexRecord:
        """Hand ownership of a Shared entity to another party; this copy becomes External."""
        self._require_manager(token)
        with self._lock:
            s = self.store.get(gid)
            if s is None:
                raise NotFound(f"{gid} is not stored here")
            if s.access_level is not AccessLevel.SHARED:
                raise NotOwner(f"{gid} is not a Shared entity of {self.name}")
        reply = self._controller("TransferOwner", {"entity_id": gid, "to_party": to_party})
        rec = IndexRecord.from_json(reply["record"])
        with self._lock:
            self.store[gid] = StoredEntity(s.fragment, AccessLevel.EXTERNAL, to_party, rec.version)
        self._replicate([rec], {gid: s.fragment}, transfer_to=to_party)
        return rec

    # -- replication --------------------------------------------------------

    def _store_replica(self, frag: Fragment, version: int, origin: str) -> bool:
        """Store an External copy if it is new or newer; caller holds the lock."""
        s = self.store.get(frag.gid)
        if s is not None and s.owned:
            return False
        if s is not None and s.local_version >= version:
            return False
        if self.tombstones.get(frag.gid, 0) >= version:
            return False
        self.store[frag.gid] = StoredEntity(frag, AccessLevel.EXTERNAL, origin, version)
        self.tombstones.pop(frag.gid, None)
        return True

    def on_replicate(self, items: list[dict], evict: dict[str, int] | None = None) -> dict:
        stored, rejected = [], []
        with self._lock:
            for gid, version in sorted((evict or {}).items()):
                s = self.store.get(gid)
                if s is not None and not s.owned and s.local_version <= version:
                    del self.store[gid]
                if s is None or not s.owned:
                    self.tombstones[gid] = max(self.tombstones.get(gid, 0), version)
            for item in items:
                gid, version, origin = item["entity_id"], int(item["version"]), item["origin"]
                frag = self._parse_item(item)
                if frag is None:
                    rejected.append(gid)
                    continue
                if item.get("transfer"):
                    if origin != self.name:
                        rejected.append(gid)
                        self.rejected.append((gid, "transfer addressed to another party"))
                        continue
                    s = self.store.get(gid)
                    if s is None or not s.owned or s.local_version < version:
                        self.store[gid] = StoredEntity(frag, AccessLevel.SHARED, self.name, version)
                        self.tombstones.pop(gid, None)
                    stored.append(gid)
                    continue
                s = self.store.get(gid)
                if s is not None and s.owned:
                    # a copy of something we now own: an older state, ignore
                    rejected.append(gid)
                    self.rejected.append((gid, "entity is owned here"))
                    continue
                view = self.requirements
                # copies already held (e.g. kept after a transfer) follow their owner
                required = s is not None or (view is not None and view.matches(frag.root, frag.view(self.schema)))
                if not required:
                    rejected.append(gid)
                    self.rejected.append((gid, "does not match the requirement view"))
                    logger.info("%s: rejected %s, not required", self.name, gid)
                    continue
                if s is not None and s.local_version > version:
                    rejected.append(gid)
                    self.rejected.append((gid, f"version {version} older than stored {s.local_version}"))
                    continue
                if self._store_replica(frag, version, origin) or (s is not None and s.local_version == version):
                    stored.append(gid)
                else:
                    rejected.append(gid)
        return {"stored": stored, "rejected": rejected}

    def _parse_item(self, item: dict) -> Fragment | None:
        gid = item["entity_id"]
        try:
            frags = parse_fragments(item["payload"], self.schema)
        except SpfError as exc:
            self.rejected.append((gid, f"bad payload: {exc}"))
            return None
        frag = frags.get(gid)
        if frag is None:
            self.rejected.append((gid, "payload does not contain the entity"))
        return frag

    # -- reading ------------------------------------------------------------

    def _fetch(self, records: list[IndexRecord], view: ModelView | None = None,
               warnings: list[str] | None = None) -> dict[str, tuple[Fragment, int, str]]:
        """Fetch entities from their hosts after the controller authorizes the reads."""
        if not records:
            return {}
        ids = [r.entity_id for r in records]
        decisions = self._controller("Authorize", {"party": self.name, "intent": "read", "entity_ids": ids})
        granted = decisions["decisions"]
        by_host: dict[str, list[str]] = {}
        for r in records:
            if granted.get(r.entity_id):
                by_host.setdefault(r.host_server, []).append(r.entity_id)
            elif warnings is not None:
                warnings.append(f"{r.entity_id}: read access denied")
        out = {}
        for host, gids in sorted(by_host.items()):
            try:
                reply = self._call(host, "FetchEntities", {"entity_ids": gids})
            except FederationError as exc:
                if warnings is not None:
                    warnings.append(f"{host}: fetch failed ({exc})")
                continue
            for gid in reply.get("denied", []):
                if warnings is not None:
                    warnings.append(f"{gid}: host {host} refused the read")
            for item in reply["entities"]:
                frag = self._parse_item(item)
                if frag is None:
                    continue
                if view is not None and not view.matches(frag.root, frag.view(self.schema)):
                    continue
                out[frag.gid] = (frag, int(item["version"]), item["origin"])
        return out

    def on_fetch(self, sender: str, gids: list[str]) -> dict:
        """Serve owned Shared entities; anything else is refused without detail."""
        items, denied = [], []
        with self._lock:
            for gid in gids:
                s = self.store.get(gid)
                if s is None or s.access_level is not AccessLevel.SHARED:
                    denied.append(gid)
                    continue
                items.append({"entity_id": gid, "version": s.local_version, "origin": self.name,
                              "payload": _payload(s.fragment, self.schema)})
        return {"entities": items, "denied": denied}

    def snapshot(self) -> dict[str, StoredEntity]:
        with self._lock:
            return dict(self.store)

    def local_model(self) -> Model:
        """Everything stored here, own data and replicas, as one model."""
        snap = self.snapshot()
        return assemble(self.schema, [snap[g].fragment for g in sorted(snap)])

    def extract_local(self, view: ModelView | str, mode: ExtractionMode | str = ExtractionMode.STRICT,
                      level: ParallelLevel | str | None = None, workers: int = 1) -> SubModel:
        if isinstance(view, str):
            view = self._parse_view(view)
        model = self.local_model()
        snap = self.snapshot()
        if level is None:
            sub = extract(model, view, mode)
        else:
            sub = extract_parallel([model], view, mode, level, workers)
        sub.origin = self.name
        sub.provenance = {g: snap[g].origin_party for g in sub.global_ids}
        return sub

    def cross_party_extract(self, view: ModelView | str, mode: ExtractionMode | str = ExtractionMode.STRICT,
                            level: ParallelLevel | str | None = None, workers: int = 1) -> Extraction:
        """Extract over local data plus whatever the view needs from other parties.

        When this party's requirement view already covers ``view``, every
        foreign entity the view can select is replicated here and no remote
        call is made.  Otherwise the controller is asked for indexed entities
        of the view's types (and relations), and the missing ones are fetched
        for this extraction only.
        """
        if isinstance(view, str):
            view = self._parse_view(view)
        snap = self.snapshot()
        calls_before = len(self.call_log)
        warnings: list[str] = []
        fragments = {gid: s.fragment for gid, s in snap.items()}
        origins = {gid: s.origin_party for gid, s in snap.items()}
        covered = self.requirements is not None and self.requirements.covers(view, self.schema)
        if not covered and self.endpoint is not None:
            types = sorted({r.entity_type for r in view.rules} | {self.schema.relationship_type})
            reply = self._controller("Locate", {"types": types})
            missing = [IndexRecord.from_json(d) for d in reply["records"]]
            missing = [r for r in missing if r.entity_id not in fragments]
            fetched = self._fetch(missing, None, warnings)
            for gid, (frag, _version, origin) in fetched.items():
                fragments[gid] = frag
                origins[gid] = origin
            # Relations may point at entities that are neither here nor indexed.
            known = set(fragments)
            for frag in fetched.values():
                for ref in sorted(frag[0].referenced_ids - known):
                    warnings.append(f"{frag[0].gid}: endpoint {ref} unavailable")
                    known.add(ref)
        dropped: list[str] = []
        model = assemble(self.schema, [fragments[g] for g in sorted(fragments)], dropped=dropped)
        warnings.extend(f"{g}: dropped, mandatory reference unavailable" for g in dropped)
        if level is None:
            sub = extract(model, view, mode, origin=self.name)
        else:
            sub = extract_parallel([model], view, mode, level, workers, origin=self.name)
        sub.provenance = {g: origins[g] for g in sub.global_ids}
        sub.warnings = warnings + sub.warnings
        return Extraction(sub, len(self.call_log) - calls_before, sub.warnings)

    def index_counts(self) -> dict[str, int]:
        with self._lock:
            counts = {level.value: 0 for level in AccessLevel}
            for s in self.store.values():
                counts[s.access_level.value] += 1
        return counts

    # -- persistence ------------------------------------------------------

    def checkpoint(self, directory: str | os.PathLike) -> None:
        """Write one canonical SPF file per entity plus a tab-separated index."""
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        snap = self.snapshot()
        for old in path.glob("*.ifc"):
            if old.stem not in snap:
                old.unlink()
        lines = []
        for gid in sorted(snap):
            s = snap[gid]
            (path / f"{gid}.ifc").write_text(_payload(s.fragment, self.schema), encoding="utf-8")
            lines.append(f"{gid}\t{s.access_level.value}\t{s.origin_party}\t{s.local_version}\n")
        tmp = path / (STORE_INDEX + ".tmp")
        tmp.write_text("".join(lines), encoding="utf-8")
        tmp.replace(path / STORE_INDEX)

    def restore(self, directory: str | os.PathLike) -> int:
        path = Path(directory)
        index = path / STORE_INDEX
        if not index.exists():
            return 0
        store = {}
        for n, line in enumerate(index.read_text(encoding="utf-8").splitlines(), start=1):
            try:
                gid, level, origin, version = line.split("\t")
                frag = parse_fragments((path / f"{gid}.ifc").read_text(encoding="utf-8"), self.schema)[gid]
                store[gid] = StoredEntity(frag, AccessLevel(level), origin, int(version))
            except (ValueError, KeyError, OSError) as exc:
                raise BimShareError(f"{index}:{n}: cannot restore entry: {exc}") from None
        with self._lock:
            self.store = store
        return len(store)

    # -- wire handlers ------------------------------------------------------

    def on_Replicate(self, msg: Message) -> dict:
        return self.on_replicate(msg.body.get("entities", []), msg.body.get("evict"))

    def on_FetchEntities(self, msg: Message) -> dict:
        return self.on_fetch(msg.sender, list(msg.body["entity_ids"]))

    def on_Admin(self, msg: Message) -> dict:
        """Operator commands forwarded by the command-line client."""
        reply = self._admin(msg.body)
        if self.config.data_dir and msg.body.get("op") in ("upload", "share", "define-requirements",
                                                          "transfer-owner"):
            self.checkpoint(self.config.data_dir)
        return reply

    def _admin(self, b: dict) -> dict:
        op = b.get("op")
        token = b.get("token", "")
        if op == "upload":
            return {"count": self.upload_model(b["text"], token)}
        if op == "share":
            return {"count": self.share(b["view"], token)}
        if op == "define-requirements":
            return {"added": self.define_requirements(b["view"], token)}
        if op == "extract":
            self._require_member(token)
            result = self.cross_party_extract(b["view"], b.get("mode", "strict"), b.get("level"),
                                              int(b.get("workers", 1)))
            return {"spf": write_spf(result.sub.model), "warnings": result.warnings,
                    "provenance": result.sub.provenance}
        if op == "transfer-owner":
            return {"record": self.transfer_out(b["entity_id"], b["to_party"], token).to_json()}
        if op == "ls":
            self._require_member(token)
            return {"counts": self.index_counts(),
                    "entities": [[gid, s.access_level.value, s.origin_party, s.local_version]
                                 for gid, s in sorted(self.snapshot().items())]}
        if op == "checkpoint":
            self._require_manager(token)
            if not self.config.data_dir:
                raise BadPayload("no data_dir configured")
            self.checkpoint(self.config.data_dir)
            return {"count": len(self.store)}
        raise BadPayload(f"unknown admin operation {op!r}")

