"""The global controller: an index of shared entities, never their payloads.

Each shared entity has one record naming its owner (who is also its host
server), the parties holding replicas, its access level and a version.
Replica targets come from the requirement views parties register: payload
text arrives with a share or change only long enough to be matched against
those views.
"""

from __future__ import annotations

import enum
import logging
import threading
import time
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass, field, replace

from .errors import AuthDenied, BadPayload, MvdError, NotFound, NotOwner, OwnershipClash, SpfError, StaleVersion
from .model import Fragment
from .mvd import ModelView, parse_mvd
from .schema import Schema
from .spf import parse_fragments
from .wire import Message, Service

logger = logging.getLogger(__name__)

CONTROLLER = "controller"


class AccessLevel(str, enum.Enum):
    PRIVATE = "Private"
    SHARED = "Shared"
    EXTERNAL = "External"


@dataclass(frozen=True)
class IndexRecord:
    entity_id: str
    entity_type: str
    owner_party: str
    host_server: str
    replica_servers: frozenset[str]
    access_level: AccessLevel
    version: int
    updated_at: int

    def to_json(self) -> dict:
        d = asdict(self)
        d["replica_servers"] = sorted(self.replica_servers)
        d["access_level"] = self.access_level.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> IndexRecord:
        return cls(d["entity_id"], d["entity_type"], d["owner_party"], d["host_server"],
                   frozenset(d["replica_servers"]), AccessLevel(d["access_level"]), d["version"], d["updated_at"])


@dataclass
class PartyRegistration:
    party_id: str
    address: str = ""
    requirements: str = ""  # MVD-XML text, may be empty
    token: str = ""


@dataclass
class _Party:
    reg: PartyRegistration
    view: ModelView | None


@dataclass(frozen=True)
class AuditEntry:
    at: int
    op: str
    party: str
    entity_id: str
    version: int
    outcome: str


@dataclass(frozen=True)
class SharedItem:
    """What a party submits when sharing: metadata plus a transient payload."""

    entity_id: str
    entity_type: str
    payload: str = ""  # SPF fragment text, used for routing only


@dataclass
class ChangeRouting:
    record: IndexRecord
    notify: list[str] = field(default_factory=list)
    evict: list[str] = field(default_factory=list)


class Controller(Service):
    name = CONTROLLER

    def __init__(self, schema: Schema, clock: Callable[[], int] | None = None, name: str = CONTROLLER):
        super().__init__()
        self.name = name
        self.schema = schema
        self._clock = clock or (lambda: int(time.time()))
        self._lock = threading.RLock()
        self._parties: dict[str, _Party] = {}
        self._index: dict[str, IndexRecord] = {}
        self._retired: dict[str, int] = {}  # last version of an entity that was unshared
        self._pinned: dict[str, set[str]] = {}  # former owners holding a replica
        self.audit: list[AuditEntry] = []

    # -- parties ------------------------------------------------------------

    def register_party(self, reg: PartyRegistration, rejoin: bool = False) -> dict:
        """Add a party.  ``rejoin`` lets a restarted party with the same token update its entry."""
        view = self._parse_view(reg.requirements)
        with self._lock:
            known = self._parties.get(reg.party_id)
            if known is not None and rejoin:
                if known.reg.token != reg.token:
                    raise AuthDenied(f"bad credentials for {reg.party_id!r}")
                self._parties[reg.party_id] = _Party(reg, view)
                self._log("rejoin-party", reg.party_id, "", 0, "ok")
            elif known is not None or reg.party_id == self.name:
                raise OwnershipClash(f"party id {reg.party_id!r} is already registered")
            else:
                self._parties[reg.party_id] = _Party(reg, view)
                self._log("register-party", reg.party_id, "", 0, "ok")
            return {"parties": sorted(self._parties), "addresses": self.addresses()}

    def set_requirements(self, party: str, requirements: str) -> None:
        view = self._parse_view(requirements)
        with self._lock:
            p = self._party(party)
            p.reg.requirements = requirements
            p.view = view
            self._log("define-requirements", party, "", 0, "ok")

    def subscribe(self, party: str, add: Iterable[str], remove: Iterable[str] = ()) -> int:
        """Adjust which indexed entities ``party`` holds replicas of (after pulling them)."""
        changed = 0
        with self._lock:
            self._party(party)
            for gid, keep in [(g, True) for g in add] + [(g, False) for g in remove]:
                rec = self._index.get(gid)
                if rec is None or rec.owner_party == party:
                    continue
                replicas = rec.replica_servers | {party} if keep else rec.replica_servers - {party}
                if replicas != rec.replica_servers:
                    self._index[gid] = replace(rec, replica_servers=frozenset(replicas))
                    changed += 1
            self._log("subscribe", party, "", 0, f"{changed} changed")
        return changed

    def _parse_view(self, text: str) -> ModelView | None:
        if not text:
            return None
        try:
            return parse_mvd(text, self.schema)
        except MvdError as exc:
            raise BadPayload(f"requirements view: {exc}") from None

    def _party(self, party: str) -> _Party:
        p = self._parties.get(party)
        if p is None:
            raise AuthDenied(f"party {party!r} is not registered")
        return p

    def parties(self) -> list[str]:
        with self._lock:
            return sorted(self._parties)

    def addresses(self) -> dict[str, str]:
        return {pid: p.reg.address for pid, p in self._parties.items() if p.reg.address}

    def check_token(self, party: str, token: str) -> None:
        p = self._party(party)
        if p.reg.token and p.reg.token != token:
            raise AuthDenied(f"bad credentials for {party!r}")

    # -- routing ------------------------------------------------------------

    def _fragment(self, item: SharedItem) -> Fragment | None:
        if not item.payload:
            return None
        try:
            frags = parse_fragments(item.payload, self.schema)
        except SpfError as exc:
            raise BadPayload(f"payload of {item.entity_id}: {exc}") from None
        frag = frags.get(item.entity_id)
        if frag is None:
            raise BadPayload(f"payload does not contain {item.entity_id}")
        return frag

    def route(self, owner: str, fragment: Fragment | None) -> frozenset[str]:
        """Parties (other than the owner) whose requirement view selects the entity."""
        if fragment is None:
            return frozenset()
        view_model = fragment.view(self.schema)
        out = set()
        for pid, p in self._parties.items():
            if pid != owner and p.view is not None and p.view.matches(fragment.root, view_model):
                out.add(pid)
        return frozenset(out)

    # -- index --------------------------------------------------------------

    def register_shared(self, party: str, items: Iterable[SharedItem]) -> dict[str, IndexRecord]:
        """Index shared entities; all-or-nothing per call."""
        items = list(items)
        routed = [(item, self.route(party, self._fragment(item))) for item in items]
        with self._lock:
            self._party(party)
            for item, _ in routed:
                rec = self._index.get(item.entity_id)
                if rec is not None and rec.owner_party != party:
                    self._log("register-shared", party, item.entity_id, rec.version, "clash")
                    raise OwnershipClash(f"{item.entity_id} is owned by {rec.owner_party}")
            now = self._clock()
            out = {}
            for item, replicas in routed:
                rec = self._index.get(item.entity_id)
                if rec is None:
                    version = self._retired.pop(item.entity_id, 0) + 1
                else:
                    version = rec.version
                replicas = replicas | (self._pinned.get(item.entity_id, set()) - {party})
                rec = IndexRecord(item.entity_id, item.entity_type, party, party, frozenset(replicas),
                                  AccessLevel.SHARED, version, now)
                self._index[item.entity_id] = rec
                self._log("register-shared", party, item.entity_id, version, "ok")
                out[item.entity_id] = rec
            return out

    def unshare(self, party: str, entity_ids: Iterable[str]) -> dict[str, IndexRecord]:
        with self._lock:
            self._party(party)
            removed = {}
            for gid in entity_ids:
                rec = self._index.get(gid)
                if rec is None:
                    continue
                if rec.owner_party != party:
                    raise NotOwner(f"{party} does not own {gid}")
                removed[gid] = self._index.pop(gid)
                self._retired[gid] = rec.version
                self._log("unshare", party, gid, rec.version, "ok")
            return removed

    def locate(self, entity_id: str) -> IndexRecord:
        with self._lock:
            rec = self._index.get(entity_id)
            if rec is None:
                raise NotFound(f"{entity_id} is not indexed")
            return rec

    def query(self, entity_types: Iterable[str] = (), party: str | None = None) -> list[IndexRecord]:
        """Records whose type descends from one of ``entity_types`` (all when empty)."""
        names: set[str] = set()
        for t in entity_types:
            td = self.schema.lookup(t)
            if td is None:
                raise BadPayload(f"unknown entity type {t}")
            names |= self.schema.descendants(td.name)
        with self._lock:
            recs = [r for r in self._index.values()
                    if (not names or r.entity_type in names)
                    and (party is None or r.owner_party == party or party in r.replica_servers)]
        return sorted(recs, key=lambda r: r.entity_id)

    def records(self) -> list[IndexRecord]:
        with self._lock:
            return sorted(self._index.values(), key=lambda r: r.entity_id)

    def authorize(self, party: str, entity_id: str, intent: str) -> bool:
        if intent not in ("read", "write"):
            raise BadPayload(f"intent must be read or write, not {intent!r}")
        with self._lock:
            self._party(party)
            rec = self._index.get(entity_id)
            if rec is None:
                self._log(f"authorize-{intent}", party, entity_id, 0, "unknown")
                raise NotFound(f"{entity_id} is not indexed")
            if intent == "write":
                ok = rec.owner_party == party
            else:
                ok = rec.owner_party == party or rec.access_level is AccessLevel.SHARED
            self._log(f"authorize-{intent}", party, entity_id, rec.version, "granted" if ok else "denied")
            return ok

    def transfer_ownership(self, entity_id: str, from_party: str, to_party: str) -> IndexRecord:
        with self._lock:
            self._party(from_party)
            if to_party not in self._parties:
                raise NotFound(f"target party {to_party!r} is not registered")
            rec = self._index.get(entity_id)
            if rec is None:
                raise NotFound(f"{entity_id} is not indexed")
            if rec.owner_party != from_party:
                self._log("transfer", from_party, entity_id, rec.version, "not-owner")
                raise NotOwner(f"{from_party} does not own {entity_id}")
            if to_party == from_party:
                return rec
            replicas = (rec.replica_servers - {to_party}) | {from_party}
            pinned = self._pinned.setdefault(entity_id, set())
            pinned.add(from_party)
            pinned.discard(to_party)
            rec = replace(rec, owner_party=to_party, host_server=to_party, replica_servers=replicas,
                          version=rec.version + 1, updated_at=self._clock())
            self._index[entity_id] = rec
            self._log("transfer", from_party, entity_id, rec.version, f"to {to_party}")
            return rec

    def propagate_change(self, party: str, entity_id: str, new_version: int,
                         payload: str = "") -> ChangeRouting:
        """Accept a new version from the owner; return who must receive or drop it."""
        frag = self._fragment(SharedItem(entity_id, "", payload)) if payload else None
        with self._lock:
            self._party(party)
            rec = self._index.get(entity_id)
            if rec is None:
                raise NotFound(f"{entity_id} is not indexed")
            if rec.owner_party != party:
                self._log("propagate", party, entity_id, new_version, "not-owner")
                raise NotOwner(f"{party} does not own {entity_id}")
            if new_version != rec.version + 1:
                self._log("propagate", party, entity_id, new_version, "stale")
                raise StaleVersion(f"{entity_id} is at version {rec.version}, got {new_version}")
            old = rec.replica_servers
            if frag is not None:
                # former owners keep their copy whatever their view says
                replicas = self.route(party, frag) | (self._pinned.get(entity_id, set()) - {party})
            else:
                replicas = old
            rec = replace(rec, replica_servers=frozenset(replicas), version=new_version,
                          updated_at=self._clock())
            self._index[entity_id] = rec
            self._log("propagate", party, entity_id, new_version, "ok")
            return ChangeRouting(rec, sorted(rec.replica_servers), sorted(old - rec.replica_servers))

    def _log(self, op: str, party: str, entity_id: str, version: int, outcome: str) -> None:
        self.audit.append(AuditEntry(self._clock(), op, party, entity_id, version, outcome))

    # -- wire handlers ------------------------------------------------------

    def _auth(self, msg: Message) -> None:
        self.check_token(msg.sender, msg.body.get("token", ""))

    def on_RegisterParty(self, msg: Message) -> dict:
        b = msg.body
        reg = PartyRegistration(b.get("party_id", msg.sender), b.get("address", ""), b.get("requirements", ""),
                                b.get("token", ""))
        if reg.party_id != msg.sender:
            raise AuthDenied("parties register themselves")
        if b.get("requirements_only"):
            self._auth(msg)
            if "requirements" in b:
                self.set_requirements(msg.sender, reg.requirements)
            self.subscribe(msg.sender, b.get("subscribe", ()), b.get("unsubscribe", ()))
            return {"parties": self.parties()}
        return self.register_party(reg, rejoin=bool(b.get("rejoin")))

    def on_RegisterShared(self, msg: Message) -> dict:
        self._auth(msg)
        if msg.body.get("unshare"):
            removed = self.unshare(msg.sender, msg.body["entity_ids"])
            return {"records": [r.to_json() for r in removed.values()], "addresses": self.addresses()}
        items = [SharedItem(d["entity_id"], d["entity_type"], d.get("payload", "")) for d in msg.body["records"]]
        recs = self.register_shared(msg.sender, items)
        return {"records": [r.to_json() for r in recs.values()], "addresses": self.addresses()}

    def on_Locate(self, msg: Message) -> dict:
        b = msg.body
        if "entity_id" in b:
            rec = self.locate(b["entity_id"])
            return {"records": [rec.to_json()], "addresses": self.addresses()}
        recs = self.query(b.get("types", ()), b.get("party"))
        return {"records": [r.to_json() for r in recs], "addresses": self.addresses()}

    def on_Authorize(self, msg: Message) -> dict:
        b = msg.body
        party = b.get("party", msg.sender)
        intent = b.get("intent", "read")
        decisions = {}
        for gid in b["entity_ids"]:
            try:
                decisions[gid] = self.authorize(party, gid, intent)
            except NotFound:
                decisions[gid] = False
        return {"decisions": decisions}

    def on_TransferOwner(self, msg: Message) -> dict:
        self._auth(msg)
        rec = self.transfer_ownership(msg.body["entity_id"], msg.sender, msg.body["to_party"])
        return {"record": rec.to_json(), "addresses": self.addresses()}

    def on_PropagateNotify(self, msg: Message) -> dict:
        self._auth(msg)
        b = msg.body
        routing = self.propagate_change(msg.sender, b["entity_id"], b["version"], b.get("payload", ""))
        return {"record": routing.record.to_json(), "notify": routing.notify, "evict": routing.evict,
                "addresses": self.addresses()}
