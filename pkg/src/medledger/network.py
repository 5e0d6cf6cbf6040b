"""The transaction pipeline and the in-process network that hosts it.

Life of a transaction: a client forms a signed proposal, endorsing peers
from the channel's policy organizations simulate the chaincode against
their committed state and sign the resulting read/write sets, the client
assembles the endorsed envelope and hands it to the ordering cluster, the
cutter batches the committed stream into blocks, and every channel peer
validates each transaction (endorsement policy, signatures, replay,
read-version currency) before applying its writes. Invalid transactions
stay in the block, flagged, and change nothing.

Everything runs on one scheduler, so a seeded virtual clock reproduces an
entire run bit-for-bit, crashes included.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field, replace

from . import chaincode
from .abac import PolicyTable, UserAttributes, attribute_key
from .codec import pack_bytes, sha256, sha256_hex, u64, unpack_bytes
from .envelope import KeyStore, SymmetricKey
from .errors import (
    ChaincodeError,
    ConfigError,
    DuplicateError,
    EndorsementError,
    NoLeaderError,
    PipelineError,
    UnknownMemberError,
)
from .identity import MemberIdentity, MembershipRegistry
from .ledger import (
    Block,
    ChannelLedger,
    INVALID_BAD_ENVELOPE,
    INVALID_BAD_SIGNATURE,
    INVALID_DUPLICATE_TXID,
    INVALID_MVCC,
    INVALID_POLICY,
    TransactionEnvelope,
    VALID,
    open_block_file,
)
from .paillier import PaillierPublicKey
from .raft import BlockCutter, ClusterConfig, RaftCluster

NONCE_LEN = 16
GENESIS_CREATOR = "system/genesis"

# client <-> peer round-trip delay range (seconds)
_ENDORSE_DELAY = (0.0005, 0.002)


@dataclass
class Proposal:
    channel: str
    chaincode_fn: str
    args: list[bytes]
    creator: str  # qualified id org/member
    nonce: bytes
    timestamp: int
    signature: bytes = b""

    @property
    def tx_id(self) -> str:
        return sha256_hex(pack_bytes(self.creator.encode(), self.nonce))

    def digest(self) -> bytes:
        body = pack_bytes(self.channel.encode(), self.chaincode_fn.encode(),
                          self.creator.encode(), self.nonce) + u64(self.timestamp)
        for arg in self.args:
            body += pack_bytes(arg)
        return sha256(body)


@dataclass(frozen=True)
class EndorsementPolicy:
    required_orgs: int
    org_set: tuple[str, ...]

    def validate(self):
        if not (1 <= self.required_orgs <= len(self.org_set)):
            raise ConfigError(
                f"required_orgs must be in [1, {len(self.org_set)}]")
        return self


@dataclass
class ChannelSpec:
    """Static channel definition carried by the genesis block."""

    name: str
    member_orgs: tuple[str, ...]
    policy: EndorsementPolicy
    phe_public_key: str = ""  # decimal modulus, empty when unset
    initial_roles: dict = field(default_factory=dict)  # member_id -> (role, org)

    def to_json_obj(self):
        return {
            "name": self.name,
            "member_orgs": list(self.member_orgs),
            "required_orgs": self.policy.required_orgs,
            "policy_orgs": list(self.policy.org_set),
            "phe_public_key": self.phe_public_key,
            "initial_roles": {m: list(v) for m, v in self.initial_roles.items()},
        }


@dataclass
class EndorsementResponse:
    org_id: str
    endorser: str
    signature: bytes
    read_set: list
    write_set: list
    response: bytes
    events: list


@dataclass
class Receipt:
    tx_id: str
    valid: bool
    reason: str
    block_number: int | None = None
    tx_index: int | None = None
    t_sent: float = 0.0
    t_endorsed: float | None = None
    t_committed: float | None = None


class PendingTx:
    """Handle for an in-flight submission; resolves exactly once."""

    def __init__(self, tx_id: str, t_sent: float):
        self.tx_id = tx_id
        self.t_sent = t_sent
        self.t_endorsed = None
        self.receipt: Receipt | None = None
        self._callbacks = []

    @property
    def done(self) -> bool:
        return self.receipt is not None

    def on_done(self, cb):
        if self.receipt is not None:
            cb(self.receipt)
        else:
            self._callbacks.append(cb)

    def _resolve(self, receipt: Receipt):
        if self.receipt is not None:
            return
        self.receipt = receipt
        for cb in self._callbacks:
            cb(receipt)
        self._callbacks.clear()


def endorsed_content_digest(env: TransactionEnvelope) -> bytes:
    """Digest each endorser signs: the envelope minus signatures."""
    return sha256(replace(env, endorsements=[], creator_sig=b"").to_bytes())


class SimulationContext:
    """Chaincode view over a peer's committed state.

    Records the version of every committed key read (absent keys read as
    version None) and buffers writes; writes shadow subsequent reads within
    the same execution and are never applied here.
    """

    def __init__(self, ledger: ChannelLedger, channel: str, creator_member: str,
                 is_org_admin: bool, timestamp: int, policy: PolicyTable,
                 phe_public_key: PaillierPublicKey | None):
        self._ledger = ledger
        self.channel = channel
        self.creator_member = creator_member
        self.is_org_admin = is_org_admin
        self.timestamp = timestamp
        self.policy = policy
        self.phe_public_key = phe_public_key
        self._reads: dict[str, tuple | None] = {}
        self._writes: dict[str, bytes] = {}
        self.events: list[tuple[str, str]] = []

    def get_state(self, key: str):
        if key in self._writes:
            return self._writes[key]
        entry = self._ledger.get_state(key)
        if key not in self._reads:
            self._reads[key] = entry[1] if entry else None
        return entry[0] if entry else None

    def put_state(self, key: str, value: bytes):
        if not isinstance(value, bytes):
            raise ChaincodeError("state values must be bytes")
        self._writes[key] = value

    def emit_event(self, name: str, key: str):
        self.events.append((name, key))

    def read_set(self) -> list:
        return list(self._reads.items())

    def write_set(self) -> list:
        return list(self._writes.items())


class Peer:
    """An endorsing and committing peer of one organization."""

    def __init__(self, peer_id: str, org_id: str, identity: MemberIdentity,
                 registry: MembershipRegistry, policy: PolicyTable):
        self.peer_id = peer_id
        self.org_id = org_id
        self.identity = identity
        self.registry = registry
        self.policy = policy
        self.ledgers: dict[str, ChannelLedger] = {}
        self.channel_specs: dict[str, ChannelSpec] = {}
        self.phe_keys: dict[str, PaillierPublicKey | None] = {}
        self.busy_seconds = 0.0
        self.blocks_committed = 0
        self.net_in_bytes = 0
        self.net_out_bytes = 0

    def join_channel(self, spec: ChannelSpec, genesis: Block, block_file=None):
        ledger = ChannelLedger(spec.name, members=spec.member_orgs,
                               block_file=block_file)
        ledger.append_block(genesis)
        self.ledgers[spec.name] = ledger
        self.channel_specs[spec.name] = spec
        self.phe_keys[spec.name] = (
            PaillierPublicKey.from_decimal(spec.phe_public_key)
            if spec.phe_public_key else None)

    def restore_channel(self, spec: ChannelSpec, blocks: list[Block],
                        block_file=None):
        ledger = ChannelLedger(spec.name, members=spec.member_orgs)
        for block in blocks:
            ledger.append_block(block)
        if block_file is not None:
            ledger.attach_sink(block_file)
        self.ledgers[spec.name] = ledger
        self.channel_specs[spec.name] = spec
        self.phe_keys[spec.name] = (
            PaillierPublicKey.from_decimal(spec.phe_public_key)
            if spec.phe_public_key else None)

    # --- endorsement -------------------------------------------------------

    def endorse(self, proposal: Proposal) -> EndorsementResponse:
        started = _time.perf_counter()
        self.net_in_bytes += 128 + sum(len(a) for a in proposal.args)
        try:
            response = self._endorse(proposal)
            self.net_out_bytes += 128 + len(response.response)
            return response
        finally:
            self.busy_seconds += _time.perf_counter() - started

    def _endorse(self, proposal: Proposal) -> EndorsementResponse:
        ledger = self.ledgers.get(proposal.channel)
        if ledger is None:
            raise PipelineError(
                f"{self.peer_id} is not a member of {proposal.channel!r}")
        if not self.registry.is_registered(proposal.creator):
            raise UnknownMemberError(
                f"creator {proposal.creator!r} is not registered")
        if not self.registry.verify(proposal.creator, proposal.digest(),
                                    proposal.signature):
            raise UnknownMemberError("proposal signature does not verify")
        if proposal.tx_id in ledger.seen_txids:
            raise DuplicateError(
                f"transaction id {proposal.tx_id} was already committed")
        _, member = proposal.creator.split("/", 1)
        ctx = SimulationContext(
            ledger, proposal.channel, member,
            self.registry.is_org_admin(proposal.creator),
            proposal.timestamp, self.policy,
            self.phe_keys.get(proposal.channel))
        response = chaincode.dispatch(ctx, proposal.chaincode_fn, proposal.args)
        env = TransactionEnvelope(
            tx_id=proposal.tx_id, channel=proposal.channel,
            chaincode_fn=proposal.chaincode_fn, args=list(proposal.args),
            read_set=ctx.read_set(), write_set=ctx.write_set(),
            endorsements=[], creator=proposal.creator, nonce=proposal.nonce,
            timestamp=proposal.timestamp, creator_sig=b"", response=response,
            events=list(ctx.events))
        signature = self.identity.sign(endorsed_content_digest(env))
        return EndorsementResponse(
            org_id=self.org_id, endorser=self.identity.qualified_id,
            signature=signature, read_set=env.read_set,
            write_set=env.write_set, response=response, events=env.events)

    # --- validation and commit ----------------------------------------------

    def commit_payloads(self, channel: str, payloads: list[bytes]) -> Block:
        started = _time.perf_counter()
        self.net_in_bytes += 64 + sum(len(p) for p in payloads)
        try:
            return self._commit_payloads(channel, payloads)
        finally:
            self.busy_seconds += _time.perf_counter() - started

    def _commit_payloads(self, channel: str, payloads: list[bytes]) -> Block:
        ledger = self.ledgers[channel]
        spec = self.channel_specs[channel]
        number = ledger.height
        envelopes, flags, reasons = [], [], []
        overlay: dict[str, tuple] = {}
        block_txids: set[str] = set()
        for idx, payload in enumerate(payloads):
            try:
                env = TransactionEnvelope.from_bytes(payload)
            except (ValueError, UnicodeDecodeError):
                env = TransactionEnvelope(
                    tx_id=f"unparseable-{number}-{idx}", channel=channel,
                    chaincode_fn="__invalid__", args=[payload], read_set=[],
                    write_set=[], endorsements=[], creator="", nonce=b"",
                    timestamp=0)
                envelopes.append(env)
                flags.append(False)
                reasons.append(INVALID_BAD_ENVELOPE)
                continue
            reason = self._validate_tx(ledger, spec, env, overlay, block_txids)
            if reason == VALID:
                for key, _ in env.write_set:
                    overlay[key] = (number, idx)
            block_txids.add(env.tx_id)
            envelopes.append(env)
            flags.append(reason == VALID)
            reasons.append(reason)
        block = Block.build(number, ledger.tip_hash(), envelopes, flags, reasons)
        ledger.append_block(block)
        self.blocks_committed += 1
        return block

    def _validate_tx(self, ledger, spec: ChannelSpec, env: TransactionEnvelope,
                     overlay: dict, block_txids: set) -> str:
        if env.channel != ledger.name:
            return INVALID_BAD_ENVELOPE
        if env.tx_id in ledger.seen_txids or env.tx_id in block_txids:
            return INVALID_DUPLICATE_TXID
        expected_txid = sha256_hex(pack_bytes(env.creator.encode(), env.nonce))
        if env.tx_id != expected_txid:
            return INVALID_BAD_ENVELOPE
        if not self.registry.is_registered(env.creator):
            return INVALID_BAD_SIGNATURE
        proposal_digest = Proposal(
            channel=env.channel, chaincode_fn=env.chaincode_fn, args=env.args,
            creator=env.creator, nonce=env.nonce,
            timestamp=env.timestamp).digest()
        if not self.registry.verify(env.creator, proposal_digest,
                                    env.creator_sig):
            return INVALID_BAD_SIGNATURE
        content = endorsed_content_digest(env)
        orgs_ok = set()
        for org_id, endorser, signature in env.endorsements:
            if org_id not in spec.policy.org_set:
                continue
            if not self.registry.is_registered(endorser):
                continue
            if self.registry.org_of(endorser) != org_id:
                continue
            if self.registry.verify(endorser, content, signature):
                orgs_ok.add(org_id)
        if len(orgs_ok) < spec.policy.required_orgs:
            return INVALID_POLICY
        for key, version in env.read_set:
            if key in overlay:
                current = overlay[key]
            else:
                entry = ledger.get_state(key)
                current = entry[1] if entry else None
            if current != (tuple(version) if version is not None else None):
                return INVALID_MVCC
        return VALID


class Orderer:
    """Ordering facade: Raft-replicated total order plus per-channel cutters.

    Cut batches are delivered to peers in a separate scheduler event so the
    commit work never runs nested inside a consensus message handler.
    """

    def __init__(self, cluster: RaftCluster, scheduler, channels, deliver_cb):
        self.cluster = cluster
        self.scheduler = scheduler
        self.deliver_cb = deliver_cb
        self._cutters = {
            name: BlockCutter(
                scheduler, cluster.config.block_batch_size,
                cluster.config.block_batch_timeout,
                lambda batch, name=name: self._dispatch(name, batch))
            for name in channels
        }
        cluster.subscribe(self._on_committed)

    def submit(self, channel: str, envelope_bytes: bytes) -> int:
        if channel not in self._cutters:
            raise PipelineError(f"unknown channel {channel!r}")
        return self.cluster.submit_entry(
            pack_bytes(channel.encode(), envelope_bytes))

    def _dispatch(self, channel: str, batch: list[bytes]):
        delay = self.scheduler.rng.uniform(*_ENDORSE_DELAY)
        self.scheduler.call_later(delay, self.deliver_cb, channel, batch)

    def _on_committed(self, index: int, term: int, payload: bytes):
        (channel, env_bytes), _ = unpack_bytes(payload, 2)
        cutter = self._cutters.get(channel.decode())
        if cutter is not None:
            cutter.feed(env_bytes)


class Network:
    """A bootstrapped in-process deployment: organizations, peers, channels,
    ordering cluster and the client entry points."""

    def __init__(self, scheduler, registry: MembershipRegistry,
                 policy: PolicyTable, cluster_config: ClusterConfig,
                 raft_storage_factory=None):
        self.scheduler = scheduler
        self.rng = scheduler.rng
        self.registry = registry
        self.policy = policy
        self.peers: dict[str, Peer] = {}
        self.org_peers: dict[str, list[str]] = {}
        self.channels: dict[str, ChannelSpec] = {}
        self.identities: dict[str, MemberIdentity] = {}
        self.keystore = KeyStore()
        self.phe_private_keys = {}  # channel -> PaillierPrivateKey (authority)
        self._pending: dict[str, PendingTx] = {}
        self.events: list[tuple[str, str, str]] = []
        self.cluster = RaftCluster(cluster_config, scheduler,
                                   storage_factory=raft_storage_factory)
        self.orderer: Orderer | None = None
        self._anchor: dict[str, str] = {}
        self._block_dir = None

    # --- topology -----------------------------------------------------------

    def add_org(self, org_id: str, peer_count: int = 1):
        if org_id in self.org_peers:
            raise ConfigError(f"duplicate organization {org_id!r}")
        self.org_peers[org_id] = []
        for i in range(peer_count):
            peer_id = f"peer{i}.{org_id}"
            identity = MemberIdentity.create(
                org_id, peer_id, role_hint="peer",
                seed=self.rng.randbytes(32))
            self.registry.register(identity)
            peer = Peer(peer_id, org_id, identity, self.registry, self.policy)
            self.peers[peer_id] = peer
            self.org_peers[org_id].append(peer_id)

    def provision_identity(self, member_id: str, org_id: str,
                           org_admin: bool = False) -> MemberIdentity:
        if org_id not in self.org_peers:
            raise ConfigError(f"unknown organization {org_id!r}")
        identity = MemberIdentity.create(org_id, member_id,
                                         is_org_admin=org_admin,
                                         seed=self.rng.randbytes(32))
        self.registry.register(identity)
        self.identities[member_id] = identity
        return identity

    def create_channel(self, spec: ChannelSpec, block_dir=None):
        spec.policy.validate()
        for org in spec.member_orgs:
            if org not in self.org_peers:
                raise ConfigError(
                    f"channel {spec.name!r} references unknown org {org!r}")
        for org in spec.policy.org_set:
            if org not in spec.member_orgs:
                raise ConfigError(
                    f"policy org {org!r} is not a member of {spec.name!r}")
        genesis = self._genesis_block(spec)
        for peer_id in self._member_peers(spec):
            sink = None
            if block_dir is not None:
                sink = open_block_file(
                    f"{block_dir}/{peer_id}/{spec.name}.chain")
            self.peers[peer_id].join_channel(spec, genesis, block_file=sink)
        self.channels[spec.name] = spec
        self._anchor[spec.name] = self._member_peers(spec)[0]

    def restore_channel(self, spec: ChannelSpec, blocks_by_peer: dict,
                        block_dir=None):
        spec.policy.validate()
        for peer_id in self._member_peers(spec):
            sink = None
            if block_dir is not None:
                sink = open_block_file(
                    f"{block_dir}/{peer_id}/{spec.name}.chain")
            self.peers[peer_id].restore_channel(
                spec, blocks_by_peer[peer_id], block_file=sink)
        self.channels[spec.name] = spec
        self._anchor[spec.name] = self._member_peers(spec)[0]

    def _member_peers(self, spec: ChannelSpec) -> list[str]:
        out = []
        for org in spec.member_orgs:
            out.extend(self.org_peers[org])
        return out

    def _genesis_block(self, spec: ChannelSpec) -> Block:
        from .codec import canonical_json
        config_bytes = canonical_json(spec.to_json_obj())
        write_set = [("sys/channel-config", config_bytes)]
        for member_id, (role, org) in sorted(spec.initial_roles.items()):
            attrs = UserAttributes(member_id=member_id, role=role, org_id=org)
            write_set.append((attribute_key(member_id), attrs.to_json_bytes()))
        env = TransactionEnvelope(
            tx_id=f"genesis-{spec.name}", channel=spec.name,
            chaincode_fn="__config__", args=[config_bytes], read_set=[],
            write_set=write_set, endorsements=[], creator=GENESIS_CREATOR,
            nonce=b"", timestamp=0)
        from .ledger import GENESIS_PREV_HASH
        return Block.build(0, GENESIS_PREV_HASH, [env], [True], [VALID])

    def start(self):
        self.cluster.start()
        self.orderer = Orderer(self.cluster, self.scheduler,
                               list(self.channels), self._deliver_block)

    def stop(self):
        self.cluster.stop()

    # --- commit path ----------------------------------------------------------

    def _deliver_block(self, channel: str, payloads: list[bytes]):
        spec = self.channels[channel]
        anchor_block = None
        for peer_id in self._member_peers(spec):
            block = self.peers[peer_id].commit_payloads(channel, payloads)
            if peer_id == self._anchor[channel]:
                anchor_block = block
        if anchor_block is not None:
            self._observe_commit(channel, anchor_block)

    def _observe_commit(self, channel: str, block: Block):
        now = self.scheduler.now()
        for idx, (env, flag, reason) in enumerate(zip(
                block.transactions, block.validity_flags,
                block.validity_reasons)):
            if flag:
                for name, key in env.events:
                    self.events.append((name, env.tx_id, key))
            pending = self._pending.pop(env.tx_id, None)
            if pending is not None:
                pending._resolve(Receipt(
                    tx_id=env.tx_id, valid=flag, reason=reason,
                    block_number=block.number, tx_index=idx,
                    t_sent=pending.t_sent, t_endorsed=pending.t_endorsed,
                    t_committed=now))

    # --- client operations ------------------------------------------------------

    def endorsing_peers(self, channel: str) -> list[Peer]:
        spec = self.channels[channel]
        return [self.peers[self.org_peers[org][0]] for org in spec.policy.org_set]

    def submit_async(self, channel: str, fn: str, args_text: list[str],
                     identity: MemberIdentity) -> PendingTx:
        """Full invoke path; resolution happens via the commit stream."""
        if channel not in self.channels:
            raise PipelineError(f"unknown channel {channel!r}")
        now = self.scheduler.now()
        proposal = Proposal(
            channel=channel, chaincode_fn=fn,
            args=[a.encode("utf-8") for a in args_text],
            creator=identity.qualified_id,
            nonce=self.rng.randbytes(NONCE_LEN),
            timestamp=int(now * 1000))
        proposal.signature = identity.sign(proposal.digest())
        pending = PendingTx(proposal.tx_id, t_sent=now)
        self._pending[proposal.tx_id] = pending
        peers = self.endorsing_peers(channel)
        spec = self.channels[channel]
        collector = {"responses": [], "failures": [], "outstanding": len(peers)}
        for peer in peers:
            delay = self.rng.uniform(*_ENDORSE_DELAY)
            self.scheduler.call_later(delay, self._endorse_step, peer, proposal,
                                      collector, spec, pending)
        return pending

    def _endorse_step(self, peer: Peer, proposal: Proposal, collector, spec,
                      pending: PendingTx):
        try:
            response = peer.endorse(proposal)
            collector["responses"].append(response)
        except PipelineError as exc:
            collector["failures"].append(exc)
        collector["outstanding"] -= 1
        if collector["outstanding"] > 0:
            return
        # back at the client after a return hop
        delay = self.rng.uniform(*_ENDORSE_DELAY)
        self.scheduler.call_later(delay, self._assemble_and_order, proposal,
                                  collector, spec, pending)

    def _assemble_and_order(self, proposal: Proposal, collector, spec,
                            pending: PendingTx):
        responses = collector["responses"]
        orgs = {r.org_id for r in responses}
        if len(orgs) < spec.policy.required_orgs:
            failure = collector["failures"][0] if collector["failures"] else \
                EndorsementError("endorsement policy unsatisfied")
            self._reject(pending, failure)
            return
        first = responses[0]
        for other in responses[1:]:
            if (other.read_set, other.write_set, other.response,
                    other.events) != (first.read_set, first.write_set,
                                      first.response, first.events):
                self._reject(pending, EndorsementError(
                    "endorsing peers produced divergent results"))
                return
        pending.t_endorsed = self.scheduler.now()
        env = TransactionEnvelope(
            tx_id=proposal.tx_id, channel=proposal.channel,
            chaincode_fn=proposal.chaincode_fn, args=list(proposal.args),
            read_set=first.read_set, write_set=first.write_set,
            endorsements=[(r.org_id, r.endorser, r.signature)
                          for r in responses],
            creator=proposal.creator, nonce=proposal.nonce,
            timestamp=proposal.timestamp, creator_sig=proposal.signature,
            response=first.response, events=first.events)
        try:
            self.orderer.submit(proposal.channel, env.to_bytes())
        except NoLeaderError as exc:
            self._reject(pending, exc)

    def _reject(self, pending: PendingTx, error: Exception):
        self._pending.pop(pending.tx_id, None)
        reason = type(error).__name__
        pending._resolve(Receipt(
            tx_id=pending.tx_id, valid=False,
            reason=f"{reason}: {error}", t_sent=pending.t_sent,
            t_endorsed=pending.t_endorsed))

    def submit_raw_envelope(self, env: TransactionEnvelope) -> PendingTx:
        """Hand a pre-built envelope straight to ordering (replay surface)."""
        pending = PendingTx(env.tx_id, t_sent=self.scheduler.now())
        self._pending[env.tx_id] = pending
        self.orderer.submit(env.channel, env.to_bytes())
        return pending

    def invoke(self, channel: str, fn: str, args_text: list[str],
               identity: MemberIdentity, timeout: float = 30.0) -> Receipt:
        """Synchronous invoke; drives the scheduler until commit."""
        pending = self.submit_async(channel, fn, args_text, identity)
        finished = self.scheduler.run_until(lambda: pending.done,
                                            timeout)
        if not finished or not pending.done:
            raise PipelineError(f"transaction {pending.tx_id} did not commit "
                                f"within {timeout}s")
        return pending.receipt

    def query(self, channel: str, fn: str, args_text: list[str],
              identity: MemberIdentity) -> bytes:
        """Endorsement-only read against the channel's anchor peer."""
        if channel not in self.channels:
            raise PipelineError(f"unknown channel {channel!r}")
        proposal = Proposal(
            channel=channel, chaincode_fn=fn,
            args=[a.encode("utf-8") for a in args_text],
            creator=identity.qualified_id,
            nonce=self.rng.randbytes(NONCE_LEN),
            timestamp=int(self.scheduler.now() * 1000))
        proposal.signature = identity.sign(proposal.digest())
        anchor = self.peers[self._anchor[channel]]
        return anchor.endorse(proposal).response

    def query_async(self, channel: str, fn: str, args_text: list[str],
                    identity: MemberIdentity, on_done):
        """Read path with the client round trips modelled as events;
        `on_done(response_bytes_or_None, error_or_None, t_sent, t_done)`."""
        t_sent = self.scheduler.now()
        proposal = Proposal(
            channel=channel, chaincode_fn=fn,
            args=[a.encode("utf-8") for a in args_text],
            creator=identity.qualified_id,
            nonce=self.rng.randbytes(NONCE_LEN),
            timestamp=int(t_sent * 1000))
        proposal.signature = identity.sign(proposal.digest())
        anchor = self.peers[self._anchor[channel]]

        def finish(response, error):
            on_done(response, error, t_sent, self.scheduler.now())

        def execute():
            try:
                response = anchor.endorse(proposal).response
                error = None
            except PipelineError as exc:
                response, error = None, exc
            self.scheduler.call_later(self.rng.uniform(*_ENDORSE_DELAY),
                                      finish, response, error)

        self.scheduler.call_later(self.rng.uniform(*_ENDORSE_DELAY), execute)

    # --- inspection -------------------------------------------------------------

    def anchor_ledger(self, channel: str) -> ChannelLedger:
        return self.peers[self._anchor[channel]].ledgers[channel]

    def state_digest(self, channel: str, peer_id: str | None = None) -> bytes:
        peer = self.peers[peer_id or self._anchor[channel]]
        return peer.ledgers[channel].state.digest()

    def telemetry(self) -> dict:
        data = self.cluster.telemetry()
        data["peer_busy_seconds"] = {p.peer_id: p.busy_seconds
                                     for p in self.peers.values()}
        data["ledger_bytes_written"] = {
            p.peer_id: sum(l.file_bytes_written for l in p.ledgers.values())
            for p in self.peers.values()}
        return data
