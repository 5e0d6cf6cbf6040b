"""Crash-fault-tolerant ordering: leader-based log replication.

A cluster of n nodes tolerates f crashes provided 2f + 1 <= n. Nodes are
state machines driven entirely by scheduler events and messages from the
in-process transport, so a seeded virtual clock replays any fault schedule
deterministically. Each node persists term, vote and log entries through a
storage object before acting on them, which is what makes restart after a
crash meaningful.

The cluster exposes a single totally-ordered committed stream; a block
cutter groups that stream into batches by size or timeout for the ledger
layer. Leaders send one append message per follower per replication round,
so message cost grows linearly with cluster size.
"""

from __future__ import annotations

import json
import os
import time as _time
from dataclasses import dataclass

from .codec import b64, unb64
from .errors import ConfigError, NoLeaderError

FOLLOWER = "follower"
CANDIDATE = "candidate"
LEADER = "leader"

# internal liveness marker appended by a fresh leader; never delivered
NOOP_PAYLOAD = b""

_MSG_OVERHEAD = 48  # rough per-message wire overhead for telemetry


@dataclass(frozen=True)
class ClusterConfig:
    node_ids: tuple[str, ...]
    f: int
    election_timeout: tuple[float, float] = (0.150, 0.300)
    heartbeat_interval: float = 0.050
    block_batch_size: int = 500
    block_batch_timeout: float = 2.0
    max_entries_per_message: int = 1000
    replicate_delay: float = 0.002

    @property
    def n(self) -> int:
        return len(self.node_ids)

    def validate(self):
        if self.n < 1:
            raise ConfigError("cluster needs at least one node")
        if len(set(self.node_ids)) != self.n:
            raise ConfigError("duplicate node ids")
        if self.f < 0:
            raise ConfigError("f must be non-negative")
        if 2 * self.f + 1 > self.n:
            raise ConfigError(
                f"fault bound violated: 2f+1 <= n requires n >= {2 * self.f + 1}, "
                f"got n = {self.n}")
        lo, hi = self.election_timeout
        if not (0 < lo <= hi):
            raise ConfigError("election timeout range must satisfy 0 < lo <= hi")
        if not (0 < self.heartbeat_interval < lo):
            raise ConfigError("heartbeat interval must be below the minimum "
                              "election timeout")
        if self.block_batch_size < 1 or self.block_batch_timeout <= 0:
            raise ConfigError("block batching parameters must be positive")
        return self


@dataclass(frozen=True)
class RequestVote:
    term: int
    candidate: str
    last_log_index: int
    last_log_term: int

    def wire_size(self) -> int:
        return _MSG_OVERHEAD


@dataclass(frozen=True)
class VoteReply:
    term: int
    voter: str
    granted: bool

    def wire_size(self) -> int:
        return _MSG_OVERHEAD


@dataclass(frozen=True)
class AppendEntries:
    term: int
    leader: str
    prev_index: int
    prev_term: int
    entries: tuple  # of (term, payload bytes)
    leader_commit: int

    def wire_size(self) -> int:
        return _MSG_OVERHEAD + sum(16 + len(p) for _, p in self.entries)


@dataclass(frozen=True)
class AppendReply:
    term: int
    follower: str
    success: bool
    match_or_hint: int  # match index on success, retry hint on failure

    def wire_size(self) -> int:
        return _MSG_OVERHEAD


class MemoryStorage:
    """Stable storage stub: survives node crash/restart within a process."""

    def __init__(self):
        self.term = 0
        self.voted_for = None
        self.entries: list[tuple[int, bytes]] = []

    def set_term_vote(self, term: int, voted_for):
        self.term = term
        self.voted_for = voted_for

    def truncate_from(self, index: int):
        del self.entries[index:]

    def append(self, entries):
        self.entries.extend(entries)

    def load(self):
        return self.term, self.voted_for, list(self.entries)


class FileStorage:
    """Append-only JSONL persistence for term, vote and log entries."""

    def __init__(self, path):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._fh = open(path, "a", encoding="utf-8")

    def _write(self, record):
        self._fh.write(json.dumps(record, separators=(",", ":")) + "\n")
        self._fh.flush()

    def set_term_vote(self, term, voted_for):
        self._write({"op": "meta", "term": term, "vote": voted_for})

    def truncate_from(self, index):
        self._write({"op": "trunc", "at": index})

    def append(self, entries):
        for term, payload in entries:
            self._write({"op": "ent", "term": term, "payload": b64(payload)})

    def load(self):
        term, voted_for, entries = 0, None, []
        if os.path.exists(self.path):
            with open(self.path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    record = json.loads(line)
                    op = record["op"]
                    if op == "meta":
                        term, voted_for = record["term"], record["vote"]
                    elif op == "trunc":
                        del entries[record["at"]:]
                    elif op == "ent":
                        entries.append((record["term"], unb64(record["payload"])))
        return term, voted_for, entries

    def close(self):
        self._fh.close()


class Transport:
    """In-process message bus with injectable delay, loss and partitions."""

    def __init__(self, scheduler, delay_range=(0.0002, 0.0015), loss_rate=0.0):
        self.scheduler = scheduler
        self.delay_range = delay_range
        self.loss_rate = loss_rate
        self._nodes: dict[str, "RaftNode"] = {}
        self._blocked: set[frozenset] = set()
        self.messages_sent: dict[str, int] = {}
        self.bytes_sent: dict[str, int] = {}
        self.bytes_received: dict[str, int] = {}
        self.node_busy_seconds: dict[str, float] = {}

    def register(self, node: "RaftNode"):
        self._nodes[node.node_id] = node
        self.messages_sent.setdefault(node.node_id, 0)
        self.bytes_sent.setdefault(node.node_id, 0)
        self.bytes_received.setdefault(node.node_id, 0)

    def block_pair(self, a: str, b: str):
        self._blocked.add(frozenset((a, b)))

    def heal(self):
        self._blocked.clear()

    def send(self, src: str, dst: str, msg):
        size = msg.wire_size()
        self.messages_sent[src] = self.messages_sent.get(src, 0) + 1
        self.bytes_sent[src] = self.bytes_sent.get(src, 0) + size
        if frozenset((src, dst)) in self._blocked:
            return
        if self.loss_rate and self.scheduler.rng.random() < self.loss_rate:
            return
        lo, hi = self.delay_range
        delay = self.scheduler.rng.uniform(lo, hi) if hi > 0 else 0.0
        self.scheduler.call_later(delay, self._deliver, src, dst, msg, size)

    def _deliver(self, src, dst, msg, size):
        node = self._nodes.get(dst)
        if node is None or node.crashed:
            return
        self.bytes_received[dst] = self.bytes_received.get(dst, 0) + size
        started = _time.perf_counter()
        node.on_message(src, msg)
        self.node_busy_seconds[dst] = self.node_busy_seconds.get(dst, 0.0) + \
            (_time.perf_counter() - started)


class RaftNode:
    def __init__(self, node_id: str, config: ClusterConfig, transport: Transport,
                 scheduler, storage, apply_cb):
        self.node_id = node_id
        self.config = config
        self.transport = transport
        self.scheduler = scheduler
        self.storage = storage
        self.apply_cb = apply_cb

        self.current_term, self.voted_for, self.log = storage.load()
        self.state = FOLLOWER
        self.commit_index = -1
        self.last_applied = -1
        self.leader_hint = None
        self.crashed = False

        self.next_index: dict[str, int] = {}
        self.match_index: dict[str, int] = {}
        self._votes: set[str] = set()
        self._election_timer = None
        self._heartbeat_timer = None
        self._replicate_pending = False

        self.elections_started = 0
        transport.register(self)

    # --- helpers ---------------------------------------------------------

    @property
    def peers(self):
        return [n for n in self.config.node_ids if n != self.node_id]

    def _majority(self) -> int:
        return self.config.n // 2 + 1

    def _last_log_term(self) -> int:
        return self.log[-1][0] if self.log else 0

    def _persist_meta(self):
        self.storage.set_term_vote(self.current_term, self.voted_for)

    # --- timers ----------------------------------------------------------

    def start(self):
        self._reset_election_timer()

    def stop(self):
        for timer in (self._election_timer, self._heartbeat_timer):
            if timer is not None:
                timer.cancel()
        self._election_timer = self._heartbeat_timer = None

    def _reset_election_timer(self):
        if self._election_timer is not None:
            self._election_timer.cancel()
        lo, hi = self.config.election_timeout
        delay = self.scheduler.rng.uniform(lo, hi)
        self._election_timer = self.scheduler.call_later(
            delay, self._on_election_timeout)

    def _on_election_timeout(self):
        if self.crashed or self.state == LEADER:
            return
        self._become_candidate()

    # --- state transitions -------------------------------------------------

    def _become_candidate(self):
        self.current_term += 1
        self.voted_for = self.node_id
        self._persist_meta()
        self.state = CANDIDATE
        self.leader_hint = None
        self._votes = {self.node_id}
        self.elections_started += 1
        self._reset_election_timer()
        msg = RequestVote(term=self.current_term, candidate=self.node_id,
                          last_log_index=len(self.log) - 1,
                          last_log_term=self._last_log_term())
        for peer in self.peers:
            self.transport.send(self.node_id, peer, msg)
        if self._majority() == 1:
            self._become_leader()

    def _become_leader(self):
        self.state = LEADER
        self.leader_hint = self.node_id
        if self._election_timer is not None:
            self._election_timer.cancel()
        self.next_index = {p: len(self.log) for p in self.peers}
        self.match_index = {p: -1 for p in self.peers}
        if hasattr(self, "on_leader_elected"):
            self.on_leader_elected(self.current_term, self.node_id)
        # a no-op entry lets the new leader commit leftovers from old terms
        self._append_local(NOOP_PAYLOAD)
        self._broadcast_append()
        self._schedule_heartbeat()

    def _step_down(self, term: int):
        if term > self.current_term:
            self.current_term = term
            self.voted_for = None
            self._persist_meta()
        self.state = FOLLOWER
        if self._heartbeat_timer is not None:
            self._heartbeat_timer.cancel()
            self._heartbeat_timer = None
        self._reset_election_timer()

    # --- leader paths ------------------------------------------------------

    def _schedule_heartbeat(self):
        if self._heartbeat_timer is not None:
            self._heartbeat_timer.cancel()
        self._heartbeat_timer = self.scheduler.call_later(
            self.config.heartbeat_interval, self._on_heartbeat)

    def _on_heartbeat(self):
        if self.crashed or self.state != LEADER:
            return
        self._broadcast_append()
        self._schedule_heartbeat()

    def _broadcast_append(self):
        for peer in self.peers:
            self._send_append(peer)

    def _send_append(self, peer: str):
        nxt = self.next_index[peer]
        prev_index = nxt - 1
        prev_term = self.log[prev_index][0] if prev_index >= 0 else 0
        entries = tuple(self.log[nxt:nxt + self.config.max_entries_per_message])
        msg = AppendEntries(term=self.current_term, leader=self.node_id,
                            prev_index=prev_index, prev_term=prev_term,
                            entries=entries, leader_commit=self.commit_index)
        self.transport.send(self.node_id, peer, msg)

    def _append_local(self, payload: bytes) -> int:
        entry = (self.current_term, payload)
        self.log.append(entry)
        self.storage.append([entry])
        return len(self.log) - 1

    def client_append(self, payload: bytes) -> int:
        """Leader-only: append a client entry, returning its log position."""
        if self.crashed or self.state != LEADER:
            raise NoLeaderError(f"{self.node_id} is not the leader")
        index = self._append_local(payload)
        if not self._replicate_pending:
            self._replicate_pending = True
            self.scheduler.call_later(self.config.replicate_delay,
                                      self._flush_replication)
        return index

    def _flush_replication(self):
        self._replicate_pending = False
        if self.crashed or self.state != LEADER:
            return
        self._broadcast_append()

    def _advance_commit(self):
        matches = sorted([len(self.log) - 1] +
                         [self.match_index[p] for p in self.peers],
                         reverse=True)
        candidate = matches[self._majority() - 1]
        if candidate > self.commit_index and candidate >= 0 \
                and self.log[candidate][0] == self.current_term:
            self.commit_index = candidate
            self._apply_committed()

    # --- message handling ----------------------------------------------------

    def on_message(self, src: str, msg):
        if self.crashed:
            return
        if isinstance(msg, RequestVote):
            self._on_request_vote(src, msg)
        elif isinstance(msg, VoteReply):
            self._on_vote_reply(src, msg)
        elif isinstance(msg, AppendEntries):
            self._on_append_entries(src, msg)
        elif isinstance(msg, AppendReply):
            self._on_append_reply(src, msg)

    def _on_request_vote(self, src: str, msg: RequestVote):
        if msg.term > self.current_term:
            self._step_down(msg.term)
        granted = False
        if msg.term == self.current_term and self.state != LEADER:
            up_to_date = (msg.last_log_term, msg.last_log_index) >= \
                (self._last_log_term(), len(self.log) - 1)
            if self.voted_for in (None, msg.candidate) and up_to_date:
                self.voted_for = msg.candidate
                self._persist_meta()
                granted = True
                self._reset_election_timer()
        self.transport.send(self.node_id, src,
                            VoteReply(term=self.current_term,
                                      voter=self.node_id, granted=granted))

    def _on_vote_reply(self, src: str, msg: VoteReply):
        if msg.term > self.current_term:
            self._step_down(msg.term)
            return
        if self.state != CANDIDATE or msg.term != self.current_term or not msg.granted:
            return
        self._votes.add(msg.voter)
        if len(self._votes) >= self._majority():
            self._become_leader()

    def _on_append_entries(self, src: str, msg: AppendEntries):
        if msg.term > self.current_term or \
                (msg.term == self.current_term and self.state == CANDIDATE):
            self._step_down(msg.term)
        if msg.term < self.current_term:
            self.transport.send(self.node_id, src, AppendReply(
                term=self.current_term, follower=self.node_id,
                success=False, match_or_hint=len(self.log)))
            return
        self.state = FOLLOWER
        self.leader_hint = msg.leader
        self._reset_election_timer()
        if msg.prev_index >= 0 and (
                msg.prev_index >= len(self.log)
                or self.log[msg.prev_index][0] != msg.prev_term):
            if msg.prev_index >= len(self.log):
                hint = len(self.log)
            else:
                # back off over the whole conflicting term in one step
                term = self.log[msg.prev_index][0]
                hint = msg.prev_index
                while hint > 0 and self.log[hint - 1][0] == term:
                    hint -= 1
            self.transport.send(self.node_id, src, AppendReply(
                term=self.current_term, follower=self.node_id,
                success=False, match_or_hint=hint))
            return
        # append new entries, truncating on the first conflict
        insert_at = msg.prev_index + 1
        for offset, entry in enumerate(msg.entries):
            idx = insert_at + offset
            if idx < len(self.log):
                if self.log[idx][0] != entry[0]:
                    del self.log[idx:]
                    self.storage.truncate_from(idx)
                else:
                    continue
            self.log.append(entry)
            self.storage.append([entry])
        match = msg.prev_index + len(msg.entries)
        if msg.leader_commit > self.commit_index:
            self.commit_index = min(msg.leader_commit, match)
            self._apply_committed()
        self.transport.send(self.node_id, src, AppendReply(
            term=self.current_term, follower=self.node_id,
            success=True, match_or_hint=match))

    def _on_append_reply(self, src: str, msg: AppendReply):
        if msg.term > self.current_term:
            self._step_down(msg.term)
            return
        if self.state != LEADER or msg.term != self.current_term:
            return
        if msg.success:
            if msg.match_or_hint > self.match_index.get(src, -1):
                self.match_index[src] = msg.match_or_hint
                self.next_index[src] = msg.match_or_hint + 1
                self._advance_commit()
            if self.next_index[src] < len(self.log):
                self._send_append(src)
        else:
            self.next_index[src] = max(0, min(msg.match_or_hint,
                                              self.next_index[src] - 1))
            self._send_append(src)

    def _apply_committed(self):
        while self.last_applied < self.commit_index:
            self.last_applied += 1
            term, payload = self.log[self.last_applied]
            self.apply_cb(self.node_id, self.last_applied, term, payload)

    # --- fault injection -----------------------------------------------------

    def crash(self):
        self.crashed = True
        self.stop()

    def restart(self):
        if not self.crashed:
            raise ValueError(f"{self.node_id} is not crashed")
        self.current_term, self.voted_for, self.log = self.storage.load()
        self.state = FOLLOWER
        self.commit_index = -1
        self.last_applied = -1
        self._votes = set()
        self._replicate_pending = False
        self.crashed = False
        self._reset_election_timer()


class BlockCutter:
    """Groups an ordered payload stream into batches by size or timeout."""

    def __init__(self, scheduler, batch_size: int, batch_timeout: float,
                 deliver_cb):
        self.scheduler = scheduler
        self.batch_size = batch_size
        self.batch_timeout = batch_timeout
        self.deliver_cb = deliver_cb
        self._pending: list[bytes] = []
        self._timer = None

    def feed(self, payload: bytes):
        self._pending.append(payload)
        if len(self._pending) >= self.batch_size:
            self._cut()
        elif self._timer is None:
            self._timer = self.scheduler.call_later(self.batch_timeout,
                                                    self._on_timeout)

    def _on_timeout(self):
        self._timer = None
        if self._pending:
            self._cut()

    def _cut(self):
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        batch, self._pending = self._pending[:self.batch_size], \
            self._pending[self.batch_size:]
        self.deliver_cb(batch)
        if self._pending:
            self._timer = self.scheduler.call_later(self.batch_timeout,
                                                    self._on_timeout)
            if len(self._pending) >= self.batch_size:
                self._cut()


class RaftCluster:
    """Cluster handle: node lifecycle, submission routing and the committed
    entry stream consumed by the ordering layer."""

    def __init__(self, config: ClusterConfig, scheduler,
                 storage_factory=None, transport: Transport | None = None):
        config.validate()
        self.config = config
        self.scheduler = scheduler
        self.transport = transport or Transport(scheduler)
        storage_factory = storage_factory or (lambda node_id: MemoryStorage())
        self.committed: list[tuple[int, bytes]] = []
        self.leadership_history: list[tuple[int, str]] = []
        self._subscribers = []
        self.nodes: dict[str, RaftNode] = {}
        for node_id in config.node_ids:
            node = RaftNode(node_id, config, self.transport, scheduler,
                            storage_factory(node_id), self._on_apply)
            node.on_leader_elected = self._on_leader_elected
            self.nodes[node_id] = node

    def start(self):
        for node in self.nodes.values():
            node.start()

    def stop(self):
        for node in self.nodes.values():
            node.stop()

    def _on_leader_elected(self, term: int, node_id: str):
        self.leadership_history.append((term, node_id))

    def _on_apply(self, node_id: str, index: int, term: int, payload: bytes):
        if index < len(self.committed):
            if self.committed[index] != (term, payload):
                raise AssertionError(
                    f"safety violation: divergent committed entry at {index}")
            return
        if index != len(self.committed):
            raise AssertionError(
                f"gap in committed stream: got {index}, expected "
                f"{len(self.committed)}")
        self.committed.append((term, payload))
        if payload != NOOP_PAYLOAD:
            for cb in self._subscribers:
                cb(index, term, payload)

    def subscribe(self, cb):
        """cb(log_index, term, payload) for every committed client entry."""
        self._subscribers.append(cb)

    def leader(self) -> RaftNode | None:
        leaders = [n for n in self.nodes.values()
                   if n.state == LEADER and not n.crashed]
        if not leaders:
            return None
        return max(leaders, key=lambda n: n.current_term)

    def submit_entry(self, payload: bytes) -> int:
        """Append through the current leader; raises NoLeaderError as the
        retry hint when an election is in progress."""
        leader = self.leader()
        if leader is None:
            raise NoLeaderError("no leader elected; retry with backoff")
        return leader.client_append(payload)

    def crash_node(self, node_id: str):
        self.nodes[node_id].crash()

    def restart_node(self, node_id: str):
        self.nodes[node_id].restart()

    def live_nodes(self) -> list[str]:
        return [n.node_id for n in self.nodes.values() if not n.crashed]

    def committed_payloads(self) -> list[bytes]:
        return [p for _, p in self.committed if p != NOOP_PAYLOAD]

    def telemetry(self) -> dict:
        return {
            "messages_sent": dict(self.transport.messages_sent),
            "bytes_sent": dict(self.transport.bytes_sent),
            "bytes_received": dict(self.transport.bytes_received),
            "node_busy_seconds": dict(self.transport.node_busy_seconds),
            "elections_started": {n.node_id: n.elections_started
                                  for n in self.nodes.values()},
            "leadership_history": list(self.leadership_history),
        }
