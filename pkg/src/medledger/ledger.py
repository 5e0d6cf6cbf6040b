"""Per-channel block store and world state.

A channel ledger is an append-only chain of blocks plus the key-value view
derived from it. Integrity rests on two rules checked on every append and
by offline validation:

  * linkage: block k's prev_hash equals the digest of block k-1's header
    (genesis uses 32 zero bytes),
  * content: the stored data_hash equals the digest recomputed over the
    block's transaction records, where each record carries its validity
    flag and reason alongside the canonical transaction bytes.

Because the flags and reasons are folded into the records that data_hash
covers, any single-byte mutation of a persisted block file is detectable.

Channels share nothing: each ledger owns its blocks, state and seen
transaction-id set, so a key written on one channel simply does not exist
on another.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .codec import (
    pack_bytes,
    read_u32,
    read_u64,
    sha256,
    u32,
    u64,
    unpack_bytes,
)
from .errors import IntegrityError, SequenceError

GENESIS_PREV_HASH = bytes(32)
HASH_LEN = 32

Version = tuple[int, int]  # (block number, tx index)


@dataclass
class TransactionEnvelope:
    """An endorsed transaction as handed to ordering and stored in blocks."""

    tx_id: str
    channel: str
    chaincode_fn: str
    args: list[bytes]
    read_set: list[tuple[str, Version | None]]
    write_set: list[tuple[str, bytes]]
    endorsements: list[tuple[str, str, bytes]]  # (org_id, endorser id, signature)
    creator: str
    nonce: bytes
    timestamp: int
    creator_sig: bytes = b""
    response: bytes = b""
    events: list[tuple[str, str]] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        parts = [
            pack_bytes(
                self.tx_id.encode(), self.channel.encode(),
                self.chaincode_fn.encode(), self.creator.encode(),
                self.nonce, self.creator_sig, self.response,
            ),
            u64(self.timestamp),
            u32(len(self.args)),
        ]
        for arg in self.args:
            parts.append(pack_bytes(arg))
        parts.append(u32(len(self.read_set)))
        for key, version in self.read_set:
            parts.append(pack_bytes(key.encode(), _version_bytes(version)))
        parts.append(u32(len(self.write_set)))
        for key, value in self.write_set:
            parts.append(pack_bytes(key.encode(), value))
        parts.append(u32(len(self.endorsements)))
        for org, member, sig in self.endorsements:
            parts.append(pack_bytes(org.encode(), member.encode(), sig))
        parts.append(u32(len(self.events)))
        for name, key in self.events:
            parts.append(pack_bytes(name.encode(), key.encode()))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TransactionEnvelope":
        env, end = cls._parse(data, 0)
        if end != len(data):
            raise ValueError("trailing bytes after transaction")
        return env

    @classmethod
    def _parse(cls, data: bytes, offset: int):
        (tx_id, channel, fn, creator, nonce, creator_sig, response), pos = \
            unpack_bytes(data, 7, offset)
        timestamp = read_u64(data, pos)
        pos += 8
        n_args = read_u32(data, pos)
        pos += 4
        args = []
        for _ in range(n_args):
            (arg,), pos = unpack_bytes(data, 1, pos)
            args.append(arg)
        n_reads = read_u32(data, pos)
        pos += 4
        read_set = []
        for _ in range(n_reads):
            (key, ver), pos = unpack_bytes(data, 2, pos)
            read_set.append((key.decode(), _version_from_bytes(ver)))
        n_writes = read_u32(data, pos)
        pos += 4
        write_set = []
        for _ in range(n_writes):
            (key, value), pos = unpack_bytes(data, 2, pos)
            write_set.append((key.decode(), value))
        n_end = read_u32(data, pos)
        pos += 4
        endorsements = []
        for _ in range(n_end):
            (org, member, sig), pos = unpack_bytes(data, 3, pos)
            endorsements.append((org.decode(), member.decode(), sig))
        n_events = read_u32(data, pos)
        pos += 4
        events = []
        for _ in range(n_events):
            (name, key), pos = unpack_bytes(data, 2, pos)
            events.append((name.decode(), key.decode()))
        env = cls(
            tx_id=tx_id.decode(), channel=channel.decode(),
            chaincode_fn=fn.decode(), args=args, read_set=read_set,
            write_set=write_set, endorsements=endorsements,
            creator=creator.decode(), nonce=nonce, timestamp=timestamp,
            creator_sig=creator_sig, response=response, events=events,
        )
        return env, pos


def _version_bytes(version: Version | None) -> bytes:
    if version is None:
        return b""
    return u64(version[0]) + u64(version[1])


def _version_from_bytes(data: bytes) -> Version | None:
    if not data:
        return None
    if len(data) != 16:
        raise ValueError("bad version encoding")
    return (read_u64(data, 0), read_u64(data, 8))


# validity reason codes set at commit
VALID = "VALID"
INVALID_DUPLICATE_TXID = "DUPLICATE_TXID"
INVALID_POLICY = "ENDORSEMENT_POLICY"
INVALID_BAD_SIGNATURE = "BAD_SIGNATURE"
INVALID_MVCC = "MVCC_CONFLICT"
INVALID_BAD_ENVELOPE = "BAD_ENVELOPE"


@dataclass
class Block:
    number: int
    prev_hash: bytes
    data_hash: bytes
    transactions: list[TransactionEnvelope]
    validity_flags: list[bool]
    validity_reasons: list[str]

    def header_bytes(self) -> bytes:
        return u64(self.number) + self.prev_hash + self.data_hash

    def header_hash(self) -> bytes:
        return sha256(self.header_bytes())

    @staticmethod
    def compute_data_hash(transactions, flags, reasons) -> bytes:
        body = bytearray()
        for tx, flag, reason in zip(transactions, flags, reasons):
            record = bytes([1 if flag else 0]) + pack_bytes(reason.encode()) + tx.to_bytes()
            body += pack_bytes(record)
        return sha256(bytes(body))

    @classmethod
    def build(cls, number: int, prev_hash: bytes, transactions, flags, reasons):
        data_hash = cls.compute_data_hash(transactions, flags, reasons)
        return cls(number=number, prev_hash=prev_hash, data_hash=data_hash,
                   transactions=list(transactions), validity_flags=list(flags),
                   validity_reasons=list(reasons))

    def to_bytes(self) -> bytes:
        parts = [self.header_bytes(), u32(len(self.transactions))]
        for tx, flag, reason in zip(self.transactions, self.validity_flags,
                                    self.validity_reasons):
            record = bytes([1 if flag else 0]) + pack_bytes(reason.encode()) + tx.to_bytes()
            parts.append(pack_bytes(record))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        if len(data) < 8 + 2 * HASH_LEN + 4:
            raise ValueError("block too short")
        number = read_u64(data, 0)
        prev_hash = data[8:8 + HASH_LEN]
        data_hash = data[8 + HASH_LEN:8 + 2 * HASH_LEN]
        pos = 8 + 2 * HASH_LEN
        count = read_u32(data, pos)
        pos += 4
        txs, flags, reasons = [], [], []
        for _ in range(count):
            (record,), pos = unpack_bytes(data, 1, pos)
            if not record:
                raise ValueError("empty transaction record")
            flag_byte = record[0]
            if flag_byte not in (0, 1):
                raise ValueError("bad validity flag byte")
            (reason,), rpos = unpack_bytes(record, 1, 1)
            tx, tend = TransactionEnvelope._parse(record, rpos)
            if tend != len(record):
                raise ValueError("trailing bytes in transaction record")
            txs.append(tx)
            flags.append(flag_byte == 1)
            reasons.append(reason.decode())
        if pos != len(data):
            raise ValueError("trailing bytes after block")
        return cls(number=number, prev_hash=prev_hash, data_hash=data_hash,
                   transactions=txs, validity_flags=flags, validity_reasons=reasons)


class WorldState:
    """Current key-value view: key -> (value bytes, version of last write)."""

    def __init__(self):
        self._entries: dict[str, tuple[bytes, Version]] = {}

    def get(self, key: str):
        return self._entries.get(key)

    def put(self, key: str, value: bytes, version: Version):
        self._entries[key] = (value, version)

    def __len__(self):
        return len(self._entries)

    def keys(self):
        return self._entries.keys()

    def items_sorted(self):
        return sorted(self._entries.items())

    def scan_prefix(self, prefix: str):
        for key in sorted(self._entries):
            if key.startswith(prefix):
                yield key, self._entries[key]

    def digest(self) -> bytes:
        body = bytearray()
        for key, (value, version) in self.items_sorted():
            body += pack_bytes(key.encode(), value)
            body += u64(version[0]) + u64(version[1])
        return sha256(bytes(body))


@dataclass
class ValidationReport:
    ok: bool
    first_bad_block: int | None = None
    detail: str = ""


class ChannelLedger:
    """Append-only chain plus derived state for one channel."""

    def __init__(self, name: str, members=(), block_file=None):
        self.name = name
        self.members = set(members)
        self.blocks: list[Block] = []
        self.state = WorldState()
        self.seen_txids: set[str] = set()
        self._block_file = block_file
        self.file_bytes_written = 0
        self.file_bytes_read = 0

    @property
    def height(self) -> int:
        return len(self.blocks)

    def tip_hash(self) -> bytes:
        if not self.blocks:
            return GENESIS_PREV_HASH
        return self.blocks[-1].header_hash()

    def append_block(self, block: Block):
        if block.number != self.height:
            raise SequenceError(
                f"expected block {self.height}, got {block.number}")
        if block.prev_hash != self.tip_hash():
            raise IntegrityError(f"prev_hash mismatch at block {block.number}")
        recomputed = Block.compute_data_hash(
            block.transactions, block.validity_flags, block.validity_reasons)
        if recomputed != block.data_hash:
            raise IntegrityError(f"data_hash mismatch at block {block.number}")
        for idx, (tx, flag) in enumerate(zip(block.transactions,
                                             block.validity_flags)):
            if flag:
                if tx.tx_id in self.seen_txids:
                    raise IntegrityError(
                        f"valid-flagged duplicate tx_id {tx.tx_id} in block "
                        f"{block.number}")
                for key, value in tx.write_set:
                    self.state.put(key, value, (block.number, idx))
            self.seen_txids.add(tx.tx_id)
        self.blocks.append(block)
        if self._block_file is not None:
            self._persist(block)

    def get_state(self, key: str):
        """Committed (value, version) for `key`, or None if absent."""
        return self.state.get(key)

    def attach_sink(self, block_file):
        """Persist blocks appended from now on (existing ones are not
        rewritten); used when restoring a ledger from its own file."""
        self._block_file = block_file

    def _persist(self, block: Block):
        record = block.to_bytes()
        data = u32(len(record)) + record
        self._block_file.write(data)
        self._block_file.flush()
        self.file_bytes_written += len(data)


def validate_chain(blocks: list[Block]) -> ValidationReport:
    """Check linkage and content digests; report the first failing block."""
    prev = GENESIS_PREV_HASH
    for index, block in enumerate(blocks):
        if block.number != index:
            return ValidationReport(False, index, "block number out of sequence")
        if block.prev_hash != prev:
            return ValidationReport(False, index, "hash linkage broken")
        recomputed = Block.compute_data_hash(
            block.transactions, block.validity_flags, block.validity_reasons)
        if recomputed != block.data_hash:
            return ValidationReport(False, index, "data hash mismatch")
        prev = block.header_hash()
    return ValidationReport(True)


def rebuild_state(blocks: list[Block]) -> WorldState:
    """Replay valid-flagged transactions from genesis into a fresh state."""
    state = WorldState()
    for block in blocks:
        for idx, (tx, flag) in enumerate(zip(block.transactions,
                                             block.validity_flags)):
            if flag:
                for key, value in tx.write_set:
                    state.put(key, value, (block.number, idx))
    return state


def write_chain_file(path, blocks: list[Block]):
    with open(path, "wb") as fh:
        for block in blocks:
            record = block.to_bytes()
            fh.write(u32(len(record)))
            fh.write(record)


def load_chain_file(path) -> list[Block]:
    """Strict loader: raises ValueError on any malformed record."""
    blocks = []
    data = _read_all(path)
    pos = 0
    while pos < len(data):
        (record,), pos = unpack_bytes(data, 1, pos)
        blocks.append(Block.from_bytes(record))
    return blocks


def validate_chain_file(path) -> ValidationReport:
    """Offline validation tolerant of corrupt records: a record that fails
    to parse is reported as the first bad block at its position."""
    data = _read_all(path)
    blocks = []
    pos = 0
    index = 0
    while pos < len(data):
        try:
            (record,), pos = unpack_bytes(data, 1, pos)
            block = Block.from_bytes(record)
        except ValueError as exc:
            return ValidationReport(False, index, f"unreadable block: {exc}")
        blocks.append(block)
        partial = validate_chain(blocks)
        if not partial.ok:
            return partial
        index += 1
    return ValidationReport(True)


def _read_all(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def open_block_file(path):
    """Open an append-only block sink, creating parent dirs as needed."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return open(path, "ab")
