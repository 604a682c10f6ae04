"""Party identity, ring topology, message exchange, and accounting.

Parties send to the next ring member and receive from the previous one.
A communication round is counted when a party blocks on a receive after
having sent; a batched payload sent in one message is one round.

Two backends: an in-process loopback hub (parties as threads) and a TCP
backend with one connection per ordered peer pair. Both emit identical
frame bytes for the same protocol run, so transcripts are comparable
across backends.
"""

import hashlib
import socket as socketlib
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .field import add_mod
from .kernels import mul_mod
from .wire import SESSION_ID_BYTES, Tag, decode_frame, encode_frame, unpack_matrix, pack_matrix


class TransportError(RuntimeError):
    pass


class ProtocolAbort(TransportError):
    pass


DEFAULT_TIMEOUT = 30.0


@dataclass(frozen=True)
class RingConfig:
    parties: int
    my_index: int
    addresses: tuple = ()  # (host, port) per party; socket backend only

    def __post_init__(self):
        if self.parties < 2:
            raise ValueError("ring needs at least 2 parties")
        if not 0 <= self.my_index < self.parties:
            raise ValueError("party index out of range")

    @property
    def next_index(self) -> int:
        return (self.my_index + 1) % self.parties

    @property
    def prev_index(self) -> int:
        return (self.my_index - 1) % self.parties


@dataclass
class PhaseStats:
    rounds: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0


@dataclass
class Transcript:
    """Per-party record of rounds and traffic, split by protocol phase."""

    parties: int = 0
    rounds_used: int = 0
    bytes_sent: dict = field(default_factory=dict)
    bytes_received: dict = field(default_factory=dict)
    phases: dict = field(default_factory=dict)

    def __post_init__(self):
        self._pending_round = False
        self._digest = hashlib.sha256()
        self._phase = "setup"
        self.phases.setdefault(self._phase, PhaseStats())

    def mark_phase(self, name: str):
        self._phase = name
        self.phases.setdefault(name, PhaseStats())

    def note_send(self, peer: int, frame: bytes):
        self.bytes_sent[peer] = self.bytes_sent.get(peer, 0) + len(frame)
        self.phases[self._phase].bytes_sent += len(frame)
        self._digest.update(frame)
        self._pending_round = True

    def note_receive(self, peer: int, frame: bytes):
        self.bytes_received[peer] = self.bytes_received.get(peer, 0) + len(frame)
        self.phases[self._phase].bytes_received += len(frame)
        if self._pending_round:
            self.rounds_used += 1
            self.phases[self._phase].rounds += 1
            self._pending_round = False

    @property
    def total_bytes_sent(self) -> int:
        return sum(self.bytes_sent.values())

    @property
    def total_bytes_received(self) -> int:
        return sum(self.bytes_received.values())

    def sent_digest(self) -> str:
        return self._digest.hexdigest()

    def summary(self) -> dict:
        return {
            "rounds": self.rounds_used,
            "bytes_sent": self.total_bytes_sent,
            "bytes_received": self.total_bytes_received,
            "sent_digest": self.sent_digest(),
            "phases": {
                name: {"rounds": s.rounds, "bytes_sent": s.bytes_sent}
                for name, s in self.phases.items()
            },
        }


class Session:
    """One party's endpoint for a protocol session."""

    def __init__(self, ring: RingConfig, session_id: bytes, timeout: float = DEFAULT_TIMEOUT):
        if len(session_id) != SESSION_ID_BYTES:
            raise ValueError("session id must be 16 bytes")
        self.ring = ring
        self.session_id = bytes(session_id)
        self.timeout = timeout
        self.transcript = Transcript(parties=ring.parties)

    # backend hooks
    def _backend_send(self, peer: int, frame: bytes):
        raise NotImplementedError

    def _backend_recv(self, peer: int) -> bytes:
        raise NotImplementedError

    def close(self):
        pass

    def send(self, peer: int, tag: Tag, payload: bytes):
        frame = encode_frame(self.session_id, self.transcript.rounds_used, self.ring.my_index, tag, payload)
        self._backend_send(peer, frame)
        self.transcript.note_send(peer, frame)

    def recv(self, peer: int, tag: Tag) -> bytes:
        frame = self._backend_recv(peer)
        session_id, _round_id, sender, got_tag, payload = decode_frame(frame)
        if session_id != self.session_id:
            raise ProtocolAbort("frame from a different session")
        if sender != peer:
            raise ProtocolAbort(f"expected sender {peer}, got {sender}")
        if got_tag != tag:
            raise ProtocolAbort(f"expected tag {tag!r}, got {got_tag!r}")
        self.transcript.note_receive(peer, frame)
        return payload

    def send_to_next(self, tag: Tag, payload: bytes):
        self.send(self.ring.next_index, tag, payload)

    def receive_from_prev(self, tag: Tag) -> bytes:
        return self.recv(self.ring.prev_index, tag)

    def _broadcast_gather(self, arr: np.ndarray, tag: Tag):
        arr = np.asarray(arr, dtype=np.uint64)
        payload = pack_matrix(arr)
        me = self.ring.my_index
        for peer in range(self.ring.parties):
            if peer != me:
                self.send(peer, tag, payload)
        received = []
        for peer in range(self.ring.parties):
            if peer == me:
                continue
            other, _ = unpack_matrix(self.recv(peer, tag))
            if other.size != arr.size:
                raise ProtocolAbort("opened share shape mismatch")
            received.append(other.reshape(arr.shape) if arr.ndim != 2 else other)
        return received

    def broadcast_open(self, arr: np.ndarray, tag: Tag = Tag.BEAVER_OPEN) -> np.ndarray:
        """Additive opening: every party ends with the mod-q sum of all shares."""
        arr = np.asarray(arr, dtype=np.uint64)
        out = arr
        for other in self._broadcast_gather(arr, tag):
            out = add_mod(out, other.reshape(arr.shape))
        return out

    def broadcast_open_product(self, arr: np.ndarray, tag: Tag = Tag.ALPHA_OPEN) -> np.ndarray:
        """Multiplicative opening: mod-q product of all parties' values."""
        arr = np.asarray(arr, dtype=np.uint64)
        out = arr
        for other in self._broadcast_gather(arr, tag):
            out = mul_mod(out, other.reshape(arr.shape))
        return out


class LoopbackHub:
    """In-process transport shared by the P party threads of one session."""

    def __init__(self, parties: int, timeout: float = DEFAULT_TIMEOUT):
        self.parties = parties
        self.timeout = timeout
        self._cond = threading.Condition()
        self._queues = {(s, d): deque() for s in range(parties) for d in range(parties) if s != d}
        self._failed = None

    def abort(self, reason: str):
        with self._cond:
            self._failed = reason
            self._cond.notify_all()

    def put(self, src: int, dst: int, frame: bytes):
        with self._cond:
            self._queues[(src, dst)].append(frame)
            self._cond.notify_all()

    def get(self, src: int, dst: int, timeout: float) -> bytes:
        deadline = time.monotonic() + timeout
        with self._cond:
            queue = self._queues[(src, dst)]
            while not queue:
                if self._failed:
                    raise ProtocolAbort(f"peer failure: {self._failed}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ProtocolAbort(f"timeout waiting for party {src}")
                self._cond.wait(remaining)
            return queue.popleft()

    def sessions(self, session_id: bytes, timeout: float = None) -> list:
        timeout = self.timeout if timeout is None else timeout
        return [
            LoopbackSession(RingConfig(self.parties, p), session_id, self, timeout)
            for p in range(self.parties)
        ]


class LoopbackSession(Session):
    def __init__(self, ring, session_id, hub: LoopbackHub, timeout=DEFAULT_TIMEOUT):
        super().__init__(ring, session_id, timeout)
        self.hub = hub

    def _backend_send(self, peer, frame):
        self.hub.put(self.ring.my_index, peer, frame)

    def _backend_recv(self, peer):
        return self.hub.get(peer, self.ring.my_index, self.timeout)


def _read_exact(sock, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ProtocolAbort("peer disconnected")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class SocketSession(Session):
    """TCP backend: one connection per ordered peer pair.

    Every party listens on its own address, dials each peer once for its
    outgoing stream, and accepts one inbound connection per peer. The
    handshake carries the session id and the dialer's party index.
    """

    def __init__(self, ring: RingConfig, session_id: bytes, timeout: float = DEFAULT_TIMEOUT):
        super().__init__(ring, session_id, timeout)
        if len(ring.addresses) != ring.parties:
            raise ValueError("socket backend needs one address per party")
        self._outgoing = {}
        self._incoming = {}
        self._listener = socketlib.socket(socketlib.AF_INET, socketlib.SOCK_STREAM)
        self._listener.setsockopt(socketlib.SOL_SOCKET, socketlib.SO_REUSEADDR, 1)
        self._listener.bind(tuple(ring.addresses[ring.my_index]))
        self._listener.listen(ring.parties)
        self._connect_all()

    def _connect_all(self):
        ring = self.ring
        deadline = time.monotonic() + self.timeout
        accept_thread = threading.Thread(target=self._accept_all, daemon=True)
        accept_thread.start()
        for peer in range(ring.parties):
            if peer == ring.my_index:
                continue
            sock = None
            while True:
                try:
                    sock = socketlib.create_connection(tuple(ring.addresses[peer]), timeout=1.0)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise ProtocolAbort(f"cannot reach party {peer}")
                    time.sleep(0.05)
            sock.setsockopt(socketlib.IPPROTO_TCP, socketlib.TCP_NODELAY, 1)
            sock.settimeout(self.timeout)
            sock.sendall(self.session_id + ring.my_index.to_bytes(2, "little"))
            self._outgoing[peer] = sock
        accept_thread.join(self.timeout)
        if accept_thread.is_alive() or len(self._incoming) != ring.parties - 1:
            raise ProtocolAbort("handshake incomplete")

    def _accept_all(self):
        self._listener.settimeout(self.timeout)
        try:
            for _ in range(self.ring.parties - 1):
                sock, _addr = self._listener.accept()
                sock.settimeout(self.timeout)
                hello = _read_exact(sock, SESSION_ID_BYTES + 2)
                if hello[:SESSION_ID_BYTES] != self.session_id:
                    sock.close()
                    continue
                peer = int.from_bytes(hello[SESSION_ID_BYTES:], "little")
                self._incoming[peer] = sock
        except OSError:
            pass

    def _backend_send(self, peer, frame):
        try:
            self._outgoing[peer].sendall(frame)
        except OSError as exc:
            raise ProtocolAbort(f"send to party {peer} failed: {exc}") from exc

    def _backend_recv(self, peer):
        sock = self._incoming.get(peer)
        if sock is None:
            raise ProtocolAbort(f"no inbound connection from party {peer}")
        try:
            head = _read_exact(sock, 4)
            length = int.from_bytes(head, "little")
            rest = _read_exact(sock, 24 + length)
        except socketlib.timeout as exc:
            raise ProtocolAbort(f"timeout receiving from party {peer}") from exc
        return head + rest

    def close(self):
        for sock in list(self._outgoing.values()) + list(self._incoming.values()):
            try:
                sock.close()
            except OSError:
                pass
        self._listener.close()
