"""Federated sessions over a message transport.

:class:`ServerCoordinator` and :class:`FederatedClient` are carrier-agnostic
state machines: they consume decoded messages plus a clock reading (ms) and
return the messages to send. :func:`run_sim_session` drives them on the
simulated network in virtual time; :func:`serve_tcp` / :func:`run_tcp_client`
drive them over sockets.

Protocol rules:

* clients announce themselves with HELLO; round 0 starts once every expected
  client has said hello
* a HELLO from a registered client is also a request for the current global
* the server answers a stale LOCAL_UPDATE with the current global (or the
  final ROUND_COMMIT once the session is over); duplicates are dropped, first
  wins
* a round that misses quorum by its deadline is aborted (ROUND_ABORT) and
  restarted with the same round index and the unchanged global
* ROUND_COMMIT code 0 means "more rounds follow", code 1 "session complete"
* a client that sees ROUND_ABORT re-offers its cached update for that round,
  or asks for the global if it never received one
* clients retry their last message at a fixed interval, at most
  ``max_attempts`` times per message
"""
from __future__ import annotations

import logging
import queue
import socketserver
import threading
import time
from dataclasses import dataclass, field

from . import federation as fed
from . import transport as tp
from .errors import IncompatibleArchitectureError, ProtocolError
from .models import ModelParams
from .transport import MsgType

log = logging.getLogger(__name__)

COMMIT_MORE, COMMIT_FINAL = 0, 1
ERR_INCOMPATIBLE, ERR_REJECTED, ERR_SESSION_FAILED = 1, 2, 3


@dataclass
class ServerConfig:
    expected_clients: tuple
    rounds: int
    quorum: float = 1.0
    round_deadline_ms: float = 2000.0
    max_round_attempts: int = 5


class ServerCoordinator:
    """Single-threaded round coordinator. Connections are opaque hashable keys."""

    def __init__(self, cfg: ServerConfig, initial: ModelParams):
        self.cfg = cfg
        self._global = initial
        self._commit_lock = threading.Lock()
        self.history: list[ModelParams] = [initial]
        self.conn_of: dict = {}
        self.state: fed.RoundState | None = None
        self.round_states: list[fed.RoundState] = []
        self.attempt = 0
        self.deadline: float | None = None
        self.finished = False
        self.failed = False
        self.rejected = 0

    # atomic read of the current global: the reference is swapped in one step
    @property
    def global_model(self) -> ModelParams:
        with self._commit_lock:
            return self._global

    @property
    def round(self) -> int:
        return self.global_model.version

    def _commit(self, new: ModelParams) -> None:
        with self._commit_lock:
            self._global = new
        self.history.append(new)

    def _broadcast(self, m) -> list:
        return [(self.conn_of[c], m) for c in sorted(self.conn_of)]

    def _start_round(self, now: float) -> list:
        self.attempt += 1
        g = self.global_model
        self.state = fed.new_round(g.version, self.cfg.expected_clients, g, self.cfg.quorum)
        self.state.advance("collecting")
        self.deadline = now + self.cfg.round_deadline_ms
        return self._broadcast(tp.global_model(g.version, g))

    def _final_commit(self):
        return tp.control(MsgType.ROUND_COMMIT, self.round - 1, COMMIT_FINAL, f"version={self.round}")

    def handle(self, conn, m: tp.RoundMessage, now: float) -> list:
        if m.msg_type == MsgType.HELLO:
            return self._on_hello(conn, m, now)
        if m.msg_type == MsgType.LOCAL_UPDATE:
            return self._on_update(conn, m, now)
        return []

    def _on_hello(self, conn, m, now):
        g = self.global_model
        if m.digest != g.arch.digest:
            return [(conn, tp.control(MsgType.ERROR, m.round, ERR_INCOMPATIBLE, "architecture digest mismatch"))]
        if m.client_id not in self.cfg.expected_clients:
            return [(conn, tp.control(MsgType.ERROR, m.round, ERR_REJECTED, "unknown client"))]
        self.conn_of[m.client_id] = conn
        if self.finished:
            return [(conn, self._final_commit())]
        if self.failed:
            return [(conn, tp.control(MsgType.ERROR, self.round, ERR_SESSION_FAILED, "session failed"))]
        if self.state is None:
            if set(self.conn_of) >= set(self.cfg.expected_clients):
                return self._start_round(now)
            return []
        if m.client_id not in self.state.received:
            return [(conn, tp.global_model(g.version, g))]
        return []

    def _on_update(self, conn, m, now):
        if self.finished:
            return [(conn, self._final_commit())]
        try:
            u = tp.to_client_update(m)
        except IncompatibleArchitectureError:
            self.rejected += 1
            return [(conn, tp.control(MsgType.ERROR, m.round, ERR_INCOMPATIBLE, "unknown architecture digest"))]
        if m.client_id in self.cfg.expected_clients:
            self.conn_of[m.client_id] = conn
        if self.state is None or self.failed:
            return []
        if u.round < self.state.round:
            self.rejected += 1
            if u.client_id in self.state.received:
                return []
            g = self.global_model
            return [(conn, tp.global_model(g.version, g))]
        ok, reason = self.state.offer(u)
        if not ok:
            self.rejected += 1
            if "duplicate" in reason:
                return []
            return [(conn, tp.control(MsgType.ERROR, u.round, ERR_REJECTED, reason))]
        if self.state.complete:
            return self._close_round(now)
        return []

    def _close_round(self, now) -> list:
        st = self.state
        new = fed.finish_round(st, self.global_model)
        self.round_states.append(st)
        if st.phase == "committed":
            self._commit(new)
            self.attempt = 0
            if new.version >= self.cfg.rounds:
                self.finished = True
                self.deadline = None
                return self._broadcast(self._final_commit())
            out = self._broadcast(tp.control(MsgType.ROUND_COMMIT, st.round, COMMIT_MORE, f"version={new.version}"))
            return out + self._start_round(now)
        out = self._broadcast(tp.control(MsgType.ROUND_ABORT, st.round, 0, "quorum not met"))
        if self.attempt >= self.cfg.max_round_attempts:
            self.failed = True
            self.deadline = None
            return out + self._broadcast(tp.control(MsgType.ERROR, st.round, ERR_SESSION_FAILED, "round attempts exhausted"))
        return out + self._start_round(now)

    def tick(self, now: float) -> list:
        if self.deadline is not None and now >= self.deadline and self.state is not None and self.state.phase == "collecting":
            return self._close_round(now)
        return []

    def next_timer(self):
        return self.deadline


class FederatedClient:
    """Client state machine. ``trainer(global_mp) -> ClientUpdate``."""

    def __init__(self, client_id: str, digest: int, capacity: int, trainer, retry_interval_ms=100.0, max_attempts=5):
        self.client_id = client_id
        self.digest = digest
        self.capacity = capacity
        self.trainer = trainer
        self.retry_interval = retry_interval_ms
        self.max_attempts = max_attempts
        self.cache: dict[int, fed.ClientUpdate] = {}
        self.acked = -1
        self.last: tp.RoundMessage | None = None
        self.attempts = 0
        self.next_retry: float | None = None
        self.done = False
        self.error: str | None = None
        self.trained_rounds = 0

    def _send(self, m, now):
        self.last = m
        self.attempts = 1
        self.next_retry = now + self.retry_interval
        return [m]

    def start(self, now: float) -> list:
        return self._send(tp.hello(self.client_id, self.digest, self.capacity), now)

    def handle(self, m: tp.RoundMessage, now: float) -> list:
        if self.done:
            return []
        t = m.msg_type
        if t == MsgType.GLOBAL_MODEL:
            if m.round <= self.acked:
                return []
            if m.round not in self.cache:
                mp = tp.to_model_params(m)
                self.cache = {m.round: self.trainer(mp)}
                self.trained_rounds += 1
            return self._send(tp.local_update(self.cache[m.round]), now)
        if t == MsgType.ROUND_COMMIT:
            self.acked = max(self.acked, m.round)
            if m.code == COMMIT_FINAL:
                self.done = True
                self.next_retry = None
                return []
            # ask for the next global unless it already arrived
            if self.last is not None and self.last.msg_type == MsgType.LOCAL_UPDATE and self.last.round <= m.round:
                self.last = tp.hello(self.client_id, self.digest, self.capacity, m.round + 1)
                self.attempts = 0
                self.next_retry = now + self.retry_interval
            return []
        if t == MsgType.ROUND_ABORT:
            if m.round <= self.acked:
                return []
            # the round restarts on the same global, so the cached update is still valid
            if m.round in self.cache:
                return self._send(tp.local_update(self.cache[m.round]), now)
            return self._send(tp.hello(self.client_id, self.digest, self.capacity, m.round), now)
        if t == MsgType.ERROR and m.code in (ERR_INCOMPATIBLE, ERR_SESSION_FAILED):
            self.done = True
            self.error = m.text
            self.next_retry = None
        return []

    def tick(self, now: float) -> list:
        if self.done or self.next_retry is None or now < self.next_retry:
            return []
        if self.attempts >= self.max_attempts:
            self.next_retry = None
            return []
        self.attempts += 1
        self.next_retry = now + self.retry_interval
        return [self.last]

    def next_timer(self):
        return self.next_retry


# ---------------------------------------------------------------------------
# simulated carrier
# ---------------------------------------------------------------------------


@dataclass
class SessionResult:
    committed: list  # ModelParams per version, starting with the initial model
    finished: bool
    failed: bool
    virtual_ms: float
    decode_errors: int = 0
    rejected: int = 0
    round_states: list = field(default_factory=list)

    @property
    def final(self) -> ModelParams:
        return self.committed[-1]


def run_sim_session(
    server: ServerCoordinator,
    clients: list[FederatedClient],
    conds: tp.NetConditions = tp.PERFECT,
    max_virtual_ms: float = 600_000.0,
) -> SessionResult:
    """Run server and clients to completion on per-client simulated channels.

    Client ``i`` talks over ``sim_channel(conds, stream=(i,))``. Events at the
    same instant are processed in client order, server first. After the server
    finishes, the loop keeps delivering until every client is done or no event
    is left.
    """
    chans = [tp.sim_channel(conds, (i,)) for i in range(len(clients))]
    now = 0.0
    errors = 0

    def to_server(i, msgs):
        for m in msgs:
            chans[i].b.send(m, now)

    def from_server(out):
        for conn, m in out:
            chans[conn].a.send(m, now)

    for i, c in enumerate(clients):
        to_server(i, c.start(now))

    def settled():
        return (server.finished or server.failed) and all(c.done for c in clients)

    while not settled() and now <= max_virtual_ms:
        progressed = False
        for i in range(len(clients)):
            for frame in chans[i].a.recv(now):
                progressed = True
                try:
                    m = tp.decode(frame)
                except tp.DecodeError:
                    errors += 1
                    continue
                from_server(server.handle(i, m, now))
        for i, c in enumerate(clients):
            for frame in chans[i].b.recv(now):
                progressed = True
                try:
                    m = tp.decode(frame)
                except tp.DecodeError:
                    errors += 1
                    continue
                to_server(i, c.handle(m, now))
        from_server(server.tick(now))
        for i, c in enumerate(clients):
            to_server(i, c.tick(now))
        if progressed:
            continue
        times = [t for ch in chans for t in (ch.a.next_ready(), ch.b.next_ready()) if t is not None]
        times += [t for t in [server.next_timer()] + [c.next_timer() for c in clients] if t is not None]
        later = [t for t in times if t > now]
        if not later:
            break
        now = min(later)
    return SessionResult(
        list(server.history), server.finished, server.failed, now, errors, server.rejected, list(server.round_states)
    )


def make_clients(client_sets: dict, initial: ModelParams, epochs, lr, batch_size, seed, retry_interval_ms=100.0,
                 max_attempts=5, clip_norm=fed.CLIP_NORM):
    """Clients in sorted id order, seeded exactly like :func:`federation.run_federated`."""
    out = []
    for i, cid in enumerate(sorted(client_sets)):
        ds = client_sets[cid]

        def trainer(mp, ds=ds, cid=cid, s=fed.client_seed(seed, i)):
            return fed.local_train(mp, ds, epochs, lr, batch_size, s, cid, clip_norm)

        out.append(FederatedClient(cid, initial.arch.digest, len(ds), trainer, retry_interval_ms, max_attempts))
    return out


# ---------------------------------------------------------------------------
# TCP carrier
# ---------------------------------------------------------------------------


def _now_ms() -> float:
    return time.monotonic() * 1000.0


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv = self.server
        conn = tp.TcpConnection(self.request)
        cid = srv.register(conn)
        try:
            while not srv.stopping.is_set():
                try:
                    msgs = conn.recv(timeout=0.2)
                except (ConnectionError, OSError):
                    break
                except tp.DecodeError as exc:
                    log.warning("connection %d: %s", cid, exc)
                    break
                for m in msgs:
                    srv.inbox.put((cid, m))
        finally:
            srv.unregister(cid)


class FedTCPServer(socketserver.ThreadingTCPServer):
    """Accepts connections; all messages funnel into one coordinator thread."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, coordinator: ServerCoordinator):
        super().__init__(addr, _Handler)
        self.coord = coordinator
        self.inbox: queue.Queue = queue.Queue()
        self.conns: dict[int, tp.TcpConnection] = {}
        self._lock = threading.Lock()
        self._next = 0
        self.stopping = threading.Event()
        self.done = threading.Event()

    def register(self, conn) -> int:
        with self._lock:
            self._next += 1
            self.conns[self._next] = conn
            return self._next

    def unregister(self, cid) -> None:
        with self._lock:
            self.conns.pop(cid, None)

    def _send(self, out):
        for cid, m in out:
            with self._lock:
                conn = self.conns.get(cid)
            if conn is None:
                continue
            try:
                conn.send(m)
            except OSError:
                log.warning("send to connection %d failed", cid)

    def coordinate(self, linger_s: float = 1.0) -> None:
        while not (self.coord.finished or self.coord.failed):
            try:
                cid, m = self.inbox.get(timeout=0.05)
                self._send(self.coord.handle(cid, m, _now_ms()))
            except queue.Empty:
                pass
            self._send(self.coord.tick(_now_ms()))
        # answer late retries so clients can shut down
        end = time.monotonic() + linger_s
        while time.monotonic() < end:
            try:
                cid, m = self.inbox.get(timeout=0.05)
            except queue.Empty:
                continue
            self._send(self.coord.handle(cid, m, _now_ms()))
        self.done.set()


def serve_tcp(coordinator: ServerCoordinator, host: str = "127.0.0.1", port: int = 0, ready=None, linger_s: float = 1.0):
    """Run a federated session server until the session ends. Returns the coordinator."""
    with FedTCPServer((host, port), coordinator) as srv:
        t = threading.Thread(target=srv.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        t.start()
        if ready is not None:
            ready(srv.server_address)
        try:
            srv.coordinate(linger_s)
        finally:
            srv.stopping.set()
            srv.shutdown()
    return coordinator


def run_tcp_client(client: FederatedClient, host: str, port: int, timeout_s: float = 600.0) -> FederatedClient:
    conn = tp.TcpConnection.connect(host, port)
    deadline = time.monotonic() + timeout_s
    try:
        for m in client.start(_now_ms()):
            conn.send(m)
        while not client.done and time.monotonic() < deadline:
            try:
                msgs = conn.recv(timeout=0.05)
            except ConnectionError:
                break
            for m in msgs:
                for out in client.handle(m, _now_ms()):
                    conn.send(out)
            for out in client.tick(_now_ms()):
                conn.send(out)
    finally:
        conn.close()
    if not client.done:
        raise ProtocolError(f"client {client.client_id} did not finish the session")
    return client
