"""
Slotted wireless layer for the coordination network.

Three TDMA schedules are provided:

* MMST: every agent multicasts once per round; agents within two hops never
  share a slot, so a round needs as many slots as the greedy colouring of the
  two-hop conflict graph.  Frames carry an acknowledgement bitmap and a
  history section that retransmits payloads a neighbour reported lost.
* round robin: one directed link per slot (``2|E|`` slots), no retransmission.
* deterministic: one unicast slot per agent (``N`` slots), no retransmission.

Links drop frames independently with a fixed probability (Bernoulli channel).
Under the baselines a receiver that misses a neighbour's value mixes its own
value in its place.  Under MMST it uses the last value it holds from that
neighbour, and once the missing value shows up in a later history section it
adds back the weighted difference, which makes the network-wide sum exact
again.

Wire layout of :class:`Frame` (little endian)::

    u32  total length in bytes, including this field
    u16  sender id
    u32  index_data
    u16  n_neig
    u16  * n_neig      neighbour ids
    u8   * ceil(n_neig / 8)   bitmap, bit k of byte k // 8 for neighbour k
    u16  payload length p, then f64 * p
    u16  history count h, then h * (u32 index, u16 length q, f64 * q)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import networkx as nx

MULTICAST = "multicast"
UNICAST = "unicast"


class ScheduleConflict(RuntimeError):
    """Two agents within two hops were scheduled in the same slot."""


class FrameDecodeError(ValueError):
    pass


def two_hop_neighbors(graph: nx.Graph, i) -> set:
    lengths = nx.single_source_shortest_path_length(graph, i, cutoff=2)
    return {n for n, d in lengths.items() if 0 < d <= 2}


@dataclass(frozen=True)
class SlotSchedule:
    """Transmission plan of one consensus round.

    ``slots`` lists, per slot, the transmissions made in it.  In multicast
    mode an entry is a sender id; in unicast mode it is a ``(sender,
    receiver)`` pair.  ``n_slots`` may exceed ``len(slots)`` when a slot
    count is imposed by configuration.
    """

    n_slots: int
    slots: tuple
    mode: str

    @property
    def assignment(self) -> dict:
        out: dict = {}
        for s, group in enumerate(self.slots):
            for tx in group:
                sender = tx if self.mode == MULTICAST else tx[0]
                out.setdefault(sender, s)
        return out

    def t_one(self, slot_duration: float) -> float:
        return self.n_slots * slot_duration

    def table(self) -> list[dict]:
        return [{"slot": s, "transmissions": list(group)} for s, group in enumerate(self.slots)]


def _max_degree(graph, candidates):
    # lowest id wins among equal degrees
    return min(candidates, key=lambda n: (-graph.degree[n], n))


def allocate_slots(graph: nx.Graph) -> SlotSchedule:
    """Greedy two-hop-safe slot colouring, highest degree first.

    Each new slot opens with the highest-degree agent still lacking a slot;
    further agents are packed into it while they conflict with nobody already
    placed there.
    """
    unassigned = set(graph.nodes)
    two_hop = {n: two_hop_neighbors(graph, n) for n in graph.nodes}
    slots = []
    while unassigned:
        i = _max_degree(graph, unassigned)
        unassigned.discard(i)
        group = [i]
        blocked = two_hop[i] | {i}
        while True:
            free = unassigned - blocked
            if not free:
                break
            j = _max_degree(graph, free)
            unassigned.discard(j)
            group.append(j)
            blocked |= two_hop[j] | {j}
        slots.append(tuple(sorted(group)))
    return SlotSchedule(len(slots), tuple(slots), MULTICAST)


def validate_schedule(graph: nx.Graph, schedule: SlotSchedule) -> None:
    if schedule.mode != MULTICAST:
        return
    seen = set()
    for s, group in enumerate(schedule.slots):
        for a in group:
            if a in seen:
                raise ScheduleConflict(f"agent {a} transmits in more than one slot")
            seen.add(a)
            clash = two_hop_neighbors(graph, a) & set(group)
            if clash:
                raise ScheduleConflict(f"slot {s}: agent {a} conflicts with {sorted(clash)}")
    missing = set(graph.nodes) - seen
    if missing:
        raise ScheduleConflict(f"agents without a slot: {sorted(missing)}")


def baseline_schedule(graph: nx.Graph, kind: str, n_slots: int | None = None) -> SlotSchedule:
    """Round-robin (one directed link per slot) or deterministic (one agent per slot)."""
    if kind == "round_robin":
        links = sorted((a, b) for u, v in graph.edges for a, b in ((u, v), (v, u)))
        slots = tuple(((a, b),) for a, b in links)
    elif kind == "deterministic":
        slots = tuple(
            tuple((a, b) for b in sorted(graph.neighbors(a))) for a in sorted(graph.nodes)
        )
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    S = len(slots) if n_slots is None else int(n_slots)
    if S < len(slots):
        raise ValueError(f"{kind} needs at least {len(slots)} slots, got {S}")
    return SlotSchedule(S, slots, UNICAST)


@dataclass
class Frame:
    sender: int
    index_data: int
    index_neig: tuple
    bitmap: tuple
    payload: np.ndarray
    history: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.bitmap) != len(self.index_neig):
            raise ValueError("bitmap and neighbour list must have equal length")

    def encode(self) -> bytes:
        n = len(self.index_neig)
        bits = bytearray((n + 7) // 8)
        for k, b in enumerate(self.bitmap):
            if b:
                bits[k // 8] |= 1 << (k % 8)
        body = [struct.pack("<HIH", self.sender, self.index_data, n)]
        body.append(struct.pack(f"<{n}H", *self.index_neig))
        body.append(bytes(bits))
        p = np.asarray(self.payload, "<f8")
        body.append(struct.pack("<H", p.size) + p.tobytes())
        body.append(struct.pack("<H", len(self.history)))
        for idx, pay in self.history:
            q = np.asarray(pay, "<f8")
            body.append(struct.pack("<IH", idx, q.size) + q.tobytes())
        raw = b"".join(body)
        return struct.pack("<I", len(raw) + 4) + raw

    @classmethod
    def decode(cls, buf: bytes) -> "Frame":
        try:
            (total,) = struct.unpack_from("<I", buf, 0)
            if total != len(buf):
                raise FrameDecodeError(f"length prefix {total} != buffer size {len(buf)}")
            off = 4
            sender, index, n = struct.unpack_from("<HIH", buf, off)
            off += 8
            neig = struct.unpack_from(f"<{n}H", buf, off)
            off += 2 * n
            nb = (n + 7) // 8
            bits = buf[off : off + nb]
            off += nb
            bitmap = tuple(bool(bits[k // 8] >> (k % 8) & 1) for k in range(n))
            (p,) = struct.unpack_from("<H", buf, off)
            off += 2
            payload = np.frombuffer(buf, "<f8", p, off).astype(float)
            off += 8 * p
            (h,) = struct.unpack_from("<H", buf, off)
            off += 2
            history = []
            for _ in range(h):
                idx, q = struct.unpack_from("<IH", buf, off)
                off += 6
                history.append((idx, np.frombuffer(buf, "<f8", q, off).astype(float)))
                off += 8 * q
        except struct.error as exc:
            raise FrameDecodeError(str(exc)) from exc
        if off != len(buf):
            raise FrameDecodeError("trailing bytes after frame")
        return cls(sender, index, tuple(neig), bitmap, payload, history)


class Channel:
    """Independent per-receiver Bernoulli loss."""

    def __init__(self, loss_rate: float = 0.0, seed: int = 0, slot_duration: float = 0.005):
        if not 0.0 <= loss_rate < 1.0:
            raise ValueError("loss rate must lie in [0, 1)")
        if slot_duration <= 0:
            raise ValueError("slot duration must be positive")
        self.loss_rate = loss_rate
        self.slot_duration = slot_duration
        self.rng = np.random.default_rng(seed)
        self.sent = 0
        self.lost = 0

    def deliver(self, frame, receivers) -> dict:
        out = {}
        for r in sorted(receivers):
            ok = bool(self.rng.random() >= self.loss_rate)
            out[r] = ok
            self.sent += 1
            self.lost += not ok
        return out


def deliver(frame, channel: Channel, receivers) -> dict:
    return channel.deliver(frame, receivers)


class _Agent:
    """Protocol state one agent keeps about itself and its neighbours."""

    def __init__(self, node, neighbours, depth):
        self.node = node
        self.neig = tuple(sorted(neighbours))
        self.depth = depth
        self.sent_log: dict[int, np.ndarray] = {}
        self.frame_content: dict[int, tuple] = {}
        self.pending = {j: set() for j in self.neig}
        self.got_latest = {j: True for j in self.neig}
        self.received: dict = {j: {} for j in self.neig}
        self.stale_used: dict = {j: {} for j in self.neig}
        self.last_sent: int | None = None

    def build_frame(self, k: int, payload: np.ndarray) -> tuple[Frame, int]:
        self.sent_log[k] = payload
        owed = sorted(set().union(*self.pending.values())) if self.pending else []
        owed = [i for i in owed if i < k]
        dropped = 0
        if len(owed) > self.depth:
            dropped = len(owed) - self.depth
            for idx in owed[:dropped]:
                for s in self.pending.values():
                    s.discard(idx)
            owed = owed[dropped:]
        history = [(i, self.sent_log[i]) for i in owed]
        for j in self.neig:
            self.pending[j].add(k)
        self.frame_content[k] = tuple(owed) + (k,)
        bitmap = tuple(self.got_latest[j] for j in self.neig)
        self.last_sent = k
        return Frame(self.node, k, self.neig, bitmap, payload, history), dropped

    def read_ack(self, frame: Frame):
        # the sender's bit about us refers to our most recent frame
        if self.last_sent is None:
            return
        pos = frame.index_neig.index(self.node)
        if frame.bitmap[pos]:
            for idx in self.frame_content.get(self.last_sent, ()):
                self.pending[frame.sender].discard(idx)


class _BaseNetwork:
    protocol = "base"

    def __init__(self, graph: nx.Graph, A: np.ndarray, channel: Channel, schedule: SlotSchedule):
        self.graph = graph
        self.nodes = sorted(graph.nodes)
        self.pos = {n: k for k, n in enumerate(self.nodes)}
        self.A = np.asarray(A, float)
        self.channel = channel
        self.schedule = schedule
        self.t_one = schedule.t_one(channel.slot_duration)
        self.rounds = 0
        self.stale_uses = 0
        self.cache: dict | None = None

    @property
    def n_slots(self) -> int:
        return self.schedule.n_slots

    def _init_cache(self, x):
        self.cache = {}
        for i in self.nodes:
            for j in self.graph.neighbors(i):
                self.cache[(i, j)] = None

    def _mix(self, x, views):
        out = np.empty_like(x)
        for i in self.nodes:
            p = self.pos[i]
            acc = self.A[p, p] * x[p]
            for j in self.graph.neighbors(i):
                q = self.pos[j]
                acc = acc + self.A[p, q] * views[(i, j)]
            out[p] = acc
        return out

    def stats(self) -> dict:
        return {
            "protocol": self.protocol,
            "slots": self.n_slots,
            "t_one": self.t_one,
            "rounds": self.rounds,
            "frames_sent": self.channel.sent,
            "frames_lost": self.channel.lost,
            "stale_uses": self.stale_uses,
        }


class StaleNetwork(_BaseNetwork):
    """Baseline transport without recovery.

    A receiver that misses a neighbour's frame in a round has nothing to mix
    for that neighbour and keeps the weight on its own value instead.
    """

    def __init__(self, graph, A, channel, schedule, protocol):
        super().__init__(graph, A, channel, schedule)
        self.protocol = protocol

    def consensus_round(self, x: np.ndarray, k: int) -> np.ndarray:
        x = np.asarray(x, float)
        got = set()
        for group in self.schedule.slots:
            for tx in group:
                pairs = [tx] if self.schedule.mode == UNICAST else [
                    (tx, r) for r in self.graph.neighbors(tx)
                ]
                for s, r in pairs:
                    if self.channel.deliver(None, [r])[r]:
                        got.add((r, s))
        views = {}
        for i in self.nodes:
            for j in self.graph.neighbors(i):
                if (i, j) in got:
                    views[(i, j)] = x[self.pos[j]]
                else:
                    views[(i, j)] = x[self.pos[i]]
                    self.stale_uses += 1
        self.rounds += 1
        return self._mix(x, views)


class MMSTNetwork(_BaseNetwork):
    """Multicast TDMA with acknowledgement bitmap and history retransmission."""

    protocol = "mmst"

    def __init__(self, graph, A, channel, schedule=None, history_depth: int = 4):
        schedule = schedule or allocate_slots(graph)
        validate_schedule(graph, schedule)
        super().__init__(graph, A, channel, schedule)
        self.history_depth = history_depth
        self.agents = {n: _Agent(n, graph.neighbors(n), history_depth) for n in self.nodes}
        self.history_overflow = 0
        self.late_corrections = 0
        self.frames: list[Frame] = []
        self.keep_frames = False

    def consensus_round(self, x: np.ndarray, k: int) -> np.ndarray:
        x = np.asarray(x, float)
        squeeze = x.ndim == 1
        X = x[:, None] if squeeze else x
        if self.cache is None:
            self._init_cache(X)
        fresh = {}
        correction = np.zeros_like(X)
        for group in self.schedule.slots:
            for s in group:
                agent = self.agents[s]
                frame, dropped = agent.build_frame(k, X[self.pos[s]].copy())
                self.history_overflow += dropped
                if self.keep_frames:
                    self.frames.append(frame)
                outcome = self.channel.deliver(frame, frame.index_neig)
                for r, ok in outcome.items():
                    rx = self.agents[r]
                    rx.got_latest[s] = ok
                    if not ok:
                        continue
                    rx.read_ack(frame)
                    fresh[(r, s)] = frame.payload
                    self.cache[(r, s)] = frame.payload
                    for idx, pay in frame.history:
                        used = rx.stale_used[s].pop(idx, None)
                        if used is not None:
                            p, q = self.pos[r], self.pos[s]
                            correction[p] += self.A[p, q] * (pay - used)
                            self.late_corrections += 1
        views = {}
        for i in self.nodes:
            for j in self.graph.neighbors(i):
                if (i, j) in fresh:
                    views[(i, j)] = fresh[(i, j)]
                    continue
                v = self.cache[(i, j)]
                if v is None:
                    v = X[self.pos[i]]
                views[(i, j)] = v
                self.agents[i].stale_used[j][k] = v
                self.stale_uses += 1
        self.rounds += 1
        out = self._mix(X, views) + correction
        return out[:, 0] if squeeze else out

    def stats(self) -> dict:
        out = super().stats()
        out["history_overflow"] = self.history_overflow
        out["late_corrections"] = self.late_corrections
        # the newest frame is normally still awaiting its acknowledgement
        out["pending"] = sum(
            sum(1 for idx in p if idx != a.last_sent)
            for a in self.agents.values() for p in a.pending.values()
        )
        return out
