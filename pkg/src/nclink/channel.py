"""Discrete-event erasure link with a virtual clock, plus ARQ and
CC-HARQ baseline reliability models.

The simulator core is single-threaded: callbacks fire in (time, insertion)
order, so a fixed RNG seed reproduces the exact event trace.
"""

from dataclasses import dataclass, field
import heapq
import random

# Effective PHY-layer calibration constants (bits/s).
UPLINK_RATE = 1.344e6
DOWNLINK_RATES = {"1/2": 15.12e6, "2/3": 20.16e6, "3/4": 22.68e6, "5/6": 25.2e6}
DEFAULT_RATE = DOWNLINK_RATES["5/6"]


class Simulator:
    """Minimal virtual-time event loop."""

    def __init__(self):
        self.now = 0.0
        self._q = []
        self._seq = 0

    def at(self, time, fn):
        if time < self.now:
            raise ValueError("cannot schedule in the past")
        heapq.heappush(self._q, (time, self._seq, fn))
        self._seq += 1

    def after(self, delay, fn):
        self.at(self.now + delay, fn)

    def run(self, until=None):
        while self._q:
            if until is not None and self._q[0][0] > until:
                break
            time, _, fn = heapq.heappop(self._q)
            self.now = time
            fn()
        if until is not None and until > self.now:
            self.now = until

    @property
    def pending(self) -> int:
        return len(self._q)


class BernoulliLoss:
    """Independent per-packet erasure."""

    def __init__(self, p: float):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"loss probability {p} out of range")
        self.p = p

    def erased(self, rng: random.Random) -> bool:
        return self.p > 0 and rng.random() < self.p


class GilbertElliott:
    """Two-state Markov erasure process, advanced once per packet."""

    def __init__(self, p_good: float, p_bad: float, p_gb: float, p_bg: float):
        for name, v in (("p_good", p_good), ("p_bad", p_bad),
                        ("p_gb", p_gb), ("p_bg", p_bg)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} out of range")
        self.p_good = p_good
        self.p_bad = p_bad
        self.p_gb = p_gb
        self.p_bg = p_bg
        self.bad = False

    def erased(self, rng: random.Random) -> bool:
        if self.bad:
            if rng.random() < self.p_bg:
                self.bad = False
        else:
            if rng.random() < self.p_gb:
                self.bad = True
        return rng.random() < (self.p_bad if self.bad else self.p_good)


class ErasureLink:
    """FIFO link: serialization at a fixed rate, then a one-way delay.

    Erased packets still occupy the link. send() schedules the delivery
    callback and returns (tx_end, arrival or None).
    """

    def __init__(self, sim: Simulator, rate: float, delay: float, loss,
                 rng: random.Random):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.sim = sim
        self.rate = rate
        self.delay = delay
        self.loss = loss
        self.rng = rng
        self.busy_until = 0.0
        self.sent = 0
        self.erased = 0

    def send(self, nbytes: int, deliver=None):
        start = max(self.sim.now, self.busy_until)
        tx_end = start + nbytes * 8 / self.rate
        self.busy_until = tx_end
        self.sent += 1
        if self.loss.erased(self.rng):
            self.erased += 1
            return tx_end, None
        arrival = tx_end + self.delay
        if deliver is not None:
            self.sim.at(arrival, deliver)
        return tx_end, arrival


def link_send(pkt: bytes, link: ErasureLink, deliver=None):
    """Single-packet send; returns (pkt, arrival_time) or None if erased."""
    _, arrival = link.send(len(pkt), (lambda: deliver(pkt)) if deliver else None)
    return None if arrival is None else (pkt, arrival)


@dataclass
class ArqConfig:
    retry_timeout: float = 0.100
    block_size: int = 256
    window_size: int = 1024
    block_lifetime: float = 0.500
    in_order: bool = True
    rx_purge_timeout: float = 0.500
    sync_loss_timeout: float = 1.000

    def validate(self):
        if min(self.retry_timeout, self.block_lifetime, self.rx_purge_timeout,
               self.sync_loss_timeout) <= 0 or self.block_size < 1:
            raise ValueError("ARQ timing and block size must be positive")
        if self.window_size < 1:
            raise ValueError("window must hold at least one block")


@dataclass
class ArqStats:
    offered: int = 0
    delivered: int = 0
    discarded: int = 0
    attempts: int = 0
    duplicates: int = 0
    purges: int = 0
    window_resets: int = 0


class ArqTransfer:
    """Selective-repeat ARQ over an erasure link pair.

    Blocks are retried every retry_timeout until acked; a block is dropped
    when its lifetime (from first transmission) expires. In-order mode
    holds back successors at the receiver until a gap is purged.
    """

    def __init__(self, sim: Simulator, cfg: ArqConfig, link: ErasureLink,
                 ack_link: ErasureLink, on_deliver=None):
        cfg.validate()
        self.sim = sim
        self.cfg = cfg
        self.link = link
        self.ack_link = ack_link
        self.on_deliver = on_deliver
        self.stats = ArqStats()
        self._pending = []           # block ids waiting to enter the window
        self._sizes = {}
        self._first_tx = {}
        self._acked = set()
        self._dead = set()
        self._tx_start = 0           # lowest block id not yet acked/discarded
        self._next_new = 0           # ids below this have been submitted
        self._rx_next = 0            # next in-order id to deliver
        self._rx_buf = {}
        self._rx_seen = set()
        self._last_advance = 0.0
        self.delivery_times = {}

    # -- sender side -------------------------------------------------------

    def submit(self, block_id: int, nbytes: int):
        self.stats.offered += 1
        self._sizes[block_id] = nbytes
        self._next_new = max(self._next_new, block_id + 1)
        self._pending.append(block_id)
        self._fill_window()

    def _in_window(self, block_id) -> bool:
        return block_id < self._tx_start + self.cfg.window_size

    def _fill_window(self):
        while self._pending and self._in_window(self._pending[0]):
            self._transmit(self._pending.pop(0))

    def _transmit(self, block_id):
        now = self.sim.now
        first = self._first_tx.setdefault(block_id, now)
        if now - first >= self.cfg.block_lifetime:
            self._discard(block_id)
            return
        self.stats.attempts += 1
        tx_end, _ = self.link.send(
            self._sizes[block_id],
            deliver=lambda b=block_id: self._rx_block(b))
        # retry interval counts from this (re)transmission
        self.sim.at(tx_end + self.cfg.retry_timeout,
                    lambda b=block_id: self._retry(b))

    def _retry(self, block_id):
        if block_id in self._acked or block_id in self._dead:
            return
        if self.sim.now - self._first_tx[block_id] >= self.cfg.block_lifetime:
            self._discard(block_id)
            return
        self._transmit(block_id)

    def _discard(self, block_id):
        if block_id in self._dead or block_id in self._acked:
            return
        self._dead.add(block_id)
        self.stats.discarded += 1
        self._advance_tx()

    def _on_ack(self, block_id):
        if block_id in self._acked:
            return
        self._acked.add(block_id)
        self._advance_tx()

    def _advance_tx(self):
        moved = False
        while self._tx_start < self._next_new and (
                self._tx_start in self._acked or self._tx_start in self._dead):
            self._tx_start += 1
            moved = True
        if moved:
            self._last_advance = self.sim.now
            self._fill_window()
        elif self.sim.now - self._last_advance >= self.cfg.sync_loss_timeout:
            self.stats.window_resets += 1
            self._last_advance = self.sim.now

    # -- receiver side -----------------------------------------------------

    def _rx_block(self, block_id):
        self.ack_link.send(4, deliver=lambda b=block_id: self._on_ack(b))
        if block_id in self._rx_seen:
            self.stats.duplicates += 1
            return
        self._rx_seen.add(block_id)
        if not self.cfg.in_order:
            self._deliver(block_id)
            return
        self._rx_buf[block_id] = self.sim.now
        self._drain_in_order()
        if self._rx_buf:
            self.sim.after(self.cfg.rx_purge_timeout, self._purge)

    def _drain_in_order(self):
        while self._rx_next in self._rx_buf:
            self._rx_buf.pop(self._rx_next)
            self._deliver(self._rx_next)
            self._rx_next += 1

    def _purge(self):
        # skip gaps whose successors have been buffered a full purge timeout;
        # every buffered block has a timer from its own reception, so nothing
        # stays stuck
        timeout = self.cfg.rx_purge_timeout - 1e-9
        while self._rx_buf and \
                self.sim.now - min(self._rx_buf.values()) >= timeout:
            self.stats.purges += 1
            self._rx_next = min(self._rx_buf)
            self._drain_in_order()

    def _deliver(self, block_id):
        self.stats.delivered += 1
        self.delivery_times[block_id] = self.sim.now
        if self.on_deliver is not None:
            self.on_deliver(block_id)

    def finish(self):
        """Mark submission complete so the tx window can fully advance."""
        self._next_new = max(self._next_new, len(self._sizes))


def arq_transfer(sizes: list[int], cfg: ArqConfig, sim: Simulator,
                 link: ErasureLink, ack_link: ErasureLink,
                 submit_interval: float = 0.0) -> ArqTransfer:
    """Run a batch of blocks through ARQ; returns the machine with stats."""
    arq = ArqTransfer(sim, cfg, link, ack_link)
    for i in range(len(sizes)):
        sim.at(sim.now + i * submit_interval,
               lambda i=i: arq.submit(i, sizes[i]))
    sim.run()
    return arq


def chase_combining(p: float):
    """Default combining model: attempt k fails with probability p^(k+1)."""

    def p_eff(k: int) -> float:
        return p ** (k + 1)

    return p_eff


@dataclass
class HarqConfig:
    max_retx: int = 4
    ul_ack_delay: int = 3      # frames
    dl_ack_delay: int = 1      # frames
    frame: float = 0.005       # s
    combining_model: object = None   # k -> per-attempt failure probability

    def validate(self):
        if self.max_retx < 0:
            raise ValueError("max_retx must be >= 0")

    @property
    def retx_latency(self) -> float:
        return (self.ul_ack_delay + self.dl_ack_delay) * self.frame


@dataclass
class HarqStats:
    offered: int = 0
    delivered: int = 0
    lost: int = 0
    attempts: int = 0


class HarqTransfer:
    """CC-HARQ block model: retransmissions combine with earlier copies,
    so the per-attempt failure probability shrinks with the attempt index."""

    def __init__(self, sim: Simulator, cfg: HarqConfig, link: ErasureLink,
                 base_loss: float, rng: random.Random, on_deliver=None):
        cfg.validate()
        self.sim = sim
        self.cfg = cfg
        self.link = link
        self.rng = rng
        self.p_eff = cfg.combining_model or chase_combining(base_loss)
        self.on_deliver = on_deliver
        self.stats = HarqStats()
        self.delivery_times = {}

    def submit(self, block_id: int, nbytes: int):
        self.stats.offered += 1
        self._attempt(block_id, nbytes, 0)

    def _attempt(self, block_id, nbytes, k):
        self.stats.attempts += 1
        tx_end, _ = self.link.send(nbytes)
        if self.rng.random() >= self.p_eff(k):
            arrival = tx_end + self.link.delay
            self.sim.at(arrival, lambda: self._deliver(block_id))
        elif k < self.cfg.max_retx:
            self.sim.at(tx_end + self.cfg.retx_latency,
                        lambda: self._attempt(block_id, nbytes, k + 1))
        else:
            self.stats.lost += 1

    def _deliver(self, block_id):
        self.stats.delivered += 1
        self.delivery_times[block_id] = self.sim.now
        if self.on_deliver is not None:
            self.on_deliver(block_id)


def harq_transfer(sizes: list[int], cfg: HarqConfig, sim: Simulator,
                  link: ErasureLink, base_loss: float, rng: random.Random,
                  submit_interval: float = 0.0) -> HarqTransfer:
    harq = HarqTransfer(sim, cfg, link, base_loss, rng)
    for i in range(len(sizes)):
        sim.at(sim.now + i * submit_interval,
               lambda i=i: harq.submit(i, sizes[i]))
    sim.run()
    return harq
