"""Master/worker encoder and decoder pipeline.

One encoder master batches ingress datagrams into buffer lists and hands
them round-robin to Np encoder workers; each worker encodes one block at a
time and paces its emissions on the forward link. The decoder master
routes arriving packets by TID to the matching decoder worker, which runs
the per-block Gauss-Jordan state, ACKs completed blocks on the reverse
link, and salvages systematic packets when a block is superseded.

Everything is driven by the channel simulator's virtual clock, so a run is
a pure function of configuration and seed.
"""

from dataclasses import dataclass
import random

import numpy as np

from . import codec, framing
from .channel import Simulator, ErasureLink
from .codec import CodecParams, Pause, PRNG_MOD


def bid_newer(a: int, b: int) -> bool:
    """Serial-number compare mod 256: is a newer than b?"""
    return 0 < (a - b) % 256 < 128


@dataclass
class Counters:
    ingress: int = 0
    lists_flushed: int = 0
    lists_dropped: int = 0
    packets_overflow: int = 0     # ingress packets in dropped buffer lists
    blocks_started: int = 0
    blocks_decoded: int = 0
    blocks_dropped: int = 0       # superseded before decoding
    blocks_unfinished: int = 0    # open at shutdown
    delivered: int = 0
    delivered_salvaged: int = 0
    acks_sent: int = 0
    acks_received: int = 0
    decap_errors: int = 0
    unknown_tid: int = 0
    stale_bid: int = 0
    wire_sent: int = 0
    wire_received: int = 0

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class _AckFlag:
    """Cancellation token shared between worker and ACK handler."""

    def __init__(self):
        self._set = False

    def set(self):
        self._set = True

    def is_set(self):
        return self._set


class EncoderWorker:
    def __init__(self, encoder, tid: int):
        self.enc = encoder
        self.tid = tid
        self.queue = []          # buffer lists awaiting encoding
        self.busy = False
        self.bid = -1
        self.current_bid = None
        self.ack_flag = None
        self._gen = None

    def enqueue(self, packets: list[bytes]):
        if len(self.queue) >= self.enc.max_queue:
            self.enc.counters.lists_dropped += 1
            self.enc.counters.packets_overflow += len(packets)
            return
        self.queue.append(packets)
        if not self.busy:
            self._start_next()

    def _start_next(self):
        if not self.queue:
            self.busy = False
            return
        self.busy = True
        packets = self.queue.pop(0)
        self.bid += 1
        self.current_bid = self.bid % 256
        self.ack_flag = _AckFlag()
        block = codec.build_block(packets, self.tid, self.current_bid,
                                  self.enc.params)
        self.enc.counters.blocks_started += 1
        self._gen = codec.encode_block(block, self.enc.params, self.ack_flag,
                                       self.enc.seed_source)
        self._block = block
        self._send_next()

    def _send_next(self):
        item = next(self._gen, None)
        if item is None:
            self._gen = None
            self.current_bid = None
            self._start_next()
            return
        if isinstance(item, Pause):
            self.enc.sim.after(item.duration, self._send_next)
            return
        meta = framing.NcHeader(
            tid=self.tid, bid=self._block.bid, sid=item.sid % 256,
            ns=self._block.ns, type=item.kind, start=item.start,
            segn=item.segn, seed=item.seed)
        wire = framing.encapsulate(meta, bytes(item.payload))
        self.enc.counters.wire_sent += 1
        tx_end, _ = self.enc.link.send(len(wire),
                                       deliver=self.enc._delivery(wire))
        self.enc.sim.at(tx_end, self._send_next)

    def handle_ack(self, bid: int):
        if self.current_bid is not None and bid == self.current_bid:
            self.ack_flag.set()


class NcEncoder:
    """Encoder master plus its worker pool."""

    def __init__(self, sim: Simulator, link: ErasureLink, params: CodecParams,
                 np_workers: int = 1, rng: random.Random = None,
                 counters: Counters = None, receive=None, max_queue: int = 8):
        if np_workers < 1:
            raise ValueError("need at least one worker pair")
        params.validate()
        self.sim = sim
        self.link = link
        self.params = params
        self.counters = counters if counters is not None else Counters()
        self.receive = receive            # callable(wire bytes) at far end
        self.max_queue = max_queue
        rng = rng or random.Random(0)
        self.seed_source = self._seeds(rng)
        self.workers = [EncoderWorker(self, t) for t in range(np_workers)]
        self._list = []
        self._lb = 0
        self._epoch = 0
        self._rr = 0

    @staticmethod
    def _seeds(rng):
        while True:
            yield rng.randrange(1, PRNG_MOD)

    def _delivery(self, wire):
        if self.receive is None:
            return None
        return lambda w=wire: self.receive(w)

    def ingest(self, packet: bytes):
        """Alg-1 batching: flush on age Ti or length threshold Lt."""
        self.counters.ingress += 1
        if not self._list:
            self._epoch += 1
            self.sim.after(self.params.ti,
                           lambda e=self._epoch: self._timer_flush(e))
        self._list.append(packet)
        self._lb += len(packet)
        if self._lb >= self.params.lt:
            self._flush()

    def _timer_flush(self, epoch):
        if epoch == self._epoch and self._list:
            self._flush()

    def _flush(self):
        packets, self._list, self._lb = self._list, [], 0
        self._epoch += 1
        self.counters.lists_flushed += 1
        worker = self.workers[self._rr % len(self.workers)]
        self._rr += 1
        worker.enqueue(packets)

    def handle_ack(self, ack: bytes):
        try:
            tid, bid = framing.decode_ack(ack)
        except codec.DecodeError:
            return
        self.counters.acks_received += 1
        if tid < len(self.workers):
            self.workers[tid].handle_ack(bid)


class DecoderWorker:
    def __init__(self, decoder, tid: int):
        self.dec = decoder
        self.tid = tid
        self.bid = None
        self.state = None
        self.received = {}
        self.starts = {}
        self.done = False

    def on_packet(self, meta: framing.NcHeader, segment: bytes):
        if self.bid is None or bid_newer(meta.bid, self.bid):
            if self.bid is not None and not self.done:
                self._drop_current()
            self._open(meta, len(segment))
        elif meta.bid != self.bid:
            self.dec.counters.stale_bid += 1
            return
        if self.done:
            return
        if meta.type == codec.SYSTEMATIC:
            if meta.segn >= self.state.ns:
                self.dec.counters.decap_errors += 1
                return
            coeffs = self.dec._unit(self.state.ns, meta.segn)
            self.received[meta.segn] = segment
            self.starts[meta.segn] = meta.start
        else:
            coeffs = codec.coefficients_from_seed(meta.seed, self.state.ns)
        self.state.ingest(coeffs, segment)
        if self.state.decoded:
            self._complete()

    def _open(self, meta, ls):
        self.bid = meta.bid
        self.state = codec.DecoderState(meta.ns, ls)
        self.received = {}
        self.starts = {}
        self.done = False

    def _complete(self):
        self.dec.counters.blocks_decoded += 1
        self.done = True
        try:
            payload = codec.unpad_block(self.state.solved_payload())
            packets = codec.reassemble_packets(payload)
        except codec.DecodeError:
            self.dec.counters.decap_errors += 1
            packets = []
        for p in packets:
            self.dec._deliver(p, salvaged=False)
        self.dec._send_ack(self.tid, self.bid)

    def _drop_current(self):
        self.dec.counters.blocks_dropped += 1
        for p in codec.extract_systematic(self.received, self.starts,
                                          self.state.ns, self.state.ls):
            self.dec._deliver(p, salvaged=True)

    def finalize(self):
        if self.bid is not None and not self.done:
            self.dec.counters.blocks_unfinished += 1
            for p in codec.extract_systematic(self.received, self.starts,
                                              self.state.ns, self.state.ls):
                self.dec._deliver(p, salvaged=True)
            self.done = True


class NcDecoder:
    """Decoder master plus its worker pool."""

    def __init__(self, sim: Simulator, ack_link: ErasureLink = None,
                 np_workers: int = 1, counters: Counters = None,
                 deliver=None, ack_receive=None):
        self.sim = sim
        self.ack_link = ack_link
        self.counters = counters if counters is not None else Counters()
        self.deliver = deliver
        self.ack_receive = ack_receive     # callable(ack bytes) at encoder
        self.workers = [DecoderWorker(self, t) for t in range(np_workers)]
        self._units = {}

    def _unit(self, ns, idx):
        if ns not in self._units:
            self._units[ns] = np.eye(ns, dtype=np.uint8)
        return self._units[ns][idx]

    def on_wire(self, wire: bytes):
        self.counters.wire_received += 1
        try:
            meta, segment = framing.decapsulate(wire)
        except codec.DecodeError:
            self.counters.decap_errors += 1
            return
        if meta.tid >= len(self.workers):
            self.counters.unknown_tid += 1
            return
        self.workers[meta.tid].on_packet(meta, segment)

    def _deliver(self, packet: bytes, salvaged: bool):
        self.counters.delivered += 1
        if salvaged:
            self.counters.delivered_salvaged += 1
        if self.deliver is not None:
            self.deliver(packet)

    def _send_ack(self, tid, bid):
        self.counters.acks_sent += 1
        ack = framing.encode_ack(tid, bid)
        if self.ack_link is not None and self.ack_receive is not None:
            self.ack_link.send(len(ack) + 28,
                               deliver=lambda a=ack: self.ack_receive(a))

    def finalize(self):
        """Close open blocks at end of trial, salvaging what is possible."""
        for w in self.workers:
            w.finalize()


def build_pipeline(sim: Simulator, fwd_link: ErasureLink,
                   ack_link: ErasureLink, params: CodecParams,
                   np_workers: int, rng: random.Random, deliver=None):
    """Wire an encoder/decoder pair across a link pair; shared counters."""
    counters = Counters()
    decoder = NcDecoder(sim, ack_link, np_workers, counters, deliver)
    encoder = NcEncoder(sim, fwd_link, params, np_workers, rng, counters,
                        receive=decoder.on_wire)
    decoder.ack_receive = encoder.handle_ack
    return encoder, decoder, counters
