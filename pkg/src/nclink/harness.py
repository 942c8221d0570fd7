"""Experiment driver: UDP-style stream trials, NACK-round file transfers,
and the derived metrics (throughput, loss, redundancy bandwidth, TLR,
transfer delay).
"""

from dataclasses import dataclass, field, replace
from fractions import Fraction
import math
import random
import struct

from . import channel, codec, framing, pipeline
from .channel import (ArqConfig, BernoulliLoss, ErasureLink, GilbertElliott,
                      HarqConfig, HarqTransfer, ArqTransfer, Simulator,
                      UPLINK_RATE, DEFAULT_RATE)
from .codec import CodecParams

RELIABILITIES = ("raw", "harq", "harq-arq", "nc")

# Redundancy ladder of the studied NC configurations.
NM_LADDER = (10, 15, 20, 24, 30, 40, 60, 120)

NC_HEADER_LEN = framing.CODED_HEADER_LEN  # 29, coded-packet header


def code_rate(ns: int, nk: int, nm: int) -> Fraction:
    """Upper bound on the effective code rate: Ns/(Ns + Nk*Nm)."""
    if ns < 1:
        raise ValueError("ns must be >= 1")
    return Fraction(ns, ns + nk * nm)


def header_overhead(lh: int, coeff_bytes: int, ls: int) -> float:
    """Per-packet header overhead ratio (lh + coeff_bytes) / ls."""
    return (lh + coeff_bytes) / ls


def redundancy_bandwidth(nm: int, nr: int, offered: float) -> float:
    """Approximate redundancy bandwidth (Nm/Nr) * offered load."""
    if nr < 1:
        raise ValueError("nr must be >= 1")
    return nm / nr * offered


def tlr(t: float, l: float, r: float):
    """Throughput over loss-plus-redundancy; None marks the saturated case."""
    if l + r <= 0:
        return None
    return t / (l + r)


def nc_best_nm(p: float, margin: float = 0.08):
    """Ladder Nm whose code rate sits at least `margin` below 1-p.

    The margin absorbs the binomial spread of per-block arrivals, so
    chosen configurations decode with high probability.
    """
    target = 1.0 - p - margin
    for nm in NM_LADDER:
        if code_rate(120, 1, nm) <= target:
            return nm
    return NM_LADDER[-1]


@dataclass
class ChannelConfig:
    p: float = 0.0
    rate: float = DEFAULT_RATE
    delay: float = 0.010
    ack_loss: float = 0.0
    ack_rate: float = UPLINK_RATE
    ack_delay: float = None          # defaults to the forward delay
    gilbert: tuple = None            # (p_good, p_bad, p_gb, p_bg)

    def validate(self):
        if not 0.0 <= self.p <= 1.0 or not 0.0 <= self.ack_loss <= 1.0:
            raise ValueError("loss probabilities must be within [0, 1]")
        if self.rate <= 0 or self.ack_rate <= 0:
            raise ValueError("link rates must be positive")
        if self.delay < 0:
            raise ValueError("delay must be non-negative")

    def loss_model(self):
        if self.gilbert is not None:
            return GilbertElliott(*self.gilbert)
        return BernoulliLoss(self.p)

    def make_links(self, sim: Simulator, rng: random.Random):
        fwd = ErasureLink(sim, self.rate, self.delay, self.loss_model(),
                          random.Random(rng.randrange(2**31)))
        back_delay = self.delay if self.ack_delay is None else self.ack_delay
        ack = ErasureLink(sim, self.ack_rate, back_delay,
                          BernoulliLoss(self.ack_loss),
                          random.Random(rng.randrange(2**31)))
        return fwd, ack


@dataclass
class ExperimentConfig:
    reliability: str = "raw"
    nm: int = None                   # required for nc
    offered_load: float = 6e6        # bits/s
    packet_size: int = 1400          # bytes, datagram total
    duration: float = None           # s, stream trial
    file_size: int = None            # bytes, file trial
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    codec: CodecParams = field(default_factory=CodecParams)
    arq: ArqConfig = field(default_factory=ArqConfig)
    harq: HarqConfig = field(default_factory=HarqConfig)
    np_workers: int = 1
    seed: int = 0
    config_id: str = ""
    max_rounds: int = 50             # file-trial NACK round cap

    def validate(self):
        if self.reliability not in RELIABILITIES:
            raise ValueError(f"unknown reliability {self.reliability!r}")
        if self.reliability == "nc":
            if self.nm is None:
                raise ValueError("nc configuration requires nm")
            if self.nm < 0:
                raise ValueError("nm must be >= 0")
        if (self.duration is None) == (self.file_size is None):
            raise ValueError("set exactly one of duration / file_size")
        if self.duration is not None and self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.file_size is not None and self.file_size <= 0:
            raise ValueError("file_size must be positive")
        if self.offered_load <= 0:
            raise ValueError("offered_load must be positive")
        if not 24 <= self.packet_size <= 0xFFFF:
            raise ValueError("packet_size out of range")
        if self.np_workers < 1:
            raise ValueError("np_workers must be >= 1")
        self.channel.validate()
        self.codec.validate()
        self.arq.validate()
        self.harq.validate()

    def effective_codec(self) -> CodecParams:
        if self.reliability == "nc":
            return replace(self.codec, nm=self.nm)
        return self.codec


@dataclass
class MetricsReport:
    config_id: str
    reliability: str
    nm: int
    p: float
    offered_load: float
    sent: int
    delivered: int
    throughput: float            # bits/s
    loss: float                  # bits/s
    loss_pct: float
    redundancy: float            # bits/s, ladder approximation
    redundancy_exact: float      # bits/s, Ns- and header-based
    tlr: float                   # None when saturated
    transfer_delay: float        # s, file trials only
    seed: int
    counters: dict = field(default_factory=dict)


def _payload_filler(packet_size: int) -> bytes:
    return bytes((7 * i + 13) % 256 for i in range(packet_size))


def make_packet(index: int, packet_size: int, filler: bytes) -> bytes:
    """An IPv4-style datagram whose payload starts with its index."""
    body = struct.pack("!I", index) + filler[: packet_size - 24]
    return framing.build_datagram(body)


def packet_index(packet: bytes) -> int:
    return struct.unpack_from("!I", packet, framing.IP_HEADER_LEN)[0]


def _exact_redundancy(cfg: ExperimentConfig) -> float:
    """Header-inclusive Ns-based redundancy bandwidth."""
    if cfg.reliability != "nc":
        return 0.0
    params = cfg.effective_codec()
    ns, ls = codec.compute_segmentation(params.lt, params.nr, params.lm)
    return cfg.offered_load * params.nm * (NC_HEADER_LEN + ls) / params.lt


class _HarqArq:
    """Joint model: each ARQ (re)transmission is one full HARQ cycle."""

    def __init__(self, sim, cfg: ExperimentConfig, link, rng, on_deliver):
        self.sim = sim
        self.harq = cfg.harq
        self.arq = cfg.arq
        self.p = cfg.channel.p
        self.rng = rng
        self.link = link
        self.on_deliver = on_deliver
        self.p_eff = cfg.harq.combining_model or channel.chase_combining(self.p)
        self.cycle_fail = math.prod(
            self.p_eff(k) for k in range(cfg.harq.max_retx + 1))
        self.max_cycles = 1 + int(self.arq.block_lifetime / self.arq.retry_timeout)
        self.delivered = 0
        self.lost = 0

    def submit(self, block_id, nbytes, cycle=0):
        tx_end, _ = self.link.send(nbytes)
        if self.rng.random() >= self.cycle_fail:
            self.sim.at(tx_end + self.link.delay + self.harq.retx_latency,
                        lambda: self._deliver(block_id))
        elif cycle + 1 < self.max_cycles:
            self.sim.at(tx_end + self.arq.retry_timeout,
                        lambda: self.submit(block_id, nbytes, cycle + 1))
        else:
            self.lost += 1

    def _deliver(self, block_id):
        self.delivered += 1
        if self.on_deliver is not None:
            self.on_deliver(block_id)


def run_stream_trial(cfg: ExperimentConfig) -> MetricsReport:
    """Constant-rate datagram stream for cfg.duration virtual seconds."""
    cfg.validate()
    if cfg.duration is None:
        raise ValueError("stream trial needs a duration")
    rng = random.Random(cfg.seed)
    sim = Simulator()
    fwd, ack = cfg.channel.make_links(sim, rng)

    interval = cfg.packet_size * 8 / cfg.offered_load
    n_packets = int(cfg.duration / interval)
    filler = _payload_filler(cfg.packet_size)

    delivered = {"count": 0}
    counters = None

    def sink(_packet=None):
        delivered["count"] += 1

    if cfg.reliability == "raw":
        def send(i):
            fwd.send(cfg.packet_size, deliver=sink)
        for i in range(n_packets):
            sim.at(i * interval, lambda i=i: send(i))
        sim.run()
    elif cfg.reliability == "nc":
        enc, dec, counters = pipeline.build_pipeline(
            sim, fwd, ack, cfg.effective_codec(), cfg.np_workers,
            random.Random(rng.randrange(2**31)), deliver=sink)
        for i in range(n_packets):
            sim.at(i * interval,
                   lambda i=i: enc.ingest(make_packet(i, cfg.packet_size, filler)))
        sim.run()
        dec.finalize()
    elif cfg.reliability == "harq":
        clean = ErasureLink(sim, cfg.channel.rate, cfg.channel.delay,
                            BernoulliLoss(0.0), random.Random(0))
        harq = HarqTransfer(sim, cfg.harq, clean, cfg.channel.p,
                            random.Random(rng.randrange(2**31)),
                            on_deliver=sink)
        for i in range(n_packets):
            sim.at(i * interval, lambda i=i: harq.submit(i, cfg.packet_size))
        sim.run()
    else:  # harq-arq
        clean = ErasureLink(sim, cfg.channel.rate, cfg.channel.delay,
                            BernoulliLoss(0.0), random.Random(0))
        joint = _HarqArq(sim, cfg, clean,
                         random.Random(rng.randrange(2**31)), sink)
        for i in range(n_packets):
            sim.at(i * interval, lambda i=i: joint.submit(i, cfg.packet_size))
        sim.run()

    sent = n_packets
    got = delivered["count"]
    throughput = got * cfg.packet_size * 8 / cfg.duration
    loss = cfg.offered_load - throughput
    loss_pct = 100.0 * (sent - got) / sent if sent else 0.0
    params = cfg.effective_codec()
    redundancy = (redundancy_bandwidth(params.nm, params.nr, cfg.offered_load)
                  if cfg.reliability == "nc" else 0.0)
    return MetricsReport(
        config_id=cfg.config_id, reliability=cfg.reliability,
        nm=cfg.nm if cfg.reliability == "nc" else None,
        p=cfg.channel.p, offered_load=cfg.offered_load,
        sent=sent, delivered=got, throughput=throughput, loss=loss,
        loss_pct=loss_pct, redundancy=redundancy,
        redundancy_exact=_exact_redundancy(cfg),
        tlr=tlr(throughput, loss, redundancy), transfer_delay=None,
        seed=cfg.seed, counters=counters.as_dict() if counters else {})


def run_file_trial(cfg: ExperimentConfig) -> MetricsReport:
    """NACK-round file transfer: send, learn the missing set, resend."""
    cfg.validate()
    if cfg.file_size is None:
        raise ValueError("file trial needs a file_size")
    rng = random.Random(cfg.seed)
    sim = Simulator()
    fwd, ack = cfg.channel.make_links(sim, rng)

    payload_per_pkt = cfg.packet_size - framing.IP_HEADER_LEN - 4
    n_packets = -(-cfg.file_size // payload_per_pkt)
    interval = cfg.packet_size * 8 / cfg.offered_load
    filler = _payload_filler(cfg.packet_size)
    rtt = 2 * cfg.channel.delay
    got = set()
    counters = None

    if cfg.reliability == "nc":
        enc, dec, counters = pipeline.build_pipeline(
            sim, fwd, ack, cfg.effective_codec(), cfg.np_workers,
            random.Random(rng.randrange(2**31)),
            deliver=lambda p: got.add(packet_index(p)))

    harq_rng = random.Random(rng.randrange(2**31))
    blocks_per_pkt = -(-cfg.packet_size // cfg.arq.block_size)

    def send_round(missing):
        start = sim.now
        if cfg.reliability == "raw":
            def send(i):
                fwd.send(cfg.packet_size, deliver=lambda i=i: got.add(i))
            for j, i in enumerate(missing):
                sim.at(start + j * interval, lambda i=i: send(i))
            sim.run()
        elif cfg.reliability == "nc":
            for j, i in enumerate(missing):
                sim.at(start + j * interval,
                       lambda i=i: enc.ingest(make_packet(i, cfg.packet_size, filler)))
            sim.run()
            dec.finalize()
        elif cfg.reliability == "harq":
            harq = HarqTransfer(sim, cfg.harq, _clean(), cfg.channel.p,
                                harq_rng, on_deliver=got.add)
            for j, i in enumerate(missing):
                sim.at(start + j * interval,
                       lambda i=i: harq.submit(i, cfg.packet_size))
            sim.run()
        else:  # arq underlay for the joint configuration
            _arq_round(missing, start)

    def _clean():
        return ErasureLink(sim, cfg.channel.rate, cfg.channel.delay,
                           BernoulliLoss(0.0), random.Random(0))

    def _arq_round(missing, start):
        # app packets ride fixed-size ARQ blocks; a packet arrives when all
        # of its blocks do
        remaining = {i: blocks_per_pkt for i in missing}
        owner = {}
        arq = ArqTransfer(sim, cfg.arq, fwd, ack)

        def block_done(block_id):
            i = owner[block_id]
            remaining[i] -= 1
            if remaining[i] == 0:
                got.add(i)

        arq.on_deliver = block_done
        bid = 0
        block_interval = cfg.arq.block_size * 8 / cfg.offered_load
        t = start
        for i in missing:
            for b in range(blocks_per_pkt):
                owner[bid] = i
                size = min(cfg.arq.block_size,
                           cfg.packet_size - b * cfg.arq.block_size)
                sim.at(t, lambda bid=bid, size=size: arq.submit(bid, size))
                bid += 1
                t += block_interval
        sim.run()

    rounds = 0
    while len(got) < n_packets:
        if rounds >= cfg.max_rounds:
            raise RuntimeError(
                f"file transfer stalled after {rounds} rounds "
                f"({n_packets - len(got)} packets missing)")
        missing = [i for i in range(n_packets) if i not in got]
        send_round(missing)
        rounds += 1
        # NACK exchange before the next round can start
        sim.at(sim.now + rtt, lambda: None)
        sim.run()

    delay = sim.now
    sent_bits = n_packets * cfg.packet_size * 8
    throughput = sent_bits / delay if delay > 0 else float("inf")
    params = cfg.effective_codec()
    redundancy = (redundancy_bandwidth(params.nm, params.nr, cfg.offered_load)
                  if cfg.reliability == "nc" else 0.0)
    return MetricsReport(
        config_id=cfg.config_id, reliability=cfg.reliability,
        nm=cfg.nm if cfg.reliability == "nc" else None,
        p=cfg.channel.p, offered_load=cfg.offered_load,
        sent=n_packets, delivered=len(got), throughput=throughput,
        loss=0.0, loss_pct=0.0, redundancy=redundancy,
        redundancy_exact=_exact_redundancy(cfg),
        tlr=None, transfer_delay=delay, seed=cfg.seed,
        counters=counters.as_dict() if counters else {})


def run_trial(cfg: ExperimentConfig) -> MetricsReport:
    cfg.validate()
    if cfg.file_size is not None:
        return run_file_trial(cfg)
    return run_stream_trial(cfg)


def table5_ladder(base: ExperimentConfig) -> list[ExperimentConfig]:
    """The 11 studied reliability configurations over one channel setting."""
    out = []
    for name in ("raw", "harq", "harq-arq"):
        out.append(replace(base, reliability=name, nm=None,
                           config_id=name.upper() if name != "raw" else "Raw"))
    for nm in NM_LADDER:
        out.append(replace(base, reliability="nc", nm=nm,
                           config_id=f"NC-{nm}"))
    return out
