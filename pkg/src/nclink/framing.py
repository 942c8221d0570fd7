"""Byte-exact wire formats: coded-packet encapsulation and ACKs.

Layout after the 20-byte IPv4 header: tid, bid, sid, ns, type (one byte
each), a two-byte start field, then a one-byte segn (systematic) or a
two-byte seed (coded). Multi-byte fields are big-endian. The checksum
field in the IP header covers the whole wire packet so any corruption is
caught on decapsulation.
"""

import struct

from .codec import DecodeError, SYSTEMATIC, CODED, START_NONE

IP_HEADER_LEN = 20
NC_FIXED_LEN = IP_HEADER_LEN + 7          # through the start field
SYS_HEADER_LEN = NC_FIXED_LEN + 1         # + segn
CODED_HEADER_LEN = NC_FIXED_LEN + 2       # + seed
ACK_LEN = 2

_NC_PROTO = 253  # RFC 3692 experimental protocol number


def checksum_rfc1071(buf: bytes) -> int:
    """Ones-complement of the ones-complement 16-bit word sum."""
    if len(buf) % 2:
        buf = buf + b"\x00"
    total = 0
    for (word,) in struct.iter_unpack("!H", buf):
        total += word
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return (~total) & 0xFFFF


class NcHeader:
    """Parsed NC header fields (IPv4 part is regenerated on encapsulation)."""

    __slots__ = ("tid", "bid", "sid", "ns", "type", "start", "segn", "seed")

    def __init__(self, tid, bid, sid, ns, type, start=START_NONE, segn=0, seed=0):
        self.tid = tid
        self.bid = bid
        self.sid = sid
        self.ns = ns
        self.type = type
        self.start = start
        self.segn = segn
        self.seed = seed

    def __eq__(self, other):
        return all(getattr(self, f) == getattr(other, f) for f in self.__slots__)

    def __repr__(self):
        fields = ", ".join(f"{f}={getattr(self, f)}" for f in self.__slots__)
        return f"NcHeader({fields})"


def _check_byte(name, value):
    if not 0 <= value <= 255:
        raise ValueError(f"{name}={value} does not fit one byte")


def build_datagram(payload: bytes, src: int = 0x0A000001, dst: int = 0x0A000002) -> bytes:
    """A minimal IPv4 datagram around payload; carries its own length field."""
    total = IP_HEADER_LEN + len(payload)
    if total > 0xFFFF:
        raise ValueError("payload too large for one datagram")
    hdr = bytearray(struct.pack("!BBHHHBBHII", 0x45, 0, total, 0, 0, 64,
                                17, 0, src, dst))
    hdr[10:12] = struct.pack("!H", checksum_rfc1071(bytes(hdr)))
    return bytes(hdr) + payload


def encapsulate(meta: NcHeader, segment: bytes) -> bytes:
    """Header || segment with correct total-length and checksum."""
    for name in ("tid", "bid", "sid", "ns"):
        _check_byte(name, getattr(meta, name))
    if meta.type not in (SYSTEMATIC, CODED):
        raise ValueError(f"bad packet type {meta.type}")
    if not 0 <= meta.start <= 0xFFFF:
        raise ValueError(f"start={meta.start} does not fit two bytes")
    if meta.type == SYSTEMATIC:
        _check_byte("segn", meta.segn)
        tail = bytes([meta.segn])
    else:
        if not 0 <= meta.seed <= 0xFFFF:
            raise ValueError(f"seed={meta.seed} does not fit two bytes")
        tail = struct.pack("!H", meta.seed)
    hlen = NC_FIXED_LEN + len(tail)
    total = hlen + len(segment)
    if total > 0xFFFF:
        raise ValueError("segment too large for one packet")
    ip = struct.pack("!BBHHHBBHII", 0x45, 0, total, 0, 0, 64, _NC_PROTO,
                     0, 0x0A000001, 0x0A000002)
    nc = bytes([meta.tid, meta.bid, meta.sid, meta.ns, meta.type]) + \
        struct.pack("!H", meta.start) + tail
    pkt = bytearray(ip + nc + bytes(segment))
    pkt[10:12] = struct.pack("!H", checksum_rfc1071(bytes(pkt)))
    return bytes(pkt)


def decapsulate(wire: bytes) -> tuple[NcHeader, bytes]:
    """Validate and parse a coded-packet wire image."""
    if len(wire) < SYS_HEADER_LEN:
        raise DecodeError(f"wire too short: {len(wire)} bytes")
    total = struct.unpack_from("!H", wire, 2)[0]
    if total != len(wire):
        raise DecodeError(f"length field {total} != wire length {len(wire)}")
    if checksum_rfc1071(wire) != 0:
        raise DecodeError("checksum mismatch")
    tid, bid, sid, ns, ptype = wire[20:25]
    start = struct.unpack_from("!H", wire, 25)[0]
    if ptype == SYSTEMATIC:
        hlen = SYS_HEADER_LEN
        meta = NcHeader(tid, bid, sid, ns, ptype, start, segn=wire[27])
    elif ptype == CODED:
        if len(wire) < CODED_HEADER_LEN:
            raise DecodeError("truncated coded header")
        hlen = CODED_HEADER_LEN
        meta = NcHeader(tid, bid, sid, ns, ptype, start,
                        seed=struct.unpack_from("!H", wire, 27)[0])
    else:
        raise DecodeError(f"unknown packet type {ptype}")
    return meta, wire[hlen:]


def encode_ack(tid: int, bid: int) -> bytes:
    _check_byte("tid", tid)
    _check_byte("bid", bid)
    return bytes([tid, bid])


def decode_ack(buf: bytes) -> tuple[int, int]:
    if len(buf) != ACK_LEN:
        raise DecodeError(f"ACK must be {ACK_LEN} bytes, got {len(buf)}")
    return buf[0], buf[1]
