"""Block formation, segmentation, padding, systematic RLNC encode and
progressive Gauss-Jordan decode.

A coding block is a concatenation of whole datagrams, padded (ANSI X.923)
to Ns segments of Ls bytes. The encoder emits the Ns segments uncoded
first, then up to Nk rounds of Nm coded segments whose coefficient vectors
are reproducible from a 15-bit PRNG seed.
"""

from dataclasses import dataclass, field
import itertools

import numpy as np

from . import gf256

# Linear congruential generator constants for coefficient seeds.
PRNG_MULT = 32719
PRNG_INC = 3
PRNG_MOD = 32749

# start-field sentinel: no datagram begins in this segment.
START_NONE = 0xFFFF

SYSTEMATIC = 0
CODED = 1


class DecodeError(ValueError):
    """Malformed or inconsistent data on the decode path."""


@dataclass
class CodecParams:
    """Coder knobs; defaults follow the reference configuration."""

    lt: int = 22400      # buffer-list length threshold, bytes
    ti: float = 1.0      # buffer-list time interval, s
    lm: int = 1400       # max segment length, bytes
    nr: int = 120        # preferred number of segments
    nk: int = 1          # redundancy rounds
    nm: int = 10         # redundancy packets per round
    tr: float = 0.0      # inter-round pause, s

    def validate(self):
        if self.lm < 1 or self.nr < 1 or self.lt < 1:
            raise ValueError("lm, nr and lt must be >= 1")
        if self.nk < 0 or self.nm < 0:
            raise ValueError("nk and nm must be >= 0")
        if self.ti <= 0 or self.tr < 0:
            raise ValueError("ti must be > 0 and tr >= 0")


def compute_segmentation(lb: int, nr: int, lm: int) -> tuple[int, int]:
    """Pick (Ns, Ls) for a block of lb payload bytes.

    Works on lb+1 to reserve the padding count byte. Starts from the
    preferred segment count and grows it until the segment length fits lm.
    """
    if lb < 0 or nr < 1 or lm < 1:
        raise ValueError("need lb >= 0, nr >= 1, lm >= 1")
    lb += 1
    ns = nr
    ls = -(-lb // ns)  # ceil
    while ls > lm:
        ns += 1
        ls = -(-lb // ns)
    return ns, ls


def pad_block(payload: bytes, ns: int, ls: int) -> bytes:
    """ANSI X.923 pad to ns*ls bytes; the count byte counts itself."""
    target = ns * ls
    npad = target - len(payload)
    if npad < 1:
        raise ValueError(f"padded size {target} must exceed payload {len(payload)}")
    if npad > 255:
        raise ValueError(f"pad length {npad} does not fit the count byte")
    return payload + bytes(npad - 1) + bytes([npad])


def unpad_block(padded: bytes) -> bytes:
    if not padded:
        raise DecodeError("empty block")
    n = padded[-1]
    if n < 1 or n > len(padded):
        raise DecodeError(f"bad pad count {n} for {len(padded)}-byte block")
    return padded[:-n]


@dataclass
class Prng:
    """Linear congruential generator: a' = (a*32719 + 3) mod 32749."""

    a: int = 1

    def next(self, lim: int) -> int:
        if lim < 1:
            raise ValueError("lim must be >= 1")
        self.a = (self.a * PRNG_MULT + PRNG_INC) % PRNG_MOD
        return (self.a % lim) + 1


def prng_next(state: Prng, lim: int) -> tuple[int, Prng]:
    """Functional wrapper: returns (value, new state)."""
    new = Prng(state.a)
    return new.next(lim), new


def coefficients_from_seed(seed: int, ns: int) -> np.ndarray:
    """ns nonzero coefficients, reproducible from the seed (initial state)."""
    if ns < 1:
        raise ValueError("ns must be >= 1")
    rng = Prng(seed)
    return np.array([rng.next(255) for _ in range(ns)], dtype=np.uint8)


def default_seed_source(start: int = 1):
    """Deterministic fallback seed stream; the pipeline injects its own."""
    n = start
    while True:
        yield (n % (PRNG_MOD - 1)) + 1
        n += 1


@dataclass
class CodingBlock:
    tid: int
    bid: int
    payload: bytes                      # padded
    ns: int
    ls: int
    packet_boundaries: list            # (offset, length) per original datagram

    @property
    def segments(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=np.uint8).reshape(self.ns, self.ls)

    def segment_start(self, sid: int) -> int:
        """Offset within segment sid of the first datagram boundary there."""
        lo, hi = sid * self.ls, (sid + 1) * self.ls
        for off, _ in self.packet_boundaries:
            if lo <= off < hi:
                return off - lo
        return START_NONE


def build_block(packets: list[bytes], tid: int, bid: int, params: CodecParams) -> CodingBlock:
    """Concatenate a buffer list into a padded, segmented coding block."""
    boundaries = []
    off = 0
    for p in packets:
        boundaries.append((off, len(p)))
        off += len(p)
    raw = b"".join(packets)
    ns, ls = compute_segmentation(len(raw), params.nr, params.lm)
    return CodingBlock(tid, bid, pad_block(raw, ns, ls), ns, ls, boundaries)


@dataclass
class Emission:
    """One packet worth of encoder output, pre-encapsulation."""

    kind: int                 # SYSTEMATIC or CODED
    sid: int
    payload: np.ndarray       # Ls bytes
    segn: int = 0             # segment index, systematic only
    seed: int = 0             # coefficient seed, coded only
    start: int = START_NONE   # first datagram boundary in segment


@dataclass
class Pause:
    """Inter-round gap marker in the emission stream."""

    duration: float


def encode_block(block: CodingBlock, params: CodecParams, ack_signal=None,
                 seed_source=None):
    """Yield the systematic segments then redundancy rounds.

    ack_signal is anything with is_set(); once it fires no further packets
    are emitted. Coded payloads are GF(2^8) combinations of all segments
    with coefficients regenerated from the per-packet seed.
    """
    if seed_source is None:
        seed_source = default_seed_source()
    segs = block.segments
    sid = 0
    for x in range(block.ns):
        if ack_signal is not None and ack_signal.is_set():
            return
        yield Emission(SYSTEMATIC, sid, segs[x], segn=x, start=block.segment_start(x))
        sid += 1
    for rnd in range(params.nk):
        for _ in range(params.nm):
            if ack_signal is not None and ack_signal.is_set():
                return
            seed = next(seed_source)
            coeffs = coefficients_from_seed(seed, block.ns)
            payload = np.bitwise_xor.reduce(gf256.MUL[coeffs[:, None], segs], axis=0)
            yield Emission(CODED, sid, payload, seed=seed)
            sid += 1
        if params.tr > 0 and rnd < params.nk - 1:
            yield Pause(params.tr)


class DecoderState:
    """Progressive Gauss-Jordan workspace for one block.

    Rows are kept normalized and sorted by pivot column, so the coefficient
    part stays in reduced row-echelon form and reads back as the identity
    once rank reaches Ns.
    """

    def __init__(self, ns: int, ls: int):
        self.ns = ns
        self.ls = ls
        self.m = np.zeros((ns, ns + ls), dtype=np.uint8)
        self.pivots: list[int] = []     # ascending pivot columns, row i <-> pivots[i]

    @property
    def rank(self) -> int:
        return len(self.pivots)

    @property
    def decoded(self) -> bool:
        return self.rank == self.ns

    def ingest(self, coeffs: np.ndarray, payload) -> bool:
        """Fold one received row in; True if it raised the rank."""
        payload = np.frombuffer(bytes(payload), dtype=np.uint8) if not isinstance(payload, np.ndarray) else payload
        if len(coeffs) != self.ns or len(payload) != self.ls:
            raise ValueError("row shape does not match block geometry")
        if self.decoded:
            return False
        row = np.concatenate([np.asarray(coeffs, dtype=np.uint8), payload])
        r = self.rank
        if r:
            factors = row[self.pivots]
            nz = factors != 0
            if nz.any():
                prod = gf256.MUL[factors[nz][:, None], self.m[:r][nz]]
                row = row ^ np.bitwise_xor.reduce(prod, axis=0)
        lead = row[: self.ns].nonzero()[0]
        if lead.size == 0:
            return False
        pivot = int(lead[0])
        row = gf256.MUL[gf256.INV[row[pivot]]][row]
        # clear the new pivot column from existing rows
        if r:
            col = self.m[:r, pivot]
            nz = col.nonzero()[0]
            if nz.size:
                self.m[nz] ^= gf256.MUL[col[nz][:, None], row[None, :]]
        pos = int(np.searchsorted(self.pivots, pivot))
        self.m[pos + 1 : r + 1] = self.m[pos:r].copy()
        self.m[pos] = row
        self.pivots.insert(pos, pivot)
        return True

    def solved_payload(self) -> bytes:
        """Padded block payload, valid once decoded."""
        if not self.decoded:
            raise DecodeError("block not fully decoded")
        return self.m[:, self.ns :].tobytes()


def decoder_ingest(state: DecoderState, coeffs: np.ndarray, payload) -> DecoderState:
    state.ingest(coeffs, payload)
    return state


def datagram_length(buf, off: int) -> int:
    """Total length of the IPv4-style datagram starting at off."""
    if off + 4 > len(buf):
        raise DecodeError("truncated datagram header")
    return (buf[off + 2] << 8) | buf[off + 3]


def reassemble_packets(payload: bytes) -> list[bytes]:
    """Split an unpadded block back into the original datagrams.

    Boundaries come from each datagram's own length field, so corrupt
    metadata surfaces as a decode error here.
    """
    out = []
    off = 0
    n = len(payload)
    while off < n:
        length = datagram_length(payload, off)
        if length < 20 or off + length > n:
            raise DecodeError(f"bad datagram length {length} at offset {off}")
        out.append(payload[off : off + length])
        off += length
    return out


def extract_systematic(received: dict[int, bytes], starts: dict[int, int],
                       ns: int, ls: int) -> list[bytes]:
    """Salvage whole datagrams from an undecoded block.

    received maps segment index to its bytes; starts maps segment index to
    its wire start field. Every datagram whose bytes lie entirely within
    received segments is returned, in block order.
    """
    found: dict[int, bytes] = {}

    def read(lo: int, hi: int):
        # bytes lo:hi of the block, or None if any covering segment is missing
        parts = []
        for sid in range(lo // ls, (hi - 1) // ls + 1):
            if sid not in received:
                return None
            seg = received[sid]
            a = max(lo, sid * ls) - sid * ls
            b = min(hi, (sid + 1) * ls) - sid * ls
            parts.append(seg[a:b])
        return b"".join(parts)

    total = ns * ls
    for sid in sorted(received):
        start = starts.get(sid, START_NONE)
        if start == START_NONE:
            continue
        off = sid * ls + start
        while off + 4 <= total:
            if off in found:
                break
            hdr = read(off, off + 4)
            if hdr is None:
                break
            length = (hdr[2] << 8) | hdr[3]
            if length < 20 or off + length > total:
                break  # padding or missing data reached
            data = read(off, off + length)
            if data is None:
                break
            found[off] = data
            off += length
    return [found[k] for k in sorted(found)]
