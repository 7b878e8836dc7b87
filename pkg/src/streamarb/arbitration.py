"""Core arbitration: sub-stream words, the winner scan, and channel allocation.

Each node broadcasts one small word per round (its sub-stream vector) on a
private arbitration channel; every node receives all K words, so every node
holds the identical full stream and can run the same scan locally. Because
the scan is deterministic, all nodes arrive at a consistent channel
assignment without a central arbiter.

Two allocators share the winner scan:

* the dynamic allocator spreads all data channels over the winners with an
  interleaved assignment (``compute_grant`` / ``compute_all_grants``), and
* the single-channel baseline gives each winner exactly one channel
  (``rfi_allocate``).

Everything in this module is a pure function over immutable values and is
safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Mapping

from .errors import ValidationError

NodeId = int     # zero-based node index
ChannelId = int  # one-based data-channel index


def destination_bits(num_nodes: int) -> int:
    """Width of the destination field: ceil(log2(num_nodes))."""
    if num_nodes < 2:
        raise ValidationError(f"need at least 2 nodes, got {num_nodes}")
    return (num_nodes - 1).bit_length()


def substream_width(num_nodes: int) -> int:
    """Total bits in one arbitration word: flow control, interest, destination."""
    return 2 + destination_bits(num_nodes)


@dataclass(frozen=True)
class SubStreamVector:
    """One node's per-round arbitration word.

    ``flow_control`` 0 means the emitter can accept data; ``interested`` 1
    means it wants to transmit to ``destination``. A word with
    ``interested == 0`` carries no meaningful destination, so the field is
    canonicalized to 0.
    """

    flow_control: int
    interested: int
    destination: NodeId = 0

    def __post_init__(self) -> None:
        if self.flow_control not in (0, 1):
            raise ValidationError(f"flow_control must be 0 or 1, got {self.flow_control!r}")
        if self.interested not in (0, 1):
            raise ValidationError(f"interested must be 0 or 1, got {self.interested!r}")
        if not isinstance(self.destination, int) or self.destination < 0:
            raise ValidationError(f"destination must be a non-negative int, got {self.destination!r}")
        if self.interested == 0 and self.destination != 0:
            object.__setattr__(self, "destination", 0)


def encode_substream(vector: SubStreamVector, num_nodes: int) -> str:
    """Render a word as bits: [flow_control, interested, destination big-endian]."""
    width = destination_bits(num_nodes)
    if vector.destination >= num_nodes:
        raise ValidationError(
            f"destination {vector.destination} out of range for {num_nodes} nodes"
        )
    return f"{vector.flow_control}{vector.interested}{vector.destination:0{width}b}"


def decode_substream(bits: str, num_nodes: int) -> SubStreamVector:
    """Inverse of :func:`encode_substream`.

    The destination field is range-checked even when the interest bit is
    clear, so codepoints unused by a non-power-of-two node count are
    rejected. Uninterested words come back with the canonical zero
    destination.
    """
    expected = substream_width(num_nodes)
    if len(bits) != expected:
        raise ValidationError(f"expected {expected} bits for {num_nodes} nodes, got {len(bits)}")
    if any(b not in "01" for b in bits):
        raise ValidationError(f"word {bits!r} contains non-binary characters")
    destination = int(bits[2:], 2)
    if destination >= num_nodes:
        raise ValidationError(f"destination {destination} out of range for {num_nodes} nodes")
    return SubStreamVector(int(bits[0]), int(bits[1]), destination)


@dataclass(frozen=True)
class FullStream:
    """All K arbitration words of one round, indexed by node id."""

    vectors: tuple[SubStreamVector, ...]

    def __post_init__(self) -> None:
        k = len(self.vectors)
        if k < 1:
            raise ValidationError("a full stream needs at least one word")
        for node, vector in enumerate(self.vectors):
            if vector.destination >= k:
                raise ValidationError(
                    f"node {node} targets node {vector.destination}, but only {k} nodes exist"
                )
            if vector.interested and vector.destination == node:
                raise ValidationError(f"node {node} requests a transfer to itself")

    def __len__(self) -> int:
        return len(self.vectors)

    def __getitem__(self, node: NodeId) -> SubStreamVector:
        return self.vectors[node]

    # Per-field tuples, cached because the winner scan reads them many times.
    @cached_property
    def flow_control(self) -> tuple[int, ...]:
        return tuple(v.flow_control for v in self.vectors)

    @cached_property
    def interested(self) -> tuple[int, ...]:
        return tuple(v.interested for v in self.vectors)

    @cached_property
    def destination(self) -> tuple[NodeId, ...]:
        return tuple(v.destination for v in self.vectors)


def assemble_full_stream(
    words: Mapping[NodeId, SubStreamVector], num_nodes: int
) -> FullStream:
    """Collect every node's word into one stream; pure reindexing.

    The result is independent of the mapping's insertion order.
    """
    if num_nodes < 1:
        raise ValidationError(f"need at least 1 node, got {num_nodes}")
    missing = [n for n in range(num_nodes) if n not in words]
    if missing:
        raise ValidationError(f"missing sub-stream for node(s) {missing}")
    if len(words) != num_nodes:
        extra = sorted(k for k in words if not (0 <= k < num_nodes))
        raise ValidationError(f"sub-streams for unknown node(s) {extra}")
    return FullStream(tuple(words[n] for n in range(num_nodes)))


@dataclass(frozen=True)
class PriorityMap:
    """Bijection rank -> node; rank 1 is highest and owns the lowest
    arbitration channel."""

    rank_to_node: tuple[NodeId, ...]

    def __post_init__(self) -> None:
        if sorted(self.rank_to_node) != list(range(len(self.rank_to_node))):
            raise ValidationError(
                f"priority map {self.rank_to_node} is not a permutation of node ids"
            )

    @classmethod
    def identity(cls, num_nodes: int) -> "PriorityMap":
        return cls(tuple(range(num_nodes)))

    def __len__(self) -> int:
        return len(self.rank_to_node)

    def __iter__(self) -> Iterator[NodeId]:
        return iter(self.rank_to_node)

    def node_at_rank(self, rank: int) -> NodeId:
        """Node holding 1-based rank ``rank``."""
        if not 1 <= rank <= len(self.rank_to_node):
            raise ValidationError(f"rank {rank} outside 1..{len(self.rank_to_node)}")
        return self.rank_to_node[rank - 1]

    def rank_of(self, node: NodeId) -> int:
        return self.rank_to_node.index(node) + 1

    def rotated(self) -> "PriorityMap":
        """The rank-1 holder moves to the back; everyone else moves up one."""
        order = self.rank_to_node
        return PriorityMap(order[1:] + order[:1])


@dataclass(frozen=True)
class WinnerRecord:
    """A source-destination pair that survived the scan.

    ``p`` counts the winning pairs with strictly higher priority, which is
    exactly this pair's zero-based position in win order.
    """

    source: NodeId
    destination: NodeId
    rank_position: int
    p: int


def scan_winners(
    stream: FullStream, pmap: PriorityMap, num_channels: int
) -> list[WinnerRecord]:
    """Scan requests in priority order and pick the winning pairs.

    A pair wins when the source is interested and its destination still
    reads as available; each win claims the destination by setting its
    flow-control state in a scratch copy, so a destination talks with at
    most one source per round. The scan stops once there are as many
    winners as data channels. The received stream is never mutated.
    """
    if len(stream) != len(pmap):
        raise ValidationError(
            f"stream has {len(stream)} words but priority map covers {len(pmap)} nodes"
        )
    if num_channels < 1:
        raise ValidationError(f"need at least 1 data channel, got {num_channels}")
    flow = list(stream.flow_control)
    interested = stream.interested
    destination = stream.destination
    winners: list[WinnerRecord] = []
    for rank, source in enumerate(pmap.rank_to_node, start=1):
        if not interested[source]:
            continue
        dest = destination[source]
        if flow[dest]:
            continue
        flow[dest] = 1
        winners.append(WinnerRecord(source, dest, rank, len(winners)))
        if len(winners) == num_channels:
            break
    return winners


def allocate_channels(p: int, q: int, num_channels: int) -> frozenset[ChannelId]:
    """Channel set for the winner preceded by ``p`` of ``q`` winning pairs.

    The q winners take interleaved sets: winner p owns channels p+1, p+1+q,
    p+1+2q, ... up to the channel count. Channel c therefore belongs to the
    winner with p = (c-1) mod q, so the q sets tile the whole channel range
    and no bandwidth is left idle.
    """
    if q < 1 or q > num_channels:
        raise ValidationError(f"winner count {q} outside 1..{num_channels}")
    if p < 0 or p >= q:
        raise ValidationError(f"higher-priority count {p} outside 0..{q - 1}")
    return frozenset(range(p + 1, num_channels + 1, q))


@dataclass(frozen=True)
class ChannelGrant:
    """One node's channel assignment for a single data cycle."""

    tx_channels: frozenset[ChannelId] = frozenset()
    rx_channels: frozenset[ChannelId] = frozenset()
    tx_peer: NodeId | None = None
    rx_peer: NodeId | None = None

    def __post_init__(self) -> None:
        if bool(self.tx_channels) != (self.tx_peer is not None):
            raise ValidationError("tx_channels and tx_peer must be set together")
        if bool(self.rx_channels) != (self.rx_peer is not None):
            raise ValidationError("rx_channels and rx_peer must be set together")

    @property
    def is_empty(self) -> bool:
        return not self.tx_channels and not self.rx_channels


EMPTY_GRANT = ChannelGrant()


def compute_grant(
    stream: FullStream, pmap: PriorityMap, num_channels: int, me: NodeId
) -> ChannelGrant:
    """One node's local view of the round.

    Runs the shared winner scan and keeps the channels where ``me``
    transmits or receives. Losers and idle nodes get an empty grant; a node
    may hold TX and RX channels in the same cycle (full duplex).
    """
    if not 0 <= me < len(stream):
        raise ValidationError(f"node {me} outside 0..{len(stream) - 1}")
    winners = scan_winners(stream, pmap, num_channels)
    q = len(winners)
    tx: frozenset[ChannelId] = frozenset()
    rx: frozenset[ChannelId] = frozenset()
    tx_peer: NodeId | None = None
    rx_peer: NodeId | None = None
    for winner in winners:
        if winner.source == me:
            tx = allocate_channels(winner.p, q, num_channels)
            tx_peer = winner.destination
        if winner.destination == me:
            rx = allocate_channels(winner.p, q, num_channels)
            rx_peer = winner.source
    return ChannelGrant(tx, rx, tx_peer, rx_peer)


def compute_all_grants(
    stream: FullStream, pmap: PriorityMap, num_channels: int
) -> dict[NodeId, ChannelGrant]:
    """Run the per-node computation for every node, as each node would locally.

    Cross-node consistency (matching TX/RX sets, disjoint channel use) is a
    property of the algorithm, not of this function; the tests check it.
    """
    return {n: compute_grant(stream, pmap, num_channels, n) for n in range(len(stream))}


def rfi_allocate(
    stream: FullStream, pmap: PriorityMap, num_channels: int
) -> dict[NodeId, ChannelGrant]:
    """Single-channel baseline allocator.

    Same winner scan as the dynamic allocator, but the winner in win-order
    position p transmits on channel p+1 only, and its destination mirrors
    that single channel. Bandwidth on unclaimed channels is simply wasted.
    """
    winners = scan_winners(stream, pmap, num_channels)
    tx_part: dict[NodeId, tuple[frozenset[ChannelId], NodeId]] = {}
    rx_part: dict[NodeId, tuple[frozenset[ChannelId], NodeId]] = {}
    for winner in winners:
        channel = frozenset((winner.p + 1,))
        tx_part[winner.source] = (channel, winner.destination)
        rx_part[winner.destination] = (channel, winner.source)
    grants: dict[NodeId, ChannelGrant] = {}
    for node in range(len(stream)):
        tx, tx_peer = tx_part.get(node, (frozenset(), None))
        rx, rx_peer = rx_part.get(node, (frozenset(), None))
        grants[node] = ChannelGrant(tx, rx, tx_peer, rx_peer)
    return grants
