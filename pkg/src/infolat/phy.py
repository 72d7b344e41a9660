"""Radio abstraction: resource grid, log-distance channel and collision rule.

A packet occupies one 1 ms subframe and ``packet_span`` contiguous
sub-channels.  Two packets whose sub-channel sets intersect in the same
subframe are both lost; survivors are received iff their SNR (after a
log-normal shadowing draw) clears a threshold.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Hashable, Sequence

import numpy as np


@dataclass(frozen=True)
class ResourceGrid:
    subframe_ms: int = 1
    n_subchannels: int = 4
    packet_span: int = 2

    def __post_init__(self):
        if self.packet_span <= 0 or self.packet_span > self.n_subchannels:
            raise ValueError("packet_span must be in [1, n_subchannels]")

    @property
    def starts(self) -> tuple[int, ...]:
        """Aligned sub-channel starts a packet may use."""
        return tuple(range(0, self.n_subchannels - self.packet_span + 1, self.packet_span))

    @property
    def max_packets(self) -> int:
        return self.n_subchannels // self.packet_span

    def validate_start(self, start: int) -> None:
        if start < 0 or start + self.packet_span > self.n_subchannels:
            raise ValueError(f"sub-channel range [{start}, {start + self.packet_span}) outside grid")

    def overlaps(self, a: int, b: int) -> bool:
        return abs(a - b) < self.packet_span


def _default_pl_b() -> float:
    return 41.0 + 20.0 * math.log10(5.9 / 5.0)


@dataclass(frozen=True)
class ChannelModel:
    carrier_ghz: float = 5.9
    tx_power_dbm: float = 23.0
    shadowing_sigma_db: float = 6.0
    pl_a: float = 22.7
    pl_b: float = field(default_factory=_default_pl_b)
    bandwidth_mhz: float = 10.0
    noise_figure_db: float = 9.0
    snr_threshold_db: float = 2.5
    shadowing: bool = True
    # "snr": collisions plus threshold reception; "collision": collisions only
    reception: str = "snr"
    # extra i.i.d. delivery probability; 0 forces a dead channel
    delivery_prob: float = 1.0

    def __post_init__(self):
        if self.reception not in ("snr", "collision"):
            raise ValueError(f"unknown reception mode {self.reception!r}")
        if not 0.0 <= self.delivery_prob <= 1.0:
            raise ValueError("delivery_prob must lie in [0, 1]")
        if self.shadowing_sigma_db < 0:
            raise ValueError("shadowing_sigma_db must be non-negative")

    @property
    def noise_floor_dbm(self) -> float:
        return -174.0 + 10.0 * math.log10(self.bandwidth_mhz * 1e6) + self.noise_figure_db

    @property
    def link_budget_db(self) -> float:
        """Largest path loss (no shadowing) that still meets the SNR threshold."""
        return self.tx_power_dbm - self.noise_floor_dbm - self.snr_threshold_db

    def to_dict(self) -> dict:
        return asdict(self)


def pathloss_db(d: float, ch: ChannelModel) -> float:
    """``A log10(d) + B`` with the distance clamped to at least 1 m."""
    return ch.pl_a * math.log10(max(float(d), 1.0)) + ch.pl_b


def received_power_dbm(d: float, ch: ChannelModel, shadow_db: float = 0.0) -> float:
    return ch.tx_power_dbm - pathloss_db(d, ch) - shadow_db


def snr_db(d: float, ch: ChannelModel, shadow_db: float = 0.0) -> float:
    return received_power_dbm(d, ch, shadow_db) - ch.noise_floor_dbm


def range_for_snr(ch: ChannelModel, margin_db: float = 0.0) -> float:
    """Distance at which the mean SNR equals threshold + margin."""
    return 10.0 ** ((ch.link_budget_db - margin_db - ch.pl_b) / ch.pl_a)


class Outcome(enum.Enum):
    DELIVERED = "delivered"
    COLLISION = "collision"
    RANGE = "range"
    HALF_DUPLEX = "half_duplex"


@dataclass(frozen=True)
class TransmissionAttempt:
    """One (sender, receiver) link of a physical transmission.

    Attempts that share a sender in the same subframe are the same physical
    packet (a broadcast heard by several receivers) and never collide with
    each other.
    """

    sender: Hashable
    receiver: Hashable | None
    subframe: int
    subchannel: int
    distance_m: float
    capture_time: float = 0.0
    payload: object = None


def resolve_subframe(
    attempts: Sequence[TransmissionAttempt],
    ch: ChannelModel,
    rng: np.random.Generator,
    grid: ResourceGrid | None = None,
) -> list[Outcome]:
    grid = grid or ResourceGrid()
    if not attempts:
        return []
    sf = attempts[0].subframe
    starts: dict = {}
    for a in attempts:
        if a.subframe != sf:
            raise ValueError("all attempts must share one subframe")
        grid.validate_start(a.subchannel)
        prev = starts.setdefault(a.sender, a.subchannel)
        if prev != a.subchannel:
            raise ValueError(f"sender {a.sender!r} uses two sub-channel ranges in one subframe")

    senders = list(starts)
    collided = {
        s: any(grid.overlaps(starts[s], starts[o]) for o in senders if o != s) for s in senders
    }
    out = []
    for a in attempts:
        if collided[a.sender]:
            out.append(Outcome.COLLISION)
            continue
        if a.receiver is not None and a.receiver in starts:
            out.append(Outcome.HALF_DUPLEX)
            continue
        ok = True
        if ch.reception == "snr":
            shadow = rng.normal(0.0, ch.shadowing_sigma_db) if ch.shadowing else 0.0
            ok = snr_db(a.distance_m, ch, shadow) >= ch.snr_threshold_db
        if ok and ch.delivery_prob < 1.0:
            ok = rng.random() < ch.delivery_prob
        out.append(Outcome.DELIVERED if ok else Outcome.RANGE)
    return out
