"""Constants and tunables shared across the package."""

from __future__ import annotations

from dataclasses import dataclass

# Smallest prime above 2**128; the committed secrets are 128-bit values.
SHAMIR_PRIME = 2**128 + 51
# Tiny field for hand-checkable vectors.
SMALL_PRIME = 257


@dataclass(frozen=True)
class ProtocolConfig:
    """Per-scenario protocol knobs.  Timeouts are multiples of the nominal hop delay."""

    branching: int = 2
    fallback_threshold: int = 3
    fallback_duration: int = 50
    child_timeout: float = 4.0
    client_timeout: float = 10.0
    request_timeout: float = 40.0
    view_change_timeout: float = 30.0
    suspect_settle: float = 1.0
    gap_timeout: float = 6.0
    probe_window: float = 4.0
    rejoin_retry: float = 5.0
    checkpoint_interval: int = 10
    preprocess_batch: int = 16
    crypto: str = "fast"

    def __post_init__(self) -> None:
        if self.branching < 1:
            raise ValueError("branching factor must be >= 1")
        if self.preprocess_batch < 2 or self.preprocess_batch % 2:
            raise ValueError("preprocess_batch must be a positive even number")
        if self.fallback_threshold < 1:
            raise ValueError("fallback_threshold must be >= 1")
