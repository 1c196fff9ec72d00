"""Execution contexts: per-activation scheduling metadata.

Every field of the activation metadata is optional. Missing values are
inferred so that a plain action-proxy request becomes a flight of one led
by the local container.
"""

from __future__ import annotations

import logging
import uuid
from collections.abc import Mapping
from dataclasses import dataclass, replace
from typing import Any

from .errors import InvalidMetadata, InvalidOffset, NotALeader, UnknownMaskedFunction
from .manifest import ActionManifest, FunctionMask

log = logging.getLogger(__name__)

METADATA_FIELDS = ("offset", "mask", "flight_size", "leader_address")


@dataclass(frozen=True)
class ExecutionContext:
    offset: int
    mask: FunctionMask
    flight_size: int
    leader_address: str | None
    activation_id: str
    local_address: str | None = None

    def __post_init__(self) -> None:
        if self.flight_size < 1:
            raise InvalidMetadata(f"flight_size must be >= 1, got {self.flight_size}")
        if not 0 <= self.offset < self.flight_size:
            raise InvalidOffset(f"offset {self.offset} outside [0, {self.flight_size})")

    @property
    def is_leader(self) -> bool:
        return self.offset == 0 and self.leader_address is not None and self.leader_address == self.local_address

    @property
    def member_id(self) -> str:
        """Activation id qualified by offset; unique per flight member."""
        return f"{self.activation_id}.{self.offset}"

    def to_metadata(self) -> dict[str, Any]:
        return {
            "activation_id": self.activation_id,
            "offset": self.offset,
            "mask": self.mask.sorted(),
            "flight_size": self.flight_size,
            "leader_address": self.leader_address,
        }


def _int_field(metadata: Mapping[str, Any], key: str, minimum: int) -> int | None:
    value = metadata.get(key)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidMetadata(f"{key} must be an integer, got {value!r}")
    if value < minimum:
        raise InvalidMetadata(f"{key} must be >= {minimum}, got {value}")
    return value


def infer_context(
    metadata: Mapping[str, Any] | None,
    manifest: ActionManifest,
    local_address: str,
    activation_id: str | None = None,
) -> ExecutionContext:
    metadata = metadata or {}
    offset = _int_field(metadata, "offset", 0)
    flight_size = _int_field(metadata, "flight_size", 1)
    leader_address = metadata.get("leader_address")
    if leader_address is not None and (not isinstance(leader_address, str) or not leader_address):
        raise InvalidMetadata(f"leader_address must be a host:port string, got {leader_address!r}")

    raw_mask = metadata.get("mask")
    if raw_mask is None:
        mask = FunctionMask.of(manifest.names)
    else:
        if isinstance(raw_mask, str):
            raw_mask = [raw_mask]
        if not isinstance(raw_mask, (list, tuple)) or not raw_mask or not all(isinstance(n, str) for n in raw_mask):
            raise InvalidMetadata(f"mask must be a non-empty list of function names, got {raw_mask!r}")
        unknown = sorted(set(raw_mask) - set(manifest.names))
        if unknown:
            raise UnknownMaskedFunction(f"mask names functions absent from the manifest: {unknown}")
        mask = FunctionMask.of(raw_mask)

    if offset is None:
        offset = 0
    if offset == 0:
        if leader_address is not None and leader_address != local_address:
            log.warning("offset 0 request named remote leader %s; acting as leader", leader_address)
        leader_address = local_address
    if flight_size is None:
        # followers are often forked without a size; the smallest consistent one
        flight_size = offset + 1
    if offset >= flight_size:
        raise InvalidOffset(f"offset {offset} is not below flight_size {flight_size}")

    act = metadata.get("activation_id") or activation_id or uuid.uuid4().hex
    return ExecutionContext(
        offset=offset,
        mask=mask,
        flight_size=flight_size,
        leader_address=leader_address,
        activation_id=str(act),
        local_address=local_address,
    )


def make_follower_contexts(leader: ExecutionContext) -> list[ExecutionContext]:
    if not leader.is_leader:
        raise NotALeader(f"context at offset {leader.offset} cannot fork followers")
    return [
        replace(leader, offset=i, local_address=None)
        for i in range(1, leader.flight_size)
    ]
