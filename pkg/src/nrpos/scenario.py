"""Immutable simulation world: nodes, antenna panels, carriers, clocks, seeds.

A scenario is built once from a JSON document and never mutated. Every
random draw elsewhere in the package goes through :func:`derive_rng`, which
keys an independent stream by ``(seed, label, index)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Any, Mapping

import numpy as np

SPEED_OF_LIGHT = 299792458.0  # m/s


class ScenarioError(ValueError):
    """Raised when a scenario document violates an invariant."""


class ScenarioParseError(ScenarioError):
    """Raised when a scenario document cannot be parsed at all."""


class NodeKind(str, Enum):
    TRP = "TRP"
    UE = "UE"
    PRU = "PRU"
    SL_ANCHOR_UE = "SL_ANCHOR_UE"
    SL_TARGET_UE = "SL_TARGET_UE"


class Side(str, Enum):
    TX = "TX"
    RX = "RX"


@dataclass(frozen=True)
class Position3D:
    x: float
    y: float
    z: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ScenarioError(f"non-finite coordinate {name}={value!r}")
            object.__setattr__(self, name, value)

    @classmethod
    def of(cls, xyz) -> "Position3D":
        xyz = list(xyz)
        if len(xyz) == 2:
            xyz.append(0.0)
        if len(xyz) != 3:
            raise ScenarioError(f"position needs 2 or 3 coordinates, got {len(xyz)}")
        return cls(*xyz)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def __add__(self, other: "Position3D") -> "Position3D":
        return Position3D(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other: "Position3D") -> "Position3D":
        return Position3D(self.x - other.x, self.y - other.y, self.z - other.z)


ORIGIN = Position3D(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AntennaPanel:
    arp_id: str
    offset: Position3D = ORIGIN
    tx_phase_bias_deg: float = 0.0
    rx_phase_bias_deg: float = 0.0
    drift_deg_per_s: float = 0.0

    def __post_init__(self):
        for name in ("tx_phase_bias_deg", "rx_phase_bias_deg", "drift_deg_per_s"):
            if not math.isfinite(getattr(self, name)):
                raise ScenarioError(f"panel {self.arp_id}: non-finite {name}")


@dataclass(frozen=True)
class Node:
    node_id: str
    kind: NodeKind
    position: Position3D
    panels: tuple[AntennaPanel, ...]
    clock_offset_s: float = 0.0
    clock_drift_ppm: float = 0.0
    sync_source_id: str | None = None
    # PFL id -> arp_id used for reception on that layer
    pfl_panels: Mapping[str, str] = field(default_factory=lambda: MappingProxyType({}))

    def __post_init__(self):
        if not self.panels:
            raise ScenarioError(f"node {self.node_id} has no antenna panels")
        ids = [p.arp_id for p in self.panels]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"node {self.node_id}: duplicate arp_id in {ids}")
        for pfl, arp in self.pfl_panels.items():
            if arp not in ids:
                raise ScenarioError(f"node {self.node_id}: PFL {pfl} selects unknown ARP {arp}")

    @property
    def known_position(self) -> bool:
        """Whether the location server may treat this node's position as known."""
        return self.kind in (NodeKind.TRP, NodeKind.PRU, NodeKind.SL_ANCHOR_UE)

    def panel(self, arp_id: str | None = None) -> AntennaPanel:
        if arp_id is None:
            return self.panels[0]
        for p in self.panels:
            if p.arp_id == arp_id:
                return p
        raise KeyError(f"node {self.node_id} has no panel {arp_id!r}")

    def panel_for_pfl(self, pfl_id: str) -> AntennaPanel:
        return self.panel(self.pfl_panels.get(pfl_id))

    def arp_position(self, arp_id: str | None = None) -> Position3D:
        return self.position + self.panel(arp_id).offset


@dataclass(frozen=True)
class Scenario:
    nodes: tuple[Node, ...]
    carrier_frequencies: Mapping[str, float]
    seed: int = 0
    same_oscillator: bool = False
    sync_sources: Mapping[str, float] = field(default_factory=lambda: MappingProxyType({}))
    speed_of_light: float = SPEED_OF_LIGHT

    def __post_init__(self):
        ids = [n.node_id for n in self.nodes]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ScenarioError(f"duplicate node ids: {dupes}")
        for pfl, f in self.carrier_frequencies.items():
            if not (math.isfinite(f) and f > 0):
                raise ScenarioError(f"PFL {pfl}: carrier frequency must be positive, got {f}")
        for n in self.nodes:
            for pfl in n.pfl_panels:
                if pfl not in self.carrier_frequencies:
                    raise ScenarioError(f"node {n.node_id} references PFL {pfl!r} with no frequency")
            if self.same_oscillator:
                for p in n.panels:
                    if p.tx_phase_bias_deg != p.rx_phase_bias_deg:
                        raise ScenarioError(
                            f"same_oscillator requires equal Tx/Rx bias on {n.node_id}/{p.arp_id}"
                        )
        if not 0 <= self.seed < 2**64:
            raise ScenarioError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        # freeze mappings handed in as plain dicts
        object.__setattr__(self, "carrier_frequencies", MappingProxyType(dict(self.carrier_frequencies)))
        object.__setattr__(self, "sync_sources", MappingProxyType(dict(self.sync_sources)))
        object.__setattr__(self, "_index", {n.node_id: n for n in self.nodes})

    def node(self, node_id: str) -> Node:
        try:
            return self._index[node_id]
        except KeyError:
            raise KeyError(f"unknown node {node_id!r}") from None

    def nodes_of(self, *kinds: NodeKind) -> list[Node]:
        return [n for n in self.nodes if n.kind in kinds]

    def frequency(self, pfl_id: str) -> float:
        try:
            return self.carrier_frequencies[pfl_id]
        except KeyError:
            raise KeyError(f"unknown PFL {pfl_id!r}") from None

    def wavelength(self, pfl_id: str) -> float:
        return wavelength(self.frequency(pfl_id), self.speed_of_light)

    def time_offset(self, node_id: str) -> float:
        """Total clock error of a node: its own offset plus its sync source's."""
        n = self.node(node_id)
        return n.clock_offset_s + self.sync_sources.get(n.sync_source_id, 0.0)

    def rng(self, label: str, index: int = 0) -> np.random.Generator:
        return derive_rng(self.seed, label, index)

    def with_seed(self, seed: int) -> "Scenario":
        return Scenario(
            nodes=self.nodes,
            carrier_frequencies=self.carrier_frequencies,
            seed=seed,
            same_oscillator=self.same_oscillator,
            sync_sources=self.sync_sources,
            speed_of_light=self.speed_of_light,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "carrier_frequencies": dict(self.carrier_frequencies),
            "seed": self.seed,
            "same_oscillator": self.same_oscillator,
            "sync_sources": dict(self.sync_sources),
            "nodes": [_node_to_dict(n) for n in self.nodes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _node_to_dict(n: Node) -> dict[str, Any]:
    return {
        "id": n.node_id,
        "kind": n.kind.value,
        "position": [n.position.x, n.position.y, n.position.z],
        "panels": [
            {
                "arp_id": p.arp_id,
                "offset": [p.offset.x, p.offset.y, p.offset.z],
                "tx_bias_deg": p.tx_phase_bias_deg,
                "rx_bias_deg": p.rx_phase_bias_deg,
                "drift_deg_per_s": p.drift_deg_per_s,
            }
            for p in n.panels
        ],
        "clock_offset_s": n.clock_offset_s,
        "clock_drift_ppm": n.clock_drift_ppm,
        "sync_source": n.sync_source_id,
        "pfl_panels": dict(n.pfl_panels),
    }


def derive_rng(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Independent generator for one consumer.

    The stream depends only on ``(seed, label, index)``, so adding a new
    consumer with a fresh label never shifts the draws of existing ones.
    """
    key = int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, int(index)]))


def distance(a: Position3D, b: Position3D) -> float:
    return math.sqrt((a.x - b.x) ** 2 + (a.y - b.y) ** 2 + (a.z - b.z) ** 2)


def wavelength(frequency_hz: float, c: float = SPEED_OF_LIGHT) -> float:
    if not frequency_hz > 0:
        raise ValueError(f"frequency must be positive, got {frequency_hz}")
    return c / frequency_hz


def sample_phase_bias(node: Node, arp_id: str | None, side: Side | str, time_s: float) -> float:
    """Phase bias of one panel side at ``time_s``, in unwrapped degrees."""
    try:
        panel = node.panel(arp_id)
    except KeyError as exc:
        raise ScenarioError(str(exc)) from None
    side = Side(side)
    base = panel.tx_phase_bias_deg if side is Side.TX else panel.rx_phase_bias_deg
    return base + panel.drift_deg_per_s * time_s


def _parse_panel(raw: Mapping[str, Any], node_id: str) -> AntennaPanel:
    try:
        return AntennaPanel(
            arp_id=str(raw["arp_id"]),
            offset=Position3D.of(raw.get("offset", (0.0, 0.0, 0.0))),
            tx_phase_bias_deg=float(raw.get("tx_bias_deg", 0.0)),
            rx_phase_bias_deg=float(raw.get("rx_bias_deg", 0.0)),
            drift_deg_per_s=float(raw.get("drift_deg_per_s", 0.0)),
        )
    except KeyError as exc:
        raise ScenarioError(f"node {node_id}: panel missing {exc}") from None


def _parse_node(raw: Mapping[str, Any]) -> Node:
    try:
        node_id = str(raw["id"])
        kind = NodeKind(raw["kind"])
        position = Position3D.of(raw["position"])
    except KeyError as exc:
        raise ScenarioError(f"node entry missing {exc}") from None
    except ValueError as exc:
        raise ScenarioError(f"bad node entry {raw.get('id')!r}: {exc}") from None
    panels = tuple(_parse_panel(p, node_id) for p in raw.get("panels", ()))
    sync = raw.get("sync_source")
    return Node(
        node_id=node_id,
        kind=kind,
        position=position,
        panels=panels,
        clock_offset_s=float(raw.get("clock_offset_s", 0.0)),
        clock_drift_ppm=float(raw.get("clock_drift_ppm", 0.0)),
        sync_source_id=None if sync is None else str(sync),
        pfl_panels=MappingProxyType({str(k): str(v) for k, v in raw.get("pfl_panels", {}).items()}),
    )


def build_scenario(config: str | bytes | Mapping[str, Any], seed: int | None = None) -> Scenario:
    """Build a validated, immutable scenario from a JSON document.

    ``config`` may be JSON text or an already-decoded mapping. ``seed``
    overrides the document's own seed.
    """
    if isinstance(config, (str, bytes)):
        try:
            config = json.loads(config)
        except json.JSONDecodeError as exc:
            raise ScenarioParseError(f"malformed scenario document: {exc}") from None
    if not isinstance(config, Mapping):
        raise ScenarioParseError("scenario document must be a JSON object")
    try:
        freqs = {str(k): float(v) for k, v in config["carrier_frequencies"].items()}
        nodes_raw = config["nodes"]
    except KeyError as exc:
        raise ScenarioError(f"scenario document missing {exc}") from None
    except (AttributeError, TypeError, ValueError) as exc:
        raise ScenarioError(f"bad carrier_frequencies: {exc}") from None
    nodes = tuple(_parse_node(n) for n in nodes_raw)
    return Scenario(
        nodes=nodes,
        carrier_frequencies=freqs,
        seed=int(config.get("seed", 0) if seed is None else seed),
        same_oscillator=bool(config.get("same_oscillator", False)),
        sync_sources={str(k): float(v) for k, v in config.get("sync_sources", {}).items()},
    )


def load_scenario(path: str | Path, seed: int | None = None) -> Scenario:
    text = Path(path).read_text(encoding="utf-8")
    return build_scenario(text, seed=seed)
