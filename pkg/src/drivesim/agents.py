"""Agent specifications, the built-in social agent zoo and action adapters."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .sensing import StackedObservation
from .traffic import IDM
from .vehicle import ActuatorDynamic, Continuous, LaneFollowing, Trajectory

DISCRETE_ACTIONS = ("keep_lane", "slow_down", "turn_left", "turn_right")
SLOW_DOWN_STEP = 2.5
ACTION_SPACES = ("Continuous", "ActuatorDynamic", "Trajectory", "LaneFollowing", "Discrete4")
# lateral window treated as "same lane" by the scripted rule, ego frame
SAME_LANE_HALF_WIDTH = 1.75
EGO_LENGTH = 4.6


class AgentError(RuntimeError):
    """An agent could not be built or contacted."""


@dataclass(frozen=True)
class AgentInterface:
    neighbors: bool = True
    bev: bool = True
    waypoints: bool = True
    action_space: str = "LaneFollowing"
    max_episode_steps: int | None = None

    def __post_init__(self):
        if self.action_space not in ACTION_SPACES:
            raise ValueError(f"unknown action space {self.action_space!r}")


@dataclass(frozen=True)
class AgentSpec:
    interface: AgentInterface
    policy_ref: str
    observation_adapter: str = "identity"
    action_adapter: str = "identity"
    reward_adapter: str = "identity"
    info_adapter: str = "identity"


@dataclass(frozen=True)
class ZooEntry:
    name: str
    factory: Callable[[], "Agent"]
    interface: AgentInterface
    description: str = ""
    author: str = "drivesim"


# --- adapters ------------------------------------------------------------------

OBSERVATION_ADAPTERS: dict[str, Callable] = {"identity": lambda obs: obs}
ACTION_ADAPTERS: dict[str, Callable] = {"identity": lambda action: action}
REWARD_ADAPTERS: dict[str, Callable] = {
    "identity": lambda obs, reward: reward,
    "clipped": lambda obs, reward: max(-1.0, min(1.0, reward)),
}
INFO_ADAPTERS: dict[str, Callable] = {"identity": lambda info: info}


def discrete_action_adapter(action: str, speed: float, lane_limit: float,
                            current_target: float | None = None) -> LaneFollowing:
    """Map one of the four discrete actions onto a lane-following command."""
    if action == "keep_lane":
        return LaneFollowing(lane_limit, 0)
    if action == "slow_down":
        return LaneFollowing(max(0.0, speed - SLOW_DOWN_STEP), 0)
    target = lane_limit if current_target is None else current_target
    if action == "turn_left":
        return LaneFollowing(target, 1)
    if action == "turn_right":
        return LaneFollowing(target, -1)
    raise ValueError(f"unknown discrete action {action!r}")


def to_command(action, speed: float, lane_limit: float, current_target: float | None = None):
    """Normalize an agent action (discrete symbol or command) to a vehicle command."""
    if isinstance(action, str):
        return discrete_action_adapter(action, speed, lane_limit, current_target)
    if isinstance(action, (Continuous, ActuatorDynamic, Trajectory, LaneFollowing)):
        return action
    raise TypeError(f"unsupported action {action!r}")


# --- built-in policies -----------------------------------------------------------

class Agent:
    """Base class: map a stacked observation to an action."""

    interface = AgentInterface()

    def act(self, obs: StackedObservation):
        raise NotImplementedError

    def close(self):
        pass


class KeepLaneAgent(Agent):
    """Drive at the speed limit in the current lane."""

    interface = AgentInterface(action_space="LaneFollowing")

    def act(self, obs):
        return LaneFollowing(obs.latest.speed_limit, 0)


class ConservativeRuleAgent(Agent):
    """Slow down while the same-lane vehicle ahead is inside a two-headway gap."""

    interface = AgentInterface(action_space="Discrete4")

    def __init__(self, headway: float = IDM.headway, min_gap: float = IDM.min_gap):
        self.headway = headway
        self.min_gap = min_gap

    def act(self, obs):
        f = obs.latest
        ahead = [n.dx - EGO_LENGTH for n in f.neighbors
                 if n.dx > 0.0 and abs(n.dy) < SAME_LANE_HALF_WIDTH]
        if ahead and min(ahead) < max(2.0 * f.speed * self.headway, self.min_gap):
            return "slow_down"
        return "keep_lane"


class ConstantAgent(Agent):
    """Return the same action every step (test helper)."""

    def __init__(self, action="keep_lane"):
        self.action = action
        space = "Discrete4" if isinstance(action, str) else type(action).__name__
        self.interface = AgentInterface(action_space=space)

    def act(self, obs):
        return self.action


class Zoo:
    """Named registry of agent factories plus optional remote endpoints."""

    def __init__(self):
        self.entries: dict[str, ZooEntry] = {}
        self.endpoints: dict[str, str] = {}

    def register(self, name: str, factory, interface: AgentInterface, description: str = "",
                 author: str = "drivesim"):
        if name in self.entries or name in self.endpoints:
            raise ValueError(f"zoo entry {name!r} already registered")
        self.entries[name] = ZooEntry(name, factory, interface, description, author)

    def add_endpoint(self, name: str, address: str):
        if name in self.entries or name in self.endpoints:
            raise ValueError(f"zoo entry {name!r} already registered")
        parse_address(address)
        self.endpoints[name] = address

    def load_manifest(self, path):
        """Read a JSON manifest ``{"endpoints": {name: "host:port"}}``."""
        doc = json.loads(Path(path).read_text())
        for name, address in sorted(doc.get("endpoints", {}).items()):
            self.add_endpoint(name, address)

    def __contains__(self, ref: str) -> bool:
        return ref in self.entries or ref in self.endpoints or ref.startswith("remote:")

    def spec(self, ref: str) -> AgentSpec:
        if ref in self.entries:
            return AgentSpec(self.entries[ref].interface, ref)
        if ref in self:
            return AgentSpec(AgentInterface(), ref)
        raise AgentError(f"unknown agent {ref!r}")

    def build(self, ref: str) -> Agent:
        return build_agent(self.spec(ref), self)

    def names(self) -> list[str]:
        return sorted(set(self.entries) | set(self.endpoints))


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"bad endpoint address {address!r}, expected host:port")
    return host, int(port)


def build_agent(spec: AgentSpec, zoo: Zoo) -> Agent:
    """Instantiate an agent; remote references open a protocol session."""
    ref = spec.policy_ref
    if ref in zoo.entries:
        return zoo.entries[ref].factory()
    address = zoo.endpoints.get(ref)
    if address is None and ref.startswith("remote:"):
        address = ref[len("remote:"):]
    if address is None:
        raise AgentError(f"unknown agent {ref!r}")
    from .protocol import RemoteAgent
    host, port = parse_address(address)
    return RemoteAgent(host, port, name=ref)


def default_zoo() -> Zoo:
    zoo = Zoo()
    zoo.register("keep_lane", KeepLaneAgent, KeepLaneAgent.interface,
                 "follow the current lane at the speed limit")
    zoo.register("conservative_rule", ConservativeRuleAgent, ConservativeRuleAgent.interface,
                 "keep lane, slow down when the gap ahead is short")
    zoo.register("brake", lambda: ConstantAgent("slow_down"), AgentInterface(action_space="Discrete4"),
                 "always slow down")
    return zoo


def is_finite(*values) -> bool:
    return all(isinstance(v, (int, float)) and math.isfinite(v) for v in values)
