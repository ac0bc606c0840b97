"""Vehicle provider: kinematic bicycle dynamics and controller abstractions.

Four action spaces drive a vehicle: direct throttle/brake/steering
(:class:`Continuous`), throttle/brake with a steering *rate*
(:class:`ActuatorDynamic`), a timed trajectory (:class:`Trajectory`), and
lane following with a target speed and a lane-change request
(:class:`LaneFollowing`). The last two are reduced to :class:`Continuous`
commands by the trackers in this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

from .road import Lane, RoadNetwork, lane_to_world, wrap_angle

#: Global simulation timestep (s).
DT = 0.1

LOOKAHEAD_GAIN = 0.8
LOOKAHEAD_MIN = 3.0
LOOKAHEAD_MAX = 15.0
LANE_CHANGE_DURATION = 3.0
SPEED_GAIN = 1.5


@dataclass(frozen=True)
class VehicleModel:
    wheelbase: float = 2.8
    max_steer: float = 0.5
    max_accel: float = 3.0
    max_brake: float = 8.0
    max_steer_rate: float = 1.0
    max_speed: float = 30.0
    length: float = 4.6
    width: float = 1.8

    def __post_init__(self):
        for name in ("wheelbase", "max_steer", "max_accel", "max_brake",
                     "max_steer_rate", "max_speed", "length", "width"):
            if not getattr(self, name) > 0:
                raise ValueError(f"VehicleModel.{name} must be strictly positive")

    @classmethod
    def from_dict(cls, d: dict | None) -> "VehicleModel":
        if not d:
            return cls()
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown vehicle model keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


DEFAULT_MODEL = VehicleModel()


@dataclass(frozen=True)
class VehicleState:
    id: str
    x: float
    y: float
    heading: float
    speed: float = 0.0
    accel: float = 0.0
    steering: float = 0.0
    length: float = DEFAULT_MODEL.length
    width: float = DEFAULT_MODEL.width
    owner: str = "traffic"


@dataclass(frozen=True)
class Continuous:
    throttle: float = 0.0
    brake: float = 0.0
    steering: float = 0.0


@dataclass(frozen=True)
class ActuatorDynamic:
    throttle: float = 0.0
    brake: float = 0.0
    steering_rate: float = 0.0


@dataclass(frozen=True)
class TrajectoryPoint:
    x: float
    y: float
    heading: float
    speed: float
    time: float


@dataclass(frozen=True)
class Trajectory:
    points: tuple[TrajectoryPoint, ...]

    def __post_init__(self):
        times = [p.time for p in self.points]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("trajectory times must be strictly increasing")


@dataclass(frozen=True)
class LaneFollowing:
    target_speed: float
    lane_change: int = 0


ControlCommand = Union[Continuous, ActuatorDynamic, Trajectory, LaneFollowing]

FULL_BRAKE = Continuous(0.0, 1.0, 0.0)


def _clamp(v, lo, hi):
    return lo if v < lo else hi if v > hi else v


def clamp_command(cmd):
    """Clamp a command into its valid ranges.

    Returns ``(command, clamped)`` where ``clamped`` says whether anything
    had to change.
    """
    if isinstance(cmd, Continuous):
        out = Continuous(_clamp(cmd.throttle, 0.0, 1.0), _clamp(cmd.brake, 0.0, 1.0),
                         _clamp(cmd.steering, -1.0, 1.0))
    elif isinstance(cmd, ActuatorDynamic):
        out = ActuatorDynamic(_clamp(cmd.throttle, 0.0, 1.0), _clamp(cmd.brake, 0.0, 1.0),
                              cmd.steering_rate)
    elif isinstance(cmd, LaneFollowing):
        out = LaneFollowing(max(0.0, cmd.target_speed), int(_clamp(int(cmd.lane_change), -1, 1)))
    else:
        return cmd, False
    return out, out != cmd


def _advance(state: VehicleState, model: VehicleModel, steer: float, accel: float,
             dt: float) -> VehicleState:
    # Exact arc integration for constant steering over the step: the path is
    # a circle of radius wheelbase/tan(steer), so step size never biases it.
    v0 = state.speed
    v1 = v0 + accel * dt
    if v1 < 0.0:
        # stops inside the step
        dist = 0.5 * v0 * (v0 / -accel) if accel < 0.0 else 0.0
        v1 = 0.0
    else:
        if v1 > model.max_speed:
            v1 = model.max_speed
        dist = 0.5 * (v0 + v1) * dt
    curvature = math.tan(steer) / model.wheelbase
    dtheta = dist * curvature
    h0 = state.heading
    if abs(dtheta) > 1e-12:
        r = 1.0 / curvature
        x = state.x + r * (math.sin(h0 + dtheta) - math.sin(h0))
        y = state.y - r * (math.cos(h0 + dtheta) - math.cos(h0))
    else:
        x = state.x + dist * math.cos(h0)
        y = state.y + dist * math.sin(h0)
    return replace(state, x=x, y=y, heading=wrap_angle(h0 + dtheta), speed=v1,
                   accel=(v1 - v0) / dt, steering=steer)


def integrate_continuous(state: VehicleState, model: VehicleModel, cmd: Continuous,
                         dt: float = DT) -> VehicleState:
    """Kinematic bicycle step under throttle/brake/steering."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    cmd, _ = clamp_command(cmd)
    steer = cmd.steering * model.max_steer
    accel = cmd.throttle * model.max_accel - cmd.brake * model.max_brake
    return _advance(state, model, steer, accel, dt)


def integrate_actuator_dynamic(state: VehicleState, model: VehicleModel, cmd: ActuatorDynamic,
                               dt: float = DT) -> VehicleState:
    """As :func:`integrate_continuous` but steering moves at ``steering_rate``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    cmd, _ = clamp_command(cmd)
    steer = _clamp(state.steering + cmd.steering_rate * dt, -model.max_steer, model.max_steer)
    accel = cmd.throttle * model.max_accel - cmd.brake * model.max_brake
    return _advance(state, model, steer, accel, dt)


# --- trajectory tracking ------------------------------------------------------

def lookahead_distance(speed: float) -> float:
    return _clamp(LOOKAHEAD_GAIN * speed, LOOKAHEAD_MIN, LOOKAHEAD_MAX)


def _polyline_projection(pts: Sequence[tuple[float, float]], x: float, y: float):
    best = (math.inf, 0, 0.0)
    for i in range(len(pts) - 1):
        (x0, y0), (x1, y1) = pts[i], pts[i + 1]
        dx, dy = x1 - x0, y1 - y0
        l2 = dx * dx + dy * dy
        u = _clamp(((x - x0) * dx + (y - y0) * dy) / l2, 0.0, 1.0) if l2 > 0 else 0.0
        qx, qy = x0 + u * dx, y0 + u * dy
        d2 = (x - qx) ** 2 + (y - qy) ** 2
        if d2 < best[0]:
            best = (d2, i, u)
    return best


def _point_along(pts, i, u, dist):
    """Walk ``dist`` metres forward from segment ``i`` parameter ``u``."""
    while True:
        (x0, y0), (x1, y1) = pts[i], pts[i + 1]
        seg = math.sqrt((x1 - x0) ** 2 + (y1 - y0) ** 2)
        rest = (1.0 - u) * seg
        if dist <= rest or i == len(pts) - 2:
            f = u + (dist / seg if seg > 0 else 0.0)
            # past the final point: extrapolate the last segment
            return x0 + f * (x1 - x0), y0 + f * (y1 - y0)
        dist -= rest
        i += 1
        u = 0.0


def track_trajectory(state: VehicleState, model: VehicleModel, cmd: Trajectory,
                     dt: float = DT) -> Continuous:
    """Pure-pursuit steering plus proportional speed control.

    Returns full braking with zero throttle once the vehicle has passed the
    final trajectory point.
    """
    pts = [(p.x, p.y) for p in cmd.points]
    if len(pts) == 0:
        return FULL_BRAKE
    if len(pts) == 1:
        p = cmd.points[0]
        pts.append((p.x + math.cos(p.heading), p.y + math.sin(p.heading)))
    _, i, u = _polyline_projection(pts, state.x, state.y)
    n = len(cmd.points)
    if i >= len(pts) - 2 and u >= 1.0 and n > 1:
        return FULL_BRAKE
    # target speed interpolated at the projection
    if n > 1:
        a, b = cmd.points[min(i, n - 1)], cmd.points[min(i + 1, n - 1)]
        v_target = a.speed + u * (b.speed - a.speed)
    else:
        v_target = cmd.points[0].speed

    ld = lookahead_distance(state.speed)
    tx, ty = _point_along(pts, i, u, ld)
    dx, dy = tx - state.x, ty - state.y
    alpha = wrap_angle(math.atan2(dy, dx) - state.heading)
    dist = math.sqrt(dx * dx + dy * dy)
    if dist < 1e-9:
        steer = 0.0
    else:
        steer = math.atan2(2.0 * model.wheelbase * math.sin(alpha), dist)
    # limit how far steering can move this step
    max_delta = model.max_steer_rate * dt
    steer = _clamp(steer, state.steering - max_delta, state.steering + max_delta)
    steer = _clamp(steer, -model.max_steer, model.max_steer)

    a_des = SPEED_GAIN * (v_target - state.speed)
    if a_des >= 0.0:
        throttle, brake = min(1.0, a_des / model.max_accel), 0.0
    else:
        throttle, brake = 0.0, min(1.0, -a_des / model.max_brake)
    return Continuous(throttle, brake, steer / model.max_steer)


# --- lane following -----------------------------------------------------------

class OffRoadError(RuntimeError):
    pass


@dataclass
class LaneFollower:
    """Lane-following controller with memory for in-progress lane changes.

    ``route`` (lane ids) picks successors at branch points; without it the
    lexicographically first successor is taken.
    """

    network: RoadNetwork
    route: tuple[str, ...] = ()
    lane_id: str | None = None
    change_from: str | None = None
    change_elapsed: float = 0.0
    horizon: float = 25.0
    step: float = 1.0
    last_info: dict = field(default_factory=dict)

    def _next_lane(self, lane: Lane) -> Lane | None:
        if not lane.successors:
            return None
        route = self.route
        for succ in lane.successors:
            if succ in route:
                return self.network.lanes[succ]
        # successor of a route lane's neighbor (off-route after a lane change)
        return self.network.lanes[sorted(lane.successors)[0]]

    def _locate(self, state: VehicleState):
        net = self.network
        if self.lane_id is None:
            cands = [l for l in self.route if l in net.lanes] or None
            pos, dist = net.project(state.x, state.y, cands)
            if cands is not None and dist > net.lanes[pos.lane_id].off_road_margin():
                pos, dist = net.project(state.x, state.y)
            self.lane_id = pos.lane_id
        lane = net.lanes[self.lane_id]
        pos, dist = net.project_onto_lane(lane, state.x, state.y)
        # hand over to the next lane once past the end
        while pos.s >= lane.length - 1e-9:
            nxt = self._next_lane(lane)
            if nxt is None:
                break
            npos, ndist = net.project_onto_lane(nxt, state.x, state.y)
            if ndist > dist + 1e-6 and npos.s <= 1e-9:
                break
            lane, pos, dist = nxt, npos, ndist
            self.lane_id = lane.id
            if self.change_from is not None:
                src = net.lanes[self.change_from]
                nsrc = self._next_lane(src)
                self.change_from = nsrc.id if nsrc is not None else None
        if dist > lane.off_road_margin() and self.change_from is not None:
            _, sdist = net.project_onto_lane(net.lanes[self.change_from], state.x, state.y)
            if sdist <= net.lanes[self.change_from].off_road_margin():
                return lane, pos
        if dist > lane.off_road_margin():
            # lost the lane entirely; re-acquire globally
            gpos, gdist = net.project(state.x, state.y)
            if gdist > net.lanes[gpos.lane_id].off_road_margin():
                raise OffRoadError(f"vehicle {state.id} is off-road ({gdist:.2f} m from any lane)")
            self.lane_id = gpos.lane_id
            lane, pos, dist = net.lanes[gpos.lane_id], gpos, gdist
            self.change_from = None
        return lane, pos

    def _path(self, lane: Lane, s: float, length: float):
        """Centerline points from ``s`` forward for ``length`` metres."""
        pts = []
        d = 0.0
        cur, cs = lane, s
        while d <= length + 1e-9:
            if cs > cur.length:
                nxt = self._next_lane(cur)
                if nxt is None:
                    x, y, h = lane_to_world(cur, cur.length)
                    extra = cs - cur.length
                    pts.append((x + extra * math.cos(h), y + extra * math.sin(h)))
                    d += self.step
                    cs += self.step
                    continue
                cs -= cur.length
                cur = nxt
                continue
            x, y, _ = lane_to_world(cur, cs)
            pts.append((x, y))
            d += self.step
            cs += self.step
        return pts

    def command(self, state: VehicleState, model: VehicleModel, cmd: LaneFollowing,
                dt: float = DT) -> Continuous:
        net = self.network
        cmd, _ = clamp_command(cmd)
        info = {}
        lane, pos = self._locate(state)
        if cmd.lane_change != 0:
            if self.change_from is not None:
                info["lane_change_ignored"] = "in_progress"
            else:
                target = lane.left_neighbor if cmd.lane_change > 0 else lane.right_neighbor
                if target is None:
                    info["lane_change_ignored"] = "no_neighbor"
                else:
                    info["lane_change"] = {"from": lane.id, "to": target}
                    self.change_from = lane.id
                    self.change_elapsed = 0.0
                    self.lane_id = target
                    lane = net.lanes[target]
                    pos, _ = net.project_onto_lane(lane, state.x, state.y)

        v_ref = max(state.speed, 1.0)
        target_pts = self._path(lane, pos.s, self.horizon)
        if self.change_from is not None:
            src = net.lanes[self.change_from]
            spos, _ = net.project_onto_lane(src, state.x, state.y)
            src_pts = self._path(src, spos.s, self.horizon)
            pts = []
            for k, (tp, sp) in enumerate(zip(target_pts, src_pts)):
                tau = self.change_elapsed + k * self.step / v_ref
                f = min(1.0, tau / LANE_CHANGE_DURATION)
                pts.append((sp[0] + f * (tp[0] - sp[0]), sp[1] + f * (tp[1] - sp[1])))
            self.change_elapsed += dt
            if self.change_elapsed >= LANE_CHANGE_DURATION - 1e-9:
                self.change_from = None
        else:
            pts = target_pts
        traj = Trajectory(tuple(
            TrajectoryPoint(x, y, 0.0, cmd.target_speed, float(k)) for k, (x, y) in enumerate(pts)
        ))
        self.last_info = info
        return track_trajectory(state, model, traj, dt)


def lane_following_control(state: VehicleState, model: VehicleModel, network: RoadNetwork,
                           cmd: LaneFollowing, dt: float = DT,
                           controller: LaneFollower | None = None):
    """One lane-following control step.

    Returns ``(Continuous, info)``. Pass a persistent ``controller`` to carry
    lane-change progress across steps.
    """
    ctl = controller if controller is not None else LaneFollower(network)
    out = ctl.command(state, model, cmd, dt)
    return out, dict(ctl.last_info)


def apply_command(state: VehicleState, model: VehicleModel, cmd, dt: float = DT,
                  network: RoadNetwork | None = None, controller: LaneFollower | None = None):
    """Advance a vehicle under any command type.

    Returns ``(new_state, applied Continuous or ActuatorDynamic, info)``.
    """
    info = {}
    cmd, clamped = clamp_command(cmd)
    if clamped:
        info["clamped"] = True
    if isinstance(cmd, Continuous):
        return integrate_continuous(state, model, cmd, dt), cmd, info
    if isinstance(cmd, ActuatorDynamic):
        return integrate_actuator_dynamic(state, model, cmd, dt), cmd, info
    if isinstance(cmd, Trajectory):
        low = track_trajectory(state, model, cmd, dt)
    elif isinstance(cmd, LaneFollowing):
        if controller is None:
            controller = LaneFollower(network)
        low = controller.command(state, model, cmd, dt)
        info.update(controller.last_info)
    else:
        raise TypeError(f"unsupported command {cmd!r}")
    return integrate_continuous(state, model, low, dt), low, info
