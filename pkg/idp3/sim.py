"""
Kinematic Pick&Place table scene with a head-mounted depth camera.

Coordinates are in the robot base frame: x forward, y left, z up, metres.
The camera pose is given in that frame; the rig placement (world ← base)
only matters to the world-frame comparison path, never to rendering.

Each round: the object appears inside a small region on the table, the
effector closes on it, lifts it, carries it to the place zone and releases
it there, after which a new object spawns.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import enum
import json
import logging
import math
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .geom import DepthImage, Intrinsics, PointCloud, RigidTransform, transform_cloud
from .perception import Observation, ObservationConfig, perceive
from .utils import derive_seed, FloatArray, make_rng


logger = logging.getLogger(__name__)

HOME_OFFSET = (0.30, 0.0, 0.25)         # effector home, z relative to the table top
TABLE_EXTENT = ((0.20, 0.90), (-0.50, 0.50))
TABLE_THICKNESS = 0.04
WALL_X = 1.60
HOVER = 0.10
CARRY_MARGIN = 0.05

# Stream identifiers for derived generators
SPAWN_STREAM = 1
NOISE_STREAM = 2
DISTRACTOR_STREAM = 3
SAMPLING_STREAM = 4


class Event(str, enum.Enum):
    ATTEMPT = 'attempt'
    SUCCESS_GRASP = 'success_grasp'
    SUCCESS_PLACE = 'success_place'


@dataclass(frozen=True)
class SensorNoise:
    sigma: float = 0.005
    dropout: float = 0.02
    enabled: bool = True

    @classmethod
    def off(cls) -> SensorNoise:
        return cls(0.0, 0.0, False)


@dataclass(frozen=True)
class JitterConfig:
    """
    Ornstein-Uhlenbeck perturbation of the expert's targets, per axis.
    """
    theta: float = 0.3
    sigma: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.theta <= 1:
            raise ValueError('theta must lie in (0, 1]')
        if self.sigma < 0:
            raise ValueError('sigma must be non-negative')

    @classmethod
    def off(cls) -> JitterConfig:
        return cls(sigma=0.0)


def head_camera(height: float = 1.35, pitch_deg: float = 53.0) -> RigidTransform:
    """
    Camera above the base origin looking forward and down at the table.

    Columns of the rotation are the camera axes (right, down, optical) in
    the base frame.
    """
    pitch = math.radians(pitch_deg)
    optical = np.array([math.cos(pitch), 0.0, -math.sin(pitch)])
    right = np.array([0.0, -1.0, 0.0])
    down = np.cross(optical, right)
    return RigidTransform(np.column_stack([right, down, optical]), np.array([0.0, 0.0, height]))


@dataclass(frozen=True)
class SceneConfig:
    """
    Everything needed to reproduce an episode.

    Args:
        region_center, region_size:
            Object spawn rectangle on the table (x extent, y extent).
        distractors:
            Number of extra boxes, sized within `distractor_size`.
        placement:
            World ← base transform of the whole rig (robot, camera, table).
        rounds:
            Successful placements after which the episode is done.
    """
    table_height: float = 0.75
    region_center: tuple[float, float] = (0.45, 0.0)
    region_size: tuple[float, float] = (0.10, 0.20)
    object_size: float = 0.05
    distractors: int = 0
    distractor_size: tuple[float, float] = (0.03, 0.06)
    place_center: tuple[float, float] = (0.45, -0.28)
    place_radius: float = 0.06
    camera_pose: RigidTransform = field(default_factory=head_camera)
    placement: RigidTransform = field(default_factory=RigidTransform.identity)
    resolution: int = 64
    fov_deg: float = 50.0
    noise: SensorNoise = field(default_factory=SensorNoise)
    max_speed: float = 0.05
    grasp_radius: float = 0.03
    lift_height: float = 0.10
    lift_hold_steps: int = 5
    rounds: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.region_size) < 0:
            raise ValueError('region size must be non-negative')
        if self.object_size <= 0:
            raise ValueError('object_size must be positive')
        if self.resolution < 2:
            raise ValueError('resolution must be at least 2 pixels')
        below = self.camera_pose.translation[2] - self.table_height
        if below <= 0:
            raise ValueError('table must lie below the camera')

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.resolution, self.resolution, self.fov_deg)

    @property
    def rest_z(self) -> float:
        """
        Height of the object centre when resting on the table.
        """
        return self.table_height + self.object_size / 2

    @property
    def home(self) -> FloatArray:
        x, y, dz = HOME_OFFSET
        return np.array([x, y, self.table_height + dz])

    def spawn_object(self, round_index: int) -> FloatArray:
        """
        Seeded object position for the given round, inside the region.
        """
        rng = make_rng(self.seed, SPAWN_STREAM, round_index)
        offset = (rng.random(2) - 0.5) * np.asarray(self.region_size)
        x, y = np.asarray(self.region_center) + offset
        return np.array([x, y, self.rest_z])

    def distractor_boxes(self) -> list[tuple[FloatArray, FloatArray]]:
        """
        Axis-aligned boxes on the table, kept clear of the spawn region.
        """
        rng = make_rng(self.seed, DISTRACTOR_STREAM)
        boxes = []
        (x_lo, x_hi), (y_lo, y_hi) = TABLE_EXTENT
        half_region = np.asarray(self.region_size) / 2 + 0.05
        while len(boxes) < self.distractors:
            size = rng.uniform(*self.distractor_size)
            centre = np.array([
                rng.uniform(x_lo + 0.05, x_hi - 0.05), rng.uniform(y_lo + 0.05, y_hi - 0.05),
            ])
            if np.all(np.abs(centre - np.asarray(self.region_center)) < half_region + size):
                continue
            lower = np.array([centre[0] - size / 2, centre[1] - size / 2, self.table_height])
            boxes.append((lower, lower + np.array([size, size, size])))
        return boxes


@dataclass(frozen=True)
class EnvState:
    effector: FloatArray = field(repr=False)
    grip: float
    object: FloatArray = field(repr=False)
    held: bool = False
    step_index: int = 0
    round_index: int = 0
    lift_steps: int = 0
    grasp_counted: bool = False
    grasp_offset: FloatArray = field(default_factory=lambda: np.zeros(3), repr=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EnvState):
            return NotImplemented
        return (
            np.array_equal(self.effector, other.effector)
            and self.grip == other.grip
            and np.array_equal(self.object, other.object)
            and self.held == other.held
            and self.step_index == other.step_index
            and self.round_index == other.round_index
            and self.lift_steps == other.lift_steps
            and self.grasp_counted == other.grasp_counted
            and np.array_equal(self.grasp_offset, other.grasp_offset)
        )

    @property
    def proprio(self) -> FloatArray:
        """
        Effector position and gripper closure.
        """
        return np.append(self.effector, self.grip)


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    events: frozenset[Event]


# Rendering ####################################################################

@dataclass(frozen=True)
class Plane:
    normal: FloatArray
    offset: float                       # points p with normal·p == offset


def raycast(
    origin: FloatArray,
    directions: FloatArray,
    planes: list[Plane],
    boxes: list[tuple[FloatArray, FloatArray]],
) -> FloatArray:
    """
    Nearest positive ray parameter per direction, zero where nothing is hit.

    Args:
        origin:
            Ray origin (3,).
        directions:
            Array (..., 3) of ray directions.
        planes, boxes:
            Infinite planes and axis-aligned boxes (lower, upper corners).
    """
    shape = directions.shape[:-1]
    nearest = np.full(shape, np.inf)
    with np.errstate(divide='ignore', invalid='ignore'):
        for plane in planes:
            denominator = directions @ plane.normal
            s = (plane.offset - origin @ plane.normal) / denominator
            hit = np.isfinite(s) & (s > 0)
            nearest = np.where(hit & (s < nearest), s, nearest)
        for lower, upper in boxes:
            t1 = (lower - origin) / directions
            t2 = (upper - origin) / directions
            t_near = np.fmax.reduce(np.fmin(t1, t2), axis=-1)
            t_far = np.fmin.reduce(np.fmax(t1, t2), axis=-1)
            hit = (t_far >= t_near) & (t_near > 0)
            nearest = np.where(hit & (t_near < nearest), t_near, nearest)
    result: FloatArray = np.where(np.isfinite(nearest), nearest, 0.0)
    return result


def scene_primitives(
    state: EnvState, cfg: SceneConfig,
) -> tuple[list[Plane], list[tuple[FloatArray, FloatArray]]]:
    planes = [
        Plane(np.array([0.0, 0.0, 1.0]), 0.0),             # floor
        Plane(np.array([1.0, 0.0, 0.0]), WALL_X),          # background wall
    ]
    (x_lo, x_hi), (y_lo, y_hi) = TABLE_EXTENT
    table = (
        np.array([x_lo, y_lo, cfg.table_height - TABLE_THICKNESS]),
        np.array([x_hi, y_hi, cfg.table_height]),
    )
    half = cfg.object_size / 2
    target = (state.object - half, state.object + half)
    return planes, [table, target] + cfg.distractor_boxes()


def render_depth(
    state: EnvState, cfg: SceneConfig, noise: Optional[SensorNoise] = None,
) -> DepthImage:
    """
    Ray-cast the scene from the camera, then apply sensor noise.

    Depth is the camera-frame z of the nearest hit. Noise is seeded by the
    scene seed and the step index only.
    """
    noise = cfg.noise if noise is None else noise
    k = cfg.intrinsics
    pose = cfg.camera_pose
    directions = k.ray_directions() @ pose.rotation.T
    planes, boxes = scene_primitives(state, cfg)
    depth = raycast(pose.translation, directions, planes, boxes)

    if noise.enabled:
        rng = make_rng(cfg.seed, NOISE_STREAM, state.step_index)
        valid = depth > 0
        jitter = rng.normal(0.0, noise.sigma, size=depth.shape) if noise.sigma > 0 else 0.0
        depth = np.where(valid, np.maximum(depth + jitter, 0.0), 0.0)
        if noise.dropout > 0:
            depth = np.where(rng.random(depth.shape) < noise.dropout, 0.0, depth)
    return DepthImage(k.width, k.height, depth)


def observe(state: EnvState, cfg: SceneConfig, obs_cfg: ObservationConfig) -> Observation:
    seed = derive_seed(cfg.seed, SAMPLING_STREAM, state.step_index)
    return perceive(render_depth(state, cfg), state.proprio, cfg.intrinsics, obs_cfg, seed)


def world_frame_cloud(pc: PointCloud, cfg: SceneConfig) -> PointCloud:
    """
    Express a camera-frame cloud in the world frame using the extrinsics.

    This is the calibrated path the egocentric pipeline avoids.
    """
    return transform_cloud(pc, cfg.placement.compose(cfg.camera_pose))


# Scene operations #############################################################

def reset(
    cfg: SceneConfig, obs_cfg: Optional[ObservationConfig] = None,
) -> tuple[EnvState, Observation]:
    """
    Effector at home, gripper open, first object spawned from the seed.
    """
    obs_cfg = ObservationConfig() if obs_cfg is None else obs_cfg
    state = EnvState(effector=cfg.home, grip=0.0, object=cfg.spawn_object(0))
    return state, observe(state, cfg, obs_cfg)


def advance(
    state: EnvState, action: FloatArray, cfg: SceneConfig,
) -> tuple[EnvState, frozenset[Event]]:
    """
    Kinematic update without rendering.
    """
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.shape != (4,) or not np.all(np.isfinite(action)):
        logger.warning("Invalid action %r at step %d, holding still", action, state.step_index)
        action = state.proprio

    delta = action[:3] - state.effector
    distance = float(np.linalg.norm(delta))
    if distance > cfg.max_speed:
        delta = delta * (cfg.max_speed / distance)
    effector = state.effector + delta
    floor = cfg.table_height + 0.005
    if effector[2] < floor:
        effector = np.array([effector[0], effector[1], floor])
    grip = float(np.clip(action[3], 0.0, 1.0))

    events: set[Event] = set()
    held, offset = state.held, state.grasp_offset
    obj, round_index = state.object, state.round_index
    lift_steps, counted = state.lift_steps, state.grasp_counted

    if state.grip <= 0.5 < grip:
        events.add(Event.ATTEMPT)
        if not held and np.linalg.norm(effector - obj) <= cfg.grasp_radius:
            held, offset, lift_steps, counted = True, obj - effector, 0, False
    elif state.grip > 0.5 >= grip and held:
        held = False
        obj = np.array([obj[0], obj[1], cfg.rest_z])
        placed = np.hypot(*(obj[:2] - np.asarray(cfg.place_center))) <= cfg.place_radius
        if counted and placed:
            events.add(Event.SUCCESS_PLACE)
            round_index += 1
            obj = cfg.spawn_object(round_index)
        counted, lift_steps = False, 0

    if held:
        obj = effector + offset
        if obj[2] - cfg.rest_z >= cfg.lift_height:
            lift_steps += 1
        else:
            lift_steps = 0
        if lift_steps >= cfg.lift_hold_steps and not counted:
            events.add(Event.SUCCESS_GRASP)
            counted = True

    next_state = EnvState(
        effector=effector,
        grip=grip,
        object=obj,
        held=held,
        step_index=state.step_index + 1,
        round_index=round_index,
        lift_steps=lift_steps,
        grasp_counted=counted,
        grasp_offset=offset,
    )
    return next_state, frozenset(events)


def step(
    state: EnvState,
    action: FloatArray,
    cfg: SceneConfig,
    obs_cfg: Optional[ObservationConfig] = None,
) -> tuple[StepResult, EnvState]:
    """
    Move toward the target (speed-clamped), update the gripper, observe.
    """
    obs_cfg = ObservationConfig() if obs_cfg is None else obs_cfg
    next_state, events = advance(state, action, cfg)
    return StepResult(observe(next_state, cfg, obs_cfg), events), next_state


def perturb_view(
    cfg: SceneConfig, yaw_deg: float = 0.0, translation: Optional[FloatArray] = None,
) -> SceneConfig:
    """
    Yaw the camera about the vertical axis and shift it, scene untouched.
    """
    shift = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
    yaw = RigidTransform.from_euler(yaw_deg=yaw_deg).rotation
    pose = cfg.camera_pose
    camera = RigidTransform(yaw @ pose.rotation, pose.translation + shift)
    return replace(cfg, camera_pose=camera)


def move_rig(cfg: SceneConfig, g: RigidTransform) -> SceneConfig:
    """
    Apply one rigid motion to the whole rig: camera and scene together.
    """
    return replace(cfg, placement=g.compose(cfg.placement))


def vary_scene(
    cfg: SceneConfig,
    table_height: Optional[float] = None,
    distractors: Optional[int] = None,
    object_size: Optional[float] = None,
) -> SceneConfig:
    """
    New-scene variation: different table height, clutter or object.
    """
    changes: dict[str, Any] = {}
    if table_height is not None:
        changes['table_height'] = table_height
    if distractors is not None:
        changes['distractors'] = distractors
    if object_size is not None:
        changes['object_size'] = object_size
    return replace(cfg, **changes)


# Expert #######################################################################

class OrnsteinUhlenbeck:
    """
    `x ← (1 − θ)·x + σ·ξ` per axis, starting at zero.
    """
    def __init__(self, cfg: JitterConfig, dims: int = 3):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.value = np.zeros(dims)

    def sample(self) -> FloatArray:
        if self.cfg.sigma > 0:
            noise = self.rng.standard_normal(self.value.shape)
            self.value = (1.0 - self.cfg.theta) * self.value + self.cfg.sigma * noise
        return self.value.copy()


class ScriptedExpert:
    """
    Waypoint controller: above the object, descend, close, lift, carry, release.

    The phase is read off the state each step; only the jitter process
    carries memory between calls.
    """
    ALIGN_TOLERANCE = 0.04
    CLOSE_DISTANCE = 0.02
    RELEASE_HEIGHT = 0.02

    def __init__(self, cfg: SceneConfig, jitter: Optional[JitterConfig] = None):
        self.cfg = cfg
        self.jitter = OrnsteinUhlenbeck(JitterConfig.off() if jitter is None else jitter)

    def __call__(self, state: EnvState) -> FloatArray:
        return scripted_expert(state, self.cfg, self.jitter)


def scripted_expert(state: EnvState, cfg: SceneConfig, jitter: OrnsteinUhlenbeck) -> FloatArray:
    """
    Next target effector position and grip for the scripted expert.
    """
    noise = jitter.sample()
    effector, obj = state.effector, state.object
    carry_z = cfg.rest_z + cfg.lift_height + CARRY_MARGIN

    if state.held:
        if not state.grasp_counted:
            target = np.array([effector[0], effector[1], carry_z - state.grasp_offset[2]])
            grip = 1.0
        else:
            place = np.array([*cfg.place_center, cfg.rest_z])
            misalignment = np.hypot(*(obj[:2] - place[:2]))
            if misalignment > ScriptedExpert.ALIGN_TOLERANCE:
                above = np.array([place[0], place[1], carry_z])
                target, grip = above - state.grasp_offset, 1.0
            elif obj[2] - cfg.rest_z > ScriptedExpert.RELEASE_HEIGHT:
                target, grip = place - state.grasp_offset, 1.0
            else:
                return np.append(effector, 0.0)
        return np.append(target + noise, grip)

    if state.grip > 0.5:
        # Closed on nothing: open up in place.
        return np.append(effector, 0.0)

    misalignment = np.hypot(*(effector[:2] - obj[:2]))
    if misalignment > ScriptedExpert.ALIGN_TOLERANCE:
        target = obj + np.array([0.0, 0.0, HOVER])
    elif np.linalg.norm(effector - obj) > ScriptedExpert.CLOSE_DISTANCE:
        target = obj
    else:
        return np.append(effector, 1.0)
    return np.append(target + noise, 0.0)


# Episode logs #################################################################

@dataclass
class EpisodeLog:
    """
    Per-step record of one episode, written as JSON lines.
    """
    seed: int
    records: list[dict[str, Any]] = field(default_factory=list)

    def record(self, state: EnvState, action: FloatArray, events: frozenset[Event]) -> None:
        self.records.append({
            'step': state.step_index,
            'action': [float(value) for value in action],
            'events': sorted(event.value for event in events),
            'effector': [float(value) for value in state.effector],
            'object': [float(value) for value in state.object],
        })

    def count(self, event: Event) -> int:
        return sum(event.value in record['events'] for record in self.records)

    def write_jsonl(self, path: Path) -> None:
        with open(path, 'w', encoding='utf-8') as fp:
            for record in self.records:
                fp.write(json.dumps(record, sort_keys=True))
                fp.write('\n')

    def to_dict(self) -> dict[str, Any]:
        return {'seed': self.seed, 'steps': self.records}
