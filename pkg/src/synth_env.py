"""
Synthetic Environment
---------------------
Deterministic data source: a 3-link arm (yaw at the base, pitch at joints 2
and 3) over a table with axis-aligned boxes and one movable cube. Episodes are
scripted pick-and-place demonstrations with ground-truth keypoint tracks,
ray-cast depth maps for every camera, proprioception and 7-DoF actions.

Everything is computed in float64. Rays are parameterised so the ray
parameter equals camera-frame depth.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from dotenv import dotenv_values

from geopredict_architecture import (
    ACTION_DIM,
    BACKGROUND_DEPTH,
    CameraModel,
    EpisodeRecord,
    Vec3,
    WorkspaceSpec,
)
from numerics import load_tensor, save_tensor

logger = logging.getLogger("geopredict.env")

DTYPE = torch.float64
RAY_EPSILON = 1e-9
FK_TOLERANCE = 1e-9
DEFAULT_CAPSULE_RADIUS = 0.02

APPROACH_STEPS = 12
GRASP_STEPS = 2
TRANSFER_STEPS = 12
RELEASE_STEPS = 2
EPISODE_STEPS = 1 + APPROACH_STEPS + GRASP_STEPS + TRANSFER_STEPS + RELEASE_STEPS

MANIFEST_FILE = "manifest.txt"
ARRAY_FILES = ("joint_angles", "keypoints", "depths", "proprio", "actions", "object_centers")

# (x range, y range) of the place target for each task id
TASK_GOAL_REGIONS = {
    0: ((0.22, 0.30), (0.08, 0.16)),
    1: ((0.22, 0.30), (-0.16, -0.08)),
    2: ((0.34, 0.42), (0.08, 0.16)),
    3: ((0.34, 0.42), (-0.16, -0.08)),
}
OBJECT_REGION = ((0.26, 0.40), (-0.05, 0.05))
NUM_TASKS = len(TASK_GOAL_REGIONS)


class UnreachableGoalError(RuntimeError):
    """No reachable start/object/goal combination was found within the retry budget."""


class DatasetError(ValueError):
    """An episode directory is missing data or is internally inconsistent."""


# --- Geometry records ---


@dataclass(frozen=True)
class Box:
    lower: Vec3
    upper: Vec3

    def __post_init__(self):
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ValueError(f"degenerate box {self.lower} - {self.upper}")

    @classmethod
    def centered(cls, center: Sequence[float], half_size: float):
        return cls(
            lower=tuple(float(c) - half_size for c in center),
            upper=tuple(float(c) + half_size for c in center),
        )


@dataclass(frozen=True)
class Capsule:
    start: Vec3
    end: Vec3
    radius: float


@dataclass(frozen=True)
class ArmSpec:
    link_lengths: Tuple[float, float, float] = (0.12, 0.20, 0.18)
    base: Vec3 = (0.04, 0.0, 0.24)
    joint_lower: Tuple[float, float, float] = (-1.4, -1.6, -0.2)
    joint_upper: Tuple[float, float, float] = (1.4, 0.8, 2.6)
    capsule_radius: float = DEFAULT_CAPSULE_RADIUS

    def __post_init__(self):
        if len(self.link_lengths) != 3 or any(length <= 0 for length in self.link_lengths):
            raise ValueError(f"arm needs three positive link lengths, got {self.link_lengths}")
        if any(hi <= lo for lo, hi in zip(self.joint_lower, self.joint_upper)):
            raise ValueError(f"degenerate joint limits {self.joint_lower} - {self.joint_upper}")

    @property
    def num_joints(self) -> int:
        return len(self.link_lengths)

    @property
    def num_keypoints(self) -> int:
        return self.num_joints + 1

    def within_limits(self, angles: torch.Tensor) -> bool:
        lower = torch.tensor(self.joint_lower, dtype=angles.dtype)
        upper = torch.tensor(self.joint_upper, dtype=angles.dtype)
        return bool(((angles >= lower) & (angles <= upper)).all())

    def to_manifest(self) -> Dict[str, str]:
        join = lambda values: ",".join(repr(float(v)) for v in values)
        return {
            "arm_link_lengths": join(self.link_lengths),
            "arm_base": join(self.base),
            "arm_joint_lower": join(self.joint_lower),
            "arm_joint_upper": join(self.joint_upper),
            "arm_capsule_radius": repr(float(self.capsule_radius)),
        }

    @classmethod
    def from_manifest(cls, values: Dict[str, str]):
        split = lambda key: tuple(float(v) for v in values[key].split(","))
        return cls(
            link_lengths=split("arm_link_lengths"),
            base=split("arm_base"),
            joint_lower=split("arm_joint_lower"),
            joint_upper=split("arm_joint_upper"),
            capsule_radius=float(values["arm_capsule_radius"]),
        )


@dataclass(frozen=True)
class SceneSpec:
    workspace: WorkspaceSpec
    cameras: Tuple[CameraModel, ...]
    static_boxes: Tuple[Box, ...] = field(default_factory=tuple)
    object_half_size: float = 0.03
    table_height: float = 0.02

    def __post_init__(self):
        lower = self.workspace.lower_tensor()
        upper = self.workspace.upper_tensor()
        center = 0.5 * (lower + upper)
        for index, camera in enumerate(self.cameras):
            point = camera.world_to_camera(center)
            if point[2] <= 0:
                raise ValueError(f"camera {index} faces away from the workspace")
            u = camera.fx * point[0] / point[2] + camera.cx
            v = camera.fy * point[1] / point[2] + camera.cy
            if not (0 <= u < camera.width and 0 <= v < camera.height):
                raise ValueError(f"camera {index} does not see the workspace center")

    @property
    def object_rest_height(self) -> float:
        return self.table_height + self.object_half_size

    @classmethod
    def toy(cls, image_size: int = 32, num_cameras: int = 2):
        workspace = WorkspaceSpec(lower=(0.0, -0.32, 0.0), upper=(0.64, 0.32, 0.64), voxel_size=0.08)
        eyes = [(0.95, -0.55, 0.75), (0.95, 0.55, 0.75), (-0.35, 0.0, 0.85), (0.32, -0.95, 0.6)]
        if not 1 <= num_cameras <= len(eyes):
            raise ValueError(f"toy scene supports 1..{len(eyes)} cameras, got {num_cameras}")
        target = (0.32, 0.0, 0.16)
        cameras = tuple(CameraModel.look_at(eye, target, image_size, image_size) for eye in eyes[:num_cameras])
        table = Box(lower=(-0.2, -0.5, -0.04), upper=(0.84, 0.5, 0.02))
        shelf = Box(lower=(0.48, 0.18, 0.02), upper=(0.56, 0.26, 0.10))
        return cls(workspace=workspace, cameras=cameras, static_boxes=(table, shelf))


# --- Kinematics ---


def _rot_z(angle: torch.Tensor) -> torch.Tensor:
    c, s = torch.cos(angle), torch.sin(angle)
    zero, one = torch.zeros_like(c), torch.ones_like(c)
    return torch.stack([c, -s, zero, s, c, zero, zero, zero, one], dim=-1).reshape(*c.shape, 3, 3)


def _rot_y(angle: torch.Tensor) -> torch.Tensor:
    c, s = torch.cos(angle), torch.sin(angle)
    zero, one = torch.zeros_like(c), torch.ones_like(c)
    return torch.stack([c, zero, s, zero, one, zero, -s, zero, c], dim=-1).reshape(*c.shape, 3, 3)


def forward_kinematics(arm: ArmSpec, angles: torch.Tensor) -> torch.Tensor:
    """
    (..., 3) joint angles -> (..., 4, 3) keypoints: base, joint 2, joint 3, end effector.
    Positive pitch turns a link from +x toward -z.
    """
    angles = angles.to(DTYPE)
    if angles.shape[-1] != arm.num_joints:
        raise ValueError(f"expected {arm.num_joints} joint angles, got shape {tuple(angles.shape)}")
    if not arm.within_limits(angles):
        raise ValueError(f"joint angles {angles.tolist()} outside limits")
    yaw, pitch2, pitch3 = angles.unbind(dim=-1)
    l1, l2, l3 = arm.link_lengths
    base = torch.tensor(arm.base, dtype=DTYPE).expand(*yaw.shape, 3)
    heading = torch.stack([torch.cos(yaw), torch.sin(yaw), torch.zeros_like(yaw)], dim=-1)
    up = torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE)

    def link(pitch):
        return torch.cos(pitch).unsqueeze(-1) * heading - torch.sin(pitch).unsqueeze(-1) * up

    joint2 = base + l1 * heading
    joint3 = joint2 + l2 * link(pitch2)
    end = joint3 + l3 * link(pitch2 + pitch3)
    return torch.stack([base, joint2, joint3, end], dim=-2)


def end_effector_rotation(angles: torch.Tensor) -> torch.Tensor:
    yaw, pitch2, pitch3 = angles.to(DTYPE).unbind(dim=-1)
    return _rot_z(yaw) @ _rot_y(pitch2 + pitch3)


def inverse_kinematics(arm: ArmSpec, target: torch.Tensor) -> Optional[torch.Tensor]:
    """Elbow-up solution placing the end effector at ``target``; None if unreachable."""
    l1, l2, l3 = arm.link_lengths
    offset = target.to(DTYPE) - torch.tensor(arm.base, dtype=DTYPE)
    yaw = math.atan2(offset[1].item(), offset[0].item())
    reach = math.hypot(offset[0].item(), offset[1].item()) - l1
    height = offset[2].item()
    cos_elbow = (reach * reach + height * height - l2 * l2 - l3 * l3) / (2 * l2 * l3)
    if abs(cos_elbow) > 1.0:
        return None
    elbow = -math.acos(cos_elbow)
    elevation = math.atan2(height, reach) - math.atan2(l3 * math.sin(elbow), l2 + l3 * math.cos(elbow))
    angles = torch.tensor([yaw, -elevation, -elbow], dtype=DTYPE)
    return angles if arm.within_limits(angles) else None


def minimum_jerk(start: torch.Tensor, goal: torch.Tensor, steps: int) -> torch.Tensor:
    """(steps, J) poses at s = 1/steps .. 1 along the quintic minimum-jerk profile."""
    s = torch.arange(1, steps + 1, dtype=DTYPE) / steps
    blend = 10 * s**3 - 15 * s**4 + 6 * s**5
    return start + (goal - start) * blend.unsqueeze(-1)


def rotation_to_axis_angle(rotation: torch.Tensor) -> torch.Tensor:
    """Log map of a rotation matrix; valid for angles below pi."""
    skew = torch.stack(
        [
            rotation[..., 2, 1] - rotation[..., 1, 2],
            rotation[..., 0, 2] - rotation[..., 2, 0],
            rotation[..., 1, 0] - rotation[..., 0, 1],
        ],
        dim=-1,
    )
    cos_angle = ((rotation.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0) / 2.0).clamp(-1.0, 1.0)
    angle = torch.acos(cos_angle)
    sin_angle = torch.sin(angle)
    small = sin_angle.abs() < 1e-12
    scale = torch.where(small, torch.full_like(angle, 0.5), angle / (2.0 * torch.where(small, torch.ones_like(sin_angle), sin_angle)))
    return skew * scale.unsqueeze(-1)


def actions_from_trajectory(arm: ArmSpec, angles: torch.Tensor, gripper: torch.Tensor) -> torch.Tensor:
    """
    (T, 7) actions: end-effector translation delta, axis-angle of R_{t+1} R_t^T,
    and the next gripper command. The final step holds still with the last gripper state.
    """
    positions = forward_kinematics(arm, angles)[:, -1]
    rotations = end_effector_rotation(angles)
    steps = angles.shape[0]
    actions = torch.zeros(steps, ACTION_DIM, dtype=DTYPE)
    actions[:-1, 0:3] = positions[1:] - positions[:-1]
    actions[:-1, 3:6] = rotation_to_axis_angle(rotations[1:] @ rotations[:-1].transpose(-1, -2))
    actions[:-1, 6] = gripper[1:]
    actions[-1, 6] = gripper[-1]
    return actions


# --- Ray casting ---


def camera_rays(camera: CameraModel) -> Tuple[torch.Tensor, torch.Tensor]:
    """World-space origin (3,) and per-pixel directions (h*w, 3) with unit camera-z component."""
    u, v = camera.pixel_centers(DTYPE)
    directions_cam = torch.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, torch.ones_like(u)], dim=-1)
    directions = directions_cam.reshape(-1, 3) @ camera.rotation_matrix(DTYPE)
    origin = camera.camera_to_world(torch.zeros(3, dtype=DTYPE))
    return origin, directions


def intersect_box(origin: torch.Tensor, directions: torch.Tensor, box: Box) -> torch.Tensor:
    """Slab test; nearest hit parameter per ray, inf where missed."""
    lower = torch.tensor(box.lower, dtype=DTYPE)
    upper = torch.tensor(box.upper, dtype=DTYPE)
    parallel = directions == 0
    safe = torch.where(parallel, torch.ones_like(directions), directions)
    t1 = (lower - origin) / safe
    t2 = (upper - origin) / safe
    inside = ((origin >= lower) & (origin <= upper)).expand_as(directions)
    inf = torch.full_like(directions, math.inf)
    t_min = torch.where(parallel, torch.where(inside, -inf, inf), torch.minimum(t1, t2))
    t_max = torch.where(parallel, torch.where(inside, inf, -inf), torch.maximum(t1, t2))
    near = t_min.max(dim=-1).values
    far = t_max.min(dim=-1).values
    hit = (near <= far) & (far > RAY_EPSILON)
    t = torch.where(near > RAY_EPSILON, near, far)
    return torch.where(hit, t, torch.full_like(t, math.inf))


def intersect_sphere(origin: torch.Tensor, directions: torch.Tensor, center: torch.Tensor, radius: float) -> torch.Tensor:
    offset = origin - center
    a = (directions * directions).sum(-1)
    b = directions @ offset
    c = offset @ offset - radius * radius
    disc = b * b - a * c
    t = (-b - torch.sqrt(disc.clamp(min=0.0))) / a
    hit = (disc >= 0) & (t > RAY_EPSILON)
    return torch.where(hit, t, torch.full_like(t, math.inf))


def intersect_capsule(origin: torch.Tensor, directions: torch.Tensor, capsule: Capsule) -> torch.Tensor:
    """Cylinder body between the end caps, union with the two end spheres."""
    start = torch.tensor(capsule.start, dtype=DTYPE)
    end = torch.tensor(capsule.end, dtype=DTYPE)
    radius = capsule.radius
    axis = end - start
    rel = origin - start
    axis_sq = axis @ axis
    dd = (directions * directions).sum(-1)
    along = directions @ axis
    origin_along = rel @ axis
    a = axis_sq * dd - along * along
    b = axis_sq * (directions @ rel) - origin_along * along
    c = axis_sq * (rel @ rel) - origin_along * origin_along - radius * radius * axis_sq
    disc = b * b - a * c
    body_ok = (a > 1e-12 * dd * max(axis_sq.item(), 1e-30)) & (disc >= 0)
    t_body = (-b - torch.sqrt(disc.clamp(min=0.0))) / torch.where(body_ok, a, torch.ones_like(a))
    height = origin_along + t_body * along
    body_hit = body_ok & (height > 0) & (height < axis_sq) & (t_body > RAY_EPSILON)
    t = torch.where(body_hit, t_body, torch.full_like(t_body, math.inf))
    t = torch.minimum(t, intersect_sphere(origin, directions, start, radius))
    return torch.minimum(t, intersect_sphere(origin, directions, end, radius))


def raycast(origin: torch.Tensor, directions: torch.Tensor, boxes: Sequence[Box], capsules: Sequence[Capsule]) -> torch.Tensor:
    t = torch.full((directions.shape[0],), math.inf, dtype=DTYPE)
    for box in boxes:
        t = torch.minimum(t, intersect_box(origin, directions, box))
    for capsule in capsules:
        t = torch.minimum(t, intersect_capsule(origin, directions, capsule))
    return t


def arm_capsules(keypoints: torch.Tensor, radius: float) -> List[Capsule]:
    points = keypoints.tolist()
    return [Capsule(tuple(points[i]), tuple(points[i + 1]), radius) for i in range(len(points) - 1)]


def raycast_depth(
    scene: SceneSpec,
    camera: CameraModel,
    keypoints: Optional[torch.Tensor] = None,
    object_center: Optional[torch.Tensor] = None,
    capsule_radius: float = DEFAULT_CAPSULE_RADIUS,
) -> torch.Tensor:
    """(height, width) camera-z depth of the nearest surface; 0 where nothing is hit."""
    boxes = list(scene.static_boxes)
    if object_center is not None:
        boxes.append(Box.centered(object_center.tolist(), scene.object_half_size))
    capsules = [] if keypoints is None else arm_capsules(keypoints, capsule_radius)
    origin, directions = camera_rays(camera)
    t = raycast(origin, directions, boxes, capsules)
    depth = torch.where(torch.isfinite(t), t, torch.full_like(t, BACKGROUND_DEPTH))
    return depth.reshape(camera.height, camera.width)


# --- Episodes ---


def _uniform(generator: torch.Generator, low: float, high: float) -> float:
    return low + (high - low) * torch.rand((), generator=generator, dtype=DTYPE).item()


def _sample_region(generator: torch.Generator, region, height: float) -> torch.Tensor:
    (x0, x1), (y0, y1) = region
    return torch.tensor([_uniform(generator, x0, x1), _uniform(generator, y0, y1), height], dtype=DTYPE)


def _plan(arm: ArmSpec, scene: SceneSpec, task_id: int, generator: torch.Generator):
    """One sampling attempt: joint trajectory, gripper states and object centers, or None."""
    start = torch.tensor(
        [_uniform(generator, -0.4, 0.4), _uniform(generator, -0.9, -0.3), _uniform(generator, 0.6, 1.4)],
        dtype=DTYPE,
    )
    obj = _sample_region(generator, OBJECT_REGION, scene.object_rest_height)
    goal = _sample_region(generator, TASK_GOAL_REGIONS[task_id], scene.object_rest_height)
    grasp_pose = inverse_kinematics(arm, obj)
    place_pose = inverse_kinematics(arm, goal)
    if grasp_pose is None or place_pose is None:
        return None

    segments = [
        start.unsqueeze(0),
        minimum_jerk(start, grasp_pose, APPROACH_STEPS),
        grasp_pose.expand(GRASP_STEPS, -1),
        minimum_jerk(grasp_pose, place_pose, TRANSFER_STEPS),
        place_pose.expand(RELEASE_STEPS, -1),
    ]
    angles = torch.cat(segments).clone()
    grasp_step = 1 + APPROACH_STEPS
    release_step = grasp_step + GRASP_STEPS + TRANSFER_STEPS
    gripper = torch.zeros(EPISODE_STEPS, dtype=DTYPE)
    gripper[grasp_step:release_step] = 1.0

    keypoints = forward_kinematics(arm, angles)
    if not bool(scene.workspace.contains(keypoints).all()):
        return None
    centers = obj.expand(EPISODE_STEPS, -1).clone()
    centers[grasp_step:release_step] = keypoints[grasp_step:release_step, -1]
    centers[release_step:] = keypoints[release_step - 1, -1]
    return angles, gripper, keypoints, centers


def generate_episode(
    task_id: int,
    seed: int,
    scene: Optional[SceneSpec] = None,
    arm: Optional[ArmSpec] = None,
    horizon: int = 8,
    max_retries: int = 32,
) -> EpisodeRecord:
    """Scripted pick-and-place; fully determined by ``seed``."""
    if task_id not in TASK_GOAL_REGIONS:
        raise ValueError(f"unknown task id {task_id} (known: {sorted(TASK_GOAL_REGIONS)})")
    scene = scene or SceneSpec.toy()
    arm = arm or ArmSpec()
    generator = torch.Generator().manual_seed(seed)
    plan = None
    for attempt in range(max_retries):
        plan = _plan(arm, scene, task_id, generator)
        if plan is not None:
            break
        logger.warning(f"Episode seed {seed}: sampled goal unreachable, resampling (attempt {attempt + 1})")
    if plan is None:
        raise UnreachableGoalError(f"no reachable goal for task {task_id}, seed {seed} after {max_retries} attempts")

    angles, gripper, keypoints, centers = plan
    depths = torch.stack(
        [
            torch.stack(
                [raycast_depth(scene, camera, keypoints[t], centers[t], arm.capsule_radius) for camera in scene.cameras]
            )
            for t in range(EPISODE_STEPS)
        ]
    )
    return EpisodeRecord(
        task_id=task_id,
        joint_angles=angles,
        keypoints=keypoints,
        depths=depths,
        proprio=torch.cat([angles, gripper.unsqueeze(-1)], dim=-1),
        actions=actions_from_trajectory(arm, angles, gripper),
        object_centers=centers,
        cameras=list(scene.cameras),
        horizon=horizon,
    )


# --- Dataset IO ---


def write_episode(directory: str, episode: EpisodeRecord, arm: Optional[ArmSpec] = None) -> None:
    arm = arm or ArmSpec()
    os.makedirs(directory, exist_ok=True)
    entries = {
        "task_id": str(episode.task_id),
        "num_keypoints": str(episode.num_keypoints),
        "horizon": str(episode.horizon),
        "num_steps": str(episode.num_steps),
        "num_cameras": str(len(episode.cameras)),
    }
    for index, camera in enumerate(episode.cameras):
        entries[f"camera_{index}"] = camera.to_manifest_value()
    entries.update(arm.to_manifest())
    with open(os.path.join(directory, MANIFEST_FILE), "w", encoding="utf-8") as manifest:
        for key, value in entries.items():
            manifest.write(f"{key}={value}\n")
    for name in ARRAY_FILES:
        save_tensor(os.path.join(directory, f"{name}.bin"), getattr(episode, name))


def read_episode(directory: str) -> EpisodeRecord:
    """Load and validate one episode directory (shapes, then FK consistency)."""
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    if not os.path.exists(manifest_path):
        raise DatasetError(f"{directory}: missing {MANIFEST_FILE}")
    values = dotenv_values(manifest_path)
    try:
        num_steps = int(values["num_steps"])
        num_keypoints = int(values["num_keypoints"])
        cameras = [CameraModel.from_manifest_value(values[f"camera_{i}"]) for i in range(int(values["num_cameras"]))]
        arm = ArmSpec.from_manifest(values)
        arrays = {name: load_tensor(os.path.join(directory, f"{name}.bin")) for name in ARRAY_FILES}
        episode = EpisodeRecord(
            task_id=int(values["task_id"]), cameras=cameras, horizon=int(values["horizon"]), **arrays
        )
    except (KeyError, ValueError, OSError) as e:
        raise DatasetError(f"{directory}: {e}") from e

    expected = {
        "joint_angles": (num_steps, arm.num_joints),
        "keypoints": (num_steps, num_keypoints, 3),
        "depths": (num_steps, len(cameras), cameras[0].height if cameras else 0, cameras[0].width if cameras else 0),
        "proprio": (num_steps, arm.num_joints + 1),
        "actions": (num_steps, ACTION_DIM),
        "object_centers": (num_steps, 3),
    }
    for name, shape in expected.items():
        if tuple(getattr(episode, name).shape) != shape:
            raise DatasetError(f"{directory}: {name} has shape {tuple(getattr(episode, name).shape)}, expected {shape}")
    try:
        recomputed = forward_kinematics(arm, episode.joint_angles)
    except ValueError as e:
        raise DatasetError(f"{directory}: {e}") from e
    error = (recomputed - episode.keypoints).abs().max().item()
    if error > FK_TOLERANCE:
        raise DatasetError(f"{directory}: keypoints disagree with forward kinematics (max error {error:.3e} m)")
    return episode


def generate_dataset(
    out_dir: str,
    num_episodes: int,
    seed: int,
    horizon: int = 8,
    image_size: int = 32,
    num_cameras: int = 2,
) -> List[str]:
    """Episode i uses seed ``seed + i`` and task ``i % NUM_TASKS``."""
    scene = SceneSpec.toy(image_size=image_size, num_cameras=num_cameras)
    arm = ArmSpec()
    paths = []
    for index in range(num_episodes):
        path = os.path.join(out_dir, f"episode_{index:04d}")
        episode = generate_episode(index % NUM_TASKS, seed + index, scene, arm, horizon)
        write_episode(path, episode, arm)
        paths.append(path)
        logger.info(f"Wrote episode {index} (task {episode.task_id}) to {path}")
    return paths


def load_dataset(directory: str) -> List[EpisodeRecord]:
    if not os.path.isdir(directory):
        raise DatasetError(f"dataset directory {directory} does not exist")
    names = sorted(
        name for name in os.listdir(directory) if os.path.exists(os.path.join(directory, name, MANIFEST_FILE))
    )
    if not names:
        raise DatasetError(f"no episode directories found in {directory}")
    return [read_episode(os.path.join(directory, name)) for name in names]
