"""
Desk-scale synthetic scenes of static and moving objects.

Every object is a fixed template of surface points. Static objects keep
their place in every frame; moving objects are translated rigidly by their
velocity (meters per frame). Moving objects reuse the shapes of the static
car and person classes but carry the moving-* label, so telling them apart
needs more than one frame.
"""

from pathlib import Path
from typing import List, NamedTuple, Union

import numpy as np
from loguru import logger

from .data_io import write_labels, write_poses, write_scan
from .datatypes import ClassInfo, DatasetManifest, PointCloud, SequenceSample, SynthSceneConfig

SYNTH_CLASSES: List[ClassInfo] = [
    ClassInfo(id=0, name="unlabeled"),
    ClassInfo(id=1, name="ground"),
    ClassInfo(id=2, name="building"),
    ClassInfo(id=3, name="car"),
    ClassInfo(id=4, name="person"),
    ClassInfo(id=5, name="moving-car", moving=True),
    ClassInfo(id=6, name="moving-person", moving=True),
]

GROUND, BUILDING, CAR, PERSON, MOVING_CAR, MOVING_PERSON = 1, 2, 3, 4, 5, 6

# Box half-extents (x, y, z) and mean reflectance per shape
SHAPES = {
    BUILDING: (np.array([3.0, 3.0, 2.0]), 0.8),
    CAR: (np.array([2.0, 0.9, 0.75]), 0.6),
    PERSON: (np.array([0.3, 0.3, 0.85]), 0.3),
}
MOVING_VARIANT = {CAR: MOVING_CAR, PERSON: MOVING_PERSON}


class SceneObject(NamedTuple):
    label: int
    instance: int
    template: np.ndarray
    reflectance: np.ndarray
    origin: np.ndarray
    velocity: np.ndarray

    def points_at(self, frame: int) -> np.ndarray:
        return self.template + self.origin + frame * self.velocity


class SyntheticSequence(NamedTuple):
    sequence_id: str
    objects: List[SceneObject]
    sample: SequenceSample


def box_surface(rng: np.random.Generator, half_extent: np.ndarray, count: int) -> np.ndarray:
    """Points on the faces of an axis-aligned box standing on z = 0 (no bottom face)."""
    points = rng.uniform(-half_extent, half_extent, size=(count, 3))
    axis = rng.integers(0, 3, size=count)
    side = rng.choice([-1.0, 1.0], size=count)
    side[axis == 2] = 1.0
    rows = np.arange(count)
    points[rows, axis] = side * half_extent[axis]
    points[:, 2] += half_extent[2]
    return points


def _object(rng, config: SynthSceneConfig, shape: int, label: int, instance: int, speed_range) -> SceneObject:
    half_extent, reflectance = SHAPES[shape]
    template = box_surface(rng, half_extent, config.points_per_object)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    speed = rng.uniform(*speed_range)
    velocity = speed * np.array([np.cos(heading), np.sin(heading), 0.0])
    # The drawn position is the middle of the trajectory, not its start
    origin = np.zeros(3)
    origin[:2] = rng.uniform(-config.extent / 2, config.extent / 2, size=2)
    origin -= velocity * (config.frame_count - 1) / 2.0
    return SceneObject(
        label=label,
        instance=instance,
        template=template,
        reflectance=np.clip(reflectance + rng.normal(0.0, 0.05, size=config.points_per_object), 0.0, 1.0),
        origin=origin,
        velocity=velocity,
    )


def build_scene(config: SynthSceneConfig, rng: np.random.Generator) -> List[SceneObject]:
    """
    Ground plane, then static objects, then moving ones; instance ids count from 1.

    Static objects cycle car, person, building, so with two or fewer of them
    every static object has a moving lookalike.
    """
    objects = []
    if config.ground_points:
        ground = np.zeros((config.ground_points, 3))
        ground[:, :2] = rng.uniform(-config.extent, config.extent, size=(config.ground_points, 2))
        objects.append(
            SceneObject(
                label=GROUND,
                instance=0,
                template=ground,
                reflectance=np.clip(0.1 + rng.normal(0.0, 0.02, size=config.ground_points), 0.0, 1.0),
                origin=np.zeros(3),
                velocity=np.zeros(3),
            )
        )
    for i in range(config.num_static):
        shape = (CAR, PERSON, BUILDING)[i % 3]
        objects.append(_object(rng, config, shape, shape, len(objects), config.static_speed))
    for i in range(config.num_moving):
        shape = (CAR, PERSON)[i % 2]
        objects.append(_object(rng, config, shape, MOVING_VARIANT[shape], len(objects), config.moving_speed))
    return objects


def render_frame(objects: List[SceneObject], frame: int, rng: np.random.Generator, noise_sigma: float) -> PointCloud:
    positions = np.concatenate([o.points_at(frame) for o in objects]) if objects else np.zeros((0, 3))
    if noise_sigma > 0:
        positions = positions + rng.normal(0.0, noise_sigma, size=positions.shape)
    reflectance = np.concatenate([o.reflectance for o in objects]) if objects else np.zeros(0)
    labels = np.concatenate([np.full(o.template.shape[0], o.label) for o in objects]) if objects else np.zeros(0)
    return PointCloud(positions=positions, features=reflectance[:, None], labels=labels, frame_index=frame)


def synth_sequence(config: SynthSceneConfig, sequence_index: int) -> SyntheticSequence:
    """Deterministic for a given (seed, sequence_index)."""
    rng = np.random.default_rng([config.seed, sequence_index])
    sequence_id = f"{sequence_index:02d}"
    objects = build_scene(config, rng)
    clouds = [
        render_frame(objects, frame, rng, config.noise_sigma).replace(sequence_id=sequence_id)
        for frame in range(config.frame_count)
    ]
    sample = SequenceSample(clouds=clouds, indices=list(range(config.frame_count)), sequence_id=sequence_id)
    return SyntheticSequence(sequence_id=sequence_id, objects=objects, sample=sample)


def synth_generate(config: SynthSceneConfig) -> List[SequenceSample]:
    """One sample per sequence holding all of its frames, in the (static) world frame."""
    return [synth_sequence(config, i).sample for i in range(config.num_sequences)]


def write_dataset(root: Union[str, Path], config: SynthSceneConfig) -> DatasetManifest:
    """
    Write generated sequences in the SemanticKITTI layout plus ``manifest.json``.

    The sensor is static, so every pose is the identity.
    """
    root = Path(root)
    sequence_ids = []
    for sequence in (synth_sequence(config, i) for i in range(config.num_sequences)):
        directory = root / "sequences" / sequence.sequence_id
        (directory / "velodyne").mkdir(parents=True, exist_ok=True)
        (directory / "labels").mkdir(parents=True, exist_ok=True)
        instances = np.concatenate([np.full(o.template.shape[0], o.instance) for o in sequence.objects])
        for frame, cloud in enumerate(sequence.sample.clouds):
            write_scan(directory / "velodyne" / f"{frame:06d}.bin", cloud)
            write_labels(directory / "labels" / f"{frame:06d}.label", cloud.labels, instances)
        write_poses(directory / "poses.txt", np.tile(np.eye(4), (config.frame_count, 1, 1)))
        (directory / "calib.txt").write_text("Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n")
        sequence_ids.append(sequence.sequence_id)
    manifest = DatasetManifest(name="synthetic", classes=SYNTH_CLASSES, sequences=sequence_ids, synthetic=config)
    (root / "manifest.json").write_text(manifest.model_dump_json(indent=2))
    logger.info(f"Wrote {len(sequence_ids)} synthetic sequences of {config.frame_count} frames to {root}")
    return manifest
