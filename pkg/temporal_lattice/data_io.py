"""
SemanticKITTI-format readers and writers, sequence assembly and augmentation.

Directory layout (shared by the real dataset and the synthetic generator):

    <root>/sequences/<id>/velodyne/<frame>.bin   float32 x, y, z, reflectance
    <root>/sequences/<id>/labels/<frame>.label   uint32, low 16 bits semantic
    <root>/sequences/<id>/poses.txt              12 floats per line (3x4, row-major)
    <root>/sequences/<id>/calib.txt              "Tr:" line, velodyne to camera
    <root>/manifest.json                         optional, synthetic datasets only
"""

import json
import queue
import threading
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .datatypes import AugmentConfig, ClassInfo, DatasetManifest, PointCloud, SequenceSample
from .errors import ConsistencyError, DataFormatError
from .lattice import sigma_vector
from .utils import optional_typecheck

SCAN_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
SCAN_RECORD_BYTES = 16
LABEL_RECORD_BYTES = 4

PathLike = Union[str, Path]
SigmaLike = Union[float, Sequence[float], np.ndarray]

# Raw SemanticKITTI ids to the 25-class multiple-scans training ids; 0 is unlabeled.
SEMANTIC_KITTI_LEARNING_MAP: Dict[int, int] = {
    0: 0, 1: 0, 10: 1, 11: 2, 13: 5, 15: 3, 16: 5, 18: 4, 20: 5,
    30: 6, 31: 7, 32: 8, 40: 9, 44: 10, 48: 11, 49: 12, 50: 13,
    51: 14, 52: 0, 60: 9, 70: 15, 71: 16, 72: 17, 80: 18, 81: 19,
    99: 0, 252: 20, 253: 21, 254: 22, 255: 23, 256: 24, 257: 24,
    258: 25, 259: 24,
}  # fmt: skip

SEMANTIC_KITTI_CLASSES: List[ClassInfo] = [
    ClassInfo(id=i, name=name, moving=name.startswith("moving-"))
    for i, name in enumerate(
        [
            "unlabeled", "car", "bicycle", "motorcycle", "truck", "other-vehicle",
            "person", "bicyclist", "motorcyclist", "road", "parking", "sidewalk",
            "other-ground", "building", "fence", "vegetation", "trunk", "terrain",
            "pole", "traffic-sign", "moving-car", "moving-bicyclist", "moving-person",
            "moving-motorcyclist", "moving-other-vehicle", "moving-truck",
        ]
    )
]  # fmt: skip


def remap_table(mapping: Optional[Mapping[int, int]] = None, ignore_label: int = 0) -> np.ndarray:
    """
    Lookup table over all 16-bit semantic ids; unmapped ids go to ``ignore_label``.

    ``mapping=None`` gives the identity table.
    """
    if mapping is None:
        return np.arange(1 << 16, dtype=np.int64)
    table = np.full(1 << 16, ignore_label, dtype=np.int64)
    for raw, train in mapping.items():
        table[raw] = train
    return table


def split_labels(raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Split raw label words into (semantic = low 16 bits, instance = high 16 bits)."""
    raw = np.asarray(raw, dtype=np.uint32)
    return (raw & 0xFFFF).astype(np.int64), (raw >> 16).astype(np.int64)


# --- Scans and labels ---


@optional_typecheck
def read_scan(path: PathLike, use_reflectance: bool = True) -> PointCloud:
    """
    Read a ``.bin`` scan of 16-byte records (x, y, z, reflectance as float32).

    Raises:
        DataFormatError: If the file size is not a multiple of 16 bytes.
    """
    payload = Path(path).read_bytes()
    if len(payload) % SCAN_RECORD_BYTES:
        raise DataFormatError(
            f"Scan size {len(payload)} is not a multiple of {SCAN_RECORD_BYTES} bytes",
            path=str(path),
            offset=len(payload) - len(payload) % SCAN_RECORD_BYTES,
        )
    records = np.frombuffer(payload, dtype=SCAN_DTYPE).reshape(-1, 4)
    features = records[:, 3:4] if use_reflectance else np.zeros((records.shape[0], 0))
    return PointCloud(positions=records[:, :3], features=features)


@optional_typecheck
def write_scan(path: PathLike, cloud: PointCloud) -> None:
    """Write positions (meters) and the first feature column as reflectance."""
    m = cloud.num_points
    reflectance = cloud.features[:, 0] if cloud.feature_dim else np.zeros(m)
    records = np.column_stack([cloud.meters(), reflectance]).astype(SCAN_DTYPE)
    Path(path).write_bytes(records.tobytes())


def read_labels(path: PathLike, remap: Optional[np.ndarray] = None, expected_count: Optional[int] = None) -> np.ndarray:
    """
    Read a ``.label`` file and return training ids.

    Args:
        remap: Table from ``remap_table``; identity when None.
        expected_count: Point count of the paired scan.

    Raises:
        DataFormatError: If the file size is not a multiple of 4 bytes.
        ConsistencyError: If the label count differs from ``expected_count``.
    """
    payload = Path(path).read_bytes()
    if len(payload) % LABEL_RECORD_BYTES:
        raise DataFormatError(
            f"Label file size {len(payload)} is not a multiple of {LABEL_RECORD_BYTES} bytes",
            path=str(path),
            offset=len(payload) - len(payload) % LABEL_RECORD_BYTES,
        )
    semantic, _ = split_labels(np.frombuffer(payload, dtype=LABEL_DTYPE))
    if expected_count is not None and semantic.shape[0] != expected_count:
        raise ConsistencyError(f"{path} holds {semantic.shape[0]} labels for a scan of {expected_count} points")
    return semantic if remap is None else remap[semantic]


def write_labels(path: PathLike, labels: np.ndarray, instances: Optional[np.ndarray] = None) -> None:
    labels = np.asarray(labels, dtype=np.uint32)
    if instances is None:
        instances = np.zeros_like(labels)
    words = (np.asarray(instances, dtype=np.uint32) << 16) | (labels & 0xFFFF)
    Path(path).write_bytes(words.astype(LABEL_DTYPE).tobytes())


# --- Poses ---


def _parse_rows(line: str, path: PathLike, line_number: int) -> np.ndarray:
    try:
        values = np.array([float(v) for v in line.split()], dtype=np.float64)
    except ValueError as e:
        raise DataFormatError(f"Non-numeric value on line {line_number}: {e}", path=str(path)) from e
    if values.shape[0] != 12:
        raise DataFormatError(f"Expected 12 values on line {line_number}, got {values.shape[0]}", path=str(path))
    return np.vstack([values.reshape(3, 4), [0.0, 0.0, 0.0, 1.0]])


def read_calibration(path: Optional[PathLike]) -> np.ndarray:
    """The ``Tr`` (velodyne to camera) transform of ``calib.txt``; identity when absent."""
    if path is None or not Path(path).exists():
        return np.eye(4)
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.startswith("Tr:"):
            return _parse_rows(line[3:], path, number)
    return np.eye(4)


def read_poses(poses_path: PathLike, calib_path: Optional[PathLike] = None) -> np.ndarray:
    """
    Per-frame scanner poses as (N, 4, 4) velodyne-to-world transforms.

    KITTI poses are given for the camera; with calibration ``Tr`` the
    velodyne pose is ``Tr^-1 . pose . Tr``.

    Raises:
        DataFormatError: On a malformed line.
    """
    tr = read_calibration(calib_path)
    tr_inv = np.linalg.inv(tr)
    poses = [
        tr_inv @ _parse_rows(line, poses_path, number) @ tr
        for number, line in enumerate(Path(poses_path).read_text().splitlines(), start=1)
        if line.strip()
    ]
    return np.stack(poses) if poses else np.zeros((0, 4, 4))


def write_poses(path: PathLike, poses: np.ndarray) -> None:
    lines = [" ".join(f"{v:.9g}" for v in pose[:3].reshape(-1)) for pose in poses]
    Path(path).write_text("\n".join(lines) + "\n")


def transform_points(transform: np.ndarray, positions: np.ndarray) -> np.ndarray:
    return positions @ transform[:3, :3].T + transform[:3, 3]


# --- Dataset ---


class SequenceDataset:
    """
    A SemanticKITTI-style dataset on disk.

    Attributes:
        root (Path): Dataset root.
        manifest (DatasetManifest): Classes and sequences; from ``manifest.json``
            when present, SemanticKITTI defaults otherwise.
        sequences (List[str]): Sequence ids found under ``sequences/``.
        remap (np.ndarray): Raw-id lookup table applied to labels.
        use_reflectance (bool): Keep reflectance as the point feature.
    """

    def __init__(self, root: PathLike, sequences: Optional[Sequence[str]] = None, use_reflectance: bool = True):
        self.root = Path(root)
        sequences_dir = self.root / "sequences"
        if not sequences_dir.is_dir():
            raise DataFormatError(f"No 'sequences' directory under {self.root}", path=str(self.root))
        manifest_path = self.root / "manifest.json"
        if manifest_path.exists():
            self.manifest = DatasetManifest.model_validate(json.loads(manifest_path.read_text()))
            self.remap = remap_table(None)
        else:
            self.manifest = DatasetManifest(name="semantic-kitti", classes=SEMANTIC_KITTI_CLASSES)
            self.remap = remap_table(SEMANTIC_KITTI_LEARNING_MAP, self.manifest.ignore_label)
        found = sorted(p.name for p in sequences_dir.iterdir() if (p / "velodyne").is_dir())
        if sequences:
            missing = sorted(set(sequences) - set(found))
            if missing:
                raise DataFormatError(f"Sequences {missing} not found under {sequences_dir}", path=str(sequences_dir))
            found = [s for s in found if s in set(sequences)]
        self.sequences = found
        self.use_reflectance = use_reflectance
        self._frames: Dict[str, List[Path]] = {}
        self._poses: Dict[str, np.ndarray] = {}
        logger.info(f"Found {len(self.sequences)} sequences under {self.root}")

    @property
    def ignore_label(self) -> int:
        return self.manifest.ignore_label

    @property
    def classes(self) -> List[ClassInfo]:
        return self.manifest.classes

    def sequence_dir(self, sequence_id: str) -> Path:
        return self.root / "sequences" / sequence_id

    def frames(self, sequence_id: str) -> List[Path]:
        if sequence_id not in self._frames:
            self._frames[sequence_id] = sorted((self.sequence_dir(sequence_id) / "velodyne").glob("*.bin"))
        return self._frames[sequence_id]

    def __len__(self) -> int:
        return sum(len(self.frames(s)) for s in self.sequences)

    def poses(self, sequence_id: str) -> np.ndarray:
        """Velodyne poses of every frame; identity poses when ``poses.txt`` is missing."""
        if sequence_id not in self._poses:
            directory = self.sequence_dir(sequence_id)
            count = len(self.frames(sequence_id))
            if (directory / "poses.txt").exists():
                poses = read_poses(directory / "poses.txt", directory / "calib.txt")
                if poses.shape[0] < count:
                    raise ConsistencyError(f"Sequence {sequence_id} has {count} scans but {poses.shape[0]} poses")
            else:
                logger.warning(f"No poses.txt for sequence {sequence_id}, using identity poses")
                poses = np.tile(np.eye(4), (count, 1, 1))
            self._poses[sequence_id] = poses
        return self._poses[sequence_id]

    def label_path(self, sequence_id: str, index: int) -> Path:
        scan = self.frames(sequence_id)[index]
        return self.sequence_dir(sequence_id) / "labels" / f"{scan.stem}.label"

    def load_cloud(self, sequence_id: str, index: int) -> PointCloud:
        """Scan ``index`` of a sequence with its labels (when present) and pose."""
        scan_path = self.frames(sequence_id)[index]
        cloud = read_scan(scan_path, use_reflectance=self.use_reflectance)
        label_path = self.label_path(sequence_id, index)
        labels = None
        if label_path.exists():
            labels = read_labels(label_path, self.remap, expected_count=cloud.num_points)
        return cloud.replace(
            labels=labels,
            pose=self.poses(sequence_id)[index],
            sequence_id=sequence_id,
            frame_index=index,
        )


def sequence_indices(anchor: int, n: int, s: int) -> List[int]:
    """Dataset indices t-(n-1)s, ..., t-s, t of a sample, oldest first."""
    return [anchor - (n - 1 - i) * s for i in range(n)]


def to_anchor_frame(cloud: PointCloud, anchor_pose: np.ndarray, sigma: SigmaLike) -> PointCloud:
    """Move a cloud into the anchor's frame with (pose_t)^-1 . pose_i, then divide by sigma."""
    relative = np.linalg.inv(anchor_pose) @ cloud.pose
    scale = sigma_vector(sigma, cloud.positions.shape[1])
    positions = transform_points(relative, cloud.meters()) / scale
    return cloud.replace(positions=positions, pose=relative, scaled_by=scale.tolist())


def assemble_sequence(
    dataset: SequenceDataset, sequence_id: str, anchor: int, n: int, s: int, sigma: SigmaLike = 0.6
) -> Optional[SequenceSample]:
    """
    The n clouds ending at ``anchor`` in the anchor frame, scaled by 1/sigma.

    Returns None (and logs) when the window would start before the first
    frame; incomplete windows are not padded.
    """
    indices = sequence_indices(anchor, n, s)
    count = len(dataset.frames(sequence_id))
    if indices[0] < 0 or anchor >= count:
        logger.debug(f"Skipping sample {sequence_id}:{anchor}, window {indices} is outside 0..{count - 1}")
        return None
    clouds = [dataset.load_cloud(sequence_id, i) for i in indices]
    anchor_pose = clouds[-1].pose
    return SequenceSample(
        clouds=[to_anchor_frame(c, anchor_pose, sigma) for c in clouds],
        indices=indices,
        ignore_label=dataset.ignore_label,
        sequence_id=sequence_id,
    )


# --- Augmentation ---


def random_rigid_transform(rng: np.random.Generator, config: AugmentConfig, sigma: SigmaLike = 1.0) -> np.ndarray:
    """
    One rotation about the height axis, optional mirroring across the x-z
    plane and a horizontal translation. The translation bound is divided by
    the x and y scales of ``sigma``; the default leaves it in meters.
    """
    transform = np.eye(4)
    if config.rotate:
        angle = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(angle), np.sin(angle)
        transform[:2, :2] = [[c, -s], [s, c]]
    if config.mirror and rng.random() < 0.5:
        transform[:3, :3] = transform[:3, :3] @ np.diag([1.0, -1.0, 1.0])
    shift = config.translation_range / sigma_vector(sigma, 3)[:2]
    transform[:2, 3] = rng.uniform(-shift, shift, size=2)
    return transform


@optional_typecheck
def augment(sample: SequenceSample, rng: np.random.Generator, config: Optional[AugmentConfig] = None) -> SequenceSample:
    """
    Apply one random rigid transform to every cloud of the sample, then independent per-point noise.

    The transform and the noise act in meters and each cloud is scaled back
    with its own ``scaled_by``, so per-axis scales keep the motion rigid.
    Labels are untouched.
    """
    config = config or AugmentConfig()
    if not config.enabled:
        return sample
    transform = random_rigid_transform(rng, config)
    clouds = []
    for cloud in sample.clouds:
        positions = transform_points(transform, cloud.meters())
        if config.noise_sigma > 0:
            positions = positions + rng.normal(0.0, config.noise_sigma, size=positions.shape)
        if cloud.scaled_by is not None:
            positions = positions / np.asarray(cloud.scaled_by)
        clouds.append(cloud.replace(positions=positions))
    return sample.model_copy(update={"clouds": clouds})


# --- Sample iteration ---


def sample_keys(dataset: SequenceDataset, n: int, s: int) -> List[Tuple[str, int]]:
    """Every (sequence, anchor) with a complete window."""
    keys = []
    for sequence_id in dataset.sequences:
        count = len(dataset.frames(sequence_id))
        first = (n - 1) * s
        keys.extend((sequence_id, anchor) for anchor in range(first, count))
        if count and first >= count:
            logger.warning(f"Sequence {sequence_id} has {count} frames, too few for n={n}, s={s}")
    return keys


def iter_samples(
    dataset: SequenceDataset,
    n: int,
    s: int,
    sigma: SigmaLike = 0.6,
    rng: Optional[np.random.Generator] = None,
    augment_config: Optional[AugmentConfig] = None,
    shuffle: bool = False,
    max_samples: Optional[int] = None,
    prefetch: int = 2,
) -> Iterator[SequenceSample]:
    """
    Yield assembled (and optionally augmented) samples.

    Loading runs on one background thread feeding a queue of at most
    ``prefetch`` samples, so reading the next sample overlaps training on
    the current one. All randomness is drawn on that thread in a fixed
    order, so a seeded ``rng`` gives the same samples every run.
    """
    keys = sample_keys(dataset, n, s)
    if shuffle:
        if rng is None:
            raise ValueError("Shuffling needs an rng")
        keys = [keys[i] for i in rng.permutation(len(keys))]
    if max_samples is not None:
        keys = keys[:max_samples]

    def produce(key):
        sample = assemble_sequence(dataset, key[0], key[1], n, s, sigma)
        if sample is not None and augment_config is not None and rng is not None:
            sample = augment(sample, rng, augment_config)
        return sample

    if prefetch <= 0:
        for key in keys:
            sample = produce(key)
            if sample is not None:
                yield sample
        return

    buffer: "queue.Queue" = queue.Queue(maxsize=prefetch)
    done = object()
    stop = threading.Event()

    def worker():
        try:
            for key in keys:
                if stop.is_set():
                    return
                buffer.put(produce(key))
        except Exception as e:  # handed to the consumer
            buffer.put(e)
        finally:
            buffer.put(done)

    thread = threading.Thread(target=worker, name="sample-prefetch", daemon=True)
    thread.start()
    try:
        while True:
            item = buffer.get()
            if item is done:
                break
            if isinstance(item, Exception):
                raise item
            if item is not None:
                yield item
    finally:
        stop.set()
        while thread.is_alive():
            try:
                buffer.get_nowait()
            except queue.Empty:
                thread.join(timeout=0.05)
