"""
Central finite-difference checks for every differentiable operator.

Each registered case builds, in 64-bit precision, a small random fixture
from a seeded generator and returns a scalar loss closure plus the tensors to differentiate. The
loss projects the operator output onto a fixed random direction so every
output element contributes to the check. A check draws ``TRIALS`` fixtures
from consecutive seeds and reports the worst one.
"""

from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from loguru import logger

from . import autodiff as ad
from . import fusion, lattice_ops, model
from .autodiff import Tensor
from .datatypes import ModelConfig, PointCloud, SequenceConfig
from .lattice import SparseLattice

TOLERANCE = 1e-4
EPSILON = 1e-6
TRIALS = 5

LossCase = Tuple[Callable[[], Tensor], List[Tensor]]
REGISTRY: Dict[str, Callable[[np.random.Generator], LossCase]] = {}


class GradCheckResult(NamedTuple):
    name: str
    error: float
    passed: bool
    trials: int = 1


def register(name: str):
    def decorator(builder):
        REGISTRY[name] = builder
        return builder

    return decorator


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / (||a|| + ||n||), zero when both vanish."""
    denominator = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denominator < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denominator)


def gradient_error(
    loss_fn: Callable[[], Tensor], params: List[Tensor], eps: float = EPSILON, corrupt: bool = False
) -> float:
    """
    Compare backward() against central differences over every element of ``params``.

    Args:
        loss_fn: Rebuilds the scalar loss from the current parameter values.
        params: Leaf tensors perturbed in place.
        corrupt: Skew the analytic gradients, to prove the check can fail.
    """
    for param in params:
        param.zero_grad()
    ad.backward(loss_fn(), params)
    analytic = np.concatenate([p.grad.reshape(-1) for p in params])
    if corrupt:
        analytic = analytic * 1.5 + 1e-3

    numeric = []
    with ad.no_grad():
        for param in params:
            for index in np.ndindex(*param.shape):
                original = param.data[index]
                param.data[index] = original + eps
                plus = float(loss_fn().data)
                param.data[index] = original - eps
                minus = float(loss_fn().data)
                param.data[index] = original
                numeric.append((plus - minus) / (2 * eps))
    return relative_error(analytic, np.asarray(numeric))


def projected(out_fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Scalar loss sum(out * R) for a fixed random R."""
    shape = out_fn().shape
    projection = rng.normal(size=shape)

    def loss():
        return ad.sum_(ad.mul(out_fn(), projection))

    return loss


def run_gradcheck(name: str, seed: int = 0, corrupt: bool = False, trials: int = TRIALS) -> GradCheckResult:
    """Worst relative error of check ``name`` over fixtures from seeds seed .. seed + trials - 1."""
    if trials < 1:
        raise ValueError(f"A gradient check needs at least one fixture, got trials={trials}")
    errors = []
    with ad.default_dtype(np.float64):
        for trial in range(trials):
            loss_fn, params = REGISTRY[name](np.random.default_rng(seed + trial))
            errors.append(gradient_error(loss_fn, params, corrupt=corrupt))
    error = max(errors)
    passed = error < TOLERANCE
    log = logger.debug if passed else logger.error
    log(f"Gradient check '{name}': max relative error {error:.2e} over {trials} fixtures")
    return GradCheckResult(name=name, error=error, passed=passed, trials=trials)


def run_all(seed: int = 0, corrupt: Optional[str] = None, trials: int = TRIALS) -> List[GradCheckResult]:
    if corrupt is not None and corrupt not in REGISTRY:
        raise KeyError(f"No gradient check named '{corrupt}'")
    return [run_gradcheck(name, seed=seed, corrupt=name == corrupt, trials=trials) for name in REGISTRY]


# --- Fixtures ---


def _param(rng: np.random.Generator, *shape, scale: float = 1.0, low: Optional[float] = None) -> Tensor:
    if low is not None:
        return ad.parameter(rng.uniform(low, low + 1.0, size=shape))
    return ad.parameter(rng.normal(0.0, scale, size=shape))


def random_cloud(rng: np.random.Generator, points: int = 6, dim: int = 3, features: int = 1, spread: float = 1.5) -> PointCloud:
    return PointCloud(
        positions=rng.uniform(-spread, spread, size=(points, dim)),
        features=rng.uniform(0.0, 1.0, size=(points, features)),
    )


def random_lattice(rng: np.random.Generator, points: int = 6, dim: int = 3) -> Tuple[SparseLattice, lattice_ops.VertexBags]:
    lattice = SparseLattice(dim=dim, sigma=1.0)
    bags = lattice_ops.distribute(random_cloud(rng, points, dim), lattice)
    return lattice, bags


# --- Primitive cases ---


def _binary(op, shape_a=(3, 4), shape_b=(3, 4)):
    def build(rng):
        a, b = _param(rng, *shape_a), _param(rng, *shape_b)
        return projected(lambda: op(a, b), rng), [a, b]

    return build


def _unary(op, low: Optional[float] = None):
    def build(rng):
        a = _param(rng, 3, 4, low=low)
        return projected(lambda: op(a), rng), [a]

    return build


register("add")(_binary(ad.add, (3, 4), (4,)))
register("sub")(_binary(ad.sub, (3, 1), (3, 4)))
register("mul")(_binary(ad.mul))
register("matmul")(_binary(ad.matmul, (3, 4), (4, 2)))
register("minimum")(_binary(ad.minimum))
register("relu")(_unary(ad.relu))
register("sigmoid")(_unary(ad.sigmoid))
register("tanh")(_unary(ad.tanh))
register("exp")(_unary(ad.exp))
register("log")(_unary(ad.log, low=0.5))
register("log_softmax")(_unary(ad.log_softmax))
register("row_norm")(_unary(ad.row_norm))


@register("sum")
def _sum_case(rng):
    a = _param(rng, 3, 4, 2)
    return projected(lambda: ad.sum_(a, axis=1), rng), [a]


@register("reshape")
def _reshape_case(rng):
    a = _param(rng, 3, 4)
    return projected(lambda: ad.reshape(a, (2, 6)), rng), [a]


@register("concat")
def _concat_case(rng):
    a, b = _param(rng, 3, 2), _param(rng, 3, 4)
    return projected(lambda: ad.concat([a, b], axis=1), rng), [a, b]


@register("gather_rows")
def _gather_case(rng):
    a = _param(rng, 5, 3)
    index = np.array([[0, 4, -1], [2, 2, 1]])
    return projected(lambda: ad.gather_rows(a, index), rng), [a]


@register("segment_sum")
def _segment_sum_case(rng):
    a = _param(rng, 6, 3)
    segments = np.array([0, 2, 2, 1, 0, 2])
    return projected(lambda: ad.segment_sum(a, segments, 4), rng), [a]


@register("segment_max")
def _segment_max_case(rng):
    a = _param(rng, 6, 3)
    segments = np.array([0, 2, 2, 1, 0, 2])
    return projected(lambda: ad.segment_max(a, segments, 4), rng), [a]


@register("take_along_rows")
def _take_case(rng):
    a = _param(rng, 4, 3)
    columns = np.array([2, 0, 1, 2])
    return projected(lambda: ad.take_along_rows(a, columns), rng), [a]


@register("cross_entropy")
def _cross_entropy_case(rng):
    logits = _param(rng, 5, 4)
    labels = np.array([1, 0, 3, 2, 1])
    weights = np.array([0.0, 1.0, 2.0, 0.5])
    return (lambda: ad.cross_entropy(logits, labels, ignore_index=0, class_weights=weights)), [logits]


# --- Lattice operator cases ---


def _conv(rng, dim, cin, cout, name="conv"):
    params = lattice_ops.ConvParams.init(rng, dim, cin, cout, name)
    params.bias.data = rng.normal(size=cout)
    return params


@register("pointnet_aggregate")
def _pointnet_case(rng):
    _, bags = random_lattice(rng)
    params = lattice_ops.LinearParams.init(rng, 4, 3, "pointnet")
    params.bias.data = rng.normal(size=3)
    return projected(lambda: lattice_ops.pointnet_aggregate(bags, params), rng), [params.weight, params.bias]


@register("lattice_convolution")
def _convolution_case(rng):
    lattice, _ = random_lattice(rng)
    x = _param(rng, len(lattice), 3)
    params = _conv(rng, 3, 3, 2)
    loss = projected(lambda: lattice_ops.lattice_convolution(x, lattice, params), rng)
    return loss, [x, params.weight, params.bias]


@register("resnet_block")
def _resnet_case(rng):
    lattice, _ = random_lattice(rng, points=4)
    x = _param(rng, len(lattice), 2)
    first, second = _conv(rng, 3, 2, 2, "c0"), _conv(rng, 3, 2, 2, "c1")
    loss = projected(lambda: lattice_ops.resnet_block(x, lattice, first, second), rng)
    return loss, [x, first.weight, second.weight, second.bias]


@register("downsample")
def _downsample_case(rng):
    hierarchy = lattice_ops.LatticeHierarchy(dim=3, sigma=1.0, levels=1)
    lattice_ops.distribute(random_cloud(rng, 5), hierarchy.lattices[0])
    k = len(hierarchy.lattices[0])
    x = _param(rng, k, 2)
    live = np.ones(k, dtype=bool)
    live[0] = False
    params = _conv(rng, 3, 2, 3)
    loss = projected(lambda: lattice_ops.downsample(x, hierarchy, 0, params, live)[0], rng)
    return loss, [x, params.weight]


@register("upsample")
def _upsample_case(rng):
    fine, _ = random_lattice(rng, points=5)
    coarse, _ = lattice_ops.downsample_lattice(fine)
    x = _param(rng, len(coarse), 3)
    return projected(lambda: lattice_ops.upsample(x, coarse, fine.keys), rng), [x]


@register("slice_values")
def _slice_case(rng):
    lattice, bags = random_lattice(rng)
    x = _param(rng, len(lattice), 3)
    loss = projected(lambda: lattice_ops.slice_values(x, bags.simplex_index, bags.barycentric), rng)
    return loss, [x]


@register("deform_slice")
def _deform_slice_case(rng):
    lattice, bags = random_lattice(rng)
    x = _param(rng, len(lattice), 2)
    offset_net = lattice_ops.LinearParams.init(rng, 8, 4, "offset")
    offset_net.bias.data = rng.normal(0.0, 0.1, size=4)
    loss = projected(lambda: lattice_ops.deform_slice(x, bags.simplex_index, bags.barycentric, offset_net), rng)
    return loss, [x, offset_net.weight, offset_net.bias]


# --- Fusion cases ---


@register("align_states")
def _align_case(rng):
    hidden = _param(rng, 3, 2)
    state = fusion.TemporalState(hidden=hidden, cell=None, vertex_count_at_write=3, live=np.ones(3, dtype=bool))
    return projected(lambda: fusion.align_states(state, 5), rng), [hidden]


@register("gru_fuse")
def _gru_case(rng):
    cell = fusion.GRUFusion(rng, 3)
    h, x = _param(rng, 4, 3), _param(rng, 4, 3)
    loss = projected(lambda: fusion.gru_fuse(h, x, cell), rng)
    return loss, [h, x, cell.update.weight, cell.reset.weight, cell.candidate.bias]


@register("lstm_fuse")
def _lstm_case(rng):
    cell = fusion.LSTMFusion(rng, 3)
    h, c, x = _param(rng, 4, 3), _param(rng, 4, 3), _param(rng, 4, 3)

    def both():
        h_new, c_new = fusion.lstm_fuse(h, c, x, cell)
        return ad.concat([h_new, c_new], axis=1)

    return projected(both, rng), [h, c, x, cell.forget_gate.weight, cell.candidate.bias]


def aflow_fixture(rng: np.random.Generator, channels: int = 3, tries: int = 200):
    """
    AFlow inputs whose neighbor distances stay clear of the clamp at alpha.

    Features are small so that part of the distances fall below alpha.
    """
    lattice, _ = random_lattice(rng, points=3)
    cell = fusion.AFlowFusion(rng, channels)
    neighbors = lattice.neighbor_table()
    for _ in range(tries):
        h = rng.normal(0.0, 0.04, size=(len(lattice), channels))
        x = rng.normal(0.0, 0.04, size=(len(lattice), channels))
        present = neighbors >= 0
        dist = np.linalg.norm(h[np.maximum(neighbors, 0)] - x[:, None, :], axis=-1)
        gap = np.abs(dist - float(cell.alpha.data))[present]
        if gap.min() > 1e-3 and np.any(dist[present] < float(cell.alpha.data)):
            return lattice, cell, ad.parameter(h), ad.parameter(x)
    raise RuntimeError("Could not draw an AFlow fixture away from the clamp")


@register("aflow_fuse")
def _aflow_case(rng):
    lattice, cell, h, x = aflow_fixture(rng)
    cell.fuse_weights.bias.data = np.abs(rng.normal(size=cell.channels)) + 0.5
    loss = projected(lambda: fusion.aflow_fuse(lattice, h, x, cell), rng)
    return loss, [h, x, cell.alpha, cell.beta, cell.fuse_weights.weight]


# --- Whole network ---


def _tiny_model(fusion_spec: str) -> model.TemporalLatticeNet:
    config = ModelConfig(fusion=fusion_spec, widths=[2, 3], num_classes=3, feature_dim=1, seed=3)
    return model.build_model(config=config, sequence=SequenceConfig(sigma=1.0))


@register("forward_sequence")
def _forward_sequence_case(rng):
    net = _tiny_model("GRU-LSTM-AFlow-GRU")
    first = random_cloud(rng, 5)
    second = first.replace(positions=first.positions + rng.normal(0.0, 0.2, size=first.positions.shape))
    loss = projected(lambda: model.forward_sequence(net, [first, second]), rng)
    params = net.parameters()
    chosen = ["classifier.bias", "fusion.early.update.bias", "fusion.middle.forget.bias", "pointnet.bias"]
    return loss, [params[name] for name in chosen]


@register("forward_accumulated")
def _forward_accumulated_case(rng):
    net = _tiny_model("/-/-/-/")
    clouds = [random_cloud(rng, 4), random_cloud(rng, 4)]
    loss = projected(lambda: model.forward_accumulated(net, clouds), rng)
    params = net.parameters()
    return loss, [params["classifier.weight"], params["down1.bias"]]
