import beartype  # to trigger the runtime typechecking
import numpy as np
import pytest

from temporal_lattice.datatypes import ClassInfo
from temporal_lattice.errors import ConsistencyError
from temporal_lattice.evaluation import (
    ConfusionMatrix,
    accumulate,
    iou,
    merge,
    moving_static_accuracy,
    moving_static_report,
    to_text_table,
)

CLASSES = [
    ClassInfo(id=0, name="unlabeled"),
    ClassInfo(id=1, name="road"),
    ClassInfo(id=2, name="car"),
    ClassInfo(id=3, name="moving-car", moving=True),
]


def test_hand_computed_iou():
    cm = accumulate(ConfusionMatrix(4), predictions=[1, 1, 2, 2, 3, 1], labels=[1, 2, 2, 2, 3, 0])
    assert cm.total == 5
    per_class, miou = iou(cm)
    # road: tp 1, fp 1 -> 0.5; car: tp 2, fn 1 -> 2/3; moving-car: 1
    assert per_class[1] == pytest.approx(0.5)
    assert per_class[2] == pytest.approx(2.0 / 3.0)
    assert per_class[3] == pytest.approx(1.0)
    assert np.isnan(per_class[0])
    assert miou == pytest.approx((0.5 + 2.0 / 3.0 + 1.0) / 3.0)


def test_half_overlap_gives_one_half():
    _, miou = iou(ConfusionMatrix(2).accumulate([1, 0], [1, 1]))
    assert miou == pytest.approx(0.5)


def test_absent_classes_are_left_out_of_the_mean():
    per_class, miou = iou(ConfusionMatrix(4).accumulate([1, 1], [1, 1]))
    assert np.isnan(per_class[2])
    assert miou == pytest.approx(1.0)
    assert iou(ConfusionMatrix(4))[1] is None


def test_accumulation_order_does_not_matter(rng):
    batches = [(rng.integers(0, 4, size=50), rng.integers(0, 4, size=50)) for _ in range(5)]
    forward = ConfusionMatrix(4)
    for predictions, labels in batches:
        forward.accumulate(predictions, labels)
    parts = [ConfusionMatrix(4).accumulate(p, l) for p, l in reversed(batches)]
    assert np.array_equal(merge(parts).counts, forward.counts)


def test_out_of_range_and_mismatched_inputs():
    with pytest.raises(ConsistencyError):
        ConfusionMatrix(3).accumulate([0, 1], [1])
    with pytest.raises(ConsistencyError):
        ConfusionMatrix(3).accumulate([5], [1])
    with pytest.raises(ConsistencyError):
        ConfusionMatrix(3).merge(ConfusionMatrix(4))
    with pytest.raises(ConsistencyError):
        merge([])


def test_report_groups_moving_and_static_classes():
    cm = ConfusionMatrix(4).accumulate([1, 2, 2, 3, 2], [1, 2, 2, 3, 3])
    report = moving_static_report(cm, CLASSES)
    assert list(report.per_class) == ["road", "car", "moving-car"]
    assert report.moving_miou == pytest.approx(0.5)
    assert report.static_miou == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)
    assert report.evaluated_points == 5
    table = to_text_table(report)
    assert "moving-car" in table
    assert " 50.00" in table


def test_table_marks_absent_classes():
    report = moving_static_report(ConfusionMatrix(4).accumulate([1], [1]), CLASSES)
    assert report.per_class["car"] is None
    assert report.moving_miou is None
    assert "-" in to_text_table(report).splitlines()[3]


def test_moving_static_accuracy_ignores_class_confusions():
    # static car predicted as road is still a correct static decision
    accuracy = moving_static_accuracy([1, 3, 2, 2], [2, 3, 3, 0], CLASSES)
    assert accuracy == pytest.approx(2.0 / 3.0)
    assert moving_static_accuracy([1], [0], CLASSES) is None


def test_balanced_accuracy_weighs_both_groups_equally():
    labels = [1, 1, 1, 3]
    all_static = [1, 1, 1, 1]
    assert moving_static_accuracy(all_static, labels, CLASSES) == pytest.approx(0.75)
    assert moving_static_accuracy(all_static, labels, CLASSES, balanced=True) == pytest.approx(0.5)
