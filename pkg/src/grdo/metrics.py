"""Confusion matrices, per-class and macro F1, per-group challenge scores."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, forward


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def f1_per_class(cm) -> np.ndarray:
    """``2TP / (2TP + FP + FN)`` per class, 0 where the denominator is 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(cm) -> float:
    return float(f1_per_class(cm).mean())


def challenge_p_task1(per_centre_macro) -> float:
    vals = [float(v) for v in per_centre_macro]
    if len(vals) != 4:
        raise ValueError(f"task-1 score needs exactly 4 centre values, got {len(vals)}")
    return sum(vals) / 4


def challenge_p_task2(male_macro: float, female_macro: float) -> float:
    return (male_macro + female_macro) / 2


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(logits, axis=1)


@dataclass
class MetricsReport:
    grouping: str
    num_classes: int
    confusion: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def group_ids(self) -> list[int]:
        return sorted(self.confusion)

    def per_class_f1(self) -> dict[int, np.ndarray]:
        return {g: f1_per_class(cm) for g, cm in sorted(self.confusion.items())}

    def macro(self) -> dict[int, float]:
        return {g: macro_f1(cm) for g, cm in sorted(self.confusion.items())}

    @property
    def challenge_p(self) -> float:
        """Mean of per-group macro F1 over the groups present."""
        m = self.macro()
        return float(np.mean(list(m.values()))) if m else 0.0

    @property
    def worst_group_macro_f1(self) -> float:
        m = self.macro()
        return min(m.values()) if m else 0.0

    @property
    def max_gap(self) -> float:
        m = list(self.macro().values())
        return max(m) - min(m) if m else 0.0

    def cell_f1(self, group: int, class_id: int) -> float:
        return float(f1_per_class(self.confusion[group])[class_id])

    def overall_confusion(self) -> np.ndarray:
        return sum(self.confusion.values(), np.zeros((self.num_classes,) * 2, dtype=np.int64))

    def to_dict(self) -> dict:
        f1 = self.per_class_f1()
        return {
            "grouping": self.grouping,
            "num_classes": self.num_classes,
            "groups": {str(g): {"confusion": self.confusion[g].tolist(),
                                "per_class_f1": f1[g].tolist(),
                                "macro_f1": macro_f1(self.confusion[g])}
                       for g in self.group_ids},
            "challenge_p": self.challenge_p,
            "worst_group_macro_f1": self.worst_group_macro_f1,
            "max_gap": self.max_gap,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "group", "class", "value"])
        for g, f1 in self.per_class_f1().items():
            for c, v in enumerate(f1):
                w.writerow(["class_f1", g, c, repr(float(v))])
            w.writerow(["macro_f1", g, "", repr(macro_f1(self.confusion[g]))])
        w.writerow(["challenge_p", "", "", repr(self.challenge_p)])
        w.writerow(["worst_group_macro_f1", "", "", repr(self.worst_group_macro_f1)])
        w.writerow(["max_gap", "", "", repr(self.max_gap)])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        conf = {int(g): np.asarray(v["confusion"], dtype=np.int64) for g, v in d["groups"].items()}
        return cls(d["grouping"], d["num_classes"], conf)


def report_from_predictions(y_true, y_pred, groups, num_classes: int,
                            grouping: str = "group") -> MetricsReport:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    groups = np.asarray(groups)
    conf = {int(g): confusion_matrix(y_true[groups == g], y_pred[groups == g], num_classes)
            for g in np.unique(groups)}
    return MetricsReport(grouping, num_classes, conf)


def predict_dataset(params: ModelParams, dataset, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for every sample, in dataset order."""
    feats = dataset.features
    out = [forward(params, feats[i:i + batch_size], train_mode=False).data
           for i in range(0, len(feats), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.config.num_classes))


def evaluate(params: ModelParams, dataset, grouping: str | None = None) -> MetricsReport:
    """Eval-mode forward, argmax, confusion per evaluation group."""
    grouping = grouping or dataset.attribute_name()
    labels = dataset.labels
    if labels.size and labels.max() >= params.config.num_classes:
        raise ValueError(f"dataset has label {labels.max()} but the model has "
                         f"{params.config.num_classes} classes")
    logits = predict_dataset(params, dataset)
    return report_from_predictions(labels, predict(logits), dataset.attr(grouping),
                                   params.config.num_classes, grouping)
