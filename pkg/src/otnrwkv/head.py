"""Attribute head, weighted cross-entropy and PAR metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import EmptyEvaluation, ShapeMismatch

PROB_EPS = 1e-7
DECISION_THRESHOLD = 0.5


@dataclass
class AttributePrediction:
    logits: torch.Tensor
    probabilities: torch.Tensor
    binary: torch.Tensor


@dataclass
class AttributeWeights:
    """Per-attribute loss weights, conditional on the sample's label."""

    positive: np.ndarray
    negative: np.ndarray
    positive_ratio: np.ndarray


class AttributeHead(nn.Module):
    def __init__(self, dim: int, num_attributes: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(dim, num_attributes))
        std = dim ** -0.5
        nn.init.trunc_normal_(self.weight, std=std, a=-2 * std, b=2 * std)
        self.bias = nn.Parameter(torch.zeros(num_attributes))

    def forward(self, tokens: torch.Tensor) -> AttributePrediction:
        return classify(tokens, self.weight, self.bias)


def classify(fused_tokens: torch.Tensor, head_weights: torch.Tensor, head_bias: torch.Tensor) -> AttributePrediction:
    if fused_tokens.shape[-1] != head_weights.shape[0] or head_weights.shape[1] != head_bias.shape[0]:
        raise ShapeMismatch(
            f"tokens {tuple(fused_tokens.shape)}, head {tuple(head_weights.shape)}, bias {tuple(head_bias.shape)}")
    logits = fused_tokens.mean(dim=-2) @ head_weights + head_bias
    probs = torch.sigmoid(logits)
    # p == 0.5 counts as positive
    return AttributePrediction(logits, probs, (probs >= DECISION_THRESHOLD).to(torch.int64))


def attribute_weights(labels) -> AttributeWeights:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[0] < 1:
        raise ShapeMismatch(f"labels must be N x M with N >= 1, got {labels.shape}")
    r = labels.mean(axis=0)
    return AttributeWeights(np.exp(1.0 - r), np.exp(r), r)


def wce_loss(probabilities: torch.Tensor, labels, weights: AttributeWeights, eps: float = PROB_EPS) -> torch.Tensor:
    """Weighted binary cross-entropy averaged over samples, summed over attributes."""
    y = torch.as_tensor(np.asarray(labels), dtype=probabilities.dtype, device=probabilities.device)
    if y.shape != probabilities.shape:
        raise ShapeMismatch(f"probabilities {tuple(probabilities.shape)} vs labels {tuple(y.shape)}")
    if y.ndim == 1:
        y, probabilities = y[None], probabilities[None]
    pos = torch.as_tensor(weights.positive, dtype=y.dtype, device=y.device)
    neg = torch.as_tensor(weights.negative, dtype=y.dtype, device=y.device)
    if pos.shape[0] != y.shape[-1]:
        raise ShapeMismatch(f"{pos.shape[0]} weights for {y.shape[-1]} attributes")
    p = probabilities.clamp(eps, 1.0 - eps)
    omega = y * pos + (1 - y) * neg
    ce = y * torch.log(p) + (1 - y) * torch.log1p(-p)
    return -(omega * ce).sum() / y.shape[0]


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def num_samples(self) -> int:
        return int(self.tp[0] + self.tn[0] + self.fp[0] + self.fn[0]) if len(self.tp) else 0

    def pooled(self) -> tuple[int, int, int, int]:
        return int(self.tp.sum()), int(self.tn.sum()), int(self.fp.sum()), int(self.fn.sum())

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def confusion(predictions, labels) -> ConfusionCounts:
    pred = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if pred.shape != y.shape or pred.ndim != 2:
        raise ShapeMismatch(f"predictions {pred.shape} vs labels {y.shape}")
    return ConfusionCounts(
        tp=(pred & y).sum(axis=0), tn=(~pred & ~y).sum(axis=0),
        fp=(pred & ~y).sum(axis=0), fn=(~pred & y).sum(axis=0))


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def compute_metrics(counts: ConfusionCounts) -> dict:
    """mA from per-attribute rates; Acc/Prec/Recall/F1 from pooled counts.

    Any zero denominator yields 0.
    """
    if counts.num_samples == 0:
        raise EmptyEvaluation("no samples to evaluate")
    tp, tn, fp, fn = counts.pooled()
    acc = float(_ratio(tp + tn, tp + tn + fp + fn))
    prec = float(_ratio(tp, tp + fp))
    recall = float(_ratio(tp, tp + fn))
    f1 = float(_ratio(2 * recall * prec, recall + prec))
    tpr = _ratio(counts.tp, counts.tp + counts.fn)
    tnr = _ratio(counts.tn, counts.tn + counts.fp)
    per_attr_ma = (tpr + tnr) / 2
    return {
        "mA": float(per_attr_ma.mean()), "acc": acc, "prec": prec, "recall": recall, "f1": f1,
        "per_attribute_mA": per_attr_ma, "tpr": tpr, "tnr": tnr,
    }


def metrics_json(counts: ConfusionCounts, attribute_names=None) -> dict:
    """JSON-ready metrics rounded to 5 decimals, with a per-attribute breakdown."""
    m = compute_metrics(counts)
    names = list(attribute_names) if attribute_names is not None else [f"attr{j}" for j in range(len(counts.tp))]
    per = {}
    for j, name in enumerate(names):
        per[name] = {
            "mA": round(float(m["per_attribute_mA"][j]), 5),
            "tpr": round(float(m["tpr"][j]), 5),
            "tnr": round(float(m["tnr"][j]), 5),
            "tp": int(counts.tp[j]), "tn": int(counts.tn[j]), "fp": int(counts.fp[j]), "fn": int(counts.fn[j]),
        }
    out = {k: round(m[k], 5) for k in ("mA", "acc", "prec", "recall", "f1")}
    out["per_attribute"] = per
    return out


def dumps_metrics(metrics: dict) -> str:
    return json.dumps(metrics, indent=2, sort_keys=False) + "\n"
