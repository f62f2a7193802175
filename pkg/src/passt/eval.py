"""Evaluation metrics and stride-ensemble logit averaging."""

import numpy as np


def average_precision(scores, targets):
    """Area under the step-interpolated precision-recall curve.

    Ranks by descending score (ties keep the original order) and averages the
    precision at the rank of every positive. Returns ``nan`` when there are
    no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape != targets.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and targets {targets.shape} must be matching 1-D arrays")
    n_pos = int(np.count_nonzero(targets))
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = targets[order] != 0
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / n_pos)


def per_class_ap(logits, targets):
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.shape != targets.shape or logits.ndim != 2:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} must be matching (m, C) arrays")
    if not np.isin(targets, (0, 1)).all():
        raise ValueError("targets must be binary")
    return np.array([average_precision(logits[:, c], targets[:, c]) for c in range(logits.shape[1])])


def mean_ap(logits, targets):
    """Unweighted mean of per-class AP over classes with at least one positive."""
    ap = per_class_ap(logits, targets)
    valid = ~np.isnan(ap)
    if not valid.any():
        raise ValueError("no class has a positive target")
    return float(ap[valid].mean())


def ensemble_logits(logit_list, example_ids=None):
    """Elementwise mean of raw logits from several models.

    ``example_ids``, if given, holds one id sequence per matrix; they must
    agree so rows line up.
    """
    if not logit_list:
        raise ValueError("need at least one logit matrix")
    if example_ids is not None:
        if len(example_ids) != len(logit_list):
            raise ValueError("need one id list per logit matrix")
        first = list(example_ids[0])
        for ids in example_ids[1:]:
            if list(ids) != first:
                raise ValueError("example order differs between models")
    arrays = [np.asarray(z) for z in logit_list]
    shape = arrays[0].shape
    for z in arrays[1:]:
        if z.shape != shape:
            raise ValueError(f"logit shape mismatch: {z.shape} vs {shape}")
    return np.mean(np.stack(arrays), axis=0)


def accuracy(logits, labels):
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    logits = np.asarray(logits)
    labels = np.asarray(labels).astype(np.int64).ravel()
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    return float(np.mean(np.argmax(logits, axis=1) == labels))
