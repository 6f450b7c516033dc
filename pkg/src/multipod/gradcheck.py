"""Finite-difference verification of the backward pass.

Central differences in float64 over every parameter scalar. Cost is kept
tractable by exploiting structure: perturbing a parameter of pod i cannot
change other pods' features (cached once), and within a pod only the
segments at and after the parameter need recomputation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class GradCheckReport:
    checked: int
    worst_rel: float
    worst_param: str
    failures: list

    @property
    def passed(self):
        return not self.failures


def gradient_check(model, inputs, labels, h=1e-5, tol=1e-5, atol=1e-8, progress=None,
                   sample_stride=1):
    """Compare backward gradients against central differences for every
    parameter scalar of ``model``.

    A scalar passes when |fd - analytic| <= atol + tol * max(|fd|, |analytic|);
    the reported relative error is |fd - analytic| / (atol/tol + max magnitude)
    so that "error < tol" is exactly the pass condition. ``sample_stride`` > 1
    checks only every Nth scalar per tensor (smoke-test mode); the default
    covers everything.
    """
    store = model.store
    if store.dtype != np.float64:
        raise ValueError("gradient check requires a float64 model")
    k = model.spec.pods

    store.zero_grads()
    loss = T.softmax_cross_entropy(model.forward(inputs, training=True), labels)
    loss.backward()
    analytic = {name: t.grad.copy() for name, t in store.items()}
    store.zero_grads()

    # Cache, per pod, the activation entering every segment plus the final
    # features; FD re-runs only the affected suffix.
    seg_inputs = []
    feats = []
    with T.no_grad():
        for i in range(k):
            x = inputs[i]
            cached = []
            for _, fn in model.pods[i].segments:
                cached.append(x)
                x = fn(x, True)
            seg_inputs.append(cached)
            feats.append(x)

    def loss_after(pod_idx, seg_idx):
        with T.no_grad():
            if pod_idx is None:
                cur = feats
            else:
                f = model.pods[pod_idx].run_from(seg_idx, seg_inputs[pod_idx][seg_idx], True)
                cur = feats[:pod_idx] + [f] + feats[pod_idx + 1:]
            return float(T.softmax_cross_entropy(model.head(cur), labels).data)

    floor = atol / tol if tol > 0 else 0.0
    worst_rel = 0.0
    worst_param = ""
    failures = []
    checked = 0
    for name, p in store.items():
        if name.startswith("pod"):
            pod_idx = int(name[3:name.index(".")])
            local = name[name.index(".") + 1:]
            seg_idx = model.pods[pod_idx].segment_of(local)
        else:
            pod_idx, seg_idx = None, 0
        flat = p.data.reshape(-1)
        positions = range(0, flat.size, sample_stride)
        fd = np.empty(len(positions))
        for slot, j in enumerate(positions):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_after(pod_idx, seg_idx)
            flat[j] = orig - h
            down = loss_after(pod_idx, seg_idx)
            flat[j] = orig
            fd[slot] = (up - down) / (2.0 * h)
        an = analytic[name].reshape(-1)[list(positions)]
        rel = np.abs(fd - an) / np.maximum(floor + np.maximum(np.abs(fd), np.abs(an)), 1e-300)
        high = float(rel.max())
        if high > worst_rel:
            worst_rel, worst_param = high, name
        if high >= tol:
            failures.append(name)
        checked += len(positions)
        if progress is not None:
            progress(name, len(positions), high)
    return GradCheckReport(checked, worst_rel, worst_param, failures)
