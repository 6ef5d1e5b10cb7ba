"""Independent reference implementations used as test oracles.

Written from the definitions with explicit loops and numpy, sharing no code
with the package under test.
"""
import math

import numpy as np
import torch


def softmax_ref(x: np.ndarray, axis: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def miou_bruteforce(preds, gts, n_classes):
    """Pool pixel counts over all pairs, then IoU per class that occurs anywhere."""
    inter = [0] * n_classes
    union = [0] * n_classes
    for pred, gt in zip(preds, gts):
        for p, g in zip(np.ravel(pred), np.ravel(gt)):
            for c in range(n_classes):
                a, b = p == c, g == c
                inter[c] += int(a and b)
                union[c] += int(a or b)
    ious = [inter[c] / union[c] if union[c] else None for c in range(n_classes)]
    present = [v for v in ious if v is not None]
    return ious, sum(present) / len(present)


def vcm_sum_ref(pairs):
    out = np.zeros_like(np.asarray(pairs[0], dtype=np.float64))
    for p in pairs:
        out = out + np.asarray(p, dtype=np.float64)
    return out


def group_consistency_ref(p_w1, p_s2, p_s3, tau):
    """Pseudo-label from the weak view, masked CE on both strong views, each divided by H*W.

    Arrays are (B, C, H, W) logits; returns the batch mean of the per-sample sum.
    """
    p_w1, p_s2, p_s3 = (np.asarray(a, dtype=np.float64) for a in (p_w1, p_s2, p_s3))
    b, c, h, w = p_w1.shape
    total = 0.0
    for n in range(b):
        sample = 0.0
        for strong in (p_s2, p_s3):
            acc = 0.0
            for y in range(h):
                for x in range(w):
                    probs = softmax_ref(p_w1[n, :, y, x], 0)
                    label = int(np.argmax(probs))
                    if probs[label] >= tau:
                        logp = strong[n, :, y, x] - np.log(np.sum(np.exp(strong[n, :, y, x])))
                        acc += -logp[label]
            sample += acc / (h * w)
        total += sample
    return total / b


def finite_difference_check(loss_fn, params, n, rng, step=1e-5):
    """Compare autograd and central differences on ``n`` random scalar entries.

    ``params`` is a list of float64 tensors with requires_grad; ``loss_fn`` must be
    deterministic. Returns a list of (param index, flat index, analytic, numeric, rel err).
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    sizes = np.array([p.numel() for p in params], dtype=np.float64)
    results = []
    with torch.no_grad():
        for _ in range(n):
            k = int(rng.choice(len(params), p=sizes / sizes.sum()))
            flat = params[k].view(-1)
            i = int(rng.integers(flat.numel()))
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            analytic = grads[k].view(-1)[i].item()
            # floor keeps round-off on vanishing gradients from reading as relative error
            denom = max(abs(analytic), abs(numeric), 1e-6)
            results.append((k, i, analytic, numeric, abs(analytic - numeric) / denom))
    return results


def max_rel_error(results):
    return max(r[-1] for r in results) if results else math.nan
