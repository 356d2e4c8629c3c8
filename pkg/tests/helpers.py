"""Independent oracles and numerical checks shared by the test modules."""
from __future__ import annotations

import math

import numpy as np
import torch


def directional_errors(fn, inputs, n_probes=50, eps=1e-5, seed=0):
    """Relative errors between autograd and central differences along random directions.

    ``fn(*inputs)`` must return a scalar; every input is float64 and perturbed
    jointly along a random unit direction per probe. Directional derivatives far
    below the gradient norm are compared against 1e-6 * |grad| instead of their
    own size, so a probe orthogonal to the gradient does not measure FD noise.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, grads)]
    grad_norm = math.sqrt(sum(float((g ** 2).sum()) for g in grads))
    # offset so probes never replay a torch.manual_seed(seed) stream used to make the inputs
    gen = torch.Generator().manual_seed(10_007 + seed)
    errors = []
    with torch.no_grad():
        for _ in range(n_probes):
            dirs = [torch.randn(x.shape, generator=gen, dtype=x.dtype) for x in inputs]
            norm = math.sqrt(sum(float((d ** 2).sum()) for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
            plus = float(fn(*[x + eps * d for x, d in zip(inputs, dirs)]))
            minus = float(fn(*[x - eps * d for x, d in zip(inputs, dirs)]))
            numeric = (plus - minus) / (2 * eps)
            scale = max(abs(analytic), abs(numeric), 1e-6 * grad_norm, 1e-12)
            errors.append(abs(analytic - numeric) / scale)
    return np.array(errors)


def contrastive_oracle(patches, text, mask, tau):
    """Direct evaluation of the patch-text InfoNCE ratio on flat numpy arrays."""
    patches = np.asarray(patches, dtype=np.float64).reshape(-1, np.shape(text)[-1])
    text = np.asarray(text, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    sims = np.array([p @ text / (np.linalg.norm(p) * np.linalg.norm(text)) for p in patches])
    weights = np.exp(sims / tau)
    return -math.log(weights[mask].sum() / weights.sum())


def block_max_mask(density, block, threshold=1e-8):
    """Nested-loop block maximum, then threshold."""
    density = np.asarray(density)
    h, w = density.shape
    out = np.zeros((h // block, w // block), dtype=bool)
    for r in range(h // block):
        for c in range(w // block):
            best = -np.inf
            for i in range(r * block, (r + 1) * block):
                for j in range(c * block, (c + 1) * block):
                    best = max(best, density[i, j])
            out[r, c] = best > threshold
    return out


def bilinear_2x(grid):
    """2x bilinear upsampling with half-pixel centres, from explicit weights. ``grid`` is (h, w, c)."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w, c = grid.shape
    out = np.zeros((2 * h, 2 * w, c))

    def taps(i, n):
        src = max((i + 0.5) / 2 - 0.5, 0.0)
        lo = min(int(math.floor(src)), n - 1)
        hi = min(lo + 1, n - 1)
        t = src - lo
        return lo, hi, t

    for i in range(2 * h):
        y0, y1, ty = taps(i, h)
        for j in range(2 * w):
            x0, x1, tx = taps(j, w)
            out[i, j] = ((1 - ty) * (1 - tx) * grid[y0, x0] + (1 - ty) * tx * grid[y0, x1]
                         + ty * (1 - tx) * grid[y1, x0] + ty * tx * grid[y1, x1])
    return out


def conv2d_oracle(x, weight, bias):
    """Stride-1 'same' convolution on a channels-last (h, w, cin) array with explicit loops."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    cout, cin, k, _ = weight.shape
    pad = k // 2
    h, w, _ = x.shape
    padded = np.zeros((h + 2 * pad, w + 2 * pad, cin))
    padded[pad:pad + h, pad:pad + w] = x
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            patch = padded[i:i + k, j:j + k]  # (k, k, cin)
            for o in range(cout):
                out[i, j, o] = np.sum(patch * weight[o].transpose(1, 2, 0)) + bias[o]
    return out


def gelu(x):
    from scipy.special import erf

    return 0.5 * x * (1 + erf(x / math.sqrt(2)))


def attention_oracle(query, keys, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Scaled dot-product multi-head attention, one query row and one head at a time."""
    q = query @ wq.T + bq
    k = keys @ wk.T + bk
    v = keys @ wv.T + bv
    s, dim = q.shape
    hd = dim // heads
    out = np.zeros((s, dim))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(s):
            scores = np.array([q[i, sl] @ k[j, sl] / math.sqrt(hd) for j in range(k.shape[0])])
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            out[i, sl] = sum(weights[j] * v[j, sl] for j in range(k.shape[0]))
    return out @ wo.T + bo


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def params(module):
    return {k: v.detach().numpy().astype(np.float64) for k, v in module.state_dict().items()}
