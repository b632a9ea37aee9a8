"""Batched forward/backward for MPS classifiers using cached environments.

Sites are handled in a canonical 4-axis view ``(left, class, feature, right)``
with size-1 axes where a site has no such leg, which is a free reshape of the
layout produced by :func:`tnml.netgraph.build_mps`.  Bond ``i`` joins sites
``i`` and ``i + 1``; an optional mask vector per bond applies a rank
regularizer.  Results agree with the generic tape
(:mod:`tnml.autodiff`) to rounding.
"""

from dataclasses import dataclass

import numpy as np


def canonical_view(arr: np.ndarray, i: int, n_sites: int, output_site: int) -> np.ndarray:
    shape = list(arr.shape)
    left = shape.pop(0) if i > 0 else 1
    right = shape.pop() if i < n_sites - 1 else 1
    if i == output_site:
        c, f = shape
    else:
        c, (f,) = 1, shape
    return arr.reshape(left, c, f, right)


@dataclass
class ForwardCache:
    feats: np.ndarray  # (B, N, F)
    sites: list  # canonical 4-d views
    masks: list  # per bond, None or vector
    output_site: int
    mats: list  # M_i = sum_f phi_i[f] A_i[:, 0, f, :], shape (B, l, r); None at output site
    left: list  # left[i]: env entering site i from the left, (B, l_i)
    right: list  # right[i]: env entering site i from the right, (B, r_i)
    pre_left: list  # unmasked products feeding left[i + 1]
    pre_right: list
    logits: np.ndarray
    max_abs: float
    shapes: list  # original site shapes


def _site_matrix(phi, a4):
    # phi (B, F), a4 (l, 1, F, r) -> (B, l, r)
    l, _, f, r = a4.shape
    af = a4[:, 0].transpose(1, 0, 2).reshape(f, l * r)
    return (phi @ af).reshape(len(phi), l, r)


def forward(tensors, feats: np.ndarray, output_site: int = 0, masks=None) -> ForwardCache:
    """Logits for a batch of embedded inputs ``feats`` of shape (B, N, F)."""
    n = len(tensors)
    feats = np.asarray(feats, dtype=np.float64)
    b = feats.shape[0]
    if feats.shape[1] != n:
        raise ValueError(f"{feats.shape[1]} feature sites for a {n}-site MPS")
    masks = list(masks) if masks is not None else [None] * (n - 1)
    sites = [canonical_view(np.asarray(t), i, n, output_site) for i, t in enumerate(tensors)]
    p = output_site
    mats = [None] * n
    for i in range(n):
        if i != p:
            mats[i] = _site_matrix(feats[:, i], sites[i])

    left = [None] * (p + 1)
    pre_left = [None] * (p + 1)
    left[0] = np.ones((b, 1))
    peak = 1.0
    for i in range(p):
        u = np.matmul(left[i][:, None, :], mats[i])[:, 0, :]
        pre_left[i + 1] = u
        left[i + 1] = u * masks[i] if masks[i] is not None else u
        peak = max(peak, float(np.max(np.abs(u))))

    right = [None] * (n + 1)
    pre_right = [None] * (n + 1)
    right[n - 1] = np.ones((b, 1))
    for i in range(n - 1, p, -1):
        u = np.matmul(mats[i], right[i][:, :, None])[:, :, 0]
        pre_right[i - 1] = u
        right[i - 1] = u * masks[i - 1] if masks[i - 1] is not None else u
        peak = max(peak, float(np.max(np.abs(u))))

    a = sites[p]
    l, c, f, r = a.shape
    # t[b, c, l, r] = sum_f phi[b, f] a[l, c, f, r]
    t = (feats[:, p] @ a.transpose(2, 1, 0, 3).reshape(f, c * l * r)).reshape(b, c, l, r)
    logits = np.einsum("bl,bclr,br->bc", left[p], t, right[p], optimize=True)
    peak = max(peak, float(np.max(np.abs(logits))) if logits.size else 0.0)
    return ForwardCache(feats, sites, masks, p, mats, left, right, pre_left, pre_right,
                        logits, peak, [np.shape(t) for t in tensors])


def backward(cache: ForwardCache, grad_logits: np.ndarray):
    """Gradients of ``sum(grad_logits * logits)``.

    Returns ``(site_grads, mask_grads)``: arrays shaped like the input tensors,
    and per-bond gradients with respect to the mask vectors (None for bonds
    without a mask).
    """
    g = np.asarray(grad_logits, dtype=np.float64)
    feats, sites, masks, p = cache.feats, cache.sites, cache.masks, cache.output_site
    n = len(sites)
    grads4 = [None] * n
    mask_grads = [None] * (n - 1)

    a = sites[p]
    l, c, f, r = a.shape
    lp, rp = cache.left[p], cache.right[p]
    phi = feats[:, p]
    # output site
    gphi = g[:, :, None] * phi[:, None, :]  # (B, c, f)
    x = lp[:, :, None] * rp[:, None, :]  # (B, l, r)
    ga = np.einsum("bcf,blr->lcfr", gphi, x, optimize=True)
    grads4[p] = ga
    # t2[b, l, r] = sum_{c, f} g[b, c] phi[b, f] a[l, c, f, r]
    t2 = (gphi.reshape(len(g), c * f) @ a.transpose(1, 2, 0, 3).reshape(c * f, l * r)).reshape(
        len(g), l, r)
    g_left = np.matmul(t2, rp[:, :, None])[:, :, 0]
    g_right = np.matmul(lp[:, None, :], t2)[:, 0, :]

    for i in range(p - 1, -1, -1):
        u = cache.pre_left[i + 1]
        if masks[i] is not None:
            mask_grads[i] = np.sum(g_left * u, axis=0)
            gu = g_left * masks[i]
        else:
            gu = g_left
        li = cache.left[i]
        # dA_i[l, f, r] = sum_b li[b, l] phi[b, f] gu[b, r]
        lf = (li[:, :, None] * feats[:, i][:, None, :]).reshape(len(g), -1)
        gm = (lf.T @ gu).reshape(li.shape[1], 1, feats.shape[2], gu.shape[1])
        grads4[i] = gm
        g_left = np.matmul(cache.mats[i], gu[:, :, None])[:, :, 0]

    for i in range(p + 1, n):
        u = cache.pre_right[i - 1]
        if masks[i - 1] is not None:
            mask_grads[i - 1] = np.sum(g_right * u, axis=0)
            gu = g_right * masks[i - 1]
        else:
            gu = g_right
        ri = cache.right[i]
        fr = (feats[:, i][:, :, None] * ri[:, None, :]).reshape(len(g), -1)
        gm = (gu.T @ fr).reshape(gu.shape[1], 1, feats.shape[2], ri.shape[1])
        grads4[i] = gm
        g_right = np.matmul(gu[:, None, :], cache.mats[i])[:, 0, :]

    return [gr.reshape(shape) for gr, shape in zip(grads4, cache.shapes)], mask_grads


def predict(tensors, feats, output_site=0, masks=None, batch_size=500) -> np.ndarray:
    """Logits for many inputs, evaluated in fixed-size chunks."""
    chunks = [forward(tensors, feats[s:s + batch_size], output_site, masks).logits
              for s in range(0, len(feats), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0,))
