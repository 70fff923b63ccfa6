"""2D blind deconvolution: binary features placed at binary locations, OR-combined."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..network import NoisyOrNetwork, ParamStore
from ..pmp import pmp_batch
from .matching import min_cost_matching

THRESHOLD = np.log(2.0)
FROZEN_NOISE = -np.log(0.99)
ACTIVATION_PROB = 0.01


def default_features():
    """Four 5x5 shapes: plus, X, hollow square, corner."""
    W = np.zeros((4, 5, 5), dtype=np.int8)
    W[0, 2, :] = W[0, :, 2] = 1
    W[1][np.arange(5), np.arange(5)] = 1
    W[1][np.arange(5), 4 - np.arange(5)] = 1
    W[2, 0, :] = W[2, 4, :] = W[2, :, 0] = W[2, :, 4] = 1
    W[3, 0, :] = W[3, :, 0] = 1
    return W


def boolean_convolve(S, W):
    """Place feature ``W[f]`` wherever ``S[..., f, i, j]`` is on; overlaps OR together.

    ``S`` is ``(B, F, ah, aw)``, ``W`` is ``(F, fh, fw)``; the output is
    ``(B, ah + fh - 1, aw + fw - 1)``.
    """
    S = np.asarray(S).astype(bool)
    W = np.asarray(W).astype(bool)
    B, F, ah, aw = S.shape
    _, fh, fw = W.shape
    X = np.zeros((B, ah + fh - 1, aw + fw - 1), dtype=bool)
    for k in range(fh):
        for l in range(fw):
            on = W[:, k, l]
            if on.any():
                X[:, k:k + ah, l:l + aw] |= S[:, on].any(axis=1)
    return X.astype(np.int8)


@dataclass(frozen=True)
class BdLayout:
    """Dimensions tying images, features and activation grids together."""
    n_feat: int
    feat_h: int
    feat_w: int
    img_h: int
    img_w: int

    def __post_init__(self):
        if min(self.n_feat, self.feat_h, self.feat_w) < 1:
            raise ValueError("feature dimensions must be positive")
        if self.feat_h > self.img_h or self.feat_w > self.img_w:
            raise ValueError("feature larger than image")

    @property
    def act_h(self):
        return self.img_h - self.feat_h + 1

    @property
    def act_w(self):
        return self.img_w - self.feat_w + 1

    @property
    def n_hidden(self):
        return self.n_feat * self.act_h * self.act_w

    @property
    def n_visible(self):
        return self.img_h * self.img_w

    @property
    def n_weights(self):
        return self.n_feat * self.feat_h * self.feat_w

    def network(self, weight=1.0, prior_theta=0.1, noise_theta=FROZEN_NOISE):
        """Hidden = activation bits ``S[f, i, j]``, visible = pixels.

        Slots: ``W[f, k, l]`` flattened, then one prior slot per feature, then
        one shared frozen noise slot for the pixels.
        """
        F, fh, fw = self.n_feat, self.feat_h, self.feat_w
        ah, aw, P = self.act_h, self.act_w, self.img_w
        m = self.n_hidden
        nW = self.n_weights
        f, i, j, k, l = np.meshgrid(np.arange(F), np.arange(ah), np.arange(aw),
                                    np.arange(fh), np.arange(fw), indexing="ij")
        parent = 1 + (f * ah + i) * aw + j
        child = 1 + m + (i + k) * P + (j + l)
        slot = (f * fh + k) * fw + l
        hid = np.arange(1, m + 1)
        vis = np.arange(m + 1, m + self.n_visible + 1)
        rows = np.concatenate([
            np.stack([hid, np.zeros(m, int), nW + (hid - 1) // (ah * aw)], axis=1),
            np.stack([vis, np.zeros(vis.size, int), np.full(vis.size, nW + F)], axis=1),
            np.stack([child.ravel(), parent.ravel(), slot.ravel()], axis=1),
        ])
        values = np.empty(nW + F + 1)
        values[:nW] = weight
        values[nW:nW + F] = prior_theta
        values[-1] = noise_theta
        frozen = np.zeros(values.size, dtype=bool)
        frozen[-1] = True
        return NoisyOrNetwork(m, self.n_visible, rows, ParamStore(values, frozen))

    def weights(self, net):
        return net.params.values[:self.n_weights].reshape(self.n_feat, self.feat_h, self.feat_w)

    def priors(self, net):
        th = net.params.values[self.n_weights:self.n_weights + self.n_feat]
        return -np.expm1(-th)

    def thresholded(self, net):
        return (self.weights(net) > THRESHOLD).astype(np.int8)


def bd_network(img_h, img_w, n_feat, feat_h, feat_w, **kw):
    return BdLayout(n_feat, feat_h, feat_w, img_h, img_w).network(**kw)


@dataclass(frozen=True)
class BdInstance:
    W: np.ndarray  # (F, fh, fw)
    S: np.ndarray  # (n_images, F, ah, aw)
    X: np.ndarray  # (n_images, N, P)


def gen_bd(rng, n_images=100, act_h=10, act_w=10, W=None, p_act=ACTIVATION_PROB):
    W = default_features() if W is None else np.asarray(W, dtype=np.int8)
    S = (rng.random((n_images, W.shape[0], act_h, act_w)) < p_act).astype(np.int8)
    return BdInstance(W, S, boolean_convolve(S, W))


def bd_test_re(net, layout, X_test, n_iters=100, damping=0.5, workers=1):
    """Reconstruction error of test images from posterior-mode activations."""
    X_test = np.asarray(X_test, dtype=np.int8).reshape(-1, layout.n_visible)
    H = pmp_batch(net, X_test, 0.0, n_iters, damping, workers=workers)
    S = H.reshape(-1, layout.n_feat, layout.act_h, layout.act_w)
    recon = boolean_convolve(S, layout.thresholded(net)).reshape(X_test.shape)
    return float(np.mean(recon != X_test))


def crop_iou(learned, gt):
    """Best intersection-over-union of ``gt`` against every same-size crop of ``learned``."""
    learned = np.asarray(learned).astype(bool)
    gt = np.asarray(gt).astype(bool)
    gh, gw = gt.shape
    best = 0.0
    for a in range(learned.shape[0] - gh + 1):
        for b in range(learned.shape[1] - gw + 1):
            crop = learned[a:a + gh, b:b + gw]
            union = np.count_nonzero(crop | gt)
            if union:
                best = max(best, np.count_nonzero(crop & gt) / union)
    return best


def matched_ious(W_thre, W_gt):
    """Per ground-truth feature IOU under the IOU-maximizing matching (0 if unmatched)."""
    W_thre = np.asarray(W_thre)
    W_gt = np.asarray(W_gt)
    iou = np.array([[crop_iou(a, b) for b in W_gt] for a in W_thre]).reshape(len(W_thre), len(W_gt))
    rows, cols = min_cost_matching(-iou)
    out = np.zeros(len(W_gt))
    out[cols] = iou[rows, cols]
    return out


def features_iou(W_thre, W_gt):
    """Mean matched IOU over the ground-truth features."""
    return float(matched_ious(W_thre, W_gt).mean())
