"""The composite training objective: the alpha-weighted classification term,
the conditional-discriminator alignment term, the domain-specific head term,
projected-gradient updates of the similarity matrix, and the empirical
feature-space distance estimator.

All three loss terms return their exact values together with per-layer
gradient dictionaries; the trainer combines them with the appropriate signs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import MultiDomainDataset
from .models import ModelBundle
from .nn import (AdamState, DenseNet, Layer, accumulate_layer_grads, adam_step,
                 sigmoid_bce, softmax_ce)
from .simplex import SimilarityMatrix, column_importance, project_simplex

log = logging.getLogger(__name__)

LayerGrads = dict[Layer, tuple[np.ndarray, np.ndarray]]


@dataclass
class TermResult:
    value: float
    grads: LayerGrads
    extras: dict = field(default_factory=dict)


def _as_alpha(alpha) -> np.ndarray:
    if isinstance(alpha, SimilarityMatrix):
        return alpha.alpha
    return np.asarray(alpha, dtype=np.float64)


def _merge(into: LayerGrads, other: LayerGrads, scale: float = 1.0) -> None:
    for layer, (dw, db) in other.items():
        if layer in into:
            odw, odb = into[layer]
            into[layer] = (odw + scale * dw, odb + scale * db)
        else:
            into[layer] = (scale * dw, scale * db)


def compute_vh(bundle: ModelBundle, labeled_feats: list[np.ndarray],
               labeled_labels: list[np.ndarray], alpha) -> TermResult:
    """Column-importance-weighted classification loss of the shared classifier:
    sum_j alpha_j * mean_{L_j} CE(h(e(x)), y), via per-sample weights."""
    a = _as_alpha(alpha)
    cols = column_importance(a)
    feats, labels, weights, slices = [], [], [], []
    for j in range(bundle.n_domains):
        n_j = labeled_feats[j].shape[0]
        if n_j == 0:
            if cols[j] > 0:
                log.warning("labeled domain %d is empty; its V_h term contributes 0", j)
            continue
        feats.append(labeled_feats[j])
        labels.append(labeled_labels[j])
        weights.append(np.full(n_j, cols[j] / n_j))
        slices.append(j)
    if not feats:
        return TermResult(0.0, {}, {"per_domain_ce": np.zeros(bundle.n_domains)})
    x = np.vstack(feats)
    y = np.concatenate(labels)
    w = np.concatenate(weights)
    wsum = w.sum()

    enc_trace = bundle.encoder.forward(x)
    cls_trace = bundle.classifier.forward(enc_trace.output)
    if wsum <= 0:
        value, dlogits = 0.0, np.zeros_like(cls_trace.output)
        probs = None
    else:
        norm_loss, dlogits, probs = softmax_ce(cls_trace.output, y, 1.0, w)
        value = norm_loss * wsum  # undo the weighted-mean normalization
        dlogits = dlogits * wsum

    grads: LayerGrads = {}
    cls_g = bundle.classifier.backward(cls_trace, dlogits)
    enc_g = bundle.encoder.backward(enc_trace, cls_g.input)
    accumulate_layer_grads(grads, bundle.classifier, cls_g)
    accumulate_layer_grads(grads, bundle.encoder, enc_g)

    per_domain = np.zeros(bundle.n_domains)
    if probs is not None:
        ce = -np.log(np.maximum(probs[np.arange(y.size), y], 1e-300))
        start = 0
        for j, f in zip(slices, feats):
            per_domain[j] = ce[start:start + f.shape[0]].mean()
            start += f.shape[0]
    return TermResult(float(value), grads, {"per_domain_ce": per_domain})


def compute_vd(bundle: ModelBundle, orig_feats: list[np.ndarray],
               labeled_feats: list[np.ndarray], alpha) -> TermResult:
    """Conditional-discriminator loss: for each original domain i, BCE of
    f(e(x), code(i)) against target 1 on originals and target 0 on every
    labeled domain j weighted alpha[i, j]. Returns gradients for the
    discriminator and (separately scaled by the caller) for the encoder."""
    if bundle.discriminator is None:
        raise ValueError("V_d needs a discriminator")
    a = _as_alpha(alpha)
    n = bundle.n_domains

    enc_orig = []
    for i in range(n):
        if orig_feats[i].shape[0] == 0:
            raise ValueError(f"original domain {i} batch is empty")
        enc_orig.append(bundle.encoder.forward(orig_feats[i]))
    enc_lab = [bundle.encoder.forward(labeled_feats[j]) if labeled_feats[j].shape[0] else None
               for j in range(n)]

    blocks, targets, weights = [], [], []
    block_meta = []  # ("orig", i) or ("lab", i, j)
    for i in range(n):
        code = bundle.code(i)
        z_o = enc_orig[i].output
        blocks.append(np.hstack([z_o, np.tile(code, (z_o.shape[0], 1))]))
        targets.append(np.ones(z_o.shape[0]))
        weights.append(np.full(z_o.shape[0], 1.0 / z_o.shape[0]))
        block_meta.append(("orig", i, None))
        for j in range(n):
            if enc_lab[j] is None:
                if a[i, j] > 0:
                    log.warning("labeled domain %d empty; V_d term for pair (%d,%d) skipped", j, i, j)
                continue
            z_l = enc_lab[j].output
            blocks.append(np.hstack([z_l, np.tile(code, (z_l.shape[0], 1))]))
            targets.append(np.zeros(z_l.shape[0]))
            weights.append(np.full(z_l.shape[0], a[i, j] / z_l.shape[0]))
            block_meta.append(("lab", i, j))

    x = np.vstack(blocks)
    t = np.concatenate(targets)
    w = np.concatenate(weights)
    wsum = w.sum()

    disc_trace = bundle.discriminator.forward(x)
    logits = disc_trace.output.reshape(-1)
    norm_loss, dlogits = sigmoid_bce(logits, t, w)
    value = norm_loss * wsum / (2.0 * n)
    dlogits = dlogits * (wsum / (2.0 * n))

    disc_g = bundle.discriminator.backward(disc_trace, dlogits[:, None])
    f_grads: LayerGrads = {}
    accumulate_layer_grads(f_grads, bundle.discriminator, disc_g)

    # route the z-part of the input gradient back through the encoder
    zdim = bundle.latent_dim
    dz_orig = [np.zeros((orig_feats[i].shape[0], zdim)) for i in range(n)]
    dz_lab = [np.zeros((labeled_feats[j].shape[0], zdim)) for j in range(n)]
    start = 0
    for block, meta in zip(blocks, block_meta):
        rows = block.shape[0]
        dz = disc_g.input[start:start + rows, :zdim]
        kind, i, j = meta
        if kind == "orig":
            dz_orig[i] += dz
        else:
            dz_lab[j] += dz
        start += rows
    enc_grads: LayerGrads = {}
    for i in range(n):
        g = bundle.encoder.backward(enc_orig[i], dz_orig[i])
        accumulate_layer_grads(enc_grads, bundle.encoder, g)
    for j in range(n):
        if enc_lab[j] is not None:
            g = bundle.encoder.backward(enc_lab[j], dz_lab[j])
            accumulate_layer_grads(enc_grads, bundle.encoder, g)

    return TermResult(float(value), f_grads, {"encoder_grads": enc_grads})


def compute_vlambda(bundle: ModelBundle, labeled_feats: list[np.ndarray],
                    labeled_labels: list[np.ndarray], alpha) -> TermResult:
    """Domain-specific head loss:
    (1/N) sum_i sum_j alpha[i, j] * mean_{L_j} CE(h_i(e(x)), y)."""
    a = _as_alpha(alpha)
    n = bundle.n_domains
    present = [j for j in range(n) if labeled_feats[j].shape[0] > 0]
    for j in range(n):
        if labeled_feats[j].shape[0] == 0 and a[:, j].max() > 0:
            log.warning("labeled domain %d is empty; its V_lambda terms contribute 0", j)
    if not present:
        return TermResult(0.0, {}, {})

    enc_traces = {j: bundle.encoder.forward(labeled_feats[j]) for j in present}
    z_all = np.vstack([enc_traces[j].output for j in present])
    y_all = np.concatenate([labeled_labels[j] for j in present])
    sizes = [labeled_feats[j].shape[0] for j in present]

    grads: LayerGrads = {}
    dz_all = np.zeros_like(z_all)
    value = 0.0
    for i in range(n):
        w = np.concatenate([np.full(sz, a[i, j] / sz) for j, sz in zip(present, sizes)])
        wsum = w.sum()
        head = bundle.head_net(i)
        trace = head.forward(z_all)
        if wsum <= 0:
            continue
        norm_loss, dlogits, _ = softmax_ce(trace.output, y_all, 1.0, w)
        value += norm_loss * wsum
        g = head.backward(trace, dlogits * wsum)
        accumulate_layer_grads(grads, head, g, scale=1.0 / n)
        dz_all += g.input / n
    value /= n

    start = 0
    for j, sz in zip(present, sizes):
        g = bundle.encoder.backward(enc_traces[j], dz_all[start:start + sz])
        accumulate_layer_grads(grads, bundle.encoder, g)
        start += sz
    return TermResult(float(value), grads, {})


def _disc_decisions(bundle: ModelBundle, feats: np.ndarray, domain: int) -> np.ndarray:
    """True where the discriminator calls a sample 'original domain' (threshold 0.5)."""
    z = bundle.encode(feats)
    return bundle.disc_logits(z, domain) >= 0.0


def zero_one_errors(bundle: ModelBundle, labeled_feats: list[np.ndarray],
                    labeled_labels: list[np.ndarray]) -> np.ndarray:
    """Misclassification rate of the shared classifier on each labeled domain."""
    errs = np.ones(bundle.n_domains)
    for j in range(bundle.n_domains):
        if labeled_feats[j].shape[0] == 0:
            continue
        pred = np.argmax(bundle.class_logits(labeled_feats[j]), axis=1)
        errs[j] = float(np.mean(pred != labeled_labels[j]))
    return errs


def alpha_objective_coefficients(bundle: ModelBundle, orig_feats: list[np.ndarray],
                                 labeled_feats: list[np.ndarray],
                                 labeled_labels: list[np.ndarray],
                                 lambda_d: float = 1.0) -> tuple[np.ndarray, dict]:
    """Linear coefficients of the 0/1-error objective in each alpha entry.

    With the networks frozen the objective is linear in every alpha row:
    coefficient (i, j) collects the shared-classifier 0/1 error on L_j, the
    head-i 0/1 error on L_j, and (negatively) the rate at which the
    discriminator mistakes L_j for original domain i.
    """
    n = bundle.n_domains
    err_h = zero_one_errors(bundle, labeled_feats, labeled_labels)
    head_err = np.ones((n, n))
    disc_orig = np.zeros((n, n))
    z_lab = [bundle.encode(labeled_feats[j]) if labeled_feats[j].shape[0] else None
             for j in range(n)]
    for j in range(n):
        if z_lab[j] is None:
            continue
        for i in range(n):
            pred = np.argmax(bundle.head_net(i).predict(z_lab[j]), axis=1)
            head_err[i, j] = float(np.mean(pred != labeled_labels[j]))
            decisions = bundle.disc_logits(z_lab[j], i) >= 0.0
            disc_orig[i, j] = float(np.mean(decisions))
    coeffs = (err_h[None, :] + head_err) / n - lambda_d * disc_orig / (2.0 * n)
    diag = {"err_h": err_h, "head_err": head_err, "disc_orig_rate": disc_orig}
    return coeffs, diag


def alpha_step(alpha: np.ndarray, coeffs: np.ndarray, lr: float,
               max_backtracks: int = 30) -> np.ndarray:
    """One projected-gradient step per row on the frozen linear objective,
    with a backtracking halving that never lets a row's value increase."""
    a = _as_alpha(alpha).copy()
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if a.shape != coeffs.shape:
        raise ValueError("alpha/coefficient shape mismatch")
    for i in range(a.shape[0]):
        row, c = a[i], coeffs[i]
        base = float(row @ c)
        step = lr
        candidate = row
        for _ in range(max_backtracks + 1):
            trial = project_simplex(row - step * c)
            if float(trial @ c) <= base + 1e-12:
                candidate = trial
                break
            step *= 0.5
        a[i] = candidate
    return a


def estimate_h_distance(bundle: ModelBundle, orig_feats: np.ndarray,
                        labeled_feats: list[np.ndarray], alpha_row: np.ndarray,
                        domain: int) -> float:
    """Empirical feature-space distance between original domain `domain` and
    its weighted labeled mixture, read off the current discriminator:
    2 * (1 - [originals misread as mixture + weighted mixture misread as original]),
    clamped to [0, 2]."""
    alpha_row = np.asarray(alpha_row, dtype=np.float64)
    if orig_feats.shape[0] == 0:
        raise ValueError("empty original sample set")
    dec_o = _disc_decisions(bundle, orig_feats, domain)
    err_o = float(np.mean(~dec_o))
    err_l = 0.0
    for j, feats in enumerate(labeled_feats):
        if alpha_row[j] == 0.0:
            continue
        if feats.shape[0] == 0:
            raise ValueError(f"empty labeled sample set for domain {j} with positive weight")
        dec_l = _disc_decisions(bundle, feats, domain)
        err_l += alpha_row[j] * float(np.mean(dec_l))
    return float(np.clip(2.0 * (1.0 - (err_o + err_l)), 0.0, 2.0))


def evaluate(bundle: ModelBundle, dataset: MultiDomainDataset) -> tuple[np.ndarray, float]:
    """Per-domain and average test accuracy of argmax h(e(x)); argmax breaks
    ties toward the lowest class index."""
    accs = np.zeros(dataset.n_domains)
    for i in range(dataset.n_domains):
        pred = np.argmax(bundle.class_logits(dataset.test_features[i]), axis=1)
        accs[i] = float(np.mean(pred == dataset.test_labels[i]))
    return accs, float(accs.mean())


def fit_pair_discriminator(a: np.ndarray, b: np.ndarray,
                           hidden: tuple[int, ...] = (32, 32), epochs: int = 200,
                           lr: float = 3e-3, rng: np.random.Generator | None = None) -> DenseNet:
    """Train a fresh binary discriminator to separate two raw sample sets
    (a = 'original' side, target 1). Used to estimate distances between
    arbitrary sample pairs without an encoder or domain codes."""
    rng = rng if rng is not None else np.random.default_rng(0)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dims = [a.shape[1], *hidden, 1]
    acts = ["leaky_relu"] * len(hidden) + ["identity"]
    net = DenseNet.create(dims, acts, rng)
    x = np.vstack([a, b])
    t = np.concatenate([np.ones(a.shape[0]), np.zeros(b.shape[0])])
    state = AdamState.init(net.param_arrays())
    for _ in range(epochs):
        trace = net.forward(x)
        _, dlogits = sigmoid_bce(trace.output.reshape(-1), t)
        grads = net.backward(trace, dlogits[:, None])
        adam_step(net.param_arrays(), grads.params, state, lr)
        net.bump_versions()
    return net


def pair_h_distance(a: np.ndarray, b: np.ndarray, net: DenseNet) -> float:
    """Distance estimate for two raw sample sets under a trained pair
    discriminator: 2 * (1 - [err on a + err on b]), clamped to [0, 2]."""
    logit_a = net.predict(np.asarray(a, dtype=np.float64)).reshape(-1)
    logit_b = net.predict(np.asarray(b, dtype=np.float64)).reshape(-1)
    err_a = float(np.mean(logit_a < 0.0))
    err_b = float(np.mean(logit_b >= 0.0))
    return float(np.clip(2.0 * (1.0 - (err_a + err_b)), 0.0, 2.0))
