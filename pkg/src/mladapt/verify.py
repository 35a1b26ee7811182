"""Finite-difference and CTC-oracle verification suites.

Shared by the `gradcheck` CLI subcommand and the acceptance tests.
"""

import time

import numpy as np

from .autodiff import Tensor, finite_diff_check, log_softmax
from .ctc import ctc_brute_force, ctc_loss, min_frames
from .model import (
    AdaptationPlan,
    DownstreamModel,
    Featurizer,
    Linear,
    LowRankAdapter,
    MultiHeadSelfAttention,
)
from .objective import combined_loss, lid_ctc_loss

CTC_ORACLE_TOL = 1e-9
GRADIENT_TOL = 1e-5


def random_ctc_instance(rng, max_frames=6, max_vocab=4, max_target=3,
                        achievable=None):
    """Random (logits, target) with normalized rows left to the caller."""
    frames = int(rng.integers(1, max_frames + 1))
    vocab = int(rng.integers(2, max_vocab + 1))
    logits = rng.normal(0.0, 2.0, (frames, vocab))
    target = [int(t) for t in rng.integers(1, vocab, int(rng.integers(0, max_target + 1)))]
    if achievable is True:
        while min_frames(target) > frames:
            target = target[:-1]
    return logits, target


def ctc_oracle_suite(instances=500, seed=0):
    """Max |exp(-ctc_loss) - brute_force| over random small instances."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(instances):
        logits, target = random_ctc_instance(rng)
        log_probs = logits - _logsumexp_rows(logits)
        loss = ctc_loss(log_probs, target).item()
        prob = ctc_brute_force(log_probs, target)
        worst = max(worst, abs(np.exp(-loss) - prob))
    return worst, time.perf_counter() - start


def _logsumexp_rows(logits):
    m = np.max(logits, axis=1, keepdims=True)
    return m + np.log(np.sum(np.exp(logits - m), axis=1, keepdims=True))


# -- gradient check targets ----------------------------------------------------


def _check_ctc(rng):
    logits, target = random_ctc_instance(rng, max_frames=5, achievable=True)
    if not target:
        target = [1]
        while min_frames(target) > logits.shape[0]:
            logits = np.vstack([logits, rng.normal(0.0, 2.0, (1, logits.shape[1]))])
    return finite_diff_check(
        lambda x: ctc_loss(log_softmax(x), target), Tensor(logits)
    )


def _check_lid(rng):
    t, d, codes = 6, 5, 3
    head = Linear(d, codes + 1, rng, "lid.check")
    target = [int(rng.integers(1, codes + 1))] * 2
    z = rng.normal(0.0, 1.0, (t, d))
    return finite_diff_check(
        lambda x: lid_ctc_loss(x, head, target), Tensor(z)
    )


def _check_combined(rng):
    t, d, vocab, codes = 7, 6, 4, 2
    asr_head = Linear(d, vocab, rng, "asr.check")
    lid_head = Linear(d, codes + 1, rng, "lid.check")
    target = [1, 2]
    lid_target = [1, 1]
    beta = 0.3

    def f(z):
        primary = ctc_loss(log_softmax(asr_head(z)), target)
        aux = lid_ctc_loss(z, lid_head, lid_target)
        return combined_loss(primary, [aux], beta)

    return finite_diff_check(f, Tensor(rng.normal(0.0, 1.0, (t, d))))


def _check_featurizer(rng):
    layers, t, d = 4, 3, 5
    outputs = [Tensor(rng.normal(0.0, 1.0, (t, d))) for _ in range(layers)]
    featurizer = Featurizer(layers)
    featurizer.raw = Tensor(rng.normal(0.0, 0.5, layers), requires_grad=True)

    def f(raw):
        featurizer.raw = raw
        z = featurizer(outputs)
        return (z * z).sum()

    return finite_diff_check(f, featurizer.raw)


def _check_downstream(rng):
    t, d_in, vocab = 9, 8, 4
    downstream = DownstreamModel(
        d_in=d_in, d_proj=6, d_down=8, n_layers=1, heads=2, ffn_dim=16,
        vocab_size=vocab, subsample=2, rng=rng,
    )
    z = Tensor(rng.normal(0.0, 1.0, (t, d_in)))
    target = [1, 2]

    def f(w):
        return ctc_loss(downstream(z), target)

    return finite_diff_check(f, downstream.proj.w)


def _check_lora_attention(rng):
    t, d, heads, rank = 5, 8, 2, 2
    attn = MultiHeadSelfAttention(d, heads, rng, "attn.check")
    attn.q = LowRankAdapter(attn.q, rank, alpha=float(rank), rng=rng)
    attn.v = LowRankAdapter(attn.v, rank, alpha=float(rank), rng=rng)
    # zero-init up factors give a zero gradient to the down factors; make
    # them random so the check exercises both paths
    attn.q.b = Tensor(rng.normal(0.0, 0.3, attn.q.b.shape), requires_grad=True)
    attn.v.b = Tensor(rng.normal(0.0, 0.3, attn.v.b.shape), requires_grad=True)
    x = Tensor(rng.normal(0.0, 1.0, (t, d)))

    def f(a):
        out = attn(x)
        return (out * out).sum()

    err_a = finite_diff_check(f, attn.q.a)
    err_b = finite_diff_check(f, attn.v.b)
    return max(err_a, err_b)


GRADIENT_CHECKS = {
    "ctc_loss": _check_ctc,
    "lid_ctc_loss": _check_lid,
    "combined_loss": _check_combined,
    "featurizer": _check_featurizer,
    "downstream": _check_downstream,
    "lora_attention": _check_lora_attention,
}


def gradient_suite(seeds=50, seed0=0, checks=None):
    """Max relative finite-difference error per loss family."""
    names = checks or list(GRADIENT_CHECKS)
    results = {}
    for k, name in enumerate(names):
        check = GRADIENT_CHECKS[name]
        worst = 0.0
        for i in range(seeds):
            rng = np.random.default_rng((seed0, k, i))
            worst = max(worst, check(rng))
        results[name] = worst
    return results
