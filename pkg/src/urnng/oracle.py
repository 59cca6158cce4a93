"""Brute-force reference computations by full tree enumeration.

Everything here is exponential in sentence length and exists to pin down
ground truth for the chart algorithms, the generative model's normalization,
and the gradient estimators.  Hard length caps mark where enumeration is
trustworthy and affordable; nothing in this module is used on a hot path.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .crf import SpanScores, span_indicator
from .treebank import TreeRepr

MAX_ENUM_LENGTH = 12


@lru_cache(maxsize=None)
def _span_sets(i: int, j: int) -> tuple[frozenset, ...]:
    if i == j:
        return (frozenset({(i, i)}),)
    out = []
    for k in range(i, j):
        for left in _span_sets(i, k):
            for right in _span_sets(k + 1, j):
                out.append(left | right | {(i, j)})
    return tuple(out)


@lru_cache(maxsize=None)
def enumerate_trees(length: int) -> tuple[TreeRepr, ...]:
    """All binary trees over ``length`` words, ordered by outermost split."""
    if not 1 <= length <= MAX_ENUM_LENGTH:
        raise ValueError(
            f"enumeration supports 1 <= T <= {MAX_ENUM_LENGTH}, got {length}")
    return tuple(TreeRepr(length, s) for s in _span_sets(1, length))


@lru_cache(maxsize=None)
def _enum_indicator(length: int) -> np.ndarray:
    return span_indicator(enumerate_trees(length), length)


def tree_score_sums(scores: SpanScores, b: int = 0):
    """(trees, per-tree span-score sums) for one batch row."""
    trees = enumerate_trees(scores.length)
    return trees, _enum_indicator(scores.length) @ scores.flat.data[b]


def exact_partition(scores: SpanScores, b: int = 0) -> float:
    _, sums = tree_score_sums(scores, b)
    m = sums.max()
    return float(m + np.log(np.exp(sums - m).sum()))


def exact_distribution(scores: SpanScores, b: int = 0):
    trees, sums = tree_score_sums(scores, b)
    w = np.exp(sums - sums.max())
    return trees, w / w.sum()


def exact_entropy(scores: SpanScores, b: int = 0) -> float:
    _, probs = exact_distribution(scores, b)
    return float(-(probs * np.log(probs)).sum())


def exact_argmax(scores: SpanScores, b: int = 0) -> tuple[TreeRepr, float]:
    trees, sums = tree_score_sums(scores, b)
    best = int(np.argmax(sums))
    return trees[best], float(sums[best])


def sums_tensor(scores: SpanScores, b: int = 0):
    """(trees, [n_trees] tensor of span-score sums) staying on the tape."""
    trees = enumerate_trees(scores.length)
    indicator = Tensor(_enum_indicator(scores.length))
    row = ad.reshape(ad.narrow(scores.flat, 0, b, 1),
                     (scores.flat.shape[1], 1))
    return trees, ad.reshape(ad.matmul(indicator, row), (len(trees),))


def log_q_tensor(scores: SpanScores, b: int = 0):
    """(trees, [n_trees] tensor of exact log q per tree), differentiable."""
    trees, sums = sums_tensor(scores, b)
    return trees, ad.add_broadcast(sums, ad.scale(ad.logsumexp(sums, 0), -1.0))


def entropy_tensor(scores: SpanScores, b: int = 0) -> Tensor:
    """Enumerated tree entropy as a taped scalar (chart-free reference)."""
    _, logq = log_q_tensor(scores, b)
    return ad.scale(ad.sum_all(ad.mul(ad.exp(logq), logq)), -1.0)


def exact_joint_table(model, ids) -> tuple[tuple[TreeRepr, ...], np.ndarray]:
    """Joint log-likelihood of (ids, tree) for every enumerated tree."""
    ids = np.asarray(ids, dtype=np.int64)
    t = int(ids.shape[0])
    if t > 10:
        raise ValueError(f"joint enumeration capped at T <= 10, got {t}")
    trees = enumerate_trees(t)
    lls = np.empty(len(trees))
    for n, tree in enumerate(trees):
        terminal, action = model.joint_log_likelihood(ids, tree)
        lls[n] = terminal + action
    return trees, lls


def exact_marginal(model, ids) -> float:
    """log p(x) by direct summation over every tree, no charts involved."""
    _, lls = exact_joint_table(model, ids)
    m = lls.max()
    return float(m + np.log(np.exp(lls - m).sum()))


def exact_elbo(model, scores: SpanScores, ids, b: int = 0) -> float:
    """Exact E_q[log p(x,z) - log q(z|x)] over the enumeration."""
    trees, probs = exact_distribution(scores, b)
    joint_trees, lls = exact_joint_table(model, ids)
    assert joint_trees == trees
    logq = np.log(probs)
    return float((probs * (lls - logq)).sum())


def exact_posterior_kl(model, scores: SpanScores, ids, b: int = 0) -> float:
    """KL(q || true posterior p(z|x)); equals marginal minus ELBO."""
    trees, probs = exact_distribution(scores, b)
    _, lls = exact_joint_table(model, ids)
    m = lls.max()
    log_marginal = m + np.log(np.exp(lls - m).sum())
    log_post = lls - log_marginal
    return float((probs * (np.log(probs) - log_post)).sum())


def exact_action_kl(model, scores: SpanScores, ids, b: int = 0) -> float:
    """KL between q and the conditional action prior p(z | generated prefix)."""
    trees, probs = exact_distribution(scores, b)
    action_ll = np.empty(len(trees))
    ids = np.asarray(ids, dtype=np.int64)
    for n, tree in enumerate(trees):
        _, action = model.joint_log_likelihood(ids, tree)
        action_ll[n] = action
    return float((probs * (np.log(probs) - action_ll)).sum())


def exact_phi_gradient(inference_network, ids,
                       reward: np.ndarray) -> dict[Tensor, np.ndarray]:
    """Gradient of E_q[reward] w.r.t. everything feeding q, by enumeration.

    ``reward`` is one constant per enumerated tree (e.g. joint log-likelihoods
    for the expected-reconstruction objective).  Returned gradients are keyed
    by parameter tensor.
    """
    ids = np.asarray(ids, dtype=np.int64)
    reward = Tensor(np.asarray(reward, dtype=np.float64))
    with Tape() as tape:
        scores = inference_network.span_scores(ids[None, :])
        _, logq = log_q_tensor(scores, 0)
        objective = ad.sum_all(ad.mul(ad.exp(logq), reward))
    return tape.backward(objective)
