"""Cross-checks of the chart and model code against brute-force enumeration.

Each property builds fresh random instances and compares a fast
implementation with its oracle counterpart.  Run through the command line
to sanity-check a build, or from tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracle
from .crf import (SpanScores, inside, sample_tree, tree_entropy,
                  tree_log_prob, viterbi)
from .rnng import GenerativeModel
from .treebank import count_trees

TOL = 1e-9


@dataclass(frozen=True)
class PropertyResult:
    name: str
    passed: bool
    detail: str


def _random_scores(rng: np.random.Generator, length: int) -> SpanScores:
    table = np.zeros((length, length))
    for i in range(length):
        for j in range(i, length):
            table[i, j] = rng.normal()
    return SpanScores.from_table(table)


def _tiny_model(rng: np.random.Generator, vocab: int = 12) -> GenerativeModel:
    return GenerativeModel(vocab, dim=8, layers=1, dropout=0.0,
                           rng=rng)


def _check_enumeration(rng, max_length, trials) -> PropertyResult:
    worst = ""
    ok = True
    for t in range(1, max_length + 1):
        trees = oracle.enumerate_trees(t)
        if len(trees) != count_trees(t) or len(set(trees)) != len(trees):
            ok = False
            worst = f"T={t}: {len(trees)} trees vs Catalan {count_trees(t)}"
    return PropertyResult("enumeration matches Catalan counts", ok,
                          worst or f"T up to {max_length}")


def _check_partition(rng, max_length, trials) -> PropertyResult:
    worst = 0.0
    for _ in range(trials):
        t = int(rng.integers(1, max_length + 1))
        scores = _random_scores(rng, t)
        gap = abs(float(inside(scores).log_z.data[0])
                  - oracle.exact_partition(scores))
        worst = max(worst, gap)
    return PropertyResult("inside log-partition matches enumeration",
                          worst <= TOL, f"max gap {worst:.2e}")


def _check_viterbi(rng, max_length, trials) -> PropertyResult:
    worst = 0.0
    ok = True
    for _ in range(trials):
        t = int(rng.integers(1, max_length + 1))
        scores = _random_scores(rng, t)
        tree, score = viterbi(scores, 0)
        best_tree, best = oracle.exact_argmax(scores)
        worst = max(worst, abs(score - best))
        if abs(score - best) <= TOL and tree != best_tree:
            ok = False  # same score, different tree: genuine tie, accept
    return PropertyResult("Viterbi matches enumerated argmax",
                          worst <= TOL, f"max score gap {worst:.2e}")


def _check_entropy(rng, max_length, trials) -> PropertyResult:
    worst = 0.0
    for _ in range(trials):
        t = int(rng.integers(1, max_length + 1))
        scores = _random_scores(rng, t)
        chart = inside(scores)
        gap = abs(float(tree_entropy(chart).data[0])
                  - oracle.exact_entropy(scores))
        worst = max(worst, gap)
    return PropertyResult("chart entropy matches enumeration",
                          worst <= TOL, f"max gap {worst:.2e}")


def _check_sampler_scores(rng, max_length, trials) -> PropertyResult:
    worst = 0.0
    for _ in range(trials):
        t = int(rng.integers(2, max_length + 1))
        scores = _random_scores(rng, t)
        chart = inside(scores)
        tree, log_q = sample_tree(chart, rng, 0)
        trees, probs = oracle.exact_distribution(scores)
        exact = float(np.log(probs[trees.index(tree)]))
        reported = tree_log_prob(chart, tree, 0)
        worst = max(worst, abs(log_q - exact), abs(reported - exact))
    return PropertyResult("sampled-tree log q matches enumeration",
                          worst <= TOL, f"max gap {worst:.2e}")


def _check_action_normalization(rng, max_length, trials) -> PropertyResult:
    model = _tiny_model(rng)
    worst = 0.0
    for _ in range(max(1, trials // 4)):
        t = int(rng.integers(1, max_length + 1))
        ids = rng.integers(2, 12, size=t)
        total = 0.0
        for tree in oracle.enumerate_trees(t):
            total += np.exp(model.joint_log_likelihood(ids, tree)[1])
        worst = max(worst, abs(total - 1.0))
    return PropertyResult("action probabilities sum to one over trees",
                          worst <= 1e-8, f"max gap {worst:.2e}")


def _check_marginal(rng, max_length, trials) -> PropertyResult:
    model = _tiny_model(rng)
    worst = 0.0
    for _ in range(max(1, trials // 4)):
        t = int(rng.integers(1, max_length + 1))
        ids = rng.integers(2, 12, size=t)
        joints = [sum(model.joint_log_likelihood(ids, tree))
                  for tree in oracle.enumerate_trees(t)]
        top = max(joints)
        lse = top + np.log(np.exp(np.array(joints) - top).sum())
        worst = max(worst, abs(lse - oracle.exact_marginal(model, ids)))
    return PropertyResult("joint sum matches exact marginal",
                          worst <= TOL, f"max gap {worst:.2e}")


def _check_elbo_bound(rng, max_length, trials) -> PropertyResult:
    model = _tiny_model(rng)
    worst = np.inf
    for _ in range(max(1, trials // 4)):
        t = int(rng.integers(2, max_length + 1))
        ids = rng.integers(2, 12, size=t)
        scores = _random_scores(rng, t)
        gap = (oracle.exact_marginal(model, ids)
               - oracle.exact_elbo(model, scores, ids))
        worst = min(worst, gap)
    return PropertyResult("ELBO never exceeds the marginal",
                          worst >= -TOL, f"min KL {worst:.2e}")


CHECKS = (
    _check_enumeration,
    _check_partition,
    _check_viterbi,
    _check_entropy,
    _check_sampler_scores,
    _check_action_normalization,
    _check_marginal,
    _check_elbo_bound,
)


def run_verification(max_length: int = 6, trials: int = 20,
                     seed: int = 0) -> list[PropertyResult]:
    if not (2 <= max_length <= 8):
        raise ValueError(f"max_length must be in [2, 8], got {max_length}")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    return [check(rng, max_length, trials) for check in CHECKS]
