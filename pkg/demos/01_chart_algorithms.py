"""Chart algorithms over span scores, checked against brute force.

Every unlabeled binary tree over T words is a set of spans; a table of
per-span scores induces a Gibbs distribution over those trees.  This demo
builds one small table by hand and walks through the four chart routines:
the partition function, exact sampling, tree entropy, and the Viterbi
argmax.  Because T is tiny we can enumerate all trees and confirm each
answer directly.
"""

import numpy as np

from urnng import oracle
from urnng.crf import SpanScores, inside, sample_tree, tree_entropy, viterbi

WORDS = ["the", "dog", "chased", "cats"]
T = len(WORDS)

rng = np.random.default_rng(0)
table = np.zeros((T, T))
table[0][1] = 2.0   # favour "the dog"
table[2][3] = 1.0   # and "chased cats"
table[1][3] = -1.5  # discourage "dog chased cats"
scores = SpanScores.from_table(table)

print(f"Sentence: {' '.join(WORDS)}")
print(f"Distinct binary trees over {T} words: "
      f"{len(oracle.enumerate_trees(T))}\n")

chart = inside(scores)
print(f"inside() log partition:      {chart.log_z.data[0]:+.6f}")
print(f"enumerated log partition:    {oracle.exact_partition(scores):+.6f}")

entropy = tree_entropy(chart).data[0]
print(f"\nchart entropy:               {entropy:.6f} nats")
print(f"enumerated entropy:          {oracle.exact_entropy(scores):.6f} nats")

best, best_score = viterbi(scores)
print(f"\nViterbi tree:                {best.to_bracketed(WORDS)}")
print(f"score {best_score:+.3f}, matches enumerated argmax: "
      f"{best == oracle.exact_argmax(scores)[0]}")

# Draw from the chart and compare sample frequencies with the exact
# distribution; agreement here is what the trainer's estimator relies on.
trees, probs = oracle.exact_distribution(scores)
counts = {tree: 0 for tree in trees}
n = 20_000
for _ in range(n):
    tree, _ = sample_tree(chart, rng)
    counts[tree] += 1

print(f"\n{n} exact samples vs enumerated probabilities:")
order = np.argsort(probs)[::-1]
for i in order:
    tree = trees[i]
    print(f"  p={probs[i]:.4f}  freq={counts[tree] / n:.4f}  "
          f"{tree.to_bracketed(WORDS)}")
