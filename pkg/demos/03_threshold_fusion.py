# Threshold calibration and committee fusion
#
# Each (predictor, attribute) pair gets its own decision threshold: the
# value that maximizes accuracy on held-out validation scores.  At test
# time the predictors that can actually see the face region form a small
# committee whose normalized scores are combined by a product or median
# rule.  This script walks through both pieces on hand-made numbers.

import numpy as np

from faceparts.fusion import (build_Z, hrp_decide, linear_threshold_normalize,
                              nsa_decide, search_optimal_threshold)

# Part 1: optimal threshold search.  Scores for 8 validation samples; the
# positives cluster high but overlap the negatives, so neither extreme nor
# 0.5 is the best cut.

scores = np.array([0.10, 0.30, 0.35, 0.40, 0.55, 0.60, 0.80, 0.90])
labels = np.array([0, 0, 1, 0, 1, 1, 0, 1])

threshold, accuracy = search_optimal_threshold(scores, labels)
print(f"scores: {scores.tolist()}")
print(f"labels: {labels.tolist()}")
print(f"optimal threshold {threshold:.3f} -> accuracy {accuracy:.3f}")

fixed = np.mean((scores >= 0.5).astype(int) == labels)
print(f"fixed 0.5 threshold -> accuracy {fixed:.3f}")
assert accuracy >= fixed

# Part 2: score normalization.  The piecewise-linear map sends the
# calibrated threshold to 0.5 while pinning 0 -> 0 and 1 -> 1, so scores
# from predictors with different thresholds become comparable.

t = 0.3
for x in (0.0, 0.15, t, 0.65, 1.0):
    print(f"T_t({x:.2f}) with t={t} -> {linear_threshold_normalize(x, t):.4f}")

# Part 3: the committee.  Five predictors, each with its own score and
# calibrated threshold.  The product rule multiplies normalized scores
# against the product of their complements; the median rule takes the
# middle normalized score.

usable = [0, 3, 7, 9, 15]
committee_scores = np.zeros(16)
committee_thresholds = np.full(16, np.nan)
committee_scores[usable] = [0.80, 0.55, 0.40, 0.70, 0.60]
committee_thresholds[usable] = [0.50, 0.50, 0.45, 0.60, 0.55]

z = np.asarray(build_Z(usable, committee_scores, committee_thresholds, 5))
print()
print(f"normalized committee scores: {np.round(z, 4).tolist()}")
pos = float(np.prod(z))
neg = float(np.prod(1.0 - z))
print(f"product of scores {pos:.4f} vs product of complements {neg:.4f}")
print(f"product rule decision: {nsa_decide(z, 'product')}")
print(f"median rule decision:  {nsa_decide(z, 'median')}")

# The highest-ranked-predictor rule ignores the committee and just
# thresholds the single most trusted usable predictor.

print(f"HRP decision: "
      f"{hrp_decide(usable, committee_scores, committee_thresholds)}")

# With a single-member committee, both NSA rules collapse to plain
# thresholding of that one score.

solo = build_Z([3], committee_scores, committee_thresholds, 5)
assert nsa_decide(solo, "product") == int(committee_scores[3] >= 0.5)
assert nsa_decide(solo, "median") == int(committee_scores[3] >= 0.5)
print()
print("single-member committee degrades to plain thresholding: ok")
print("done")
