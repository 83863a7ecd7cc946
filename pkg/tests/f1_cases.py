"""Hand-computed F1-macro fixtures: ``(truth, pred, num_classes, expected)``.

Expected values are exact fractions worked out from the confusion matrix;
per-class working is in the trailing comments.
"""
from fractions import Fraction as Fr

CASES = [
    # c0: P=R=1/2, c1: P=R=1/2
    ([0, 0, 1, 1], [0, 1, 0, 1], 2, Fr(1, 2)),
    # all-majority on 90/10: c0 = 2*0.9*1/1.9 = 18/19, c1 = 0
    ([0] * 90 + [1] * 10, [0] * 100, 2, Fr(9, 19)),
    ([0, 1, 2, 2, 1], [0, 1, 2, 2, 1], 3, Fr(1)),
    ([0, 1], [1, 0], 2, Fr(0)),
    # class 2 absent from both and skipped
    ([0, 1, 0, 1], [0, 1, 0, 1], 3, Fr(1)),
    # c0: P=1, R=2/3 -> 4/5; c1: P=0/1, R=0/0 -> 0
    ([0, 0, 0], [0, 0, 1], 2, Fr(2, 5)),
    # every class: tp=1 of 2 predicted and 2 true -> 1/2
    ([0, 0, 1, 1, 2, 2], [0, 1, 1, 2, 2, 0], 3, Fr(1, 2)),
    # c0: P=1, R=2/3 -> 4/5; c1: P=1/2, R=1 -> 2/3
    ([0, 0, 0, 1], [0, 0, 1, 1], 2, Fr(11, 15)),
    # c1: P=1, R=1/2 -> 2/3; c0 predicted but never true -> 0
    ([1, 1, 1, 1], [1, 1, 0, 0], 2, Fr(1, 3)),
    # c0: P=1/4, R=1 -> 2/5; c1..c3 never predicted -> 0
    ([0, 1, 2, 3], [0, 0, 0, 0], 4, Fr(1, 10)),
    # c0: 1; c1: P=1, R=1/2 -> 2/3; c2: P=3/4, R=1 -> 6/7
    ([0, 1, 1, 2, 2, 2], [0, 1, 2, 2, 2, 2], 3, Fr(53, 63)),
    # c0: P=2/3, R=1 -> 4/5; c1: P=1, R=1/2 -> 2/3; c2 absent and skipped
    ([0, 0, 1, 1], [0, 0, 0, 1], 3, Fr(11, 15)),
]
