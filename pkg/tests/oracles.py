"""Independent reference implementations used by several test modules."""

from fractions import Fraction


def metric_oracle(pred, gt, k, excluded=()):
    """Per-pixel counting in exact arithmetic, no confusion matrix."""
    tp, fp, fn = [0] * k, [0] * k, [0] * k
    correct = total = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        total += 1
        if p == g:
            tp[g] += 1
            correct += 1
        else:
            fp[p] += 1
            fn[g] += 1
    iou, f1 = [], []
    for c in range(k):
        d = tp[c] + fp[c] + fn[c]
        iou.append(Fraction(tp[c], d) if d else Fraction(0))
        f1.append(Fraction(2 * tp[c], 2 * tp[c] + fp[c] + fn[c]) if d else Fraction(0))
    kept = [c for c in range(k) if c not in excluded]
    return {
        "iou": [float(v) for v in iou],
        "f1": [float(v) for v in f1],
        "miou": float(sum(iou[c] for c in kept) / len(kept)),
        "af": float(sum(f1[c] for c in kept) / len(kept)),
        "oa": float(Fraction(correct, total)),
    }
