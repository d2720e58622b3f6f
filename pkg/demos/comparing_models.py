"""
Comparing three models across subjects
======================================

Per-subject accuracies from a leave-one-subject-out study are paired by
subject, so the comparison is rank based: Friedman across all models,
then Holm-corrected Wilcoxon signed-rank tests for each pair.

The accuracies below are made up, drawn on the 1/120 grid that a
120-trial test subject produces.
"""

import numpy as np

from mitransfer.evaluation import FoldResult, summarize
from mitransfer.stats import compare_models

rng = np.random.default_rng(7)
n_subjects = 55

# a shared per-subject difficulty plus a model offset
ability = rng.normal(0.0, 0.1, n_subjects)
offsets = {"eegnet": 0.12, "deepconvnet": 0.08, "min2net": 0.02}
correct = {
    name: np.clip(np.round(120 * (0.5 + off + ability + rng.normal(0, 0.04, n_subjects))), 0, 120).astype(int)
    for name, off in offsets.items()
}

for name, k in correct.items():
    s = summarize([FoldResult(f"S{i:02d}", 120, int(c)) for i, c in enumerate(k)], model=name)
    print(f"{name:12s} median {s.median:.3f}  max {s.max:.3f}  >= 0.70: {s.count_above_threshold}/{s.n_subjects}")

report = compare_models({name: k / 120 for name, k in correct.items()})

print()
for name, (w, p) in report.normality.items():
    print(f"Shapiro-Wilk {name:12s} W = {w:.3f}  p = {p:.3g}")
print(f"Friedman chi2({report.friedman_df}) = {report.friedman_chi2:.2f}, p = {report.friedman_p:.2g}")
for r in report.pairwise:
    print(f"  {r.first} vs {r.second}: p = {r.p_raw:.2g}, Holm {r.p_adjusted:.2g} {r.note}")

# sample size matters: the same effect on 8 subjects is much weaker evidence
small = compare_models({name: k[:8] / 120 for name, k in correct.items()})
print(f"\nfirst 8 subjects only: chi2 = {small.friedman_chi2:.2f}, p = {small.friedman_p:.2g}")
