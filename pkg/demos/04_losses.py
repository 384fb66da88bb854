"""
Two segmentation losses and why the second exists
=================================================

The multi-class soft dice loss trains well when every class is present,
but a class absent from the ground truth contributes zero loss AND zero
gradient at smoothing 0 — false positives on that class go unpunished.
The bootstrapped cross-entropy replaces it: plain cross-entropy averaged
over only the K hardest voxels (lowest true-class probability), which
keeps rare-class mistakes in the gradient signal.
"""

import numpy as np

from voxseg.autodiff import Graph, Parameter
from voxseg.losses import bootstrap_ce_loss, bootstrap_select, dice_loss

rng = np.random.default_rng(1)

# a confident-background prediction that hallucinates kidney mass at 8
# voxels; the ground truth has no kidney anywhere
probs = np.zeros((1, 3, 4, 4, 4))
probs[:, 0], probs[:, 1], probs[:, 2] = 0.90, 0.05, 0.05
flat_fp = rng.choice(64, size=8, replace=False)  # the false positives
fp = np.unravel_index(flat_fp, (4, 4, 4))
probs[0, :, fp[0], fp[1], fp[2]] = (0.20, 0.70, 0.10)
labels = np.zeros((1, 4, 4, 4), dtype=np.int64)  # background everywhere
onehot = np.moveaxis(np.eye(3)[labels], -1, 1)
print(f"predicted kidney mass: {probs[:, 1].sum():.2f} voxels' worth at "
      f"{len(flat_fp)} voxels; ground-truth kidney voxels: {int(onehot[:, 1].sum())}")

# dice at smoothing 0: the kidney term is 0/denominator -- zero loss
# contribution and zero gradient, so the hallucination goes unpunished
p = Parameter(probs, name="probs")
g = Graph()
grad = g.backward(dice_loss(g.param(p), onehot, smoothing=0.0))[p]
print(f"dice (smoothing 0): gradient on the kidney channel is all zero -> "
      f"{bool(np.all(grad[:, 1] == 0.0))}")

# bootstrapped CE: the false positives have the lowest true-class
# probability, so the hardest-voxel selection is exactly those voxels,
# and each selected voxel gets the full -1/(K p_true) pull
sel = bootstrap_select(probs[0, 0].ravel(), fraction=8 / 64)
print(f"bootstrapped CE:    selected hardest voxels == false positives -> "
      f"{sorted(sel.selected.tolist()) == sorted(flat_fp.tolist())}")
g = Graph()
grad = g.backward(bootstrap_ce_loss(g.param(p), labels, fraction=8 / 64))[p]
pulled = grad[0, 0].ravel()
print(f"  gradient lives only on those voxels: "
      f"{int(np.count_nonzero(pulled))} nonzero entries, "
      f"each {pulled[flat_fp[0]]:+.3f} (= -1/(K * 0.20))")

# the selection rule, spelled out on a vector of true-class probabilities
flat = np.array([0.9, 0.2, 0.5, 0.2, 0.8, 0.1])
sel = bootstrap_select(flat, fraction=0.5)
print(f"\nhardest {sel.k} of {flat.size} voxels {flat.tolist()}:")
print(f"  selected indices {sel.selected.tolist()} "
      f"(ties at 0.2 resolved to the lower index)")
print(f"  next-hardest probability (threshold): {sel.threshold}")

# fraction 1.0 is exactly mean cross-entropy
full = bootstrap_ce_loss(probs, labels, fraction=1.0).item()
mean_ce = float(-np.log(np.take_along_axis(probs, labels[:, None], axis=1)).mean())
print(f"\nfraction 1.0 equals mean cross-entropy: |{full:.12f} - {mean_ce:.12f}| "
      f"= {abs(full - mean_ce):.1e}")
