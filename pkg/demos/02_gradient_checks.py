"""
The gradient-check suite
========================

Every differentiable primitive (conv3d, maxpool3d, upconv3d, batchnorm,
relu, softmax_channel, concat_channel, the pad/crop pair) and both losses
are checked against 64-bit central finite differences over random shapes.
The suite is also falsifiable: a fault hook can corrupt one check's
backward pass to prove a wrong gradient is caught.
"""

from voxseg.checks import format_report, run_suite, suite_passed, timed_suite

# the real suite, a few shapes per check to keep this demo quick
results, elapsed = timed_suite(seed=0, shapes_per_check=3)
print(format_report(results, elapsed))
print()

# now inject a deliberately wrong backward into conv3d and watch it fail
faulted = run_suite(seed=0, shapes_per_check=2, fault="conv3d")
print("with a corrupted conv3d backward:")
for result in faulted:
    flag = "FAIL" if not result.passed else "pass"
    print(f"  {result.name:<18} {result.max_rel_err:.3e}  [{flag}]")
print(f"suite verdict: {'passed' if suite_passed(faulted) else 'failed (as intended)'}")
