"""Desk-scale simulator of federated domain generalization.

Training couples per-client adversarial novel-domain generation (a
generator perturbs inputs against a teacher/student pair) with
sharpness-aware hierarchical aggregation on the server.  Everything runs
on a numpy reverse-mode autodiff core with deterministic seeding.
"""

__version__ = "0.1.0"
