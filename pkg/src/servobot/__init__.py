"""Detection-only mobile manipulation simulator and benchmark.

A deterministic world model with a pinhole camera, a parametric few-shot
object detector, learned visual servo control, depth from optical expansion,
rotation-scan antipodal grasping, and a failure-driven annotation loop, plus
the scenario harness, report writers, and annotation HTTP server that tie
them together.
"""

__version__ = "0.1.0"
