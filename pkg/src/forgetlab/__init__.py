"""forgetlab: a desk-scale workbench for per-sample unlearning difficulty.

Trains a miniature character-level language model, scores how hard each
training sample is to remove (perturbation Monte-Carlo and Hessian-trace
estimators), and compares difficulty-guided curriculum unlearning against
standard baselines under a shared early-stopping protocol.
"""

__version__ = "0.1.0"
