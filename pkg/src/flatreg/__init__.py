"""Desk-scale lab for input-gradient-flat classifiers.

Train small dense classifiers with a flatness-regularized minimax objective,
attack them with sign-gradient perturbations, and numerically probe the
geometry of their loss surfaces.

The API lives in the submodules (``flatreg.training``, ``flatreg.attacks``,
``flatreg.evaluation``, ``flatreg.theory``, ...); nothing heavy is re-exported
here on purpose — the ``flatreg`` CLI must be able to cap BLAS thread pools
before numpy is first imported, so importing this package must stay free of
side effects.
"""

__version__ = "0.1.0"
