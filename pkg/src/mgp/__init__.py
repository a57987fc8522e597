"""Multi-code GAN-prior inversion.

Modules: ``tensor`` (autodiff), ``model`` (generator / perceptual net /
checkpoints), ``objective`` (losses and degradations), ``inversion``
(optimizer), ``analysis`` (metrics, attribution, sweeps), ``io`` (images),
``cli``.
"""

__version__ = "0.1.0"
