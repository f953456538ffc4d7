"""Semi-supervised rotation regression with matrix Fisher distributions.

Modules: ``so3`` (rotation utilities), ``fisher`` (distribution numerics),
``net`` (tiny regressor), ``augment`` (views and occlusion), ``synth``
(benchmark data), ``engine`` (two-phase training), ``config`` and ``cli``.
"""

__version__ = "0.1.0"
