"""Memory-efficient side adaptation of frozen backbones, at desk scale.

Modules: ``autograph`` (tape-based reverse mode), ``mtsa`` (the side
adapter), ``backbones`` (frozen toy networks), ``harness`` (training and
ablation), ``accountant`` (memory, gradient and FLOP audits) and ``cli``.
"""

__version__ = "0.1.0"
