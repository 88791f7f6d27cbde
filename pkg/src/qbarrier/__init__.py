"""Budget-aware action shielding for history-conditioned agents in constrained MDPs.

Modules: ``gradnet`` (numpy autodiff core), ``cmdp`` (environments and budget
accounting), ``codec`` / ``world_model`` / ``critics`` / ``policy`` (learned
components), ``shield`` (runtime Q-barrier), ``trainer``, ``probe``
(diagnostics and margin checks) and ``cli``.
"""

__version__ = "0.1.0"
