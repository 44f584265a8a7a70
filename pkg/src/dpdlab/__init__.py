"""Desk-scale lab for domain-generalized crowd localization.

Modules: tensorcore (numeric core), scenegen (synthetic domains), locator
(confidence/threshold model), losses (objectives + optimizer), theory
(divergence and bound machinery), evalmetrics (scoring), harness
(experiments, reports, CLI).
"""

__version__ = "0.1.0"
