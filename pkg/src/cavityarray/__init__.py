"""Numerical workbench for a cavity-array microscope.

Modules: ``prescription`` (geometry), ``raytrace`` (exact ray tracing),
``paraxial`` (ABCD modes), ``budget`` (photon loss and collection),
``hologram`` (SLM phase masks), ``atomsim`` (synthetic data), ``analysis``
(readout statistics) and ``cli``.
"""
__version__ = "0.1.0"
