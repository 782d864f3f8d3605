"""Wave-level simulation of paired Mach-Zehnder interferometers.

Modules:
    modes         exact discrete mode algebra and Born probabilities
    geometry      planar layout, event schedule, Lorentz-boost helpers
    field         branch-term wavefunction, probability current
    trajectories  bi-trajectory integration and ensemble statistics
    report        figure/CSV/JSON emission
    cli           command line entry point
"""

__version__ = "0.1.0"
