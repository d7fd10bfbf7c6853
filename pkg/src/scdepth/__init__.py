"""Self-supervised two-view depth objectives with pseudo-depth priors.

Modules:
    geometry: pinhole camera, rigid poses, warping and bilinear sampling.
    selfsup: photometric, geometry-consistency, mask and smoothness losses.
    priors: ranking and surface-normal losses driven by pseudo-depth.
    objective: the combined objective, frozen decisions and gradients.
    grad: finite-difference checking and direct depth-field optimisation.
    synthetic: ray-cast two-view scenes with exact ground truth.
    evaluation: median-scaled depth metrics per region.
    gridio, config, cli: file formats, run configuration and commands.
"""

__version__ = "0.1.0"
