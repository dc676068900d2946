"""Small synthetic-twin inversion for the tsunami source problem.

Observations come from a known Gaussian source in a constant-depth basin, the
source is then recovered for a decreasing sequence of regularization weights.
A 16-cell grid keeps this under half a minute; the CLI config tsunami_twin.yaml
runs the 64-cell version.
"""

from goursat import tsunami as ts

model = ts.BasinModel(0.5, 1.0, 1.0, ts.depth_profile("constant", h0=1.0), (0.0, 1.0), (0.0, 1.0))
source = ts.control_profile("gaussian", center=(0.0, 0.0), width=0.25)
run = ts.twin_experiment(model, source, [1e-2, 1e-4, 1e-6], cells=16, workers=3)
for res in run["results"]:
    print(f"lambda {res['lambda']:.0e}: relative L2 error {res['relative_error']:.4f}"
          f"  ({len(res['trace'].iterates) - 1} CG iterations)")
