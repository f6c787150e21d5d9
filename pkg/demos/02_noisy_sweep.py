"""How much does refinement help when the sensors are noisy?

Each trial draws a fresh dataset with IMU noise, 1 px feature noise and a
perturbed initial guess.  We report the ratio of refined to initial position
error; anything below one is an improvement.
"""

import numpy as np

from slvba import RunConfig, compute_ate, refine_window, simulate
from slvba.simulation import SceneSpec, SimulationConfig

ratios = []
for seed in range(20):
    bundle = simulate(SimulationConfig(scene=SceneSpec(n_landmarks=50, min_views=10),
                                       seed=1000 + seed))
    states, _ = refine_window(bundle, bundle.initial, 0, RunConfig())
    ratios.append(compute_ate(states, bundle.groundtruth)[0]
                  / compute_ate(bundle.initial, bundle.groundtruth)[0])

ratios = np.array(ratios)
print(f"refined/initial ATE over {len(ratios)} trials: "
      f"median {np.median(ratios):.3f}, worst {ratios.max():.3f}")
print(f"trials at least halving the error: {np.sum(ratios < 0.5)}/{len(ratios)}")
