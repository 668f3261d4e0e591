"""
Fitting a multitask model on synthetic data
===========================================

The generator draws Rayleigh-shaped input curves and a single joint draw of
two correlated output trajectories from a model with known
hyperparameters.  We fit by multi-start Adam and compare with the truth.
"""

import numpy as np

from fmtgp import (Dataset, EncodingConfig, FitConfig, RayleighConfig, fit_encoder,
                   generate_dataset, multi_start_fit)
from fmtgp.metrics import coverage_accuracy, q2

sd = generate_dataset(RayleighConfig(n_f=60, n_u=50, seed=1))
data = sd.dataset
print("data tensor (tasks, replicates, grid):", data.Y.shape)

# %%
# Hold out ten replicates.  The basis is refitted on the training curves only.
test = np.arange(50, 60)
train = np.arange(50)
encoder = fit_encoder([c[train] for c in sd.curves], sd.input_grid, EncodingConfig("PCA", 6))
train_data = Dataset(encoder.transform([c[train] for c in sd.curves]), data.grid, data.Y[:, train])

# %%
# Ten restarts with the synthetic profile; the best likelihood wins.
model = multi_start_fit(train_data, FitConfig.profile("synthetic"), n_restart=10, seed=0,
                        kernel=sd.kernel, encoder=encoder)
th = model.theta
print(f"NLL {model.nll:.2f}, restart {model.info.restart}, {model.info.n_iter} iterations")
print(f"task correlation {th.task_correlation()[0, 1]:.3f} (true 0.85)")
print(f"scalar length-scale {th.lengthscale_u:.3f} (true 1.5)")

# %%
# Predict the held-out trajectories from their raw curves.
post = model.predict([c[test] for c in sd.curves])
for s in range(2):
    y = data.Y[s, test]
    print(f"task {s}: Q2 {q2(y, post.mean[s]):.4f}, "
          f"CA {coverage_accuracy(y, post.mean[s], post.var[s]):.3f}")
