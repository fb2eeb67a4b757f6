"""
Downstream uses of a covariance field: decoding and Fisher information.

Part 1 decodes the stimulus condition from single trials. QDA with the
Wishart moments uses a covariance per condition; LDA uses the grand
empirical covariance for every class. Mean differences are kept small so
that noise structure matters for decoding.

Part 2 fits a population whose mean rotates on a circle with isotropic
noise. Its Fisher information is known in closed form, a^2 / sigma^2, and
the curve estimated from posterior draws should sit near that value.

Run: python demos/03_decoding_and_fisher.py  (about ten seconds)
"""

import numpy as np

from noisecov import baselines as bl
from noisecov.analysis import ClassModel, decode_accuracy, fisher_curve
from noisecov.harness import ConditionGrid, Dataset, build_spec, generate_synthetic, split
from noisecov.inference import FitConfig, fit
from noisecov.posterior import predict_moments

# -- decoding ---------------------------------------------------------------
ds = generate_synthetic(N=20, C=20, K=10, seed=2, mean_scale=0.03)
plan = split(ds, fractions=(0.8, 0.0, 0.2), seed=2)
train, test = plan.part(ds, "train"), plan.part(ds, "test")
Y = np.vstack(test.trials)
labels = np.concatenate([np.full(len(t), c) for c, t in enumerate(test.trials)])

post = fit(build_spec(ds.grid, ds.N), train.grid.coords, train.trials,
           FitConfig(iterations=2000, step=0.01, family="delta"))
ms = predict_moments(post, ds.grid.coords, mode="plugin")
qda = decode_accuracy(ClassModel.qda(ms.mu[0], ms.Sigma[0]), Y, labels)
lda = decode_accuracy(ClassModel.lda(bl.condition_means(train.trials), bl.grand_empirical(train.trials)), Y, labels)
print(f"decoding accuracy over {ds.C} classes: QDA {qda:.3f}, LDA {lda:.3f}, chance {1 / ds.C:.3f}")

# -- Fisher information -----------------------------------------------------
a, sigma, N, C, K = 1.0, 0.5, 4, 24, 50
rng = np.random.default_rng(0)
grid = ConditionGrid.periodic_1d(C)
x = grid.coords[:, 0]
mu = np.zeros((C, N))
mu[:, 0], mu[:, 1] = a * np.cos(x), a * np.sin(x)
rot = Dataset(grid, list(mu[:, None, :] + sigma * rng.standard_normal((C, K, N))))

# a smooth mean kernel suits a mean that is a single sinusoid
post = fit(build_spec(grid, N, lambda_mu=10.0, P=1), grid.coords, rot.trials,
           FitConfig(iterations=10000, step=0.001))
Xe = np.linspace(0, 2 * np.pi, 12, endpoint=False)[:, None]
fe = fisher_curve(post, Xe, S=500)
lo, hi = fe.interval
print(f"\nFisher information, analytic value {a * a / sigma**2:g}")
print(f"{'angle':>6} {'mean':>7} {'90% interval':>16}")
for xv, m, l, h in zip(Xe[:, 0], fe.mean, lo, hi):
    print(f"{xv:6.2f} {m:7.3f}   [{l:6.3f}, {h:6.3f}]")
