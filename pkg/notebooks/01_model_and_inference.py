# %% [markdown]
# # The spike-and-slab model and exact inference
#
# Each observation is generated from a binary support vector `s`, a Gaussian
# slab `z` and Gaussian noise:
#
#     s_h ~ Bernoulli(pi_h),  z ~ N(0, I),  y = W (s * z) + eps,  eps ~ N(0, Sigma)
#
# For a fixed `s` everything is linear Gaussian, so summing over all `2**H`
# supports gives the posterior and the likelihood in closed form.

# %%
import numpy as np

from gscem import (ModelParams, build_state_contexts, log_likelihood,
                   point_moments, posterior_over_states, sample_gsc)

W = np.array([[2.0, 0.5], [0.3, -1.5]])
params = ModelParams(W, 0.25 * np.eye(2), [0.3, 0.6])
data = sample_gsc(params, 1000, seed=0)
print("first rows of Y:\n", data.Y[:3].round(3))
print("empirical activation rates:", data.S_true.mean(axis=0))

# %% [markdown]
# ## Posterior over supports
#
# The state contexts hold everything that does not depend on `y`. The
# posterior for one point is a weight per support plus a Gaussian over the
# active slab dimensions.

# %%
contexts = build_state_contexts(params)
y = data.Y[0]
post = posterior_over_states(contexts, y)
for i, w in enumerate(post.weights):
    print(f"s = {contexts.bits[i]}  weight {w:.4f}  kappa {post.kappa[i].round(3)}")
print("true support:", data.S_true[0])

# %% [markdown]
# ## Moments used by the M-step
#
# The second moment only carries posterior covariance on active
# dimensions; an inactive `s_h` forces `(s * z)_h = 0`.

# %%
m = point_moments(contexts, y)
print("<s>       ", m.Es.round(4))
print("<s*z>     ", m.Esz.round(4))
print("<xx^T>    \n", m.Eszsz.round(4))

# %% [markdown]
# ## Likelihood as a Gaussian mixture
#
# The marginal of `y` is a mixture of `2**H` zero-mean Gaussians with
# covariances `W_s W_s^T + Sigma`. The exact likelihood matches a direct
# evaluation of that mixture.

# %%
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

comps = []
for bits in [(0, 0), (1, 0), (0, 1), (1, 1)]:
    s = np.array(bits)
    Ws = W * s
    prior = np.prod(np.where(s, params.pi, 1 - params.pi))
    comps.append(np.log(prior) + multivariate_normal(np.zeros(2), Ws @ Ws.T + params.Sigma)
                 .logpdf(data.Y))
print("exact   :", log_likelihood(params, data))
print("mixture :", logsumexp(np.array(comps), axis=0).sum())
