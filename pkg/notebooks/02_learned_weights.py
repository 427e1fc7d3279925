# %% [markdown]
# # Learning prompt weights
#
# Two ways to trust some prompts more than others: a fixed per-label vector
# from an entropy-regularized log-likelihood, and a small network that
# predicts weights per case.

# %%
import numpy as np

from promptens.mlp import MlpTrainConfig, TrainingSet, make_layout, mlp_forward, train_mlp
from promptens.gateway import PromptResponse
from promptens.weights import linear_objective, mean_log_likelihoods, optimize_linear_weights, softmax

rng = np.random.default_rng(0)
n = 300
truth = rng.random(n) < 0.3


def noisy_prompt(accuracy):
    right = rng.random(n) < accuracy
    says_yes = np.where(right, truth, ~truth)
    return np.where(says_yes, rng.uniform(0.8, 0.99, n), rng.uniform(0.01, 0.2, n))


P = np.stack([noisy_prompt(a) for a in (0.95, 0.8, 0.55)], axis=1)

# %% [markdown]
# ## Fixed weights
#
# With the entropy coefficient at 1 the optimum is the softmax of each
# prompt's mean log-likelihood, which the gradient ascent recovers.

# %%
w = optimize_linear_weights(P, truth)
ell = mean_log_likelihoods(P, truth)
print("mean log-lik :", np.round(ell, 3))
print("weights      :", np.round(w, 3))
print("softmax(ell) :", np.round(softmax(ell), 3))
print("objective    :", round(linear_objective(w, ell), 4), "vs uniform", round(linear_objective(np.full(3, 1 / 3), ell), 4))

# %% [markdown]
# ## Per-case weights
#
# The network sees every prompt's probability and parse flag and outputs a
# softmax over prompts. It should learn to lean on the accurate prompt.

# %%
def cases(rows):
    out = []
    for i in rows:
        rs = [PromptResponse(f"c{i}", "L", k + 1, "Yes" if P[i, k] > 0.5 else "No", float(P[i, k]), "", "parsed", "")
              for k in range(3)]
        out.append((rs, bool(truth[i])))
    return TrainingSet.from_cases(out)


train, val = cases(range(0, 220)), cases(range(220, n))
model = train_mlp(train, val, MlpTrainConfig(hidden=16, epochs=30, learning_rate=1e-2, lam=0.05), make_layout(3))
W, _ = mlp_forward(model, val.X, val.mask)
print("mean predicted weights:", np.round(W.mean(axis=0), 3))
print("val loss by epoch:", [round(h["val_loss"], 3) for h in model.history[::10]])
