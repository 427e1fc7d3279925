# %% [markdown]
# # One report, six prompts
#
# A walk through a single (report, label) case: render every template, query
# the seeded mock model, read the yes-probabilities and combine them into a
# decision plus an uncertainty in [0, 1].

# %%
import numpy as np

from promptens.aggregate import aggregate, binary_entropy_uncertainty, uniform_weights
from promptens.corpus import RadiologyReport
from promptens.gateway import BackendConfig, Gateway, MockBackend, cached_ensemble_query
from promptens.prompts import builtin_prompt_set, render_prompt

report = RadiologyReport(
    "demo-1",
    "MR enterography. Terminal ileum wall thickening with mural hyperenhancement. No stenosis.",
    {"Ileum wall thickness": 1},
)
label = "Ileum wall thickness"
prompts = builtin_prompt_set()
print(render_prompt(prompts[0], label, report.text))

# %% [markdown]
# The mock backend answers every template of a "clear" case correctly; on the
# rest, templates 1-3 are right 90% of the time and 4-6 only 55%.

# %%
config = BackendConfig(kind="mock", model_name="mock", mock={"seed": 4, "clear_fraction": 0.3})
gateway = Gateway(config, MockBackend(config, truth=lambda rid, lab: True))
responses = cached_ensemble_query(report, label, prompts, gateway)
for r in responses:
    print(f"template {r.template_id}: {r.answer:3s} p_yes={r.p_yes:.3f}  {r.explanation}")

# %% [markdown]
# Uniform weights give the posterior predictive mean; its binary entropy is
# the case's uncertainty.

# %%
pred = aggregate("uniform", responses, uniform_weights(len(responses)))
print(f"p_hat={pred.p_hat:.3f} decision={pred.decision} uncertainty={pred.uncertainty:.3f}")

# %% [markdown]
# Entropy is 1 at p = 0.5 and falls to 0 at the ends, so confident
# agreement gives low uncertainty and a split vote gives high uncertainty.

# %%
for p in np.linspace(0, 1, 11):
    print(f"{p:.1f}  {'#' * round(40 * binary_entropy_uncertainty(p))}")
