# %% [markdown]
# # The whole pipeline, offline
#
# Runs every stage on the bundled 500-report corpus with the seeded mock
# extraction model and mock judge, then prints the summary tables. This is
# the same run the golden-file test performs; it takes about ten seconds.
#
# The equivalent shell session is:
#
#     promptens ingest    --config configs/mock_golden.yaml
#     promptens run       --config configs/mock_golden.yaml
#     promptens optimize  --config configs/mock_golden.yaml
#     promptens train-mlp --config configs/mock_golden.yaml
#     promptens evaluate  --config configs/mock_golden.yaml

# %%
from pathlib import Path

from promptens import pipeline

config_path = Path(__file__).resolve().parents[1] / "configs" / "mock_golden.yaml"
cfg = pipeline.load_config(config_path)
print("labels:", pipeline.cmd_ingest(cfg)["dataset"]["selected_labels"])
print("run:", pipeline.cmd_run(cfg))

# %% [markdown]
# Fixed weights are fit on the 50 held-out tuning reports; the network is
# trained on the separate automatically labelled pool.

# %%
weights = pipeline.cmd_optimize(cfg)
for label, w in weights.items():
    print(f"{label:30s}", " ".join(f"{x:.2f}" for x in w))
print("mlp:", pipeline.cmd_train_mlp(cfg))

# %%
pipeline.cmd_evaluate(cfg)
for name in ("summary_unfiltered", "summary_threshold", "summary_capped", "median_uncertainty"):
    print(f"\n{name}")
    print(pipeline.table_text(cfg.output_dir / f"{name}.csv"))

# %% [markdown]
# Correct predictions should sit at lower uncertainty than incorrect ones.

# %%
print((cfg.output_dir / "histograms" / "agent" / "ileum_inflammation.txt").read_text())
print((cfg.output_dir / "histograms" / "uniform" / "ileum_inflammation.txt").read_text())
