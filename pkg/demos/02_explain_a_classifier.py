# %% [markdown]
# Train a small patch transformer on synthetic shapes, learn an explainer for
# it, refine maps per image and score them with the blackout metrics.
# Runs in a couple of minutes on one CPU.

# %%
import os

import numpy as np

from ltx import (Dataset, Explained, Explainer, FinetuneConfig, ModelSpec, PretrainConfig, evaluate_dataset,
                 finetune_batch, gen_synthetic, pretrain, train_explained, train_val_split, write_pgm)

out_dir = os.path.join(os.path.dirname(os.path.abspath(__file__)), "out")
os.makedirs(out_dir, exist_ok=True)

# %% data: four shape classes with exact object footprints
data = Dataset.from_samples(gen_synthetic(600, seed=0), 4)
train, val = train_val_split(data)
print(len(train), "train /", len(val), "val images")

# %% the classifier to explain; it stays frozen from here on
ckpt, acc = train_explained(train, ModelSpec(), epochs=10, seed=0)
model = Explained.from_checkpoint(ckpt)
print(f"train accuracy {acc:.3f}")

# %% dataset-level pretraining of the explainer, keeping the best epoch on POS
run = pretrain(ckpt, train.images, val.images[:100], PretrainConfig(epochs=5, seed=0))
for row in run.log:
    print(f"epoch {row.index}: val pos {row.value:.3f}{'  <- best' if row.is_best else ''}")
explainer = Explainer.from_checkpoint(run.checkpoint, trainable=False)

# %% per-image finetuning; each map is never worse than the pretrained one
xs = val.images[:40]
refined = finetune_batch(model, explainer, xs, FinetuneConfig(), monitors=("pos",))["pos"]
print("reverted to pretrained map:", sum(r.reverted for r in refined), "of", len(refined))

# %% compare against trivial maps
maps = {
    "pretrained": explainer.predict_maps(xs),
    "finetuned": np.stack([r.map for r in refined]),
    "uniform": np.full((len(xs), 28, 28), 0.5),
    "footprint": (val.footprints[:40] == 1).astype(float),
}
for name, m in maps.items():
    rep = evaluate_dataset(model, m, xs, ("pos", "neg"))
    print(f"{name:<11} pos {rep.auc['pos']:.3f}  neg {rep.auc['neg']:.3f}")

# %% save one image and its map for viewing
write_pgm(xs[0, 0], os.path.join(out_dir, "image0.pgm"))
write_pgm(maps["finetuned"][0], os.path.join(out_dir, "map0.pgm"))
print("wrote PGMs to", out_dir)
