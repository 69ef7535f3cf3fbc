# %% [markdown]
# Two shapes of different classes in one image: finetune the same pretrained
# explainer once per class and see where each map puts its mass.

# %%
import numpy as np

from ltx import (Dataset, Explained, Explainer, FinetuneConfig, ModelSpec, PretrainConfig, class_specific_explain,
                 gen_synthetic, pretrain, train_explained, train_val_split)

data = Dataset.from_samples(gen_synthetic(600, seed=1), 4)
train, val = train_val_split(data)
ckpt, _ = train_explained(train, ModelSpec(), epochs=10, seed=1)
model = Explained.from_checkpoint(ckpt)
explainer = Explainer.from_checkpoint(
    pretrain(ckpt, train.images, val.images[:100], PretrainConfig(epochs=5, seed=1)).checkpoint)

# %% maps at this scale are faint everywhere, so look at where their top pixels land
def top_share(m, fp):
    k = int(fp.sum())
    top = np.argsort(-m.ravel(), kind="stable")[:k]
    return fp.ravel()[top].mean()


for s in gen_synthetic(5, seed=50, two_object=True):
    x = s.image.astype(float)
    p = model(x[None])[0]
    a = class_specific_explain(model, explainer, x, s.label, FinetuneConfig()).map
    b = class_specific_explain(model, explainer, x, s.other_label, FinetuneConfig()).map
    print(f"classes {s.label}/{s.other_label}, p = {p[s.label]:.2f}/{p[s.other_label]:.2f} | "
          f"map for {s.label}: {top_share(a, s.footprint):.0%} of top pixels on it, "
          f"{top_share(a, s.other_footprint):.0%} on the other | "
          f"map for {s.other_label}: {top_share(b, s.other_footprint):.0%} on it, "
          f"{top_share(b, s.footprint):.0%} on the other")
