# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Reading the attention maps
#
# Train the default model on the synthetic corpus, then look at one
# customer's eight attention heads and at what happens to the prediction
# when the two triggers of an ordered rule are swapped.
#
# `python3 notebooks/02_attention.py` (about 40 s).  The same matrices can be
# written to disk with `etusb attention-heatmap`.

# %%
import numpy as np

from etusb import pipeline, synth
from etusb.encoder import batch_of, export_attention, forward_batch
from etusb.journey import Sample
from etusb.training import TrainConfig, train

data = synth.generate(synth.SynthConfig())
prep = pipeline.prepare(data.events, data.labels, reference_time=data.manifest["config"]["reference_time"])
ds = prep.dataset
config = prep.model_config()
result = train(ds, config, TrainConfig())
params = result.params
print(f"validation accuracy {result.val_report.accuracy:.4f}")

# %% [markdown]
# ## One customer
#
# Pick a validation customer whose label comes from an ordered pair and
# whose prediction is right.

# %%
rules = {r.class_id: r for r in synth.rules_from_manifest(data.manifest)}
probs = forward_batch(batch_of(ds, result.val_idx), params, config).probs
pick = next(i for k, i in enumerate(result.val_idx)
            if rules[int(ds.labels[i])].kind == synth.SEQUENTIAL and probs[k].argmax() == ds.labels[i])
n = int(ds.mask[pick].sum())
tokens = [prep.vocab.tokens[t] for t in ds.token_ids[pick, :n]]
short = [t.split("|")[0] for t in tokens]
rule = rules[int(ds.labels[pick])]
print(ds.customer_ids[pick], "class", ds.labels[pick], "=", " then ".join(rule.tokens))
for i, t in enumerate(tokens):
    print(f"{i:3d}  {t}")

# %% [markdown]
# ## Heads as text
#
# Rows are queries, columns are keys, both in time order.  Darker glyphs
# carry more weight.  Each row sums to one.

# %%
SHADES = " .:-=+*#%@"


def render(m):
    glyph = lambda v: SHADES[min(int(v * len(SHADES)), len(SHADES) - 1)]
    return "\n".join("".join(glyph(v) * 2 for v in row) for row in m)


sample = Sample(ds.customer_ids[pick], ds.token_ids[pick], ds.position_ids[pick], ds.mask[pick],
                ds.nonseq[pick], int(ds.labels[pick]), tuple(short))
amap = export_attention(sample, params, config)[0]
for h in range(amap.heads):
    m = amap.scores[h]
    assert np.allclose(m.sum(axis=1), 1.0, atol=1e-12)
    print(f"head {h}  (largest weight {m.max():.2f} on {short[int(m.max(axis=0).argmax())]})")
    print(render(m))

# %% [markdown]
# Average attention received by each event, over heads and queries.  The
# triggers of the planted rule tend to collect more than the background.

# %%
received = amap.scores.mean(axis=(0, 1))
for t, r in sorted(zip(short, received), key=lambda x: -x[1]):
    mark = "  <- trigger" if t in rule.tokens else ""
    print(f"{r:.3f}  {t}{mark}")

# %% [markdown]
# ## Order matters
#
# Swap the two trigger events and run the model again.  The nonsequential
# features do not change (both triggers lie in the same time window), so
# any change in the prediction comes from the position embeddings alone.

# %%
a, b = (short.index(t) for t in rule.tokens)
tok = ds.token_ids[pick].copy()
tok[[a, b]] = tok[[b, a]]
batch = batch_of(ds, [pick])
swapped = forward_batch(type(batch)(tok[None], batch.position_ids, batch.mask, batch.nonseq), params, config).probs[0]
before = forward_batch(batch, params, config).probs[0]
mirror = next(c for c, r in rules.items() if r.kind == synth.SEQUENTIAL and r.tokens == rule.tokens[::-1])
print(f"class {rule.class_id} ({' then '.join(rule.tokens)}): {before[rule.class_id]:.3f} -> {swapped[rule.class_id]:.3f}")
print(f"class {mirror} ({' then '.join(rule.tokens[::-1])}): {before[mirror]:.3f} -> {swapped[mirror]:.3f}")
