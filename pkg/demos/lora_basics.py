"""Wrap a frozen projection with a LoRA adapter, train it, then fold it back in."""

import numpy as np

from heterolora import AdapterConfig, ModelConfig, Transformer, count_parameters, inject, lora_merge

## A small host model; its weights stand in for a pre-trained checkpoint
model = Transformer(ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, vocab_size=10, max_seq_len=8))
tokens = np.array([1, 4, 2, 7, 3])
before = model(tokens).data

## Adapters on the query and value projections of every layer
registry = inject(model, AdapterConfig(lora_sites=("q_proj", "v_proj"), lora_rank=4, lora_alpha=16.0))
print("adapters:", [str(m) for m in registry])
print("trainable parameters:", count_parameters(model, trainable_only=True),
      "of", count_parameters(model))

## B starts at zero, so the adapted model is exactly the base model
print("unchanged at init:", np.array_equal(model(tokens).data, before))

## Nudge one adapter as if it had been trained
adapter = registry[next(iter(registry))]
adapter.B.data[...] = np.random.default_rng(0).normal(0, 0.1, adapter.B.shape)
adapted = model(tokens).data

## Merge the low-rank update into the base weight and switch the adapter off
w = model.params["layers.0.q_proj.weight"]
w.data[...] = lora_merge(w.data, adapter)
adapter.enabled = False
print("merged matches dual path:", np.allclose(model(tokens).data, adapted, atol=1e-12))
