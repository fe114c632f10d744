"""Rank LoRA modules with the four zero-cost proxies."""

import numpy as np

from heterolora import AdapterConfig, ModelConfig, Transformer, inject
from heterolora.allocator import select
from heterolora.saliency import compute_scores
from heterolora.tasks import SyntheticTask, make_task

task = make_task(SyntheticTask("parity", vocab_size=8, seq_len=8, n_train=256, n_eval=64))
model = Transformer(ModelConfig(d_model=32, n_layers=2, n_heads=2, d_ff=64, vocab_size=8, max_seq_len=8))
inject(model, AdapterConfig(lora_sites=("q_proj", "k_proj", "v_proj", "o_proj"), lora_rank=8))
batches = task.train_batches(16, np.random.default_rng(0))[:8]

## Decomposed SNIP and SYNFLOW are zero at init because B = 0; the merged basis is not
for proxy in ("constant", "snip", "synflow", "gradnorm"):
    for basis in ("decomposed", "merged"):
        scores = compute_scores(model, proxy, batches, basis)
        row = " ".join(f"{s.value:9.3g}" for s in scores.values())
        print(f"{proxy:9s}{basis:11s}{row}")

## Enable the top quarter by GRAD-NORM
plan = select(compute_scores(model, "gradnorm", batches), 0.25)
print("enabled:", [str(m) for m in plan.enabled])
