"""Generate a small synthetic corpus, train one model, and look at its errors.

Runs in well under a minute:  python3 demos/quickstart.py
"""
import numpy as np

from emotrack.config import ModelConfig, TrainConfig
from emotrack.evaluation import evaluate
from emotrack.synthgen import GeneratorConfig, baseline_mae, generate_corpus
from emotrack.training import prepare_splits, train

# 40 clients, five sessions each, short sessions and small embeddings.
gcfg = GeneratorConfig(n_clients=40, client_turns=8, counselor_turns=8, d_e=16)
corpus, manifest, _ = generate_corpus(gcfg)
print("splits (clients):", manifest.counts())
print("predict-the-training-mean MAE:", round(baseline_mae(corpus, manifest), 3))

cfg = TrainConfig(model=ModelConfig(d=32, h=4, d_ff=64, L_enc=1, L_dec=2, S=8, d_e=16, F=corpus.F),
                  max_epochs=30, lr=3e-3)
prep = prepare_splits(corpus, manifest, cfg)
res = train(prep.train, prep.val, cfg, seed=0,
            on_epoch=lambda r: print(f"epoch {r['epoch']:2d}  train {r['train_loss']:.3f}  val {r['val_loss']:.3f}")
            if r["epoch"] % 5 == 0 else None)

result = evaluate(res.params, cfg, prep.test, seed=0)
print(f"best epoch {res.best_epoch}, test MAE {result.overall_mae:.3f}")
for k, v in sorted(result.per_session.items()):
    print(f"  session {k}: MAE {v:.3f}")

first = result.predictions[0]
print("one prediction:", first["run_id"], "session", first["session_index"],
      "predicted", round(first["pred_total"], 2), "target", round(first["target_total"], 2))
print("item scores:", np.round(first["pred_items"], 2))
