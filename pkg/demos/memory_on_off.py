"""Compare the model with and without cross-session memory.

Half of the symptoms are only visible in the previous session's dialogue, so
a model that cannot look back should do worse from the second session on.
About two minutes:  python3 demos/memory_on_off.py
"""
from emotrack.config import ModelConfig, TrainConfig
from emotrack.evaluation import evaluate
from emotrack.synthgen import GeneratorConfig, generate_corpus
from emotrack.training import prepare_splits, train

corpus, manifest, _ = generate_corpus(
    GeneratorConfig(n_clients=60, client_turns=8, counselor_turns=4, d_e=16, hist_fraction=0.5))

for mode in ("none", "summary", "summary+retrieval"):
    cfg = TrainConfig(model=ModelConfig(d=32, h=4, d_ff=64, L_enc=1, L_dec=2, S=8, d_e=16,
                                        F=corpus.F, memory_mode=mode), max_epochs=40, lr=3e-3)
    prep = prepare_splits(corpus, manifest, cfg)
    res = train(prep.train, prep.val, cfg, seed=0)
    r = evaluate(res.params, cfg, prep.test, seed=0)
    per = "  ".join(f"s{k}={v:.2f}" for k, v in sorted(r.per_session.items()))
    print(f"{mode:18s} MAE {r.overall_mae:.3f}   {per}")
