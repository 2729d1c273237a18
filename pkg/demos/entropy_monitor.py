"""Watching a client notice that its task changed.

Every round each client scores the broadcast global model by the average
prediction entropy over its own data. When new entity types show up the
model becomes less sure of itself, the entropy jumps, and the client keeps
the previous round's global model as its frozen teacher.

    python demos/entropy_monitor.py
"""
import logging

from finer.corpus import build_task_stream
from finer.federation import Federation, FederationConfig
from finer.synthetic import generate_benchmark
from finer.tagger import TaggerConfig

logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")

train, test = generate_benchmark(600, 150)
stream = build_task_stream(train, base=2, step=2)
cfg = FederationConfig(
    initial_clients=6, clients_added_per_task=2, selection_fraction=0.5, rounds_per_task=4,
    lr_first_task=0.5, lr_incremental=0.05, entropy_normalization="sentence", monitor_scope="all",
)
fed = Federation(stream, cfg, TaggerConfig(hidden_dim=24), "lgfd", list(test.sentences))

for task_slice in stream:
    fed.advance_task(task_slice)
    print(f"\ntask {fed.task}: new types {', '.join(task_slice.new_types)}")
    for r in range(1, cfg.rounds_per_task + 1):
        entry = fed.run_round(r)
        fired = sorted(cid for cid, hit in entry.triggers.items() if hit)
        mean = sum(entry.entropies.values()) / max(len(entry.entropies), 1)
        print(f"  round {entry.round:2d}  mean entropy {mean:7.3f}  switched: {fired or '-'}")
    m = fed.evaluate()
    old = "   -  " if m.old_ma_f1 is None else f"{m.old_ma_f1:.3f}"
    print(f"  old-type Ma-F1 {old}  all-type Ma-F1 {m.all_ma_f1:.3f}")

teachers = sorted(cid for cid, c in fed.clients.items() if c.old_checkpoint is not None)
print("\nclients holding a teacher:", teachers)
