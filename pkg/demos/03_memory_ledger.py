"""Activation memory kept for the backward pass, per strategy, on a 12-layer backbone.

The ledger counts the bytes each recorded operation retains, grouped by the
layer that produced them.  Fully fine-tuning keeps every layer; the side
adapter keeps only the layers it regulates.

Run: python3 demos/03_memory_ledger.py
"""

from sherl import autograph as ag
from sherl.accountant import audit_memory
from sherl.backbones import BackboneSpec, build
from sherl.harness import Model, Strategy
from sherl.mtsa import Insertion
from sherl.tasks import TaskSpec, generate_task

backbone = build(BackboneSpec(n_layers=12, seed=3))
_, target = generate_task(TaskSpec(n_train=32, seed=3))


def ledger(strategy):
    model = Model(strategy, backbone, 4, seed=3)
    with ag.Tape() as tape:
        ag.cross_entropy(model.logits(target.train.x), target.train.y)
    return audit_memory(tape)


full = ledger(Strategy("FullFT"))
print(f"{'strategy':24s} {'backbone bytes':>15s} {'ratio':>7s} layers kept")
for strategy in [Strategy("FullFT"), Strategy("LinearProbe"), Strategy("SHERL"),
                 *(Strategy("SHERL", insertion=Insertion("multi", p)) for p in (10, 7, 4))]:
    led = ledger(strategy)
    print(f"{strategy.label:24s} {led.backbone_retained:15d} {led.backbone_retained / full.backbone_retained:7.3f} "
          f"{len(led.backbone_layers())}")
