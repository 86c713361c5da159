"""
Checking gradients and overfitting a handful of patches
=======================================================

The backward pass is written by hand, so the first thing to do is compare
it with central finite differences. Then the intra network is trained on a
few 40x40 patch pairs with clipped SGD and step decay.
"""

from qecnn.gradcheck import run_suite
from qecnn.models import Kind, build_network, train
from qecnn.nn import TrainConfig
from qecnn.synth import toy_patch_pairs

for r in run_suite(seed=0):
    print(f"{r.name:12s} max relative error {r.worst:.2e} over {r.checked} parameters")

# %%
# Two short epochs on eight patches. Raise ``steps`` to 2000 for the full
# run; it takes a few minutes on one core.
pairs = toy_patch_pairs(8, seed=0)
net = build_network(Kind.QECNN_I, 42, seed=0)
cfg = TrainConfig(learning_rate=0.1, clip_beta=0.01, batch_size=1)
trained, log = train(net, pairs, cfg, steps=16, seed=0)
print(f"loss {log.initial_loss:.5f} -> {log.final_loss:.5f} ({log.reduction:.1f}x)")
