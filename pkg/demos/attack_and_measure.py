"""Train one small network, attack it, corrupt its inputs and measure it.

Run with ``python demos/attack_and_measure.py`` (about a minute).
"""

import numpy as np

from archrobust.attacks import AttackConfig, evaluate
from archrobust.cellspace import decode_arch_string
from archrobust.corruptions import KINDS, evaluate_corruption
from archrobust.evaluation import clean_record
from archrobust.measures import MeasureProtocol, measure_batches
from archrobust.tinynet import NetworkConfig, build_network, synth_dataset, train

cfg = NetworkConfig(image_size=8, stem_width=4, num_classes=4)
train_set, test_set = synth_dataset(cfg, 512, 64, seed=0)
arch = "|nor_conv_3x3~0|+|nor_conv_3x3~0|nor_conv_3x3~1|+|skip_connect~0|nor_conv_3x3~1|nor_conv_3x3~2|"
net = train(build_network(decode_arch_string(arch), cfg, seed=0), train_set, epochs=8, lr=0.05, seed=0)
print(f"clean accuracy {clean_record(net, test_set).accuracy[0]:.3f}")

# Accuracy against each attack over its epsilon schedule (numerators of 1/255).
for kind, extra in (("fgsm", {}), ("pgd", {}), ("aa_apgd-ce", {}), ("aa_square", {"iterations": 500})):
    rec = evaluate(net, test_set, AttackConfig(kind, **extra))
    print(f"{kind:>11}: " + " ".join(f"{lvl:g}:{a:.2f}" for lvl, a in zip(rec.levels, rec.accuracy)))

# Accuracy under each corruption, severities 1 to 5.
for kind in KINDS:
    rec = evaluate_corruption(net, test_set, kind)
    print(f"{kind:>15}: " + " ".join(f"{a:.2f}" for a in rec.accuracy))

# Training-free measures before and after training.
protocol = MeasureProtocol(n_batches=2, batch_size=32)
fresh = build_network(decode_arch_string(arch), cfg, seed=0)
for name, model in (("random init", fresh), ("trained", net)):
    m = measure_batches(model, test_set, protocol)
    print(f"{name:>11}: jacobian {m.jacobian_frobenius:.3f}, hessian {m.hessian_lambda_max:.3f}")

print("confusion matrix under fgsm 8/255:")
rec = evaluate(net, test_set, AttackConfig("fgsm"))
print(np.asarray(rec.cm[rec.levels.index(8.0)]))
