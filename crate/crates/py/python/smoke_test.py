"""Smoke test for the `stq` extension module.

Build and install first:  maturin develop -m crates/py/Cargo.toml  (or pip install crates/py)
Then run:                 python crates/py/python/smoke_test.py [MNIST_DIR]
"""

import json
import math
import os
import sys
import tempfile

import stq


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL {what}")
    print(f"ok   {what}")


# regularizer
check(abs(stq.reg_stq(0.3, 1.0, math.pi / 4) - stq.reg_r2(0.3, 1.0)) < 1e-12, "pi/4 limit matches r2")
check(stq.reg_stq(2.0, 1.0, math.pi / 2 - 1e-3) == stq.reg_r1(2.0, 1.0), "near pi/2 matches r1")
dw, dmu, dbeta = stq.reg_stq_grad(1.2, 1.0, 1.0, gamma=0.0)
check((dw, dmu, dbeta) == (1.0, -1.0, 0.0), "penalty gradient on the distance arm")

# codes
codes = stq.ternarize([0.5, -0.05, -0.7, 0.1, 0.0], 0.1)
check(codes == [1, 0, -1, 0, 0], "ternarize")
packed = stq.pack_codes(codes, 2)
check(packed == bytes([0b00_10_00_01, 0]), "ternary packing is LSB-first")
check(stq.unpack_codes(packed, len(codes), 2) == codes, "ternary round trip")
b = stq.binarize([0.2, -0.1, 0.0])
check(stq.unpack_codes(stq.pack_codes(b, 1), 3, 1) == b, "binary round trip")
try:
    stq.pack_codes([0, 1], 1)
    check(False, "binary packing rejects zero codes")
except ValueError:
    check(True, "binary packing rejects zero codes")

# compression accounting
lenet = stq.Model.lenet5()
check(lenet.weight_counts() == [150, 2400, 48000, 10080, 840], "lenet-5 weight counts")
check(abs(stq.compression_ratio(lenet.weight_counts(), [1, 1, 2, 2, 2]) - 16.34) < 0.01, "lenet-5 1-1-2-2-2 ratio")

# training on a small synthetic task
spec = {
    "name": "mlp",
    "input_shape": [1, 1, 16],
    "layers": [
        {"type": "flatten"},
        {"type": "dense", "in_features": 16, "out_features": 32, "quantize": True},
        {"type": "relu"},
        {"type": "dense", "in_features": 32, "out_features": 4, "quantize": True},
    ],
}
train = stq.Dataset.synthetic(1000, 16, 4, noise=1.0, seed=7, split="train")
test = stq.Dataset.synthetic(300, 16, 4, noise=1.0, seed=7, split="test")
model = stq.Model.from_spec(json.dumps(spec), mode="stq", seed=0)
report = model.train(train, test, json.dumps({"epochs": 6, "lr_drop_epochs": [3], "batch_size": 32}))
check(report["best_val_accuracy"] > 0.8, f"synthetic accuracy {report['best_val_accuracy']:.3f}")
check(all(math.pi / 4 < b < math.pi / 2 for b in model.betas()), "betas stay in range")

packed_model = model.export()
check(packed_model.depths() == model.depths(), "exported depths")
with tempfile.TemporaryDirectory() as d:
    path = os.path.join(d, "m.stqw")
    packed_model.save(path)
    again = stq.PackedModel.load(path)
check(again == packed_model, "file round trip")
check(again.to_bytes() == packed_model.to_bytes(), "byte-identical re-encode")
check(again.accuracy(test) == report["quantized_accuracy"], "decoded accuracy equals training report")
try:
    stq.PackedModel.from_bytes(packed_model.to_bytes()[:-3])
    check(False, "truncated file rejected")
except ValueError as e:
    check("offset" in str(e), "truncated file rejected")

# optional: one MNIST batch through LeNet-5
if len(sys.argv) > 1:
    mnist_train, mnist_test = stq.Dataset.mnist(sys.argv[1])
    check(len(mnist_train) == 60000 and len(mnist_test) == 10000, "mnist sizes")
    out = stq.Model.lenet5().export().accuracy(mnist_test.take(500))
    check(0.0 <= out <= 1.0, "untrained lenet-5 inference")

print("smoke test passed")
