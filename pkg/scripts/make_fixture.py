"""Generate the committed toy fixture: a trained CNN plus data blobs.

Trains a small ResNet-style network (torch, CPU) on a synthetic 4-class
texture dataset, converts the checkpoint into the package's manifest +
blob format, and writes the evaluation blobs the test suite consumes:

    fmodel.json / fmodel.bin   float model
    calib.bin                  calibration batch (64 images)
    test_images.bin            512 test images
    test_labels.bin            int32 labels
    golden_logits.bin          float-engine logits on the test images

The dataset mixes a coarse per-class pattern with a fine low-amplitude
component and heavy noise, so narrow integer formats measurably hurt
accuracy.  All randomness is seeded; the committed artifacts are what
the tests trust, the script documents their provenance.

Usage: python3 scripts/make_fixture.py [--out tests/fixtures/toy]
                                       [--ckpt exporter/fixtures/toy_ckpt.pt]
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from shiftquant.calibrate import CalibConfig, quantize_model
from shiftquant.engine import run_float, run_quantized
from shiftquant.graph import Graph, Model, Node, BNRefs
from shiftquant.modelio import load_model, save_model, write_tensor
from shiftquant.nnops import ConvAttrs

SEED = 20240817
NUM_CLASSES = 4
INPUT_SHAPE = (3, 12, 12)
TRAIN_N = 4096
TEST_N = 512
CALIB_N = 64
BG_AMP = 6.0
COARSE_AMP = 0.35
FINE_AMP = 0.15
NOISE_SIGMA = 2.0
EPOCHS = 30
BATCH = 64
LR = 3e-3


def make_dataset(rng, n):
    """Per-class coarse blob + fine texture, buried in Gaussian noise."""
    proto_rng = np.random.default_rng(SEED)  # prototypes never depend on n
    coarse = np.kron(
        proto_rng.normal(0.0, 1.0, (NUM_CLASSES, 3, 3, 3)), np.ones((1, 1, 4, 4))
    )
    fine = proto_rng.normal(0.0, 1.0, (NUM_CLASSES, *INPUT_SHAPE))
    # one strong background shared by all classes: it carries no label
    # information but stretches the input range, so coarse input formats
    # round away a large part of the per-class signal
    bg = proto_rng.normal(0.0, 1.0, INPUT_SHAPE)
    labels = rng.integers(0, NUM_CLASSES, n)
    noise = rng.normal(0.0, NOISE_SIGMA, (n, *INPUT_SHAPE))
    x = BG_AMP * bg + COARSE_AMP * coarse[labels] + FINE_AMP * fine[labels] + noise
    return x.astype(np.float32), labels.astype(np.int64)


class ToyResNet(nn.Module):
    """Torch twin of the manifest graph written by to_model()."""

    def __init__(self):
        super().__init__()
        c = lambda ci, co, k, s=1, p=0, bias=False: nn.Conv2d(
            ci, co, k, stride=s, padding=p, bias=bias
        )
        self.stem_conv, self.stem_bn = c(3, 8, 3, p=1), nn.BatchNorm2d(8)
        self.b1_conv1, self.b1_bn1 = c(8, 8, 3, p=1), nn.BatchNorm2d(8)
        self.b1_conv2, self.b1_bn2 = c(8, 8, 3, p=1), nn.BatchNorm2d(8)
        self.b2_conv1, self.b2_bn1 = c(8, 16, 3, s=2, p=1), nn.BatchNorm2d(16)
        self.b2_conv2, self.b2_bn2 = c(16, 16, 3, p=1), nn.BatchNorm2d(16)
        self.b2_proj, self.b2_projbn = c(8, 16, 1, s=2), nn.BatchNorm2d(16)
        self.b3_conv1, self.b3_bn1 = c(16, 16, 3, p=1), nn.BatchNorm2d(16)
        self.b3_conv2, self.b3_bn2 = c(16, 16, 3, p=1), nn.BatchNorm2d(16)
        self.head = c(16, NUM_CLASSES, 6, bias=True)
        self.relu = nn.ReLU()

    def forward(self, x):
        s = self.relu(self.stem_bn(self.stem_conv(x)))
        y = self.relu(self.b1_bn1(self.b1_conv1(s)))
        y = self.relu(self.b1_bn2(self.b1_conv2(y)) + s)
        z = self.relu(self.b2_bn1(self.b2_conv1(y)))
        z = self.relu(self.b2_bn2(self.b2_conv2(z)) + self.b2_projbn(self.b2_proj(y)))
        u = self.relu(self.b3_bn1(self.b3_conv1(z)))
        u = self.b3_bn2(self.b3_conv2(u)) + z  # no relu after this add
        return self.head(u)


# (node id, torch prefix) pairs; bn stats become gamma/beta/mean/var tensors
CONV_MAP = [
    ("stem.conv", "stem_conv"), ("b1.conv1", "b1_conv1"), ("b1.conv2", "b1_conv2"),
    ("b2.conv1", "b2_conv1"), ("b2.conv2", "b2_conv2"), ("b2.proj", "b2_proj"),
    ("b3.conv1", "b3_conv1"), ("b3.conv2", "b3_conv2"), ("head", "head"),
]
BN_MAP = [
    ("stem.bn", "stem_bn"), ("b1.bn1", "b1_bn1"), ("b1.bn2", "b1_bn2"),
    ("b2.bn1", "b2_bn1"), ("b2.bn2", "b2_bn2"), ("b2.projbn", "b2_projbn"),
    ("b3.bn1", "b3_bn1"), ("b3.bn2", "b3_bn2"),
]


def to_model(net: ToyResNet) -> Model:
    sd = {k: v.detach().numpy().astype(np.float64) for k, v in net.state_dict().items()}
    t = {}
    for node, pfx in CONV_MAP:
        t[f"{node}.w"] = sd[f"{pfx}.weight"]
        if f"{pfx}.bias" in sd:
            t[f"{node}.b"] = sd[f"{pfx}.bias"]
    for node, pfx in BN_MAP:
        t[f"{node}.g"] = sd[f"{pfx}.weight"]
        t[f"{node}.be"] = sd[f"{pfx}.bias"]
        t[f"{node}.m"] = sd[f"{pfx}.running_mean"]
        t[f"{node}.v"] = sd[f"{pfx}.running_var"]

    def conv(nid, src, stride=1, padding=0, bias=False):
        return Node(nid, "conv", inputs=(src,), attrs=ConvAttrs(stride, padding),
                    weight=f"{nid}.w", bias=f"{nid}.b" if bias else None)

    def bn(nid, src):
        return Node(nid, "bn", inputs=(src,),
                    bn=BNRefs(f"{nid}.g", f"{nid}.be", f"{nid}.m", f"{nid}.v", eps=1e-5))

    nodes = [
        Node("input", "input", shape=INPUT_SHAPE),
        conv("stem.conv", "input", padding=1), bn("stem.bn", "stem.conv"),
        Node("stem.relu", "relu", inputs=("stem.bn",)),
        conv("b1.conv1", "stem.relu", padding=1), bn("b1.bn1", "b1.conv1"),
        Node("b1.relu1", "relu", inputs=("b1.bn1",)),
        conv("b1.conv2", "b1.relu1", padding=1), bn("b1.bn2", "b1.conv2"),
        Node("b1.add", "add", inputs=("b1.bn2", "stem.relu")),
        Node("b1.relu2", "relu", inputs=("b1.add",)),
        conv("b2.conv1", "b1.relu2", stride=2, padding=1), bn("b2.bn1", "b2.conv1"),
        Node("b2.relu1", "relu", inputs=("b2.bn1",)),
        conv("b2.conv2", "b2.relu1", padding=1), bn("b2.bn2", "b2.conv2"),
        conv("b2.proj", "b1.relu2", stride=2), bn("b2.projbn", "b2.proj"),
        Node("b2.add", "add", inputs=("b2.bn2", "b2.projbn")),
        Node("b2.relu2", "relu", inputs=("b2.add",)),
        conv("b3.conv1", "b2.relu2", padding=1), bn("b3.bn1", "b3.conv1"),
        Node("b3.relu1", "relu", inputs=("b3.bn1",)),
        conv("b3.conv2", "b3.relu1", padding=1), bn("b3.bn2", "b3.conv2"),
        Node("b3.add", "add", inputs=("b3.bn2", "b2.relu2")),
        conv("head", "b3.add", bias=True),
        Node("out", "output", inputs=("head",)),
    ]
    return Model(Graph(tuple(nodes)), t)


def train(net, x, y):
    opt = torch.optim.Adam(net.parameters(), lr=LR)
    loss_fn = nn.CrossEntropyLoss()
    xt, yt = torch.from_numpy(x), torch.from_numpy(y)
    net.train()
    for epoch in range(EPOCHS):
        perm = torch.randperm(len(xt))
        total = 0.0
        for i in range(0, len(xt), BATCH):
            idx = perm[i : i + BATCH]
            opt.zero_grad()
            out = net(xt[idx]).flatten(1)
            loss = loss_fn(out, yt[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        if (epoch + 1) % 10 == 0:
            print(f"epoch {epoch + 1:3d}  loss {total / len(xt):.4f}")
    net.eval()


def top1(logits, labels):
    return float((logits.reshape(len(labels), -1).argmax(axis=1) == labels).mean())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="tests/fixtures/toy")
    ap.add_argument("--ckpt", default="exporter/fixtures/toy_ckpt.pt")
    args = ap.parse_args(argv)

    torch.manual_seed(SEED)
    rng = np.random.default_rng(SEED + 1)
    x_train, y_train = make_dataset(rng, TRAIN_N)
    x_test, y_test = make_dataset(rng, TEST_N)
    x_calib = x_train[:CALIB_N]

    net = ToyResNet()
    train(net, x_train, y_train)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.ckpt)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), ckpt)

    save_model(to_model(net), out / "fmodel.json", out / "fmodel.bin")
    write_tensor(out / "calib.bin", x_calib)
    write_tensor(out / "test_images.bin", x_test)
    write_tensor(out / "test_labels.bin", y_test.astype(np.int32))

    # golden logits via the same path the CLI takes: float32 weights from disk
    model = load_model(out / "fmodel.json", out / "fmodel.bin")
    logits = run_float(model, x_test.astype(np.float64)).astype(np.float32)
    write_tensor(out / "golden_logits.bin", logits)

    acc_f = top1(logits, y_test)
    accs = {"float": acc_f}
    for bits in (8, 6):
        cfg = CalibConfig(bit_width=bits, calib_inputs=(x_calib.astype(np.float64),))
        qm, _ = quantize_model(model, cfg)
        q_logits = run_quantized(qm, x_test.astype(np.float64)).values
        accs[f"int{bits}"] = top1(q_logits, y_test)
    with open(out / "metrics.json", "w") as f:
        json.dump({"top1": accs, "test_n": TEST_N}, f, indent=2)
        f.write("\n")
    for k, v in accs.items():
        print(f"top-1 {k:6s} {v:.4f}")


if __name__ == "__main__":
    main()
