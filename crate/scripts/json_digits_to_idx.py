"""Convert per-class JSON digit dumps ({"data": [...]}, 784 floats per image) to IDX."""
import json
import struct
import sys
from pathlib import Path

TRAIN_FRACTION = 0.8


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    splits = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(data) // 784
        n_train = int(round(n * TRAIN_FRACTION))
        for i in range(n):
            px = [max(0, min(255, int(round(v * 255)))) for v in data[i * 784:(i + 1) * 784]]
            images, labels = splits["train" if i < n_train else "t10k"]
            images.append(px)
            labels.append(digit)
    for name, (images, labels) in splits.items():
        write_images(dst / f"{name}-images-idx3-ubyte", images)
        write_labels(dst / f"{name}-labels-idx1-ubyte", labels)
        print(f"{name}: {len(labels)} samples")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
