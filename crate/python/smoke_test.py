"""Smoke test for the tkgmem_py extension.

Build first:
    cargo build --release -p tkgmem-py --features extension-module
Then run:
    python3 python/smoke_test.py
The script copies target/release/libtkgmem_py.so next to itself as
tkgmem_py.so unless the module is already importable.
"""

import os
import shutil
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)


def load():
    try:
        import tkgmem_py  # noqa: F401
    except ImportError:
        for name in ("libtkgmem_py.so", "libtkgmem_py.dylib"):
            src = os.path.join(ROOT, "target", "release", name)
            if os.path.exists(src):
                dst = os.path.join(tempfile.mkdtemp(), "tkgmem_py.so")
                shutil.copy(src, dst)
                sys.path.insert(0, os.path.dirname(dst))
                break
    import tkgmem_py

    return tkgmem_py


def main():
    tk = load()

    assert tk.filtered_rank([0.1, 0.9, 0.5, 0.9], 2, [1]) == 2
    assert tk.fuse([1.0, 1.0], [3.0, -1.0], [0.5, 0.0]) == [2.0, 1.0]

    bank = tk.MemoryBank(3, 2)
    assert bank.gate(0, [1.0, 1.0], [[1.0] * 4, [1.0] * 4]) == [0.0, 0.0]
    bank.update_ema(0, [1.0, 2.0], 0.0)
    assert bank.memory(0) == [0.5, 1.0]
    assert bank.count(0) == 1
    restored = tk.MemoryBank.restore(bank.snapshot(), 3)
    assert restored.checksum() == bank.checksum()

    cfg = tk.Config("dim=8\nclusters=4\nepochs=2\nfilters=4\n")
    cfg.set("seed", "3")
    assert cfg.get("seed") == "3"

    data = tk.Dataset.synthetic(types=2, entities_per_type=12, timestamps=20, dim=8, seed=1)
    assert data.num_entities > 0 and data.num_facts > 0
    train_end, valid_end = data.bounds()
    assert train_end < valid_end

    model = tk.Model(cfg, data)
    curve = model.fit(data)
    assert 1 <= len(curve) <= 2
    full = model.evaluate(data, "test", "full")
    zero = model.evaluate(data, "test", "zero")
    assert 0.0 < full["all"]["mrr"] <= 1.0
    assert len(full["ranks"]) == len(zero["ranks"])

    again = tk.Model.from_bytes(model.to_bytes(), data)
    assert again.evaluate(data, "test", "full")["ranks"] == full["ranks"]
    print("params:", dict(model.param_counts()))
    print("test mrr full=%.4f zero=%.4f" % (full["all"]["mrr"], zero["all"]["mrr"]))
    print("smoke test ok")


if __name__ == "__main__":
    main()
