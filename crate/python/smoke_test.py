"""Smoke test for the fedmem Python bindings.

Uses an installed `fedmem` module when present (e.g. after `maturin develop`
in crates/py); otherwise loads the library built by
`cargo build -p fedmem-py`.
"""

import importlib.util
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import fedmem

        return fedmem
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libfedmem.so"
        if lib.exists():
            tmp = pathlib.Path(tempfile.mkdtemp())
            target = tmp / "fedmem.so"
            shutil.copy(lib, target)
            spec = importlib.util.spec_from_file_location("fedmem", target)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("fedmem not found: run `cargo build -p fedmem-py` first")


def main():
    fm = load()

    xs, ys = fm.make_synthetic_pool(4, 60, 6, separation=2.0, seed=3)
    assert len(xs) == 240 and len(xs[0]) == 6 and set(ys) == {0, 1, 2, 3}

    parts = fm.dirichlet_partition(ys, 4, 3, 0.5, seed=1)
    assert sorted(i for p in parts for i in p) == list(range(240))

    model = fm.Model.mlp([6, 16, 4], seed=7)
    probs = model.predict_proba(xs[0])
    assert len(probs) == 4 and abs(sum(probs) - 1.0) < 1e-9
    assert len(model.embed(xs[0])) == model.repr_dim == 16
    clone = fm.Model.from_bytes(model.to_bytes())
    assert clone.num_params == model.num_params

    client = parts[0]
    cx = [xs[i] for i in client]
    cy = [ys[i] for i in client]
    half = len(cx) // 2
    store = fm.Datastore.build(model, cx[:half], cy[:half])
    assert len(store) == half

    hits = store.knn(model.embed(cx[0]), k=3)
    assert hits[0][1] == cy[0] and hits[0][2] < 1e-6
    post = store.knn_posterior(model.embed(cx[0]), 4, k=3)
    assert abs(sum(post) - 1.0) < 1e-9
    mixed = fm.interpolate(post, model.predict_proba(cx[0]), 1.0)
    assert mixed == post

    lam, val_acc = fm.tune_lambda(model, store, cx[half:], cy[half:], k=5)
    assert 0.0 <= lam <= 1.0 and 0.0 <= val_acc <= 1.0
    acc = fm.evaluate(model, store, cx[half:], cy[half:], lam, k=5)
    assert abs(acc - val_acc) < 1e-12

    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "store.fmds"
        store.set_policy("fifo", half)
        store.save(str(path))
        back = fm.Datastore.load(str(path))
        assert back.policy == "fifo" and back.labels() == store.labels()
        back.update(model, cx[half:], cy[half:])
        assert len(back) == half

    try:
        fm.Model.from_bytes(b"junk")
    except fm.FedmemError:
        pass
    else:
        raise AssertionError("corrupt bytes were accepted")

    with tempfile.TemporaryDirectory() as d:
        cfg = pathlib.Path(d) / "c.toml"
        cfg.write_text(
            'scenario = "compare"\nseed = 2\n\n[data]\nnum_classes = 3\nsamples_per_class = 30\n'
            "feature_dim = 4\nnum_clients = 3\nalpha = 1.0\n\n[model]\nhidden = [8]\n\n"
            "[fed]\nrounds = 3\nlr = 0.1\nlocal_baseline_epochs = 2\n"
        )
        rows = fm.run_config(str(cfg), out=str(pathlib.Path(d) / "out"))
        assert [r[1] for r in rows] == ["local", "fedavg", "fedavg_plus", "knn_per"]
        assert (pathlib.Path(d) / "out" / "manifest.txt").exists()

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
