"""Smoke test for the semtrace_py extension module.

Build first:
    cargo build --release -p semtrace-py --features extension-module
then run:
    python3 python/smoke_test.py [path/to/libsemtrace_py.so]
"""

import importlib.machinery
import importlib.util
import math
import os
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module(path=None):
    candidates = [path] if path else [
        os.path.join(ROOT, "target", profile, "libsemtrace_py.so")
        for profile in ("release", "debug")
    ]
    for lib in candidates:
        if lib and os.path.exists(lib):
            loader = importlib.machinery.ExtensionFileLoader("semtrace_py", lib)
            spec = importlib.util.spec_from_loader("semtrace_py", loader)
            mod = importlib.util.module_from_spec(spec)
            loader.exec_module(mod)
            return mod
    sys.exit("semtrace_py not built; see the docstring")


def main():
    st = load_module(sys.argv[1] if len(sys.argv) > 1 else None)

    f = st.Function.generate(3, 8, 12)
    assert len(f) > 0
    assert f.dialect in ("archA", "archB")
    again = st.Function.parse_irfn(f.to_irfn())
    assert again.render() == f.render()

    g = f.transform(["register_rename:2", "dialect_translate:0"]).with_id("g")
    assert g.dialect != f.dialect
    assert f.equivalent_after(["register_rename:2", "bogus_flow_insert:5"], [0, 1, 2, 3])

    t = f.trace(7)
    assert t.terminated_by in ("ret", "budget", "fault")
    assert not t.is_dummy
    assert f.dummy_trace().is_dummy
    assert t.steps()[0][0] == 0

    vocab = st.Vocab.build([t, g.trace(7), f.dummy_trace()])
    assert len(vocab) > 0 and vocab.tokens()[0] == "<pad>"
    enc = vocab.encode(t)
    assert len(enc["tokens"]) == len(enc["values"]) == len(enc["arch"])

    model = st.Model(vocab, "tiny", 1)
    a, b = model.embed(f, vocab), model.embed(g, vocab)
    assert len(a) == model.d_func
    assert abs(st.cosine_similarity(a, a) - 1.0) < 1e-9
    assert st.finetune_loss(a, a, 1) < 1e-9

    with tempfile.TemporaryDirectory() as d:
        vocab.save(os.path.join(d, "vocab.txt"))
        v2 = st.Vocab.load(os.path.join(d, "vocab.txt"))
        assert v2.digest() == vocab.digest()
        model.save(os.path.join(d, "model"), vocab)
        m2 = st.Model.load(os.path.join(d, "model"), v2)
        assert m2.embed(f, v2) == a

        counts = st.generate_corpus(os.path.join(d, "corpus"), sources=6, seed=1, train_fraction=0.5)
        assert counts["sources"] == 6

    assert st.roc_auc([0.9, 0.8, 0.1], [True, True, False]) == 1.0
    assert abs(st.byte_kl_divergence(b"aaaa", b"aaaa")) < 1e-12
    assert st.byte_kl_divergence(b"aaaa", b"bbbb") > math.log(2)

    try:
        st.Function.parse("r1 := r2 +", "archA")
    except ValueError:
        pass
    else:
        raise AssertionError("malformed function accepted")

    print("semtrace_py smoke test passed")


if __name__ == "__main__":
    main()
