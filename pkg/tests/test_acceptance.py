"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line."""
import math
import random
import statistics

import numpy as np
import pytest
import torch

from helpers import rand_seq
from xjac.analysis import (
    TaggedSentence,
    cumulative_prediction_curve,
    merge_tokens_to_words,
    pos_relation_shares,
    to_word_level,
)
from xjac.analytic import cubic_tail, square_tail
from xjac.attribution import (
    attribute,
    attribute_representations,
    decomposition_check,
    integrated_gradients_single,
    total,
)
from xjac.autodiff import finite_diff_jacobian, suffix_jacobian
from xjac.cli import main
from xjac.encoder import reference_for, score
from xjac.synthetic import word_tag
from xjac.trainer import evaluate

D64 = torch.float64


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} ({detail})")
        assert ok, detail

    return emit


def pairs_from(model, data, n):
    return [(model.tokenize(p.text_a), model.tokenize(p.text_b)) for p in data[:n]]


def test_c1_exactness_identity(models, trained, report):
    gen = torch.Generator().manual_seed(100)
    trained_model = trained[0]
    worst = 0.0
    for _ in range(100):
        la, lb = (int(x) for x in torch.randint(1, 9, (2,), generator=gen))
        a, b = rand_seq(models["linear"], la, gen), rand_seq(models["linear"], lb, gen)
        for layer in range(models["linear"].num_layers + 1):
            worst = max(worst, attribute(models["linear"], a, b, layer, steps=1).error)
        for m in models.values():
            worst = max(worst, attribute(m, a, b, m.num_layers, steps=1).error)
        ta, tb = rand_seq(trained_model, la, gen), rand_seq(trained_model, lb, gen)
        worst = max(worst, attribute(trained_model, ta, tb, trained_model.num_layers, steps=1).error)
    report(1, "exactness at N=1", worst <= 1e-10, f"max |sum A - s| = {worst:.2e} over 100 pairs")


def analytic_error(tail, steps, scheme, seed):
    gen = torch.Generator().manual_seed(seed)
    a = torch.randn(3, 4, generator=gen, dtype=D64)
    b = torch.randn(3, 4, generator=gen, dtype=D64)
    z = torch.zeros_like(a)
    tt, _ = attribute_representations(tail, a, z, b, z, steps, scheme)
    return abs(total(tt) - float(tail(a) @ tail(b)))


def test_c2_analytic_convergence(report):
    ns = (8, 32, 128)
    seeds = range(5)

    def ratios(tail, scheme):
        errs = {n: sum(analytic_error(tail, n, scheme, s) for s in seeds) for n in ns + (512,)}
        return [errs[n] / errs[4 * n] for n in ns]

    square_mid_errs = [analytic_error(square_tail, n, "midpoint", s) for n in ns for s in seeds]
    left_ratios = ratios(square_tail, "left")
    cubic_ratios = ratios(cubic_tail, "midpoint")
    ok = (max(square_mid_errs) <= 1e-12
          and all(3.5 <= r <= 4.5 for r in left_ratios)
          and all(12 <= r <= 20 for r in cubic_ratios))
    detail = (f"square midpoint max error {max(square_mid_errs):.1e} (exact); "
              f"square left ratios {', '.join(f'{r:.2f}' for r in left_ratios)}; "
              f"cubic midpoint ratios {', '.join(f'{r:.2f}' for r in cubic_ratios)}")
    report(2, "quadrature order", ok, detail)


def test_c3_four_term_identity(trained, corpus, report):
    model = trained[0]
    gen = torch.Generator().manual_seed(300)
    ns = (64, 256, 1024, 4096)
    residuals = {n: [] for n in ns}
    worst_scaled = 0.0
    for a, b in pairs_from(model, corpus[1], 20):
        ref_a = torch.randn(len(a.ids), 32, generator=gen, dtype=D64)
        ref_b = torch.randn(len(b.ids), 32, generator=gen, dtype=D64)
        s = score(model, a, b, shifted=False)
        for n in ns:
            chk = decomposition_check(model, a, b, 1, n, ref_a=ref_a, ref_b=ref_b, batch_size=256)
            residuals[n].append(abs(chk.residual))
        worst_scaled = max(worst_scaled, residuals[4096][-1] / max(1.0, abs(s)))
    medians = [statistics.median(residuals[n]) for n in ns]
    ok = worst_scaled <= 1e-3 and all(x > y for x, y in zip(medians, medians[1:]))
    detail = (f"max residual/max(1,|s|) at N=4096 = {worst_scaled:.2e}; medians "
              + ", ".join(f"N={n}: {m:.2e}" for n, m in zip(ns, medians)))
    report(3, "four-term identity with random references", ok, detail)


def test_c4_layer_ordering(trained, corpus, report):
    model = trained[0]
    pairs = pairs_from(model, corpus[1], 50)
    means = []
    for layer in (1, 2, 3):
        means.append(float(np.mean([attribute(model, a, b, layer, steps=100).error for a, b in pairs])))
    ok = means[0] >= means[1] >= means[2]
    report(4, "error non-increasing with depth at N=100", ok,
           ", ".join(f"layer {k}: {m:.2e}" for k, m in zip((1, 2, 3), means)))


def test_c5_jacobian_oracle(trained, report):
    model = trained[0]
    rng = random.Random(500)
    gen = torch.Generator().manual_seed(500)
    worst = 0.0
    for _ in range(20):
        layer = rng.randrange(model.num_layers + 1)
        seq = rand_seq(model, rng.randint(1, 6), gen)
        with torch.no_grad():
            rep = model.encode_prefix(seq, layer)
        exact = suffix_jacobian(model, rep, layer).detach()
        fd = finite_diff_jacobian(model.tail(layer), rep, h=1e-4)
        worst = max(worst, float((fd - exact).abs().max() / exact.abs().max()))
    report(5, "reverse-mode vs central differences", worst <= 1e-4, f"max normwise relative error {worst:.2e}")


def test_c6_integrated_gradients_consistency(trained, corpus, report):
    model = trained[0]
    worst_ig, worst_rows = 0.0, 0.0
    for a, b in pairs_from(model, corpus[1], 10):
        ig_raw = integrated_gradients_single(model, a, b, 1, 1024, shifted=False)
        with torch.no_grad():
            eb = model.encode(b)
            target = float(model.encode(a) @ eb - model.encode(reference_for(a)) @ eb)
        worst_ig = max(worst_ig, abs(math.fsum(ig_raw.tolist()) - target) / abs(target))

        ig = integrated_gradients_single(model, a, b, 1, 1024, shifted=True)
        s = score(model, a, b)
        out = attribute(model, a, b, 1, 1024, batch_size=64)
        ig_tokens = ig.reshape(len(a.ids), -1).sum(dim=1).numpy()
        rows = out.matrix.sum(axis=1)
        # each side carries up to 1e-3 relative quadrature error
        worst_rows = max(worst_rows, float(np.abs(rows - ig_tokens).max()) / (2e-3 * max(1.0, abs(s))))
    ok = worst_ig <= 1e-3 and worst_rows <= 1.0
    report(6, "single-input integrated gradients", ok,
           f"max relative IG error {worst_ig:.2e}; max row-sum gap / tolerance {worst_rows:.2e}")


def test_c7_zero_reference(trained, report):
    model = trained[0]
    gen = torch.Generator().manual_seed(700)
    worst = 0.0
    for _ in range(100):
        c = rand_seq(model, int(torch.randint(1, 12, (1,), generator=gen)), gen)
        worst = max(worst, abs(score(model, c, reference_for(c))))
    report(7, "score against reference after training", worst <= 1e-10, f"max |score| = {worst:.2e}")


def test_c8_training_sanity(trained, corpus, report):
    model, trace, seconds = trained
    rho = evaluate(model, corpus[1], "dot")
    ok = rho >= 0.9 and len(trace) <= 5 and seconds < 120 and torch.get_num_threads() == 1
    report(8, "dot-objective training", ok,
           f"eval Spearman {rho:.4f} after {len(trace)} epochs in {seconds:.1f}s on {len(corpus[0])} pairs")


def test_c9_conservation(trained, corpus, report):
    model = trained[0]
    outs = [attribute(model, a, b, 1, 50, full=True) for a, b in pairs_from(model, corpus[1], 20)]
    reduction = max(abs(total(o.full) - o.attribution_sum) / max(1.0, float(np.abs(o.full).sum())) for o in outs)

    rng = random.Random(900)
    merge = 0.0
    for o in outs:
        rows, cols = o.matrix.shape
        spans = []
        for n in (rows, cols):
            cuts = sorted(rng.sample(range(1, n), rng.randint(0, n - 1)))
            bounds = [0] + cuts + [n]
            spans.append(list(zip(bounds[:-1], bounds[1:])))
        merged = merge_tokens_to_words(o.matrix, *spans)
        for i, (r0, r1) in enumerate(spans[0]):
            for j, (c0, c1) in enumerate(spans[1]):
                block = o.matrix[r0:r1, c0:c1]
                merge = max(merge, abs(merged[i, j] * block.size - math.fsum(block.ravel().tolist())))

    curve = cumulative_prediction_curve(outs)
    kept = [o for o in outs if o.score != 0]
    endpoint = max(abs(e - o.attribution_sum / o.score) for e, o in zip(curve.endpoints, kept))

    words = [to_word_level(o, TaggedSentence(o.tokens_a, [word_tag(t) for t in o.tokens_a]),
                           TaggedSentence(o.tokens_b, [word_tag(t) for t in o.tokens_b])) for o in outs]
    table = pos_relation_shares(words, [0.05, 0.1, 0.25, 0.5, 1.0])
    shares = max(abs(math.fsum(s for _, s, _ in rows) - 1.0) for rows in table.values())

    ok = reduction <= 1e-15 and merge <= 1e-12 and endpoint <= 1e-12 and shares <= 1e-12
    report(9, "conservation suite", ok,
           f"reduction {reduction:.1e} (relative to sum |A|), merge {merge:.1e}, "
           f"curve endpoint {endpoint:.1e}, POS share total {shares:.1e}")


def test_c10_determinism(trained, tmp_path, report):
    model = trained[0]
    gen = torch.Generator().manual_seed(1000)
    cell = 0.0
    for _ in range(5):
        a, b = rand_seq(model, 5, gen), rand_seq(model, 4, gen)
        serial = attribute(model, a, b, 1, 64, batch_size=8, workers=1)
        parallel = attribute(model, a, b, 1, 64, batch_size=8, workers=4)
        cell = max(cell, float(np.abs(serial.matrix - parallel.matrix).max()))

    def run_all(root):
        root.mkdir()
        assert main(["synth", "--train", "200", "--eval", "20", "--seed", "5", "--out", str(root / "data")]) == 0
        assert main(["train", "--data", str(root / "data/train.tsv"), "--eval", str(root / "data/eval.tsv"),
                     "--objective", "dot", "--seed", "7", "--out", str(root / "model.json")]) == 0
        m = str(root / "model.json")
        assert main(["attribute", "--model", m, "--text-a", "nn0x0 vb0x1", "--text-b", "jj0x2 rb4x3",
                     "--layer", "1", "--steps", "30", "--out", str(root / "pair.json"), "--svg"]) == 0
        assert main(["attribute", "--model", m, "--data", str(root / "data/eval.tsv"), "--limit", "5",
                     "--layer", "2", "--steps", "30", "--out", str(root / "batch")]) == 0
        assert main(["sweep", "--model", m, "--data", str(root / "data/eval.tsv"), "--limit", "3",
                     "--layers", "1,3", "--steps", "5,20", "--out", str(root / "sweep.csv")]) == 0
        for kind in ("hist", "curve", "pos"):
            extra = ["--tags", str(root / "data/tags.tsv"), "--relations", "NN-NN"] if kind == "pos" else []
            assert main(["analyze", kind, "--inputs", str(root / "batch"), "--out", str(root / f"{kind}.csv")]
                        + extra) == 0
        return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
                if p.is_file() and not p.name.endswith("manifest.json")}

    first, second = run_all(tmp_path / "one"), run_all(tmp_path / "two")
    differing = [str(k) for k in first if first[k] != second.get(k)]
    ok = cell <= 1e-12 and not differing and set(first) == set(second)
    report(10, "determinism", ok,
           f"serial/parallel max cell gap {cell:.1e}; {len(first)} CLI output files compared, "
           f"{len(differing)} differ")
