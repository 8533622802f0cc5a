"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

import torch

from xjac import __version__
from xjac.analysis import (
    attribution_histogram,
    cumulative_prediction_curve,
    load_tags,
    pos_relation_shares,
    pos_restricted_prediction,
    tag_index,
    word_level_from_index,
)
from xjac.attribution import SCHEMES, AttributionOutput, attribute, convergence_sweep
from xjac.encoder import (
    EncoderConfig,
    SiameseEncoder,
    _atomic_write_text,
    build_vocab,
    load_checkpoint,
    save_checkpoint,
)
from xjac.errors import DataError, UsageError, XjacError
from xjac.heatmap import render_heatmap_svg
from xjac.synthetic import synthetic_pairs, tags_file_text
from xjac.trainer import TrainConfig, evaluate, load_dataset, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _json_text(data) -> str:
    return json.dumps(data, indent=1) + "\n"


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.stem + ".manifest.json")


def _write_manifest(out: Path, command: str, args, started: datetime, inputs, outputs, config=None) -> None:
    manifest = {
        "command": command,
        "arguments": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "config": config,
        "seed": getattr(args, "seed", None),
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
    }
    _atomic_write_text(_manifest_path(out), _json_text(manifest))


def _read_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    for section in data:
        if section not in ("encoder", "train"):
            raise UsageError(f"unknown config section {section!r}; expected 'encoder' and/or 'train'")
    return data


def _build(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)


def cmd_train(args) -> int:
    started = datetime.now(timezone.utc)
    torch.set_num_threads(1)
    cfg = _read_config(args.config)
    train_values = dict(cfg.get("train", {}))
    encoder_values = dict(cfg.get("encoder", {}))
    for key in ("objective", "seed", "epochs", "lr", "batch_size"):
        if getattr(args, key) is not None:
            train_values[key] = getattr(args, key)
    if args.architecture is not None:
        encoder_values["architecture"] = args.architecture
    train_cfg = _build(TrainConfig, train_values)
    requested_adjusted = True if args.adjusted else encoder_values.get("adjusted")
    if train_cfg.objective == "cosine" and requested_adjusted:
        raise UsageError(
            "refusing --objective cosine with shifted (adjusted) embeddings: the reference maps to the zero "
            "vector and its cosine similarity is undefined; use --objective dot for adjusted models"
        )
    encoder_values["adjusted"] = train_cfg.objective == "dot"

    data = load_dataset(args.data)
    eval_data = load_dataset(args.eval) if args.eval else data
    vocab = build_vocab([t for p in data for t in (p.text_a, p.text_b)])
    model = SiameseEncoder(_build(EncoderConfig, encoder_values), vocab, seed=train_cfg.seed)
    trace = train(model, data, train_cfg)

    out = Path(args.out)
    loss_path = out.with_name(out.stem + ".loss.csv")
    save_checkpoint(model, out)
    _atomic_write_text(loss_path, _csv_text(["epoch", "mean_loss"], enumerate(trace, start=1)))
    rho_cos = evaluate(model, eval_data, "cosine")
    rho_dot = evaluate(model, eval_data, "dot")
    print(f"final train loss: {trace[-1]:.6f}")
    print(f"eval spearman cosine: {rho_cos:.4f}")
    print(f"eval spearman dot: {rho_dot:.4f}")
    _write_manifest(out, "train", args, started, [args.data] + ([args.eval] if args.eval else []),
                    [out, loss_path], {"encoder": asdict(model.config), "train": asdict(train_cfg),
                                       "eval_spearman": {"cosine": rho_cos, "dot": rho_dot}})
    return 0


def _check_attr_args(args, model) -> None:
    if not 0 <= args.layer <= model.num_layers:
        raise UsageError(f"--layer must be in 0..{model.num_layers}")
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")


def _svg_title(out: AttributionOutput) -> str:
    return f"layer {out.layer}, score {out.score:.4f}, attribution error {out.error:.2e} (N={out.steps})"


def cmd_attribute(args) -> int:
    started = datetime.now(timezone.utc)
    model = load_checkpoint(args.model)
    _check_attr_args(args, model)
    out = Path(args.out)
    outputs = []
    if args.data:
        pairs = load_dataset(args.data)
        if args.limit is not None:
            pairs = pairs[:args.limit]
        out.mkdir(parents=True, exist_ok=True)
        jobs = [(p.text_a, p.text_b, out / f"pair_{i:05d}.json") for i, p in enumerate(pairs)]
    elif args.text_a and args.text_b:
        jobs = [(args.text_a, args.text_b, out)]
    else:
        raise UsageError("give --text-a and --text-b, or --data")
    for text_a, text_b, path in jobs:
        result = attribute(model, model.tokenize(text_a), model.tokenize(text_b), args.layer, args.steps,
                           args.scheme, batch_size=args.batch)
        _atomic_write_text(path, _json_text(result.to_json()))
        outputs.append(path)
        if args.svg:
            svg_path = Path(args.svg) if not args.data else path.with_suffix(".svg")
            _atomic_write_text(svg_path, render_heatmap_svg(result.matrix, result.tokens_a, result.tokens_b,
                                                            _svg_title(result)))
            outputs.append(svg_path)
        if not args.data:
            print(f"score {result.score:.6f}  attribution sum {result.attribution_sum:.6f}  "
                  f"error {result.error:.3e}")
    _write_manifest(out, "attribute", args, started, [args.model] + ([args.data] if args.data else []), outputs)
    return 0


def cmd_sweep(args) -> int:
    started = datetime.now(timezone.utc)
    model = load_checkpoint(args.model)
    pairs = load_dataset(args.data)
    if args.limit is not None:
        pairs = pairs[:args.limit]
    seqs = [(model.tokenize(p.text_a), model.tokenize(p.text_b)) for p in pairs]
    layers = args.layers if args.layers is not None else list(range(model.num_layers + 1))
    for layer in layers:
        if not 0 <= layer <= model.num_layers:
            raise UsageError(f"layer {layer} outside 0..{model.num_layers}")
    rows = convergence_sweep(model, seqs, layers, args.steps, args.scheme, batch_size=args.batch)
    out = Path(args.out)
    header = ["layer", "steps", "mean_abs_error", "std_abs_error", "mean_rel_error", "std_rel_error"]
    _atomic_write_text(out, _csv_text(header, [list(asdict(r).values()) for r in rows]))
    _write_manifest(out, "sweep", args, started, [args.model, args.data], [out])
    return 0


def _load_outputs(inputs: Path, layer: int | None) -> list[AttributionOutput]:
    files = sorted(Path(inputs).glob("*.json")) if Path(inputs).is_dir() else [Path(inputs)]
    outputs = []
    for f in files:
        if f.name == "manifest.json" or f.name.endswith(".manifest.json"):
            continue
        try:
            out = AttributionOutput.from_json(json.loads(f.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise DataError(f"{f}: {exc}") from exc
        if layer is None or out.layer == layer:
            outputs.append(out)
    if not outputs:
        raise DataError(f"no attribution outputs found in {inputs}")
    return outputs


def cmd_analyze(args) -> int:
    started = datetime.now(timezone.utc)
    outputs = _load_outputs(args.inputs, args.layer)
    out = Path(args.out)
    written = [out]
    inputs = [args.inputs]
    if args.kind == "hist":
        rows = []
        for layer in sorted({o.layer for o in outputs}):
            h = attribution_histogram(outputs, layer, args.bins)
            for k, count in enumerate(h.counts):
                rows.append([layer, float(h.edges[k]), float(h.edges[k + 1]), int(count), h.negative_fraction])
        text = _csv_text(["layer", "bin_left", "bin_right", "count", "negative_fraction"], rows)
        _atomic_write_text(out, text)
    elif args.kind == "curve":
        curve = cumulative_prediction_curve(outputs)
        rows = [[float(f), float(m), float(s)] for f, m, s in zip(curve.fractions, curve.mean, curve.std)]
        _atomic_write_text(out, _csv_text(["fraction", "mean", "std"], rows))
        kept = [o for o in outputs if o.score != 0]
        ex_rows = [[i, o.layer, o.score, o.attribution_sum, float(e)]
                   for i, (o, e) in enumerate(zip(kept, curve.endpoints))]
        ex_path = out.with_name(out.stem + ".examples.csv")
        _atomic_write_text(ex_path, _csv_text(["example", "layer", "score", "attribution_sum", "endpoint"], ex_rows))
        written.append(ex_path)
        if curve.excluded:
            print(f"excluded {curve.excluded} examples with zero score", file=sys.stderr)
    else:
        if args.tags is None:
            raise UsageError("analyze pos needs --tags")
        index = tag_index(load_tags(args.tags))
        inputs.append(args.tags)
        words = [word_level_from_index(o, index) for o in outputs]
        table = pos_relation_shares(words, args.fractions)
        rows = [[f, rank, rel, share, count]
                for f, entries in table.items() for rank, (rel, share, count) in enumerate(entries, start=1)]
        _atomic_write_text(out, _csv_text(["fraction", "rank", "relation", "share", "count"], rows))
        if args.relations:
            rels = [r.strip() for r in args.relations.split(",") if r.strip()]
            res_rows = [[i, pos_restricted_prediction(w, rels)] for i, w in enumerate(words) if w.score != 0]
            res_path = out.with_name(out.stem + ".restricted.csv")
            _atomic_write_text(res_path, _csv_text(["example", "fraction_of_score"], res_rows))
            written.append(res_path)
    _write_manifest(out, f"analyze {args.kind}", args, started, inputs, written)
    return 0


def cmd_synth(args) -> int:
    started = datetime.now(timezone.utc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_pairs = synthetic_pairs(args.train, seed=args.seed)
    eval_pairs = synthetic_pairs(args.eval, seed=args.seed + 1)
    written = []
    for name, pairs in (("train.tsv", train_pairs), ("eval.tsv", eval_pairs)):
        text = "".join(f"{p.text_a}\t{p.text_b}\t{p.label!r}\n" for p in pairs)
        _atomic_write_text(out / name, text)
        written.append(out / name)
    _atomic_write_text(out / "tags.tsv", tags_file_text(train_pairs + eval_pairs))
    written.append(out / "tags.tsv")
    _write_manifest(out, "synth", args, started, [], written)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xjac", description="Integrated-Jacobian attributions for Siamese encoders.")
    parser.add_argument("--version", action="version", version=f"xjac {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="fine-tune a toy Siamese encoder")
    p.add_argument("--data", type=Path, required=True, help="training TSV: text_a, text_b, score in [0,1]")
    p.add_argument("--eval", type=Path, help="evaluation TSV (default: the training data)")
    p.add_argument("--config", type=Path, help="JSON with optional 'encoder' and 'train' sections")
    p.add_argument("--objective", choices=("dot", "cosine"))
    p.add_argument("--adjusted", action="store_true", help="request shifted embeddings explicitly")
    p.add_argument("--architecture", choices=("linear", "mlp", "transformer"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True, help="checkpoint JSON path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attribute", help="token-token attribution matrix for one pair or a TSV of pairs")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--text-a")
    p.add_argument("--text-b")
    p.add_argument("--data", type=Path, help="TSV of pairs; --out is then a directory")
    p.add_argument("--limit", type=int)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--scheme", choices=SCHEMES, default="midpoint")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--svg", nargs="?", const="auto", help="also write an SVG heatmap (path for single pairs)")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("sweep", help="attribution error against step count per layer")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--layers", type=_int_list, help="comma-separated layers (default: all)")
    p.add_argument("--steps", type=_int_list, default=[10, 50, 100, 500, 1000])
    p.add_argument("--scheme", choices=SCHEMES, default="midpoint")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="histograms, cumulative curves and POS relations")
    p.add_argument("kind", choices=("hist", "curve", "pos"))
    p.add_argument("--inputs", type=Path, required=True, help="attribution JSON file or directory")
    p.add_argument("--layer", type=int, help="only use outputs for this layer")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--tags", type=Path, help="word<TAB>tag file, blank line between sentences")
    p.add_argument("--fractions", type=_float_list, default=[0.1, 0.25, 0.5])
    p.add_argument("--relations", help="comma-separated relations such as NN-NN,NN-VB")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synth", help="write the synthetic topic corpus and its tags")
    p.add_argument("--train", type=int, default=4000)
    p.add_argument("--eval", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "svg", None) == "auto" and not getattr(args, "data", None):
        args.svg = str(Path(args.out).with_suffix(".svg"))
    try:
        return args.func(args)
    except XjacError as exc:
        print(f"xjac: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"xjac: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
