"""Command-line entry point: ``qlora-cls <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import CheckpointError, load_checkpoint
from .data import SINGLE, DatasetError, SyntheticSpec, generate_synthetic, load_jsonl, save_jsonl
from .evaluation import bench_throughput, format_throughput_table
from .inference import (
    CONSTRAINED,
    FREE,
    encode_text,
    evaluate_embedding,
    evaluate_instruction,
    head_forward,
    instruction_loss,
    predict_instruction,
    render,
)
from .model import dense_base_weights
from .objectives import ClassifierHead, bce_loss, ce_loss, predict_multilabel, supervision_mask
from .prompting import Verbalizer
from .quantization import dequantize_nf4, quantize_nf4
from .tensor import backward, no_grad
from .training import EMBEDDING, INSTRUCTION, TrainConfig, build, run_training


class CliError(Exception):
    pass


def _table(rows: list[tuple[str, str]]) -> str:
    w = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(w)}  {v}" for k, v in rows) + "\n"


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _load_dataset(path, task=None):
    if path is None:
        raise CliError("--dataset is required")
    if not Path(path).exists():
        raise CliError(f"dataset not found: {path}")
    return load_jsonl(path, task)


def _load_ckpt(path):
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> str:
    overrides = {}
    if args.approach:
        overrides["approach"] = args.approach
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.lora_rank is not None:
        overrides["lora_rank"] = args.lora_rank
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    if args.config:
        if not Path(args.config).is_file():
            raise CliError(f"config file not found: {args.config}")
        config = TrainConfig.load(args.config, **overrides)
    else:
        approach = overrides.pop("approach", EMBEDDING)
        config = TrainConfig.for_approach(approach, **overrides)
    dataset = _load_dataset(args.dataset)
    out = Path(args.out)
    run = run_training(dataset, config, out)

    verb = dataset.verbalizer()
    if run.approach == EMBEDDING:
        test = evaluate_embedding(run.model, run.head, dataset.test, verb, config.eval_batch_size, config.threshold, config.max_seq_len)
    else:
        decoding = FREE if dataset.multilabel else config.val_decoding
        test = evaluate_instruction(run.model, dataset.test, verb, dataset.multilabel, decoding, config.max_seq_len)
    record = {"epoch": run.epochs_run, "split": "test", **test.to_record()}
    with (out / "metrics.jsonl").open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    summary = {
        "approach": run.approach,
        "best_epoch": run.best_epoch,
        "best_val_micro_f1": run.best_metric,
        "final_val_micro_f1": run.final_metric,
        "epochs_run": run.epochs_run,
        "test_micro_f1": test.micro_f1,
        "test_parse_failure_rate": test.parse_failure_rate,
        "train_sps": run.train_sps,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return _table([(k, _fmt(v)) for k, v in summary.items()] + [("run_dir", str(out))])


def _approach(meta: dict, head) -> str:
    return meta.get("approach") or (EMBEDDING if head is not None else INSTRUCTION)


def cmd_evaluate(args) -> str:
    ck = _load_ckpt(args.checkpoint)
    dataset = _load_dataset(args.dataset, ck.meta.get("task"))
    _check_labels(ck.meta, dataset.labels)
    verb = dataset.verbalizer()
    examples = dataset.split(args.split)
    approach = _approach(ck.meta, ck.head)
    if approach == EMBEDDING:
        res = evaluate_embedding(ck.model, ck.head, examples, verb, args.batch_size, ck.meta.get("threshold", 0.5))
        decoding = "head"
    else:
        decoding = args.decoding
        if dataset.multilabel and decoding == CONSTRAINED:
            raise CliError("constrained decoding needs a single-label dataset; use --decoding free")
        res = evaluate_instruction(ck.model, examples, verb, dataset.multilabel, decoding)
    record = {"split": args.split, "approach": approach, "decoding": decoding, **res.to_record()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval.{args.split}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return _table([(k, _fmt(v)) for k, v in record.items()])


def _check_labels(meta: dict, labels) -> None:
    known = meta.get("labels")
    if known is not None and list(known) != list(labels):
        raise CliError(f"dataset labels {list(labels)} differ from the checkpoint's {known}")


def cmd_predict(args) -> str:
    ck = _load_ckpt(args.checkpoint)
    if args.text is None and args.file is None:
        raise CliError("give --text or --file")
    if args.file is not None and not Path(args.file).is_file():
        raise CliError(f"input file not found: {args.file}")
    texts = [args.text] if args.text is not None else [ln.rstrip("\n") for ln in Path(args.file).read_text().splitlines() if ln.strip()]
    labels = ck.meta.get("labels")
    if not labels:
        raise CliError("checkpoint carries no label names")
    verb = Verbalizer(labels)
    multi = ck.meta.get("task") != SINGLE
    lines = []
    for text in texts:
        if _approach(ck.meta, ck.head) == EMBEDDING:
            with no_grad():
                z = head_forward(ck.model, ck.head, [encode_text(text, ck.model.config.max_seq_len)]).data
            if multi:
                bits = predict_multilabel(z, ck.meta.get("threshold", 0.5))[0]
                out = [n for n, b in zip(labels, bits) if b]
            else:
                out = labels[int(np.argmax(z[0]))]
        else:
            decoding = FREE if multi else args.decoding
            pred, raw, _ = predict_instruction(ck.model, text, verb, multi, decoding)
            if pred is None:
                out = {"parse_failure": raw}
            elif multi:
                out = [n for n, b in zip(labels, pred) if b]
            else:
                out = labels[pred]
        lines.append(json.dumps({"text": text, "prediction": out}, ensure_ascii=False))
    return "\n".join(lines) + "\n"


def cmd_bench(args) -> str:
    """Paired train/infer throughput for both approaches on one base model."""
    dataset = _load_dataset(args.dataset)
    examples = dataset.test
    verb = dataset.verbalizer()
    multi = dataset.multilabel
    if args.checkpoint:
        model = _load_ckpt(args.checkpoint).model
    else:
        model, _ = build(dataset, TrainConfig.for_approach(EMBEDDING, lora_rank=args.lora_rank))
    head = ClassifierHead(len(verb), model.config.d_model, np.random.default_rng(0), multilabel=multi)
    max_len = model.config.max_seq_len
    pick = [examples[i % len(examples)] for i in range(args.samples + args.warmup)]
    targets = dataset.targets("test")

    def embed_infer(i):
        with no_grad():
            head_forward(model, head, [encode_text(pick[i].text, max_len)])

    def embed_train(i):
        z = head_forward(model, head, [encode_text(pick[i].text, max_len)], training=True)
        t = targets[[i % len(examples)]]
        backward(bce_loss(z, t) if multi else ce_loss(z, t))

    rendered = [render(ex.text, verb, multi, list(ex.labels) if multi else ex.labels[0], max_len) for ex in pick]

    def instr_train(i):
        r = rendered[i]
        backward(instruction_loss(model, [r], [supervision_mask(r.prompt_len, len(r.token_ids) - r.prompt_len)], training=True))

    def instr_free(i):
        predict_instruction(model, pick[i].text, verb, multi, FREE, max_len, args.max_new_tokens)

    def instr_constrained(i):
        predict_instruction(model, pick[i].text, verb, multi, CONSTRAINED, max_len)

    reports = {
        "embedding": {
            "train": bench_throughput(embed_train, args.samples, args.warmup, "train"),
            "infer": bench_throughput(embed_infer, args.samples, args.warmup, "infer"),
        },
        "instruction": {
            "train": bench_throughput(instr_train, args.samples, args.warmup, "train"),
            "infer": bench_throughput(instr_free, args.samples, args.warmup, "infer"),
        },
    }
    if not multi:
        reports["instruction_constrained"] = {"infer": bench_throughput(instr_constrained, args.samples, args.warmup, "infer")}
    for p in model.trainable_parameters() + head.parameters():
        p.grad = None
    name = args.name or Path(args.dataset).name
    model_name = f"toy-d{model.config.d_model}-L{model.config.n_layers}"
    rows = [{"approach": a, "model": model_name, name: {ph: rep.sps for ph, rep in r.items()}} for a, r in reports.items()]
    table = format_throughput_table(rows, [name])
    payload = {a: {ph: rep.to_dict() for ph, rep in r.items()} for a, r in reports.items()}
    payload["kernel_backend"] = kernels.backend()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "throughput.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        (out / "throughput_table.txt").write_text(table)
    ratio = reports["embedding"]["infer"].sps / reports["instruction"]["infer"].sps
    return table + f"\nembedding/free-generation inference ratio: {ratio:.2f}x\n"


def cmd_gen_data(args) -> str:
    spec_dict = {}
    if args.spec:
        if not Path(args.spec).is_file():
            raise CliError(f"spec file not found: {args.spec}")
        spec_dict = json.loads(Path(args.spec).read_text())
        if not isinstance(spec_dict, dict):
            raise CliError(f"{args.spec}: spec must be a JSON object")
    if args.task:
        spec_dict["task"] = args.task
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SyntheticSpec.from_dict(spec_dict)
    out = Path(args.out)
    dataset = generate_synthetic(spec)
    save_jsonl(dataset, out)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return _table(
        [
            ("task", spec.task),
            ("labels", str(len(spec.label_names))),
            ("train/val/test", "/".join(str(len(dataset.split(s))) for s in ("train", "val", "test"))),
            ("out", str(out)),
        ]
    )


def cmd_quantize_report(args) -> str:
    ck = _load_ckpt(args.checkpoint)
    config = ck.model.config
    dense = dense_base_weights(config)
    rows = [("matrix", "shape", "blocks", "bytes_nf4", "ratio_fp32", "rmse", "max_abs_err")]
    report = []
    for key, q in ck.model.named_quantized().items():
        w = dense[key]
        regenerated = quantize_nf4(w, q.block_size).fingerprint() == q.fingerprint()
        err = dequantize_nf4(q).astype(np.float64) - w if regenerated else None
        n = q.rows * q.cols
        nbytes = (n + 1) // 2 + 4 * q.scales.size
        entry = {
            "matrix": key,
            "shape": [q.rows, q.cols],
            "blocks": int(q.scales.size),
            "bytes_nf4": nbytes,
            "ratio_fp32": 4 * n / nbytes,
            "rmse": None if err is None else float(np.sqrt(np.mean(err**2))),
            "max_abs_err": None if err is None else float(np.max(np.abs(err))),
            "code_histogram": np.bincount(q.codes, minlength=16).tolist(),
        }
        report.append(entry)
        rows.append(
            (
                key,
                f"{q.rows}x{q.cols}",
                str(entry["blocks"]),
                str(nbytes),
                f"{entry['ratio_fp32']:.2f}",
                "--" if err is None else f"{entry['rmse']:.5f}",
                "--" if err is None else f"{entry['max_abs_err']:.5f}",
            )
        )
    if args.out:
        Path(args.out).write_text(json.dumps({"backend": kernels.backend(), "matrices": report}, indent=2) + "\n")
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    body = "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)
    return body + f"\nkernel backend: {kernels.backend()}\n"


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qlora-cls", description="QLoRA-style classifiers on a toy quantized transformer.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run into a fresh run directory")
    t.add_argument("--approach", choices=[EMBEDDING, INSTRUCTION])
    t.add_argument("--dataset", required=True, help="dataset directory or JSONL file")
    t.add_argument("--config", help="JSON config (flat TrainConfig keys)")
    t.add_argument("--seed", type=int)
    t.add_argument("--lora-rank", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--out", required=True, help="run directory (must be new or empty)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--decoding", choices=[CONSTRAINED, FREE], default=CONSTRAINED)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.add_argument("--batch-size", type=int, default=4)
    e.add_argument("--out", help="directory for eval.<split>.json")
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("predict", help="label raw text with a checkpoint")
    pr.add_argument("--checkpoint", required=True)
    g = pr.add_mutually_exclusive_group()
    g.add_argument("--text")
    g.add_argument("--file", help="one text per line")
    pr.add_argument("--decoding", choices=[CONSTRAINED, FREE], default=CONSTRAINED)
    pr.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="paired training/inference throughput for both approaches")
    b.add_argument("--checkpoint")
    b.add_argument("--dataset", required=True)
    b.add_argument("--samples", type=int, default=32)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--lora-rank", type=int, default=16)
    b.add_argument("--max-new-tokens", type=int)
    b.add_argument("--name", help="dataset column name in throughput_table.txt")
    b.add_argument("--out", help="directory for throughput.json and throughput_table.txt")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("gen-data", help="write a synthetic keyword dataset")
    d.add_argument("--spec", help="JSON synthetic spec")
    d.add_argument("--task", choices=["single", "multi"])
    d.add_argument("--seed", type=int)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_gen_data)

    q = sub.add_parser("quantize-report", help="per-matrix NF4 storage and error report")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--out", help="JSON report path")
    q.set_defaults(func=cmd_quantize_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "samples", 1) < 1:
        parser.error("--samples must be >= 1")
    try:
        text = args.func(args)
    except (CliError, DatasetError, CheckpointError, FileExistsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
