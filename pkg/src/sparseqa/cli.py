"""Command-line interface: ingest, ask, sample, eval, build-dataset,
train-adapter, serve.

Every verb maps 1:1 onto an engine operation. --json emits machine-readable
output. Error classes map to distinct exit codes:
  2 usage, 3 parse/format, 4 not found, 5 backend, 6 cache, 7 provider,
  1 anything else.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .errors import (
    BackendError,
    CacheFormatError,
    CacheMissError,
    CacheVersionError,
    ConversionError,
    IntegrityError,
    NotFoundError,
    ParseError,
    ProviderError,
    SparseQAError,
)
from .store import Engine, EngineConfig

_EXIT_CODES = [
    ((ParseError, IntegrityError, ConversionError), 3),
    (NotFoundError, 4),
    (BackendError, 5),
    ((CacheMissError, CacheFormatError, CacheVersionError), 6),
    (ProviderError, 7),
]


def _exit_code(exc: SparseQAError) -> int:
    return next((code for cls, code in _EXIT_CODES if isinstance(exc, cls)), 1)


def _engine(ctx) -> Engine:
    overrides = {k: v for k, v in ctx.obj.items() if k != "config_file"}
    config = EngineConfig.load(ctx.obj.get("config_file"), overrides=overrides)
    return Engine(config)


def _run(fn):
    try:
        fn()
    except SparseQAError as e:
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        sys.exit(_exit_code(e))


@click.group()
@click.option("--config", "config_file", type=click.Path(exists=True, path_type=Path),
              default=None, help="JSON config file")
@click.option("--store-root", type=click.Path(path_type=Path), default=None)
@click.option("--backend", "backend_kind", default=None,
              type=click.Choice(["echo", "extractive", "scripted", "remote"]))
@click.pass_context
def main(ctx, config_file, store_root, backend_kind):
    ctx.obj = {"config_file": config_file, "store_root": store_root,
               "backend_kind": backend_kind}


@main.command()
@click.argument("path", type=click.Path(exists=True, path_type=Path))
@click.option("--doc-id", default=None)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def ingest(ctx, path, doc_id, as_json):
    """Ingest a document file; embeds and caches all chunks eagerly."""
    def go():
        engine = _engine(ctx)
        did = engine.ingest_file(path, doc_id=doc_id)
        if as_json:
            click.echo(json.dumps({"doc_id": did}))
        else:
            click.echo(f"ingested {path} as {did}")
    _run(go)


@main.command()
@click.option("--doc", "doc_id", required=True)
@click.option("--question", required=True)
@click.option("--k", type=int, default=None)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def ask(ctx, doc_id, question, k, as_json):
    """Answer a question over an ingested document with ranked evidence."""
    def go():
        payload = _engine(ctx).ask_payload(doc_id, question, k)
        if as_json:
            click.echo(json.dumps(payload, ensure_ascii=False))
        else:
            click.echo(f"answer: {payload['answer']}")
            for e in payload["evidence"]:
                click.echo(f"  #{e['rank']} [{e['modality']}] {e['chunk_id']} "
                           f"score={e['score']:.4f}")
    _run(go)


@main.command("sample")
@click.option("--doc", "doc_id", required=True)
@click.option("--question", required=True)
@click.option("--k", type=int, default=None)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def sample_cmd(ctx, doc_id, question, k, as_json):
    """Rank evidence only; no LLM call."""
    def go():
        evidence = _engine(ctx).sample_evidence(doc_id, question, k)
        rows = [{"chunk_id": e.chunk_id, "modality": e.modality,
                 "score": round(e.score, 6), "rank": e.rank} for e in evidence.entries]
        if as_json:
            click.echo(json.dumps({"evidence": rows}))
        else:
            for r in rows:
                click.echo(f"#{r['rank']} [{r['modality']}] {r['chunk_id']} "
                           f"score={r['score']:.4f}")
    _run(go)


@main.command("eval")
@click.option("--cases", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--preds", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--k", type=int, default=None)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def eval_cmd(ctx, cases, preds, k, as_json):
    """Score a predictions file against an annotated case file."""
    def go():
        result = _engine(ctx).eval_run(cases, preds, k)
        if as_json:
            r = result["report"]
            click.echo(json.dumps({
                "anls": r.anls, "token_f1": r.token_f1, "rouge_l": r.rouge_l,
                "recall_at_k": r.recall_at_k, "mean_tokens": r.mean_tokens,
                "mean_latency_ms": r.mean_latency_ms, "case_count": r.case_count,
                "gpt_acc": r.gpt_acc,
            }))
        else:
            click.echo(result["text"])
    _run(go)


@main.command("build-dataset")
@click.option("--docs", "doc_ids", required=True, help="comma-separated doc ids")
@click.option("--strategies", default="text_only", help="comma-separated strategies")
@click.option("--split", default="train", type=click.Choice(["train", "test"]))
@click.option("--out", "out_name", default="corpus.jsonl")
@click.option("--seed", type=int, default=0)
@click.option("--per-doc", type=int, default=1)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def build_dataset(ctx, doc_ids, strategies, split, out_name, seed, per_doc, as_json):
    """Generate a QA corpus with evidence annotations."""
    def go():
        from .dataset import render_stats

        result = _engine(ctx).build_dataset(
            doc_ids.split(","), strategies.split(","), split, out_name,
            seed=seed, per_doc=per_doc)
        if as_json:
            click.echo(json.dumps(result))
        else:
            click.echo(f"wrote {result['path']}: kept {result['kept']}, "
                       f"rejected {result['rejected']}")
            click.echo(render_stats(result["stats"]))
    _run(go)


@main.command("train-adapter")
@click.option("--corpus", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "out_name", default="adapter.wkad")
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def train_adapter_cmd(ctx, corpus, out_name, epochs, lr, as_json):
    """Train the linear query adapter on an annotated corpus."""
    def go():
        from .adapter import TrainConfig

        engine = _engine(ctx)
        c = engine.config
        tc = TrainConfig(
            temperature=c.temperature,
            learning_rate=lr if lr is not None else c.learning_rate,
            epochs=epochs if epochs is not None else c.epochs,
            batch_size=c.batch_size,
            seed=c.seed,
        )
        result = engine.train_adapter_from_corpus(corpus, out_name, tc)
        if as_json:
            click.echo(json.dumps(result))
        else:
            tr = result["trajectory"]
            click.echo(f"wrote {result['path']}; loss {tr[0]:.4f} -> {tr[-1]:.4f}")
    _run(go)


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
@click.pass_context
def serve(ctx, host, port):
    """Run the HTTP service."""
    def go():
        from .service import serve as run_serve

        overrides = {k: v for k, v in ctx.obj.items() if k != "config_file"}
        config = EngineConfig.load(ctx.obj.get("config_file"), overrides=overrides)
        run_serve(config, host=host, port=port)
    _run(go)


if __name__ == "__main__":
    main()
