"""Command-line entry point: ``mneme <command> ...``.

Machine-readable results go to files under ``--out``; progress and errors
go to standard error.  Exit codes: 0 ok, 2 usage/config, 3 data, 4 numeric.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .corpus import SyntheticCorpusSpec, Vocab, build_entity_prompt, load_jsonl, save_jsonl, synth_generate
from .errors import FormatError, InputError, NumericError, SpecError
from .experiment import (
    ExperimentPlan,
    limited_context_plan,
    limited_context_setup,
    run_degradation,
    train_sweep_models,
    write_degradation,
)
from .generate import GenerateConfig, generate_for_prompts, read_generations, write_generations
from .metrics import (
    DEFAULT_PROTAGONISTS,
    DEFAULT_SECTIONS,
    EntityMentionIndex,
    annotate_generated,
    lm_uncertainty,
    pos_lexicon,
    story_metrics,
    write_report_csv,
    write_report_json,
    write_section_csv,
)
from .model import MnemeLM, ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, make_example, train_loop, write_trace_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _corpus(path):
    if path is None:
        raise ConfigError("--corpus is required")
    try:
        return load_jsonl(path)
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from None


def _out(path) -> Path:
    if path is None:
        raise ConfigError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path) -> tuple[MnemeLM, Vocab]:
    try:
        model = load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    tokens = (model.checkpoint_extra or {}).get("vocab")
    if tokens is None:
        raise DataError(f"{path}: checkpoint carries no vocabulary")
    return model, Vocab(tokens)


# -- commands -----------------------------------------------------------------------
def cmd_synth(args) -> int:
    spec = SyntheticCorpusSpec.from_dict(_read_json(args.config)) if args.config else SyntheticCorpusSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    corpus, truth = synth_generate(spec)
    out = _out(args.out)
    save_jsonl(corpus, out / "corpus.jsonl")
    with open(out / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log(f"wrote {len(corpus)} stories to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    model_raw = raw.pop("model", {})
    try:
        tcfg = TrainConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    corpus = _corpus(args.corpus)
    vocab = Vocab.from_corpus(corpus)
    model_raw = dict(model_raw, vocab_size=len(vocab))
    if args.variant:
        model_raw["variant"] = args.variant
    if args.cache_size is not None:
        model_raw["cache_size"] = args.cache_size
    try:
        mcfg = ModelConfig.from_dict(model_raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    model = MnemeLM(mcfg, seed=tcfg.seed)
    examples = [make_example(s, vocab) for s in corpus]
    log(f"training {mcfg.variant} ({model.num_parameters()} parameters) on {len(examples)} stories")
    result = train_loop(model, examples, tcfg)
    out = _out(args.out)
    save_checkpoint(model, out / "model.mneme", extra={"vocab": vocab.words, "train": tcfg.to_dict()})
    vocab.save(out / "vocab.txt")
    write_trace_csv(result.trace, out / "trace.csv")
    log(f"final nll {result.trace[-1].nll:.4f}; wrote {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    model, vocab = _load_model(args.checkpoint)
    raw = _read_json(args.config) if args.config else {}
    for key, flag in (("nucleus_p", args.nucleus_p), ("temperature", args.temperature),
                      ("max_tokens", args.max_tokens), ("samples_per_prompt", args.samples), ("seed", args.seed)):
        if flag is not None:
            raw[key] = flag
    try:
        gcfg = GenerateConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    prompts = [(s.story_id, build_entity_prompt(s)) for s in _corpus(args.corpus)]
    for sid, p in prompts:
        missing = [t for t in p.render() if t not in vocab]
        if missing:
            raise DataError(f"{sid}: prompt tokens outside the vocabulary: {missing[:5]}")
    records = generate_for_prompts(model, prompts, vocab, gcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_generations(records, out)
    log(f"wrote {len(records)} samples to {out}")
    return EXIT_OK


def _stories_for_analysis(path, gold_by_id, lexicon):
    """Annotated corpus records pass through; generation records are annotated."""
    try:
        with open(path, encoding="utf-8") as fh:
            first = next((json.loads(line) for line in fh if line.strip()), None)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read stories {path}: {exc}") from None
    if first is None:
        return []
    if "tokens" in first:
        return [(s, gold_by_id.get(s.story_id), None) for s in load_jsonl(path)]
    out = []
    for r in read_generations(path):
        gold = gold_by_id.get(r["prompt_id"])
        if gold is None:
            raise DataError(f"generation for unknown prompt {r['prompt_id']!r}")
        toks = r["text"].split()
        sid = f"{r['prompt_id']}#{r['sample_index']}"
        out.append((annotate_generated(sid, toks, gold, lexicon), gold, r["text"]))
    return out


def cmd_analyze(args) -> int:
    gold_corpus = _corpus(args.corpus)
    gold_by_id = {s.story_id: build_entity_prompt(s) for s in gold_corpus}
    items = _stories_for_analysis(args.stories, gold_by_id, pos_lexicon(gold_corpus))
    rows = [story_metrics(n, g, args.sections, args.protagonists, text) for n, g, text in items]
    out = _out(args.out)
    write_report_json(rows, out / "report.json")
    write_report_csv(rows, out / "report.csv")
    log(f"analysed {len(rows)} stories; wrote {out}")
    return EXIT_OK


def cmd_eval_lm(args) -> int:
    model, vocab = _load_model(args.checkpoint)
    corpus = _corpus(args.corpus)
    unknown = sorted({t for s in corpus for t in s.tokens if t not in vocab})
    if unknown:
        log(f"warning: {len(unknown)} token types map to <unk>")
    rows, curves = [], {}
    for story in corpus:
        ex = make_example(story, vocab)
        index = EntityMentionIndex.from_narrative(story, args.sections)
        stats = lm_uncertainty(model, ex, index, args.sections, cache_size=args.cache_size)
        rows.append({"story_id": story.story_id, **stats})
        curves[story.story_id] = stats["nll_entity_per_section"]
    out = _out(args.out)
    write_report_json(rows, out / "lm.json")
    write_report_csv(rows, out / "lm.csv")
    write_section_csv(curves, out / "sections.csv")
    log(f"evaluated {len(rows)} stories at cache size {args.cache_size if args.cache_size is not None else model.config.cache_size}")
    return EXIT_OK


def cmd_degradation(args) -> int:
    """Without a plan file the shipped limited-context set-up is trained and swept.
    A plan may name checkpoints as ``{"checkpoints": {"vanilla/0": path}}``
    together with ``--corpus`` to sweep existing models."""
    raw = _read_json(args.config) if args.config else {}
    checkpoints = raw.pop("checkpoints", None)
    plan = ExperimentPlan.from_dict({**vars(limited_context_plan()), **raw}) if raw else limited_context_plan()
    if args.cache_size is not None:
        plan = replace(plan, cache_sizes=list(args.cache_size))
    if args.variant:
        plan = replace(plan, variants=[args.variant])
    if args.seed is not None:
        plan = replace(plan, seeds=[args.seed])
    if checkpoints:
        corpus = _corpus(args.corpus)
        models, vocab = {}, None
        for key, path in checkpoints.items():
            variant, _, seed = key.partition("/")
            models[(variant, int(seed or 0))], vocab = _load_model(path)
        missing = [(v, s) for v in plan.variants for s in plan.seeds if (v, s) not in models]
        if missing:
            raise ConfigError(f"plan needs checkpoints for {missing}")
        examples = [make_example(s, vocab) for s in corpus]
    else:
        log("training the limited-context model pairs")
        models, examples = train_sweep_models(limited_context_setup(), plan)
    tables, dumps = run_degradation(plan, models, examples)
    paths = write_degradation(tables, dumps, _out(args.out))
    for v in plan.variants:
        log(f"{v}: mean mention-NLL change at cache {min(plan.cache_sizes)}: {tables.mean_overall_degradation(v):+.2f}%")
    log("wrote " + ", ".join(p.name for p in paths))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mneme", description="Entity-memory language model workbench.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=True):
        sp.add_argument("--config", help="JSON configuration file")
        if corpus:
            sp.add_argument("--corpus", help="annotated corpus JSONL")
        sp.add_argument("--out", help="output directory (generate: output file)")
        sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("synth", help="write a synthetic annotated corpus"), corpus=False)
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("train", help="train a model"))
    sp.add_argument("--variant", choices=["vanilla", "static", "dynamic"])
    sp.add_argument("--cache-size", type=int)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("generate", help="sample stories from entity prompts"))
    sp.add_argument("checkpoint")
    sp.add_argument("--nucleus-p", type=float)
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--max-tokens", type=int)
    sp.add_argument("--samples", type=int)
    sp.set_defaults(func=cmd_generate)

    sp = common(sub.add_parser("analyze", help="entity metrics of stories against gold prompts"))
    sp.add_argument("stories", help="generation JSONL or annotated corpus JSONL")
    sp.add_argument("--sections", type=int, default=DEFAULT_SECTIONS)
    sp.add_argument("--protagonists", type=int, default=DEFAULT_PROTAGONISTS)
    sp.set_defaults(func=cmd_analyze)

    sp = common(sub.add_parser("eval-lm", help="teacher-forced perplexity and mention uncertainty"))
    sp.add_argument("checkpoint")
    sp.add_argument("--cache-size", type=int)
    sp.add_argument("--sections", type=int, default=DEFAULT_SECTIONS)
    sp.set_defaults(func=cmd_eval_lm)

    sp = common(sub.add_parser("degradation", help="cache-size sweep with per-section degradation tables"))
    sp.add_argument("--variant", choices=["vanilla", "static", "dynamic"])
    sp.add_argument("--cache-size", type=int, nargs="+")
    sp.set_defaults(func=cmd_degradation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        log(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (ConfigError, InputError, SpecError) as exc:
        log(f"config error: {exc}")
        return EXIT_CONFIG
    except (DataError, FormatError) as exc:
        log(f"data error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
