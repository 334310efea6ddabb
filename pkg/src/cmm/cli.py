"""Command-line entry point: ``cmm <verb> [options] [section.key=value ...]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import Resolved, resolve
from .core.tensor import NumericError
from .corpus import CorpusFormatError, generate_corpus, load_corpus_dir, save_corpus_dir
from .decode import System, beam_decode, decode_set, distractor_choice, greedy_decode, run_eval_grid
from .deploy import (IntegrityError, VersionError, as_configured, configured_checkpoint, extract,
                     load_checkpoint, param_report, save_checkpoint)
from .experiments import ABLATION_FLAGS, ablation_variant
from .model import ConfigError, make_choice_vector
from .trainer import TrainConfig, Trainer, state_from_checkpoint, to_checkpoint

log = logging.getLogger("cmm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageFailure(message)


def _out_path(path: str, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise UsageFailure(f"output {p} exists; pass --force to overwrite")
    return p


def _echo(res: Resolved, dest: Path | None = None) -> None:
    text = res.to_text()
    sys.stdout.write("# resolved config\n" + text)
    if dest is not None:
        dest.write_text(text)


def _load_corpus(path: str):
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {p}")
    return load_corpus_dir(p)


def _model_config(res: Resolved, corpus):
    """Corpus-derived sizes fill model keys the user did not set."""
    derived = {}
    for key, val in (("n_languages", corpus.manifest.n_languages), ("feat_dim", corpus.manifest.feat_dim),
                     ("vocab_size_total", corpus.vocab.total_size)):
        if f"model.{key}" not in res.explicit:
            derived[key] = val
    mc = res.model.replace(**derived) if derived else res.model
    if (mc.n_languages, mc.feat_dim, mc.vocab_size_total) != (corpus.manifest.n_languages, corpus.manifest.feat_dim,
                                                               corpus.vocab.total_size):
        raise ConfigError("model.n_languages/feat_dim/vocab_size_total disagree with the corpus")
    res.model = mc
    return mc


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args, res: Resolved) -> int:
    out = _out_path(args.out, args.force)
    _echo(res)
    corpus = generate_corpus(res.corpus)
    save_corpus_dir(out, corpus)
    (out / "resolved.cfg").write_text(res.to_text())
    print(f"wrote {sum(len(v) for v in corpus.splits.values())} utterances to {out}")
    return EXIT_OK


def cmd_train(args, res: Resolved) -> int:
    corpus = _load_corpus(args.corpus)
    mc = _model_config(res, corpus)
    out = _out_path(args.out, args.force)
    initial = None
    if res.train.strategy == "finetune" and not args.init:
        raise ConfigError("strategy=finetune needs --init with a universal checkpoint")
    if args.init:
        initial = load_checkpoint(args.init).params
    state = None
    if args.resume:
        ck = load_checkpoint(args.resume)
        state = state_from_checkpoint(ck)
        mc = ck.config
        res.model = mc
        # the interrupted run's training config, with explicit train.* keys on top
        saved = dict(ck.meta["train"])
        saved.update({k.split(".", 1)[1]: getattr(res.train, k.split(".", 1)[1])
                      for k in res.explicit if k.startswith("train.")})
        res.train = TrainConfig.from_dict(saved)
    _echo(res)
    tr = Trainer(res.train, mc, corpus.by_language("train"), initial, state)
    until = res.train.steps if args.stop_after is None else min(args.stop_after, res.train.steps)
    log_path = Path(str(out) + ".log.jsonl")
    start = len(tr.log.records)
    tr.run(until)
    with open(log_path, "a" if args.resume else "w") as f:
        f.write("".join(json.dumps(r) + "\n" for r in tr.log.records[start:]))
    save_checkpoint(out, to_checkpoint(tr, corpus.vocab))
    Path(str(out) + ".cfg").write_text(res.to_text())
    last = tr.log.records[-1]["loss"] if tr.log.records else float("nan")
    print(f"step {tr.state.step} loss {last:.4f} -> {out}")
    return EXIT_OK


def _system(path: str, use_mask: bool = True) -> System:
    ck = load_checkpoint(path)
    universal = ck.meta.get("strategy") == "universal"
    name = Path(path).name.split(".")[0]
    return System(name, ck.config, ck.params, int(ck.meta.get("max_hot", ck.config.n_languages)),
                  lid=not universal, use_mask=use_mask and not universal)


def cmd_eval(args, res: Resolved) -> int:
    corpus = _load_corpus(args.corpus)
    _echo(res)
    systems = [_system(p, not args.no_mask) for p in args.ckpt]
    grid = run_eval_grid(systems, corpus.by_language(res.eval.split), corpus.vocab, res.eval.n_hots, res.eval.seed,
                         res.eval.beam_width)
    table = grid.to_table()
    print(table, end="")
    if args.out:
        out = _out_path(args.out, args.force)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grid.txt").write_text(table)
        (out / "grid.jsonl").write_text(grid.to_jsonl())
        (out / "resolved.cfg").write_text(res.to_text())
    return EXIT_OK


def _languages(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise UsageFailure(f"--languages expects comma-separated indices, got {s!r}") from None


def cmd_configure(args, res: Resolved) -> int:
    ck = load_checkpoint(args.ckpt)
    out = _out_path(args.out, args.force)
    _echo(res)
    model = extract(ck, _languages(args.languages), prune_output=args.prune)
    save_checkpoint(out, configured_checkpoint(model, ck.vocab, {"source": str(args.ckpt)}))
    full, part = param_report(ck), param_report(model)
    print(f"full model      {full.total} parameters ({100 * full.overhead:.2f}% specific overhead)")
    print(f"configured {model.choice}  {part.total} parameters -> {out}")
    return EXIT_OK


def cmd_decode(args, res: Resolved) -> int:
    ck = load_checkpoint(args.ckpt)
    corpus = _load_corpus(args.corpus)
    _echo(res)
    utts = corpus.splits[res.eval.split][: args.limit] if args.limit else corpus.splits[res.eval.split]
    if "choice" in ck.meta:
        cm = as_configured(ck)
        results = [beam_decode(cm, u.frames, res.eval.beam_width, res.eval.max_emit) if res.eval.beam_width > 1
                   else greedy_decode(cm, u.frames, res.eval.max_emit) for u in utts]
        choices = [cm.choice] * len(utts)
    else:
        N = ck.config.n_languages
        sysm = System("model", ck.config, ck.params, N, lid=ck.meta.get("strategy") != "universal")
        if args.languages:
            choices = [make_choice_vector(_languages(args.languages), N)] * len(utts)
        else:
            choices = [distractor_choice(u.lang_id, N, 1, res.eval.seed, i) for i, u in enumerate(utts)]
        results = decode_set(sysm, utts, choices, corpus.vocab, beam_width=res.eval.beam_width,
                             max_emit=res.eval.max_emit)
    for i, (u, c, r) in enumerate(zip(utts, choices, results)):
        print(json.dumps({"index": i, "lang": u.lang_id, "choice": str(c), "ref": u.targets.tolist(),
                          "hyp": r.tokens, "score": r.score}))
    return EXIT_OK


def cmd_ablate(args, res: Resolved) -> int:
    corpus = _load_corpus(args.corpus)
    mc = _model_config(res, corpus)
    flags = [f for f in args.flags.split(",") if f]
    variant_cfg, use_mask = ablation_variant(mc, flags)
    out = _out_path(args.out, args.force)
    out.mkdir(parents=True)
    _echo(res, out / "resolved.cfg")
    train = corpus.by_language("train")
    systems = []
    if args.baseline:
        ck = load_checkpoint(args.baseline)
        systems.append(System("baseline", ck.config, ck.params, int(ck.meta.get("max_hot", res.train.max_hot))))
    else:
        tr = Trainer(res.train, mc, train)
        tr.run()
        save_checkpoint(out / "baseline.ckpt", to_checkpoint(tr, corpus.vocab))
        systems.append(System("baseline", mc, tr.params, res.train.max_hot))
    if variant_cfg == systems[0].cfg:
        params = systems[0].params  # vocabulary-only ablation: training is identical
    else:
        tr = Trainer(res.train, variant_cfg, train)
        tr.run()
        save_checkpoint(out / "variant.ckpt", to_checkpoint(tr, corpus.vocab))
        params = tr.params
    name = "-" + "-".join(flags)
    systems.append(System(name, variant_cfg, params, res.train.max_hot, use_mask=use_mask))
    grid = run_eval_grid(systems, corpus.by_language(res.eval.split), corpus.vocab, res.eval.n_hots, res.eval.seed)
    table = grid.to_table()
    print(table, end="")
    (out / "grid.txt").write_text(table)
    (out / "grid.jsonl").write_text(grid.to_jsonl())
    return EXIT_OK


VERBS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "eval": cmd_eval,
    "configure": cmd_configure,
    "decode": cmd_decode,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cmm", description="Configurable multilingual transducer toolkit.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def verb(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="flat section.key=value config file")
        s.add_argument("--seed", type=int, help="shorthand for the section seeds of this verb")
        s.add_argument("overrides", nargs="*", metavar="section.key=value")
        return s

    s = verb("gen-corpus", "generate the synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")

    s = verb("train", "train a model")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="universal checkpoint to fine-tune from")
    s.add_argument("--resume", help="checkpoint written by an interrupted run")
    s.add_argument("--stop-after", type=int, help="stop (and checkpoint) after this many total steps")
    s.add_argument("--force", action="store_true")

    s = verb("eval", "evaluate checkpoints on the n-hot grid")
    s.add_argument("--corpus", required=True)
    s.add_argument("--ckpt", required=True, action="append")
    s.add_argument("--no-mask", action="store_true", help="disable vocabulary masking")
    s.add_argument("--out")
    s.add_argument("--force", action="store_true")

    s = verb("configure", "extract a configured sub-model")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--languages", required=True, help="comma-separated language indices")
    s.add_argument("--prune", action="store_true", help="prune the output projection to the merged vocabulary")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")

    s = verb("decode", "decode utterances and print JSON lines")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--languages", help="fixed choice for a full checkpoint (default: ground truth 1-hot)")
    s.add_argument("--limit", type=int)

    s = verb("ablate", "train and evaluate an ablated variant against the baseline")
    s.add_argument("--corpus", required=True)
    s.add_argument("--flags", required=True, help="comma-separated: " + ", ".join(ABLATION_FLAGS))
    s.add_argument("--baseline", help="reuse a trained baseline checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        overrides = list(args.overrides)
        if args.seed is not None:
            section = {"gen-corpus": "corpus", "eval": "eval", "decode": "eval"}.get(args.verb, "train")
            overrides.append(f"{section}.seed={args.seed}")
        res = resolve(args.config, overrides)
        return VERBS[args.verb](args, res)
    except UsageFailure as e:
        print(f"cmm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        print(f"cmm: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, CorpusFormatError, IntegrityError, VersionError) as e:
        print(f"cmm: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"cmm: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
