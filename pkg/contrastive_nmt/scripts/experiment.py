"""
Experiment front end.

    python -m contrastive_nmt.scripts.experiment gen-corpus --langs 4 --sentences 2000 --vocab 200 --seed 0 --out data
    python -m contrastive_nmt.scripts.experiment train --config desk.cfg --mode ctl --corpus data --out runs/ctl
    python -m contrastive_nmt.scripts.experiment eval --ckpt runs/ctl/checkpoint.npz --suite all --out runs/ctl/eval
    python -m contrastive_nmt.scripts.experiment export-emb --ckpt runs/ctl/checkpoint.npz --proj pca2 --out emb.tsv
    python -m contrastive_nmt.scripts.experiment augment-preview --dict data/synonyms.tsv --input data/mono/mono.l2.txt
    python -m contrastive_nmt.scripts.experiment ablation --config desk.cfg --corpus data --out runs/ablation

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
import argparse
import json
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, asdict, field, replace
from typing import Dict, List, Optional, Sequence
import pandas as pd
from tqdm import tqdm
from contrastive_nmt.augment import (SynonymDictionary, load_synonym_dictionary, preview_rows,
                                     synthetic_synonym_dictionary)
from contrastive_nmt.corpus import CorpusSet, load_corpus_set
from contrastive_nmt.errors import CheckpointError, ContrastiveNMTError, UsageError, DataError
from contrastive_nmt.evaluation import (EvaluationContext, EvaluationSuites, Projections, DirectionReport,
                                        export_representations, format_summary, reports_frame, retrieval_matrix,
                                        run_suite, Scenario)
from contrastive_nmt.maker import generate_synthetic_languages
from contrastive_nmt.model import ModelParams
from contrastive_nmt.train import (TrainConfig, Trainer, TrainingModes, apply_mode, load_checkpoint, load_configs)
from contrastive_nmt.utils import atomic_write, read_lines, write_lines
from contrastive_nmt.vocab import Vocabulary, build_vocabulary_from_sentences, load_vocabulary

VOCAB_FILE = "vocab.txt"
DICTIONARY_FILE = "synonyms.tsv"
MANIFEST_FILE = "manifest.json"


@dataclass
class ExperimentManifest:
    name: str
    command: str
    out_dir: str
    config_path: str = ""
    corpus_dir: str = ""
    seed: int = 0
    mode: str = ""
    flags: Dict[str, bool] = field(default_factory=dict)
    arguments: Dict[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


class ExperimentArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


def create_experiment_dir(out_dir: str, manifest: ExperimentManifest, force: bool = False) -> str:
    """
    Creates :param out_dir with the manifest as its first file: the manifest is written into a staging directory
    which is then renamed into place.
    :raise UsageError: If :param out_dir exists and is not empty and :param force is not set.
    """
    out_dir = os.path.abspath(out_dir)
    if os.path.isdir(out_dir) and os.listdir(out_dir):
        if not force:
            raise UsageError(f"{out_dir} exists and is not empty, use --force to replace it.")
        shutil.rmtree(out_dir)
    elif os.path.exists(out_dir) and not os.path.isdir(out_dir):
        raise UsageError(f"{out_dir} exists and is not a directory.")
    parent = os.path.dirname(out_dir)
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(dir=parent, prefix=".tmp-")
    try:
        os.chmod(staging, 0o755)
        with open(os.path.join(staging, MANIFEST_FILE), "w", encoding="utf-8", newline="\n") as f:
            f.write(manifest.to_json())
        os.replace(staging, out_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return out_dir


UNRECORDED_ARGUMENTS = ("handler", "out", "force", "quiet")


def _arguments(args: argparse.Namespace) -> Dict[str, object]:
    return {k: v for k, v in sorted(vars(args).items()) if k not in UNRECORDED_ARGUMENTS}


def gen_corpus(args: argparse.Namespace) -> None:
    # Paths are relative to the corpus directory.
    manifest = ExperimentManifest("corpus", "gen-corpus", ".", seed=args.seed, arguments=_arguments(args))
    if not 0.0 <= args.coverage <= 1.0:
        raise UsageError(f"--coverage {args.coverage} needs to be in [0, 1].")
    corpora = generate_synthetic_languages(args.vocab, args.langs, args.sentences, (args.min_len, args.max_len),
                                           args.seed, n_mono_only=args.mono_only,
                                           n_mono_sentences=args.mono_sentences, n_heldout=args.heldout,
                                           identity_ciphers=args.identity_ciphers)
    out_dir = create_experiment_dir(args.out, manifest, args.force)
    corpora.save(out_dir)
    synthetic_synonym_dictionary(corpora.ciphers, args.coverage, args.seed).save(os.path.join(out_dir, DICTIONARY_FILE))
    corpus_vocabulary(corpora).save(os.path.join(out_dir, VOCAB_FILE))
    if not args.quiet:
        tqdm.write(f"wrote {len(corpora.parallel)} parallel and {len(corpora.monolingual)} monolingual corpora "
                   f"to {out_dir}")


def corpus_vocabulary(corpora: CorpusSet) -> Vocabulary:
    held_out = (s for sentences in corpora.multiway.values() for s in sentences)
    return build_vocabulary_from_sentences(list(corpora.training_sentences()) + list(held_out), corpora.languages)


def load_corpus_resources(corpus_dir: str, dictionary_path: str = ""):
    """
    :return: The corpus set, its vocabulary (vocab.txt, built when missing) and synonym dictionary (empty when
        missing).
    """
    corpora = load_corpus_set(corpus_dir)
    vocab_path = os.path.join(corpus_dir, VOCAB_FILE)
    vocab = load_vocabulary(vocab_path) if os.path.exists(vocab_path) else corpus_vocabulary(corpora)
    dictionary_path = dictionary_path or os.path.join(corpus_dir, DICTIONARY_FILE)
    dictionary = load_synonym_dictionary(dictionary_path) if os.path.exists(dictionary_path) else SynonymDictionary()
    return corpora, vocab, dictionary


def config_lines(cfg: TrainConfig, params: ModelParams) -> List[str]:
    values = {**params.config.to_dict(), **cfg.to_dict()}
    return [f"{'lambda' if k == 'lam' else k} = {v}" for k, v in values.items()]


def run_training(config_path: Optional[str], out_dir: str, corpus_dir: str = "", mode: Optional[str] = None,
                 overrides: Sequence[str] = (), resume: Optional[str] = None, force: bool = False,
                 quiet: bool = False) -> Trainer:
    """
    Trains a fresh model, or continues :param resume with the config file, the overrides and the mode applied on
    top of the configs stored in the checkpoint.
    :raise CheckpointError: If the checkpoint belongs to another vocabulary than the corpus.
    :raise ShapeError: If the overrides change the shape of a resumed model.
    """
    checkpoint = load_checkpoint(resume) if resume else None
    base = (checkpoint.params.config, checkpoint.train_config) if checkpoint is not None else None
    model_cfg, train_cfg = load_configs(config_path, overrides, base)
    if mode is not None:
        train_cfg = apply_mode(train_cfg, mode)
    corpus_dir = corpus_dir or train_cfg.corpus_dir
    if not corpus_dir:
        raise UsageError("No corpus directory, pass --corpus or set corpus_dir in the config.")
    train_cfg = replace(train_cfg, corpus_dir=corpus_dir).validate()
    corpora, vocab, dictionary = load_corpus_resources(corpus_dir, train_cfg.dictionary)
    model_cfg = replace(model_cfg, vocab_size=len(vocab), n_languages=len(vocab.languages))

    manifest = ExperimentManifest(os.path.basename(os.path.normpath(out_dir)), "train", out_dir, config_path or "",
                                  corpus_dir, train_cfg.seed, mode or "",
                                  {"use_ctl": train_cfg.use_ctl, "use_aa": train_cfg.use_aa,
                                   "use_mono": train_cfg.use_mono},
                                  {"overrides": list(overrides), "resume": resume or ""})
    if checkpoint is not None:
        if checkpoint.vocab.fingerprint() != vocab.fingerprint():
            raise CheckpointError(f"{resume} was trained with another vocabulary than the one of {corpus_dir}.")
        params = ModelParams(model_cfg, checkpoint.params.tensors)
        if not os.path.isdir(out_dir):
            create_experiment_dir(out_dir, manifest)
        else:
            with atomic_write(os.path.join(out_dir, MANIFEST_FILE)) as f:
                f.write(manifest.to_json())
        trainer = Trainer(params, vocab, corpora, train_cfg, dictionary, out_dir, checkpoint.opt_state,
                          checkpoint.position, quiet)
    else:
        create_experiment_dir(out_dir, manifest, force)
        params = ModelParams.init(model_cfg, train_cfg.seed)
        trainer = Trainer(params, vocab, corpora, train_cfg, dictionary, out_dir, quiet=quiet)

    vocab.save(os.path.join(out_dir, VOCAB_FILE))
    write_lines(os.path.join(out_dir, "config.txt"), config_lines(trainer.cfg, trainer.params))
    trainer.run()
    return trainer


def train(args: argparse.Namespace) -> None:
    run_training(args.config, args.out, args.corpus, args.mode, args.set, args.resume, args.force, args.quiet)


def run_evaluation(checkpoint_path: str, out_dir: str, suite: str = "all", corpus_dir: str = "", beam: int = 1,
                   max_sentences: Optional[int] = None, force: bool = False, quiet: bool = False) \
        -> List[DirectionReport]:
    if beam < 1:
        raise UsageError(f"--beam {beam} needs to be at least 1.")
    checkpoint = load_checkpoint(checkpoint_path)
    corpus_dir = corpus_dir or checkpoint.train_config.corpus_dir
    if not corpus_dir:
        raise UsageError("No corpus directory, pass --corpus.")
    corpora = load_corpus_set(corpus_dir)
    if not corpora.multiway:
        raise DataError(f"{corpus_dir} has no multi-way held-out set to evaluate on.")

    manifest = ExperimentManifest(os.path.basename(os.path.normpath(out_dir)), "eval", out_dir, corpus_dir=corpus_dir,
                                  seed=checkpoint.train_config.seed,
                                  arguments={"ckpt": checkpoint_path, "suite": suite, "beam": beam,
                                             "max_sentences": max_sentences})
    create_experiment_dir(out_dir, manifest, force)
    context = EvaluationContext(checkpoint.params, checkpoint.vocab, corpora, beam, max_sentences, quiet)
    reports = run_suite(suite, context)

    reports_frame(reports).to_csv(os.path.join(out_dir, "reports.tsv"), sep="\t", index=False,
                                  float_format="%.6f", lineterminator="\n")
    if context.representations:
        retrieval_matrix(context.representations).to_csv(os.path.join(out_dir, "retrieval_matrix.tsv"), sep="\t",
                                                         float_format="%.6f", lineterminator="\n")
    summary = format_summary(reports, corpora.hub)
    with atomic_write(os.path.join(out_dir, "summary.txt")) as f:
        f.write(summary)
    if not quiet:
        tqdm.write(summary)
    return reports


def evaluate(args: argparse.Namespace) -> None:
    run_evaluation(args.ckpt, args.out, args.suite, args.corpus, args.beam, args.max_sentences, args.force,
                   args.quiet)


def export_emb(args: argparse.Namespace) -> None:
    checkpoint = load_checkpoint(args.ckpt)
    corpus_dir = args.corpus or checkpoint.train_config.corpus_dir
    if not corpus_dir:
        raise UsageError("No corpus directory, pass --corpus.")
    multiway = load_corpus_set(corpus_dir).multiway
    if args.max_sentences is not None:
        multiway = {lang: sentences[:args.max_sentences] for lang, sentences in multiway.items()}
    export_representations(checkpoint.params, checkpoint.vocab, multiway, args.out, args.proj)


def augment_preview(args: argparse.Namespace) -> None:
    if not 0.0 <= args.p <= 1.0:
        raise UsageError(f"--p {args.p} needs to be in [0, 1].")
    dictionary = load_synonym_dictionary(args.dict)
    frame = preview_rows(read_lines(args.input), dictionary, args.p, args.seed, args.lang)
    if args.out:
        frame.to_csv(args.out, sep="\t", index=False, lineterminator="\n")
    else:
        frame.to_csv(sys.stdout, sep="\t", index=False, lineterminator="\n")


COMPARISON_COLUMNS = ["mode", "bleu_supervised", "bleu_unsupervised", "bleu_zero-shot", "bleu_pivot",
                      "retrieval_english-centric", "retrieval_multi-way", "retrieval_zero-shot"]


def comparison_row(mode: str, reports: Sequence[DirectionReport], hub: str) -> List:
    def mean(values):
        return float(sum(values) / len(values)) if values else float("nan")

    bleu = [r for r in reports if r.metric == "bleu"]
    retrieval = [r for r in reports if r.metric == "retrieval_top1"]
    return [mode] + [mean([r.value for r in bleu if r.scenario == s.value])
                     for s in (Scenario.SUPERVISED, Scenario.UNSUPERVISED, Scenario.ZERO_SHOT, Scenario.PIVOT)] + \
        [mean([r.value for r in retrieval if hub in (r.src_lang, r.tgt_lang)]),
         mean([r.value for r in retrieval]),
         mean([r.value for r in retrieval if r.scenario == Scenario.ZERO_SHOT.value])]


def run_ablation(config_path: Optional[str], corpus_dir: str, out_dir: str, modes: Sequence[str] = (),
                 overrides: Sequence[str] = (), beam: int = 1, max_sentences: Optional[int] = None,
                 force: bool = False, quiet: bool = False) -> pd.DataFrame:
    """
    Trains and evaluates every mode into out_dir/<mode> and writes out_dir/comparison.tsv.
    """
    modes = list(modes) or TrainingModes().names()
    for mode in modes:
        if mode not in TrainingModes():
            raise UsageError(f"Unknown mode {mode!r}, known: {', '.join(TrainingModes().names())}.")
    manifest = ExperimentManifest(os.path.basename(os.path.normpath(out_dir)), "ablation", out_dir,
                                  config_path or "", corpus_dir,
                                  arguments={"modes": modes, "overrides": list(overrides), "beam": beam,
                                             "max_sentences": max_sentences})
    create_experiment_dir(out_dir, manifest, force)
    corpora = load_corpus_set(corpus_dir)
    rows = []
    for mode in modes:
        run_dir = os.path.join(out_dir, mode)
        trainer = run_training(config_path, run_dir, corpus_dir, mode, overrides, quiet=quiet)
        reports = run_evaluation(trainer.checkpoint_path, os.path.join(run_dir, "eval"), "all", corpus_dir, beam,
                                 max_sentences, quiet=quiet)
        rows.append(comparison_row(mode, reports, corpora.hub))
    comparison = pd.DataFrame(rows, columns=COMPARISON_COLUMNS)
    comparison.to_csv(os.path.join(out_dir, "comparison.tsv"), sep="\t", index=False, float_format="%.4f",
                      lineterminator="\n")
    if not quiet:
        tqdm.write(comparison.to_string(index=False))
    return comparison


def ablation(args: argparse.Namespace) -> None:
    run_ablation(args.config, args.corpus, args.out, args.modes, args.set, args.beam, args.max_sentences, args.force,
                 args.quiet)


parser = ExperimentArgumentParser(prog="experiment", description="Contrastive multilingual NMT experiments.")
subparsers = parser.add_subparsers(dest="command", required=True)

gen_parser = subparsers.add_parser("gen-corpus", help="Generate synthetic cipher language corpora.")
gen_parser.add_argument("--langs", type=int, default=4, help="The number of languages, the first one is the hub.")
gen_parser.add_argument("--sentences", type=int, default=2000, help="Sentences per parallel / monolingual corpus.")
gen_parser.add_argument("--vocab", type=int, default=200, help="The number of concepts (tokens per language).")
gen_parser.add_argument("--seed", type=int, default=0)
gen_parser.add_argument("--out", type=str, required=True, help="The corpus directory.")
gen_parser.add_argument("--min-len", type=int, default=4)
gen_parser.add_argument("--max-len", type=int, default=12)
gen_parser.add_argument("--mono-only", type=int, default=None,
                        help="Languages with monolingual data only, 1 when there are 3 or more languages.")
gen_parser.add_argument("--mono-sentences", type=int, default=None, help="Sentences per monolingual corpus.")
gen_parser.add_argument("--heldout", type=int, default=200, help="Lines of the multi-way held-out set.")
gen_parser.add_argument("--coverage", type=float, default=0.6, help="Share of concepts in the synonym dictionary.")
gen_parser.add_argument("--identity-ciphers", action="store_true")
gen_parser.set_defaults(handler=gen_corpus)

train_parser = subparsers.add_parser("train", help="Train a model.")
train_parser.add_argument("--config", type=str, default=None, help="A 'key = value' config file.")
train_parser.add_argument("--mode", type=str, default=None, choices=TrainingModes().names())
train_parser.add_argument("--out", type=str, required=True, help="The run directory.")
train_parser.add_argument("--corpus", type=str, default="", help="The corpus directory (config key corpus_dir).")
train_parser.add_argument("--resume", type=str, default=None, help="A checkpoint to continue from.")
train_parser.add_argument("--set", type=str, action="append", default=[], metavar="KEY=VALUE",
                          help="Overrides a config key, repeatable.")
train_parser.set_defaults(handler=train)

eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint.")
eval_parser.add_argument("--ckpt", type=str, required=True)
eval_parser.add_argument("--suite", type=str, default="all", choices=EvaluationSuites().names())
eval_parser.add_argument("--out", type=str, required=True)
eval_parser.add_argument("--corpus", type=str, default="", help="Defaults to the corpus the model was trained on.")
eval_parser.add_argument("--beam", type=int, default=1)
eval_parser.add_argument("--max-sentences", type=int, default=None)
eval_parser.set_defaults(handler=evaluate)

export_parser = subparsers.add_parser("export-emb", help="Export pooled representations of the multi-way set.")
export_parser.add_argument("--ckpt", type=str, required=True)
export_parser.add_argument("--proj", type=str, default="none", choices=Projections().names())
export_parser.add_argument("--out", type=str, required=True, help="The TSV file.")
export_parser.add_argument("--corpus", type=str, default="")
export_parser.add_argument("--max-sentences", type=int, default=None)
export_parser.set_defaults(handler=export_emb)

preview_parser = subparsers.add_parser("augment-preview", help="Show aligned augmentation of sentences.")
preview_parser.add_argument("--dict", type=str, required=True, help="The synonym dictionary TSV.")
preview_parser.add_argument("--input", type=str, required=True, help="One sentence per line.")
preview_parser.add_argument("--p", type=float, default=0.9, help="The replacement probability.")
preview_parser.add_argument("--seed", type=int, default=0)
preview_parser.add_argument("--lang", type=str, default=None, help="Guessed per line from the dictionary if unset.")
preview_parser.add_argument("--out", type=str, default=None, help="Output TSV, stdout if unset.")
preview_parser.set_defaults(handler=augment_preview)

ablation_parser = subparsers.add_parser("ablation", help="Train and evaluate every training mode.")
ablation_parser.add_argument("--config", type=str, default=None)
ablation_parser.add_argument("--corpus", type=str, required=True)
ablation_parser.add_argument("--out", type=str, required=True)
ablation_parser.add_argument("--modes", type=str, nargs="*", default=[])
ablation_parser.add_argument("--set", type=str, action="append", default=[], metavar="KEY=VALUE")
ablation_parser.add_argument("--beam", type=int, default=1)
ablation_parser.add_argument("--max-sentences", type=int, default=None)
ablation_parser.set_defaults(handler=ablation)

for sub in (gen_parser, train_parser, eval_parser, ablation_parser):
    sub.add_argument("--force", action="store_true", help="Replace an existing non-empty output directory.")
for sub in (gen_parser, train_parser, eval_parser, export_parser, preview_parser, ablation_parser):
    sub.add_argument("--quiet", action="store_true", help="No progress bars or status lines.")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parser.parse_args(sys.argv[1:] if argv is None else list(argv))
    try:
        args.handler(args)
    except ContrastiveNMTError as e:
        sys.stderr.write(f"{type(e).__name__}: {e}\n")
        return e.exit_code
    return 0


if __name__ == '__main__':
    sys.exit(main())
