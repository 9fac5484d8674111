//! Reading datasets for each task.

use std::path::{Path, PathBuf};

use arnet_core::config::{ExperimentConfig, SourceSpec, TaskKind};
use arnet_core::pmnist::{holdout, idx_paths, load_mnist_prefix, Permutation, PermutedSet, PIXELS};
use arnet_core::seq2seq::corpus::{feature_examples, prefix_paths, token_examples};
use arnet_core::seq2seq::{Example, ParallelCorpus, Source, Vocabulary};

use crate::error::{data, usage, CliResult, Context};

/// On-disk layout found at a data prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// `{prefix}.src` / `{prefix}.tgt`.
    Corpus,
    /// MNIST IDX image and label files.
    Idx,
}

pub fn detect(prefix: &Path) -> CliResult<Format> {
    let (s, t) = prefix_paths(prefix);
    let (i, l) = idx_paths(prefix);
    if s.exists() && t.exists() {
        Ok(Format::Corpus)
    } else if i.exists() && l.exists() {
        Ok(Format::Idx)
    } else {
        Err(data(format!(
            "no data at {}: expected {} + {} or {} + {}",
            prefix.display(),
            s.display(),
            t.display(),
            i.display(),
            l.display()
        )))
    }
}

/// Relative paths resolve against the data root when one is given.
pub fn resolve(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn limit<T>(mut v: Vec<T>, n: usize) -> Vec<T> {
    if n > 0 {
        v.truncate(n);
    }
    v
}

/// Examples plus the untouched reference words used for scoring.
#[derive(Debug, Clone)]
pub struct CaptionSplit {
    pub examples: Vec<Example>,
    pub references: Vec<Vec<String>>,
}

pub struct CaptionData {
    pub src_vocab: Option<Vocabulary>,
    pub tgt_vocab: Vocabulary,
    pub source: SourceSpec,
    pub train: CaptionSplit,
    pub val: Option<CaptionSplit>,
    pub test: Option<CaptionSplit>,
}

fn load_corpus(prefix: &Path, n: usize) -> CliResult<ParallelCorpus> {
    match detect(prefix)? {
        Format::Corpus => {}
        Format::Idx => {
            return Err(data(format!(
                "{} holds IDX images, not a parallel corpus",
                prefix.display()
            )))
        }
    }
    let mut c = ParallelCorpus::load_prefix(prefix).at(prefix.display())?;
    c.sources = limit(c.sources, n);
    c.targets = limit(c.targets, n);
    if c.is_empty() {
        return Err(data(format!("{} is empty", prefix.display())));
    }
    Ok(c)
}

/// One split encoded with existing vocabularies. `src_vocab` is `None` for
/// feature corpora.
pub fn caption_split(
    prefix: &Path,
    src_vocab: Option<&Vocabulary>,
    tgt_vocab: &Vocabulary,
    max_src_len: usize,
    max_len: usize,
    n: usize,
) -> CliResult<CaptionSplit> {
    let corpus = load_corpus(prefix, n)?;
    let examples = match src_vocab {
        Some(sv) => token_examples(&corpus, sv, tgt_vocab, max_src_len, max_len),
        None => feature_examples(&corpus, tgt_vocab, max_len),
    }
    .at(prefix.display())?;
    Ok(CaptionSplit {
        examples,
        references: corpus.targets,
    })
}

pub fn caption_data(cfg: &ExperimentConfig) -> CliResult<CaptionData> {
    let train_prefix = cfg
        .train
        .as_deref()
        .ok_or_else(|| usage("`train` is not set"))?;
    let corpus = load_corpus(train_prefix, cfg.train_limit)?;
    let tgt_vocab = Vocabulary::build(corpus.targets.iter(), cfg.min_count);
    let src_vocab = match cfg.task {
        TaskKind::CaptionFeat => None,
        _ => Some(Vocabulary::build(corpus.sources.iter(), cfg.min_count)),
    };
    let max_len = cfg.training.max_len;
    let train = caption_split(
        train_prefix,
        src_vocab.as_ref(),
        &tgt_vocab,
        cfg.max_src_len,
        max_len,
        cfg.train_limit,
    )?;
    let source = match (&src_vocab, &train.examples[0].source) {
        (Some(sv), _) => SourceSpec::Tokens(sv.len()),
        (None, Source::Features(f)) => SourceSpec::Features(f.g.len()),
        (None, Source::Tokens(_)) => unreachable!("feature corpus produced token sources"),
    };
    let split = |p: &Option<PathBuf>, n: usize| -> CliResult<Option<CaptionSplit>> {
        p.as_deref()
            .map(|p| caption_split(p, src_vocab.as_ref(), &tgt_vocab, cfg.max_src_len, max_len, n))
            .transpose()
    };
    let val = split(&cfg.val, 0)?;
    let test = split(&cfg.test, cfg.test_limit)?;
    Ok(CaptionData {
        src_vocab,
        tgt_vocab,
        source,
        train,
        val,
        test,
    })
}

pub struct PmnistData {
    pub train: PermutedSet,
    pub val: PermutedSet,
    pub test: Option<PermutedSet>,
}

pub fn pmnist_split(prefix: &Path, perm: &Permutation, n: usize) -> CliResult<PermutedSet> {
    if detect(prefix)? != Format::Idx {
        return Err(data(format!("{} is a text corpus, not IDX images", prefix.display())));
    }
    let items = limit(load_mnist_prefix(prefix).at(prefix.display())?, n);
    if items.is_empty() {
        return Err(data(format!("{} is empty", prefix.display())));
    }
    Ok(PermutedSet::new(&items, perm)?)
}

/// Training images minus a held-out validation tail (or the `val` split when
/// one is configured), plus the optional test split.
pub fn pmnist_data(cfg: &ExperimentConfig) -> CliResult<PmnistData> {
    let perm = Permutation::from_seed(cfg.permutation_seed, PIXELS);
    let train_prefix = cfg
        .train
        .as_deref()
        .ok_or_else(|| usage("`train` is not set"))?;
    let all = pmnist_split(train_prefix, &perm, cfg.train_limit)?;
    let (train, val) = match &cfg.val {
        Some(v) => (all, pmnist_split(v, &perm, 0)?),
        None => {
            let (t, v) = holdout(&all.items, cfg.val_size);
            let wrap = |items| PermutedSet {
                perm_seed: all.perm_seed,
                items,
            };
            (wrap(t), wrap(v))
        }
    };
    let test = cfg
        .test
        .as_deref()
        .map(|p| pmnist_split(p, &perm, cfg.test_limit))
        .transpose()?;
    Ok(PmnistData { train, val, test })
}
