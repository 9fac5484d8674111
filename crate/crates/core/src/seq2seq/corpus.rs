//! Parallel corpora, captions and training examples.

use std::fs;
use std::path::{Path, PathBuf};

use super::features::load_features;
use super::vocab::{Vocabulary, BOS, EOS, PAD};
use crate::attention::EncodedSource;
use crate::error::{Error, Result};

/// Token ids `y_1..y_N` with `y_1 = BOS`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Caption(Vec<u32>);

impl Caption {
    pub fn new(tokens: Vec<u32>, max_len: usize) -> Result<Self> {
        if tokens.first() != Some(&BOS) {
            return Err(Error::invalid("caption must start with BOS"));
        }
        if tokens.len() > max_len {
            return Err(Error::invalid(format!(
                "caption length {} exceeds max_len {max_len}",
                tokens.len()
            )));
        }
        let eos = tokens.iter().filter(|&&t| t == EOS).count();
        if eos > 1 || (eos == 1 && tokens.last() != Some(&EOS)) {
            return Err(Error::invalid(
                "EOS must appear at most once and only at the end",
            ));
        }
        if tokens[1..].contains(&BOS) {
            return Err(Error::invalid("BOS may only open the caption"));
        }
        Ok(Caption(tokens))
    }

    /// `BOS w_1 .. w_k EOS`, truncating words so the caption fits `max_len`.
    pub fn from_words(ids: &[u32], max_len: usize) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::invalid("max_len must allow at least BOS and EOS"));
        }
        let keep = ids.len().min(max_len - 2);
        let mut t = Vec::with_capacity(keep + 2);
        t.push(BOS);
        t.extend(ids[..keep].iter().copied().filter(|&i| i != PAD));
        t.push(EOS);
        Caption::new(t, max_len)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.0.last() == Some(&EOS)
    }

    /// Content tokens without BOS/EOS.
    pub fn words(&self) -> &[u32] {
        let end = if self.ends_with_eos() {
            self.0.len() - 1
        } else {
            self.0.len()
        };
        &self.0[1..end]
    }
}

/// Two aligned whitespace-tokenized text files.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub sources: Vec<Vec<String>>,
    pub targets: Vec<Vec<String>>,
    /// Directory the source file lives in; feature paths resolve against it.
    pub source_dir: PathBuf,
}

fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(String::from).collect()
}

impl ParallelCorpus {
    pub fn load(source: &Path, target: &Path) -> Result<Self> {
        let src = fs::read_to_string(source)
            .map_err(|e| Error::Data(format!("reading {}: {e}", source.display())))?;
        let tgt = fs::read_to_string(target)
            .map_err(|e| Error::Data(format!("reading {}: {e}", target.display())))?;
        let sources: Vec<Vec<String>> = src.lines().map(tokenize).collect();
        let targets: Vec<Vec<String>> = tgt.lines().map(tokenize).collect();
        if sources.len() != targets.len() {
            return Err(Error::Data(format!(
                "{} has {} lines but {} has {}",
                source.display(),
                sources.len(),
                target.display(),
                targets.len()
            )));
        }
        Ok(ParallelCorpus {
            sources,
            targets,
            source_dir: source.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    /// Load `{prefix}.src` / `{prefix}.tgt`.
    pub fn load_prefix(prefix: &Path) -> Result<Self> {
        let (s, t) = prefix_paths(prefix);
        Self::load(&s, &t)
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

pub fn prefix_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".src");
    let mut t = prefix.as_os_str().to_owned();
    t.push(".tgt");
    (PathBuf::from(s), PathBuf::from(t))
}

/// What the encoder consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Tokens(Vec<u32>),
    Features(EncodedSource),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub source: Source,
    pub caption: Caption,
}

/// Turn a token corpus into examples. Sources are truncated to
/// `max_src_len`; captions to `max_len` including BOS and EOS.
pub fn token_examples(
    corpus: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_src_len: usize,
    max_len: usize,
) -> Result<Vec<Example>> {
    corpus
        .sources
        .iter()
        .zip(&corpus.targets)
        .enumerate()
        .map(|(i, (s, t))| {
            let mut ids = src_vocab.encode(s);
            ids.truncate(max_src_len);
            if ids.is_empty() {
                return Err(Error::Data(format!(
                    "line {}: empty source sequence",
                    i + 1
                )));
            }
            Ok(Example {
                source: Source::Tokens(ids),
                caption: Caption::from_words(&tgt_vocab.encode(t), max_len)?,
            })
        })
        .collect()
}

/// Build source and target vocabularies from `corpus`, then its examples.
pub fn token_task(
    corpus: &ParallelCorpus,
    min_count: usize,
    max_src_len: usize,
    max_len: usize,
) -> Result<(Vocabulary, Vocabulary, Vec<Example>)> {
    let sv = Vocabulary::build(corpus.sources.iter(), min_count);
    let tv = Vocabulary::build(corpus.targets.iter(), min_count);
    let ex = token_examples(corpus, &sv, &tv, max_src_len, max_len)?;
    Ok((sv, tv, ex))
}

/// Feature corpus: each source line names one feature file, relative to the
/// source file's directory.
pub fn feature_examples(
    corpus: &ParallelCorpus,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Example>> {
    corpus
        .sources
        .iter()
        .zip(&corpus.targets)
        .enumerate()
        .map(|(i, (s, t))| {
            let name = s
                .first()
                .ok_or_else(|| Error::Data(format!("line {}: missing feature path", i + 1)))?;
            let path = corpus.source_dir.join(name);
            Ok(Example {
                source: Source::Features(load_features(&path)?),
                caption: Caption::from_words(&tgt_vocab.encode(t), max_len)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::vocab::UNK;

    #[test]
    fn caption_invariants() {
        assert!(Caption::new(vec![BOS, 5, EOS], 3).is_ok());
        assert!(Caption::new(vec![5, EOS], 3).is_err());
        assert!(Caption::new(vec![BOS, EOS, 5], 5).is_err());
        assert!(Caption::new(vec![BOS, EOS, EOS], 5).is_err());
        assert!(Caption::new(vec![BOS, 4, 4, 4], 3).is_err());
        assert!(Caption::new(vec![BOS, 4, 4], 3).is_ok());
    }

    #[test]
    fn from_words_truncates() {
        let c = Caption::from_words(&[4, 5, 6, 7], 4).unwrap();
        assert_eq!(c.tokens(), &[BOS, 4, 5, EOS]);
        assert_eq!(c.words(), &[4, 5]);
    }

    #[test]
    fn corpus_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("toy");
        let (s, t) = prefix_paths(&prefix);
        std::fs::write(&s, "a b c\nb c\n").unwrap();
        std::fs::write(&t, "x y\ny\n").unwrap();
        let corpus = ParallelCorpus::load_prefix(&prefix).unwrap();
        assert_eq!(corpus.len(), 2);
        let sv = Vocabulary::build(corpus.sources.iter(), 1);
        let tv = Vocabulary::build(corpus.targets.iter(), 2);
        let ex = token_examples(&corpus, &sv, &tv, 2, 10).unwrap();
        assert_eq!(ex[0].caption.tokens(), &[BOS, UNK, 4, EOS]);
        match &ex[0].source {
            Source::Tokens(ids) => assert_eq!(ids.len(), 2),
            _ => unreachable!(),
        }
        std::fs::write(&t, "x y\n").unwrap();
        assert!(ParallelCorpus::load_prefix(&prefix).is_err());
    }
}
