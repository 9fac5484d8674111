//! Synthetic parallel corpora: a copy task and a program-summary task.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq2seq::corpus::{prefix_paths, ParallelCorpus};
use crate::tensor::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenKind {
    /// Random token strings; the target repeats the source.
    Copy,
    /// Short programs; the target names their first, last and most frequent
    /// tokens.
    SyntheticCaption,
}

impl GenKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GenKind::Copy => "copy",
            GenKind::SyntheticCaption => "synthetic-caption",
        }
    }
}

impl fmt::Display for GenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GenKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(GenKind::Copy),
            "synthetic-caption" => Ok(GenKind::SyntheticCaption),
            _ => Err(Error::invalid(format!("unknown corpus kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenSpec {
    pub kind: GenKind,
    pub size: usize,
    /// Copy: number of distinct tokens. Synthetic-caption: number of
    /// variable names.
    pub vocab: usize,
    /// Longest source in tokens.
    pub max_len: usize,
    pub seed: u64,
}

impl GenSpec {
    pub fn copy(size: usize, seed: u64) -> Self {
        GenSpec {
            kind: GenKind::Copy,
            size,
            vocab: 20,
            max_len: 10,
            seed,
        }
    }

    pub fn synthetic_caption(size: usize, seed: u64) -> Self {
        GenSpec {
            kind: GenKind::SyntheticCaption,
            size,
            vocab: 8,
            max_len: 24,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::invalid("size must be at least 1"));
        }
        if self.vocab == 0 {
            return Err(Error::invalid("vocab must be at least 1"));
        }
        if self.kind == GenKind::SyntheticCaption && self.vocab > VAR_NAMES.len() {
            return Err(Error::invalid(format!(
                "synthetic-caption supports at most {} variable names",
                VAR_NAMES.len()
            )));
        }
        let min_len = match self.kind {
            GenKind::Copy => 1,
            GenKind::SyntheticCaption => LONGEST_STATEMENT,
        };
        if self.max_len < min_len {
            return Err(Error::invalid(format!("max_len must be at least {min_len}")));
        }
        Ok(())
    }
}

const VAR_NAMES: [&str; 16] = [
    "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "m", "n", "p", "q", "r",
];
const OPS: [&str; 4] = ["+", "-", "*", "<"];
const LONGEST_STATEMENT: usize = 8;

fn statement(rng: &mut RngStream, vars: &[&'static str]) -> Vec<&'static str> {
    let mut v = || vars[rng.below(vars.len())];
    let a = v();
    let b = v();
    let c = v();
    let op = OPS[rng.below(OPS.len())];
    match rng.below(5) {
        0 => vec!["let", a, "=", b, op, c, ";"],
        1 => vec!["if", a, op, b, "{", "call", c, "}"],
        2 => vec!["for", a, "in", b, "{", "call", c, "}"],
        3 => vec!["call", a, "(", b, ")", ";"],
        _ => vec!["return", a, ";"],
    }
}

/// The summary of a source: its first, last and most frequent token. Ties on
/// frequency go to the token seen first.
pub fn summarize(source: &[String]) -> Vec<String> {
    let (Some(first), Some(last)) = (source.first(), source.last()) else {
        return Vec::new();
    };
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (i, t) in source.iter().enumerate() {
        counts.entry(t.as_str()).or_insert((0, i)).0 += 1;
    }
    let most = counts
        .iter()
        .max_by(|x, y| x.1 .0.cmp(&y.1 .0).then(y.1 .1.cmp(&x.1 .1)))
        .map(|(t, _)| *t)
        .unwrap();
    ["first", first, "last", last, "most", most]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Generate a corpus; the same spec always yields the same corpus.
pub fn generate(spec: &GenSpec) -> Result<ParallelCorpus> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed);
    let mut sources = Vec::with_capacity(spec.size);
    let mut targets = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        match spec.kind {
            GenKind::Copy => {
                let len = 1 + rng.below(spec.max_len);
                let s: Vec<String> = (0..len).map(|_| format!("w{}", rng.below(spec.vocab))).collect();
                targets.push(s.clone());
                sources.push(s);
            }
            GenKind::SyntheticCaption => {
                let vars = &VAR_NAMES[..spec.vocab];
                let mut s: Vec<String> = Vec::new();
                loop {
                    let st = statement(&mut rng, vars);
                    if s.len() + st.len() > spec.max_len {
                        break;
                    }
                    s.extend(st.iter().map(|t| t.to_string()));
                    if rng.below(3) == 0 {
                        break;
                    }
                }
                if s.is_empty() {
                    s.extend(["return", vars[0], ";"].map(String::from));
                }
                targets.push(summarize(&s));
                sources.push(s);
            }
        }
    }
    Ok(ParallelCorpus {
        sources,
        targets,
        source_dir: PathBuf::new(),
    })
}

/// Write `{prefix}.src` and `{prefix}.tgt`, one space-joined line each.
pub fn write_corpus(corpus: &ParallelCorpus, prefix: &Path) -> Result<()> {
    let (s, t) = prefix_paths(prefix);
    if let Some(dir) = s.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let join = |lines: &[Vec<String>]| -> String {
        lines.iter().map(|l| l.join(" ") + "\n").collect()
    };
    fs::write(s, join(&corpus.sources))?;
    fs::write(t, join(&corpus.targets))?;
    Ok(())
}
