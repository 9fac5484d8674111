use arnet_core::diagnostics::{discrepancy, DiscrepancyReport, RunTrace};
use arnet_core::lstm::RegularizerConfig;
use arnet_core::metrics::{MetricsReport, ScoredCorpus};
use arnet_core::pmnist::{classify_eval, Classifier, PermutedSet};
use arnet_core::seq2seq::{beam, greedy, CaptionModel, DecoderSession, SearchConfig, Vocabulary};
use serde_json::{json, Value};

use crate::data::CaptionSplit;
use crate::error::CliResult;

#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    /// `None` decodes greedily.
    pub beam_size: Option<usize>,
    pub max_len: usize,
    pub length_normalize: bool,
}

/// Decoded captions as words.
pub fn decode_words(
    model: &CaptionModel,
    split: &CaptionSplit,
    vocab: &Vocabulary,
    opts: DecodeOptions,
) -> CliResult<Vec<Vec<String>>> {
    let search = SearchConfig {
        length_normalize: opts.length_normalize,
        ..SearchConfig::new(opts.beam_size.unwrap_or(1), opts.max_len)
    };
    let reg = RegularizerConfig::none();
    split
        .examples
        .iter()
        .map(|ex| {
            let session = DecoderSession::new(model, &ex.source, &reg)?;
            let h = match opts.beam_size {
                Some(_) => beam(&session, &search)?,
                None => greedy(&session, &search)?,
            };
            Ok(vocab.decode(&h.tokens))
        })
        .collect()
}

pub fn caption_metrics(
    model: &CaptionModel,
    split: &CaptionSplit,
    vocab: &Vocabulary,
    opts: DecodeOptions,
) -> CliResult<(MetricsReport, Vec<Vec<String>>)> {
    let hyps = decode_words(model, split, vocab, opts)?;
    let corpus = ScoredCorpus::single(hyps.clone(), split.references.clone())?;
    Ok((MetricsReport::compute(&corpus)?, hyps))
}

pub fn metrics_json(m: &MetricsReport) -> Value {
    json!({
        "bleu_1": m.bleu_1,
        "bleu_2": m.bleu_2,
        "bleu_3": m.bleu_3,
        "bleu_4": m.bleu_4,
        "rouge_l": m.rouge_l,
        "corpus_size": m.corpus_size,
    })
}

pub fn accuracy_json(model: &Classifier, perm_seed: u64, set: &PermutedSet) -> CliResult<Value> {
    let acc = classify_eval(model, perm_seed, set)?;
    Ok(json!({
        "accuracy": acc,
        "correct": (acc * set.items.len() as f64).round() as usize,
        "total": set.items.len(),
        "permutation_seed": perm_seed,
    }))
}

pub fn discrepancy_report(
    model: &CaptionModel,
    split: &CaptionSplit,
    max_len: usize,
) -> CliResult<(DiscrepancyReport, Vec<RunTrace>)> {
    Ok(discrepancy(model, &split.examples, max_len)?)
}
