//! Hidden-state gap between teacher-forced and free-running decoding.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::RegularizerConfig;
use crate::seq2seq::corpus::Example;
use crate::seq2seq::decode::{greedy_trace, StopReason};
use crate::seq2seq::model::{decode_teacher_forced, CaptionModel, DecoderSession, PassOptions};
use crate::tensor::{dot, RngStream, Vector};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceMode {
    Training,
    Inference,
}

impl TraceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceMode::Training => "training",
            TraceMode::Inference => "inference",
        }
    }
}

/// Final decoder state for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub mode: TraceMode,
    pub id: usize,
    pub hidden: Vector,
    pub stop: StopReason,
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `1 − h1·h2 / (‖h1‖ ‖h2‖)`.
pub fn cosine_distance(h1: &[f64], h2: &[f64]) -> Result<f64> {
    if h1.len() != h2.len() {
        return Err(Error::shape("cosine_distance", h1.len(), h2.len()));
    }
    let (n1, n2) = (norm(h1), norm(h2));
    if n1 < ZERO_NORM || n2 < ZERO_NORM {
        return Err(Error::ZeroNorm);
    }
    if h1 == h2 {
        return Ok(0.0);
    }
    let c = (dot(h1, h2) / (n1 * n2)).clamp(-1.0, 1.0);
    Ok(1.0 - c)
}

fn centroid(vs: &[&[f64]]) -> Vector {
    let mut c = Vector::zeros(vs[0].len());
    for v in vs {
        for (a, b) in c.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    let n = vs.len() as f64;
    c.iter_mut().for_each(|a| *a /= n);
    c
}

/// Cosine distance between the two centroids.
pub fn mean_centroid_distance(u: &[&[f64]], v: &[&[f64]]) -> Result<f64> {
    if u.is_empty() || v.is_empty() {
        return Err(Error::invalid("empty trace set"));
    }
    if u.len() != v.len() {
        return Err(Error::invalid(format!("trace sets differ in size: {} vs {}", u.len(), v.len())));
    }
    cosine_distance(&centroid(u), &centroid(v))
}

/// Mean cosine distance over pairs with the same input id.
pub fn pointwise_distance(u: &[RunTrace], v: &[RunTrace]) -> Result<f64> {
    if u.is_empty() {
        return Err(Error::invalid("empty trace set"));
    }
    if u.len() != v.len() {
        return Err(Error::invalid(format!("trace sets differ in size: {} vs {}", u.len(), v.len())));
    }
    let mut sum = 0.0;
    for (a, b) in u.iter().zip(v) {
        if a.id != b.id {
            return Err(Error::invalid(format!("trace ids misaligned: {} vs {}", a.id, b.id)));
        }
        sum += cosine_distance(&a.hidden, &b.hidden)?;
    }
    Ok(sum / u.len() as f64)
}

/// Final hidden state per example: the state that predicts the last gold
/// token under teacher forcing, or the state that emitted EOS (or hit the
/// length limit) under greedy decoding.
pub fn collect_traces(model: &CaptionModel, examples: &[Example], mode: TraceMode, max_len: usize) -> Result<Vec<RunTrace>> {
    let opts = PassOptions::default();
    let mut rng = RngStream::new(0);
    examples
        .iter()
        .enumerate()
        .map(|(id, ex)| match mode {
            TraceMode::Training => {
                let t = decode_teacher_forced(model, &ex.source, &ex.caption, &opts, &mut rng)?;
                let hidden = t
                    .hiddens
                    .last()
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("example {id} has no gold tokens to predict")))?;
                let stop = if ex.caption.ends_with_eos() {
                    StopReason::Eos
                } else {
                    StopReason::MaxLen
                };
                Ok(RunTrace { mode, id, hidden, stop })
            }
            TraceMode::Inference => {
                let session = DecoderSession::new(model, &ex.source, &RegularizerConfig::none())?;
                let (_, hiddens, stop) = greedy_trace(&session, max_len)?;
                let hidden = hiddens
                    .last()
                    .cloned()
                    .ok_or_else(|| Error::invalid("greedy decoding produced no states"))?;
                Ok(RunTrace { mode, id, hidden, stop })
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub d_mc: f64,
    pub d_pw: f64,
    pub pairs: usize,
    /// Stop reasons per mode, e.g. `{"inference": {"eos": 97, "max_len": 3}}`.
    pub stop_counts: BTreeMap<String, BTreeMap<String, usize>>,
}

fn stop_name(s: StopReason) -> &'static str {
    match s {
        StopReason::Eos => "eos",
        StopReason::MaxLen => "max_len",
    }
}

impl DiscrepancyReport {
    pub fn compute(training: &[RunTrace], inference: &[RunTrace]) -> Result<Self> {
        let u: Vec<&[f64]> = training.iter().map(|t| &t.hidden[..]).collect();
        let v: Vec<&[f64]> = inference.iter().map(|t| &t.hidden[..]).collect();
        let mut stop_counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for t in training.iter().chain(inference) {
            *stop_counts
                .entry(t.mode.as_str().to_string())
                .or_default()
                .entry(stop_name(t.stop).to_string())
                .or_default() += 1;
        }
        Ok(DiscrepancyReport {
            d_mc: mean_centroid_distance(&u, &v)?,
            d_pw: pointwise_distance(training, inference)?,
            pairs: training.len(),
            stop_counts,
        })
    }
}

/// Model-level convenience: collect both trace sets and compare them.
pub fn discrepancy(model: &CaptionModel, examples: &[Example], max_len: usize) -> Result<(DiscrepancyReport, Vec<RunTrace>)> {
    let u = collect_traces(model, examples, TraceMode::Training, max_len)?;
    let v = collect_traces(model, examples, TraceMode::Inference, max_len)?;
    let report = DiscrepancyReport::compute(&u, &v)?;
    let mut all = u;
    all.extend(v);
    Ok((report, all))
}

/// Tab-separated rows `id, mode, h_0 .. h_{H-1}` with a header; values
/// carry 17 significant digits so they parse back exactly.
pub fn embeddings_tsv(traces: &[RunTrace]) -> Result<String> {
    let first = traces.first().ok_or_else(|| Error::invalid("no traces to export"))?;
    let h = first.hidden.len();
    let mut out = String::from("id\tmode");
    for j in 0..h {
        write!(out, "\th{j}").unwrap();
    }
    out.push('\n');
    for t in traces {
        if t.hidden.len() != h {
            return Err(Error::shape("export_embeddings", h, t.hidden.len()));
        }
        write!(out, "{}\t{}", t.id, t.mode.as_str()).unwrap();
        for v in t.hidden.iter() {
            write!(out, "\t{v:.16e}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(traces: &[RunTrace], path: &Path) -> Result<()> {
    let tsv = embeddings_tsv(traces)?;
    fs::write(path, tsv).map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

/// Parse an exported file back into `(id, mode, hidden)` rows.
pub fn parse_embeddings(text: &str) -> Result<Vec<(usize, TraceMode, Vector)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty embedding file".into()))?;
    let cols = header.split('\t').count();
    if cols < 3 || !header.starts_with("id\tmode\t") {
        return Err(Error::Data("bad embedding header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != cols {
                return Err(Error::Data(format!("row {} has {} columns, expected {cols}", i + 1, f.len())));
            }
            let id = f[0].parse().map_err(|_| Error::Data(format!("row {}: bad id", i + 1)))?;
            let mode = match f[1] {
                "training" => TraceMode::Training,
                "inference" => TraceMode::Inference,
                m => return Err(Error::Data(format!("row {}: unknown mode {m:?}", i + 1))),
            };
            let h = f[2..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| Error::Data(format!("row {}: bad value {v:?}", i + 1))))
                .collect::<Result<Vec<f64>>>()?;
            Ok((id, mode, h.into()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::corpus::{Caption, Source};
    use crate::seq2seq::model::{InitMode, ModelConfig, SourceKind};
    use crate::seq2seq::vocab::{BOS, EOS};
    use proptest::prelude::*;

    fn tr(id: usize, h: Vec<f64>) -> RunTrace {
        RunTrace {
            mode: TraceMode::Training,
            id,
            hidden: h.into(),
            stop: StopReason::Eos,
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((cosine_distance(&[0.3, -2.0], &[-0.3, 2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(cosine_distance(&[0.3, -2.0], &[0.3, -2.0]).unwrap().abs() < 1e-12);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
        assert!(cosine_distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn centroid_and_pointwise() {
        let u = [tr(0, vec![1.0, 0.0]), tr(1, vec![0.0, 1.0])];
        let v = [tr(0, vec![2.0, 0.0]), tr(1, vec![0.0, 5.0])];
        assert!(pointwise_distance(&u, &v).unwrap().abs() < 1e-12);
        let uh: Vec<&[f64]> = u.iter().map(|t| &t.hidden[..]).collect();
        let vh: Vec<&[f64]> = v.iter().map(|t| &t.hidden[..]).collect();
        // per-vector rescaling moves the centroid
        assert!(mean_centroid_distance(&uh, &vh).unwrap() > 1e-3);
        assert_eq!(mean_centroid_distance(&uh[..1], &vh[..1]).unwrap(), cosine_distance(&uh[0], &vh[0]).unwrap());
        let swapped = [v[1].clone(), v[0].clone()];
        assert!(pointwise_distance(&u, &swapped).is_err());
        assert!(pointwise_distance(&[], &[]).is_err());
        assert!(mean_centroid_distance(&[], &[]).is_err());
        let cancel = [tr(0, vec![1.0, 0.0]), tr(1, vec![-1.0, 0.0])];
        let ch: Vec<&[f64]> = cancel.iter().map(|t| &t.hidden[..]).collect();
        assert!(matches!(mean_centroid_distance(&ch, &uh), Err(Error::ZeroNorm)));
    }

    proptest! {
        #[test]
        fn distance_bounds_and_invariance(
            a in prop::collection::vec(-3.0f64..3.0, 4),
            b in prop::collection::vec(-3.0f64..3.0, 4),
            s in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let d = cosine_distance(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&d));
            prop_assert!((d - cosine_distance(&b, &a).unwrap()).abs() < 1e-12);
            let sb: Vec<f64> = b.iter().map(|v| v * s).collect();
            prop_assert!((d - cosine_distance(&a, &sb).unwrap()).abs() < 1e-12);
            let na: Vec<f64> = a.iter().map(|v| -v).collect();
            prop_assert!((cosine_distance(&a, &na).unwrap() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tsv_round_trip() {
        let traces = vec![
            tr(3, vec![0.1, -1.0 / 3.0, 1e-300]),
            RunTrace {
                mode: TraceMode::Inference,
                id: 3,
                hidden: vec![std::f64::consts::PI, 2.0, -0.0].into(),
                stop: StopReason::MaxLen,
            },
        ];
        let text = embeddings_tsv(&traces).unwrap();
        assert!(text.starts_with("id\tmode\th0\th1\th2\n"));
        let rows = parse_embeddings(&text).unwrap();
        assert_eq!(rows.len(), 2);
        for (t, (id, mode, h)) in traces.iter().zip(&rows) {
            assert_eq!((t.id, t.mode), (*id, *mode));
            for (a, b) in t.hidden.iter().zip(h.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert!(embeddings_tsv(&[]).is_err());
    }

    fn model(seed: u64) -> CaptionModel {
        let cfg = ModelConfig {
            source: SourceKind::Tokens {
                vocab_size: 8,
                emb_dim: 4,
                hidden_dim: 6,
            },
            vocab_size: 7,
            emb_dim: 4,
            hidden_dim: 6,
            attention: true,
            attn_dim: 0,
            init_mode: InitMode::StateInit,
            arnet_dim: 0,
            init_bound: 0.5,
            forget_bias: 1.0,
        };
        CaptionModel::init(cfg, &mut RngStream::new(seed)).unwrap()
    }

    fn fixture(n: usize) -> Vec<Example> {
        let mut rng = RngStream::new(17);
        (0..n)
            .map(|_| {
                let src: Vec<u32> = (0..4).map(|_| 4 + rng.below(4) as u32).collect();
                let mut cap = vec![BOS];
                cap.extend((0..3).map(|_| 3 + rng.below(4) as u32));
                cap.push(EOS);
                Example {
                    source: Source::Tokens(src),
                    caption: Caption::new(cap, 12).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn traces_are_deterministic_and_differ_by_mode() {
        let m = model(2);
        let data = fixture(20);
        let (r1, t1) = discrepancy(&m, &data, 12).unwrap();
        let (r2, t2) = discrepancy(&m, &data, 12).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(r1, r2);
        assert!(r1.d_pw > 0.0);
        assert_eq!(t1.len(), 40);
        let inf: usize = r1.stop_counts["inference"].values().sum();
        assert_eq!(inf, 20);
        assert_eq!(r1.stop_counts["training"]["eos"], 20);

        let u = collect_traces(&m, &data, TraceMode::Training, 12).unwrap();
        let same = DiscrepancyReport::compute(&u, &u).unwrap();
        assert_eq!(same.d_pw, 0.0);
        assert_eq!(same.d_mc, 0.0);
    }
}
