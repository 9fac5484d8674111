//! Free-running inference: greedy and beam search over any step model.

use super::corpus::Caption;
use super::model::DecoderSession;
use super::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::lstm::LstmState;
use crate::tensor::{argmax, log_softmax, Vector};

/// Autoregressive next-token model.
pub trait StepModel {
    type State: Clone;

    fn start(&self) -> Self::State;

    /// Feed `token`; returns the next state and log-probabilities over the
    /// vocabulary.
    fn step(&self, state: &Self::State, token: u32) -> Result<(Self::State, Vec<f64>)>;
}

impl StepModel for DecoderSession<'_> {
    type State = LstmState;

    fn start(&self) -> LstmState {
        self.initial_state()
    }

    /// PAD and BOS are never valid outputs, so they are masked out before
    /// normalizing.
    fn step(&self, state: &LstmState, token: u32) -> Result<(LstmState, Vec<f64>)> {
        let (next, mut logits) = self.advance(state, token)?;
        for t in [PAD, BOS] {
            if let Some(l) = logits.get_mut(t as usize) {
                *l = f64::NEG_INFINITY;
            }
        }
        Ok((next, log_softmax(&logits).into_inner()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub beam_size: usize,
    /// Maximum caption length including BOS.
    pub max_len: usize,
    pub bos: u32,
    pub eos: u32,
    /// Rank completed hypotheses by log-probability per generated token.
    pub length_normalize: bool,
}

impl SearchConfig {
    pub fn new(beam_size: usize, max_len: usize) -> Self {
        SearchConfig {
            beam_size,
            max_len,
            bos: BOS,
            eos: EOS,
            length_normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.log_prob / self.generated().max(1) as f64
        } else {
            self.log_prob
        }
    }
}

/// Why a free-running decode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLen,
}

/// Greedy decode that also reports each state visited after a fed token.
pub fn greedy_states<M: StepModel>(
    model: &M,
    cfg: &SearchConfig,
) -> Result<(Hypothesis, Vec<M::State>, StopReason)> {
    if cfg.max_len < 2 {
        return Err(Error::invalid(
            "max_len must allow at least one generated token",
        ));
    }
    let mut tokens = vec![cfg.bos];
    let mut state = model.start();
    let mut log_prob = 0.0;
    let mut states = Vec::new();
    while tokens.len() < cfg.max_len {
        let (next, lp) = model.step(&state, *tokens.last().unwrap())?;
        let tok = argmax(&lp);
        log_prob += lp[tok];
        tokens.push(tok as u32);
        states.push(next.clone());
        state = next;
        if tok as u32 == cfg.eos {
            return Ok((
                Hypothesis {
                    tokens,
                    log_prob,
                    finished: true,
                },
                states,
                StopReason::Eos,
            ));
        }
    }
    Ok((
        Hypothesis {
            tokens,
            log_prob,
            finished: false,
        },
        states,
        StopReason::MaxLen,
    ))
}

pub fn greedy<M: StepModel>(model: &M, cfg: &SearchConfig) -> Result<Hypothesis> {
    Ok(greedy_states(model, cfg)?.0)
}

/// Length-wise beam search. Each round expands every live hypothesis by every
/// token and keeps the `beam_size` best extensions by total log-probability;
/// extensions ending in EOS, or reaching `max_len`, retire to the completed
/// pool. The greedy hypothesis is always part of the pool, so the result never
/// scores below it.
pub fn beam<M: StepModel>(model: &M, cfg: &SearchConfig) -> Result<Hypothesis> {
    if cfg.beam_size == 0 {
        return Err(Error::invalid("beam_size must be at least 1"));
    }
    let greedy_hyp = greedy(model, cfg)?;
    let mut completed: Vec<Hypothesis> = Vec::new();
    let mut live: Vec<(Hypothesis, M::State)> = vec![(
        Hypothesis {
            tokens: vec![cfg.bos],
            log_prob: 0.0,
            finished: false,
        },
        model.start(),
    )];
    while !live.is_empty() {
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (i, (h, st)) in live.iter().enumerate() {
            let (next, lp) = model.step(st, *h.tokens.last().unwrap())?;
            candidates.extend(
                lp.iter()
                    .enumerate()
                    .map(|(t, &l)| (h.log_prob + l, i, t as u32)),
            );
            next_states.push(next);
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(cfg.beam_size);
        let mut new_live = Vec::with_capacity(candidates.len());
        for (score, i, tok) in candidates {
            let mut tokens = live[i].0.tokens.clone();
            tokens.push(tok);
            let finished = tok == cfg.eos;
            let hyp = Hypothesis {
                tokens,
                log_prob: score,
                finished,
            };
            if finished || hyp.tokens.len() >= cfg.max_len {
                completed.push(hyp);
            } else {
                new_live.push((hyp, next_states[i].clone()));
            }
        }
        live = new_live;
    }
    completed.push(greedy_hyp);
    let mut best = 0;
    for (i, h) in completed.iter().enumerate() {
        if h.score(cfg.length_normalize) > completed[best].score(cfg.length_normalize) {
            best = i;
        }
    }
    Ok(completed.swap_remove(best))
}

/// Greedy caption for a bound decoder.
pub fn greedy_decode(session: &DecoderSession<'_>, max_len: usize) -> Result<Caption> {
    let h = greedy(session, &SearchConfig::new(1, max_len))?;
    Caption::new(h.tokens, max_len)
}

pub fn beam_search(
    session: &DecoderSession<'_>,
    beam_size: usize,
    max_len: usize,
) -> Result<Caption> {
    let h = beam(session, &SearchConfig::new(beam_size, max_len))?;
    Caption::new(h.tokens, max_len)
}

/// Greedy caption plus the decoder hidden state after each generated token.
pub fn greedy_trace(
    session: &DecoderSession<'_>,
    max_len: usize,
) -> Result<(Caption, Vec<Vector>, StopReason)> {
    let (h, states, stop) = greedy_states(session, &SearchConfig::new(1, max_len))?;
    let hiddens = states.into_iter().map(|s| s.h).collect();
    Ok((Caption::new(h.tokens, max_len)?, hiddens, stop))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;
    use proptest::prelude::*;

    /// Log-probabilities drawn from a fixed table keyed by the prefix.
    struct Table {
        vocab: usize,
        seed: u64,
        sharp: f64,
    }

    impl StepModel for Table {
        type State = Vec<u32>;

        fn start(&self) -> Vec<u32> {
            Vec::new()
        }

        fn step(&self, state: &Vec<u32>, token: u32) -> Result<(Vec<u32>, Vec<f64>)> {
            let mut prefix = state.clone();
            prefix.push(token);
            let mut h = self.seed;
            for &t in &prefix {
                h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(t as u64 + 1);
            }
            let mut rng = RngStream::new(h);
            let logits: Vec<f64> = (0..self.vocab)
                .map(|_| self.sharp * rng.uniform_range(-1.0, 1.0))
                .collect();
            Ok((prefix, log_softmax(&logits).into_inner()))
        }
    }

    /// Explicit per-step tables for a three-step search without EOS.
    struct Crafted;

    impl StepModel for Crafted {
        type State = Vec<u32>;

        fn start(&self) -> Vec<u32> {
            Vec::new()
        }

        fn step(&self, state: &Vec<u32>, token: u32) -> Result<(Vec<u32>, Vec<f64>)> {
            let mut prefix = state.clone();
            prefix.push(token);
            let p: [f64; 3] = match &prefix[1..] {
                [] => [0.5, 0.4, 0.1],
                [0] => [0.35, 0.35, 0.3],
                [1] => [0.9, 0.05, 0.05],
                [_] => [1.0 / 3.0; 3],
                [0, _] => [0.4, 0.3, 0.3],
                [1, _] => [0.9, 0.05, 0.05],
                _ => [1.0 / 3.0; 3],
            };
            Ok((prefix, p.iter().map(|v| v.ln()).collect()))
        }
    }

    /// Every continuation of length up to `max_len`, ending at EOS or the cap.
    fn exhaustive<M: StepModel>(m: &M, cfg: &SearchConfig) -> Hypothesis {
        fn go<M: StepModel>(
            m: &M,
            cfg: &SearchConfig,
            h: Hypothesis,
            st: M::State,
            out: &mut Vec<Hypothesis>,
        ) {
            let (next, lp) = m.step(&st, *h.tokens.last().unwrap()).unwrap();
            for (t, l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(t as u32);
                let finished = t as u32 == cfg.eos;
                let child = Hypothesis {
                    tokens,
                    log_prob: h.log_prob + l,
                    finished,
                };
                if finished || child.tokens.len() >= cfg.max_len {
                    out.push(child);
                } else {
                    go(m, cfg, child, next.clone(), out);
                }
            }
        }
        let mut all = Vec::new();
        let root = Hypothesis {
            tokens: vec![cfg.bos],
            log_prob: 0.0,
            finished: false,
        };
        go(m, cfg, root, m.start(), &mut all);
        all.into_iter()
            .reduce(|a, b| {
                if b.score(cfg.length_normalize) > a.score(cfg.length_normalize) {
                    b
                } else {
                    a
                }
            })
            .unwrap()
    }

    #[test]
    fn beam_two_beats_greedy_on_crafted_table() {
        let cfg = SearchConfig {
            beam_size: 2,
            max_len: 4,
            bos: 0,
            eos: u32::MAX,
            length_normalize: true,
        };
        let g = greedy(
            &Crafted,
            &SearchConfig {
                beam_size: 1,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(g.tokens, vec![0, 0, 0, 0]);
        let b = beam(&Crafted, &cfg).unwrap();
        let best = exhaustive(&Crafted, &cfg);
        assert_eq!(b.tokens, vec![0, 1, 0, 0]);
        assert_eq!(b.tokens, best.tokens);
        assert!(b.log_prob > g.log_prob);
        assert!((best.log_prob - (0.4f64 * 0.9 * 0.9).ln()).abs() < 1e-12);
    }

    #[test]
    fn wide_beam_is_exhaustive() {
        for seed in 0..20 {
            let m = Table {
                vocab: 3,
                seed,
                sharp: 2.0,
            };
            let cfg = SearchConfig {
                beam_size: 27,
                max_len: 4,
                bos: 1,
                eos: 2,
                length_normalize: true,
            };
            let b = beam(&m, &cfg).unwrap();
            let e = exhaustive(&m, &cfg);
            assert_eq!(b.tokens, e.tokens, "seed {seed}");
        }
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..50 {
            let m = Table {
                vocab: 6,
                seed,
                sharp: 3.0,
            };
            let cfg = SearchConfig::new(1, 8);
            assert_eq!(beam(&m, &cfg).unwrap(), greedy(&m, &cfg).unwrap());
        }
    }

    #[test]
    fn rejects_zero_beam() {
        let m = Table {
            vocab: 3,
            seed: 0,
            sharp: 1.0,
        };
        assert!(beam(&m, &SearchConfig::new(0, 5)).is_err());
    }

    #[test]
    fn immediate_eos() {
        struct Eos;
        impl StepModel for Eos {
            type State = ();
            fn start(&self) {}
            fn step(&self, _: &(), _: u32) -> Result<((), Vec<f64>)> {
                Ok(((), vec![-50.0, -50.0, 0.0, -50.0]))
            }
        }
        let cfg = SearchConfig::new(3, 10);
        assert_eq!(greedy(&Eos, &cfg).unwrap().tokens, vec![BOS, EOS]);
        assert_eq!(beam(&Eos, &cfg).unwrap().tokens, vec![BOS, EOS]);
    }

    proptest! {
        #[test]
        fn beam_never_below_greedy(seed in 0u64..10_000, width in 1usize..5, vocab in 3usize..7) {
            let m = Table { vocab, seed, sharp: 2.5 };
            let cfg = SearchConfig::new(width, 6);
            let g = greedy(&m, &cfg).unwrap();
            let b = beam(&m, &cfg).unwrap();
            prop_assert!(b.score(true) >= g.score(true));
            prop_assert!(b.tokens.len() <= cfg.max_len);
        }
    }
}
