//! Fixtures shared by the kernel benchmarks.

use arnet_core::error::Result;
use arnet_core::seq2seq::model::{PassOptions, StepOptions};
use arnet_core::seq2seq::vocab::{BOS, EOS};
use arnet_core::seq2seq::{ArnetMode, Caption, CaptionModel, Example, InitMode, ModelConfig, SourceKind, Source};
use arnet_core::tensor::{RngStream, Vector};

pub const VOCAB: usize = 500;
pub const HIDDEN: usize = 128;

pub fn random_vector(n: usize, rng: &mut RngStream) -> Vector {
    (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
}

pub fn model_config(hidden: usize, attention: bool) -> ModelConfig {
    ModelConfig {
        source: SourceKind::Tokens {
            vocab_size: VOCAB,
            emb_dim: 64,
            hidden_dim: hidden,
        },
        vocab_size: VOCAB,
        emb_dim: 64,
        hidden_dim: hidden,
        attention,
        attn_dim: hidden,
        init_mode: InitMode::StateInit,
        arnet_dim: hidden,
        init_bound: 0.08,
        forget_bias: 1.0,
    }
}

/// A captioner with the reconstructor attached.
pub fn caption_model(hidden: usize, attention: bool, seed: u64) -> Result<CaptionModel> {
    let mut rng = RngStream::new(seed);
    let mut m = CaptionModel::init(model_config(hidden, attention), &mut rng)?;
    m.attach_arnet(&mut rng)?;
    Ok(m)
}

/// `n` examples with 20-token sources and 16-token captions.
pub fn examples(n: usize, seed: u64) -> Result<Vec<Example>> {
    let mut rng = RngStream::new(seed);
    (0..n)
        .map(|_| {
            let mut toks = vec![BOS];
            toks.extend((0..14).map(|_| 4 + rng.below(VOCAB - 4) as u32));
            toks.push(EOS);
            Ok(Example {
                source: Source::Tokens((0..20).map(|_| 4 + rng.below(VOCAB - 4) as u32).collect()),
                caption: Caption::new(toks, 32)?,
            })
        })
        .collect()
}

pub fn joint_step(lambda: f64) -> StepOptions {
    StepOptions {
        pass: PassOptions {
            training: true,
            ..PassOptions::default()
        },
        lambda,
        arnet: ArnetMode::Joint,
        check_attention: false,
    }
}
