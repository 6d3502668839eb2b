//! Evaluations shared by subcommands and acceptance runs.

use pixseq_core::contrastive::{build_index, cosine, retrieve_nearest, DualEncoder};
use pixseq_core::image::Image;
use pixseq_core::inference::{generate, rerank, SamplerConfig};
use pixseq_core::metrics::alignment_oracle;
use pixseq_core::par::Exec;
use pixseq_core::seq2seq::Seq2Seq;
use pixseq_core::synth::{caption, SceneSpec};
use pixseq_core::textproc::SubwordVocab;
use pixseq_core::vq::{codebook_stats, CodebookStats, Tokenizer};

use crate::error::Result;
use crate::workspace::text_ids;

/// Mean reconstruction MSE and code usage of `tok` over `images`.
pub fn tokenizer_report(tok: &Tokenizer, images: &[Image], exec: Exec) -> Result<(f64, CodebookStats)> {
    let grids = tok.tokenize_batch(images, exec)?;
    let recon = tok.detokenize_batch(&grids, exec)?;
    let mut mse = 0.0;
    for (a, b) in recon.iter().zip(images) {
        mse += a.mse(b)?;
    }
    let stream: Vec<usize> = grids.iter().flatten().map(|&t| t as usize).collect();
    Ok((mse / images.len() as f64, codebook_stats(&stream, tok.cfg.codebook_size)?))
}

/// Oracle scores of guided against unguided samples, and of the reranked
/// pick against the batch average.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentSummary {
    pub prompts: usize,
    pub guided: f64,
    pub unguided: f64,
    /// Mean oracle score of the top reranked sample; `None` without a scorer.
    pub reranked_top1: Option<f64>,
}

impl AlignmentSummary {
    pub fn gain(&self) -> f64 {
        self.guided - self.unguided
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Samples every spec's caption at `sampler.lambda` and at `lambda = 0`,
/// each prompt with its own seed, and scores the images with the oracle.
/// The unguided batch draws from the same streams as the guided one.
#[allow(clippy::too_many_arguments)]
pub fn alignment_eval(
    model: &Seq2Seq,
    tok: &Tokenizer,
    vocab: &SubwordVocab,
    scorer: Option<&DualEncoder>,
    specs: &[SceneSpec],
    sampler: &SamplerConfig,
    exec: Exec,
    mut on_prompt: impl FnMut(usize, &str, f64, f64),
) -> Result<AlignmentSummary> {
    let mut guided = Vec::with_capacity(specs.len());
    let mut unguided = Vec::with_capacity(specs.len());
    let mut top1 = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let prompt = caption(spec);
        let cfg = SamplerConfig { seed: sampler.seed.wrapping_add(i as u64), ..sampler.clone() };
        let batch = generate(model, tok, None, vocab, &prompt, &cfg, exec)?;
        let scores: Vec<f64> = batch.images.iter().map(|im| alignment_oracle(im, spec)).collect::<Result<_, _>>()?;
        let base = SamplerConfig { lambda: 0.0, ..cfg };
        let plain = generate(model, tok, None, vocab, &prompt, &base, exec)?;
        let plain_scores: Vec<f64> = plain.images.iter().map(|im| alignment_oracle(im, spec)).collect::<Result<_, _>>()?;
        if let Some(enc) = scorer {
            let ids = text_ids(vocab, &prompt, enc.cfg.text_len)?;
            let ranked = rerank(batch, |im, _| enc.alignment_score(im, &ids).unwrap_or(f64::NEG_INFINITY));
            top1.push(alignment_oracle(&ranked.images[0], spec)?);
        }
        let (g, u) = (mean(&scores), mean(&plain_scores));
        on_prompt(i, &prompt, g, u);
        guided.push(g);
        unguided.push(u);
    }
    Ok(AlignmentSummary {
        prompts: specs.len(),
        guided: mean(&guided),
        unguided: mean(&unguided),
        reranked_top1: scorer.map(|_| mean(&top1)),
    })
}

/// Top-1 retrieval over an index of `images` with query `texts[i]` expecting
/// image `i`. Returns the accuracy and the number of queries whose result
/// differs from an exhaustive cosine scan.
pub fn retrieval_eval(enc: &DualEncoder, images: &[Image], texts: &[Vec<u32>], exec: Exec) -> Result<(f64, usize)> {
    let index = build_index(enc, images, exec)?;
    let mut hits = 0;
    let mut mismatches = 0;
    for (i, text) in texts.iter().enumerate() {
        let got = retrieve_nearest(enc, &index, text, 1)?;
        let q = &enc.embed_texts(std::slice::from_ref(text), Exec::Sequential)?[0];
        let mut best = (f64::NEG_INFINITY, 0u64);
        for r in 0..index.len() {
            let s = cosine(index.row(r), q);
            if s > best.0 {
                best = (s, index.ids[r]);
            }
        }
        if got[0] != best.1 {
            mismatches += 1;
        }
        if got[0] == i as u64 {
            hits += 1;
        }
    }
    Ok((hits as f64 / texts.len() as f64, mismatches))
}
