use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pixseq_core::contrastive::{DualEncoder, DualEncoderConfig};
use pixseq_core::image::Image;
use pixseq_core::inference::{generate, SamplerConfig};
use pixseq_core::par::Exec;
use pixseq_core::seq2seq::{build_model, ModelConfig};
use pixseq_core::synth::{caption, gen_dataset};
use pixseq_core::textproc::train_subword;
use pixseq_core::vq::{Tokenizer, TokenizerConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn images(n: usize) -> Vec<Image> {
    gen_dataset(n, 1).into_iter().map(|e| e.image).collect()
}

fn bench_tokenize(c: &mut Criterion) {
    let tok = Tokenizer::new(TokenizerConfig::default(), 0).unwrap();
    let imgs = images(64);
    let mut group = c.benchmark_group("tokenize_batch");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| b.iter(|| tok.tokenize_batch(&imgs, e).unwrap()));
    }
    group.finish();
}

fn bench_embed(c: &mut Criterion) {
    let enc = DualEncoder::new(DualEncoderConfig::default(), 0).unwrap();
    let imgs = images(64);
    let mut group = c.benchmark_group("embed_images");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| b.iter(|| enc.embed_images(&imgs, e).unwrap()));
    }
    group.finish();
}

fn bench_generate(c: &mut Criterion) {
    let tok = Tokenizer::new(TokenizerConfig::default(), 0).unwrap();
    let data = gen_dataset(200, 2);
    let captions: Vec<String> = data.iter().map(|e| caption(&e.spec)).collect();
    let vocab = train_subword(&captions, 300).unwrap();
    let cfg = ModelConfig {
        enc_layers: 1,
        dec_layers: 2,
        d_model: 64,
        d_mlp: 128,
        heads: 4,
        text_vocab: vocab.vocab_size(),
        image_vocab: tok.cfg.codebook_size,
        grid_h: tok.cfg.grid(),
        grid_w: tok.cfg.grid(),
        ..Default::default()
    };
    let model = build_model(cfg, 0).unwrap();
    let sampler = SamplerConfig { n_samples: 16, ..Default::default() };
    let mut group = c.benchmark_group("generate");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| generate(&model, &tok, None, &vocab, &captions[0], &sampler, e).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_tokenize, bench_embed, bench_generate);
criterion_main!(benches);
