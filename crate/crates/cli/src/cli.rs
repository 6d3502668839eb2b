//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use pixseq_core::checkpoint::{load_checkpoint, save_checkpoint};
use pixseq_core::contrastive::{build_index, train_contrastive, DualEncoder};
use pixseq_core::image::Image;
use pixseq_core::inference::{generate, rerank, SamplerConfig};
use pixseq_core::metrics::fid;
use pixseq_core::par::Exec;
use pixseq_core::seq2seq::{build_model, pretrain_text_encoder, train};
use pixseq_core::superres::{train_superres, SuperRes};
use pixseq_core::synth::{caption, load_prompts, render, render_at};
use pixseq_core::textproc::train_subword;
use pixseq_core::vq::{train_tokenizer, Tokenizer, TokenizerTrainConfig};
use pixseq_sim::{bubble_ratio, shard_cost, simulate_pipeline, sweep, write_sweep_csv, PipelineSpec};

use crate::config::RunConfig;
use crate::error::{CliError, Result, EXIT_OK, EXIT_USAGE};
use crate::eval::{alignment_eval, retrieval_eval, tokenizer_report};
use crate::metrics::Emitter;
use crate::workspace::{load_png_dir, split_specs, text_ids, DataManifest, RunDir, MODEL_KIND, RERANKER_KIND, SUPERRES_KIND, TOKENIZER_KIND};

/// Steps between logged training metrics.
const LOG_EVERY: usize = 100;
/// Smoothing factor of the reported loss average.
const EMA_DECAY: f64 = 0.99;

#[derive(Debug, Parser)]
#[command(name = "pixseq", version, about = "Text-to-image token model: data, training, sampling, evaluation, simulation")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the selected stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the number of training steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Run directory holding data, checkpoints and outputs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides the guidance weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Overrides the number of samples per prompt.
    #[arg(long = "n-samples", global = true)]
    n_samples: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split the scene space, train the subword vocabulary, write held-out renders.
    MakeData,
    /// Train the image tokenizer on the training renders.
    TrainTokenizer,
    /// Train the encoder-decoder on tokenized training pairs.
    TrainModel,
    /// Train the contrastive dual encoder used for reranking, FID and retrieval.
    TrainReranker,
    /// Train the 2x super-resolution network.
    TrainSr,
    /// Sample images for prompts.
    Sample {
        /// Prompt text; may be repeated.
        #[arg(long)]
        prompt: Vec<String>,
        /// Tab-separated prompt file (prompt, category, challenge).
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Output directory; defaults to <out>/samples.
        #[arg(long)]
        dest: Option<PathBuf>,
        /// Order each batch by the reranker's alignment score.
        #[arg(long)]
        rerank: bool,
        /// Upsample with the super-resolution network.
        #[arg(long)]
        sr: bool,
    },
    /// Score a directory of images against a prompt with the reranker.
    Rerank {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        prompt: String,
    },
    /// Frechet distance between two image directories in reranker feature space.
    EvalFid {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Oracle alignment of guided and unguided samples on held-out prompts.
    EvalAlignment {
        /// Evaluate only the first N held-out prompts.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Nearest training images for a caption, or top-1 accuracy over all captions.
    Retrieve {
        #[arg(long)]
        query: Option<String>,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
    },
    /// Simulate the configured pipeline schedule.
    SimulatePipeline {
        /// Also sweep stages 1..=S and rounds 1, 2, 4 into a CSV.
        #[arg(long)]
        sweep: bool,
    },
    /// Per-device cost of the configured sharded layer.
    ShardCost,
    /// Validate a checkpoint and list its tensors.
    InspectCheckpoint { path: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MakeData => "make-data",
            Command::TrainTokenizer => "train-tokenizer",
            Command::TrainModel => "train-model",
            Command::TrainReranker => "train-reranker",
            Command::TrainSr => "train-sr",
            Command::Sample { .. } => "sample",
            Command::Rerank { .. } => "rerank",
            Command::EvalFid { .. } => "eval-fid",
            Command::EvalAlignment { .. } => "eval-alignment",
            Command::Retrieve { .. } => "retrieve",
            Command::SimulatePipeline { .. } => "simulate-pipeline",
            Command::ShardCost => "shard-cost",
            Command::InspectCheckpoint { .. } => "inspect-checkpoint",
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Metrics go to `out`, diagnostics to `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = write!(err, "{}", e.render());
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let name = cli.command.name();
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "pixseq {name}: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(l) = cli.lambda {
        cfg.sampler.lambda = l;
    }
    if let Some(n) = cli.n_samples {
        cfg.sampler.n_samples = n;
    }
    let steps = cli.steps;
    let seed = cli.seed;
    match &cli.command {
        Command::MakeData => set(&mut cfg.data.seed, seed),
        Command::TrainTokenizer => {
            set(&mut cfg.tokenizer.train.seed, seed);
            set(&mut cfg.tokenizer.train.steps, steps);
        }
        Command::TrainModel => {
            set(&mut cfg.model.train.seed, seed);
            set(&mut cfg.model.train.steps, steps);
        }
        Command::TrainReranker => {
            set(&mut cfg.reranker.train.seed, seed);
            set(&mut cfg.reranker.train.steps, steps);
        }
        Command::TrainSr => {
            set(&mut cfg.model.superres.train.seed, seed);
            set(&mut cfg.model.superres.train.steps, steps);
        }
        _ => set(&mut cfg.sampler.seed, seed),
    }
    cfg.validate()?;
    let run = RunDir::new(&cli.out);
    let mut em = Emitter::new(cli.command.name(), out);
    match cli.command {
        Command::MakeData => make_data(&cfg, &run, &mut em),
        Command::TrainTokenizer => train_tokenizer_cmd(&cfg, &run, &mut em),
        Command::TrainModel => train_model_cmd(&cfg, &run, &mut em),
        Command::TrainReranker => train_reranker_cmd(&cfg, &run, &mut em),
        Command::TrainSr => train_sr_cmd(&cfg, &run, &mut em),
        Command::Sample { prompt, prompts, dest, rerank, sr } => {
            let mut texts = prompt;
            if let Some(p) = prompts {
                texts.extend(load_prompts(&p)?.into_iter().map(|r| r.prompt));
            }
            if texts.is_empty() {
                return Err(CliError::usage("sample needs --prompt or --prompts"));
            }
            let dest = dest.unwrap_or_else(|| run.samples_dir());
            sample_cmd(&cfg, &run, &mut em, &texts, &dest, rerank, sr)
        }
        Command::Rerank { images, prompt } => rerank_cmd(&run, &mut em, &images, &prompt),
        Command::EvalFid { a, b } => eval_fid_cmd(&run, &mut em, &a, &b),
        Command::EvalAlignment { limit } => eval_alignment_cmd(&cfg, &run, &mut em, limit),
        Command::Retrieve { query, k } => retrieve_cmd(&run, &mut em, query.as_deref(), k),
        Command::SimulatePipeline { sweep } => simulate_cmd(&cfg, &run, &mut em, sweep),
        Command::ShardCost => {
            let c = shard_cost(&cfg.sim.shard)?;
            let label = serde_json::to_value(c.strategy).unwrap().as_str().unwrap().to_string();
            em.emit_labeled("comm_bytes_per_layer", &label, c.comm_bytes_per_layer)?;
            em.emit_labeled("peak_output_elems", &label, c.peak_output_elems as f64)?;
            em.emit_labeled("hidden_elems", &label, c.hidden_elems as f64)?;
            em.emit_labeled("gathered_input_elems", &label, c.gathered_input_elems as f64)?;
            em.emit_labeled("peak_activation_elems", &label, c.peak_activation_elems as f64)
        }
        Command::InspectCheckpoint { path } => {
            let (m, params) = load_checkpoint(&path)?;
            for (name, t) in params.iter() {
                em.emit_labeled("numel", name, t.numel() as f64)?;
            }
            em.emit_labeled("tensors", &m.kind, params.len() as f64)?;
            em.emit_labeled("params", &m.kind, params.numel() as f64)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn make_data(cfg: &RunConfig, run: &RunDir, em: &mut Emitter) -> Result<()> {
    let split = split_specs(cfg.data.seed, cfg.data.heldout_fraction);
    let captions: Vec<String> = split.train.iter().map(caption).collect();
    let vocab = train_subword(&captions, cfg.data.vocab_size)?;
    let manifest = DataManifest {
        seed: cfg.data.seed,
        heldout_fraction: cfg.data.heldout_fraction,
        n_train: split.train.len(),
        n_heldout: split.heldout.len(),
        vocab_size: vocab.vocab_size(),
    };
    run.write_split(&split, &manifest, &vocab)?;
    let dir = run.heldout_images_dir();
    std::fs::create_dir_all(&dir)?;
    for (i, spec) in split.heldout.iter().enumerate() {
        render(spec)?.save_png(&dir.join(format!("{i:04}.png")))?;
    }
    em.emit("train_specs", None, manifest.n_train as f64)?;
    em.emit("heldout_specs", None, manifest.n_heldout as f64)?;
    em.emit("vocab_size", None, manifest.vocab_size as f64)
}

fn renders(specs: &[pixseq_core::synth::SceneSpec]) -> Result<Vec<Image>> {
    Ok(specs.iter().map(render).collect::<Result<_, _>>()?)
}

fn train_tokenizer_cmd(cfg: &RunConfig, run: &RunDir, em: &mut Emitter) -> Result<()> {
    let split = run.load_split()?;
    let train_imgs = renders(&split.train)?;
    let held_imgs = renders(&split.heldout)?;
    let tc = &cfg.tokenizer.train;
    let mut tok = Tokenizer::new(cfg.tokenizer.arch.clone(), tc.seed)?;
    let mut log_err = Ok(());
    let mut log = |stage: &str, s: &pixseq_core::vq::TokenizerStep, last: bool| {
        if log_err.is_ok() && (s.step.is_multiple_of(LOG_EVERY) || last) {
            log_err = em.emit(&format!("{stage}loss"), Some(s.step as u64), s.loss).and_then(|_| em.emit(&format!("{stage}recon"), Some(s.step as u64), s.recon));
        }
    };
    train_tokenizer(&mut tok, &train_imgs, tc, |_, s| log("", s, s.step + 1 == tc.steps))?;
    if let Some(ft) = &cfg.tokenizer.finetune {
        tok.rebuild_decoder(ft.width, ft.layers, tc.seed.wrapping_add(1))?;
        let ftc = TokenizerTrainConfig { steps: ft.steps, decoder_only: true, ..tc.clone() };
        train_tokenizer(&mut tok, &train_imgs, &ftc, |_, s| log("finetune_", s, s.step + 1 == ft.steps))?;
    }
    log_err?;
    save_checkpoint(&run.tokenizer_dir(), TOKENIZER_KIND, &tok.cfg, &tok.params)?;
    let (mse, stats) = tokenizer_report(&tok, &held_imgs, Exec::Parallel)?;
    em.emit("heldout_mse", None, mse)?;
    em.emit("usage_fraction", None, stats.usage_fraction)?;
    em.emit("perplexity", None, stats.perplexity)
}

fn train_model_cmd(cfg: &RunConfig, run: &RunDir, em: &mut Emitter) -> Result<()> {
    let split = run.load_split()?;
    let vocab = run.load_vocab()?;
    let tok = run.load_tokenizer()?;
    let arch = &cfg.model.arch;
    if vocab.vocab_size() > arch.text_vocab {
        return Err(CliError::data(format!("vocabulary of {} exceeds model.arch.text_vocab {}", vocab.vocab_size(), arch.text_vocab)));
    }
    let grids = tok.tokenize_batch(&renders(&split.train)?, Exec::Parallel)?;
    let data: Vec<(Vec<u32>, Vec<u32>)> = split
        .train
        .iter()
        .zip(grids)
        .map(|(s, g)| Ok((text_ids(&vocab, &caption(s), arch.text_len)?, g)))
        .collect::<Result<_>>()?;
    let tc = cfg.train_config();
    let mut model = build_model(arch.clone(), tc.seed)?;
    if let Some(pc) = &cfg.model.pretrain {
        let corpus: Vec<Vec<u32>> = data.iter().map(|d| d.0.clone()).collect();
        let hist = pretrain_text_encoder(&mut model, &corpus, pc)?;
        if let Some(l) = hist.last() {
            em.emit("pretrain_loss", Some(hist.len() as u64 - 1), *l)?;
        }
    }
    let mut ema = 0.0;
    let mut log_err = Ok(());
    train(&mut model, &data, &tc, |_, s| {
        ema = if s.step == 0 { s.loss } else { EMA_DECAY * ema + (1.0 - EMA_DECAY) * s.loss };
        if log_err.is_ok() && (s.step % LOG_EVERY == 0 || s.step + 1 == tc.steps) {
            log_err = em.emit("loss", Some(s.step as u64), s.loss).and_then(|_| em.emit("loss_ema", Some(s.step as u64), ema));
        }
    })?;
    log_err?;
    save_checkpoint(&run.model_dir(), MODEL_KIND, &model.cfg, &model.params)?;
    em.emit("final_loss_ema", Some(tc.steps as u64 - 1), ema)
}

fn train_reranker_cmd(cfg: &RunConfig, run: &RunDir, em: &mut Emitter) -> Result<()> {
    let split = run.load_split()?;
    let vocab = run.load_vocab()?;
    let arch = &cfg.reranker.arch;
    if vocab.vocab_size() > arch.text_vocab {
        return Err(CliError::data(format!("vocabulary of {} exceeds reranker.arch.text_vocab {}", vocab.vocab_size(), arch.text_vocab)));
    }
    let images = renders(&split.train)?;
    let texts: Vec<Vec<u32>> = split.train.iter().map(|s| text_ids(&vocab, &caption(s), arch.text_len)).collect::<Result<_>>()?;
    let pairs: Vec<(Image, Vec<u32>)> = images.iter().cloned().zip(texts.iter().cloned()).collect();
    let tc = &cfg.reranker.train;
    let mut enc = DualEncoder::new(arch.clone(), tc.seed)?;
    let mut log_err = Ok(());
    train_contrastive(&mut enc, &pairs, tc, |step, loss| {
        if log_err.is_ok() && (step % LOG_EVERY == 0 || step + 1 == tc.steps) {
            log_err = em.emit("loss", Some(step as u64), loss);
        }
    })?;
    log_err?;
    save_checkpoint(&run.reranker_dir(), RERANKER_KIND, &enc.cfg, &enc.params)?;
    let (acc, mismatches) = retrieval_eval(&enc, &images, &texts, Exec::Parallel)?;
    em.emit("tau", None, enc.tau())?;
    em.emit("train_top1", None, acc)?;
    em.emit("scan_mismatches", None, mismatches as f64)
}

fn train_sr_cmd(cfg: &RunConfig, run: &RunDir, em: &mut Emitter) -> Result<()> {
    let split = run.load_split()?;
    let side = cfg.tokenizer.arch.image_side;
    let pairs: Vec<(Image, Image)> =
        split.train.iter().map(|s| Ok((render_at(s, side)?, render_at(s, 2 * side)?))).collect::<Result<_>>()?;
    let sc = &cfg.model.superres;
    let mut sr = SuperRes::new(sc.arch.clone(), sc.train.seed);
    let hist = train_superres(&mut sr, &pairs, &sc.train)?;
    for (i, l) in hist.iter().enumerate() {
        if i % LOG_EVERY == 0 || i + 1 == hist.len() {
            em.emit("loss", Some(i as u64), *l)?;
        }
    }
    save_checkpoint(&run.superres_dir(), SUPERRES_KIND, &sr.cfg, &sr.params)?;
    let held: Vec<(Image, Image)> =
        split.heldout.iter().map(|s| Ok((render_at(s, side)?, render_at(s, 2 * side)?))).collect::<Result<_>>()?;
    let mut mse = 0.0;
    let mut base = 0.0;
    for (lo, hi) in &held {
        mse += sr.upsample(lo)?.mse(hi)?;
        base += lo.upsample_nearest().mse(hi)?;
    }
    em.emit("heldout_mse", None, mse / held.len() as f64)?;
    em.emit("nearest_mse", None, base / held.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn sample_cmd(
    cfg: &RunConfig,
    run: &RunDir,
    em: &mut Emitter,
    prompts: &[String],
    dest: &std::path::Path,
    with_rerank: bool,
    with_sr: bool,
) -> Result<()> {
    let vocab = run.load_vocab()?;
    let tok = run.load_tokenizer()?;
    let model = run.load_model()?;
    let scorer = if with_rerank { Some(run.load_reranker()?) } else { None };
    let sr = if with_sr { Some(run.load_superres()?) } else { None };
    std::fs::create_dir_all(dest)?;
    let sampler: &SamplerConfig = &cfg.sampler;
    for (i, prompt) in prompts.iter().enumerate() {
        let mut batch = generate(&model, &tok, None, &vocab, prompt, sampler, Exec::Parallel)?;
        if let Some(enc) = &scorer {
            let ids = text_ids(&vocab, prompt, enc.cfg.text_len)?;
            batch = rerank(batch, |im, _| enc.alignment_score(im, &ids).unwrap_or(f64::NEG_INFINITY));
        }
        for (j, img) in batch.images.iter().enumerate() {
            let img = match &sr {
                Some(sr) => sr.upsample(img)?,
                None => img.clone(),
            };
            let name = format!("{i:03}_{j:02}.png");
            img.save_png(&dest.join(&name))?;
            if let Some(scores) = &batch.scores {
                em.emit_labeled("alignment_score", &name, scores[j])?;
            }
        }
        em.emit_labeled("images", prompt, batch.images.len() as f64)?;
    }
    Ok(())
}

fn rerank_cmd(run: &RunDir, em: &mut Emitter, images: &std::path::Path, prompt: &str) -> Result<()> {
    let vocab = run.load_vocab()?;
    let enc = run.load_reranker()?;
    let ids = text_ids(&vocab, prompt, enc.cfg.text_len)?;
    let mut scored: Vec<(String, f64)> =
        load_png_dir(images)?.into_iter().map(|(n, im)| Ok((n, enc.alignment_score(&im, &ids)?))).collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (n, s) in scored {
        em.emit_labeled("alignment_score", &n, s)?;
    }
    Ok(())
}

fn eval_fid_cmd(run: &RunDir, em: &mut Emitter, a: &std::path::Path, b: &std::path::Path) -> Result<()> {
    let enc = run.load_reranker()?;
    let load = |d| -> Result<Vec<Image>> { Ok(load_png_dir(d)?.into_iter().map(|(_, im)| im).collect()) };
    let (ia, ib) = (load(a)?, load(b)?);
    let value = fid(&ia, &ib, |im| enc.image_features(im).unwrap_or_default(), Exec::Parallel)?;
    em.emit_labeled("fid", "dual_encoder_image_tower", value)
}

fn eval_alignment_cmd(cfg: &RunConfig, run: &RunDir, em: &mut Emitter, limit: Option<usize>) -> Result<()> {
    let split = run.load_split()?;
    let vocab = run.load_vocab()?;
    let tok = run.load_tokenizer()?;
    let model = run.load_model()?;
    let scorer = if run.reranker_dir().exists() { Some(run.load_reranker()?) } else { None };
    let specs = &split.heldout[..limit.unwrap_or(split.heldout.len()).min(split.heldout.len())];
    let mut rows = Vec::new();
    let summary = alignment_eval(&model, &tok, &vocab, scorer.as_ref(), specs, &cfg.sampler, Exec::Parallel, |_, p, g, u| {
        rows.push((p.to_string(), g, u));
    })?;
    for (p, g, u) in rows {
        em.emit_labeled("guided", &p, g)?;
        em.emit_labeled("unguided", &p, u)?;
    }
    em.emit("prompts", None, summary.prompts as f64)?;
    em.emit("mean_guided", None, summary.guided)?;
    em.emit("mean_unguided", None, summary.unguided)?;
    em.emit("guidance_gain", None, summary.gain())?;
    if let Some(t) = summary.reranked_top1 {
        em.emit("mean_reranked_top1", None, t)?;
    }
    Ok(())
}

fn retrieve_cmd(run: &RunDir, em: &mut Emitter, query: Option<&str>, k: usize) -> Result<()> {
    let split = run.load_split()?;
    let vocab = run.load_vocab()?;
    let enc = run.load_reranker()?;
    let images = renders(&split.train)?;
    match query {
        Some(q) => {
            let index = build_index(&enc, &images, Exec::Parallel)?;
            let ids = text_ids(&vocab, q, enc.cfg.text_len)?;
            let qe = &enc.embed_texts(std::slice::from_ref(&ids), Exec::Sequential)?[0];
            for id in pixseq_core::contrastive::retrieve_nearest(&enc, &index, &ids, k)? {
                let score = pixseq_core::contrastive::cosine(index.row(id as usize), qe);
                em.emit_labeled("cosine", &caption(&split.train[id as usize]), score)?;
            }
            Ok(())
        }
        None => {
            let texts: Vec<Vec<u32>> =
                split.train.iter().map(|s| text_ids(&vocab, &caption(s), enc.cfg.text_len)).collect::<Result<_>>()?;
            let (acc, mismatches) = retrieval_eval(&enc, &images, &texts, Exec::Parallel)?;
            em.emit("train_top1", None, acc)?;
            em.emit("scan_mismatches", None, mismatches as f64)
        }
    }
}

fn simulate_cmd(cfg: &RunConfig, run: &RunDir, em: &mut Emitter, with_sweep: bool) -> Result<()> {
    let spec = &cfg.sim.pipeline;
    let trace = simulate_pipeline(spec)?;
    std::fs::create_dir_all(run.root())?;
    std::fs::write(run.root().join("pipeline_trace.json"), trace.to_json())?;
    em.emit("makespan", None, trace.makespan)?;
    em.emit("bubble_ratio", None, bubble_ratio(&trace)?)?;
    if with_sweep {
        let specs: Vec<PipelineSpec> = (1..=spec.stages)
            .flat_map(|s| [1, 2, 4].into_iter().map(move |r| PipelineSpec { stages: s, rounds: r, ..spec.clone() }))
            .collect();
        let rows = sweep(&specs, true)?;
        let file = std::fs::File::create(run.root().join("pipeline_sweep.csv"))?;
        write_sweep_csv(&rows, file)?;
        em.emit("sweep_rows", None, rows.len() as f64)?;
    }
    Ok(())
}
