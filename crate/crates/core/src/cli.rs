//! `framesel` command line: every data record goes to stdout as one JSON
//! document per line; failures go to stderr as one JSON line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use framesel::autodiff::grad_check;
use framesel::bench::{
    evaluate, generate_dataset, run_ablation, AblationSettings, BenchConfig, Variant,
};
use framesel::io::{load_dataset, load_snapshot, save_snapshot, write_dataset, Manifest};
use framesel::pipeline::{
    answer_logits, infer, loss, train, FrameSelector, Model, TrainConfig, VideoQAInstance,
};
use framesel::sampler::{hard_topk, relaxed_topk, relaxed_topk_values, SamplerConfig, DEFAULT_K, DEFAULT_TAU};
use framesel::scoring::{score_frames, Mechanisms, ScorerDims};
use framesel::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "framesel", version, about = "Question-aware differentiable frame selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark: FSEB files plus manifest.json.
    Gen(GenArgs),
    /// Train scorer and generator; streams step reports, writes a snapshot.
    Train(TrainArgs),
    /// Per-instance frame selection and score breakdown.
    Select(SelectArgs),
    /// Benchmark metrics of a model on a dataset.
    Eval(EvalArgs),
    /// Paired-seed ablation over every variant.
    Ablate(AblateArgs),
    /// Finite-difference check of the pipeline loss gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SelectionFlags {
    /// Frames selected during training.
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Frames selected at inference (defaults to k).
    #[arg(long)]
    pub k_prime: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma list of mechanisms to switch off: qfs, qfm, ifd.
    #[arg(long, default_value = "")]
    pub ablate: String,
    /// No Gumbel noise in the relaxed selection.
    #[arg(long)]
    pub deterministic: bool,
}

impl SelectionFlags {
    fn k_prime(&self) -> usize {
        self.k_prime.unwrap_or(self.k)
    }

    fn mechanisms(&self) -> Result<Mechanisms> {
        Mechanisms::with_ablated(&self.ablate)
    }

    fn ablation_given(&self) -> bool {
        !self.ablate.trim().is_empty()
    }

    fn sampler(&self) -> SamplerConfig {
        if self.deterministic {
            SamplerConfig::deterministic(self.k, self.tau)
        } else {
            SamplerConfig::stochastic(self.k, self.tau)
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct HiddenDims {
    #[arg(long, default_value_t = 64)]
    pub d_h: usize,
    #[arg(long, default_value_t = 32)]
    pub d_p: usize,
}

#[derive(Debug, Clone, Args)]
pub struct BenchFlags {
    #[arg(long, default_value_t = 200)]
    pub videos: usize,
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
    #[arg(long, default_value_t = 5)]
    pub options: usize,
    #[arg(long, default_value_t = 3)]
    pub planted: usize,
    #[arg(long, default_value_t = 6)]
    pub cluster: usize,
    /// Question-aligned frames without the relevance marker.
    #[arg(long, default_value_t = 0)]
    pub decoys: usize,
    /// Marked frames about an unrelated question.
    #[arg(long, default_value_t = 0)]
    pub salient: usize,
    /// Weight of the relevance marker (0 disables it).
    #[arg(long, default_value_t = 0.0)]
    pub marker_weight: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 64)]
    pub d_v: usize,
    #[arg(long, default_value_t = 32)]
    pub d_t: usize,
}

impl BenchFlags {
    fn config(&self, seed: u64) -> BenchConfig {
        BenchConfig {
            videos: self.videos,
            frames: self.frames,
            options: self.options,
            planted: self.planted,
            cluster_size: self.cluster,
            decoys: self.decoys,
            salient: self.salient,
            marker_weight: self.marker_weight,
            noise_sigma: self.noise_sigma,
            seed,
            d_v: self.d_v,
            d_t: self.d_t,
            ..BenchConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub bench: BenchFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Snapshot directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub selection: SelectionFlags,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[command(flatten)]
    pub dims: HiddenDims,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long, required_unless_present = "scores")]
    pub manifest: Option<PathBuf>,
    /// Snapshot to score with; a fresh model from --seed otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Select directly from these comma-separated scores instead of a dataset.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "manifest")]
    pub scores: Option<Vec<f64>>,
    #[command(flatten)]
    pub selection: SelectionFlags,
    #[command(flatten)]
    pub dims: HiddenDims,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub selection: SelectionFlags,
    #[command(flatten)]
    pub dims: HiddenDims,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Paired seeds; each seeds data, initialisation and shuffling.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    /// Held-out videos, taken from the end of each generated dataset.
    #[arg(long, default_value_t = 50)]
    pub test_videos: usize,
    #[command(flatten)]
    pub selection: SelectionFlags,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[command(flatten)]
    pub bench: BenchFlags,
    #[command(flatten)]
    pub dims: HiddenDims,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check on the first instance of this dataset instead of a generated one.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub selection: SelectionFlags,
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 12)]
    pub frames: usize,
    #[arg(long, default_value_t = 8)]
    pub d_v: usize,
    #[arg(long, default_value_t = 4)]
    pub d_t: usize,
    #[arg(long, default_value_t = 6)]
    pub d_h: usize,
    #[arg(long, default_value_t = 4)]
    pub d_p: usize,
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::Json {
        path: PathBuf::from("<stdout>"),
        source: e,
    })?;
    writeln!(out, "{line}").map_err(|e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

fn load(manifest: &Path) -> Result<(Manifest, Vec<VideoQAInstance>)> {
    if !manifest.exists() {
        return Err(Error::Validation {
            what: manifest.display().to_string(),
            detail: "manifest not found".into(),
        });
    }
    load_dataset(manifest)
}

/// A snapshot keeps its own mechanism mask unless `--ablate` overrides it.
fn model_for(
    snapshot: Option<&Path>,
    manifest: &Manifest,
    dims: &HiddenDims,
    flags: &SelectionFlags,
) -> Result<Model> {
    let seed = flags.seed;
    let mut model = match snapshot {
        Some(p) => load_snapshot(p)?,
        None => Model::new(
            ScorerDims {
                d_v: manifest.d_v,
                d_t: manifest.d_t,
                d_h: dims.d_h,
                d_p: dims.d_p,
            },
            seed,
        )?,
    };
    if model.dims().d_v != manifest.d_v || model.dims().d_t != manifest.d_t {
        return Err(Error::Validation {
            what: "model".into(),
            detail: format!(
                "model expects d_v = {}, d_t = {}; dataset has {}, {}",
                model.dims().d_v,
                model.dims().d_t,
                manifest.d_v,
                manifest.d_t
            ),
        });
    }
    if snapshot.is_none() || flags.ablation_given() {
        model.mechanisms = flags.mechanisms()?;
    }
    Ok(model)
}

fn gen(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let config = a.bench.config(a.seed);
    let data = generate_dataset(&config)?;
    let path = write_dataset(&a.out, &data.instances, Some(config))?;
    let manifest = Manifest::read(&path)?;
    emit(
        out,
        &json!({
            "event": "gen",
            "manifest": path,
            "instances": data.instances.len(),
            "dataset_hash": manifest.dataset_hash,
        }),
    )
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let (manifest, data) = load(&a.manifest)?;
    let s = &a.selection;
    let config = TrainConfig {
        sampler: s.sampler(),
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: s.seed,
        mechanisms: s.mechanisms()?,
        selector: FrameSelector::Scored,
    };
    let mut model = model_for(None, &manifest, &a.dims, s)?;
    let mut write_err = None;
    train(&mut model, &data, &config, |r| {
        if write_err.is_none() {
            write_err = emit(out, &json!({ "event": "step", "report": r })).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let index = save_snapshot(&model, &a.out)?;
    emit(out, &json!({ "event": "snapshot", "index": index, "parameters": model.store.len() }))
}

fn select_cmd(a: &SelectArgs, out: &mut dyn Write) -> Result<()> {
    let s = &a.selection;
    if let Some(scores) = &a.scores {
        let result = if s.deterministic {
            hard_topk(scores, s.k_prime())?
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            let mut r = relaxed_topk_values(scores, &s.sampler(), &mut rng)?;
            r.seed = Some(s.seed);
            r
        };
        return emit(out, &json!({ "instance": null, "selection": result }));
    }
    let manifest_path = a.manifest.as_deref().expect("clap enforces --manifest");
    let (manifest, data) = load(manifest_path)?;
    let model = model_for(a.model.as_deref(), &manifest, &a.dims, s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    for inst in &data {
        if s.deterministic {
            let r = infer(&model, inst, s.k_prime())?;
            emit(
                out,
                &json!({
                    "instance": inst.frames.video_id,
                    "selection": r.selection,
                    "scores": r.scores,
                    "answer": r.answer,
                }),
            )?;
        } else {
            let mut g = framesel::autodiff::Graph::new();
            let nodes = score_frames(
                &mut g,
                &model.store,
                &model.scorer,
                &inst.frames,
                &inst.question,
                model.mechanisms,
            )?;
            let mut sel = relaxed_topk(&mut g, &nodes.aggregate, &s.sampler(), &mut rng)?.result;
            sel.seed = Some(s.seed);
            emit(
                out,
                &json!({
                    "instance": inst.frames.video_id,
                    "selection": sel,
                    "scores": nodes.breakdown(&g),
                }),
            )?;
        }
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let s = &a.selection;
    let (manifest, data) = load(&a.manifest)?;
    let model = model_for(a.model.as_deref(), &manifest, &a.dims, s)?;
    let metrics = evaluate(&model, &data, s.k_prime())?;
    emit(out, &json!({ "event": "metrics", "k_prime": s.k_prime(), "metrics": metrics }))
}

fn ablate_cmd(a: &AblateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let s = &a.selection;
    if s.ablation_given() {
        return Err(Error::Contract("ablate runs every variant; --ablate does not apply".into()));
    }
    let bench = a.bench.config(0);
    let dims = ScorerDims {
        d_v: a.bench.d_v,
        d_t: a.bench.d_t,
        d_h: a.dims.d_h,
        d_p: a.dims.d_p,
    };
    let settings = AblationSettings {
        train: TrainConfig {
            sampler: s.sampler(),
            learning_rate: a.lr,
            epochs: a.epochs,
            batch_size: a.batch_size,
            ..TrainConfig::default()
        },
        dims,
        test_videos: a.test_videos,
        k_prime: s.k_prime(),
        seeds: a.seeds.clone(),
        variants: Variant::ALL.to_vec(),
    };
    let mut write_err = None;
    let table = run_ablation(&bench, &settings, |variant, r| {
        if write_err.is_none() {
            write_err = emit(out, &json!({ "event": "result", "variant": variant, "result": r })).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    emit(out, &json!({ "event": "table", "paired": table.paired(), "table": table }))?;
    let _ = write!(err, "{}", table.summary());
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<(framesel::autodiff::GradCheckReport, bool)> {
    let s = &a.selection;
    let (inst, dims) = match &a.manifest {
        Some(p) => {
            let (manifest, data) = load(p)?;
            let inst = data
                .into_iter()
                .next()
                .ok_or_else(|| Error::Validation {
                    what: p.display().to_string(),
                    detail: "dataset is empty".into(),
                })?;
            let dims = ScorerDims {
                d_v: manifest.d_v,
                d_t: manifest.d_t,
                d_h: a.d_h,
                d_p: a.d_p,
            };
            (inst, dims)
        }
        None => {
            let config = BenchConfig {
                videos: 1,
                frames: a.frames,
                planted: 2,
                cluster_size: 2,
                options: 3,
                seed: s.seed,
                d_v: a.d_v,
                d_t: a.d_t,
                ..BenchConfig::default()
            };
            let data = generate_dataset(&config)?;
            let dims = ScorerDims {
                d_v: a.d_v,
                d_t: a.d_t,
                d_h: a.d_h,
                d_p: a.d_p,
            };
            (data.instances.into_iter().next().expect("one video"), dims)
        }
    };
    let mechanisms = s.mechanisms()?;
    let mut model = Model::new(dims, s.seed)?;
    let sampler = s.sampler();
    let (scorer, generator) = (model.scorer, model.generator);
    let ids: Vec<_> = scorer.ids().to_vec();
    let report = grad_check(
        |g, store| {
            let nodes = score_frames(g, store, &scorer, &inst.frames, &inst.question, mechanisms)?;
            // same seed on every evaluation: the Gumbel noise is frozen
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            let sel = relaxed_topk(g, &nodes.aggregate, &sampler, &mut rng)?;
            let logits = answer_logits(g, store, &generator, &inst, sel.weights, sampler.k)?;
            loss(g, logits, inst.answer_index)
        },
        &mut model.store,
        Some(&ids),
        a.step,
        a.tolerance,
    )?;
    let passed = report.passed;
    Ok((report, passed))
}

/// Runs one parsed command; the returned code is the process exit status.
pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Gen(a) => gen(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Select(a) => select_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Ablate(a) => ablate_cmd(a, out, err),
        Command::Gradcheck(a) => gradcheck_cmd(a).and_then(|(report, passed)| {
            emit(out, &json!({ "event": "gradcheck", "report": report }))?;
            if passed {
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "gradient check failed: max relative error {:e} >= {:e}",
                    report.max_rel_error, report.tolerance
                )))
            }
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            fail(err, e.kind(), &e.to_string());
            1
        }
    }
}

/// One-line machine-parsable error record.
pub fn fail(err: &mut dyn Write, kind: &str, message: &str) {
    let line = json!({ "error": kind, "message": message.lines().next().unwrap_or("") });
    let _ = writeln!(err, "{line}");
}
