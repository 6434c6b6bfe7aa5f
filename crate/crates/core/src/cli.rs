//! Command-line front end. Machine-readable results go to `out` as JSON,
//! progress and tables go to `err`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::batch::{Domain, EmbeddingBatch};
use crate::config::RunConfig;
use crate::dataset::{self, split_zero_shot, SplitMode, SplitSpec};
use crate::error::{Error, Result};
use crate::geometry;
use crate::gradcheck::{self, GradCheckReport, DEFAULT_STEP};
use crate::hashing::{self, encode_binary, HashCodes, HashLossTerms, HashTerms, SUPPORTED_BITS};
use crate::linalg::Matrix;
use crate::losses::{LossConfig, LossKind, PrototypeSet};
use crate::retrieval::{self, EvalOptions, MetricsReport};
use crate::training::{self, ModelFile, PrototypeMode};

#[derive(Debug, Parser)]
#[command(name = "margin-metric", version, about = "Euclidean margin metric learning on synthetic sketch/photo data")]
pub struct Cli {
    /// JSON run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true, env = "MARGIN_METRIC_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-domain dataset as an EMB1 file.
    GenData(GenDataArgs),
    /// Train encoder and prototypes, writing a model file and a loss log.
    Train(TrainArgs),
    /// Sketch-to-photo retrieval metrics of a trained model.
    Eval(EvalArgs),
    /// Train the hashing autoencoder and evaluate Hamming retrieval.
    Hash(HashArgs),
    /// Monte-Carlo check of the decision-region margin property.
    VerifyGeometry(GeometryArgs),
    /// Finite-difference gradient check of the losses.
    Losscheck(LosscheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Domain transform strength.
    #[arg(long)]
    pub gain: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Draw fresh noise around the same anchors.
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtoModeArg {
    Parameter,
    BatchMean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Standard,
    ZeroShot,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// EMB1 training set; generated from the configuration when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log CSV; defaults to the model path with a .csv extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// Margin.
    #[arg(long)]
    pub m: Option<f64>,
    /// Logit scale of LMCL.
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, value_enum)]
    pub proto_mode: Option<ProtoModeArg>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Classes excluded from training, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub holdout: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// EMB1 evaluation set of raw inputs.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_delimiter = ',')]
    pub holdout: Vec<usize>,
    /// Zero-shot: rank against every photo, not just the held-out classes.
    #[arg(long)]
    pub full_gallery: bool,
    /// Precision cut-offs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub p_at: Vec<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Include per-class distance diagnostics in the report.
    #[arg(long)]
    pub distances: bool,
    /// Write the min inter-class distance histogram as CSV.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    /// Write the embedded evaluation set as EMB1.
    #[arg(long)]
    pub embeddings_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HashArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// EMB1 raw inputs used by the quantisation term.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation set; defaults to --data.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub bits: Option<usize>,
    /// Loss terms joined by '+', from r (reconstruction), s (scatter), q (quantisation).
    #[arg(long)]
    pub loss_terms: Option<HashTerms>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// HSH1 file with the codes of the evaluation set.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GeometryArgs {
    #[arg(long)]
    pub m: f64,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSelection {
    All,
    One(LossKind),
}

impl std::str::FromStr for LossSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(Self::All)
        } else {
            s.parse().map(Self::One)
        }
    }
}

#[derive(Debug, Args)]
pub struct LosscheckArgs {
    /// A loss name or `all`.
    #[arg(long, default_value = "all")]
    pub loss: LossSelection,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub h: f64,
    /// Also check through the encoder end to end.
    #[arg(long)]
    pub encoder: bool,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn emit<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Runs one command. Errors are returned, not printed.
pub fn run<W: Write, E: Write>(cli: Cli, out: &mut W, err: &mut E) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    if let Some(s) = cli.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
        cfg.hash.seed = s;
    }
    match &cli.command {
        Command::GenData(a) => gen_data(cfg, a, out, err),
        Command::Train(a) => train(cfg, a, out, err),
        Command::Eval(a) => eval(cfg, a, out, err),
        Command::Hash(a) => hash(cfg, a, out, err),
        Command::VerifyGeometry(a) => verify_geometry(cfg.data.seed, a, out, err),
        Command::Losscheck(a) => losscheck(cfg.train.seed, a, out, err),
    }
}

#[derive(Serialize)]
struct GenSummary {
    path: String,
    samples: usize,
    photos: usize,
    sketches: usize,
    classes: usize,
    dim: usize,
    anchor_radius: f64,
}

fn gen_data<W: Write, E: Write>(mut cfg: RunConfig, a: &GenDataArgs, out: &mut W, err: &mut E) -> Result<()> {
    let d = &mut cfg.data;
    d.classes = a.classes.unwrap_or(d.classes);
    d.per_class = a.per_class.unwrap_or(d.per_class);
    d.dim = a.dim.unwrap_or(d.dim);
    d.sigma = a.sigma.unwrap_or(d.sigma);
    d.domain_gain = a.gain.unwrap_or(d.domain_gain);
    d.anchor_radius = a.radius.or(d.anchor_radius);
    d.noise_seed = a.noise_seed.or(d.noise_seed);
    d.validate()?;
    let data = dataset::generate(d)?.samples;
    dataset::write_embeddings(&a.out, &data)?;
    let photos = data.domain(Domain::Photo).len();
    writeln!(err, "wrote {} samples ({} photo, {} sketch) to {}", data.len(), photos, data.len() - photos, a.out.display())?;
    emit(
        out,
        &GenSummary {
            path: a.out.display().to_string(),
            samples: data.len(),
            photos,
            sketches: data.len() - photos,
            classes: d.classes,
            dim: d.dim,
            anchor_radius: d.radius(),
        },
    )
}

#[derive(Serialize)]
struct TrainSummary {
    model: String,
    log: String,
    loss: LossConfig,
    steps: usize,
    classes: usize,
    final_loss: Option<f64>,
    training_samples: usize,
}

fn train<W: Write, E: Write>(mut cfg: RunConfig, a: &TrainArgs, out: &mut W, err: &mut E) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(kind) = a.loss {
        t.loss = LossConfig::with_defaults(kind);
    }
    if let Some(m) = a.m {
        t.loss.margin = m;
    }
    if let Some(s) = a.s {
        t.loss.scale = s;
    }
    t.steps = a.steps.unwrap_or(t.steps);
    t.lr = a.lr.unwrap_or(t.lr);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.weight_decay = a.weight_decay.unwrap_or(t.weight_decay);
    if let Some(h) = &a.hidden {
        t.hidden = h.clone();
    }
    t.embed_dim = a.embed_dim.unwrap_or(t.embed_dim);
    if let Some(p) = a.proto_mode {
        t.prototype_mode = match p {
            ProtoModeArg::Parameter => PrototypeMode::Parameter,
            ProtoModeArg::BatchMean => PrototypeMode::BatchMean,
        };
    }
    cfg.validate()?;

    let data = match &a.data {
        Some(p) => dataset::read_embeddings(p)?,
        None => dataset::generate(&cfg.data)?.samples,
    };
    let data = if a.holdout.is_empty() {
        data
    } else {
        split_zero_shot(&data, &SplitSpec::zero_shot(a.holdout.clone()))?.0
    };
    writeln!(err, "training {} on {} samples for {} steps", cfg.train.loss.kind, data.len(), cfg.train.steps)?;
    let result = training::train(&data, &cfg.train)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    ModelFile::from_output(&cfg.train, &result).save(&a.out)?;
    result.log.save_csv(&log_path)?;
    if let Some(l) = result.log.final_loss() {
        writeln!(err, "final batch loss {l:.6}")?;
    }
    emit(
        out,
        &TrainSummary {
            model: a.out.display().to_string(),
            log: log_path.display().to_string(),
            loss: cfg.train.loss,
            steps: cfg.train.steps,
            classes: result.prototypes.num_classes(),
            final_loss: result.log.final_loss(),
            training_samples: data.len(),
        },
    )
}

/// Queries and gallery for sketch-to-photo retrieval under the configured split.
fn retrieval_sets(emb: &EmbeddingBatch, mode: SplitMode, holdout: &[usize], full_gallery: bool) -> Result<(EmbeddingBatch, EmbeddingBatch)> {
    match mode {
        SplitMode::Standard => Ok((emb.domain(Domain::Sketch), emb.domain(Domain::Photo))),
        SplitMode::ZeroShot => {
            let (_, target) = split_zero_shot(emb, &SplitSpec::zero_shot(holdout.to_vec()))?;
            let gallery = if full_gallery { emb } else { &target };
            Ok((target.domain(Domain::Sketch), gallery.domain(Domain::Photo)))
        }
    }
}

fn eval<W: Write, E: Write>(mut cfg: RunConfig, a: &EvalArgs, out: &mut W, err: &mut E) -> Result<()> {
    let e = &mut cfg.eval;
    if let Some(m) = a.mode {
        e.mode = match m {
            ModeArg::Standard => SplitMode::Standard,
            ModeArg::ZeroShot => SplitMode::ZeroShot,
        };
    }
    if !a.holdout.is_empty() {
        e.holdout = a.holdout.clone();
    }
    if !a.p_at.is_empty() {
        e.p_at = a.p_at.clone();
    }
    e.top_k = a.top_k.or(e.top_k);
    e.full_gallery |= a.full_gallery;
    cfg.validate()?;

    let model = ModelFile::load(&a.model)?;
    let emb = model.embed(&dataset::read_embeddings(&a.data)?)?;
    if let Some(p) = &a.embeddings_out {
        dataset::write_embeddings(p, &emb)?;
    }
    let (queries, gallery) = retrieval_sets(&emb, cfg.eval.mode, &cfg.eval.holdout, cfg.eval.full_gallery)?;
    let opts = EvalOptions {
        top_k: cfg.eval.top_k,
        precision_at: cfg.eval.p_at.clone(),
    };
    let scores = retrieval::evaluate_euclidean(&queries, &gallery, &opts)?;
    let distances = if a.distances || a.histogram.is_some() {
        Some(retrieval::distance_report(&emb)?)
    } else {
        None
    };
    if let (Some(p), Some(d)) = (&a.histogram, &distances) {
        d.write_histogram_csv(std::fs::File::create(p)?)?;
    }
    writeln!(err, "{} queries, {} gallery items, MAP {:.4}", scores.queries, scores.gallery, scores.map)?;
    for p in &scores.precision {
        writeln!(err, "precision@{} {:.4}", p.k, p.value)?;
    }
    let mode = match cfg.eval.mode {
        SplitMode::Standard => "standard",
        SplitMode::ZeroShot => "zero-shot",
    };
    emit(out, &MetricsReport::new(mode, scores, distances.filter(|_| a.distances)))
}

#[derive(Serialize)]
struct HashSummary {
    bits: usize,
    terms: String,
    steps: usize,
    initial: HashLossTerms,
    #[serde(rename = "final")]
    final_terms: HashLossTerms,
    euclidean_map: f64,
    hamming_map: f64,
    distinct_prototype_codes: bool,
    codes: Option<String>,
}

fn hash<W: Write, E: Write>(mut cfg: RunConfig, a: &HashArgs, out: &mut W, err: &mut E) -> Result<()> {
    let h = &mut cfg.hash;
    h.bits = a.bits.unwrap_or(h.bits);
    h.terms = a.loss_terms.unwrap_or(h.terms);
    h.steps = a.steps.unwrap_or(h.steps);
    h.lr = a.lr.unwrap_or(h.lr);
    if !SUPPORTED_BITS.contains(&h.bits) {
        return Err(Error::InvalidParameter(format!(
            "--bits must be one of {SUPPORTED_BITS:?}, got {}",
            h.bits
        )));
    }
    cfg.validate()?;

    let model = ModelFile::load(&a.model)?;
    let train_emb = model.embed(&dataset::read_embeddings(&a.data)?)?;
    let test_emb = match &a.test {
        Some(p) => model.embed(&dataset::read_embeddings(p)?)?,
        None => train_emb.clone(),
    };
    writeln!(err, "training {}-bit hash ({}) for {} steps", cfg.hash.bits, cfg.hash.terms, cfg.hash.steps)?;
    let trained = hashing::train_hasher(&model.prototypes, Some(&train_emb), &cfg.hash)?;
    let ae = &trained.autoencoder;
    let queries = test_emb.domain(Domain::Sketch);
    let gallery = test_emb.domain(Domain::Photo);
    let euclidean_map = retrieval::mean_average_precision(&queries, &gallery)?;
    let hamming_map = retrieval::mean_average_precision_hamming(
        &HashCodes::encode(ae, &queries)?,
        &HashCodes::encode(ae, &gallery)?,
    )?;
    let protos = &model.prototypes;
    let codes = (0..protos.num_classes())
        .map(|j| encode_binary(ae, protos.center(j)))
        .collect::<Result<Vec<_>>>()?;
    let distinct = (0..codes.len()).all(|i| (0..i).all(|j| codes[i] != codes[j]));
    if let Some(p) = &a.out {
        hashing::write_codes(p, &HashCodes::encode(ae, &test_emb)?)?;
    }
    writeln!(err, "Euclidean MAP {euclidean_map:.4}, Hamming MAP {hamming_map:.4}")?;
    emit(
        out,
        &HashSummary {
            bits: cfg.hash.bits,
            terms: cfg.hash.terms.to_string(),
            steps: cfg.hash.steps,
            initial: trained.initial,
            final_terms: trained.final_terms,
            euclidean_map,
            hamming_map,
            distinct_prototype_codes: distinct,
            codes: a.out.as_deref().map(|p: &Path| p.display().to_string()),
        },
    )
}

fn verify_geometry<W: Write, E: Write>(seed: u64, a: &GeometryArgs, out: &mut W, err: &mut E) -> Result<()> {
    if !(a.m > 1.0 && a.m.is_finite()) {
        return Err(Error::InvalidParameter(format!("--m must be > 1 for decision regions, got {}", a.m)));
    }
    if a.classes < 2 || a.dim < 1 || a.samples < 1 {
        return Err(Error::InvalidParameter("need --classes >= 2, --dim >= 1 and --samples >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..a.classes * a.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let protos = PrototypeSet::new(Matrix::from_vec(a.classes, a.dim, data)?)?;
    let report = geometry::verify_p2(&protos, a.m, a.samples, seed)?;
    writeln!(err, "m = {}, {} classes, {} samples: {} violations", a.m, a.classes, report.samples_used, report.violations)?;
    emit(out, &report)
}

fn losscheck<W: Write, E: Write>(seed: u64, a: &LosscheckArgs, out: &mut W, err: &mut E) -> Result<()> {
    if !(a.h > 0.0 && a.h.is_finite()) {
        return Err(Error::InvalidParameter(format!("--h must be > 0, got {}", a.h)));
    }
    let kinds: Vec<LossKind> = match a.loss {
        LossSelection::All => LossKind::ALL.to_vec(),
        LossSelection::One(k) => vec![k],
    };
    #[derive(Serialize)]
    struct Row {
        #[serde(flatten)]
        report: GradCheckReport,
        scope: &'static str,
        tolerance: f64,
        pass: bool,
    }
    let mut rows = Vec::new();
    for kind in kinds {
        let cfg = LossConfig::with_defaults(kind);
        let inst = gradcheck::random_instance(&cfg, 8, 5, 4, seed);
        let mut reports = vec![("loss", gradcheck::grad_check(&cfg, &inst, a.h)?)];
        if a.encoder {
            let params = crate::encoder::init_params(&[6, 8, 5], 4, seed)?;
            let inputs = gradcheck::random_inputs(8, 6, 4, seed);
            reports.push(("encoder", gradcheck::encoder_grad_check(&params, &inputs, &cfg, &inst.head, a.h)?));
        }
        for (scope, report) in reports {
            let tolerance = gradcheck::tolerance(kind);
            let pass = report.max_rel_error <= tolerance;
            writeln!(
                err,
                "{:<13} {:<8} max rel err {:.3e} (tol {:.0e}) {}",
                kind.name(),
                scope,
                report.max_rel_error,
                tolerance,
                if pass { "ok" } else { "FAIL" }
            )?;
            rows.push(Row {
                report,
                scope,
                tolerance,
                pass,
            });
        }
    }
    emit(out, &rows)?;
    if rows.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(Error::InvalidParameter("gradient check exceeded tolerance".into()))
    }
}
