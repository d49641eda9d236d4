mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use manifest::RunManifest;
use stattn::clinical::ScoringTable;
use stattn::data::{
    generate_synthetic_cohort, load_cohort, preprocess, preprocess_with_layout, write_cohort, Modality,
    PreprocessOptions, ScalingTable, SynthConfig, DEFAULT_PREVALENCE, STATIC_FILE, VISITS_FILE,
};
use stattn::layers::Variant;
use stattn::metrics::{auc, roc_curve};
use stattn::training::{compare, cross_validate, load_checkpoint, save_checkpoint, score, CvData, Optimizer, TrainConfig};

const COHORT_FORMAT: &str = "\
COHORT FILES
  static.csv   patient_id,label,<static columns>
  visits.csv   patient_id,day_index,<longitudinal columns>
  Column headers are '<modality>:<name>' with modality one of labs, vitals
  (longitudinal) or demographic, history, imaging (static). history columns
  are 0/1 flags. label is 0/1 (1 = died by day 60). An empty cell is a
  missing value. Visits may appear in any order; they are sorted by
  day_index on load.";

const TRAIN_CONFIG_FORMAT: &str = "\
TRAINING CONFIG (--config, TOML; every key optional)
  variant = \"local-joint\"   epochs = 50        batch_size = 2
  lr_start = 0.001           lr_end = 0.00001   optimizer = \"adam\" | \"sgd\"
  seed = 0   window = 6   hidden = 32   attn_dim = 8   num_layers = 2
  folds = 5  val_fraction = 0.2
  Command-line flags override values from the file.";

#[derive(Parser)]
#[command(name = "stattn", version, about = "Recurrent models with joint spatiotemporal attention for longitudinal risk prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted short- and long-range signals.
    #[command(after_help = synth_help())]
    Synth(SynthArgs),
    /// Filter, normalize, impute and assemble per-patient feature matrices.
    #[command(after_help = preprocess_help())]
    Preprocess(PreprocessArgs),
    /// Cross-validate one model variant and save one checkpoint per fold.
    #[command(after_help = train_help())]
    Train(TrainArgs),
    /// Score a cohort with a saved checkpoint and report AUC.
    #[command(after_help = evaluate_help())]
    Evaluate(EvaluateArgs),
    /// Cross-validate several variants over several seeds and tabulate AUC.
    #[command(after_help = compare_help())]
    Compare(CompareArgs),
}

fn synth_help() -> String {
    format!(
        "OUTPUTS (in --out)\n  static.csv, visits.csv   the cohort\n  generator.toml           full generator config\n  truth.csv                patient_id,motif,long_range,severity,logit\n  manifest.json            run record\n\nGENERATOR CONFIG (--config, TOML; every key optional)\n  Keys mirror the generator settings, e.g. n_patients, visits_mean,\n  visits_sd, missing_rate, interleave, spike, event_length, motif_rate,\n  motif_reverse, motif_coef,\n  long_range_rate, long_range_coef, severity_coef, intercept, noise.\n\n{COHORT_FORMAT}"
    )
}

fn preprocess_help() -> String {
    format!(
        "OUTPUTS (in --out)\n  features.csv    patient_id,label,visit,<feature columns>, one row per visit,\n                  values in [0,1]\n  scaling.toml    [[variable]] tables with variable, min, max\n  manifest.json   run record\n\n{COHORT_FORMAT}"
    )
}

fn train_help() -> String {
    format!(
        "OUTPUTS (in --out)\n  cv_report.json      per-fold test AUC, mean AUC, best epochs\n  fold<k>.ckpt        selected checkpoint of fold k (binary, versioned)\n  scaling.toml        normalization table used for the features\n  train_config.toml   the effective training config\n  manifest.json       run record\n\n{TRAIN_CONFIG_FORMAT}\n\n{COHORT_FORMAT}"
    )
}

fn evaluate_help() -> String {
    format!(
        "OUTPUTS\n  Prints 'auc<TAB>value'. With --out: scores.csv (patient_id,label,score)\n  and manifest.json. With --roc: fpr,tpr points.\n\n{COHORT_FORMAT}"
    )
}

fn compare_help() -> String {
    format!(
        "OUTPUTS (in --out)\n  comparison.csv   variant,mean_auc,sd_auc,seed_<s>... sorted by mean AUC\n  manifest.json    run record\n\n{TRAIN_CONFIG_FORMAT}\n\n{COHORT_FORMAT}"
    )
}

#[derive(Args)]
struct SynthArgs {
    /// Number of patients.
    #[arg(long, default_value_t = 365, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Generator config (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Log-odds added by the forward-order motif.
    #[arg(long)]
    motif_coef: Option<f64>,
    /// Log-odds added when both the early and the late event occur.
    #[arg(long)]
    long_range_coef: Option<f64>,
    /// Log-odds per unit of admission severity.
    #[arg(long)]
    severity_coef: Option<f64>,
    /// Scale of the logistic label noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Set every planted coefficient to zero.
    #[arg(long)]
    null: bool,
}

#[derive(Args, Clone)]
struct FeatureArgs {
    /// Modalities to use: 'all' or a comma list of labs, vitals,
    /// demographic, history, imaging.
    #[arg(long, default_value = "all", value_parser = parse_modalities)]
    modalities: ModalitySet,
    /// Keep a longitudinal variable only if more than this fraction of
    /// patients have it.
    #[arg(long, default_value_t = DEFAULT_PREVALENCE)]
    prevalence: f64,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory holding static.csv and visits.csv.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    features: FeatureArgs,
}

#[derive(Args, Clone)]
struct TrainOverrides {
    /// Training config (TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    /// adam or sgd.
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<Optimizer>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Local-LSTM window length.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    attn_dim: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Scoring table for the clinical baseline (TOML). Defaults to the
    /// bundled synthetic table.
    #[arg(long)]
    clinical_table: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// clinical, lstm, lstm-temporal, lstm-joint or local-joint.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Normalization table; defaults to scaling.toml next to the checkpoint,
    /// else statistics of the evaluated cohort.
    #[arg(long)]
    scaling: Option<PathBuf>,
    /// Write ROC points here.
    #[arg(long)]
    roc: Option<PathBuf>,
    /// Write scores.csv and manifest.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma list of at least two variants.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant, required = true)]
    variants: Vec<Variant>,
    /// Comma list of seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    train: TrainOverrides,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: stattn::layers::LayerError| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<Optimizer, String> {
    match s {
        "adam" => Ok(Optimizer::Adam),
        "sgd" => Ok(Optimizer::Sgd),
        other => Err(format!("unknown optimizer {other:?} (expected adam or sgd)")),
    }
}

#[derive(Clone, Debug)]
struct ModalitySet(Vec<Modality>);

fn parse_modalities(s: &str) -> Result<ModalitySet, String> {
    if s == "all" {
        return Ok(ModalitySet(Modality::ALL.to_vec()));
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let m: Modality = part.trim().parse().map_err(|e: stattn::data::DataError| e.to_string())?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(ModalitySet(out))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cohort_inputs(m: &mut RunManifest, data: &Path) -> Result<()> {
    m.input(&data.join(STATIC_FILE))?;
    m.input(&data.join(VISITS_FILE))
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_toml(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
        None => SynthConfig::default(),
    };
    cfg.n_patients = usize::try_from(a.n)?;
    if let Some(x) = a.motif_coef {
        cfg.motif_coef = x;
    }
    if let Some(x) = a.long_range_coef {
        cfg.long_range_coef = x;
    }
    if let Some(x) = a.severity_coef {
        cfg.severity_coef = x;
    }
    if let Some(x) = a.noise {
        cfg.noise = x;
    }
    if a.null {
        cfg = cfg.null();
    }
    let mut m = RunManifest::start("synth", serde_json::to_value(&cfg)?, Some(a.seed));
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    let s = generate_synthetic_cohort(&cfg, a.seed)?;
    ensure_dir(&a.out)?;
    write_cohort(&s.cohort, &a.out)?;
    m.output(a.out.join(STATIC_FILE));
    m.output(a.out.join(VISITS_FILE));
    let gen = a.out.join("generator.toml");
    std::fs::write(&gen, cfg.to_toml()?)?;
    m.output(gen);
    let truth = a.out.join("truth.csv");
    let mut w = csv::Writer::from_path(&truth)?;
    w.write_record(["patient_id", "motif", "long_range", "severity", "logit"])?;
    for t in &s.truth {
        w.write_record([
            t.patient_id.clone(),
            t.motif.to_string(),
            t.long_range.to_string(),
            t.severity.to_string(),
            t.logit.to_string(),
        ])?;
    }
    w.flush()?;
    m.output(truth);
    let pos = s.cohort.records.iter().filter(|r| r.label).count();
    println!("wrote {} patients ({pos} positive) to {}", s.cohort.len(), a.out.display());
    m.finish(&a.out)?;
    Ok(())
}

fn preprocess_options(f: &FeatureArgs) -> PreprocessOptions {
    PreprocessOptions {
        prevalence: f.prevalence,
        modalities: f.modalities.0.clone(),
    }
}

fn run_preprocess(a: PreprocessArgs) -> Result<()> {
    let opts = preprocess_options(&a.features);
    let mut m = RunManifest::start("preprocess", serde_json::to_value(&opts)?, None);
    cohort_inputs(&mut m, &a.data)?;
    let cohort = load_cohort(&a.data)?;
    let p = preprocess(&cohort, &opts)?;
    ensure_dir(&a.out)?;
    let feats = a.out.join("features.csv");
    let mut w = csv::Writer::from_path(&feats)?;
    let names = p.sequences.first().map(|s| s.feature_names.clone()).unwrap_or_default();
    let mut head = vec!["patient_id".to_string(), "label".into(), "visit".into()];
    head.extend(names.iter().cloned());
    w.write_record(&head)?;
    for s in &p.sequences {
        for i in 0..s.len() {
            let mut row = vec![s.patient_id.clone(), u8::from(s.label).to_string(), i.to_string()];
            row.extend(s.row(i).iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    m.output(feats);
    let scaling = a.out.join("scaling.toml");
    std::fs::write(&scaling, p.scaling.to_toml()?)?;
    m.output(scaling);
    println!(
        "{} patients, {} features ({} longitudinal kept)",
        p.sequences.len(),
        names.len(),
        p.cohort.catalog.longitudinal().count()
    );
    m.finish(&a.out)?;
    Ok(())
}

fn train_config(base_variant: Option<Variant>, seed: Option<u64>, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match &o.config {
        Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = base_variant {
        cfg.variant = v;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(x) = o.$f { cfg.$f = x; })* };
    }
    set!(epochs, batch_size, lr_start, lr_end, optimizer, hidden, window, attn_dim, num_layers, folds);
    cfg.validate()?;
    Ok(cfg)
}

fn clinical_table(o: &TrainOverrides, m: &mut RunManifest) -> Result<ScoringTable> {
    match &o.clinical_table {
        Some(p) => {
            m.input(p)?;
            Ok(ScoringTable::load(p)?)
        }
        None => Ok(ScoringTable::example()),
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(a.variant, a.seed, &a.train)?;
    let opts = preprocess_options(&a.features);
    let mut m = RunManifest::start(
        "train",
        serde_json::json!({ "train": &cfg, "preprocess": &opts }),
        Some(cfg.seed),
    );
    cohort_inputs(&mut m, &a.data)?;
    if let Some(p) = &a.train.config {
        m.input(p)?;
    }
    let table = clinical_table(&a.train, &mut m)?;
    let cohort = load_cohort(&a.data)?;
    let p = preprocess(&cohort, &opts)?;
    let data = CvData {
        sequences: p.sequences,
        clinical: Some((cohort, table)),
    };
    let run = cross_validate(&data, &cfg)?;
    ensure_dir(&a.out)?;
    let report = a.out.join("cv_report.json");
    std::fs::write(&report, serde_json::to_string_pretty(&run.report)?)?;
    m.output(report);
    for (k, c) in run.checkpoints.iter().enumerate() {
        let path = a.out.join(format!("fold{k}.ckpt"));
        save_checkpoint(c, &path)?;
        m.output(path);
    }
    let scaling = a.out.join("scaling.toml");
    std::fs::write(&scaling, p.scaling.to_toml()?)?;
    m.output(scaling);
    let cfg_path = a.out.join("train_config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()?)?;
    m.output(cfg_path);
    for (k, a) in run.report.fold_auc.iter().enumerate() {
        println!("fold {k}\tauc {a:.4}\tbest epoch {}", run.report.best_epochs[k]);
    }
    println!("mean auc\t{:.4}", run.report.mean_auc);
    m.finish(&a.out)?;
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut m = RunManifest::start(
        "evaluate",
        serde_json::json!({ "checkpoint": &a.checkpoint, "train": &ckpt.train_config }),
        Some(ckpt.train_config.seed),
    );
    m.input(&a.checkpoint)?;
    cohort_inputs(&mut m, &a.data)?;
    let sibling = a.checkpoint.with_file_name("scaling.toml");
    let scaling_path = a.scaling.clone().or_else(|| sibling.exists().then_some(sibling));
    let scaling = match &scaling_path {
        Some(p) => {
            m.input(p)?;
            Some(ScalingTable::from_toml(&std::fs::read_to_string(p)?)?)
        }
        None => None,
    };
    let cohort = load_cohort(&a.data)?;
    let seqs = preprocess_with_layout(&cohort, &ckpt.feature_names, scaling.as_ref())?;
    let model = ckpt.model()?;
    let scores = score(&model, &seqs)?;
    let labels: Vec<bool> = seqs.iter().map(|s| s.label).collect();
    let value = auc(&scores, &labels)?;
    println!("auc\t{value:.6}");
    if let Some(path) = &a.roc {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["fpr", "tpr"])?;
        for (f, t) in roc_curve(&scores, &labels)? {
            w.write_record([f.to_string(), t.to_string()])?;
        }
        w.flush()?;
        m.output(path.clone());
    }
    if let Some(dir) = &a.out {
        ensure_dir(dir)?;
        let path = dir.join("scores.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["patient_id", "label", "score"])?;
        for (s, x) in seqs.iter().zip(&scores) {
            w.write_record([s.patient_id.clone(), u8::from(s.label).to_string(), x.to_string()])?;
        }
        w.flush()?;
        m.output(path);
        m.finish(dir)?;
    }
    Ok(())
}

fn run_compare(a: CompareArgs) -> Result<()> {
    if a.variants.len() < 2 {
        bail!("compare needs at least two variants");
    }
    let cfg = train_config(None, None, &a.train)?;
    let opts = preprocess_options(&a.features);
    let mut m = RunManifest::start(
        "compare",
        serde_json::json!({ "train": &cfg, "preprocess": &opts, "variants": &a.variants, "seeds": &a.seeds }),
        None,
    );
    cohort_inputs(&mut m, &a.data)?;
    if let Some(p) = &a.train.config {
        m.input(p)?;
    }
    let table = clinical_table(&a.train, &mut m)?;
    let cohort = load_cohort(&a.data)?;
    let p = preprocess(&cohort, &opts)?;
    let data = CvData {
        sequences: p.sequences,
        clinical: Some((cohort, table)),
    };
    let rows = compare(&data, &a.variants, &a.seeds, &cfg)?;
    ensure_dir(&a.out)?;
    let path = a.out.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut head = vec!["variant".to_string(), "mean_auc".into(), "sd_auc".into()];
    head.extend(a.seeds.iter().map(|s| format!("seed_{s}")));
    w.write_record(&head)?;
    for r in &rows {
        let mut row = vec![r.variant.to_string(), r.mean_auc.to_string(), r.sd_auc.to_string()];
        row.extend(r.per_seed.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
        println!("{:<14}\t{:.4} ± {:.4}", r.variant.name(), r.mean_auc, r.sd_auc);
    }
    w.flush()?;
    m.output(path);
    m.finish(&a.out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Preprocess(a) => run_preprocess(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Compare(a) => run_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
