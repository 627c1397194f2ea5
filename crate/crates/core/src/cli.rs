//! Command-line front end.
//!
//! Every verb reads an optional TOML run file with `[data]`, `[train]`,
//! `[synthetic]` and `[ablate]` sections, applies flag overrides, writes its
//! outputs plus the effective configuration (`config.toml`) into `--out`,
//! and maps failures to the exit codes below.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    format_triplets, generate_synthetic, load_feature_table, load_fitb, load_outfits, load_triplets, FitbSet,
    ItemTable, OutfitSet, SyntheticSpec, TripletSet, FEATURES_FILE, FITB_FILE, OUTFITS_FILE, TRIPLETS_FILE,
};
use crate::error::{read_file, write_file, Error, Result};
use crate::evaluation::{
    ablation_sweep, content_hash, evaluate, export_condition_embeddings, make_baseline, AblationAxis, BaselineKind,
    EvalData, EvalReport,
};
use crate::losses::gradient_suite;
use crate::model::SceModel;
use crate::training::{load_checkpoint, parse_checkpoint, save_checkpoint, split_triplets, train_best_of, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

pub const CONFIG_FILE: &str = "config.toml";
pub const EVAL_TRIPLETS_FILE: &str = "eval_triplets.txt";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.json";
pub const REPORT_FILE: &str = "report.tsv";
pub const EMBEDDINGS_FILE: &str = "condition_embeddings.tsv";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io(_) | Error::File { .. } => EXIT_IO,
        _ => EXIT_INPUT,
    }
}

/// Input file locations; relative paths are taken from the run file's
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub features: Option<PathBuf>,
    pub triplets: Option<PathBuf>,
    pub eval_triplets: Option<PathBuf>,
    pub outfits: Option<PathBuf>,
    pub fitb: Option<PathBuf>,
}

impl DataPaths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.features,
            &mut self.triplets,
            &mut self.eval_triplets,
            &mut self.outfits,
            &mut self.fitb,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Contents of a run file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub ablate: Option<AblationAxis>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::parse(text).map_err(|(line, msg)| match line {
            Some(line) => Error::Config(format!("line {line}: {msg}")),
            None => Error::Config(msg),
        })
    }

    fn parse(text: &str) -> std::result::Result<Self, (Option<usize>, String)> {
        toml::from_str(text).map_err(|e: toml::de::Error| {
            let line = e.span().map(|span| text[..span.start.min(text.len())].matches('\n').count() + 1);
            (line, e.message().trim().to_string())
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a run file and resolves its data paths.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&read_file(path)?).map_err(|(line, msg)| match line {
            Some(line) => Error::Config(format!("{}:{line}: {msg}", path.display())),
            None => Error::Config(format!("{}: {msg}", path.display())),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve(base);
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "scenet", version, about = "Condition-mask embedding networks: data generation, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, short, default_value = "scenet-out")]
    pub out: PathBuf,
    /// Overrides the training (or generator) seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DataFlags {
    /// Item table: id, category, visual features, optional text features.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Training triplets.
    #[arg(long)]
    pub triplets: Option<PathBuf>,
    /// Held-out triplets for the error rate.
    #[arg(long)]
    pub eval_triplets: Option<PathBuf>,
    /// Labelled outfits for compatibility AUC.
    #[arg(long)]
    pub outfits: Option<PathBuf>,
    /// Fill-in-the-blank questions.
    #[arg(long)]
    pub fitb: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Number of condition masks.
    #[arg(long)]
    pub conditions: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Fraction of training triplets replaced by random ones.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-condition dataset.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        items: Option<usize>,
        /// Number of latent conditions.
        #[arg(long)]
        conditions: Option<usize>,
        /// Share of triplets written to the held-out triplet file.
        #[arg(long, default_value_t = 0.1)]
        heldout: f64,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        flags: TrainFlags,
        /// Start from the encoder and masks of this checkpoint.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train one model per value of an ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        flags: TrainFlags,
        /// conditions, noise or train-size
        #[arg(long, requires = "values")]
        axis: Option<String>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Train and score the reference baselines.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        flags: TrainFlags,
        /// single-embedding, uniform-average, random-weights, fixed-disjoint or all
        #[arg(long, default_value = "all")]
        kind: String,
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Write every item's masked embedding under every condition.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of the objective's gradients.
    CheckGrads {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

/// Parses `args`, runs the verb and returns the process exit code. Failures
/// print one diagnostic line on stderr.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            print!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("scenet: {e}");
            exit_code(&e)
        }
    }
}

/// Runs one verb; the returned text is what the binary prints on success.
pub fn run(command: Command) -> Result<String> {
    match command {
        Command::GenSynthetic {
            common,
            items,
            conditions,
            heldout,
        } => gen_synthetic(common, items, conditions, heldout),
        Command::Train {
            common,
            data,
            flags,
            init_from,
        } => run_train(common, data, flags, init_from),
        Command::Eval {
            common,
            data,
            checkpoint,
        } => run_eval(common, data, checkpoint),
        Command::Ablate {
            common,
            data,
            flags,
            axis,
            values,
        } => run_ablate(common, data, flags, axis, values),
        Command::Baseline {
            common,
            data,
            flags,
            kind,
            init_from,
        } => run_baseline(common, data, flags, &kind, init_from),
        Command::ExportEmbeddings {
            common,
            data,
            checkpoint,
        } => run_export(common, data, checkpoint),
        Command::CheckGrads { common, eps, tol } => run_check_grads(common, eps, tol),
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn apply_data(cfg: &mut RunConfig, flags: DataFlags) {
    let d = &mut cfg.data;
    for (slot, flag) in [
        (&mut d.features, flags.features),
        (&mut d.triplets, flags.triplets),
        (&mut d.eval_triplets, flags.eval_triplets),
        (&mut d.outfits, flags.outfits),
        (&mut d.fitb, flags.fitb),
    ] {
        if flag.is_some() {
            *slot = flag;
        }
    }
}

fn apply_train(cfg: &mut RunConfig, common: &Common, flags: &TrainFlags) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = common.seed {
        t.seed = v;
    }
    if let Some(v) = flags.conditions {
        t.conditions = v;
    }
    if let Some(v) = flags.embed_dim {
        t.embed_dim = v;
    }
    if let Some(v) = flags.epochs {
        t.epochs = v;
    }
    if let Some(v) = flags.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = flags.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = flags.margin {
        t.loss.margin = v;
    }
    if let Some(v) = flags.noise {
        t.noise_fraction = v;
    }
    t.validate()
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|source| Error::File {
        path: out.display().to_string(),
        source,
    })
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_file(&out.join(CONFIG_FILE), cfg.to_toml()?)
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} file given (set data.{what} or pass --{})", what.replace('_', "-"))))
}

/// Loaded inputs plus the content hash of each file, for report metadata.
struct Loaded {
    items: ItemTable,
    triplets: Option<TripletSet>,
    eval_triplets: Option<TripletSet>,
    outfits: Option<OutfitSet>,
    fitb: Option<FitbSet>,
    hashes: Vec<(String, String)>,
}

impl Loaded {
    fn read(paths: &DataPaths) -> Result<Self> {
        let features = required(&paths.features, "features")?;
        let mut hashes = vec![("features_sha256".to_string(), content_hash(&read_file(features)?))];
        let items = load_feature_table(features)?;
        let mut hash = |name: &str, p: &Path| -> Result<()> {
            hashes.push((format!("{name}_sha256"), content_hash(&read_file(p)?)));
            Ok(())
        };
        let mut triplets = None;
        let mut eval_triplets = None;
        let mut outfits = None;
        let mut fitb = None;
        if let Some(p) = &paths.triplets {
            hash("triplets", p)?;
            triplets = Some(load_triplets(p, &items)?);
        }
        if let Some(p) = &paths.eval_triplets {
            hash("eval_triplets", p)?;
            eval_triplets = Some(load_triplets(p, &items)?);
        }
        if let Some(p) = &paths.outfits {
            hash("outfits", p)?;
            outfits = Some(load_outfits(p, &items)?);
        }
        if let Some(p) = &paths.fitb {
            hash("fitb", p)?;
            fitb = Some(load_fitb(p, &items)?);
        }
        Ok(Loaded {
            items,
            triplets,
            eval_triplets,
            outfits,
            fitb,
            hashes,
        })
    }

    fn eval_data(&self) -> EvalData<'_> {
        EvalData {
            items: &self.items,
            triplets: self.eval_triplets.as_ref(),
            outfits: self.outfits.as_ref(),
            fitb: self.fitb.as_ref(),
        }
    }

    fn has_eval_data(&self) -> bool {
        self.eval_triplets.is_some() || self.outfits.is_some() || self.fitb.is_some()
    }

    fn training_triplets(&self) -> Result<&TripletSet> {
        self.triplets
            .as_ref()
            .ok_or_else(|| Error::Config("no triplets file given (set data.triplets or pass --triplets)".into()))
    }

    fn stamp(&self, report: &mut EvalReport) {
        for (k, v) in &self.hashes {
            report.meta(k.clone(), v);
        }
    }
}

fn write_report(report: &EvalReport, out: &Path) -> Result<String> {
    let text = report.to_tsv();
    write_file(&out.join(REPORT_FILE), &text)?;
    Ok(text)
}

fn gen_synthetic(common: Common, items: Option<usize>, conditions: Option<usize>, heldout: f64) -> Result<String> {
    let mut cfg = base_config(&common)?;
    let spec = &mut cfg.synthetic;
    if let Some(v) = items {
        spec.items = v;
    }
    if let Some(v) = conditions {
        spec.conditions = v;
    }
    if let Some(v) = common.seed {
        spec.seed = v;
    }
    if !(0.0..1.0).contains(&heldout) {
        return Err(Error::Config(format!("--heldout must lie in [0, 1), got {heldout}")));
    }
    let data = generate_synthetic(&cfg.synthetic)?;
    prepare_out(&common.out)?;
    data.write_to_dir(&common.out)?;
    let (train_set, held) = split_triplets(&data.triplets, heldout, cfg.synthetic.seed);
    write_file(&common.out.join(TRIPLETS_FILE), format_triplets(&train_set, &data.items))?;
    write_file(&common.out.join(EVAL_TRIPLETS_FILE), format_triplets(&held, &data.items))?;

    cfg.data = DataPaths {
        features: Some(FEATURES_FILE.into()),
        triplets: Some(TRIPLETS_FILE.into()),
        eval_triplets: Some(EVAL_TRIPLETS_FILE.into()),
        outfits: Some(OUTFITS_FILE.into()),
        fitb: Some(FITB_FILE.into()),
    };
    echo_config(&cfg, &common.out)?;
    Ok(format!(
        "wrote {} items, {} training and {} held-out triplets, {} outfits, {} FITB questions to {}\n",
        data.items.len(),
        train_set.len(),
        held.len(),
        data.outfits.records.len(),
        data.fitb.len(),
        common.out.display()
    ))
}

fn warm_start(model: &mut SceModel, init: Option<&SceModel>) -> Result<()> {
    if let Some(init) = init {
        model.transfer_from(init)?;
    }
    Ok(())
}

fn run_train(common: Common, data: DataFlags, flags: TrainFlags, init_from: Option<PathBuf>) -> Result<String> {
    let mut cfg = base_config(&common)?;
    apply_data(&mut cfg, data);
    apply_train(&mut cfg, &common, &flags)?;
    let loaded = Loaded::read(&cfg.data)?;
    let init = init_from.map(load_checkpoint).transpose()?;
    let (model, history) = train_best_of(&loaded.items, loaded.training_triplets()?, &cfg.train, |seed| {
        let mut model = cfg.train.build_model_seeded(&loaded.items, seed)?;
        warm_start(&mut model, init.as_ref())?;
        Ok(model)
    })?;

    prepare_out(&common.out)?;
    save_checkpoint(&model, common.out.join(CHECKPOINT_FILE))?;
    let history_text = serde_json::to_string_pretty(&history).map_err(|e| Error::Input(e.to_string()))?;
    write_file(&common.out.join(HISTORY_FILE), history_text)?;
    echo_config(&cfg, &common.out)?;

    let mut summary = format!(
        "trained {} epochs, final loss {:.6}\n",
        history.epochs.len(),
        history.final_loss().unwrap_or(f64::NAN)
    );
    if loaded.has_eval_data() {
        let mut report = evaluate(&model, loaded.eval_data(), cfg.train.weighting(), "")?;
        report.meta("verb", "train");
        report.meta("seed", cfg.train.seed);
        loaded.stamp(&mut report);
        summary.push_str(&write_report(&report, &common.out)?);
    }
    Ok(summary)
}

fn run_eval(common: Common, data: DataFlags, checkpoint: PathBuf) -> Result<String> {
    let mut cfg = base_config(&common)?;
    apply_data(&mut cfg, data);
    let loaded = Loaded::read(&cfg.data)?;
    if !loaded.has_eval_data() {
        return Err(Error::Config("eval needs eval_triplets, outfits or fitb".into()));
    }
    let text = read_file(&checkpoint)?;
    let model = parse_checkpoint(&text, Some(&checkpoint))?;
    if common.config.is_some() {
        model.ensure_matches(&cfg.train.model_config(&loaded.items)?)?;
    }
    let weighting = model.config.branch_mode.default_weighting();
    let mut report = evaluate(&model, loaded.eval_data(), weighting, "")?;
    report.meta("verb", "eval");
    report.meta("checkpoint_sha256", content_hash(&text));
    loaded.stamp(&mut report);
    prepare_out(&common.out)?;
    echo_config(&cfg, &common.out)?;
    write_report(&report, &common.out)
}

fn parse_axis(name: &str, values: &[String]) -> Result<AblationAxis> {
    fn list<T: std::str::FromStr>(values: &[String]) -> Result<Vec<T>> {
        values
            .iter()
            .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad ablation value `{v}`"))))
            .collect()
    }
    match name {
        "conditions" => Ok(AblationAxis::Conditions(list(values)?)),
        "noise" => Ok(AblationAxis::Noise(list(values)?)),
        "train-size" | "train_size" => Ok(AblationAxis::TrainSize(list(values)?)),
        other => Err(Error::Config(format!("unknown ablation axis `{other}`"))),
    }
}

fn run_ablate(
    common: Common,
    data: DataFlags,
    flags: TrainFlags,
    axis: Option<String>,
    values: Vec<String>,
) -> Result<String> {
    let mut cfg = base_config(&common)?;
    apply_data(&mut cfg, data);
    apply_train(&mut cfg, &common, &flags)?;
    if let Some(name) = axis {
        cfg.ablate = Some(parse_axis(&name, &values)?);
    }
    let axis = cfg
        .ablate
        .clone()
        .ok_or_else(|| Error::Config("no ablation axis (set [ablate] or pass --axis and --values)".into()))?;
    let loaded = Loaded::read(&cfg.data)?;
    if !loaded.has_eval_data() {
        return Err(Error::Config("ablate needs eval_triplets, outfits or fitb".into()));
    }
    let mut report = ablation_sweep(
        &cfg.train,
        &axis,
        loaded.training_triplets()?,
        loaded.eval_data(),
        cfg.train.seed,
    )?;
    report.meta("verb", "ablate");
    loaded.stamp(&mut report);
    prepare_out(&common.out)?;
    echo_config(&cfg, &common.out)?;
    write_report(&report, &common.out)
}

fn parse_kinds(kind: &str) -> Result<Vec<BaselineKind>> {
    if kind == "all" {
        return Ok(BaselineKind::ALL.to_vec());
    }
    kind.split(',')
        .map(|k| {
            BaselineKind::ALL
                .into_iter()
                .find(|b| b.name() == k.trim())
                .ok_or_else(|| Error::Config(format!("unknown baseline `{k}`")))
        })
        .collect()
}

fn run_baseline(
    common: Common,
    data: DataFlags,
    flags: TrainFlags,
    kind: &str,
    init_from: Option<PathBuf>,
) -> Result<String> {
    let mut kinds = parse_kinds(kind)?;
    let mut cfg = base_config(&common)?;
    apply_data(&mut cfg, data);
    apply_train(&mut cfg, &common, &flags)?;
    let loaded = Loaded::read(&cfg.data)?;
    if !loaded.has_eval_data() {
        return Err(Error::Config("baseline needs eval_triplets, outfits or fitb".into()));
    }
    let triplets = loaded.training_triplets()?;
    let reference = cfg.train.model_config(&loaded.items)?;
    let labels = triplets.condition_labels();
    let labelled = |set: &TripletSet| set.records.iter().all(|t| t.condition.is_some());
    let disjoint_ok = labelled(triplets) && loaded.eval_triplets.as_ref().is_some_and(labelled);
    let init = init_from.map(load_checkpoint).transpose()?;

    prepare_out(&common.out)?;
    let mut report = EvalReport::new();
    report.meta("verb", "baseline");
    report.meta("seed", cfg.train.seed);
    loaded.stamp(&mut report);
    if kind == "all" && !disjoint_ok {
        kinds.retain(|k| *k != BaselineKind::FixedDisjoint);
        report.meta("skipped", "fixed-disjoint (needs labelled training and eval triplets)");
    }
    for kind in kinds {
        let (model, _) = train_best_of(&loaded.items, triplets, &cfg.train, |seed| {
            let mut model = make_baseline(kind, &reference, seed, &labels)?;
            warm_start(&mut model, init.as_ref())?;
            Ok(model)
        })?;
        save_checkpoint(&model, common.out.join(format!("baseline-{}.json", kind.name())))?;
        // Label-routed masks can only score records that carry a label.
        let eval = if kind == BaselineKind::FixedDisjoint {
            EvalData {
                outfits: None,
                fitb: None,
                ..loaded.eval_data()
            }
        } else {
            loaded.eval_data()
        };
        let row = evaluate(&model, eval, cfg.train.weighting(), "")?;
        for (name, v) in row.metrics {
            report.push(format!("{name}[baseline={}]", kind.name()), v)?;
        }
    }
    echo_config(&cfg, &common.out)?;
    write_report(&report, &common.out)
}

fn run_export(common: Common, data: DataFlags, checkpoint: PathBuf) -> Result<String> {
    let mut cfg = base_config(&common)?;
    apply_data(&mut cfg, data);
    let items = load_feature_table(required(&cfg.data.features, "features")?)?;
    let model = load_checkpoint(&checkpoint)?;
    prepare_out(&common.out)?;
    let path = common.out.join(EMBEDDINGS_FILE);
    export_condition_embeddings(&model, &items, &path)?;
    echo_config(&cfg, &common.out)?;
    Ok(format!(
        "wrote {} rows to {}\n",
        items.len() * model.conditions(),
        path.display()
    ))
}

fn run_check_grads(common: Common, eps: f64, tol: f64) -> Result<String> {
    let seed = common.seed.unwrap_or(0);
    let cases = gradient_suite(seed, eps, tol)?;
    let mut report = EvalReport::new();
    report.meta("verb", "check-grads");
    report.meta("seed", seed);
    report.meta("eps", eps);
    report.meta("tol", tol);
    let mut failed = Vec::new();
    for c in &cases {
        let label = format!("max_rel_error[mode={},vse_sim={}]", c.mode.name(), c.use_vse_sim);
        report.push(label.clone(), c.report.max_rel_error())?;
        if !c.report.passed() {
            failed.push(label);
        }
    }
    prepare_out(&common.out)?;
    let text = write_report(&report, &common.out)?;
    if !failed.is_empty() {
        return Err(Error::Numeric(format!("gradient check failed: {}", failed.join(", "))));
    }
    Ok(text)
}
