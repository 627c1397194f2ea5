//! Minibatch training with Adam, validation snapshots and checkpoints.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{inject_noise, ItemTable, TripletSet};
use crate::error::{read_file, write_file, Error, Result};
use crate::evaluation::triplet_error_rate;
use crate::losses::{total_objective, LossWeights, ObjectiveOptions};
use crate::math::{Matrix, ParamSet};
use crate::model::{BranchMode, ModelConfig, SceModel, Weighting};

/// Everything needed to build and train a model, readable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of condition masks.
    pub conditions: usize,
    pub embed_dim: usize,
    pub branch_mode: BranchMode,
    /// Defaults to the branch mode's natural weighting.
    pub weighting: Option<Weighting>,
    /// Hidden widths of the weight branch; defaults to `[2M, 2M]`.
    pub branch_hidden: Option<Vec<usize>>,
    pub encoder_hidden: Vec<usize>,
    pub loss: LossWeights,
    pub use_vse_sim: bool,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of training triplets replaced by random ones before training.
    pub noise_fraction: f64,
    /// Fraction of triplets held out (clean) for validation snapshots.
    pub validation_fraction: f64,
    /// Epochs between validation snapshots; 0 disables them.
    pub eval_every: usize,
    /// Independent initialisations tried by [`train_best_of`]. The one with
    /// the lowest final validation error is kept.
    pub restarts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            conditions: 4,
            embed_dim: 16,
            branch_mode: BranchMode::PairVisual,
            weighting: None,
            branch_hidden: None,
            encoder_hidden: Vec::new(),
            loss: LossWeights::default(),
            use_vse_sim: false,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            noise_fraction: 0.0,
            validation_fraction: 0.0,
            eval_every: 1,
            restarts: 1,
        }
    }
}

impl TrainConfig {
    pub fn weighting(&self) -> Weighting {
        self.weighting.unwrap_or_else(|| self.branch_mode.default_weighting())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions == 0 || self.embed_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("conditions, embed_dim and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(Error::Config(format!("noise_fraction must lie in [0, 1], got {}", self.noise_fraction)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if self.restarts > 1 && self.validation_fraction == 0.0 {
            return Err(Error::Config("restarts > 1 needs a positive validation_fraction".into()));
        }
        self.adam().validate()?;
        self.loss.validate()
    }

    /// Model shape for the given item table.
    pub fn model_config(&self, items: &ItemTable) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(items.feature_dim(), self.embed_dim, self.conditions, self.branch_mode);
        if let Some(h) = &self.branch_hidden {
            cfg.branch_hidden = h.clone();
        }
        cfg.encoder_hidden = self.encoder_hidden.clone();
        if self.branch_mode.uses_text() || self.use_vse_sim {
            let t = items
                .text_dim()
                .ok_or_else(|| Error::Input("this configuration needs text features but the items have none".into()))?;
            cfg.text_dim = Some(t);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Freshly initialised model for `items`, seeded from `seed`.
    pub fn build_model(&self, items: &ItemTable) -> Result<SceModel> {
        self.build_model_seeded(items, self.seed)
    }

    pub fn build_model_seeded(&self, items: &ItemTable, seed: u64) -> Result<SceModel> {
        SceModel::new(self.model_config(items)?, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Per-parameter first and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter; gradients
/// are zeroed afterwards. Frozen parameters are left untouched.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract("optimizer state does not match the parameter set".into()));
    }
    for p in params.iter() {
        if !p.grad().is_finite() {
            return Err(Error::Numeric(format!("gradient of `{}` is not finite", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (state.m[i].as_mut_slice(), state.v[i].as_mut_slice());
        let g = p.grad().as_slice().to_vec();
        let values = p.value.as_mut_slice();
        for k in 0..g.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            values[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    params.zero_grads();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective over the epoch's minibatches.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub validation_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Objective over the training set before the first update.
    pub initial_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub snapshots: Vec<Snapshot>,
    pub wall_clock_secs: f64,
    /// Final validation error of every restart, in seed order. Empty for a
    /// single run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub restart_errors: Vec<f64>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Deterministic shuffled split; returns `(train, held_out)`.
pub fn split_triplets(set: &TripletSet, held_out_fraction: f64, seed: u64) -> (TripletSet, TripletSet) {
    let n = set.len();
    let k = (held_out_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    order.shuffle(&mut rng);
    let (held, train) = order.split_at(k.min(n));
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        TripletSet::new(idx.into_iter().map(|i| set.records[i].clone()).collect())
    };
    (pick(train), pick(held))
}

fn annotate(err: Error, epoch: usize, batch: usize) -> Error {
    let at = |m: String| format!("epoch {epoch}, batch {batch}: {m}");
    match err {
        Error::Numeric(m) => Error::Numeric(at(m)),
        Error::Input(m) => Error::Input(at(m)),
        Error::Contract(m) => Error::Contract(at(m)),
        other => other,
    }
}

fn objective_options(config: &TrainConfig) -> ObjectiveOptions {
    ObjectiveOptions {
        weighting: config.weighting(),
        use_vse_sim: config.use_vse_sim,
    }
}

/// Mean objective over `triplets` without touching gradients.
pub fn mean_objective(model: &mut SceModel, items: &ItemTable, triplets: &TripletSet, config: &TrainConfig) -> Result<f64> {
    let opts = objective_options(config);
    let mut sum = 0.0;
    for chunk in triplets.records.chunks(config.batch_size) {
        let r = total_objective(model, items, chunk, &config.loss, opts, false)?;
        sum += r.total * chunk.len() as f64;
    }
    Ok(sum / triplets.len() as f64)
}

/// Trains `model` on `triplets`.
///
/// A `validation_fraction` share of the triplets is held out first; noise is
/// then injected once into the remaining training triplets. Each epoch is a
/// single shuffled pass over all training triplets.
pub fn train(
    model: SceModel,
    items: &ItemTable,
    triplets: &TripletSet,
    config: &TrainConfig,
) -> Result<(SceModel, TrainHistory)> {
    let (model, history, _) = train_run(model, items, triplets, config, config.seed)?;
    Ok((model, history))
}

/// Trains `config.restarts` models built by `build` from seeds `seed`,
/// `seed + 1`, ... and keeps the one with the lowest validation error after
/// the last epoch (the earliest on ties). Every restart sees the same
/// validation split and the same noisy training set; only the
/// initialisation and the shuffle order change. With one restart this is
/// [`train`] on `build(seed)`.
pub fn train_best_of(
    items: &ItemTable,
    triplets: &TripletSet,
    config: &TrainConfig,
    mut build: impl FnMut(u64) -> Result<SceModel>,
) -> Result<(SceModel, TrainHistory)> {
    config.validate()?;
    if config.restarts == 1 || config.epochs == 0 {
        return train(build(config.seed)?, items, triplets, config);
    }
    let mut best: Option<(f64, SceModel, TrainHistory)> = None;
    let mut errors = Vec::with_capacity(config.restarts);
    for r in 0..config.restarts {
        let seed = config.seed.wrapping_add(r as u64);
        let (model, history, validation) = train_run(build(seed)?, items, triplets, config, seed)?;
        let err = triplet_error_rate(&model, items, &validation, config.weighting())?;
        errors.push(err);
        if best.as_ref().is_none_or(|(b, _, _)| err < *b) {
            best = Some((err, model, history));
        }
    }
    let (_, model, mut history) = best.expect("at least one restart");
    history.restart_errors = errors;
    Ok((model, history))
}

/// [`train`] with the minibatch order drawn from `shuffle_seed`; also returns
/// the validation split.
fn train_run(
    mut model: SceModel,
    items: &ItemTable,
    triplets: &TripletSet,
    config: &TrainConfig,
    shuffle_seed: u64,
) -> Result<(SceModel, TrainHistory, TripletSet)> {
    config.validate()?;
    let started = Instant::now();
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((model, history, TripletSet::default()));
    }
    if triplets.is_empty() {
        return Err(Error::Input("no training triplets".into()));
    }
    for t in &triplets.records {
        if t.items().iter().any(|&i| i >= items.len()) {
            return Err(Error::Input("triplet refers to an item outside the table".into()));
        }
    }
    let opts = objective_options(config);
    model.check_weighting(opts.weighting)?;

    let (train_set, validation) = if config.validation_fraction > 0.0 {
        split_triplets(triplets, config.validation_fraction, config.seed)
    } else {
        (triplets.clone(), TripletSet::default())
    };
    if train_set.is_empty() {
        return Err(Error::Input("validation split leaves no training triplets".into()));
    }
    let train_set = inject_noise(&train_set, config.noise_fraction, items, config.seed.wrapping_add(1))?;

    model.params.zero_grads();
    history.initial_loss = Some(mean_objective(&mut model, items, &train_set, config)?);

    let adam = config.adam();
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set.records[i].clone()));
            let r = total_objective(&mut model, items, &batch, &config.loss, opts, true)
                .map_err(|e| annotate(e, epoch, b))?;
            if !r.total.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}, batch {b}: objective is {}", r.total)));
            }
            loss_sum += r.total * chunk.len() as f64;
            adam_step(&mut model.params, &mut state, &adam).map_err(|e| annotate(e, epoch, b))?;
        }
        for p in model.params.iter() {
            if !p.value.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}: parameter `{}` became non-finite", p.name)));
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / train_set.len() as f64,
        });
        if config.eval_every > 0 && !validation.is_empty() && epoch % config.eval_every == 0 {
            history.snapshots.push(Snapshot {
                epoch,
                validation_error: triplet_error_rate(&model, items, &validation, opts.weighting)?,
            });
        }
    }
    history.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((model, history, validation))
}

// ---------------------------------------------------------------------------
// checkpoints

pub const CHECKPOINT_FORMAT: &str = "scenet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format: &'a str,
    version: u32,
    model: &'a SceModel,
}

#[derive(Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
}

#[derive(Deserialize)]
struct CheckpointIn {
    model: SceModel,
}

pub fn checkpoint_to_string(model: &SceModel) -> Result<String> {
    let out = CheckpointOut {
        format: CHECKPOINT_FORMAT,
        version: CHECKPOINT_VERSION,
        model,
    };
    serde_json::to_string_pretty(&out).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn checkpoint_from_str(text: &str) -> Result<SceModel> {
    parse_checkpoint(text, None)
}

/// Like [`checkpoint_from_str`]; `origin` names the file in error messages.
pub fn parse_checkpoint(text: &str, origin: Option<&Path>) -> Result<SceModel> {
    let located = |what: &str, e: serde_json::Error| match origin {
        Some(p) => Error::Checkpoint(format!("{}:{}: {what} checkpoint: {e}", p.display(), e.line())),
        None => Error::Checkpoint(format!("{what} checkpoint: {e}")),
    };
    let header: CheckpointHeader = serde_json::from_str(text).map_err(|e| located("unreadable", e))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        let prefix = origin.map(|p| format!("{}: ", p.display())).unwrap_or_default();
        return Err(Error::Checkpoint(format!(
            "{prefix}unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let CheckpointIn { mut model } =
        serde_json::from_str(text).map_err(|e| located("malformed", e))?;
    model.validate()?;
    model.params.zero_grads();
    Ok(model)
}

pub fn save_checkpoint(model: &SceModel, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), checkpoint_to_string(model)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SceModel> {
    let path = path.as_ref();
    parse_checkpoint(&read_file(path)?, Some(path))
}

/// Loads a checkpoint and checks it against an expected model shape.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<SceModel> {
    let model = load_checkpoint(path)?;
    model.ensure_matches(expected)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::math::Param;

    fn quadratic_params() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("x", Matrix::from_vec(3, 1, vec![0.0, 0.0, 0.0]).unwrap());
        ps
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut ps = quadratic_params();
        let before = ps.value(crate::math::ParamId(0)).clone();
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &mut st, &TrainConfig::default().adam()).unwrap();
        assert_eq!(ps.value(crate::math::ParamId(0)), &before);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut ps = quadratic_params();
        let g = [0.3, -2.0, 1e-3];
        ps.iter_mut().next().unwrap().grad_mut().as_mut_slice().copy_from_slice(&g);
        let cfg = AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &mut st, &cfg).unwrap();
        let p = ps.iter().next().unwrap();
        for (x, gk) in p.value.as_slice().iter().zip(g) {
            assert!((x + 0.01 * gk.signum()).abs() < 1e-6, "{x}");
        }
        assert!(p.grad().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(x) = sum_k a_k (x_k - c_k)^2, minimiser c
        let a = [1.0, 4.0, 0.5];
        let c = [0.7, -0.3, 0.25];
        let mut ps = quadratic_params();
        let cfg = AdamConfig {
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut st = AdamState::new(&ps);
        for _ in 0..500 {
            let p: &mut Param = ps.iter_mut().next().unwrap();
            let x = p.value.as_slice().to_vec();
            let g = p.grad_mut().as_mut_slice();
            for k in 0..3 {
                g[k] = 2.0 * a[k] * (x[k] - c[k]);
            }
            adam_step(&mut ps, &mut st, &cfg).unwrap();
        }
        let x = ps.iter().next().unwrap().value.as_slice().to_vec();
        for k in 0..3 {
            assert!((x[k] - c[k]).abs() < 1e-3, "{x:?}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut ps = quadratic_params();
        ps.iter_mut().next().unwrap().grad_mut().as_mut_slice()[1] = f64::NAN;
        let mut st = AdamState::new(&ps);
        let err = adam_step(&mut ps, &mut st, &TrainConfig::default().adam()).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("`x`")));
    }

    #[test]
    fn adam_skips_frozen_parameters() {
        let mut ps = quadratic_params();
        let p = ps.iter_mut().next().unwrap();
        p.trainable = false;
        p.grad_mut().fill(1.0);
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &mut st, &TrainConfig::default().adam()).unwrap();
        assert!(ps.iter().next().unwrap().value.as_slice().iter().all(|&v| v == 0.0));
    }

    fn small_data(k: usize) -> crate::data::SyntheticData {
        generate_synthetic(&SyntheticSpec {
            conditions: k,
            items: 240,
            triplets: 1200,
            feature_dim: 16,
            latent_dim: 4 * k,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            conditions: 2,
            embed_dim: 8,
            epochs: 8,
            batch_size: 32,
            learning_rate: 5e-3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let d = small_data(2);
        let cfg = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let model = cfg.build_model(&d.items).unwrap();
        let before = checkpoint_to_string(&model).unwrap();
        let (after, history) = train(model, &d.items, &d.triplets, &cfg).unwrap();
        assert_eq!(checkpoint_to_string(&after).unwrap(), before);
        assert!(history.epochs.is_empty() && history.snapshots.is_empty() && history.initial_loss.is_none());
    }

    #[test]
    fn training_is_deterministic() {
        let d = small_data(2);
        let cfg = TrainConfig {
            epochs: 2,
            noise_fraction: 0.1,
            validation_fraction: 0.1,
            ..small_config()
        };
        let run = || {
            let (m, h) = train(cfg.build_model(&d.items).unwrap(), &d.items, &d.triplets, &cfg).unwrap();
            (checkpoint_to_string(&m).unwrap(), h.epochs, h.snapshots)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn one_restart_is_plain_training() {
        let d = small_data(2);
        let cfg = TrainConfig {
            epochs: 2,
            validation_fraction: 0.1,
            ..small_config()
        };
        let (a, ha) = train(cfg.build_model(&d.items).unwrap(), &d.items, &d.triplets, &cfg).unwrap();
        let (b, hb) = train_best_of(&d.items, &d.triplets, &cfg, |s| cfg.build_model_seeded(&d.items, s)).unwrap();
        assert_eq!(checkpoint_to_string(&a).unwrap(), checkpoint_to_string(&b).unwrap());
        assert_eq!(ha.epochs, hb.epochs);
        assert!(hb.restart_errors.is_empty());
    }

    #[test]
    fn restarts_keep_the_lowest_validation_error() {
        let d = small_data(2);
        let cfg = TrainConfig {
            epochs: 2,
            validation_fraction: 0.2,
            noise_fraction: 0.1,
            restarts: 3,
            ..small_config()
        };
        let mut seeds = Vec::new();
        let (best, h) = train_best_of(&d.items, &d.triplets, &cfg, |s| {
            seeds.push(s);
            cfg.build_model_seeded(&d.items, s)
        })
        .unwrap();
        assert_eq!(seeds, vec![11, 12, 13]);
        assert_eq!(h.restart_errors.len(), 3);

        let (_, validation) = split_triplets(&d.triplets, cfg.validation_fraction, cfg.seed);
        let mut expected = Vec::new();
        for &s in &seeds {
            let (m, _, v) = train_run(cfg.build_model_seeded(&d.items, s).unwrap(), &d.items, &d.triplets, &cfg, s).unwrap();
            assert_eq!(v, validation);
            expected.push((triplet_error_rate(&m, &d.items, &v, cfg.weighting()).unwrap(), checkpoint_to_string(&m).unwrap()));
        }
        let errors: Vec<f64> = expected.iter().map(|e| e.0).collect();
        assert_eq!(h.restart_errors, errors);
        let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
        let first_min = errors.iter().position(|&e| e == min).unwrap();
        assert_eq!(checkpoint_to_string(&best).unwrap(), expected[first_min].1);
    }

    #[test]
    fn single_condition_loss_halves() {
        let d = small_data(1);
        let cfg = TrainConfig {
            conditions: 1,
            ..small_config()
        };
        let (_, h) = train(cfg.build_model(&d.items).unwrap(), &d.items, &d.triplets, &cfg).unwrap();
        let initial = h.initial_loss.unwrap();
        let last = h.final_loss().unwrap();
        assert!(last <= 0.5 * initial, "initial {initial}, final {last}");
        let epochs: Vec<usize> = h.epochs.iter().map(|e| e.epoch).collect();
        assert_eq!(epochs, (1..=cfg.epochs).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        for bad in [
            TrainConfig { noise_fraction: 1.5, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { validation_fraction: 1.0, ..TrainConfig::default() },
            TrainConfig { restarts: 0, ..TrainConfig::default() },
            TrainConfig { restarts: 2, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let text_needed = TrainConfig {
            branch_mode: BranchMode::PairText,
            ..TrainConfig::default()
        };
        assert!(matches!(text_needed.model_config(&small_data(1).items), Err(Error::Input(_))));
    }

    #[test]
    fn split_is_a_partition() {
        let d = small_data(2);
        let (train_set, held) = split_triplets(&d.triplets, 0.25, 5);
        assert_eq!(held.len(), 300);
        assert_eq!(train_set.len() + held.len(), d.triplets.len());
        let mut all: Vec<_> = train_set.records.iter().chain(&held.records).cloned().collect();
        let mut orig = d.triplets.records.clone();
        let key = |t: &crate::data::Triplet| (t.anchor, t.positive, t.negative, t.condition.clone());
        all.sort_by_key(key);
        orig.sort_by_key(key);
        assert_eq!(all, orig);
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = small_data(2);
        let cfg = TrainConfig {
            epochs: 1,
            ..small_config()
        };
        let (model, _) = train(cfg.build_model(&d.items).unwrap(), &d.items, &d.triplets, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        for (a, b) in model.params.iter().zip(loaded.params.iter()) {
            let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(a.name, b.name);
            assert_eq!(bits(&a.value), bits(&b.value));
        }

        let text = fs::read_to_string(&path).unwrap();
        let truncated = &text[..text.len() / 2];
        assert!(matches!(checkpoint_from_str(truncated), Err(Error::Checkpoint(_))));
        let bumped = text.replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(matches!(checkpoint_from_str(&bumped), Err(Error::Checkpoint(m)) if m.contains("version")));

        let other = TrainConfig {
            conditions: 3,
            ..cfg
        };
        let err = load_checkpoint_for(&path, &other.model_config(&d.items).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Shape { ref field, .. } if field == "conditions"));
    }
}
