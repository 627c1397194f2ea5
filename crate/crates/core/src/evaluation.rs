//! Metrics, baselines, ablation sweeps and embedding export.
//!
//! Every metric is read-only on the model and fans out over queries with
//! rayon; results are reduced in input order so reports are reproducible.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{join_floats, FitbSet, ItemTable, OutfitSet, TripletSet};
use crate::error::{read_file, write_file, Error, Result};
use crate::math::{self, Matrix};
use crate::model::{apply_masks, ModelConfig, SceModel, WeightSource, Weighting};
use crate::training::{train_best_of, TrainConfig};

// ---------------------------------------------------------------------------
// reports

/// Ordered metrics plus run metadata, serialised as tab-separated text.
///
/// ```text
/// # key<TAB>value        (metadata, in insertion order)
/// metric<TAB>value       (one per metric, in insertion order)
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: Vec<(String, String)>,
    pub metrics: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.push((key.into(), value.to_string()));
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("metric `{name}` is {value}")));
        }
        self.metrics.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            writeln!(out, "# {k}\t{v}").expect("string write");
        }
        for (k, v) in &self.metrics {
            writeln!(out, "{k}\t{v}").expect("string write");
        }
        out
    }

    pub fn from_tsv(text: &str, source: &str) -> Result<Self> {
        let mut report = EvalReport::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let perr = |message: &str| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message: message.to_string(),
            };
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest.split_once('\t').ok_or_else(|| perr("metadata line needs key<TAB>value"))?;
                report.meta(k, v);
            } else {
                let (k, v) = line.split_once('\t').ok_or_else(|| perr("metric line needs name<TAB>value"))?;
                let v: f64 = v.parse().map_err(|_| perr("metric value is not a number"))?;
                report.push(k, v)?;
            }
        }
        Ok(report)
    }
}

/// Hex SHA-256 of `text`.
pub fn content_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        write!(s, "{b:02x}").expect("string write");
    }
    s
}

// ---------------------------------------------------------------------------
// metrics

/// Fraction of triplets with `d(a, p) >= d(a, n)` in the final space.
pub fn triplet_error_rate(model: &SceModel, items: &ItemTable, triplets: &TripletSet, weighting: Weighting) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Input("triplet error of an empty set".into()));
    }
    let errors = triplets
        .records
        .par_iter()
        .map(|t| {
            let e = model.embed_triplet(
                items.input(t.anchor),
                items.input(t.positive),
                items.input(t.negative),
                weighting,
                t.condition.as_deref(),
            )?;
            let (dp, dn) = e.distances();
            Ok(usize::from(dp >= dn))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(errors as f64 / triplets.len() as f64)
}

/// Area under the ROC curve via the rank-sum statistic; tied scores share
/// their average rank, which counts each tied pair as one half.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Input("AUC needs at least one positive and one negative score".into()));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(Error::Input("AUC scores contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // ranks are 1-based; work in doubled ranks so tie averages stay integral
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let doubled_avg = (i + 1 + j + 1) as u64;
        let positives = all[i..=j].iter().filter(|(_, p)| *p).count() as u64;
        doubled_rank_sum += doubled_avg * positives;
        i = j + 1;
    }
    let p = pos.len() as u64;
    let n = neg.len() as u64;
    // 2U = 2R - P(P+1); AUC = 2U / 2PN
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * n) as f64)
}

fn pair_distance(model: &SceModel, items: &ItemTable, a: usize, b: usize) -> Result<f64> {
    let e = model.embed_pair(items.input(a), items.input(b))?;
    math::euclidean_distance(&e.first, &e.second)
}

/// Negated mean final-space distance over all unordered item pairs, each
/// pair weighted by its own branch output.
pub fn outfit_score(model: &SceModel, outfit: &[usize], items: &ItemTable) -> Result<f64> {
    if outfit.len() < 2 {
        return Err(Error::Input(format!("an outfit needs at least 2 items, got {}", outfit.len())));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..outfit.len() {
        for j in i + 1..outfit.len() {
            total += pair_distance(model, items, outfit[i], outfit[j])?;
            pairs += 1;
        }
    }
    Ok(-total / pairs as f64)
}

pub fn compatibility_auc(model: &SceModel, outfits: &OutfitSet, items: &ItemTable) -> Result<f64> {
    let scores = outfits
        .records
        .par_iter()
        .map(|o| Ok((outfit_score(model, &o.items, items)?, o.compatible)))
        .collect::<Result<Vec<_>>>()?;
    let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Input("compatibility AUC needs both compatible and incompatible outfits".into()));
    }
    roc_auc(&pos, &neg)
}

/// Index of the candidate with the smallest summed distance to the partial
/// outfit; ties go to the lowest index.
pub fn fitb_choice(model: &SceModel, partial: &[usize], candidates: &[usize], items: &ItemTable) -> Result<usize> {
    let mut best = (0, f64::INFINITY);
    for (ci, &c) in candidates.iter().enumerate() {
        let mut sum = 0.0;
        for &p in partial {
            sum += pair_distance(model, items, p, c)?;
        }
        if sum < best.1 {
            best = (ci, sum);
        }
    }
    Ok(best.0)
}

pub fn fitb_accuracy(model: &SceModel, questions: &FitbSet, items: &ItemTable) -> Result<f64> {
    if questions.is_empty() {
        return Err(Error::Input("FITB accuracy of an empty question set".into()));
    }
    let correct = questions
        .records
        .par_iter()
        .map(|q| Ok(usize::from(fitb_choice(model, &q.partial, &q.candidates, items)? == q.answer)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / questions.len() as f64)
}

/// Size-weighted majority-label agreement of `assignments` with `labels`.
pub fn assignment_purity<L: Ord>(assignments: &[usize], labels: &[L]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::dim("purity labels", assignments.len(), labels.len()));
    }
    if assignments.is_empty() {
        return Err(Error::Input("purity of an empty set".into()));
    }
    let mut groups: BTreeMap<usize, BTreeMap<&L, usize>> = BTreeMap::new();
    for (a, l) in assignments.iter().zip(labels) {
        *groups.entry(*a).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = groups.values().map(|g| g.values().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / assignments.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Groups triplets by the argmax of their shared weight vector and scores
/// how well the groups agree with the condition labels.
pub fn condition_purity(model: &SceModel, items: &ItemTable, triplets: &TripletSet) -> Result<f64> {
    let labels = triplets
        .records
        .iter()
        .map(|t| t.condition.as_deref().ok_or_else(|| Error::Input("purity needs condition-labelled triplets".into())))
        .collect::<Result<Vec<_>>>()?;
    let assignments = triplets
        .records
        .par_iter()
        .map(|t| {
            let e = model.embed_triplet(
                items.input(t.anchor),
                items.input(t.positive),
                items.input(t.negative),
                Weighting::SharedTriplet,
                t.condition.as_deref(),
            )?;
            match e {
                crate::model::TripletEmbedding::Shared { weights, .. } => Ok(argmax(&weights)),
                crate::model::TripletEmbedding::PerPair { .. } => unreachable!("shared weighting requested"),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    assignment_purity(&assignments, &labels)
}

/// The `k` candidates closest to `query` in the final space, ties broken by
/// item id.
pub fn top_k_compatible(model: &SceModel, items: &ItemTable, query: usize, candidates: &[usize], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Input("k must be positive".into()));
    }
    if candidates.is_empty() {
        return Err(Error::Input("no candidates to rank".into()));
    }
    let mut scored = candidates
        .iter()
        .map(|&c| Ok((pair_distance(model, items, query, c)?, c)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| match a.0.total_cmp(&b.0) {
        Ordering::Equal => items.get(a.1).id.cmp(&items.get(b.1).id),
        o => o,
    });
    Ok(scored.into_iter().take(k).map(|(_, c)| c).collect())
}

// ---------------------------------------------------------------------------
// baselines

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// One all-ones mask: plain distance in the shared space.
    SingleEmbedding,
    /// Constant weights `1/M`.
    UniformAverage,
    /// Seeded uniform simplex draw per compared pair.
    RandomWeights,
    /// Frozen contiguous 0/1 blocks selected by the record's condition label.
    FixedDisjoint,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::SingleEmbedding,
        BaselineKind::UniformAverage,
        BaselineKind::RandomWeights,
        BaselineKind::FixedDisjoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::SingleEmbedding => "single-embedding",
            BaselineKind::UniformAverage => "uniform-average",
            BaselineKind::RandomWeights => "random-weights",
            BaselineKind::FixedDisjoint => "fixed-disjoint",
        }
    }
}

/// Freshly initialised baseline with the same encoder shape as `reference`.
///
/// `labels` is the condition vocabulary; it is only used (and required) by
/// the fixed-disjoint baseline, which maps sorted labels to mask blocks.
pub fn make_baseline(kind: BaselineKind, reference: &ModelConfig, seed: u64, labels: &[String]) -> Result<SceModel> {
    let mut config = reference.clone();
    match kind {
        BaselineKind::SingleEmbedding => {
            config.conditions = 1;
            config.branch_hidden = vec![2, 2];
            let mut model = SceModel::new(config, seed)?;
            model.masks_mut().fill(1.0);
            model.set_masks_trainable(false);
            model.weight_source = WeightSource::Uniform;
            Ok(model)
        }
        BaselineKind::UniformAverage => {
            let mut model = SceModel::new(config, seed)?;
            model.weight_source = WeightSource::Uniform;
            Ok(model)
        }
        BaselineKind::RandomWeights => {
            let mut model = SceModel::new(config, seed)?;
            model.weight_source = WeightSource::Random { seed };
            Ok(model)
        }
        BaselineKind::FixedDisjoint => {
            let (m, d) = (config.conditions, config.embed_dim);
            if d % m != 0 {
                return Err(Error::Config(format!(
                    "fixed disjoint masks need embed_dim ({d}) divisible by the condition count ({m})"
                )));
            }
            let vocab: BTreeSet<&String> = labels.iter().collect();
            if vocab.is_empty() {
                return Err(Error::Input("fixed disjoint masks need condition labels".into()));
            }
            if vocab.len() > m {
                return Err(Error::Config(format!("{} condition labels but only {m} masks", vocab.len())));
            }
            let mut model = SceModel::new(config, seed)?;
            *model.masks_mut() = disjoint_masks(m, d);
            model.set_masks_trainable(false);
            model.weight_source = WeightSource::ConditionLabel {
                labels: vocab.into_iter().cloned().collect(),
            };
            model.validate()?;
            Ok(model)
        }
    }
}

/// `m` rows of contiguous one-blocks of width `d / m`.
pub fn disjoint_masks(m: usize, d: usize) -> Matrix {
    let w = d / m;
    let mut masks = Matrix::zeros(m, d);
    for j in 0..m {
        for k in j * w..(j + 1) * w {
            masks.set(j, k, 1.0);
        }
    }
    masks
}

// ---------------------------------------------------------------------------
// evaluation bundles and sweeps

/// Held-out data for [`evaluate`]; any subset may be present.
#[derive(Debug, Clone, Copy)]
pub struct EvalData<'a> {
    pub items: &'a ItemTable,
    pub triplets: Option<&'a TripletSet>,
    pub outfits: Option<&'a OutfitSet>,
    pub fitb: Option<&'a FitbSet>,
}

/// Every metric the data allows. Pair metrics are skipped for a model whose
/// branch can only weight whole triplets.
pub fn evaluate(model: &SceModel, data: EvalData<'_>, weighting: Weighting, prefix: &str) -> Result<EvalReport> {
    let mut report = EvalReport::new();
    if let Some(t) = data.triplets.filter(|t| !t.is_empty()) {
        report.push(format!("{prefix}triplet_error"), triplet_error_rate(model, data.items, t, weighting)?)?;
    }
    let pairwise = model.config.branch_mode != crate::model::BranchMode::TripletVisual
        || model.weight_source != WeightSource::Branch;
    if pairwise {
        if let Some(o) = data.outfits.filter(|o| !o.records.is_empty()) {
            report.push(format!("{prefix}compatibility_auc"), compatibility_auc(model, o, data.items)?)?;
        }
        if let Some(f) = data.fitb.filter(|f| !f.is_empty()) {
            report.push(format!("{prefix}fitb_accuracy"), fitb_accuracy(model, f, data.items)?)?;
        }
    }
    Ok(report)
}

/// The quantity varied by [`ablation_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "axis", content = "values")]
pub enum AblationAxis {
    Conditions(Vec<usize>),
    Noise(Vec<f64>),
    TrainSize(Vec<usize>),
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Conditions(_) => "conditions",
            AblationAxis::Noise(_) => "noise",
            AblationAxis::TrainSize(_) => "train_size",
        }
    }

    fn labels(&self) -> Vec<String> {
        match self {
            AblationAxis::Conditions(v) | AblationAxis::TrainSize(v) => v.iter().map(|x| x.to_string()).collect(),
            AblationAxis::Noise(v) => v.iter().map(|x| x.to_string()).collect(),
        }
    }

    fn apply(&self, idx: usize, base: &TrainConfig, train_set: &TripletSet) -> Result<(TrainConfig, TripletSet)> {
        let mut cfg = base.clone();
        let mut set = train_set.clone();
        match self {
            AblationAxis::Conditions(v) => cfg.conditions = v[idx],
            AblationAxis::Noise(v) => cfg.noise_fraction = v[idx],
            AblationAxis::TrainSize(v) => {
                if v[idx] == 0 || v[idx] > set.len() {
                    return Err(Error::Input(format!(
                        "training size {} outside 1..={}",
                        v[idx],
                        set.len()
                    )));
                }
                set.records.truncate(v[idx]);
            }
        }
        Ok((cfg, set))
    }

    fn len(&self) -> usize {
        match self {
            AblationAxis::Conditions(v) | AblationAxis::TrainSize(v) => v.len(),
            AblationAxis::Noise(v) => v.len(),
        }
    }
}

/// Trains one model per axis value with otherwise identical settings and
/// seed, and tabulates held-out metrics as `metric[axis=value]`.
pub fn ablation_sweep(
    base: &TrainConfig,
    axis: &AblationAxis,
    train_set: &TripletSet,
    eval: EvalData<'_>,
    seed: u64,
) -> Result<EvalReport> {
    if axis.len() == 0 {
        return Err(Error::Input("ablation axis has no values".into()));
    }
    let base = TrainConfig { seed, ..base.clone() };
    let labels = axis.labels();
    let rows = (0..axis.len())
        .into_par_iter()
        .map(|i| {
            let (cfg, set) = axis.apply(i, &base, train_set)?;
            let (model, history) = train_best_of(eval.items, &set, &cfg, |s| cfg.build_model_seeded(eval.items, s))?;
            let mut r = evaluate(&model, eval, cfg.weighting(), "")?;
            if let Some(l) = history.final_loss() {
                r.push("final_train_loss", l)?;
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = EvalReport::new();
    report.meta("axis", axis.name());
    report.meta("seed", seed);
    report.meta("values", labels.join(","));
    for (label, row) in labels.iter().zip(rows) {
        for (name, v) in row.metrics {
            report.push(format!("{name}[{}={label}]", axis.name()), v)?;
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// embedding export

/// `id<TAB>j<TAB>v1,...` rows of `C_j ⊙ V`, items in table order, masks in
/// index order.
pub fn format_condition_embeddings(model: &SceModel, items: &ItemTable) -> Result<String> {
    let rows = (0..items.len())
        .into_par_iter()
        .map(|i| {
            let item = items.get(i);
            let masked = apply_masks(&model.encode(&item.visual)?, model.masks())?;
            let mut s = String::new();
            for j in 0..masked.rows() {
                writeln!(s, "{}\t{j}\t{}", item.id, join_floats(masked.row(j))).expect("string write");
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.concat())
}

pub fn export_condition_embeddings(model: &SceModel, items: &ItemTable, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), format_condition_embeddings(model, items)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub id: String,
    pub condition: usize,
    pub values: Vec<f64>,
}

pub fn parse_condition_embeddings(text: &str, source: &str) -> Result<Vec<ConditionEmbedding>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |message: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(perr(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let condition = fields[1].parse().map_err(|_| perr(format!("bad condition index `{}`", fields[1])))?;
        let values = fields[2]
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| perr(format!("non-numeric value `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(ConditionEmbedding {
            id: fields[0].to_string(),
            condition,
            values,
        });
    }
    Ok(out)
}

pub fn load_condition_embeddings(path: impl AsRef<Path>) -> Result<Vec<ConditionEmbedding>> {
    let path = path.as_ref();
    parse_condition_embeddings(&read_file(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FitbQuestion, Item, Outfit, Triplet};
    use crate::model::BranchMode;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for p in pos {
            for n in neg {
                if p > n {
                    s += 1.0;
                } else if p == n {
                    s += 0.5;
                }
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[1.0; 4], &[1.0; 3]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert_eq!(brute_auc(&[0.9, 0.4], &[0.5, 0.1]), 0.75);
        assert!(matches!(roc_auc(&[], &[1.0]), Err(Error::Input(_))));
        assert!(matches!(roc_auc(&[1.0], &[]), Err(Error::Input(_))));
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..200 {
            let p = rng.random_range(1..40);
            let n = rng.random_range(1..40);
            // every third case draws from a handful of values to force ties
            let levels = if case % 3 == 0 { 3 } else { 1000 };
            let mut draw = || f64::from(rng.random_range(0..levels)) / 7.0;
            let pos: Vec<f64> = (0..p).map(|_| draw()).collect();
            let neg: Vec<f64> = (0..n).map(|_| draw()).collect();
            assert_eq!(roc_auc(&pos, &neg).unwrap(), brute_auc(&pos, &neg), "case {case}");
        }
    }

    fn table(vectors: &[&[f64]]) -> ItemTable {
        ItemTable::new(
            vectors
                .iter()
                .enumerate()
                .map(|(i, v)| Item {
                    id: format!("i{i}"),
                    category: "c".into(),
                    visual: v.to_vec(),
                    text: None,
                })
                .collect(),
        )
        .unwrap()
    }

    /// Identity encoder and all-ones masks: final distance is raw distance.
    fn identity_model(f: usize) -> SceModel {
        let mut model = SceModel::new(ModelConfig::new(f, f, 1, BranchMode::PairVisual), 0).unwrap();
        let w = model.encoder_layers()[0].weight;
        model.params.get_mut(w).value = Matrix::identity(f);
        model.masks_mut().fill(1.0);
        model
    }

    #[test]
    fn triplet_error_examples() {
        let items = table(&[&[0.0, 0.0], &[1.0, 0.0], &[3.0, 0.0], &[0.0, 2.0]]);
        let model = identity_model(2);
        let good = TripletSet::new(vec![Triplet::new(0, 1, 2, None), Triplet::new(0, 1, 3, None), Triplet::new(1, 0, 2, None)]);
        assert_eq!(triplet_error_rate(&model, &items, &good, Weighting::PerPair).unwrap(), 0.0);
        let flipped = TripletSet::new(good.records.iter().map(|t| Triplet::new(t.anchor, t.negative, t.positive, None)).collect());
        assert_eq!(triplet_error_rate(&model, &items, &flipped, Weighting::PerPair).unwrap(), 1.0);
        let tie = TripletSet::new(vec![Triplet::new(1, 0, 0, None)]);
        assert_eq!(triplet_error_rate(&model, &items, &tie, Weighting::PerPair).unwrap(), 1.0);
        assert!(matches!(
            triplet_error_rate(&model, &items, &TripletSet::default(), Weighting::PerPair),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn error_and_flipped_error_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vecs: Vec<Vec<f64>> = (0..30).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = vecs.iter().map(Vec::as_slice).collect();
        let items = table(&refs);
        let model = SceModel::new(ModelConfig::new(5, 4, 3, BranchMode::PairVisual), 2).unwrap();
        let ts: Vec<Triplet> = (0..100)
            .map(|_| {
                let idx = rand::seq::index::sample(&mut rng, 30, 3);
                Triplet::new(idx.index(0), idx.index(1), idx.index(2), None)
            })
            .collect();
        let flipped: Vec<Triplet> = ts.iter().map(|t| Triplet::new(t.anchor, t.negative, t.positive, None)).collect();
        let a = triplet_error_rate(&model, &items, &TripletSet::new(ts), Weighting::PerPair).unwrap();
        let b = triplet_error_rate(&model, &items, &TripletSet::new(flipped), Weighting::PerPair).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn outfit_score_examples() {
        let items = table(&[&[1.0, 2.0], &[1.0, 2.0], &[4.0, 6.0], &[0.0, 0.0]]);
        let model = identity_model(2);
        assert_eq!(outfit_score(&model, &[0, 1], &items).unwrap(), 0.0);
        let s = outfit_score(&model, &[0, 2, 3], &items).unwrap();
        let hand = -(5.0 + 5f64.sqrt() + 52f64.sqrt()) / 3.0;
        assert!((s - hand).abs() < 1e-12);
        assert!((outfit_score(&model, &[3, 0, 2], &items).unwrap() - s).abs() < 1e-12);
        assert!(matches!(outfit_score(&model, &[0], &items), Err(Error::Input(_))));
    }

    #[test]
    fn outfit_score_rejects_triplet_branch() {
        let items = table(&[&[1.0, 2.0], &[0.0, 2.0]]);
        let model = SceModel::new(ModelConfig::new(2, 2, 2, BranchMode::TripletVisual), 0).unwrap();
        assert!(matches!(outfit_score(&model, &[0, 1], &items), Err(Error::Contract(_))));
    }

    #[test]
    fn compatibility_auc_examples() {
        let items = table(&[&[0.0], &[0.1], &[5.0], &[0.0], &[9.0]]);
        let model = identity_model(1);
        let outfit = |items: Vec<usize>, compatible| Outfit {
            id: "o".into(),
            items,
            compatible,
        };
        let set = OutfitSet {
            records: vec![outfit(vec![0, 1], true), outfit(vec![0, 2], false), outfit(vec![3, 4], false)],
        };
        assert_eq!(compatibility_auc(&model, &set, &items).unwrap(), 1.0);
        let same = OutfitSet {
            records: vec![outfit(vec![0, 3], true), outfit(vec![3, 0], false)],
        };
        assert_eq!(compatibility_auc(&model, &same, &items).unwrap(), 0.5);
        let one_class = OutfitSet {
            records: vec![outfit(vec![0, 1], true)],
        };
        assert!(matches!(compatibility_auc(&model, &one_class, &items), Err(Error::Input(_))));
    }

    #[test]
    fn fitb_examples() {
        let items = table(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], &[9.0, 9.0], &[-7.0, 3.0], &[2.0, 2.0]]);
        let model = identity_model(2);
        let q = |partial: Vec<usize>, candidates: Vec<usize>, answer| FitbQuestion {
            partial,
            candidates,
            answer,
        };
        let set = FitbSet {
            records: vec![q(vec![0, 1], vec![3, 2, 4], 1)],
        };
        assert_eq!(fitb_accuracy(&model, &set, &items).unwrap(), 1.0);
        assert_eq!(fitb_choice(&model, &[0], &[5, 5, 5], &items).unwrap(), 0);
        // duplicating a partial item shifts every sum by the same amount only
        // when it is equidistant; use an item identical to another partial one
        assert_eq!(fitb_choice(&model, &[0, 1, 2], &[3, 2, 4], &items).unwrap(), 1);
        assert!(matches!(fitb_accuracy(&model, &FitbSet::default(), &items), Err(Error::Input(_))));
    }

    #[test]
    fn fitb_choice_invariant_to_common_offset() {
        // an extra partial item at equal distance from all candidates adds a
        // constant to every sum
        let items = table(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0], &[0.3, 0.3]]);
        let model = identity_model(2);
        let cands = [1, 2, 3, 4];
        let base = fitb_choice(&model, &[5], &cands, &items).unwrap();
        assert_eq!(fitb_choice(&model, &[5, 0], &cands, &items).unwrap(), base);
        assert_eq!(fitb_choice(&model, &[5, 0, 0], &cands, &items).unwrap(), base);
    }

    #[test]
    fn purity_examples() {
        assert_eq!(assignment_purity(&[0, 0, 1, 1], &["a", "a", "b", "b"]).unwrap(), 1.0);
        assert_eq!(assignment_purity(&[0, 0, 0, 0, 0], &["a", "b", "a", "c", "a"]).unwrap(), 0.6);
        assert!(assignment_purity::<&str>(&[], &[]).is_err());
    }

    #[test]
    fn purity_of_random_assignments_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = 3;
        let n = 3000;
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let assignments: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let p = assignment_purity(&assignments, &labels).unwrap();
        // Monte-Carlo reference: same generator, many draws
        let mut mc = 0.0;
        let reps = 50;
        for _ in 0..reps {
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            mc += assignment_purity(&a, &labels).unwrap();
        }
        mc /= reps as f64;
        assert!((mc - 1.0 / k as f64).abs() < 0.03, "{mc}");
        assert!((p - mc).abs() < 0.03, "{p} vs {mc}");
    }

    #[test]
    fn condition_purity_needs_labels() {
        let items = table(&[&[0.0], &[1.0], &[2.0]]);
        let model = SceModel::new(ModelConfig::new(1, 2, 2, BranchMode::TripletVisual), 0).unwrap();
        let unlabeled = TripletSet::new(vec![Triplet::new(0, 1, 2, None)]);
        assert!(matches!(condition_purity(&model, &items, &unlabeled), Err(Error::Input(_))));
        let labeled = TripletSet::new(vec![Triplet::new(0, 1, 2, Some("x".into()))]);
        assert_eq!(condition_purity(&model, &items, &labeled).unwrap(), 1.0);
    }

    #[test]
    fn top_k_examples() {
        let vecs: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64 * 1.7).sin() * 3.0, (i % 4) as f64]).collect();
        let refs: Vec<&[f64]> = vecs.iter().map(Vec::as_slice).collect();
        let items = table(&refs);
        let model = SceModel::new(ModelConfig::new(2, 3, 2, BranchMode::PairVisual), 5).unwrap();
        let cands: Vec<usize> = (0..12).collect();
        let full = top_k_compatible(&model, &items, 4, &cands, 100).unwrap();
        assert_eq!(full.len(), 12);
        assert_eq!(full[0], 4);
        // exhaustive sort oracle
        let mut oracle: Vec<(f64, String, usize)> = cands
            .iter()
            .map(|&c| {
                let e = model.embed_pair(items.input(4), items.input(c)).unwrap();
                (math::euclidean_distance(&e.first, &e.second).unwrap(), items.get(c).id.clone(), c)
            })
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let expected: Vec<usize> = oracle.iter().map(|o| o.2).collect();
        assert_eq!(full, expected);
        assert_eq!(top_k_compatible(&model, &items, 4, &cands, 5).unwrap(), expected[..5].to_vec());
        assert!(matches!(top_k_compatible(&model, &items, 4, &cands, 0), Err(Error::Input(_))));
    }

    #[test]
    fn top_k_ties_break_by_id() {
        let items = table(&[&[0.0], &[1.0], &[-1.0], &[1.0]]);
        let model = identity_model(1);
        assert_eq!(top_k_compatible(&model, &items, 0, &[3, 2, 1], 3).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn baselines() {
        let cfg = ModelConfig::new(4, 6, 3, BranchMode::PairVisual);
        let labels: Vec<String> = ["b", "a", "c"].iter().map(|s| s.to_string()).collect();

        let fixed = make_baseline(BaselineKind::FixedDisjoint, &cfg, 1, &labels).unwrap();
        let m = fixed.masks();
        for i in 0..3 {
            assert!(m.row(i).iter().all(|&x| x == 0.0 || x == 1.0));
            for j in i + 1..3 {
                assert_eq!(math::dot(m.row(i), m.row(j)), 0.0);
            }
        }
        assert!(!fixed.params.get(fixed.masks_id()).trainable);
        assert_eq!(
            fixed.weight_source,
            WeightSource::ConditionLabel {
                labels: vec!["a".into(), "b".into(), "c".into()]
            }
        );
        let odd = ModelConfig::new(4, 7, 3, BranchMode::PairVisual);
        assert!(matches!(make_baseline(BaselineKind::FixedDisjoint, &odd, 1, &labels), Err(Error::Config(_))));
        assert!(matches!(make_baseline(BaselineKind::FixedDisjoint, &cfg, 1, &[]), Err(Error::Input(_))));

        // uniform average equals compose_embedding with w = 1/M
        let uni = make_baseline(BaselineKind::UniformAverage, &cfg, 1, &[]).unwrap();
        let (x, y) = ([0.1, -0.4, 0.9, 0.3], [1.0, 0.2, -0.5, 0.0]);
        let e = uni.embed_pair(crate::model::ItemInput::visual(&x), crate::model::ItemInput::visual(&y)).unwrap();
        let v = uni.encode(&x).unwrap();
        let expected = crate::model::compose_embedding(&apply_masks(&v, uni.masks()).unwrap(), &[1.0 / 3.0; 3]).unwrap();
        for (a, b) in e.first.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }

        // single embedding: final distance is distance in V-space
        let single = make_baseline(BaselineKind::SingleEmbedding, &cfg, 1, &[]).unwrap();
        let e = single.embed_pair(crate::model::ItemInput::visual(&x), crate::model::ItemInput::visual(&y)).unwrap();
        assert_eq!(e.first, single.encode(&x).unwrap());
        assert_eq!(e.second, single.encode(&y).unwrap());

        let random = make_baseline(BaselineKind::RandomWeights, &cfg, 1, &[]).unwrap();
        let w1 = random.embed_pair(crate::model::ItemInput::visual(&x), crate::model::ItemInput::visual(&y)).unwrap().weights;
        let w2 = random.embed_pair(crate::model::ItemInput::visual(&y), crate::model::ItemInput::visual(&x)).unwrap().weights;
        assert!((w1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(w1, w2);
    }

    #[test]
    fn uniform_baseline_ignores_branch_parameters() {
        let cfg = ModelConfig::new(3, 4, 2, BranchMode::PairVisual);
        let items = table(&[&[0.0, 1.0, 2.0], &[1.0, -1.0, 0.5], &[0.3, 0.3, 0.3], &[2.0, 0.0, -1.0]]);
        let outfits = OutfitSet {
            records: vec![
                Outfit { id: "a".into(), items: vec![0, 1, 2], compatible: true },
                Outfit { id: "b".into(), items: vec![1, 3], compatible: false },
            ],
        };
        let mut model = make_baseline(BaselineKind::UniformAverage, &cfg, 3, &[]).unwrap();
        let before = compatibility_auc(&model, &outfits, &items).unwrap();
        let s_before = outfit_score(&model, &[0, 1, 2], &items).unwrap();
        for l in model.branch_layers().to_vec() {
            model.params.get_mut(l.weight).value.fill(0.37);
            model.params.get_mut(l.bias).value.fill(-2.0);
        }
        assert_eq!(compatibility_auc(&model, &outfits, &items).unwrap(), before);
        assert_eq!(outfit_score(&model, &[0, 1, 2], &items).unwrap(), s_before);
    }

    #[test]
    fn report_round_trip() {
        let mut r = EvalReport::new();
        r.meta("seed", 7);
        r.meta("config_hash", content_hash("abc"));
        r.push("triplet_error", 0.125).unwrap();
        r.push("auc", 0.1 + 0.2).unwrap();
        assert!(r.push("bad", f64::NAN).is_err());
        let text = r.to_tsv();
        assert!(text.starts_with("# seed\t7\n"));
        assert_eq!(EvalReport::from_tsv(&text, "r").unwrap(), r);
        assert_eq!(content_hash("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn export_round_trip() {
        let items = table(&[&[0.1, 0.2, 0.3], &[1.0 / 3.0, -2.0, 1e-17]]);
        let model = SceModel::new(ModelConfig::new(3, 4, 3, BranchMode::PairVisual), 9).unwrap();
        let text = format_condition_embeddings(&model, &items).unwrap();
        let rows = parse_condition_embeddings(&text, "e").unwrap();
        assert_eq!(rows.len(), items.len() * 3);
        for (r, row) in rows.iter().enumerate() {
            let item = r / 3;
            assert_eq!(row.id, items.get(item).id);
            assert_eq!(row.condition, r % 3);
            let masked = apply_masks(&model.encode(&items.get(item).visual).unwrap(), model.masks()).unwrap();
            assert_eq!(row.values, masked.row(r % 3).to_vec());
        }

        let ones = identity_model(3);
        let rows = parse_condition_embeddings(&format_condition_embeddings(&ones, &items).unwrap(), "e").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].values, ones.encode(&items.get(1).visual).unwrap());
    }

    proptest! {
        #[test]
        fn auc_is_symmetric_under_swap(pos in proptest::collection::vec(0u8..6, 1..20), neg in proptest::collection::vec(0u8..6, 1..20)) {
            let p: Vec<f64> = pos.iter().map(|&x| f64::from(x)).collect();
            let n: Vec<f64> = neg.iter().map(|&x| f64::from(x)).collect();
            let a = roc_auc(&p, &n).unwrap();
            let b = roc_auc(&n, &p).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}
