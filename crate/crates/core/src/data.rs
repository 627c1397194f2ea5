//! Item tables, supervision records, their text formats, and the synthetic
//! multi-condition dataset generator.
//!
//! All record types refer to items by their row index in one shared
//! [`ItemTable`]; the file formats use the string ids. Formats are
//! line-oriented UTF-8; blank lines and lines starting with `#` are ignored.
//!
//! * features: `id<TAB>category<TAB>v1,v2,...[<TAB>t1,t2,...]`
//! * triplets: `anchor positive negative [condition]`
//! * outfits:  `outfit_id label id1 id2 ...` with label `1` (compatible) or `0`
//! * FITB:     `p1 p2 ... | c1 c2 ... | answer_index`

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};
use crate::model::ItemInput;

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub category: String,
    pub visual: Vec<f64>,
    pub text: Option<Vec<f64>>,
}

/// Items with unique ids and uniform feature widths.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemTable {
    items: Vec<Item>,
    index: HashMap<String, usize>,
    feature_dim: usize,
    text_dim: Option<usize>,
}

impl ItemTable {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let feature_dim = items.first().map_or(0, |it| it.visual.len());
        let text_dim = items.iter().find_map(|it| it.text.as_ref().map(Vec::len));
        let mut index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if it.visual.len() != feature_dim {
                return Err(Error::dim("item visual features", feature_dim, it.visual.len()));
            }
            if let (Some(t), Some(expected)) = (&it.text, text_dim) {
                if t.len() != expected {
                    return Err(Error::dim("item text features", expected, t.len()));
                }
            }
            if index.insert(it.id.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate item id `{}`", it.id)));
            }
        }
        Ok(ItemTable {
            items,
            index,
            feature_dim,
            text_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Item {
        &self.items[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Item> {
        self.items.iter()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn text_dim(&self) -> Option<usize> {
        self.text_dim
    }

    pub fn input(&self, idx: usize) -> ItemInput<'_> {
        let it = &self.items[idx];
        ItemInput::with_text(&it.visual, it.text.as_deref())
    }

    pub fn categories(&self) -> BTreeSet<&str> {
        self.items.iter().map(|it| it.category.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub condition: Option<String>,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize, condition: Option<String>) -> Self {
        Triplet {
            anchor,
            positive,
            negative,
            condition,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.anchor == self.positive || self.anchor == self.negative || self.positive == self.negative
    }

    pub fn items(&self) -> [usize; 3] {
        [self.anchor, self.positive, self.negative]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletSet {
    pub records: Vec<Triplet>,
}

impl TripletSet {
    pub fn new(records: Vec<Triplet>) -> Self {
        TripletSet { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct condition labels.
    pub fn condition_labels(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.iter().filter_map(|t| t.condition.as_ref()).collect();
        set.into_iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outfit {
    pub id: String,
    pub items: Vec<usize>,
    pub compatible: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutfitSet {
    pub records: Vec<Outfit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitbQuestion {
    pub partial: Vec<usize>,
    pub candidates: Vec<usize>,
    pub answer: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitbSet {
    pub records: Vec<FitbQuestion>,
}

impl FitbSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

// ---------------------------------------------------------------------------
// parsing

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let t = l.trim();
        (!t.is_empty() && !t.starts_with('#')).then_some((i + 1, l.trim_end_matches('\r')))
    })
}

fn parse_floats(field: &str, path: &str, line: usize, what: &str) -> Result<Vec<f64>> {
    field
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                path: path.to_string(),
                line,
                message: format!("non-numeric {what} value `{tok}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line,
                    message: format!("non-finite {what} value `{tok}`"),
                });
            }
            Ok(v)
        })
        .collect()
}

pub fn load_feature_table(path: impl AsRef<Path>) -> Result<ItemTable> {
    let path = path.as_ref();
    parse_feature_table(&read_file(path)?, &path.display().to_string())
}

/// Parses the features format. `source` names the input in errors.
pub fn parse_feature_table(text: &str, source: &str) -> Result<ItemTable> {
    let perr = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut items: Vec<Item> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut feature_dim = None;
    let mut text_dim = None;
    for (line, raw) in content_lines(text) {
        let fields: Vec<&str> = raw.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(perr(line, format!("expected 3 or 4 tab-separated fields, found {}", fields.len())));
        }
        let id = fields[0].trim();
        let category = fields[1].trim();
        if id.is_empty() || category.is_empty() {
            return Err(perr(line, "empty id or category".into()));
        }
        if id.chars().any(char::is_whitespace) || id.contains('|') {
            return Err(perr(line, format!("item id `{id}` contains whitespace or `|`")));
        }
        let visual = parse_floats(fields[2], source, line, "feature")?;
        let f = *feature_dim.get_or_insert(visual.len());
        if visual.len() != f {
            return Err(perr(line, format!("expected {f} feature values, found {}", visual.len())));
        }
        let text = match fields.get(3) {
            Some(t) if !t.trim().is_empty() => {
                let tv = parse_floats(t, source, line, "text")?;
                let td = *text_dim.get_or_insert(tv.len());
                if tv.len() != td {
                    return Err(perr(line, format!("expected {td} text values, found {}", tv.len())));
                }
                Some(tv)
            }
            _ => None,
        };
        if !seen.insert(id.to_string()) {
            return Err(perr(line, format!("duplicate item id `{id}`")));
        }
        items.push(Item {
            id: id.to_string(),
            category: category.to_string(),
            visual,
            text,
        });
    }
    if items.is_empty() {
        return Err(perr(0, "feature table has no items".into()));
    }
    ItemTable::new(items)
}

fn resolve(items: &ItemTable, id: &str, source: &str, line: usize) -> Result<usize> {
    items.index_of(id).ok_or_else(|| Error::Reference {
        path: source.to_string(),
        line,
        id: id.to_string(),
    })
}

pub fn load_triplets(path: impl AsRef<Path>, items: &ItemTable) -> Result<TripletSet> {
    let path = path.as_ref();
    parse_triplets(&read_file(path)?, &path.display().to_string(), items)
}

pub fn parse_triplets(text: &str, source: &str, items: &ItemTable) -> Result<TripletSet> {
    let mut records = Vec::new();
    for (line, raw) in content_lines(text) {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if !(3..=4).contains(&toks.len()) {
            return Err(Error::Parse {
                path: source.to_string(),
                line,
                message: format!("expected `anchor positive negative [condition]`, found {} tokens", toks.len()),
            });
        }
        let t = Triplet::new(
            resolve(items, toks[0], source, line)?,
            resolve(items, toks[1], source, line)?,
            resolve(items, toks[2], source, line)?,
            toks.get(3).map(|s| s.to_string()),
        );
        if t.is_degenerate() {
            return Err(Error::Validation {
                path: source.to_string(),
                line,
                message: "triplet repeats an item id".into(),
            });
        }
        records.push(t);
    }
    Ok(TripletSet { records })
}

pub fn load_outfits(path: impl AsRef<Path>, items: &ItemTable) -> Result<OutfitSet> {
    let path = path.as_ref();
    parse_outfits(&read_file(path)?, &path.display().to_string(), items)
}

pub fn parse_outfits(text: &str, source: &str, items: &ItemTable) -> Result<OutfitSet> {
    let mut records = Vec::new();
    for (line, raw) in content_lines(text) {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(Error::Validation {
                path: source.to_string(),
                line,
                message: "an outfit needs an id, a label and at least 2 items".into(),
            });
        }
        let compatible = match toks[1] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line,
                    message: format!("outfit label must be 1 or 0, found `{other}`"),
                })
            }
        };
        let ids = toks[2..]
            .iter()
            .map(|id| resolve(items, id, source, line))
            .collect::<Result<Vec<_>>>()?;
        records.push(Outfit {
            id: toks[0].to_string(),
            items: ids,
            compatible,
        });
    }
    Ok(OutfitSet { records })
}

pub fn load_fitb(path: impl AsRef<Path>, items: &ItemTable) -> Result<FitbSet> {
    let path = path.as_ref();
    parse_fitb(&read_file(path)?, &path.display().to_string(), items)
}

pub fn parse_fitb(text: &str, source: &str, items: &ItemTable) -> Result<FitbSet> {
    let verr = |line: usize, message: String| Error::Validation {
        path: source.to_string(),
        line,
        message,
    };
    let mut records = Vec::new();
    for (line, raw) in content_lines(text) {
        let sections: Vec<&str> = raw.split('|').collect();
        if sections.len() != 3 {
            return Err(Error::Parse {
                path: source.to_string(),
                line,
                message: format!("expected `partial | candidates | answer`, found {} sections", sections.len()),
            });
        }
        let ids = |s: &str| {
            s.split_whitespace()
                .map(|id| resolve(items, id, source, line))
                .collect::<Result<Vec<_>>>()
        };
        let partial = ids(sections[0])?;
        let candidates = ids(sections[1])?;
        let answer: usize = sections[2].trim().parse().map_err(|_| Error::Parse {
            path: source.to_string(),
            line,
            message: format!("answer index `{}` is not a nonnegative integer", sections[2].trim()),
        })?;
        if partial.is_empty() {
            return Err(verr(line, "partial outfit is empty".into()));
        }
        if candidates.is_empty() {
            return Err(verr(line, "candidate list is empty".into()));
        }
        if answer >= candidates.len() {
            return Err(verr(line, format!("answer index {answer} out of range for {} candidates", candidates.len())));
        }
        records.push(FitbQuestion {
            partial,
            candidates,
            answer,
        });
    }
    Ok(FitbSet { records })
}

// ---------------------------------------------------------------------------
// writing

pub(crate) fn join_floats(v: &[f64]) -> String {
    let mut s = String::with_capacity(v.len() * 12);
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{x}").expect("string write");
    }
    s
}

pub fn format_feature_table(items: &ItemTable) -> String {
    let mut out = String::new();
    for it in items.iter() {
        write!(out, "{}\t{}\t{}", it.id, it.category, join_floats(&it.visual)).expect("string write");
        if let Some(t) = &it.text {
            write!(out, "\t{}", join_floats(t)).expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn format_triplets(set: &TripletSet, items: &ItemTable) -> String {
    let mut out = String::new();
    for t in &set.records {
        let [a, p, n] = t.items().map(|i| items.get(i).id.as_str());
        match &t.condition {
            Some(c) => writeln!(out, "{a} {p} {n} {c}"),
            None => writeln!(out, "{a} {p} {n}"),
        }
        .expect("string write");
    }
    out
}

pub fn format_outfits(set: &OutfitSet, items: &ItemTable) -> String {
    let mut out = String::new();
    for o in &set.records {
        let ids: Vec<&str> = o.items.iter().map(|&i| items.get(i).id.as_str()).collect();
        writeln!(out, "{} {} {}", o.id, if o.compatible { 1 } else { 0 }, ids.join(" ")).expect("string write");
    }
    out
}

pub fn format_fitb(set: &FitbSet, items: &ItemTable) -> String {
    let mut out = String::new();
    for q in &set.records {
        let ids = |v: &[usize]| v.iter().map(|&i| items.get(i).id.as_str()).collect::<Vec<_>>().join(" ");
        writeln!(out, "{} | {} | {}", ids(&q.partial), ids(&q.candidates), q.answer).expect("string write");
    }
    out
}

// ---------------------------------------------------------------------------
// noise, filtering, text hashing

/// Replaces exactly `floor(p * N)` uniformly chosen records with random
/// triplets of three distinct items. Replaced records carry no condition.
pub fn inject_noise(triplets: &TripletSet, p: f64, items: &ItemTable, seed: u64) -> Result<TripletSet> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Input(format!("noise fraction must lie in [0, 1], got {p}")));
    }
    let n = triplets.len();
    let count = (p * n as f64).floor() as usize;
    let mut out = triplets.clone();
    if count == 0 {
        return Ok(out);
    }
    if items.len() < 3 {
        return Err(Error::Input("noise injection needs at least 3 items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let ids = index::sample(&mut rng, items.len(), 3);
        out.records[i] = Triplet::new(ids.index(0), ids.index(1), ids.index(2), None);
    }
    Ok(out)
}

/// Result of holding out item categories.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySplit {
    /// Triplets touching no excluded item.
    pub train_triplets: TripletSet,
    /// FITB questions touching no excluded item.
    pub train_fitb: FitbSet,
    /// FITB questions whose candidates all lie in excluded categories.
    pub eval_fitb: FitbSet,
}

pub fn filter_categories(
    items: &ItemTable,
    triplets: &TripletSet,
    fitb: &FitbSet,
    excluded: &BTreeSet<String>,
) -> Result<CategorySplit> {
    let known = items.categories();
    for c in excluded {
        if !known.contains(c.as_str()) {
            return Err(Error::Input(format!("excluded category `{c}` does not occur in the item table")));
        }
    }
    let is_excluded = |i: usize| excluded.contains(&items.get(i).category);
    let train_triplets = TripletSet::new(
        triplets
            .records
            .iter()
            .filter(|t| !t.items().iter().any(|&i| is_excluded(i)))
            .cloned()
            .collect(),
    );
    if train_triplets.is_empty() {
        return Err(Error::Input("excluding these categories leaves no training triplets".into()));
    }
    let touches = |q: &FitbQuestion| q.partial.iter().chain(&q.candidates).any(|&i| is_excluded(i));
    let train_fitb = FitbSet {
        records: fitb.records.iter().filter(|q| !touches(q)).cloned().collect(),
    };
    let eval_fitb = FitbSet {
        records: if excluded.is_empty() {
            Vec::new()
        } else {
            fitb.records
                .iter()
                .filter(|q| q.candidates.iter().all(|&i| is_excluded(i)))
                .cloned()
                .collect()
        },
    };
    Ok(CategorySplit {
        train_triplets,
        train_fitb,
        eval_fitb,
    })
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone)]
pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub(crate) fn new() -> Self {
        Fnv1a(Self::OFFSET)
    }

    pub(crate) fn with_seed(seed: u64) -> Self {
        let mut h = Self::new();
        h.write(&seed.to_le_bytes());
        h
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Signed feature-hashing bag of tokens, L2-normalised when nonzero.
pub fn hash_text_features<S: AsRef<str>>(tokens: &[S], dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if dim == 0 {
        return v;
    }
    for tok in tokens {
        let mut h = Fnv1a::new();
        h.write(tok.as_ref().as_bytes());
        let bits = h.finish();
        let slot = (bits % dim as u64) as usize;
        let sign = if bits >> 63 == 0 { 1.0 } else { -1.0 };
        v[slot] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

// ---------------------------------------------------------------------------
// synthetic data

/// Parameters of the synthetic latent-factor dataset.
///
/// Every item has `conditions` latent blocks. Items are generated in outfits;
/// each outfit has one theme condition, and its members are close to a shared
/// centre in that block and independent standard normal in all others. Raw
/// features are a fixed random linear mix of the latents plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of latent conditions K.
    pub conditions: usize,
    pub items: usize,
    pub feature_dim: usize,
    pub latent_dim: usize,
    /// Per-condition block widths; empty means an even split of `latent_dim`.
    pub block_widths: Vec<usize>,
    /// Standard deviation of the raw-feature noise.
    pub noise_scale: f64,
    /// Standard deviation of outfit members around their centre in the theme block.
    pub cluster_spread: f64,
    pub categories: usize,
    pub outfit_size: usize,
    pub triplets: usize,
    /// Fraction of outfits reserved for compatibility and FITB evaluation.
    pub eval_fraction: f64,
    pub fitb_candidates: usize,
    pub text_dim: Option<usize>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            conditions: 4,
            items: 2400,
            feature_dim: 32,
            latent_dim: 16,
            block_widths: Vec::new(),
            noise_scale: 0.05,
            cluster_spread: 0.15,
            categories: 6,
            outfit_size: 4,
            triplets: 48_000,
            eval_fraction: 0.2,
            fitb_candidates: 4,
            text_dim: None,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Resolved block widths.
    pub fn widths(&self) -> Result<Vec<usize>> {
        if self.conditions == 0 {
            return Err(Error::Config("synthetic data needs at least one condition".into()));
        }
        let widths = if self.block_widths.is_empty() {
            if !self.latent_dim.is_multiple_of(self.conditions) || self.latent_dim == 0 {
                return Err(Error::Config(format!(
                    "latent_dim {} does not split evenly into {} blocks",
                    self.latent_dim, self.conditions
                )));
            }
            vec![self.latent_dim / self.conditions; self.conditions]
        } else {
            self.block_widths.clone()
        };
        if widths.len() != self.conditions || widths.iter().sum::<usize>() != self.latent_dim || widths.contains(&0) {
            return Err(Error::Config(format!(
                "block widths {:?} are inconsistent with {} conditions and latent_dim {}",
                widths, self.conditions, self.latent_dim
            )));
        }
        Ok(widths)
    }

    pub fn validate(&self) -> Result<()> {
        self.widths()?;
        let positive = [
            ("items", self.items),
            ("feature_dim", self.feature_dim),
            ("categories", self.categories),
            ("fitb_candidates", self.fitb_candidates),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("synthetic `{name}` must be positive")));
            }
        }
        if self.outfit_size < 2 || self.outfit_size > self.categories {
            return Err(Error::Config(format!(
                "outfit_size must be between 2 and categories ({}), got {}",
                self.categories, self.outfit_size
            )));
        }
        if self.items < 2 * self.outfit_size {
            return Err(Error::Config("too few items for a train and an evaluation outfit".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config("eval_fraction must lie in [0, 1)".into()));
        }
        if !(self.noise_scale >= 0.0) || !(self.cluster_spread >= 0.0) {
            return Err(Error::Config("noise_scale and cluster_spread must be nonnegative".into()));
        }
        if self.text_dim == Some(0) {
            return Err(Error::Config("text_dim must be positive when present".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub items: ItemTable,
    /// Condition-labelled triplets over training outfits.
    pub triplets: TripletSet,
    /// Compatible and incompatible evaluation outfits.
    pub outfits: OutfitSet,
    pub fitb: FitbSet,
    /// Ground-truth latent vector per item.
    pub latents: Vec<Vec<f64>>,
    /// `[start, end)` of each condition block inside a latent vector.
    pub blocks: Vec<(usize, usize)>,
}

impl SyntheticData {
    /// Distance between two items restricted to one latent block.
    pub fn block_distance(&self, a: usize, b: usize, condition: usize) -> f64 {
        let (s, e) = self.blocks[condition];
        self.latents[a][s..e]
            .iter()
            .zip(&self.latents[b][s..e])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|source| Error::File {
            path: dir.display().to_string(),
            source,
        })?;
        write_file(&dir.join(FEATURES_FILE), format_feature_table(&self.items))?;
        write_file(&dir.join(TRIPLETS_FILE), format_triplets(&self.triplets, &self.items))?;
        write_file(&dir.join(OUTFITS_FILE), format_outfits(&self.outfits, &self.items))?;
        write_file(&dir.join(FITB_FILE), format_fitb(&self.fitb, &self.items))?;
        Ok(())
    }
}

pub const FEATURES_FILE: &str = "features.tsv";
pub const TRIPLETS_FILE: &str = "triplets.txt";
pub const OUTFITS_FILE: &str = "outfits.txt";
pub const FITB_FILE: &str = "fitb.txt";

pub fn condition_label(c: usize) -> String {
    format!("cond{c}")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let widths = spec.widths()?;
    let mut blocks = Vec::with_capacity(widths.len());
    let mut start = 0;
    for w in &widths {
        blocks.push((start, start + w));
        start += w;
    }
    let k = spec.conditions;
    let ld = spec.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let scale = 1.0 / (ld as f64).sqrt();
    let mixing: Vec<Vec<f64>> = (0..spec.feature_dim)
        .map(|_| (0..ld).map(|_| normal(&mut rng) * scale).collect())
        .collect();

    let n_outfits = spec.items / spec.outfit_size;
    let n_eval = ((n_outfits as f64 * spec.eval_fraction).round() as usize).clamp(1, n_outfits - 1);
    let n_train = n_outfits - n_eval;

    let mut latents: Vec<Vec<f64>> = Vec::with_capacity(spec.items);
    let mut categories: Vec<usize> = Vec::with_capacity(spec.items);
    let mut outfit_members: Vec<Vec<usize>> = Vec::with_capacity(n_outfits);
    let mut outfit_condition: Vec<usize> = Vec::with_capacity(n_outfits);
    for o in 0..n_outfits {
        let c = o % k;
        let (s, e) = blocks[c];
        let centre: Vec<f64> = (s..e).map(|_| normal(&mut rng)).collect();
        let cats = index::sample(&mut rng, spec.categories, spec.outfit_size).into_vec();
        let mut members = Vec::with_capacity(spec.outfit_size);
        for cat in cats {
            let mut z: Vec<f64> = (0..ld).map(|_| normal(&mut rng)).collect();
            for (i, zc) in z[s..e].iter_mut().enumerate() {
                *zc = centre[i] + spec.cluster_spread * normal(&mut rng);
            }
            members.push(latents.len());
            latents.push(z);
            categories.push(cat);
        }
        outfit_members.push(members);
        outfit_condition.push(c);
    }
    // leftover items belong to no outfit
    while latents.len() < spec.items {
        latents.push((0..ld).map(|_| normal(&mut rng)).collect());
        categories.push(rng.random_range(0..spec.categories));
    }

    let mut items = Vec::with_capacity(spec.items);
    for (i, z) in latents.iter().enumerate() {
        let visual: Vec<f64> = mixing
            .iter()
            .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + spec.noise_scale * normal(&mut rng))
            .collect();
        let category = format!("cat{}", categories[i]);
        let text = spec.text_dim.map(|t| {
            let mut tokens = vec![category.clone()];
            for (c, &(s, _)) in blocks.iter().enumerate() {
                tokens.push(format!("b{c}:{}{}", z[s] >= 0.0, z.get(s + 1).is_some_and(|v| *v >= 0.0)));
            }
            hash_text_features(&tokens, t)
        });
        items.push(Item {
            id: format!("item{i:05}"),
            category,
            visual,
            text,
        });
    }
    let items = ItemTable::new(items)?;

    let block_dist = |a: usize, b: usize, c: usize| -> f64 {
        let (s, e) = blocks[c];
        latents[a][s..e].iter().zip(&latents[b][s..e]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    };

    // training triplets: anchor and positive share a training outfit
    let train_pool: Vec<usize> = outfit_members[..n_train]
        .iter()
        .flatten()
        .copied()
        .chain(n_outfits * spec.outfit_size..spec.items)
        .collect();
    let mut by_condition: Vec<Vec<usize>> = vec![Vec::new(); k];
    for o in 0..n_train {
        by_condition[outfit_condition[o]].push(o);
    }
    let mut records = Vec::with_capacity(spec.triplets);
    let mut t = 0usize;
    while records.len() < spec.triplets {
        let c = t % k;
        t += 1;
        if by_condition[c].is_empty() {
            if t > spec.triplets * 4 + 4 * k {
                return Err(Error::Config("too few training outfits to draw triplets".into()));
            }
            continue;
        }
        let o = by_condition[c][rng.random_range(0..by_condition[c].len())];
        let pair = index::sample(&mut rng, spec.outfit_size, 2);
        let (a, p) = (outfit_members[o][pair.index(0)], outfit_members[o][pair.index(1)]);
        let dap = block_dist(a, p, c);
        for _ in 0..1000 {
            let n = train_pool[rng.random_range(0..train_pool.len())];
            if n != a && n != p && block_dist(a, n, c) > dap {
                records.push(Triplet::new(a, p, n, Some(condition_label(c))));
                break;
            }
        }
    }

    // evaluation outfits, their category-matched negatives, and FITB questions
    let eval_outfits = &outfit_members[n_train..];
    let mut eval_by_category: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in eval_outfits.iter().flatten() {
        eval_by_category.entry(categories[i]).or_default().push(i);
    }
    let all_eval: Vec<usize> = eval_outfits.iter().flatten().copied().collect();
    let draw_same_category = |rng: &mut ChaCha8Rng, cat: usize, avoid: &[usize]| -> usize {
        let pool = &eval_by_category[&cat];
        let usable = pool.iter().filter(|i| !avoid.contains(i)).count();
        let source: &[usize] = if usable > 0 { pool } else { &all_eval };
        loop {
            let i = source[rng.random_range(0..source.len())];
            if !avoid.contains(&i) {
                return i;
            }
        }
    };
    let mut outfits = Vec::with_capacity(2 * eval_outfits.len());
    for (o, members) in eval_outfits.iter().enumerate() {
        outfits.push(Outfit {
            id: format!("outfit{o:05}"),
            items: members.clone(),
            compatible: true,
        });
        let negative: Vec<usize> = members
            .iter()
            .map(|&m| draw_same_category(&mut rng, categories[m], members))
            .collect();
        outfits.push(Outfit {
            id: format!("outfit{o:05}n"),
            items: negative,
            compatible: false,
        });
    }
    let mut fitb = Vec::new();
    for members in eval_outfits {
        for (slot, &answer_item) in members.iter().enumerate() {
            let partial: Vec<usize> = members.iter().enumerate().filter(|(s, _)| *s != slot).map(|(_, &m)| m).collect();
            let mut candidates = vec![answer_item];
            while candidates.len() < spec.fitb_candidates {
                let mut avoid = members.clone();
                avoid.extend(&candidates);
                if all_eval.iter().all(|i| avoid.contains(i)) {
                    break;
                }
                candidates.push(draw_same_category(&mut rng, categories[answer_item], &avoid));
            }
            candidates.shuffle(&mut rng);
            let answer = candidates.iter().position(|&c| c == answer_item).expect("answer present");
            fitb.push(FitbQuestion {
                partial,
                candidates,
                answer,
            });
        }
    }

    Ok(SyntheticData {
        items,
        triplets: TripletSet::new(records),
        outfits: OutfitSet { records: outfits },
        fitb: FitbSet { records: fitb },
        latents,
        blocks,
    })
}
