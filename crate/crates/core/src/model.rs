//! Forward pass of the similarity condition embedding network.
//!
//! An item's raw feature vector is mapped by the general encoder to `V`.
//! A bank of `M` condition masks re-weights the dimensions of `V`, and a
//! weight branch looks at the items being compared to produce a softmax
//! distribution `w` over the masks. The final embedding is the
//! `w`-weighted combination of the masked copies of `V`, which is the same
//! as masking `V` once with the blended mask `Cᵀw`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::math::{self, affine_backward, affine_forward, softmax, softmax_backward, Activation, Matrix, ParamId, ParamSet};

/// What the condition weight branch looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    /// `concat(V_i, V_j)`
    PairVisual,
    /// `concat(V_a, V_p, V_n)`, one weight vector shared by a whole triplet
    TripletVisual,
    /// `concat(T_i, T_j)`
    PairText,
    /// `concat(V_i ⊙ P(T_i), V_j ⊙ P(T_j))` with `P` an affine text projection
    PairVisualText,
}

impl BranchMode {
    pub const ALL: [BranchMode; 4] = [
        BranchMode::PairVisual,
        BranchMode::TripletVisual,
        BranchMode::PairText,
        BranchMode::PairVisualText,
    ];

    pub fn uses_text(self) -> bool {
        matches!(self, BranchMode::PairText | BranchMode::PairVisualText)
    }

    pub fn default_weighting(self) -> Weighting {
        match self {
            BranchMode::TripletVisual => Weighting::SharedTriplet,
            _ => Weighting::PerPair,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchMode::PairVisual => "pair-visual",
            BranchMode::TripletVisual => "triplet-visual",
            BranchMode::PairText => "pair-text",
            BranchMode::PairVisualText => "pair-visual-text",
        }
    }
}

/// How a triplet is embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Anchor/positive and anchor/negative each get their own weights; the
    /// anchor is embedded twice.
    PerPair,
    /// One weight vector from all three items.
    SharedTriplet,
}

/// Where the mask weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum WeightSource {
    /// The learned condition weight branch.
    Branch,
    /// Constant `1/M`.
    Uniform,
    /// A uniform draw from the simplex, keyed by the compared items' raw
    /// features and the seed, so a given pair always gets the same draw.
    Random { seed: u64 },
    /// One-hot on the record's condition label (strong supervision).
    ConditionLabel { labels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub conditions: usize,
    pub text_dim: Option<usize>,
    pub branch_mode: BranchMode,
    pub branch_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
}

impl ModelConfig {
    /// Defaults: linear encoder, two hidden branch layers of width `2M`.
    pub fn new(feature_dim: usize, embed_dim: usize, conditions: usize, branch_mode: BranchMode) -> Self {
        ModelConfig {
            feature_dim,
            embed_dim,
            conditions,
            text_dim: None,
            branch_mode,
            branch_hidden: vec![2 * conditions, 2 * conditions],
            encoder_hidden: Vec::new(),
        }
    }

    pub fn with_text_dim(mut self, text_dim: usize) -> Self {
        self.text_dim = Some(text_dim);
        self
    }

    pub fn branch_input_dim(&self) -> Result<usize> {
        let d = self.embed_dim;
        Ok(match self.branch_mode {
            BranchMode::PairVisual | BranchMode::PairVisualText => 2 * d,
            BranchMode::TripletVisual => 3 * d,
            BranchMode::PairText => 2 * self.required_text_dim()?,
        })
    }

    fn required_text_dim(&self) -> Result<usize> {
        self.text_dim
            .ok_or_else(|| Error::Config(format!("branch mode {} needs a text dimension", self.branch_mode.name())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.embed_dim == 0 || self.conditions == 0 {
            return Err(Error::Config("feature_dim, embed_dim and conditions must be positive".into()));
        }
        if self.text_dim == Some(0) {
            return Err(Error::Config("text_dim must be positive when present".into()));
        }
        if self.branch_hidden.iter().chain(&self.encoder_hidden).any(|&h| h == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.branch_mode.uses_text() {
            self.required_text_dim()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Linear {
    fn build(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let bound = match activation {
            Activation::Rectifier => (6.0 / fan_in as f64).sqrt(),
            Activation::None => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = params.add(format!("{name}.weight"), Matrix::from_vec(fan_out, fan_in, data).expect("shape"));
        let bias = params.add(format!("{name}.bias"), Matrix::zeros(fan_out, 1));
        Linear { weight, bias, activation }
    }

    fn forward(&self, params: &ParamSet, x: &[f64]) -> Result<Vec<f64>> {
        affine_forward(x, params.value(self.weight), params.value(self.bias).as_slice(), self.activation)
    }

    fn backward(&self, params: &mut ParamSet, x: &[f64], out: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
        let mut grad_b = vec![0.0; out.len()];
        let grad_x = {
            let p = params.get_mut(self.weight);
            let (w, gw) = p.split_mut();
            affine_backward(x, w, out, self.activation, grad_out, gw, &mut grad_b)?
        };
        math::axpy(1.0, &grad_b, params.get_mut(self.bias).grad_mut().as_mut_slice());
        Ok(grad_x)
    }

    fn shape(&self, params: &ParamSet) -> (usize, usize) {
        params.value(self.weight).shape()
    }
}

/// Stack of affine layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations recorded during an [`Mlp`] forward pass; `values[0]` is the
/// input and `values[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub(crate) struct MlpTrace {
    values: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub(crate) fn output(&self) -> &[f64] {
        self.values.last().expect("input recorded")
    }
}

impl Mlp {
    fn build(params: &mut ParamSet, name: &str, widths: &[usize], hidden: Activation, rng: &mut ChaCha8Rng) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { Activation::None } else { hidden };
                Linear::build(params, &format!("{name}.{l}"), widths[l], widths[l + 1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub(crate) fn forward(&self, params: &ParamSet, x: &[f64]) -> Result<MlpTrace> {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_vec());
        for layer in &self.layers {
            let next = layer.forward(params, values.last().expect("nonempty"))?;
            values.push(next);
        }
        Ok(MlpTrace { values })
    }

    pub(crate) fn backward(&self, params: &mut ParamSet, trace: &MlpTrace, grad_out: &[f64]) -> Result<Vec<f64>> {
        let mut grad = grad_out.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            grad = layer.backward(params, &trace.values[l], &trace.values[l + 1], &grad)?;
        }
        Ok(grad)
    }
}

/// `E_j = C_j ⊙ V` for every mask row.
pub fn apply_masks(v: &[f64], masks: &Matrix) -> Result<Matrix> {
    ensure_len("apply_masks embedding", masks.cols(), v)?;
    let mut out = masks.clone();
    for j in 0..masks.rows() {
        for (e, x) in out.row_mut(j).iter_mut().zip(v) {
            *e *= x;
        }
    }
    Ok(out)
}

pub const SIMPLEX_TOL: f64 = 1e-6;

pub fn ensure_simplex(w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL || w.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::Contract(format!("weights are not on the simplex (sum {sum})")));
    }
    Ok(())
}

/// `E = w Oᵀ`: the `w`-weighted sum of the rows of `masked`.
pub fn compose_embedding(masked: &Matrix, w: &[f64]) -> Result<Vec<f64>> {
    ensure_len("compose_embedding weights", masked.rows(), w)?;
    ensure_simplex(w)?;
    masked.matvec_t(w)
}

/// One item as seen by the model: its raw features and optional text.
#[derive(Debug, Clone, Copy)]
pub struct ItemInput<'a> {
    pub raw: &'a [f64],
    pub text: Option<&'a [f64]>,
}

impl<'a> ItemInput<'a> {
    pub fn visual(raw: &'a [f64]) -> Self {
        ItemInput { raw, text: None }
    }

    pub fn with_text(raw: &'a [f64], text: Option<&'a [f64]>) -> Self {
        ItemInput { raw, text }
    }
}

/// Mode-dependent input to [`SceModel::compute_condition_weights`].
#[derive(Debug, Clone, Copy)]
pub enum BranchInput<'a> {
    PairVisual(&'a [f64], &'a [f64]),
    TripletVisual(&'a [f64], &'a [f64], &'a [f64]),
    PairText(&'a [f64], &'a [f64]),
    /// `(V_i, T_i, V_j, T_j)`
    PairVisualText(&'a [f64], &'a [f64], &'a [f64], &'a [f64]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairEmbedding {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TripletEmbedding {
    PerPair {
        anchor_pos: Vec<f64>,
        positive: Vec<f64>,
        anchor_neg: Vec<f64>,
        negative: Vec<f64>,
        weights_pos: Vec<f64>,
        weights_neg: Vec<f64>,
    },
    Shared {
        anchor: Vec<f64>,
        positive: Vec<f64>,
        negative: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl TripletEmbedding {
    /// `(d(anchor, positive), d(anchor, negative))` in the final space.
    pub fn distances(&self) -> (f64, f64) {
        let d = |a: &[f64], b: &[f64]| math::euclidean_distance(a, b).expect("equal lengths");
        match self {
            TripletEmbedding::PerPair {
                anchor_pos,
                positive,
                anchor_neg,
                negative,
                ..
            } => (d(anchor_pos, positive), d(anchor_neg, negative)),
            TripletEmbedding::Shared {
                anchor,
                positive,
                negative,
                ..
            } => (d(anchor, positive), d(anchor, negative)),
        }
    }
}

/// Recorded weight computation for one pair or triplet.
#[derive(Debug, Clone)]
pub(crate) struct WeightTrace {
    pub(crate) weights: Vec<f64>,
    branch: Option<BranchTrace>,
}

#[derive(Debug, Clone)]
struct BranchTrace {
    mlp: MlpTrace,
    /// projected text `P(T_k)` per item, visual-text mode only
    projected: Vec<(Vec<f64>, Vec<f64>)>,
}

/// The full network: encoder, mask bank, weight branch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceModel {
    pub config: ModelConfig,
    pub weight_source: WeightSource,
    encoder: Mlp,
    masks: ParamId,
    branch: Mlp,
    text_projection: Option<Linear>,
    pub params: ParamSet,
}

impl SceModel {
    /// Random initialisation: masks uniform in `[0.9, 1.1]`, encoder and
    /// branch layers uniform fan-scaled, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();

        let mut enc_widths = vec![config.feature_dim];
        enc_widths.extend(&config.encoder_hidden);
        enc_widths.push(config.embed_dim);
        let encoder = Mlp::build(&mut params, "encoder", &enc_widths, Activation::Rectifier, &mut rng);

        let (m, d) = (config.conditions, config.embed_dim);
        let mask_data = (0..m * d).map(|_| rng.random_range(0.9..1.1)).collect();
        let masks = params.add("masks", Matrix::from_vec(m, d, mask_data)?);

        let mut branch_widths = vec![config.branch_input_dim()?];
        branch_widths.extend(&config.branch_hidden);
        branch_widths.push(m);
        let branch = Mlp::build(&mut params, "branch", &branch_widths, Activation::Rectifier, &mut rng);

        let text_projection = config
            .text_dim
            .map(|t| Linear::build(&mut params, "text_projection", t, d, Activation::None, &mut rng));

        let model = SceModel {
            config,
            weight_source: WeightSource::Branch,
            encoder,
            masks,
            branch,
            text_projection,
            params,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn conditions(&self) -> usize {
        self.config.conditions
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn masks(&self) -> &Matrix {
        self.params.value(self.masks)
    }

    pub fn masks_mut(&mut self) -> &mut Matrix {
        &mut self.params.get_mut(self.masks).value
    }

    pub(crate) fn masks_id(&self) -> ParamId {
        self.masks
    }

    pub fn set_masks_trainable(&mut self, trainable: bool) {
        self.params.get_mut(self.masks).trainable = trainable;
    }

    pub fn has_text_projection(&self) -> bool {
        self.text_projection.is_some()
    }

    pub fn branch_layers(&self) -> &[Linear] {
        &self.branch.layers
    }

    pub fn encoder_layers(&self) -> &[Linear] {
        &self.encoder.layers
    }

    /// Checks every parameter shape against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let check_layer = |name: &str, layer: &Linear, rows: usize, cols: usize| -> Result<()> {
            for id in [layer.weight, layer.bias] {
                if !self.params.contains(id) {
                    return Err(Error::Checkpoint(format!("{name} references a missing parameter")));
                }
            }
            let w = self.params.get(layer.weight);
            let b = self.params.get(layer.bias);
            shape_eq(&w.name, w.value.shape(), (rows, cols))?;
            shape_eq(&b.name, b.value.shape(), (rows, 1))
        };
        let check_mlp = |name: &str, mlp: &Mlp, input: usize, hidden: &[usize], output: usize| -> Result<()> {
            let mut widths = vec![input];
            widths.extend(hidden);
            widths.push(output);
            if mlp.layers.len() != widths.len() - 1 {
                return Err(Error::Shape {
                    field: format!("{name}.layers"),
                    expected: (widths.len() - 1).to_string(),
                    found: mlp.layers.len().to_string(),
                });
            }
            for (l, layer) in mlp.layers.iter().enumerate() {
                check_layer(name, layer, widths[l + 1], widths[l])?;
            }
            Ok(())
        };
        let c = &self.config;
        check_mlp("encoder", &self.encoder, c.feature_dim, &c.encoder_hidden, c.embed_dim)?;
        if !self.params.contains(self.masks) {
            return Err(Error::Checkpoint("mask bank references a missing parameter".into()));
        }
        shape_eq("masks", self.masks().shape(), (c.conditions, c.embed_dim))?;
        check_mlp("branch", &self.branch, c.branch_input_dim()?, &c.branch_hidden, c.conditions)?;
        match (&self.text_projection, c.text_dim) {
            (Some(p), Some(t)) => check_layer("text_projection", p, c.embed_dim, t)?,
            (None, None) => {}
            _ => return Err(Error::Checkpoint("text projection does not match text_dim".into())),
        }
        for p in self.params.iter() {
            if !p.value.is_finite() {
                return Err(Error::Numeric(format!("parameter `{}` has non-finite entries", p.name)));
            }
        }
        if let WeightSource::ConditionLabel { labels } = &self.weight_source {
            if labels.is_empty() || labels.len() > c.conditions {
                return Err(Error::Config(format!(
                    "condition-label weighting needs between 1 and {} labels, got {}",
                    c.conditions,
                    labels.len()
                )));
            }
        }
        Ok(())
    }

    /// Errors naming the first dimension that differs from `expected`.
    pub fn ensure_matches(&self, expected: &ModelConfig) -> Result<()> {
        let c = &self.config;
        let fields: [(&str, String, String); 5] = [
            ("conditions", expected.conditions.to_string(), c.conditions.to_string()),
            ("embed_dim", expected.embed_dim.to_string(), c.embed_dim.to_string()),
            ("feature_dim", expected.feature_dim.to_string(), c.feature_dim.to_string()),
            ("text_dim", format!("{:?}", expected.text_dim), format!("{:?}", c.text_dim)),
            ("branch_mode", expected.branch_mode.name().to_string(), c.branch_mode.name().to_string()),
        ];
        for (field, exp, found) in fields {
            if exp != found {
                return Err(Error::Shape {
                    field: field.to_string(),
                    expected: exp,
                    found,
                });
            }
        }
        Ok(())
    }

    /// Copies the encoder and, unless frozen here, the mask bank from `donor`.
    /// The weight branch and text projection keep their own values, so the
    /// donor may use a different branch mode. The mask count only has to
    /// agree when masks are copied.
    pub fn transfer_from(&mut self, donor: &SceModel) -> Result<()> {
        let (c, d) = (&self.config, &donor.config);
        let copy_masks = self.params.get(self.masks).trainable;
        let fields: [(&str, String, String); 4] = [
            ("feature_dim", c.feature_dim.to_string(), d.feature_dim.to_string()),
            ("embed_dim", c.embed_dim.to_string(), d.embed_dim.to_string()),
            ("encoder_hidden", format!("{:?}", c.encoder_hidden), format!("{:?}", d.encoder_hidden)),
            ("conditions", c.conditions.to_string(), d.conditions.to_string()),
        ];
        for (field, expected, found) in fields {
            if field == "conditions" && !copy_masks {
                continue;
            }
            if expected != found {
                return Err(Error::Shape {
                    field: field.to_string(),
                    expected,
                    found,
                });
            }
        }
        for (to, from) in self.encoder.layers.iter().zip(&donor.encoder.layers) {
            for (dst, src) in [(to.weight, from.weight), (to.bias, from.bias)] {
                self.params.get_mut(dst).value = donor.params.value(src).clone();
            }
        }
        if copy_masks {
            *self.masks_mut() = donor.masks().clone();
        }
        Ok(())
    }

    pub fn encode(&self, raw: &[f64]) -> Result<Vec<f64>> {
        ensure_len("encoder input", self.config.feature_dim, raw)?;
        Ok(self.encoder.forward(&self.params, raw)?.output().to_vec())
    }

    pub(crate) fn encode_traced(&self, raw: &[f64]) -> Result<MlpTrace> {
        ensure_len("encoder input", self.config.feature_dim, raw)?;
        self.encoder.forward(&self.params, raw)
    }

    pub(crate) fn encode_backward(&mut self, trace: &MlpTrace, grad_v: &[f64]) -> Result<()> {
        let encoder = self.encoder.clone();
        encoder.backward(&mut self.params, trace, grad_v)?;
        Ok(())
    }

    /// Applies the learned text projection `P(T)`.
    pub fn project_text(&self, text: &[f64]) -> Result<Vec<f64>> {
        let proj = self
            .text_projection
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no text projection".into()))?;
        ensure_len("text features", proj.shape(&self.params).1, text)?;
        proj.forward(&self.params, text)
    }

    pub(crate) fn project_text_backward(&mut self, text: &[f64], out: &[f64], grad_out: &[f64]) -> Result<()> {
        let proj = self
            .text_projection
            .clone()
            .ok_or_else(|| Error::Contract("model has no text projection".into()))?;
        proj.backward(&mut self.params, text, out, grad_out)?;
        Ok(())
    }

    /// Runs the weight branch on a mode-matched input bundle.
    pub fn compute_condition_weights(&self, input: BranchInput<'_>) -> Result<Vec<f64>> {
        let mode = self.config.branch_mode;
        let y = match (mode, input) {
            (BranchMode::PairVisual, BranchInput::PairVisual(a, b)) => self.concat_visual(&[a, b])?,
            (BranchMode::TripletVisual, BranchInput::TripletVisual(a, b, c)) => self.concat_visual(&[a, b, c])?,
            (BranchMode::PairText, BranchInput::PairText(a, b)) => self.concat_text(&[a, b])?,
            (BranchMode::PairVisualText, BranchInput::PairVisualText(vi, ti, vj, tj)) => {
                let d = self.config.embed_dim;
                ensure_len("branch visual input", d, vi)?;
                ensure_len("branch visual input", d, vj)?;
                let ui = math::hadamard(vi, &self.project_text(ti)?)?;
                let uj = math::hadamard(vj, &self.project_text(tj)?)?;
                [ui, uj].concat()
            }
            _ => {
                return Err(Error::Contract(format!(
                    "branch mode {} cannot take a {} input",
                    mode.name(),
                    input_name(&input)
                )))
            }
        };
        let logits = self.branch.forward(&self.params, &y)?;
        softmax(logits.output())
    }

    fn concat_visual(&self, parts: &[&[f64]]) -> Result<Vec<f64>> {
        for p in parts {
            ensure_len("branch visual input", self.config.embed_dim, p)?;
        }
        Ok(parts.concat())
    }

    fn concat_text(&self, parts: &[&[f64]]) -> Result<Vec<f64>> {
        let t = self.config.text_dim.unwrap_or(0);
        for p in parts {
            ensure_len("branch text input", t, p)?;
        }
        Ok(parts.concat())
    }

    /// Weight vector for a group of items (2 for a pair, 3 for a shared
    /// triplet), with everything needed to backpropagate into the branch.
    pub(crate) fn weights_traced(
        &self,
        items: &[ItemInput<'_>],
        encoded: &[&[f64]],
        condition: Option<&str>,
    ) -> Result<WeightTrace> {
        let m = self.config.conditions;
        match &self.weight_source {
            WeightSource::Uniform => {
                return Ok(WeightTrace {
                    weights: vec![1.0 / m as f64; m],
                    branch: None,
                })
            }
            WeightSource::Random { seed } => {
                return Ok(WeightTrace {
                    weights: random_simplex(*seed, items, m),
                    branch: None,
                })
            }
            WeightSource::ConditionLabel { labels } => {
                let label = condition.ok_or_else(|| Error::Input("record has no condition label".into()))?;
                let j = labels
                    .iter()
                    .position(|l| l == label)
                    .ok_or_else(|| Error::Input(format!("unknown condition label `{label}`")))?;
                let mut w = vec![0.0; m];
                w[j] = 1.0;
                return Ok(WeightTrace { weights: w, branch: None });
            }
            WeightSource::Branch => {}
        }

        let mode = self.config.branch_mode;
        let expected = if mode == BranchMode::TripletVisual { 3 } else { 2 };
        if items.len() != expected {
            return Err(Error::Contract(format!(
                "branch mode {} needs {expected} items, got {}",
                mode.name(),
                items.len()
            )));
        }
        fn text_of<'t>(it: &ItemInput<'t>, mode: BranchMode) -> Result<&'t [f64]> {
            it.text
                .ok_or_else(|| Error::Input(format!("branch mode {} requires text features", mode.name())))
        }
        let mut projected = Vec::new();
        let y = match mode {
            BranchMode::PairVisual | BranchMode::TripletVisual => self.concat_visual(encoded)?,
            BranchMode::PairText => {
                let texts = items.iter().map(|it| text_of(it, mode)).collect::<Result<Vec<_>>>()?;
                self.concat_text(&texts)?
            }
            BranchMode::PairVisualText => {
                let mut y = Vec::with_capacity(2 * self.config.embed_dim);
                for (it, v) in items.iter().zip(encoded) {
                    let t = text_of(it, mode)?;
                    let p = self.project_text(t)?;
                    y.extend(math::hadamard(v, &p)?);
                    projected.push((t.to_vec(), p));
                }
                y
            }
        };
        let mlp = self.branch.forward(&self.params, &y)?;
        let weights = softmax(mlp.output())?;
        Ok(WeightTrace {
            weights,
            branch: Some(BranchTrace { mlp, projected }),
        })
    }

    /// Backpropagates `grad_w` through the branch. Returns the gradient with
    /// respect to each encoded input (zero where the branch ignores it).
    pub(crate) fn weights_backward(
        &mut self,
        trace: &WeightTrace,
        encoded: &[&[f64]],
        grad_w: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        let d = self.config.embed_dim;
        let mut grads = vec![vec![0.0; d]; encoded.len()];
        let Some(bt) = &trace.branch else {
            return Ok(grads);
        };
        let grad_logits = softmax_backward(&trace.weights, grad_w);
        let branch = self.branch.clone();
        let grad_y = branch.backward(&mut self.params, &bt.mlp, &grad_logits)?;
        match self.config.branch_mode {
            BranchMode::PairVisual | BranchMode::TripletVisual => {
                for (k, g) in grads.iter_mut().enumerate() {
                    g.copy_from_slice(&grad_y[k * d..(k + 1) * d]);
                }
            }
            BranchMode::PairText => {}
            BranchMode::PairVisualText => {
                for (k, g) in grads.iter_mut().enumerate() {
                    let gu = &grad_y[k * d..(k + 1) * d];
                    let (text, proj) = &bt.projected[k];
                    for i in 0..d {
                        g[i] = gu[i] * proj[i];
                    }
                    let grad_proj: Vec<f64> = gu.iter().zip(encoded[k]).map(|(a, b)| a * b).collect();
                    self.project_text_backward(text, proj, &grad_proj)?;
                }
            }
        }
        Ok(grads)
    }

    /// Blended mask `Cᵀw`; the final embedding of `V` is `Cᵀw ⊙ V`.
    pub fn blended_mask(&self, w: &[f64]) -> Result<Vec<f64>> {
        ensure_len("mask weights", self.config.conditions, w)?;
        self.masks().matvec_t(w)
    }

    /// Gradient bookkeeping for `blended = Cᵀw`: accumulates into the masks
    /// and returns the gradient with respect to `w`.
    pub(crate) fn blended_mask_backward(&mut self, w: &[f64], grad_blended: &[f64]) -> Result<Vec<f64>> {
        let id = self.masks;
        let p = self.params.get_mut(id);
        let (masks, grad) = p.split_mut();
        grad.add_outer(1.0, w, grad_blended);
        masks.matvec(grad_blended)
    }

    /// Embeds both members of a pair with the same weight vector.
    pub fn embed_pair(&self, first: ItemInput<'_>, second: ItemInput<'_>) -> Result<PairEmbedding> {
        self.embed_pair_labeled(first, second, None)
    }

    /// As [`SceModel::embed_pair`], passing a condition label for
    /// label-driven weighting.
    pub fn embed_pair_labeled(
        &self,
        first: ItemInput<'_>,
        second: ItemInput<'_>,
        condition: Option<&str>,
    ) -> Result<PairEmbedding> {
        let vi = self.encode(first.raw)?;
        let vj = self.encode(second.raw)?;
        self.embed_encoded_pair(first, second, &vi, &vj, condition)
    }

    pub(crate) fn embed_encoded_pair(
        &self,
        first: ItemInput<'_>,
        second: ItemInput<'_>,
        vi: &[f64],
        vj: &[f64],
        condition: Option<&str>,
    ) -> Result<PairEmbedding> {
        self.require_pair_mode()?;
        let trace = self.weights_traced(&[first, second], &[vi, vj], condition)?;
        let c = self.blended_mask(&trace.weights)?;
        Ok(PairEmbedding {
            first: math::hadamard(&c, vi)?,
            second: math::hadamard(&c, vj)?,
            weights: trace.weights,
        })
    }

    fn require_pair_mode(&self) -> Result<()> {
        if self.config.branch_mode == BranchMode::TripletVisual && self.weight_source == WeightSource::Branch {
            return Err(Error::Contract("a triplet-visual branch cannot weight a single pair".into()));
        }
        Ok(())
    }

    pub fn check_weighting(&self, weighting: Weighting) -> Result<()> {
        if self.weight_source != WeightSource::Branch {
            return Ok(());
        }
        let triplet_branch = self.config.branch_mode == BranchMode::TripletVisual;
        match (weighting, triplet_branch) {
            (Weighting::SharedTriplet, false) => Err(Error::Contract(
                "shared-triplet weighting requires a triplet-visual branch".into(),
            )),
            (Weighting::PerPair, true) => Err(Error::Contract(
                "per-pair weighting cannot use a triplet-visual branch".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn embed_triplet(
        &self,
        anchor: ItemInput<'_>,
        positive: ItemInput<'_>,
        negative: ItemInput<'_>,
        weighting: Weighting,
        condition: Option<&str>,
    ) -> Result<TripletEmbedding> {
        let va = self.encode(anchor.raw)?;
        let vp = self.encode(positive.raw)?;
        let vn = self.encode(negative.raw)?;
        self.embed_encoded_triplet([anchor, positive, negative], [&va, &vp, &vn], weighting, condition)
    }

    pub(crate) fn embed_encoded_triplet(
        &self,
        items: [ItemInput<'_>; 3],
        encoded: [&[f64]; 3],
        weighting: Weighting,
        condition: Option<&str>,
    ) -> Result<TripletEmbedding> {
        self.check_weighting(weighting)?;
        let [a, p, n] = items;
        let [va, vp, vn] = encoded;
        match weighting {
            Weighting::PerPair => {
                let pos = self.embed_encoded_pair(a, p, va, vp, condition)?;
                let neg = self.embed_encoded_pair(a, n, va, vn, condition)?;
                Ok(TripletEmbedding::PerPair {
                    anchor_pos: pos.first,
                    positive: pos.second,
                    anchor_neg: neg.first,
                    negative: neg.second,
                    weights_pos: pos.weights,
                    weights_neg: neg.weights,
                })
            }
            Weighting::SharedTriplet => {
                let trace = self.weights_traced(&[a, p, n], &[va, vp, vn], condition)?;
                let c = self.blended_mask(&trace.weights)?;
                Ok(TripletEmbedding::Shared {
                    anchor: math::hadamard(&c, va)?,
                    positive: math::hadamard(&c, vp)?,
                    negative: math::hadamard(&c, vn)?,
                    weights: trace.weights,
                })
            }
        }
    }
}

fn shape_eq(name: &str, found: (usize, usize), expected: (usize, usize)) -> Result<()> {
    if found != expected {
        return Err(Error::Shape {
            field: name.to_string(),
            expected: format!("{}x{}", expected.0, expected.1),
            found: format!("{}x{}", found.0, found.1),
        });
    }
    Ok(())
}

fn input_name(input: &BranchInput<'_>) -> &'static str {
    match input {
        BranchInput::PairVisual(..) => "pair-visual",
        BranchInput::TripletVisual(..) => "triplet-visual",
        BranchInput::PairText(..) => "pair-text",
        BranchInput::PairVisualText(..) => "pair-visual-text",
    }
}

/// Uniform point on the simplex from normalised exponential draws, keyed by
/// the items' raw features.
fn random_simplex(seed: u64, items: &[ItemInput<'_>], m: usize) -> Vec<f64> {
    let mut h = crate::data::Fnv1a::with_seed(seed);
    for it in items {
        for x in it.raw {
            h.write(&x.to_bits().to_le_bytes());
        }
        h.write(&[0xff]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
    let draws: Vec<f64> = (0..m).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|e| e / total).collect()
}
