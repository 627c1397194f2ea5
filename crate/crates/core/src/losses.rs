//! Training objectives.
//!
//! The composite objective is the mean triplet hinge over a batch plus an
//! l1 penalty on the mask bank, an l2 penalty on the general embeddings and,
//! optionally, visual-semantic (VSE) and similarity (Sim) hinge terms.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Item, ItemTable, Triplet};
use crate::error::{Error, Result};
use crate::math::{self, check_gradients, GradCheckReport, Matrix};
use crate::model::{BranchMode, ItemInput, ModelConfig, SceModel, WeightTrace, Weighting};

/// Margin and penalty weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub margin: f64,
    /// l1 on the masks
    pub l1: f64,
    /// l2 on the general embeddings
    pub l2: f64,
    pub vse: f64,
    pub sim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            margin: 0.2,
            l1: 5e-4,
            l2: 5e-4,
            vse: 5e-5,
            sim: 5e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("margin", self.margin),
            ("l1", self.l1),
            ("l2", self.l2),
            ("vse", self.vse),
            ("sim", self.sim),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight `{name}` must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// `max(0, d_pos - d_neg + margin)`.
pub fn triplet_loss(d_pos: f64, d_neg: f64, margin: f64) -> Result<f64> {
    if !(d_pos >= 0.0) || !(d_neg >= 0.0) {
        return Err(Error::Contract(format!("distances must be nonnegative, got {d_pos} and {d_neg}")));
    }
    Ok(hinge(d_pos - d_neg + margin))
}

fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// Mean absolute mask entry.
pub fn l1_mask_penalty(masks: &Matrix) -> f64 {
    let n = masks.as_slice().len();
    if n == 0 {
        return 0.0;
    }
    masks.as_slice().iter().map(|x| x.abs()).sum::<f64>() / n as f64
}

/// Mean squared norm over a batch of general embeddings.
pub fn l2_embedding_penalty<V: AsRef<[f64]>>(batch: &[V]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("l2 penalty of an empty batch".into()));
    }
    Ok(batch.iter().map(|v| math::squared_norm(v.as_ref())).sum::<f64>() / batch.len() as f64)
}

/// Two-hinge visual-semantic loss for one image against its own projected
/// description `t_own` and the two other descriptions of its triplet.
pub fn vse_loss(v: &[f64], t_own: &[f64], t_other1: &[f64], t_other2: &[f64], margin: f64) -> Result<f64> {
    let own = math::euclidean_distance(v, t_own)?;
    let d1 = math::euclidean_distance(v, t_other1)?;
    let d2 = math::euclidean_distance(v, t_other2)?;
    Ok(hinge(own - d1 + margin) + hinge(own - d2 + margin))
}

/// `max(0, d(v_j, v_k) - d(v_i, v_j) + margin)` in the general space, where
/// `v_j`, `v_k` are the positive/negative pair and `v_i` the anchor.
pub fn sim_loss(v_j: &[f64], v_k: &[f64], v_i: &[f64], margin: f64) -> Result<f64> {
    let jk = math::euclidean_distance(v_j, v_k)?;
    let ij = math::euclidean_distance(v_i, v_j)?;
    Ok(hinge(jk - ij + margin))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    pub weighting: Weighting,
    pub use_vse_sim: bool,
}

/// Value of the objective and its components (each already averaged, not
/// yet multiplied by its weight).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObjectiveBreakdown {
    pub total: f64,
    pub triplet: f64,
    pub l1: f64,
    pub l2: f64,
    pub vse: f64,
    pub sim: f64,
}

/// State of `d = ‖c ⊙ (v_i - v_j)‖` kept for the backward pass.
struct MaskedDistance {
    raw_diff: Vec<f64>,
    diff: Vec<f64>,
    dist: f64,
}

impl MaskedDistance {
    fn new(blended: &[f64], vi: &[f64], vj: &[f64]) -> Self {
        let raw_diff = math::sub(vi, vj);
        let diff: Vec<f64> = raw_diff.iter().zip(blended).map(|(r, c)| r * c).collect();
        let dist = math::squared_norm(&diff).sqrt();
        MaskedDistance { raw_diff, diff, dist }
    }

    /// Adds `upstream * ∂d` into the mask-blend and embedding gradients.
    fn backward(&self, blended: &[f64], upstream: f64, grad_c: &mut [f64], grad_vi: &mut [f64], grad_vj: &mut [f64]) {
        let g = math::norm_backward(&self.diff, self.dist, upstream);
        for k in 0..g.len() {
            grad_c[k] += g[k] * self.raw_diff[k];
            grad_vi[k] += g[k] * blended[k];
            grad_vj[k] -= g[k] * blended[k];
        }
    }
}

/// Plain distance `‖a - b‖` with its backward.
fn distance_with_grad(a: &[f64], b: &[f64], upstream: f64, grad_a: &mut [f64], grad_b: &mut [f64]) -> f64 {
    let diff = math::sub(a, b);
    let d = math::squared_norm(&diff).sqrt();
    if upstream != 0.0 {
        let g = math::norm_backward(&diff, d, upstream);
        math::axpy(1.0, &g, grad_a);
        math::axpy(-1.0, &g, grad_b);
    }
    d
}

/// One weight vector and the distances it blends.
struct WeightedGroup {
    trace: WeightTrace,
    blended: Vec<f64>,
}

impl WeightedGroup {
    fn forward(model: &SceModel, items: &[ItemInput<'_>], encoded: &[&[f64]], condition: Option<&str>) -> Result<Self> {
        let trace = model.weights_traced(items, encoded, condition)?;
        let blended = model.blended_mask(&trace.weights)?;
        Ok(WeightedGroup { trace, blended })
    }

    /// Pushes the blend gradient through the masks and the branch, adding
    /// the branch's input gradients into `grad_v` at the given roles.
    fn backward(&self, model: &mut SceModel, grad_c: &[f64], encoded: &[&[f64]], roles: &[usize], grad_v: &mut [Vec<f64>]) -> Result<()> {
        let grad_w = model.blended_mask_backward(&self.trace.weights, grad_c)?;
        let grads = model.weights_backward(&self.trace, encoded, &grad_w)?;
        for (g, &r) in grads.iter().zip(roles) {
            math::axpy(1.0, g, &mut grad_v[r]);
        }
        Ok(())
    }
}

fn require_text(items: &ItemTable, idx: usize) -> Result<&[f64]> {
    items.get(idx).text.as_deref().ok_or_else(|| {
        Error::Input(format!("item `{}` has no text features, which the VSE/Sim objective needs", items.get(idx).id))
    })
}

/// Evaluates the composite objective on `batch`. When `accumulate` is set,
/// gradients of the returned total are added to the model's gradient slots.
pub fn total_objective(
    model: &mut SceModel,
    items: &ItemTable,
    batch: &[Triplet],
    weights: &LossWeights,
    options: ObjectiveOptions,
    accumulate: bool,
) -> Result<ObjectiveBreakdown> {
    if batch.is_empty() {
        return Err(Error::Input("objective of an empty batch".into()));
    }
    weights.validate()?;
    check_text_dims(items, model)?;
    model.check_weighting(options.weighting)?;
    if options.use_vse_sim && !model.has_text_projection() {
        return Err(Error::Input("VSE/Sim terms need a model with a text projection".into()));
    }
    let b = batch.len() as f64;
    let mu = weights.margin;
    let d = model.embed_dim();
    let mut out = ObjectiveBreakdown::default();

    for t in batch {
        let idx = [t.anchor, t.positive, t.negative];
        let inputs: Vec<ItemInput<'_>> = idx.iter().map(|&i| items.input(i)).collect();
        let traces = inputs.iter().map(|it| model.encode_traced(it.raw)).collect::<Result<Vec<_>>>()?;
        let vs: Vec<Vec<f64>> = traces.iter().map(|tr| tr.output().to_vec()).collect();
        let [va, vp, vn] = [&vs[0][..], &vs[1][..], &vs[2][..]];
        let cond = t.condition.as_deref();
        let mut grad_v = vec![vec![0.0; d]; 3];

        // triplet hinge
        match options.weighting {
            Weighting::PerPair => {
                let pos = WeightedGroup::forward(model, &[inputs[0], inputs[1]], &[va, vp], cond)?;
                let neg = WeightedGroup::forward(model, &[inputs[0], inputs[2]], &[va, vn], cond)?;
                let dpos = MaskedDistance::new(&pos.blended, va, vp);
                let dneg = MaskedDistance::new(&neg.blended, va, vn);
                let h = triplet_loss(dpos.dist, dneg.dist, mu)?;
                out.triplet += h / b;
                if accumulate && h > 0.0 {
                    for (group, dist, sign, other) in [(&pos, &dpos, 1.0, 1usize), (&neg, &dneg, -1.0, 2usize)] {
                        let mut grad_c = vec![0.0; d];
                        let (ga, go) = split_pair(&mut grad_v, 0, other);
                        dist.backward(&group.blended, sign / b, &mut grad_c, ga, go);
                        let encoded = [va, &vs[other][..]];
                        group.backward(model, &grad_c, &encoded, &[0, other], &mut grad_v)?;
                    }
                }
            }
            Weighting::SharedTriplet => {
                let group = WeightedGroup::forward(model, &inputs, &[va, vp, vn], cond)?;
                let dpos = MaskedDistance::new(&group.blended, va, vp);
                let dneg = MaskedDistance::new(&group.blended, va, vn);
                let h = triplet_loss(dpos.dist, dneg.dist, mu)?;
                out.triplet += h / b;
                if accumulate && h > 0.0 {
                    let mut grad_c = vec![0.0; d];
                    {
                        let (ga, gp) = split_pair(&mut grad_v, 0, 1);
                        dpos.backward(&group.blended, 1.0 / b, &mut grad_c, ga, gp);
                    }
                    {
                        let (ga, gn) = split_pair(&mut grad_v, 0, 2);
                        dneg.backward(&group.blended, -1.0 / b, &mut grad_c, ga, gn);
                    }
                    group.backward(model, &grad_c, &[va, vp, vn], &[0, 1, 2], &mut grad_v)?;
                }
            }
        }

        // l2 on general embeddings, averaged over all 3B embeddings
        for (k, v) in vs.iter().enumerate() {
            out.l2 += math::squared_norm(v) / (3.0 * b);
            if accumulate && weights.l2 != 0.0 {
                math::axpy(2.0 * weights.l2 / (3.0 * b), v, &mut grad_v[k]);
            }
        }

        if options.use_vse_sim {
            let texts = idx.iter().map(|&i| require_text(items, i)).collect::<Result<Vec<_>>>()?;
            let projected = texts.iter().map(|t| model.project_text(t)).collect::<Result<Vec<_>>>()?;
            let mut grad_pt = vec![vec![0.0; d]; 3];
            let scale = weights.vse / (3.0 * b);
            for i in 0..3 {
                let (j, k) = ((i + 1) % 3, (i + 2) % 3);
                let own = math::euclidean_distance(&vs[i], &projected[i])?;
                for other in [j, k] {
                    let dn = math::euclidean_distance(&vs[i], &projected[other])?;
                    let h = hinge(own - dn + mu);
                    out.vse += h / (3.0 * b);
                    if accumulate && h > 0.0 && scale != 0.0 {
                        distance_with_grad(&vs[i], &projected[i], scale, &mut grad_v[i], &mut grad_pt[i]);
                        let mut gv = vec![0.0; d];
                        distance_with_grad(&vs[i], &projected[other], -scale, &mut gv, &mut grad_pt[other]);
                        math::axpy(1.0, &gv, &mut grad_v[i]);
                    }
                }
            }

            let s = sim_loss(vp, vn, va, mu)?;
            out.sim += s / b;
            if accumulate && s > 0.0 && weights.sim != 0.0 {
                let up = weights.sim / b;
                let (gp, gn) = split_pair(&mut grad_v, 1, 2);
                distance_with_grad(vp, vn, up, gp, gn);
                let (ga, gp) = split_pair(&mut grad_v, 0, 1);
                distance_with_grad(va, vp, -up, ga, gp);
            }

            if accumulate {
                for k in 0..3 {
                    model.project_text_backward(texts[k], &projected[k], &grad_pt[k])?;
                }
            }
        }

        if accumulate {
            for (trace, g) in traces.iter().zip(&grad_v) {
                model.encode_backward(trace, g)?;
            }
        }
    }

    out.l1 = l1_mask_penalty(model.masks());
    if accumulate && weights.l1 != 0.0 {
        let id = model.masks_id();
        let p = model.params.get_mut(id);
        let n = p.len() as f64;
        let (masks, grad) = p.split_mut();
        for (g, c) in grad.as_mut_slice().iter_mut().zip(masks.as_slice()) {
            if *c != 0.0 {
                *g += weights.l1 * c.signum() / n;
            }
        }
    }

    out.total = out.triplet + weights.l1 * out.l1 + weights.l2 * out.l2;
    if options.use_vse_sim {
        out.total += weights.vse * out.vse + weights.sim * out.sim;
    }
    if !out.total.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {}", out.total)));
    }
    Ok(out)
}

/// Two distinct mutable rows of `grads`.
fn split_pair(grads: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

pub(crate) fn check_text_dims(items: &ItemTable, model: &SceModel) -> Result<()> {
    if let (Some(t), Some(expected)) = (items.text_dim(), model.config.text_dim) {
        if t != expected {
            return Err(Error::dim("text features", expected, t));
        }
    }
    if items.feature_dim() != model.config.feature_dim {
        return Err(Error::dim("item features", model.config.feature_dim, items.feature_dim()));
    }
    Ok(())
}

/// Central-difference check of every model parameter against the analytic
/// gradient of [`total_objective`] on `batch`.
pub fn check_objective_gradients(
    model: &mut SceModel,
    items: &ItemTable,
    batch: &[Triplet],
    weights: &LossWeights,
    options: ObjectiveOptions,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut params = std::mem::take(&mut model.params);
    let report = check_gradients(
        &mut params,
        |p| {
            std::mem::swap(p, &mut model.params);
            let r = total_objective(model, items, batch, weights, options, true);
            std::mem::swap(p, &mut model.params);
            Ok(r?.total)
        },
        eps,
        tol,
    );
    model.params = params;
    report
}

/// One entry of [`gradient_suite`].
#[derive(Debug, Clone)]
pub struct GradientCase {
    pub mode: BranchMode,
    pub use_vse_sim: bool,
    pub report: GradCheckReport,
}

/// Gradient check of a small random model (8 raw features, 6-d embedding,
/// 3 masks, batch of 4) in every branch mode, with and without the VSE and
/// Sim terms. Every penalty weight is non-zero so each term is exercised.
pub fn gradient_suite(seed: u64, eps: f64, tol: f64) -> Result<Vec<GradientCase>> {
    const FEATURES: usize = 8;
    const TEXT: usize = 5;
    let weights = LossWeights {
        margin: 1.5,
        l1: 0.3,
        l2: 0.2,
        vse: 0.4,
        sim: 0.5,
    };
    let batch = [
        Triplet::new(0, 1, 2, None),
        Triplet::new(3, 4, 5, None),
        Triplet::new(6, 7, 0, None),
        Triplet::new(2, 5, 7, None),
    ];
    let mut cases = Vec::new();
    for (i, mode) in BranchMode::ALL.into_iter().enumerate() {
        for use_vse_sim in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2 * i as u64 + u64::from(use_vse_sim));
            let mut uniform = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let items = (0..8)
                .map(|k| Item {
                    id: format!("i{k}"),
                    category: format!("c{}", k % 2),
                    visual: uniform(FEATURES),
                    text: Some(uniform(TEXT)),
                })
                .collect();
            let items = ItemTable::new(items)?;
            let mut config = ModelConfig::new(FEATURES, 6, 3, mode).with_text_dim(TEXT);
            config.encoder_hidden = vec![7];
            let mut model = SceModel::new(config, seed.wrapping_add(i as u64))?;
            // Zero biases put every pre-activation of a dead layer's successor
            // exactly on the rectifier corner.
            for p in model.params.iter_mut().filter(|p| p.name.ends_with(".bias")) {
                for b in p.value.as_mut_slice() {
                    *b = rng.random_range(-0.3..0.3);
                }
            }
            let options = ObjectiveOptions {
                weighting: mode.default_weighting(),
                use_vse_sim,
            };
            let report = check_objective_gradients(&mut model, &items, &batch, &weights, options, eps, tol)?;
            cases.push(GradientCase {
                mode,
                use_vse_sim,
                report,
            });
        }
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_loss(0.0, 0.2, 0.2).unwrap(), 0.0);
        assert!((triplet_loss(0.7, 0.7, 0.2).unwrap() - 0.2).abs() < 1e-15);
        assert!((triplet_loss(1.0, 0.2, 0.2).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(triplet_loss(-0.1, 0.2, 0.2), Err(Error::Contract(_))));
    }

    #[test]
    fn triplet_is_monotone_on_grid() {
        let grid: Vec<f64> = (0..40).map(|i| i as f64 * 0.05).collect();
        for &dp in &grid {
            for w in grid.windows(2) {
                assert!(triplet_loss(dp, w[1], 0.2).unwrap() <= triplet_loss(dp, w[0], 0.2).unwrap());
                assert!(triplet_loss(w[1], dp, 0.2).unwrap() >= triplet_loss(w[0], dp, 0.2).unwrap());
            }
        }
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(l1_mask_penalty(&Matrix::zeros(2, 3)), 0.0);
        assert_eq!(l1_mask_penalty(&Matrix::filled(2, 3, 1.0)), 1.0);
        assert_eq!(l1_mask_penalty(&Matrix::from_rows(&[vec![1.0, -3.0], vec![0.0, 0.0]]).unwrap()), 1.0);

        assert_eq!(l2_embedding_penalty(&[vec![0.0; 3], vec![0.0; 3]]).unwrap(), 0.0);
        assert_eq!(l2_embedding_penalty(&[vec![0.0, 1.0]]).unwrap(), 1.0);
        assert_eq!(l2_embedding_penalty(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap(), 3.0);
        assert!(matches!(l2_embedding_penalty::<Vec<f64>>(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn penalties_are_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let vs: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        for s in [-3.0, 0.5, 2.0] {
            let ms = Matrix::from_vec(3, 4, m.as_slice().iter().map(|x| x * s).collect()).unwrap();
            assert!((l1_mask_penalty(&ms) - s.abs() * l1_mask_penalty(&m)).abs() < 1e-12);
            let vss: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().map(|x| x * s).collect()).collect();
            let lhs = l2_embedding_penalty(&vss).unwrap();
            assert!((lhs - s * s * l2_embedding_penalty(&vs).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn vse_examples() {
        let v = [1.0, 0.0];
        // own description at distance 0, others exactly margin away
        assert_eq!(vse_loss(&v, &v, &[1.25, 0.0], &[1.0, 0.25], 0.25).unwrap(), 0.0);
        let t = [0.5, 0.5];
        assert!((vse_loss(&v, &t, &t, &t, 0.2).unwrap() - 0.4).abs() < 1e-15);

        let (vi, ti, tj, tk) = ([0.3, -1.0, 2.0], [0.0, -0.5, 1.5], [1.0, 1.0, 1.0], [0.3, -0.9, 2.2]);
        let own: f64 = [0.3f64, -0.5, 0.5].iter().map(|x| x * x).sum::<f64>().sqrt();
        let dj: f64 = [-0.7f64, -2.0, 1.0].iter().map(|x| x * x).sum::<f64>().sqrt();
        let dk: f64 = [0.0f64, -0.1, -0.2].iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected = (own - dj + 0.2f64).max(0.0) + (own - dk + 0.2f64).max(0.0);
        assert!((vse_loss(&vi, &ti, &tj, &tk, 0.2).unwrap() - expected).abs() < 1e-12);
        assert!(vse_loss(&vi, &ti, &tj, &[0.0], 0.2).is_err());
    }

    #[test]
    fn sim_examples() {
        let vj = [1.0, 1.0];
        assert_eq!(sim_loss(&vj, &vj, &[1.25, 1.0], 0.25).unwrap(), 0.0);
        assert!((sim_loss(&[0.0, 0.0], &[3.0, 4.0], &[0.0, 5.0], 0.2).unwrap() - 0.2).abs() < 1e-15);
        let (a, b, c) = ([0.5, 2.0], [-1.0, 0.0], [0.0, 0.0]);
        let jk = (1.5f64 * 1.5 + 4.0).sqrt();
        let ij = (0.25f64 + 4.0).sqrt();
        assert!((sim_loss(&a, &b, &c, 0.3).unwrap() - (jk - ij + 0.3).max(0.0)).abs() < 1e-12);
        assert!(sim_loss(&a, &[1.0], &c, 0.3).is_err());
    }

    fn random_table(rng: &mut ChaCha8Rng, n: usize, f: usize, t: Option<usize>) -> ItemTable {
        let items = (0..n)
            .map(|i| Item {
                id: format!("i{i}"),
                category: format!("c{}", i % 2),
                visual: (0..f).map(|_| rng.random_range(-1.0..1.0)).collect(),
                text: t.map(|t| (0..t).map(|_| rng.random_range(-1.0..1.0)).collect()),
            })
            .collect();
        ItemTable::new(items).unwrap()
    }

    fn batch() -> Vec<Triplet> {
        vec![
            Triplet::new(0, 1, 2, None),
            Triplet::new(3, 4, 5, None),
            Triplet::new(6, 7, 0, None),
            Triplet::new(2, 5, 7, None),
        ]
    }

    #[test]
    fn gradients_match_finite_differences_in_every_mode() {
        let cases = gradient_suite(3, 1e-5, 1e-4).unwrap();
        assert_eq!(cases.len(), 8);
        for c in &cases {
            assert!(c.report.passed(), "{:?} vse={}: {:#?}", c.mode, c.use_vse_sim, c.report);
        }
    }

    #[test]
    fn gradient_check_flags_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let items = random_table(&mut rng, 8, 4, None);
        let mut model = SceModel::new(ModelConfig::new(4, 3, 2, BranchMode::PairVisual), 1).unwrap();
        let opts = ObjectiveOptions {
            weighting: Weighting::PerPair,
            use_vse_sim: false,
        };
        let weights = LossWeights {
            margin: 2.0,
            ..LossWeights::default()
        };
        let before = model.params.entry_count();
        let ok = check_objective_gradients(&mut model, &items, &batch(), &weights, opts, 1e-5, 1e-4).unwrap();
        assert!(ok.passed());
        assert_eq!(model.params.entry_count(), before);

        // doubling the analytic gradient must be caught
        let mut params = std::mem::take(&mut model.params);
        let report = check_gradients(
            &mut params,
            |p| {
                std::mem::swap(p, &mut model.params);
                let r = total_objective(&mut model, &items, &batch(), &weights, opts, true);
                for q in model.params.iter_mut() {
                    let g = q.grad_mut();
                    for x in g.as_mut_slice() {
                        *x *= 2.0;
                    }
                }
                std::mem::swap(p, &mut model.params);
                Ok(r?.total)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn objective_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let items = random_table(&mut rng, 8, 4, None);
        let mut model = SceModel::new(ModelConfig::new(4, 3, 2, BranchMode::PairVisual), 1).unwrap();
        let opts = ObjectiveOptions {
            weighting: Weighting::PerPair,
            use_vse_sim: false,
        };
        let zero = LossWeights {
            margin: 0.2,
            l1: 0.0,
            l2: 0.0,
            vse: 0.0,
            sim: 0.0,
        };
        let r = total_objective(&mut model, &items, &batch(), &zero, opts, false).unwrap();
        assert_eq!(r.total, r.triplet);

        let w1 = LossWeights { l1: 0.1, ..zero };
        let w2 = LossWeights { l1: 0.2, ..zero };
        let a = total_objective(&mut model, &items, &batch(), &w1, opts, false).unwrap();
        let b = total_objective(&mut model, &items, &batch(), &w2, opts, false).unwrap();
        assert!((b.total - a.total - 0.1 * l1_mask_penalty(model.masks())).abs() < 1e-12);

        // zero masks: every embedding collapses, hinge equals the margin unless margin is 0
        model.masks_mut().fill(0.0);
        let no_margin = LossWeights { margin: 0.0, ..LossWeights::default() };
        let zero_items = ItemTable::new(
            items
                .iter()
                .map(|it| Item { visual: vec![0.0; it.visual.len()], ..it.clone() })
                .collect(),
        )
        .unwrap();
        let r = total_objective(&mut model, &zero_items, &batch(), &no_margin, opts, false).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn missing_text_is_input_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let items = random_table(&mut rng, 8, 4, None);
        let mut model = SceModel::new(ModelConfig::new(4, 3, 2, BranchMode::PairVisual).with_text_dim(3), 1).unwrap();
        let opts = ObjectiveOptions {
            weighting: Weighting::PerPair,
            use_vse_sim: true,
        };
        let err = total_objective(&mut model, &items, &batch(), &LossWeights::default(), opts, false).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        assert!(total_objective(&mut model, &items, &[], &LossWeights::default(), opts, false).is_err());
    }

    #[test]
    fn objective_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..20 {
            let items = random_table(&mut rng, 8, 4, Some(3));
            let mut model = SceModel::new(ModelConfig::new(4, 3, 2, BranchMode::PairVisual).with_text_dim(3), seed).unwrap();
            let opts = ObjectiveOptions {
                weighting: Weighting::PerPair,
                use_vse_sim: true,
            };
            let r = total_objective(&mut model, &items, &batch(), &LossWeights::default(), opts, false).unwrap();
            assert!(r.total >= 0.0);
        }
    }
}
