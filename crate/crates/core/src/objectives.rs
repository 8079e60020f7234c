//! Loss functions.
//!
//! The contrastive source loss pulls two windows of the same subject together
//! and pushes different subjects apart in embedding space; the target loss is
//! binary cross-entropy; the combined objective adds them with a scale
//! factor. Graph-valued versions drive training, scalar helpers serve the
//! probing and test code.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};

/// Default temperature for the contrastive loss.
pub const DEFAULT_TEMPERATURE: f64 = 30.0;
/// Default scale on the target loss inside the combined objective.
pub const DEFAULT_TARGET_LOSS_WEIGHT: f64 = 30.0;
/// Probability clamp for the scalar cross-entropy.
pub const PROB_EPSILON: f64 = 1e-12;

/// Cosine similarity between two plain vectors.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CoreError::shape(
            "cosine_sim",
            format!("{} vs {} elements", u.len(), v.len()),
        ));
    }
    let nu = u.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(CoreError::Degenerate("cosine_sim of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    Ok(dot / (nu * nv))
}

/// A batch of paired-view embeddings for the contrastive loss: `view1[n]` and
/// `view2[n]` come from two different windows of subject n.
pub struct ContrastiveBatch {
    pub view1: Vec<Var>,
    pub view2: Vec<Var>,
    pub temperature: f64,
    /// When true, the positive pair joins the denominator (the conventional
    /// normalized form); when false only the n != m cross terms do (the
    /// literal form, which can go negative). Default false.
    pub include_positive_in_denominator: bool,
}

impl ContrastiveBatch {
    pub fn new(view1: Vec<Var>, view2: Vec<Var>, temperature: f64) -> Self {
        ContrastiveBatch {
            view1,
            view2,
            temperature,
            include_positive_in_denominator: false,
        }
    }
}

/// Contrastive loss over a batch:
/// mean over n of  -log( exp(sim(n,n)/tau) / sum_{m != n} exp(sim(n,m)/tau) )
/// computed via stabilized log-sum-exp, where sim(n,m) is the cosine
/// similarity between view1 of subject n and view2 of subject m.
pub fn contrastive_loss(g: &mut Graph, batch: &ContrastiveBatch) -> Result<Var> {
    let n = batch.view1.len();
    if n != batch.view2.len() {
        return Err(CoreError::Batch(format!(
            "contrastive batch views disagree: {} vs {}",
            n,
            batch.view2.len()
        )));
    }
    if n < 2 {
        return Err(CoreError::Batch(format!(
            "contrastive loss needs at least 2 subjects, got {}",
            n
        )));
    }
    if batch.temperature <= 0.0 {
        return Err(CoreError::Config(format!(
            "temperature must be positive, got {}",
            batch.temperature
        )));
    }
    let inv_tau = 1.0 / batch.temperature;
    // sims[i][j] = sim(view1[i], view2[j]) / tau
    let mut sims = Vec::with_capacity(n);
    for &vi in &batch.view1 {
        let mut row = Vec::with_capacity(n);
        for &vj in &batch.view2 {
            let s = g.cosine_sim(vi, vj)?;
            row.push(g.scale(s, inv_tau));
        }
        sims.push(row);
    }
    let mut per_subject = Vec::with_capacity(n);
    for (i, row) in sims.iter().enumerate() {
        let mut denom_terms: Vec<Var> = Vec::with_capacity(n);
        for (j, &sim) in row.iter().enumerate() {
            if j != i || batch.include_positive_in_denominator {
                denom_terms.push(sim);
            }
        }
        let lse = g.log_sum_exp(&denom_terms)?;
        per_subject.push(g.sub(lse, row[i])?);
    }
    let mut total = per_subject[0];
    for &t in &per_subject[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Contrastive loss of plain embedding vectors (evaluation only).
pub fn contrastive_loss_value(
    view1: &[Vec<f64>],
    view2: &[Vec<f64>],
    temperature: f64,
    include_positive_in_denominator: bool,
) -> Result<f64> {
    let mut g = Graph::new();
    let v1 = view1
        .iter()
        .map(|e| g.constant(crate::tensor::Tensor::vector(e.clone())))
        .collect();
    let v2 = view2
        .iter()
        .map(|e| g.constant(crate::tensor::Tensor::vector(e.clone())))
        .collect();
    let mut batch = ContrastiveBatch::new(v1, v2, temperature);
    batch.include_positive_in_denominator = include_positive_in_denominator;
    let loss = contrastive_loss(&mut g, &batch)?;
    g.scalar(loss)
}

/// Binary cross-entropy of a probability, clamped to [eps, 1-eps].
pub fn cross_entropy(prob: f64, label: u8) -> Result<f64> {
    if label > 1 {
        return Err(CoreError::DegenerateLabels(format!("label {} outside {{0, 1}}", label)));
    }
    let p = prob.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
    Ok(if label == 1 { -p.ln() } else { -(1.0 - p).ln() })
}

/// Binary cross-entropy from the pre-sigmoid logit (graph form). Stable for
/// any logit magnitude: CE = softplus(logit) - label * logit.
pub fn cross_entropy_from_logit(g: &mut Graph, logit: Var, label: u8) -> Result<Var> {
    if label > 1 {
        return Err(CoreError::DegenerateLabels(format!("label {} outside {{0, 1}}", label)));
    }
    let logit = g.reshape(logit, vec![])?;
    let sp = g.softplus(logit);
    if label == 1 {
        g.sub(sp, logit)
    } else {
        Ok(sp)
    }
}

/// Mean cross-entropy over per-subject logits.
pub fn mean_cross_entropy(g: &mut Graph, logits: &[Var], labels: &[u8]) -> Result<Var> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(CoreError::Batch(format!(
            "cross-entropy batch: {} logits vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut total = cross_entropy_from_logit(g, logits[0], labels[0])?;
    for (l, y) in logits.iter().zip(labels).skip(1) {
        let ce = cross_entropy_from_logit(g, *l, *y)?;
        total = g.add(total, ce)?;
    }
    Ok(g.scale(total, 1.0 / logits.len() as f64))
}

/// Combined objective: source_loss + weight * target_loss. When the weight
/// is exactly zero the target term is skipped entirely, so the result (and
/// its gradient) is bit-identical to the source loss alone.
pub fn meta_loss(g: &mut Graph, source_loss: Var, target_loss: Option<Var>, weight: f64) -> Result<Var> {
    if weight < 0.0 {
        return Err(CoreError::Config(format!("target loss weight must be >= 0, got {}", weight)));
    }
    match target_loss {
        Some(t) if weight != 0.0 => {
            let scaled = g.scale(t, weight);
            g.add(source_loss, scaled)
        }
        _ => Ok(source_loss),
    }
}

/// Scalar form of the combined objective.
pub fn meta_loss_value(source_loss: f64, target_loss: f64, weight: f64) -> f64 {
    source_loss + weight * target_loss
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn embed(g: &mut Graph, v: Vec<f64>) -> Var {
        g.constant(Tensor::vector(v))
    }

    #[test]
    fn cosine_identical_orthogonal_scaled() {
        assert!((cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-15);
        let mut rng = Rng::from_seed(1);
        let u: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let base = cosine_sim(&u, &v).unwrap();
        let u2: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
        let v3: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        assert!((cosine_sim(&u2, &v3).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_is_degenerate() {
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(CoreError::Degenerate(_))
        ));
    }

    #[test]
    fn contrastive_identical_embeddings_give_zero() {
        // N=2, all four embeddings identical: numerator and denominator agree
        let mut g = Graph::new();
        let e = vec![0.3, -0.7, 1.1];
        let batch = ContrastiveBatch::new(
            vec![embed(&mut g, e.clone()), embed(&mut g, e.clone())],
            vec![embed(&mut g, e.clone()), embed(&mut g, e.clone())],
            DEFAULT_TEMPERATURE,
        );
        let loss = contrastive_loss(&mut g, &batch).unwrap();
        assert!(g.scalar(loss).unwrap().abs() < 1e-12);
    }

    #[test]
    fn contrastive_matches_direct_formula() {
        // random N=4 batch vs an unstabilized direct evaluation
        let mut rng = Rng::from_seed(2);
        let n = 4;
        let dim = 5;
        let v1: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
        let v2: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
        let tau = 2.0;
        let got = contrastive_loss_value(&v1, &v2, tau, false).unwrap();
        // oracle
        let mut want = 0.0;
        for i in 0..n {
            let pos = (cosine_sim(&v1[i], &v2[i]).unwrap() / tau).exp();
            let mut den = 0.0;
            for j in 0..n {
                if j != i {
                    den += (cosine_sim(&v1[i], &v2[j]).unwrap() / tau).exp();
                }
            }
            want += -(pos / den).ln();
        }
        want /= n as f64;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn contrastive_invariant_to_positive_rescaling() {
        let mut rng = Rng::from_seed(3);
        let n = 4;
        let v1: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
        let v2: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
        let base = contrastive_loss_value(&v1, &v2, DEFAULT_TEMPERATURE, false).unwrap();
        let scale = 37.5;
        let v1s: Vec<Vec<f64>> = v1.iter().map(|e| e.iter().map(|x| scale * x).collect()).collect();
        let v2s: Vec<Vec<f64>> = v2.iter().map(|e| e.iter().map(|x| scale * x).collect()).collect();
        let scaled = contrastive_loss_value(&v1s, &v2s, DEFAULT_TEMPERATURE, false).unwrap();
        assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn contrastive_rejects_tiny_batches() {
        let mut g = Graph::new();
        let batch = ContrastiveBatch::new(
            vec![embed(&mut g, vec![1.0])],
            vec![embed(&mut g, vec![1.0])],
            DEFAULT_TEMPERATURE,
        );
        assert!(matches!(contrastive_loss(&mut g, &batch), Err(CoreError::Batch(_))));
    }

    #[test]
    fn contrastive_descends_under_gradient_steps() {
        // free embeddings, N=4, dim=8, 200 steps, lr 0.1: loss strictly
        // decreases and the positive/negative similarity gap widens
        let mut rng = Rng::from_seed(4);
        let n = 4;
        let dim = 8;
        let mut flat: Vec<f64> = (0..2 * n * dim).map(|_| rng.normal()).collect();
        let tau = DEFAULT_TEMPERATURE;

        let eval = |flat: &[f64], with_grad: bool| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let all = g.input(Tensor::vector(flat.to_vec()));
            let mut v1 = Vec::new();
            let mut v2 = Vec::new();
            // views are slices of the flat parameter vector; rebuild by masking
            for i in 0..2 * n {
                let mut mask = vec![0.0; 2 * n * dim];
                for d in 0..dim {
                    mask[i * dim + d] = 1.0;
                }
                let m = g.constant(Tensor::vector(mask));
                let picked = g.mul(all, m).unwrap();
                // compress to a dim-length vector via reshape of the nonzero span
                // (sum over blocks keeps gradient flowing to the right slots)
                let arranged = g.reshape(picked, vec![2 * n, dim]).unwrap();
                let row = g.sum_axes(arranged, &[0]).unwrap();
                if i < n {
                    v1.push(row);
                } else {
                    v2.push(row);
                }
            }
            let batch = ContrastiveBatch::new(v1, v2, tau);
            let loss = contrastive_loss(&mut g, &batch).unwrap();
            let lv = g.scalar(loss).unwrap();
            if with_grad {
                let gr = g.grad_tensors(loss, &[all], &["emb"]).unwrap();
                (lv, Some(gr[0].data().to_vec()))
            } else {
                (lv, None)
            }
        };

        let gap = |flat: &[f64]| -> f64 {
            let rows: Vec<Vec<f64>> = (0..2 * n).map(|i| flat[i * dim..(i + 1) * dim].to_vec()).collect();
            let mut pos = 0.0;
            let mut neg = 0.0;
            let mut neg_count = 0.0;
            for i in 0..n {
                pos += cosine_sim(&rows[i], &rows[n + i]).unwrap();
                for j in 0..n {
                    if j != i {
                        neg += cosine_sim(&rows[i], &rows[n + j]).unwrap();
                        neg_count += 1.0;
                    }
                }
            }
            pos / n as f64 - neg / neg_count
        };

        let gap_before = gap(&flat);
        let (mut prev, _) = eval(&flat, false);
        let initial = prev;
        for _ in 0..200 {
            let (loss, grads) = eval(&flat, true);
            assert!(loss <= prev + 1e-12, "loss increased: {prev} -> {loss}");
            prev = loss;
            let grads = grads.unwrap();
            for (x, gr) in flat.iter_mut().zip(grads) {
                *x -= 0.1 * gr;
            }
        }
        let (final_loss, _) = eval(&flat, false);
        assert!(final_loss < initial);
        assert!(gap(&flat) > gap_before);
    }

    #[test]
    fn cross_entropy_analytic_values() {
        assert!(cross_entropy(1.0, 1).unwrap() < 1e-9);
        assert!((cross_entropy(0.5, 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((cross_entropy(0.5, 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((cross_entropy(0.9, 0).unwrap() - (-(0.1f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_rather_than_failing() {
        assert!(cross_entropy(0.0, 1).unwrap().is_finite());
        assert!(cross_entropy(1.0, 0).unwrap().is_finite());
    }

    #[test]
    fn logit_form_agrees_with_probability_form() {
        let mut rng = Rng::from_seed(5);
        for _ in 0..20 {
            let logit = rng.uniform(-8.0, 8.0);
            let prob = 1.0 / (1.0 + (-logit).exp());
            for label in [0u8, 1u8] {
                let mut g = Graph::new();
                let lv = g.constant(Tensor::scalar(logit));
                let ce = cross_entropy_from_logit(&mut g, lv, label).unwrap();
                let want = cross_entropy(prob, label).unwrap();
                assert!((g.scalar(ce).unwrap() - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cross_entropy_convex_in_logit() {
        // midpoint inequality on random logit triples
        let mut rng = Rng::from_seed(6);
        let ce = |z: f64, y: u8| -> f64 {
            let mut g = Graph::new();
            let v = g.constant(Tensor::scalar(z));
            let l = cross_entropy_from_logit(&mut g, v, y).unwrap();
            g.scalar(l).unwrap()
        };
        for _ in 0..100 {
            let a = rng.uniform(-6.0, 6.0);
            let b = rng.uniform(-6.0, 6.0);
            let y = (rng.below(2)) as u8;
            let mid = ce((a + b) / 2.0, y);
            let avg = (ce(a, y) + ce(b, y)) / 2.0;
            assert!(mid <= avg + 1e-12);
        }
    }

    #[test]
    fn meta_loss_values() {
        assert_eq!(meta_loss_value(1.0, 0.5, 2.0), 2.0);
        assert_eq!(meta_loss_value(1.5, 123.0, 0.0), 1.5);
    }

    #[test]
    fn meta_loss_skips_target_term_at_zero_weight() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::scalar(1.25));
        let t = g.constant(Tensor::scalar(9.0));
        let combined = meta_loss(&mut g, s, Some(t), 0.0).unwrap();
        assert_eq!(combined, s);
    }

    #[test]
    fn losses_pass_finite_difference_checks() {
        let mut rng = Rng::from_seed(7);
        // contrastive: perturb one embedding element
        let n = 3;
        let dim = 4;
        let v1: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
        let v2: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
        let tau = 1.5;

        let eval = |first: &[f64]| -> f64 {
            let mut vs = v1.clone();
            vs[0] = first.to_vec();
            contrastive_loss_value(&vs, &v2, tau, false).unwrap()
        };
        let mut g = Graph::new();
        let first = g.input(Tensor::vector(v1[0].clone()));
        let rest1: Vec<Var> = v1[1..].iter().map(|e| g.constant(Tensor::vector(e.clone()))).collect();
        let view2: Vec<Var> = v2.iter().map(|e| g.constant(Tensor::vector(e.clone()))).collect();
        let mut view1 = vec![first];
        view1.extend(rest1);
        let batch = ContrastiveBatch::new(view1, view2, tau);
        let loss = contrastive_loss(&mut g, &batch).unwrap();
        let analytic = g.grad_tensors(loss, &[first], &["e0"]).unwrap()[0].clone();
        let h = 1e-5;
        for idx in 0..dim {
            let mut plus = v1[0].clone();
            plus[idx] += h;
            let mut minus = v1[0].clone();
            minus[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!((a - numeric).abs() / denom < 1e-4);
        }

        // cross-entropy from logit
        for label in [0u8, 1u8] {
            let z0 = rng.uniform(-3.0, 3.0);
            let mut g = Graph::new();
            let z = g.input(Tensor::scalar(z0));
            let ce = cross_entropy_from_logit(&mut g, z, label).unwrap();
            let analytic = g.grad_tensors(ce, &[z], &["z"]).unwrap()[0].scalar_value().unwrap();
            let ce_at = |z: f64| -> f64 {
                let mut g = Graph::new();
                let v = g.constant(Tensor::scalar(z));
                let l = cross_entropy_from_logit(&mut g, v, label).unwrap();
                g.scalar(l).unwrap()
            };
            let numeric = (ce_at(z0 + h) - ce_at(z0 - h)) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!((analytic - numeric).abs() / denom < 1e-4);
        }
    }
}
