//! Linear probing of frozen models.
//!
//! A trained extractor is frozen and its embeddings are scored by how well a
//! linear classifier separates the classes: stratified k-fold
//! cross-validation with nested grid search, AUC as the metric, PCA fit
//! strictly inside each training portion. Also hosts the SVM-coefficient
//! feature-importance map and the significance tests.

pub mod stats;

use std::collections::BTreeSet;

use crate::connectome::Dataset;
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::params::{ParamTree, Selector, VarTree};
use crate::rng::{fnv1a64, Rng};
use crate::stgcn::{extractor_forward, StgcnConfig};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Embedding extraction
// ---------------------------------------------------------------------------

/// Which axis of the [P, L, C] feature block is averaged away before
/// flattening.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolAxis {
    /// Average over nodes; vector length L*C. The default.
    #[default]
    Nodes,
    /// Average over time; vector length P*C.
    Time,
}

#[derive(Clone, Debug)]
pub struct EmbeddingOptions {
    /// Windows averaged per subject.
    pub windows_per_subject: usize,
    pub pool: PoolAxis,
    pub seed: u64,
}

impl Default for EmbeddingOptions {
    fn default() -> Self {
        EmbeddingOptions {
            windows_per_subject: 8,
            pool: PoolAxis::Nodes,
            seed: 0,
        }
    }
}

/// Per-subject feature vectors plus labels.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Option<u8>>,
    pub subject_ids: Vec<String>,
    pub dim: usize,
}

impl EmbeddingSet {
    pub fn labeled(&self) -> Result<(Vec<Vec<f64>>, Vec<u8>)> {
        let mut x = Vec::with_capacity(self.features.len());
        let mut y = Vec::with_capacity(self.features.len());
        for (f, l) in self.features.iter().zip(&self.labels) {
            match l {
                Some(l) => {
                    x.push(f.clone());
                    y.push(*l);
                }
                None => {
                    return Err(CoreError::Dataset("embedding set has unlabeled subjects".into()))
                }
            }
        }
        Ok((x, y))
    }
}

/// Mean extractor output per subject, averaged over R windows. The window
/// sampler is seeded per subject id, so adding subjects does not shift
/// anyone else's windows, and a larger R extends the same window sequence.
fn subject_feature_block(
    params: &ParamTree,
    model_cfg: &StgcnConfig,
    dataset: &Dataset,
    subject: usize,
    graphs: &[Tensor],
    window_len: usize,
    opts: &EmbeddingOptions,
) -> Result<Tensor> {
    let record = &dataset.subjects[subject];
    let mut rng = Rng::substream(opts.seed, "embed", fnv1a64(record.subject_id.as_bytes()));
    let windows =
        crate::connectome::sample_subsequences(record, window_len, opts.windows_per_subject, &mut rng)?;
    let mut acc: Option<Tensor> = None;
    for w in &windows {
        let mut g = Graph::new();
        let wv = g.constant(w.window.clone());
        let av = g.constant(graphs[subject].clone());
        let vars = VarTree::bind(&mut g, params, &Selector::prefixes(Vec::<String>::new()));
        let emb = extractor_forward(&mut g, wv, av, &vars, model_cfg)?;
        let value = g.value(emb).clone();
        acc = Some(match acc {
            None => value,
            Some(prev) => prev.add(&value)?,
        });
    }
    Ok(acc.unwrap().scale(1.0 / opts.windows_per_subject as f64))
}

/// Frozen-model embeddings: average the extractor output over R windows,
/// average away one axis, flatten the rest.
pub fn extract_embeddings(
    params: &ParamTree,
    model_cfg: &StgcnConfig,
    dataset: &Dataset,
    window_len: usize,
    opts: &EmbeddingOptions,
) -> Result<EmbeddingSet> {
    if opts.windows_per_subject == 0 {
        return Err(CoreError::Config("windows_per_subject must be >= 1".into()));
    }
    let graphs = crate::connectome::normalized_graphs(dataset)?;
    let mut features = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    let mut ids = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let block = subject_feature_block(params, model_cfg, dataset, i, &graphs, window_len, opts)?;
        let shape = block.shape().to_vec();
        let axis = match opts.pool {
            PoolAxis::Nodes => 0,
            PoolAxis::Time => 1,
        };
        let pooled = block.sum_axes(&[axis])?.scale(1.0 / shape[axis] as f64);
        features.push(pooled.data().to_vec());
        labels.push(dataset.subjects[i].label);
        ids.push(dataset.subjects[i].subject_id.clone());
    }
    let dim = features.first().map(|f| f.len()).unwrap_or(0);
    Ok(EmbeddingSet { features, labels, subject_ids: ids, dim })
}

/// Embeddings without node pooling: the full [P, L, C] block flattened, so
/// each region owns a contiguous run of L*C features. Returns the per-region
/// feature index lists alongside.
pub fn extract_node_embeddings(
    params: &ParamTree,
    model_cfg: &StgcnConfig,
    dataset: &Dataset,
    window_len: usize,
    opts: &EmbeddingOptions,
) -> Result<(EmbeddingSet, Vec<Vec<usize>>)> {
    if opts.windows_per_subject == 0 {
        return Err(CoreError::Config("windows_per_subject must be >= 1".into()));
    }
    let graphs = crate::connectome::normalized_graphs(dataset)?;
    let mut features = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    let mut ids = Vec::with_capacity(dataset.len());
    let mut per_node = 0usize;
    let mut p = 0usize;
    for i in 0..dataset.len() {
        let block = subject_feature_block(params, model_cfg, dataset, i, &graphs, window_len, opts)?;
        p = block.shape()[0];
        per_node = block.shape()[1] * block.shape()[2];
        features.push(block.data().to_vec());
        labels.push(dataset.subjects[i].label);
        ids.push(dataset.subjects[i].subject_id.clone());
    }
    let roi_features = (0..p)
        .map(|node| (node * per_node..(node + 1) * per_node).collect())
        .collect();
    let dim = features.first().map(|f| f.len()).unwrap_or(0);
    Ok((EmbeddingSet { features, labels, subject_ids: ids, dim }, roi_features))
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Principal components fitted on a training set: centering vector plus
/// orthonormal component rows.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// d rows of length D.
    pub components: Vec<Vec<f64>>,
}

impl Pca {
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(&v, &m)| v - m).collect();
        self.components
            .iter()
            .map(|c| c.iter().zip(&centered).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    pub fn transform_all(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| self.transform(x)).collect()
    }
}

/// Default probe reduction: min(32, n_train - 1, feature dim).
pub fn default_pca_dim(n_train: usize, dim: usize) -> usize {
    32usize.min(n_train.saturating_sub(1)).min(dim).max(1)
}

/// Top-d principal directions by power iteration with deflation. Works on
/// the n x n Gram matrix when the feature dimension exceeds the sample
/// count. Deterministic: fixed start vectors, fixed iteration budget.
pub fn pca_fit(xs: &[Vec<f64>], d: usize) -> Result<Pca> {
    let n = xs.len();
    if n < 2 {
        return Err(CoreError::Config(format!("pca: need at least 2 samples, got {n}")));
    }
    let dim = xs[0].len();
    if xs.iter().any(|x| x.len() != dim) {
        return Err(CoreError::shape("pca_fit", "ragged feature rows"));
    }
    if d == 0 || d > n - 1 || d > dim {
        return Err(CoreError::Config(format!(
            "pca: d={} must satisfy 1 <= d <= min(n-1={}, dim={})",
            d,
            n - 1,
            dim
        )));
    }
    let mut mean = vec![0.0; dim];
    for x in xs {
        for (m, &v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| x.iter().zip(&mean).map(|(&v, &m)| v - m).collect())
        .collect();

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(d);
    if dim <= n {
        // covariance route: D x D
        let mut cov = vec![0.0; dim * dim];
        for row in &centered {
            for i in 0..dim {
                let ri = row[i];
                for j in 0..dim {
                    cov[i * dim + j] += ri * row[j];
                }
            }
        }
        for v in &mut cov {
            *v /= n as f64;
        }
        for k in 0..d {
            let (vec_k, lambda) = power_iterate(&cov, dim, k as u64);
            deflate(&mut cov, dim, &vec_k, lambda);
            components.push(orthonormal_or_fill(vec_k, &components, dim, k));
        }
    } else {
        // Gram route: n x n
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                gram[i * n + j] = centered[i].iter().zip(&centered[j]).map(|(&a, &b)| a * b).sum();
            }
        }
        for v in &mut gram {
            *v /= n as f64;
        }
        for k in 0..d {
            let (u, lambda) = power_iterate(&gram, n, k as u64);
            deflate(&mut gram, n, &u, lambda);
            // map the Gram eigenvector back to feature space
            let mut v = vec![0.0; dim];
            for (i, &ui) in u.iter().enumerate() {
                for (slot, &c) in v.iter_mut().zip(&centered[i]) {
                    *slot += ui * c;
                }
            }
            components.push(orthonormal_or_fill(v, &components, dim, k));
        }
    }
    Ok(Pca { mean, components })
}

fn power_iterate(matrix: &[f64], n: usize, stream: u64) -> (Vec<f64>, f64) {
    let mut rng = Rng::substream(0x9ca, "pca/start", stream);
    let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    normalize(&mut v);
    let mut prev = vec![0.0; n];
    for _ in 0..1000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            let row = &matrix[i * n..(i + 1) * n];
            next[i] = row.iter().zip(&v).map(|(&a, &b)| a * b).sum();
        }
        let norm = next.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            break;
        }
        for x in &mut next {
            *x /= norm;
        }
        let delta: f64 = next.iter().zip(&prev).map(|(&a, &b)| (a - b).abs()).sum();
        prev = v;
        v = next;
        if delta < 1e-13 {
            break;
        }
    }
    // Rayleigh quotient
    let mut mv = vec![0.0; n];
    for i in 0..n {
        mv[i] = matrix[i * n..(i + 1) * n].iter().zip(&v).map(|(&a, &b)| a * b).sum();
    }
    let lambda: f64 = mv.iter().zip(&v).map(|(&a, &b)| a * b).sum();
    (v, lambda)
}

fn deflate(matrix: &mut [f64], n: usize, v: &[f64], lambda: f64) {
    for i in 0..n {
        for j in 0..n {
            matrix[i * n + j] -= lambda * v[i] * v[j];
        }
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Gram-Schmidt against previous components; if the candidate collapses
/// (rank-deficient data), fall back to the first canonical basis vector that
/// survives orthogonalization, so the basis stays orthonormal.
fn orthonormal_or_fill(mut v: Vec<f64>, previous: &[Vec<f64>], dim: usize, _k: usize) -> Vec<f64> {
    let project_out = |v: &mut Vec<f64>, basis: &[Vec<f64>]| {
        for b in basis {
            let dot: f64 = b.iter().zip(v.iter()).map(|(&a, &x)| a * x).sum();
            for (slot, &bi) in v.iter_mut().zip(b) {
                *slot -= dot * bi;
            }
        }
    };
    project_out(&mut v, previous);
    let norm = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if norm > 1e-10 {
        for x in &mut v {
            *x /= norm;
        }
        return v;
    }
    for axis in 0..dim {
        let mut e = vec![0.0; dim];
        e[axis] = 1.0;
        project_out(&mut e, previous);
        let norm = e.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm > 1e-10 {
            for x in &mut e {
                *x /= norm;
            }
            return e;
        }
    }
    v // unreachable for d <= dim
}

// ---------------------------------------------------------------------------
// Linear classifiers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(&w, &v)| w * v).sum::<f64>() + self.bias
    }

    pub fn scores(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.score(x)).collect()
    }
}

fn check_two_classes(y: &[u8]) -> Result<()> {
    let n_pos = y.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 || n_pos == y.len() {
        return Err(CoreError::DegenerateLabels(
            "training set must contain both classes".into(),
        ));
    }
    Ok(())
}

/// Primal SVM objective with mean hinge: 0.5 ||w||^2 + C * mean hinge. The
/// mean form keeps the optimum invariant under dataset duplication.
pub fn svm_objective(model: &LinearModel, xs: &[Vec<f64>], y: &[u8], c: f64) -> f64 {
    let reg: f64 = 0.5 * model.weights.iter().map(|&w| w * w).sum::<f64>();
    let hinge: f64 = xs
        .iter()
        .zip(y)
        .map(|(x, &l)| {
            let sign = if l == 1 { 1.0 } else { -1.0 };
            (1.0 - sign * model.score(x)).max(0.0)
        })
        .sum::<f64>()
        / xs.len() as f64;
    reg + c * hinge
}

/// Deterministic full-batch subgradient descent for the primal SVM: fixed
/// zero start, step 2/(t+2) (the regularizer is 1-strongly convex),
/// projection of w onto the ball that must contain the optimum, and
/// best-iterate selection by objective value.
pub fn svm_train(xs: &[Vec<f64>], y: &[u8], c: f64, steps: usize) -> Result<LinearModel> {
    if xs.is_empty() || xs.len() != y.len() {
        return Err(CoreError::Batch(format!("svm_train: {} rows, {} labels", xs.len(), y.len())));
    }
    check_two_classes(y)?;
    if c <= 0.0 {
        return Err(CoreError::Config(format!("svm penalty must be > 0, got {c}")));
    }
    let n = xs.len();
    let dim = xs[0].len();
    let signs: Vec<f64> = y.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    // At w = 0, b = 0 the objective is C, so the optimum satisfies
    // 0.5||w*||^2 <= C.
    let radius = (2.0 * c).sqrt();

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut best = LinearModel { weights: w.clone(), bias: b };
    let mut best_obj = svm_objective(&best, xs, y, c);
    let mut avg_w = vec![0.0; dim];
    let mut avg_b = 0.0;
    let mut avg_count = 0usize;

    for t in 0..steps {
        // subgradient of 0.5||w||^2 + (C/n) sum hinge
        let mut gw = w.clone();
        let mut gb = 0.0;
        for (x, &s) in xs.iter().zip(&signs) {
            let margin = s * (x.iter().zip(&w).map(|(&a, &bb)| a * bb).sum::<f64>() + b);
            if margin < 1.0 {
                let coeff = c * s / n as f64;
                for (g, &xv) in gw.iter_mut().zip(x) {
                    *g -= coeff * xv;
                }
                gb -= coeff;
            }
        }
        let eta = 2.0 / (t as f64 + 2.0);
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= eta * gi;
        }
        b -= eta * gb;
        let norm = w.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm > radius {
            let scale = radius / norm;
            for wi in &mut w {
                *wi *= scale;
            }
        }
        // tail averaging over the second half
        if 2 * t >= steps {
            for (a, &wi) in avg_w.iter_mut().zip(&w) {
                *a += wi;
            }
            avg_b += b;
            avg_count += 1;
        }
        let candidate = LinearModel { weights: w.clone(), bias: b };
        let obj = svm_objective(&candidate, xs, y, c);
        if obj < best_obj {
            best_obj = obj;
            best = candidate;
        }
    }
    if avg_count > 0 {
        let avg = LinearModel {
            weights: avg_w.iter().map(|&v| v / avg_count as f64).collect(),
            bias: avg_b / avg_count as f64,
        };
        if svm_objective(&avg, xs, y, c) < best_obj {
            best = avg;
        }
    }
    Ok(best)
}

/// Logistic-regression objective: mean cross-entropy + 0.5 * l2 * ||w||^2
/// (bias unpenalized).
pub fn logreg_objective(model: &LinearModel, xs: &[Vec<f64>], y: &[u8], l2: f64) -> f64 {
    let mut ce = 0.0;
    for (x, &l) in xs.iter().zip(y) {
        let z = model.score(x);
        // softplus(z) - y z
        ce += z.max(0.0) + (-z.abs()).exp().ln_1p() - if l == 1 { z } else { 0.0 };
    }
    ce / xs.len() as f64 + 0.5 * l2 * model.weights.iter().map(|&w| w * w).sum::<f64>()
}

/// Gradient descent with Armijo backtracking from a zero start; stops when
/// the gradient norm falls below 1e-6 or the budget runs out. Convex, so the
/// result is the global optimum for l2 > 0.
pub fn logreg_train(xs: &[Vec<f64>], y: &[u8], l2: f64, max_iters: usize) -> Result<LinearModel> {
    if xs.is_empty() || xs.len() != y.len() {
        return Err(CoreError::Batch(format!(
            "logreg_train: {} rows, {} labels",
            xs.len(),
            y.len()
        )));
    }
    check_two_classes(y)?;
    if l2 < 0.0 {
        return Err(CoreError::Config(format!("l2 penalty must be >= 0, got {l2}")));
    }
    let n = xs.len();
    let dim = xs[0].len();
    let mut model = LinearModel { weights: vec![0.0; dim], bias: 0.0 };

    let gradient = |m: &LinearModel| -> (Vec<f64>, f64) {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, &l) in xs.iter().zip(y) {
            let z = m.score(x);
            let p = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { let e = z.exp(); e / (1.0 + e) };
            let err = p - l as f64;
            for (g, &xv) in gw.iter_mut().zip(x) {
                *g += err * xv;
            }
            gb += err;
        }
        for (g, &w) in gw.iter_mut().zip(&m.weights) {
            *g = *g / n as f64 + l2 * w;
        }
        (gw, gb / n as f64)
    };

    let mut step = 1.0;
    for _ in 0..max_iters {
        let (gw, gb) = gradient(&model);
        let gnorm = (gw.iter().map(|&g| g * g).sum::<f64>() + gb * gb).sqrt();
        if gnorm < 1e-6 {
            break;
        }
        let f0 = logreg_objective(&model, xs, y, l2);
        let mut eta = step;
        loop {
            let trial = LinearModel {
                weights: model.weights.iter().zip(&gw).map(|(&w, &g)| w - eta * g).collect(),
                bias: model.bias - eta * gb,
            };
            let f1 = logreg_objective(&trial, xs, y, l2);
            if f1 <= f0 - 0.5 * eta * gnorm * gnorm || eta < 1e-12 {
                model = trial;
                break;
            }
            eta *= 0.5;
        }
        // allow the step to grow back
        step = (eta * 2.0).min(4.0);
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// AUC
// ---------------------------------------------------------------------------

/// Area under the ROC curve via the rank (Mann-Whitney) formulation: the
/// fraction of (positive, negative) pairs where the positive outscores the
/// negative, ties counted one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(CoreError::UndefinedAuc(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::UndefinedAuc("one class absent".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average ranks over tie groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    Ok((rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierKind {
    Svm,
    Logreg,
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassifierKind::Svm => write!(f, "svm"),
            ClassifierKind::Logreg => write!(f, "logreg"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeOptions {
    pub classifier: ClassifierKind,
    pub folds: usize,
    /// None: use `default_pca_dim`. Some(0): skip PCA. Some(d): exactly d.
    pub pca_dim: Option<usize>,
    /// Penalty grid searched in the inner loop.
    pub grid: Vec<f64>,
    pub inner_folds: usize,
    pub seed: u64,
    pub svm_steps: usize,
    pub logreg_iters: usize,
    /// Worker threads for fold evaluation (assembly order is fixed).
    pub threads: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            classifier: ClassifierKind::Svm,
            folds: 5,
            pca_dim: None,
            grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            inner_folds: 3,
            seed: 0,
            svm_steps: 4000,
            logreg_iters: 5000,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub auc: f64,
    pub chosen_penalty: f64,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub fold_aucs: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
    pub per_fold: Vec<FoldOutcome>,
    pub classifier: ClassifierKind,
    pub p_values: Vec<(String, f64)>,
}

impl ProbeReport {
    pub fn from_folds(per_fold: Vec<FoldOutcome>, classifier: ClassifierKind) -> Self {
        let fold_aucs: Vec<f64> = per_fold.iter().map(|f| f.auc).collect();
        let mean = fold_aucs.iter().sum::<f64>() / fold_aucs.len() as f64;
        let var = fold_aucs.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / fold_aucs.len() as f64;
        ProbeReport {
            fold_aucs,
            mean,
            std: var.sqrt(),
            per_fold,
            classifier,
            p_values: Vec::new(),
        }
    }

    /// CSV: one (fold, auc) row per fold.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,auc\n");
        for f in &self.per_fold {
            out.push_str(&format!("{},{}\n", f.fold, f.auc));
        }
        out
    }

    /// Human-readable summary block.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "classifier: {}\nfolds: {}\nmean_auc: {:.4}\nstd_auc: {:.4}\nmean +/- std: {:.4} +/- {:.4}\n",
            self.classifier,
            self.fold_aucs.len(),
            self.mean,
            self.std,
            self.mean,
            self.std
        );
        for f in &self.per_fold {
            out.push_str(&format!("fold {}: auc {:.4} (penalty {})\n", f.fold, f.auc, f.chosen_penalty));
        }
        for (name, p) in &self.p_values {
            out.push_str(&format!("p_value[{name}]: {p}\n"));
        }
        out
    }
}

/// Stratified fold assignment: per class, shuffle then deal round-robin.
/// Every fold keeps both classes or the split is refused.
pub fn stratified_folds(labels: &[u8], k: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(CoreError::Fold(format!("need k >= 2 folds, got {k}")));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        if l > 1 {
            return Err(CoreError::DegenerateLabels(format!("label {l} outside {{0, 1}}")));
        }
        by_class[l as usize].push(i);
    }
    for (c, pool) in by_class.iter().enumerate() {
        if pool.len() < k {
            return Err(CoreError::Fold(format!(
                "stratification impossible: class {c} has {} subjects for {k} folds",
                pool.len()
            )));
        }
    }
    let mut folds = vec![Vec::new(); k];
    for pool in &mut by_class {
        rng.shuffle(pool);
        for (i, &idx) in pool.iter().enumerate() {
            folds[i % k].push(idx);
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

fn gather<T: Clone>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i].clone()).collect()
}

fn fit_predict(
    train_x: &[Vec<f64>],
    train_y: &[u8],
    test_x: &[Vec<f64>],
    penalty: f64,
    pca_dim: Option<usize>,
    opts: &ProbeOptions,
) -> Result<Vec<f64>> {
    let dim = train_x.first().map(|x| x.len()).unwrap_or(0);
    let reduce = match pca_dim {
        Some(0) => None,
        Some(d) => Some(pca_fit(train_x, d)?),
        None => Some(pca_fit(train_x, default_pca_dim(train_x.len(), dim))?),
    };
    let (tr, te): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match &reduce {
        Some(p) => (p.transform_all(train_x), p.transform_all(test_x)),
        None => (train_x.to_vec(), test_x.to_vec()),
    };
    let model = match opts.classifier {
        ClassifierKind::Svm => svm_train(&tr, train_y, penalty, opts.svm_steps)?,
        ClassifierKind::Logreg => logreg_train(&tr, train_y, penalty, opts.logreg_iters)?,
    };
    Ok(model.scores(&te))
}

fn evaluate_fold(
    features: &[Vec<f64>],
    labels: &[u8],
    folds: &[Vec<usize>],
    fold_idx: usize,
    opts: &ProbeOptions,
) -> Result<FoldOutcome> {
    let val_ids = folds[fold_idx].clone();
    let train_ids: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != fold_idx)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    let train_x = gather(features, &train_ids);
    let train_y = gather(labels, &train_ids);

    // Inner grid search: mean AUC over stratified inner folds, PCA fit on
    // each inner training portion only. Validation-fold rows never enter.
    let mut inner_rng = Rng::substream(opts.seed, "probe/inner", fold_idx as u64);
    let inner = stratified_folds(&train_y, opts.inner_folds.min(train_y.len()).max(2), &mut inner_rng)?;
    let mut best_penalty = opts.grid[0];
    let mut best_score = f64::NEG_INFINITY;
    for &penalty in &opts.grid {
        let mut scores = Vec::with_capacity(inner.len());
        for i in 0..inner.len() {
            let iv = &inner[i];
            let it: Vec<usize> = inner
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            let preds = fit_predict(
                &gather(&train_x, &it),
                &gather(&train_y, &it),
                &gather(&train_x, iv),
                penalty,
                opts.pca_dim,
                opts,
            )?;
            scores.push(auc(&preds, &gather(&train_y, iv))?);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        if mean > best_score {
            best_score = mean;
            best_penalty = penalty;
        }
    }

    // Refit on the full training portion with the chosen penalty.
    let preds = fit_predict(
        &train_x,
        &train_y,
        &gather(features, &val_ids),
        best_penalty,
        opts.pca_dim,
        opts,
    )?;
    let fold_auc = auc(&preds, &gather(labels, &val_ids))?;
    Ok(FoldOutcome {
        fold: fold_idx,
        auc: fold_auc,
        chosen_penalty: best_penalty,
        train_ids,
        val_ids,
    })
}

/// Stratified k-fold cross-validation with nested hyperparameter search.
/// Deterministic given the seed; folds may evaluate on worker threads but
/// assemble in fold order.
pub fn cross_validate(features: &[Vec<f64>], labels: &[u8], opts: &ProbeOptions) -> Result<ProbeReport> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(CoreError::Batch(format!(
            "cross_validate: {} rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    if opts.grid.is_empty() {
        return Err(CoreError::Config("empty hyperparameter grid".into()));
    }
    let mut rng = Rng::stream(opts.seed, "probe/folds");
    let folds = stratified_folds(labels, opts.folds, &mut rng)?;

    let threads = opts.threads.max(1).min(folds.len());
    let mut outcomes: Vec<Option<Result<FoldOutcome>>> = (0..folds.len()).map(|_| None).collect();
    if threads <= 1 {
        for (i, slot) in outcomes.iter_mut().enumerate() {
            *slot = Some(evaluate_fold(features, labels, &folds, i, opts));
        }
    } else {
        std::thread::scope(|scope| {
            let chunks: Vec<Vec<usize>> = (0..folds.len())
                .map(|i| vec![i])
                .collect::<Vec<_>>()
                .chunks(folds.len().div_ceil(threads))
                .map(|c| c.iter().flatten().copied().collect())
                .collect();
            let mut handles = Vec::new();
            for chunk in chunks {
                let folds = &folds;
                handles.push(scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|i| (i, evaluate_fold(features, labels, folds, i, opts)))
                        .collect::<Vec<_>>()
                }));
            }
            for handle in handles {
                for (i, outcome) in handle.join().expect("fold worker panicked") {
                    outcomes[i] = Some(outcome);
                }
            }
        });
    }
    let per_fold: Result<Vec<FoldOutcome>> = outcomes
        .into_iter()
        .map(|o| o.expect("fold evaluated"))
        .collect();
    let per_fold = per_fold?;

    // Bookkeeping invariant: validation folds are disjoint and cover the set.
    let mut seen = BTreeSet::new();
    for f in &per_fold {
        for &id in &f.val_ids {
            if !seen.insert(id) {
                return Err(CoreError::Fold(format!("index {id} appears in two validation folds")));
            }
            if f.train_ids.contains(&id) {
                return Err(CoreError::Fold(format!("index {id} leaked into its own training fold")));
            }
        }
    }
    if seen.len() != labels.len() {
        return Err(CoreError::Fold("validation folds do not cover the dataset".into()));
    }
    Ok(ProbeReport::from_folds(per_fold, opts.classifier))
}

// ---------------------------------------------------------------------------
// Feature importance
// ---------------------------------------------------------------------------

/// Per-region importance from a linear model: the absolute value of the mean
/// coefficient over each region's features (or mean of absolute values with
/// `abs_first`), sorted descending. `roi_features[r]` lists the feature
/// indices belonging to region r; together they must cover every feature.
pub fn importance_map(
    weights: &[f64],
    roi_features: &[Vec<usize>],
    roi_names: &[String],
    abs_first: bool,
) -> Result<Vec<(String, f64)>> {
    if roi_names.len() != roi_features.len() {
        return Err(CoreError::Mapping(format!(
            "{} regions vs {} name entries",
            roi_features.len(),
            roi_names.len()
        )));
    }
    let mut covered = vec![false; weights.len()];
    let mut scores = Vec::with_capacity(roi_features.len());
    for (r, feats) in roi_features.iter().enumerate() {
        if feats.is_empty() {
            return Err(CoreError::Mapping(format!("region {r} maps no features")));
        }
        let mut acc = 0.0;
        for &f in feats {
            let w = *weights
                .get(f)
                .ok_or_else(|| CoreError::Mapping(format!("feature {f} out of range")))?;
            covered[f] = true;
            acc += if abs_first { w.abs() } else { w };
        }
        let mean = acc / feats.len() as f64;
        scores.push((roi_names[r].clone(), if abs_first { mean } else { mean.abs() }));
    }
    if let Some(missing) = covered.iter().position(|&c| !c) {
        return Err(CoreError::Mapping(format!("feature {missing} not mapped to any region")));
    }
    scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    Ok(scores)
}
