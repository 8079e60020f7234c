//! Bi-level training.
//!
//! Each outer iteration (1) resamples disjoint meta-train / meta-validation
//! splits of the target subjects, (2) adapts a freshly initialized target
//! head with k plain SGD steps while the extractor stays frozen, and (3)
//! takes one Adam step on the extractor and source head against the source
//! loss plus the adapted head's meta-validation loss. A warm-up phase trains
//! the source task alone first.
//!
//! Ablation modes share the loop: `ssl` drops the target branch entirely,
//! `mel` drops the source branch, `mtl` collapses the two levels into one
//! joint update, `ft` pre-trains on the source and then fine-tunes on the
//! target, and `supervised_source` swaps the contrastive source loss for
//! classification on source labels.

use serde::{Deserialize, Serialize};

use crate::connectome::{normalized_graphs, sample_window_pair, subsequence_at, Dataset};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::objectives::{
    contrastive_loss, mean_cross_entropy, meta_loss, ContrastiveBatch, DEFAULT_TARGET_LOSS_WEIGHT,
    DEFAULT_TEMPERATURE,
};
use crate::params::{ParamTree, Selector, VarTree};
use crate::rng::Rng;
use crate::stgcn::{
    extractor_forward, head_forward, init_params, init_target_head, HeadKind, StgcnConfig,
    EXTRACTOR_PREFIX, SOURCE_HEAD_PREFIX, TARGET_HEAD_PREFIX,
};
use crate::tensor::Tensor;

/// Training regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Full bi-level loop with contrastive source task.
    #[default]
    Metsk,
    /// Contrastive source task only.
    Ssl,
    /// Bi-level loop on the target only (no source head, no source loss).
    Mel,
    /// Single loop; both heads and the extractor update together.
    Mtl,
    /// Source pre-training followed by full fine-tuning on the target.
    Ft,
    /// Bi-level loop with a supervised classification source task.
    SupervisedSource,
}

impl TrainMode {
    pub fn needs_source(self) -> bool {
        !matches!(self, TrainMode::Mel)
    }

    pub fn needs_target(self) -> bool {
        !matches!(self, TrainMode::Ssl)
    }
}

/// Every training hyperparameter. Defaults mirror the reference recipe:
/// inner lr 0.01 (plain SGD), outer lr 0.001 (Adam), 25 inner steps, loss
/// scale 30, temperature 30, window 128, batch 32, 20 warm-up epochs out of
/// 90 total, 80/20 meta split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    /// Explicit outer-iteration budget; when absent it is derived from the
    /// epoch counts (one epoch = ceil(|driving dataset| / batch_size)).
    pub outer_iters: Option<usize>,
    pub target_loss_weight: f64,
    pub temperature: f64,
    pub window_len: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub meta_train_size: Option<usize>,
    pub meta_val_size: Option<usize>,
    pub mode: TrainMode,
    pub second_order: bool,
    pub seed: u64,
    /// Keep the positive pair inside the contrastive denominator.
    pub include_positive_in_denominator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            inner_lr: 0.01,
            outer_lr: 0.001,
            inner_steps: 25,
            outer_iters: None,
            target_loss_weight: DEFAULT_TARGET_LOSS_WEIGHT,
            temperature: DEFAULT_TEMPERATURE,
            window_len: 128,
            batch_size: 32,
            warmup_epochs: 20,
            total_epochs: 90,
            meta_train_size: None,
            meta_val_size: None,
            mode: TrainMode::Metsk,
            second_order: false,
            seed: 0,
            include_positive_in_denominator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_lr < 0.0 || self.outer_lr < 0.0 {
            return Err(CoreError::Config("learning rates must be >= 0".into()));
        }
        if self.target_loss_weight < 0.0 {
            return Err(CoreError::Config("target_loss_weight must be >= 0".into()));
        }
        if self.temperature <= 0.0 {
            return Err(CoreError::Config("temperature must be > 0".into()));
        }
        if self.window_len == 0 {
            return Err(CoreError::Config("window_len must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(CoreError::Config("batch_size must be >= 2".into()));
        }
        if !self.batch_size.is_multiple_of(2) {
            return Err(CoreError::Config(
                "batch_size must be even for class-balanced sampling".into(),
            ));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(CoreError::Config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.second_order && !matches!(self.mode, TrainMode::Metsk | TrainMode::Mel) {
            return Err(CoreError::Config(
                "second_order only applies to the bi-level modes".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(json).map_err(|e| CoreError::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("train config serializes")
    }
}

/// Training phase recorded in the log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Meta,
    Finetune,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Warmup => write!(f, "warmup"),
            Phase::Meta => write!(f, "meta"),
            Phase::Finetune => write!(f, "finetune"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LogRecord {
    pub iter: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub inner_final_loss: Option<f64>,
    pub source_loss: Option<f64>,
    pub metaval_loss: Option<f64>,
    pub seconds: f64,
}

/// Append-only per-iteration training log.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    fn push(&mut self, record: LogRecord) {
        self.records.push(record);
    }

    /// CSV export. Wall-clock timings are only written when requested;
    /// otherwise the seconds column is zeroed so reruns are byte-identical.
    pub fn to_csv(&self, wall_time: bool) -> String {
        let mut out = String::from("iter,epoch,phase,inner_final_loss,source_loss,metaval_loss,seconds\n");
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let secs = if wall_time { r.seconds } else { 0.0 };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.iter,
                r.epoch,
                r.phase,
                fmt(r.inner_final_loss),
                fmt(r.source_loss),
                fmt(r.metaval_loss),
                secs
            ));
        }
        out
    }
}

pub struct TrainOutcome {
    pub params: ParamTree,
    pub log: TrainLog,
}

/// Failure modes of `train`: invalid inputs before anything ran, or a
/// numerical abort that carries the last state for checkpointing.
pub enum TrainFailure {
    Invalid(CoreError),
    Aborted {
        error: CoreError,
        params: Box<ParamTree>,
        log: TrainLog,
    },
}

impl std::fmt::Debug for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainFailure::Invalid(e) => write!(f, "Invalid({e})"),
            TrainFailure::Aborted { error, .. } => write!(f, "Aborted({error})"),
        }
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with (0.9, 0.999, 1e-8) and no weight decay.
pub struct AdamState {
    m: ParamTree,
    v: ParamTree,
    t: usize,
}

impl AdamState {
    pub fn new(template: &ParamTree) -> Self {
        AdamState {
            m: template.zeros_like(),
            v: template.zeros_like(),
            t: 0,
        }
    }

    /// One step over every leaf present in `grads` (a subset of `params`).
    /// With lr == 0 the moments still advance but parameters are untouched.
    pub fn step(&mut self, params: &mut ParamTree, grads: &ParamTree, lr: f64) -> Result<()> {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (name, grad) in grads.iter() {
            if !grad.all_finite() {
                return Err(CoreError::NonFinite {
                    path: name.to_string(),
                    detail: "gradient contains NaN or Inf".into(),
                });
            }
            let m = self.m.get(name)?.zip(grad, |m, g| BETA1 * m + (1.0 - BETA1) * g)?;
            let v = self.v.get(name)?.zip(grad, |v, g| BETA2 * v + (1.0 - BETA2) * g * g)?;
            if lr != 0.0 {
                let p = params.get(name)?;
                let mut updated = p.clone();
                for ((slot, &mi), &vi) in updated
                    .data_mut()
                    .iter_mut()
                    .zip(m.data())
                    .zip(v.data())
                {
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    *slot -= lr * m_hat / (v_hat.sqrt() + EPS);
                }
                if !updated.all_finite() {
                    return Err(CoreError::NonFinite {
                        path: name.to_string(),
                        detail: "parameter update produced NaN or Inf".into(),
                    });
                }
                params.set(name, updated)?;
            }
            self.m.set(name, m)?;
            self.v.set(name, v)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// SGD adaptation
// ---------------------------------------------------------------------------

/// Plain full-batch SGD on every leaf of `init`. Returns the adapted tree
/// and the loss trajectory [L(theta_0), ..., L(theta_k)] (length steps + 1).
/// An exactly-zero learning rate leaves the tree bit-identical.
pub fn sgd_adapt<F>(mut loss_builder: F, init: &ParamTree, lr: f64, steps: usize) -> Result<(ParamTree, Vec<f64>)>
where
    F: FnMut(&mut Graph, &VarTree) -> Result<Var>,
{
    let mut params = init.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, grads) = crate::params::grad(&mut loss_builder, &params, &Selector::all())
            .map_err(|e| annotate_iteration(e, step))?;
        losses.push(loss);
        if lr != 0.0 {
            params = params.zip_map(&grads, |p, g| p - lr * g)?;
            if let Some(leaf) = params.first_non_finite() {
                return Err(CoreError::NonFinite {
                    path: leaf.to_string(),
                    detail: format!("sgd update at step {step} produced NaN or Inf"),
                });
            }
        }
    }
    // final loss at theta_k
    let mut g = Graph::new();
    let vars = VarTree::bind(&mut g, &params, &Selector::prefixes(Vec::<String>::new()));
    let loss = loss_builder(&mut g, &vars)?;
    losses.push(g.scalar(loss)?);
    Ok((params, losses))
}

fn annotate_iteration(e: CoreError, iteration: usize) -> CoreError {
    match e {
        CoreError::NonFinite { path, detail } => CoreError::Abort {
            iteration,
            detail: format!("non-finite value at {path}: {detail}"),
        },
        other => other,
    }
}

/// Inner adaptation: k SGD steps on the target head against cross-entropy,
/// with the extractor features frozen. `features[i]` is the extractor output
/// for subject i (treated as a constant), `adjacencies[i]` its graph.
pub fn inner_adapt(
    features: &[Tensor],
    adjacencies: &[Tensor],
    labels: &[u8],
    head_init: &ParamTree,
    inner_lr: f64,
    steps: usize,
) -> Result<(ParamTree, Vec<f64>)> {
    if features.len() != labels.len() || features.len() != adjacencies.len() || features.is_empty() {
        return Err(CoreError::Batch(format!(
            "inner_adapt: {} features, {} adjacencies, {} labels",
            features.len(),
            adjacencies.len(),
            labels.len()
        )));
    }
    sgd_adapt(
        |g, vars| {
            let mut logits = Vec::with_capacity(features.len());
            for (feat, adj) in features.iter().zip(adjacencies) {
                let f = g.constant(feat.clone());
                let a = g.constant(adj.clone());
                let head = head_forward(g, f, a, vars, TARGET_HEAD_PREFIX, HeadKind::Classifier)?;
                logits.push(head.output);
            }
            mean_cross_entropy(g, &logits, labels)
        },
        head_init,
        inner_lr,
        steps,
    )
}

// ---------------------------------------------------------------------------
// Batch plumbing
// ---------------------------------------------------------------------------

struct SubjectCache<'a> {
    dataset: &'a Dataset,
    graphs: Vec<Tensor>,
    by_class: Vec<Vec<usize>>,
}

impl<'a> SubjectCache<'a> {
    fn build(dataset: &'a Dataset, window_len: usize) -> Result<Self> {
        if dataset.is_empty() {
            return Err(CoreError::Dataset("empty dataset".into()));
        }
        for s in &dataset.subjects {
            if s.time_points() < window_len {
                return Err(CoreError::Window {
                    window: window_len,
                    series: s.time_points(),
                });
            }
        }
        let graphs = normalized_graphs(dataset)?;
        let mut by_class = vec![Vec::new(), Vec::new()];
        for (i, s) in dataset.subjects.iter().enumerate() {
            if let Some(l) = s.label {
                by_class[l as usize].push(i);
            }
        }
        Ok(SubjectCache { dataset, graphs, by_class })
    }

    fn len(&self) -> usize {
        self.dataset.len()
    }
}

/// `size` indices drawn uniformly; distinct when the pool allows it.
fn sample_batch(n: usize, size: usize, rng: &mut Rng) -> Vec<usize> {
    if size <= n {
        rng.choose_distinct(n, size)
    } else {
        (0..size).map(|_| rng.below(n)).collect()
    }
}

/// Class-balanced batch: size/2 indices per class, drawn from `pool_by_class`
/// (with replacement only when a class is short).
fn sample_balanced(pool_by_class: &[Vec<usize>; 2], size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let per_class = size / 2;
    let mut out = Vec::with_capacity(size);
    for pool in pool_by_class {
        if pool.is_empty() {
            return Err(CoreError::Batch("class-balanced batch: a class is empty".into()));
        }
        if per_class <= pool.len() {
            let picks = rng.choose_distinct(pool.len(), per_class);
            out.extend(picks.into_iter().map(|i| pool[i]));
        } else {
            out.extend((0..per_class).map(|_| pool[rng.below(pool.len())]));
        }
    }
    Ok(out)
}

/// Disjoint stratified split of the target subjects into meta-train and
/// meta-validation index pools. Per-class counts follow the requested sizes
/// as closely as possible while keeping both classes in both pools.
fn resample_meta_split(
    by_class: &[Vec<usize>],
    train_size: usize,
    rng: &mut Rng,
) -> Result<[Vec<Vec<usize>>; 2]> {
    let n: usize = by_class.iter().map(|c| c.len()).sum();
    let mut train_pools = Vec::with_capacity(2);
    let mut val_pools = Vec::with_capacity(2);
    let mut allocated = 0usize;
    for (ci, pool) in by_class.iter().enumerate() {
        if pool.is_empty() {
            return Err(CoreError::Batch(format!("target class {ci} has no subjects")));
        }
        let mut shuffled = pool.clone();
        rng.shuffle(&mut shuffled);
        // proportional share, clamped to leave at least one per side
        let mut share = (train_size * pool.len() + n / 2) / n;
        share = share.clamp(1, pool.len().saturating_sub(1).max(1));
        allocated += share;
        let (tr, val) = shuffled.split_at(share);
        train_pools.push(tr.to_vec());
        val_pools.push(val.to_vec());
    }
    // Per-class clamping keeps the split usable; the total may drift from
    // train_size by at most one subject per class.
    let _ = allocated;
    for (ci, pool) in val_pools.iter().enumerate() {
        if pool.is_empty() {
            return Err(CoreError::Batch(format!(
                "meta-validation pool for class {ci} is empty; shrink meta_train_size"
            )));
        }
    }
    Ok([train_pools, val_pools])
}

// ---------------------------------------------------------------------------
// The trainer
// ---------------------------------------------------------------------------

/// One source subject's contribution to the source task: two windows of the
/// same series plus the subject's normalized adjacency (and label when the
/// source task is supervised).
#[derive(Clone, Debug)]
pub struct SourceView {
    pub window_a: Tensor,
    pub window_b: Tensor,
    pub adjacency: Tensor,
    pub label: Option<u8>,
}

/// A batch of labeled target windows.
#[derive(Clone, Debug)]
pub struct TargetBatch {
    pub windows: Vec<Tensor>,
    pub adjacencies: Vec<Tensor>,
    pub labels: Vec<u8>,
}

pub struct OuterStepStats {
    pub source_loss: Option<f64>,
    pub metaval_loss: Option<f64>,
    /// The gradients the Adam step consumed, one leaf per updated parameter.
    pub gradients: ParamTree,
}

/// Source-task loss term (contrastive pairs or supervised classification).
fn source_loss_term(
    g: &mut Graph,
    vars: &VarTree,
    views: &[SourceView],
    model_cfg: &StgcnConfig,
    cfg: &TrainConfig,
) -> Result<Var> {
    match model_cfg.source_head {
        HeadKind::Projector => {
            let mut v1 = Vec::with_capacity(views.len());
            let mut v2 = Vec::with_capacity(views.len());
            for view in views {
                let a = g.constant(view.adjacency.clone());
                for (window, sink) in [(&view.window_a, &mut v1), (&view.window_b, &mut v2)] {
                    let w = g.constant(window.clone());
                    let emb = extractor_forward(g, w, a, vars, model_cfg)?;
                    let head = head_forward(g, emb, a, vars, SOURCE_HEAD_PREFIX, HeadKind::Projector)?;
                    sink.push(head.output);
                }
            }
            let mut batch = ContrastiveBatch::new(v1, v2, cfg.temperature);
            batch.include_positive_in_denominator = cfg.include_positive_in_denominator;
            contrastive_loss(g, &batch)
        }
        HeadKind::Classifier => {
            let mut logits = Vec::with_capacity(views.len());
            let mut labels = Vec::with_capacity(views.len());
            for view in views {
                let label = view.label.ok_or_else(|| {
                    CoreError::Dataset("supervised source task needs labeled source subjects".into())
                })?;
                let a = g.constant(view.adjacency.clone());
                let w = g.constant(view.window_a.clone());
                let emb = extractor_forward(g, w, a, vars, model_cfg)?;
                let head = head_forward(g, emb, a, vars, SOURCE_HEAD_PREFIX, HeadKind::Classifier)?;
                logits.push(head.output);
                labels.push(label);
            }
            mean_cross_entropy(g, &logits, &labels)
        }
    }
}

/// Target cross-entropy with an explicit (frozen or live) head tree.
fn target_loss_term(
    g: &mut Graph,
    extractor_vars: &VarTree,
    head_vars: &VarTree,
    batch: &TargetBatch,
    model_cfg: &StgcnConfig,
) -> Result<Var> {
    let mut logits = Vec::with_capacity(batch.windows.len());
    for (w, a) in batch.windows.iter().zip(&batch.adjacencies) {
        let wv = g.constant(w.clone());
        let av = g.constant(a.clone());
        let emb = extractor_forward(g, wv, av, extractor_vars, model_cfg)?;
        let head = head_forward(g, emb, av, head_vars, TARGET_HEAD_PREFIX, HeadKind::Classifier)?;
        logits.push(head.output);
    }
    mean_cross_entropy(g, &logits, &batch.labels)
}

/// One outer update: a single Adam step on the extractor and source head
/// against source_loss + weight * metaval_loss, with the adapted target head
/// treated as a constant. With no source views only the extractor updates
/// (the target-only variant); with a zero weight or no meta-validation batch
/// the step reduces bit-exactly to the pure source-task step. Leaves outside
/// the updated set are untouched.
pub fn outer_step(
    params: &mut ParamTree,
    adam: &mut AdamState,
    model_cfg: &StgcnConfig,
    cfg: &TrainConfig,
    source_views: Option<&[SourceView]>,
    meta_val: Option<(&TargetBatch, &ParamTree)>,
) -> Result<OuterStepStats> {
    if source_views.is_none() && meta_val.is_none() {
        return Err(CoreError::Batch("outer_step with neither source nor target".into()));
    }
    let selector = if source_views.is_some() {
        Selector::prefixes([EXTRACTOR_PREFIX, SOURCE_HEAD_PREFIX])
    } else {
        Selector::prefixes([EXTRACTOR_PREFIX])
    };
    let mut g = Graph::new();
    let vars = VarTree::bind(&mut g, params, &selector);

    let mut metaval_loss = None;
    let target_term = match meta_val {
        Some((batch, adapted_head)) => {
            let mut frozen_full = params.clone();
            frozen_full.assign_from(adapted_head)?;
            let head_vars = VarTree::bind(&mut g, &frozen_full, &Selector::prefixes(Vec::<String>::new()));
            let term = target_loss_term(&mut g, &vars, &head_vars, batch, model_cfg)?;
            metaval_loss = Some(g.scalar(term)?);
            Some(term)
        }
        None => None,
    };

    let (total, source_loss) = match source_views {
        Some(views) => {
            let s = source_loss_term(&mut g, &vars, views, model_cfg, cfg)?;
            let sv = g.scalar(s)?;
            (meta_loss(&mut g, s, target_term, cfg.target_loss_weight)?, Some(sv))
        }
        None => {
            let term = target_term.expect("checked above");
            (g.scale(term, cfg.target_loss_weight), None)
        }
    };

    let (_, grads) = extract_grads(&mut g, &vars, total, &selector)?;
    adam.step(params, &grads, cfg.outer_lr)?;
    Ok(OuterStepStats { source_loss, metaval_loss, gradients: grads })
}

/// Value of the objective `outer_step` descends: source loss plus the scaled
/// meta-validation loss with the adapted head held constant. Shares the loss
/// construction with `outer_step`, so finite differences of this function
/// validate that step's gradients.
pub fn outer_objective(
    params: &ParamTree,
    model_cfg: &StgcnConfig,
    cfg: &TrainConfig,
    source_views: Option<&[SourceView]>,
    meta_val: Option<(&TargetBatch, &ParamTree)>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = VarTree::bind(&mut g, params, &Selector::prefixes(Vec::<String>::new()));
    let target_term = match meta_val {
        Some((batch, adapted_head)) => {
            let mut frozen_full = params.clone();
            frozen_full.assign_from(adapted_head)?;
            let head_vars = VarTree::bind(&mut g, &frozen_full, &Selector::prefixes(Vec::<String>::new()));
            Some(target_loss_term(&mut g, &vars, &head_vars, batch, model_cfg)?)
        }
        None => None,
    };
    let total = match source_views {
        Some(views) => {
            let s = source_loss_term(&mut g, &vars, views, model_cfg, cfg)?;
            meta_loss(&mut g, s, target_term, cfg.target_loss_weight)?
        }
        None => {
            let term = target_term
                .ok_or_else(|| CoreError::Batch("outer objective with neither source nor target".into()))?;
            g.scale(term, cfg.target_loss_weight)
        }
    };
    g.scalar(total)
}

struct Trainer<'a> {
    model_cfg: &'a StgcnConfig,
    cfg: &'a TrainConfig,
    params: ParamTree,
    adam: AdamState,
    init_rng: Rng,
    sampling_rng: Rng,
    log: TrainLog,
    iter: usize,
}

struct StepStats {
    inner_final_loss: Option<f64>,
    source_loss: Option<f64>,
    metaval_loss: Option<f64>,
}

impl<'a> Trainer<'a> {
    fn source_views(&mut self, cache: &SubjectCache, indices: &[usize]) -> Result<Vec<SourceView>> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &cache.dataset.subjects[i];
            let (w1, w2) = sample_window_pair(s, self.cfg.window_len, &mut self.sampling_rng)?;
            out.push(SourceView {
                window_a: w1.window,
                window_b: w2.window,
                adjacency: cache.graphs[i].clone(),
                label: s.label,
            });
        }
        Ok(out)
    }

    fn single_views(&mut self, cache: &SubjectCache, indices: &[usize]) -> Result<TargetBatch> {
        let mut windows = Vec::with_capacity(indices.len());
        let mut adjacencies = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &cache.dataset.subjects[i];
            let t = s.time_points();
            let span = t - self.cfg.window_len + 1;
            let start = self.sampling_rng.below(span);
            windows.push(subsequence_at(s, start, self.cfg.window_len)?.window);
            adjacencies.push(cache.graphs[i].clone());
            labels.push(s.label.unwrap_or(0));
        }
        Ok(TargetBatch { windows, adjacencies, labels })
    }

    /// Extractor features with the current parameters, gradients off.
    fn frozen_features(&self, batch: &TargetBatch) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(batch.windows.len());
        for (w, a) in batch.windows.iter().zip(&batch.adjacencies) {
            let mut g = Graph::new();
            let wv = g.constant(w.clone());
            let av = g.constant(a.clone());
            let vars = VarTree::bind(&mut g, &self.params, &Selector::prefixes(Vec::<String>::new()));
            let emb = extractor_forward(&mut g, wv, av, &vars, self.model_cfg)?;
            out.push(g.value(emb).clone());
        }
        Ok(out)
    }

    /// Pure source step (warm-up and the ssl mode): one Adam update of
    /// {extractor, source head} against the source loss alone.
    fn ssl_step(&mut self, source: &SubjectCache) -> Result<StepStats> {
        let indices = sample_batch(source.len(), self.cfg.batch_size, &mut self.sampling_rng);
        let views = self.source_views(source, &indices)?;
        let stats = outer_step(
            &mut self.params,
            &mut self.adam,
            self.model_cfg,
            self.cfg,
            Some(&views),
            None,
        )?;
        Ok(StepStats {
            inner_final_loss: None,
            source_loss: stats.source_loss,
            metaval_loss: None,
        })
    }

    /// One full bi-level iteration (steps 1-3).
    fn meta_step(&mut self, source: Option<&SubjectCache>, target: &SubjectCache) -> Result<StepStats> {
        // Step 1: resample the meta split and draw class-balanced batches.
        let train_size = self
            .cfg
            .meta_train_size
            .unwrap_or_else(|| default_meta_split(target.len()).0);
        let [train_pool, val_pool] =
            resample_meta_split(&target.by_class, train_size, &mut self.sampling_rng)?;
        let train_pool: [Vec<usize>; 2] = [train_pool[0].clone(), train_pool[1].clone()];
        let val_pool: [Vec<usize>; 2] = [val_pool[0].clone(), val_pool[1].clone()];
        let train_idx = sample_balanced(&train_pool, self.cfg.batch_size, &mut self.sampling_rng)?;
        let val_idx = sample_balanced(&val_pool, self.cfg.batch_size, &mut self.sampling_rng)?;
        let train_batch = self.single_views(target, &train_idx)?;
        let val_batch = self.single_views(target, &val_idx)?;

        // Step 2: adapt a fresh target head on frozen features.
        let head_init = init_target_head(self.model_cfg, &mut self.init_rng)?;

        if self.cfg.second_order {
            return self.meta_step_unrolled(source, &head_init, &train_batch, &val_batch);
        }

        let features = self.frozen_features(&train_batch)?;
        let (adapted_head, inner_losses) = inner_adapt(
            &features,
            &train_batch.adjacencies,
            &train_batch.labels,
            &head_init,
            self.cfg.inner_lr,
            self.cfg.inner_steps,
        )?;

        // Step 3: update extractor (+ source head) against the combined loss
        // with the adapted head frozen.
        let source_views = match source {
            Some(cache) => {
                let indices = sample_batch(cache.len(), self.cfg.batch_size, &mut self.sampling_rng);
                Some(self.source_views(cache, &indices)?)
            }
            None => None,
        };
        let stats = outer_step(
            &mut self.params,
            &mut self.adam,
            self.model_cfg,
            self.cfg,
            source_views.as_deref(),
            Some((&val_batch, &adapted_head)),
        )?;
        // keep the last adapted head in the checkpointed tree
        self.params.assign_from(&adapted_head)?;

        Ok(StepStats {
            inner_final_loss: inner_losses.last().copied(),
            source_loss: stats.source_loss,
            metaval_loss: stats.metaval_loss,
        })
    }

    /// Second-order variant: the k inner SGD steps are unrolled inside one
    /// graph, so the outer gradient differentiates through them.
    fn meta_step_unrolled(
        &mut self,
        source: Option<&SubjectCache>,
        head_init: &ParamTree,
        train_batch: &TargetBatch,
        val_batch: &TargetBatch,
    ) -> Result<StepStats> {
        let source_views = match source {
            Some(cache) => {
                let indices = sample_batch(cache.len(), self.cfg.batch_size, &mut self.sampling_rng);
                Some(self.source_views(cache, &indices)?)
            }
            None => None,
        };
        let selector = if source.is_some() {
            Selector::prefixes([EXTRACTOR_PREFIX, SOURCE_HEAD_PREFIX])
        } else {
            Selector::prefixes([EXTRACTOR_PREFIX])
        };

        let mut g = Graph::new();
        let vars = VarTree::bind(&mut g, &self.params, &selector);
        // head leaves as differentiable inputs so inner gradients exist
        let mut head_vars: Vec<(String, Var)> = head_init
            .iter()
            .map(|(k, t)| (k.to_string(), g.input(t.clone())))
            .collect();

        let mut inner_final_loss = None;
        for _ in 0..self.cfg.inner_steps {
            let head_tree = VarTree::from_pairs(&head_vars);
            let merged = vars.merged_with(&head_tree);
            let loss = target_loss_term(&mut g, &vars, &merged, train_batch, self.model_cfg)?;
            inner_final_loss = Some(g.scalar(loss)?);
            let wrt: Vec<Var> = head_vars.iter().map(|(_, v)| *v).collect();
            let grads = g.grad_vars(loss, &wrt)?;
            for ((_, slot), grad) in head_vars.iter_mut().zip(grads) {
                let step = g.scale(grad, self.cfg.inner_lr);
                *slot = g.sub(*slot, step)?;
            }
        }

        let head_tree = VarTree::from_pairs(&head_vars);
        let merged = vars.merged_with(&head_tree);
        let target_term = target_loss_term(&mut g, &vars, &merged, val_batch, self.model_cfg)?;
        let metaval_loss = g.scalar(target_term)?;

        let (total, source_loss) = match &source_views {
            Some(views) => {
                let s = source_loss_term(&mut g, &vars, views, self.model_cfg, self.cfg)?;
                let sv = g.scalar(s)?;
                (meta_loss(&mut g, s, Some(target_term), self.cfg.target_loss_weight)?, Some(sv))
            }
            None => (g.scale(target_term, self.cfg.target_loss_weight), None),
        };

        let (_, grads) = extract_grads(&mut g, &vars, total, &selector)?;
        self.adam.step(&mut self.params, &grads, self.cfg.outer_lr)?;
        // materialize the adapted head values into the checkpointed tree
        for (name, var) in &head_vars {
            self.params.set(name, g.value(*var).clone())?;
        }

        Ok(StepStats {
            inner_final_loss,
            source_loss,
            metaval_loss: Some(metaval_loss),
        })
    }

    /// Single-loop multi-task step: everything updates together.
    fn mtl_step(&mut self, source: &SubjectCache, target: &SubjectCache) -> Result<StepStats> {
        let src_idx = sample_batch(source.len(), self.cfg.batch_size, &mut self.sampling_rng);
        let views = self.source_views(source, &src_idx)?;
        let tgt_idx = sample_balanced(
            &[target.by_class[0].clone(), target.by_class[1].clone()],
            self.cfg.batch_size,
            &mut self.sampling_rng,
        )?;
        let batch = self.single_views(target, &tgt_idx)?;

        let selector = Selector::all();
        let mut g = Graph::new();
        let vars = VarTree::bind(&mut g, &self.params, &selector);
        let source_term = source_loss_term(&mut g, &vars, &views, self.model_cfg, self.cfg)?;
        let source_loss = g.scalar(source_term)?;
        let target_term = target_loss_term(&mut g, &vars, &vars, &batch, self.model_cfg)?;
        let target_loss = g.scalar(target_term)?;
        let total = meta_loss(&mut g, source_term, Some(target_term), self.cfg.target_loss_weight)?;
        let (_, grads) = extract_grads(&mut g, &vars, total, &selector)?;
        self.adam.step(&mut self.params, &grads, self.cfg.outer_lr)?;
        Ok(StepStats {
            inner_final_loss: None,
            source_loss: Some(source_loss),
            metaval_loss: Some(target_loss),
        })
    }

    /// Fine-tuning step on the target task: extractor and target head update.
    fn finetune_step(&mut self, target: &SubjectCache) -> Result<StepStats> {
        let idx = sample_balanced(
            &[target.by_class[0].clone(), target.by_class[1].clone()],
            self.cfg.batch_size,
            &mut self.sampling_rng,
        )?;
        let batch = self.single_views(target, &idx)?;
        let selector = Selector::prefixes([EXTRACTOR_PREFIX, TARGET_HEAD_PREFIX]);
        let mut g = Graph::new();
        let vars = VarTree::bind(&mut g, &self.params, &selector);
        let loss = target_loss_term(&mut g, &vars, &vars, &batch, self.model_cfg)?;
        let (loss_value, grads) = extract_grads(&mut g, &vars, loss, &selector)?;
        self.adam.step(&mut self.params, &grads, self.cfg.outer_lr)?;
        Ok(StepStats {
            inner_final_loss: None,
            source_loss: None,
            metaval_loss: Some(loss_value),
        })
    }
}

fn extract_grads(g: &mut Graph, vars: &VarTree, loss: Var, selector: &Selector) -> Result<(f64, ParamTree)> {
    let loss_value = g.scalar(loss)?;
    let selected: Vec<(&str, Var)> = vars.iter().filter(|(p, _)| selector.matches(p)).collect();
    let wrt: Vec<Var> = selected.iter().map(|(_, v)| *v).collect();
    let names: Vec<&str> = selected.iter().map(|(p, _)| *p).collect();
    let tensors = g.grad_tensors(loss, &wrt, &names)?;
    let mut out = ParamTree::new();
    for ((name, _), tensor) in selected.iter().zip(tensors) {
        out.insert(*name, tensor)?;
    }
    Ok((loss_value, out))
}

/// 80/20 split of n target subjects (at least one subject per side).
pub fn default_meta_split(n: usize) -> (usize, usize) {
    let tr = ((n as f64 * 0.8).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    (tr, n - tr)
}

/// Train a model. The source dataset drives the self-supervised (or
/// supervised) task; the target dataset drives the classification task.
/// Deterministic given (datasets, configs, seed).
pub fn train(
    source: Option<&Dataset>,
    target: Option<&Dataset>,
    model_cfg: &StgcnConfig,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    run_train(source, target, model_cfg, cfg)
}

fn run_train(
    source: Option<&Dataset>,
    target: Option<&Dataset>,
    model_cfg: &StgcnConfig,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let invalid = TrainFailure::Invalid;
    cfg.validate().map_err(invalid)?;
    model_cfg.validate().map_err(TrainFailure::Invalid)?;
    if cfg.mode == TrainMode::SupervisedSource && model_cfg.source_head != HeadKind::Classifier {
        return Err(TrainFailure::Invalid(CoreError::Config(
            "supervised_source mode needs source_head = classifier in the model config".into(),
        )));
    }
    if cfg.mode != TrainMode::SupervisedSource
        && cfg.mode.needs_source()
        && model_cfg.source_head != HeadKind::Projector
    {
        return Err(TrainFailure::Invalid(CoreError::Config(
            "contrastive source task needs source_head = projector".into(),
        )));
    }

    // Treat metsk with a zero target weight as the pure source task: the
    // target term contributes nothing, so the trajectories must coincide.
    let mode = if cfg.mode == TrainMode::Metsk && cfg.target_loss_weight == 0.0 {
        TrainMode::Ssl
    } else {
        cfg.mode
    };

    let source_cache = match (mode.needs_source(), source) {
        (true, Some(ds)) => Some(SubjectCache::build(ds, cfg.window_len).map_err(TrainFailure::Invalid)?),
        (true, None) => {
            return Err(TrainFailure::Invalid(CoreError::Dataset(format!(
                "mode {:?} requires a source dataset",
                cfg.mode
            ))))
        }
        (false, _) => None,
    };
    let target_cache = match (mode.needs_target(), target) {
        (true, Some(ds)) => {
            if !ds.is_labeled() {
                return Err(TrainFailure::Invalid(CoreError::Dataset(
                    "target dataset must be fully labeled".into(),
                )));
            }
            Some(SubjectCache::build(ds, cfg.window_len).map_err(TrainFailure::Invalid)?)
        }
        (true, None) => {
            return Err(TrainFailure::Invalid(CoreError::Dataset(format!(
                "mode {:?} requires a target dataset",
                cfg.mode
            ))))
        }
        (false, _) => None,
    };
    if let (Some(t), Some(tr_size), Some(val_size)) = (&target_cache, cfg.meta_train_size, cfg.meta_val_size)
    {
        if tr_size + val_size != t.len() {
            return Err(TrainFailure::Invalid(CoreError::Config(format!(
                "meta_train_size {} + meta_val_size {} != target size {}",
                tr_size,
                val_size,
                t.len()
            ))));
        }
    }

    let mut init_rng = Rng::stream(cfg.seed, "init");
    let params = init_params(model_cfg, &mut init_rng).map_err(TrainFailure::Invalid)?;
    let adam_template = params.subset(&Selector::all());
    let mut trainer = Trainer {
        model_cfg,
        cfg,
        params,
        adam: AdamState::new(&adam_template),
        init_rng,
        sampling_rng: Rng::stream(cfg.seed, "sampling"),
        log: TrainLog::default(),
        iter: 0,
    };

    // Iteration counts: one epoch covers the driving dataset once.
    let driving_len = match mode {
        TrainMode::Mel => target_cache.as_ref().unwrap().len(),
        _ => source_cache.as_ref().unwrap().len(),
    };
    let iters_per_epoch = driving_len.div_ceil(cfg.batch_size).max(1);
    let (warmup_iters, main_iters) = match cfg.outer_iters {
        // explicit budget: main loop only, no warm-up
        Some(m) => (0, m),
        None => {
            let warm = match mode {
                TrainMode::Ssl | TrainMode::Mel => 0,
                _ => cfg.warmup_epochs * iters_per_epoch,
            };
            let total = cfg.total_epochs * iters_per_epoch;
            (warm, total.saturating_sub(warm))
        }
    };

    let mut run = || -> Result<()> {
        for _ in 0..warmup_iters {
            let started = std::time::Instant::now();
            let stats = trainer.ssl_step(source_cache.as_ref().unwrap())?;
            push_log(&mut trainer, Phase::Warmup, stats, started, iters_per_epoch);
        }
        for _ in 0..main_iters {
            let started = std::time::Instant::now();
            let (phase, stats) = match mode {
                TrainMode::Ssl => (Phase::Warmup, trainer.ssl_step(source_cache.as_ref().unwrap())?),
                TrainMode::Metsk | TrainMode::SupervisedSource => (
                    Phase::Meta,
                    trainer.meta_step(source_cache.as_ref(), target_cache.as_ref().unwrap())?,
                ),
                TrainMode::Mel => (Phase::Meta, trainer.meta_step(None, target_cache.as_ref().unwrap())?),
                TrainMode::Mtl => (
                    Phase::Meta,
                    trainer.mtl_step(source_cache.as_ref().unwrap(), target_cache.as_ref().unwrap())?,
                ),
                TrainMode::Ft => (Phase::Finetune, trainer.finetune_step(target_cache.as_ref().unwrap())?),
            };
            push_log(&mut trainer, phase, stats, started, iters_per_epoch);
        }
        Ok(())
    };

    match run() {
        Ok(()) => Ok(TrainOutcome {
            params: trainer.params,
            log: trainer.log,
        }),
        Err(error) => Err(TrainFailure::Aborted {
            error,
            params: Box::new(trainer.params),
            log: trainer.log,
        }),
    }
}

fn push_log(trainer: &mut Trainer, phase: Phase, stats: StepStats, started: std::time::Instant, ipe: usize) {
    let iter = trainer.iter;
    trainer.log.push(LogRecord {
        iter,
        epoch: iter / ipe,
        phase,
        inner_final_loss: stats.inner_final_loss,
        source_loss: stats.source_loss,
        metaval_loss: stats.metaval_loss,
        seconds: started.elapsed().as_secs_f64(),
    });
    trainer.iter += 1;
}

impl VarTree {
    /// Build from explicit (name, var) pairs.
    pub fn from_pairs(pairs: &[(String, Var)]) -> VarTree {
        VarTree::from_map(pairs.iter().map(|(k, v)| (k.clone(), *v)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectome::{synth_generate, ClassSpec, GeneratorSpec};

    fn tiny_model() -> StgcnConfig {
        StgcnConfig {
            channels: vec![1, 4, 4, 4],
            head_channels: 4,
            embed_dim: 8,
            kernel: 3,
            source_head: HeadKind::Projector,
            vote: Default::default(),
        }
    }

    fn tiny_spec(p: usize, t: usize, per_class: usize, labeled: bool) -> GeneratorSpec {
        GeneratorSpec {
            p,
            t,
            classes: vec![
                ClassSpec { label: 0, subjects: per_class, blocks: vec![(0..p / 2).collect()], ar: None },
                ClassSpec { label: 1, subjects: per_class, blocks: vec![(p / 2..p).collect()], ar: None },
            ],
            rho: 0.7,
            ar: 0.3,
            sigma: 0.8,
            coupling_jitter: 0.2,
            global_coupling: 0.0,
            sites: vec!["site0".into()],
            emit_labels: labeled,
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            window_len: 16,
            batch_size: 4,
            inner_steps: 2,
            warmup_epochs: 0,
            total_epochs: 1,
            outer_iters: Some(2),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn default_config_mirrors_reference_recipe() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.inner_lr, 0.01);
        assert_eq!(cfg.outer_lr, 0.001);
        assert_eq!(cfg.inner_steps, 25);
        assert_eq!(cfg.target_loss_weight, 30.0);
        assert_eq!(cfg.temperature, 30.0);
        assert_eq!(cfg.window_len, 128);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.warmup_epochs, 20);
        assert_eq!(cfg.total_epochs, 90);
        assert_eq!(cfg.mode, TrainMode::Metsk);
        assert!(!cfg.second_order);
    }

    #[test]
    fn sgd_single_step_on_quadratic() {
        // loss = theta^2, theta0 = 1, lr 0.01, one step -> 0.98
        let mut init = ParamTree::new();
        init.insert("theta", Tensor::scalar(1.0)).unwrap();
        let (adapted, losses) = sgd_adapt(
            |g, vars| {
                let t = vars.get("theta")?;
                let sq = g.mul(t, t)?;
                Ok(g.sum(sq))
            },
            &init,
            0.01,
            1,
        )
        .unwrap();
        assert!((adapted.get("theta").unwrap().data()[0] - 0.98).abs() < 1e-15);
        assert_eq!(losses.len(), 2);
        assert!((losses[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_lr_is_bit_exact_noop() {
        let mut init = ParamTree::new();
        init.insert("theta", Tensor::vector(vec![0.5, -1.5])).unwrap();
        let (adapted, _) = sgd_adapt(
            |g, vars| {
                let t = vars.get("theta")?;
                let sq = g.mul(t, t)?;
                Ok(g.sum(sq))
            },
            &init,
            0.0,
            5,
        )
        .unwrap();
        assert!(adapted.bits_equal(&init));
    }

    #[test]
    fn convex_head_adaptation_reduces_loss_over_seeds() {
        // frozen random features + FC-and-sigmoid head: logistic loss,
        // convex in the head weights; 25 steps at lr 0.01 must descend
        for seed in 0..10u64 {
            let mut rng = Rng::from_seed(seed);
            let n = 8;
            let dim = 6;
            let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
            let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            let mut init = ParamTree::new();
            init.insert(
                "fc/w",
                Tensor::new(vec![dim], (0..dim).map(|_| rng.uniform(-0.5, 0.5)).collect()).unwrap(),
            )
            .unwrap();
            init.insert("fc/b", Tensor::scalar(rng.uniform(-0.5, 0.5))).unwrap();
            let (_, losses) = sgd_adapt(
                |g, vars| {
                    let w = vars.get("fc/w")?;
                    let b = vars.get("fc/b")?;
                    let mut logits = Vec::new();
                    for f in &feats {
                        let fv = g.constant(Tensor::vector(f.clone()));
                        let dot = g.dot(fv, w)?;
                        let z = g.add(dot, b)?;
                        logits.push(z);
                    }
                    mean_cross_entropy(g, &logits, &labels)
                },
                &init,
                0.01,
                25,
            )
            .unwrap();
            assert!(
                losses.last().unwrap() < &losses[0],
                "seed {seed}: {} -> {}",
                losses[0],
                losses.last().unwrap()
            );
        }
    }

    #[test]
    fn train_with_zero_iterations_returns_init() {
        let model = tiny_model();
        let source = synth_generate(&tiny_spec(6, 32, 4, false), 1).unwrap();
        let target = synth_generate(&tiny_spec(6, 32, 4, true), 2).unwrap();
        let cfg = TrainConfig {
            outer_iters: Some(0),
            warmup_epochs: 0,
            ..tiny_cfg()
        };
        let out = train(Some(&source), Some(&target), &model, &cfg).unwrap();
        let mut rng = Rng::stream(cfg.seed, "init");
        let fresh = init_params(&model, &mut rng).unwrap();
        assert!(out.params.bits_equal(&fresh));
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let model = tiny_model();
        let source = synth_generate(&tiny_spec(6, 32, 4, false), 1).unwrap();
        let target = synth_generate(&tiny_spec(6, 32, 4, true), 2).unwrap();
        let cfg = tiny_cfg();
        let a = train(Some(&source), Some(&target), &model, &cfg).unwrap();
        let b = train(Some(&source), Some(&target), &model, &cfg).unwrap();
        assert!(a.params.bits_equal(&b.params));
    }

    #[test]
    fn metsk_with_zero_weight_matches_ssl_mode() {
        let model = tiny_model();
        let source = synth_generate(&tiny_spec(6, 32, 4, false), 1).unwrap();
        let target = synth_generate(&tiny_spec(6, 32, 4, true), 2).unwrap();
        let metsk_cfg = TrainConfig {
            target_loss_weight: 0.0,
            ..tiny_cfg()
        };
        let ssl_cfg = TrainConfig {
            mode: TrainMode::Ssl,
            target_loss_weight: 0.0,
            ..tiny_cfg()
        };
        let a = train(Some(&source), Some(&target), &model, &metsk_cfg).unwrap();
        let b = train(Some(&source), None, &model, &ssl_cfg).unwrap();
        assert!(a.params.bits_equal(&b.params));
    }

    #[test]
    fn mel_never_touches_source_head() {
        let model = tiny_model();
        let target = synth_generate(&tiny_spec(6, 32, 6, true), 2).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::Mel,
            ..tiny_cfg()
        };
        let out = train(None, Some(&target), &model, &cfg).unwrap();
        let mut rng = Rng::stream(cfg.seed, "init");
        let fresh = init_params(&model, &mut rng).unwrap();
        let sel = Selector::prefixes([SOURCE_HEAD_PREFIX]);
        assert!(out.params.subset(&sel).bits_equal(&fresh.subset(&sel)));
        // but the extractor did move
        let ext = Selector::prefixes([EXTRACTOR_PREFIX]);
        assert!(!out.params.subset(&ext).bits_equal(&fresh.subset(&ext)));
    }

    #[test]
    fn mtl_updates_target_head_once_per_iteration() {
        let model = tiny_model();
        let source = synth_generate(&tiny_spec(6, 32, 4, false), 1).unwrap();
        let target = synth_generate(&tiny_spec(6, 32, 4, true), 2).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::Mtl,
            outer_iters: Some(1),
            ..tiny_cfg()
        };
        let out = train(Some(&source), Some(&target), &model, &cfg).unwrap();
        // single iteration, no inner loop: log shows no inner loss and the
        // target head changed exactly once (it differs from init)
        assert_eq!(out.log.records.len(), 1);
        assert!(out.log.records[0].inner_final_loss.is_none());
        let mut rng = Rng::stream(cfg.seed, "init");
        let fresh = init_params(&model, &mut rng).unwrap();
        let tgt = Selector::prefixes([TARGET_HEAD_PREFIX]);
        assert!(!out.params.subset(&tgt).bits_equal(&fresh.subset(&tgt)));
    }

    #[test]
    fn second_order_runs_and_differs_from_first_order() {
        let model = tiny_model();
        let source = synth_generate(&tiny_spec(4, 24, 3, false), 1).unwrap();
        let target = synth_generate(&tiny_spec(4, 24, 3, true), 2).unwrap();
        let base = TrainConfig {
            window_len: 12,
            batch_size: 2,
            inner_steps: 2,
            outer_iters: Some(1),
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        let first = train(Some(&source), Some(&target), &model, &base).unwrap();
        let second_cfg = TrainConfig {
            second_order: true,
            ..base
        };
        let second = train(Some(&source), Some(&target), &model, &second_cfg).unwrap();
        // the extractor updates diverge once inner steps are differentiated
        let ext = Selector::prefixes([EXTRACTOR_PREFIX]);
        assert!(!first.params.subset(&ext).bits_equal(&second.params.subset(&ext)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let model = tiny_model();
        let source = synth_generate(&tiny_spec(6, 32, 4, false), 1).unwrap();
        let target = synth_generate(&tiny_spec(6, 32, 4, true), 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 3,
            ..tiny_cfg()
        };
        assert!(matches!(
            train(Some(&source), Some(&target), &model, &cfg),
            Err(TrainFailure::Invalid(_))
        ));
        let cfg = TrainConfig {
            meta_train_size: Some(5),
            meta_val_size: Some(5),
            ..tiny_cfg()
        };
        assert!(matches!(
            train(Some(&source), Some(&target), &model, &cfg),
            Err(TrainFailure::Invalid(_))
        ));
        // missing source
        assert!(matches!(
            train(None, Some(&target), &model, &tiny_cfg()),
            Err(TrainFailure::Invalid(_))
        ));
    }

    #[test]
    fn outer_step_gradient_matches_objective_finite_differences() {
        // first-order contract: the step's gradient is the gradient of the
        // combined objective with the adapted head held constant
        let model = tiny_model();
        let target = synth_generate(&tiny_spec(6, 48, 4, true), 51).unwrap();
        let source = synth_generate(&tiny_spec(6, 48, 4, false), 52).unwrap();
        let cfg = TrainConfig {
            window_len: 16,
            batch_size: 4,
            target_loss_weight: 3.0,
            ..TrainConfig::default()
        };
        let mut rng = Rng::stream(9, "init");
        let params = init_params(&model, &mut rng).unwrap();
        let adapted = init_target_head(&model, &mut rng).unwrap();

        let graphs_t = crate::connectome::normalized_graphs(&target).unwrap();
        let graphs_s = crate::connectome::normalized_graphs(&source).unwrap();
        let mut sampler = Rng::stream(9, "sampling");
        let views: Vec<SourceView> = (0..3)
            .map(|i| {
                let (a, b) = sample_window_pair(&source.subjects[i], 16, &mut sampler).unwrap();
                SourceView {
                    window_a: a.window,
                    window_b: b.window,
                    adjacency: graphs_s[i].clone(),
                    label: None,
                }
            })
            .collect();
        let batch = TargetBatch {
            windows: (0..4)
                .map(|i| subsequence_at(&target.subjects[i], 2, 16).unwrap().window)
                .collect(),
            adjacencies: (0..4).map(|i| graphs_t[i].clone()).collect(),
            labels: (0..4).map(|i| target.subjects[i].label.unwrap()).collect(),
        };

        let mut p = params.clone();
        let mut adam = AdamState::new(&p);
        let stats = outer_step(&mut p, &mut adam, &model, &cfg, Some(&views), Some((&batch, &adapted)))
            .unwrap();

        let h = 1e-5;
        let mut checked = 0;
        for (name, grad_tensor) in stats.gradients.iter() {
            let base = params.get(name).unwrap().clone();
            for idx in 0..base.len().min(3) {
                let mut plus = params.clone();
                plus.set(name, base.perturbed(idx, h)).unwrap();
                let mut minus = params.clone();
                minus.set(name, base.perturbed(idx, -h)).unwrap();
                let up = outer_objective(&plus, &model, &cfg, Some(&views), Some((&batch, &adapted))).unwrap();
                let down =
                    outer_objective(&minus, &model, &cfg, Some(&views), Some((&batch, &adapted))).unwrap();
                let numeric = (up - down) / (2.0 * h);
                let a = grad_tensor.data()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "{name}[{idx}]: {a} vs {numeric}"
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn adam_zero_lr_leaves_parameters_untouched() {
        let mut params = ParamTree::new();
        params.insert("w", Tensor::vector(vec![0.5, -1.25, 3.0])).unwrap();
        let before = params.clone();
        let mut adam = AdamState::new(&params);
        let mut grads = ParamTree::new();
        grads.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
        adam.step(&mut params, &grads, 0.0).unwrap();
        assert!(params.bits_equal(&before));
        // and a nonzero rate does move them
        adam.step(&mut params, &grads, 0.001).unwrap();
        assert!(!params.bits_equal(&before));
    }

    #[test]
    fn balanced_batches_have_exact_per_class_counts() {
        let pools: [Vec<usize>; 2] = [(0..7).collect(), (10..13).collect()];
        let mut rng = Rng::from_seed(3);
        for _ in 0..50 {
            let batch = sample_balanced(&pools, 6, &mut rng).unwrap();
            assert_eq!(batch.len(), 6);
            let c0 = batch.iter().filter(|&&i| i < 7).count();
            let c1 = batch.iter().filter(|&&i| i >= 10).count();
            assert_eq!(c0, 3);
            assert_eq!(c1, 3);
        }
        // a class larger than needed stays replacement-free
        let batch = sample_balanced(&pools, 6, &mut rng).unwrap();
        let mut firsts: Vec<usize> = batch.iter().copied().filter(|&i| i < 7).collect();
        firsts.sort_unstable();
        firsts.dedup();
        assert_eq!(firsts.len(), 3);
    }

    #[test]
    fn config_json_roundtrip_and_defaults() {
        let cfg = TrainConfig::from_json("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        let cfg = TrainConfig::from_json("{\"inner_steps\": 3, \"mode\": \"mel\"}").unwrap();
        assert_eq!(cfg.inner_steps, 3);
        assert_eq!(cfg.mode, TrainMode::Mel);
        assert!(TrainConfig::from_json("{\"unknown_field\": 1}").is_err());
    }
}
