//! The spatio-temporal graph-convolutional model.
//!
//! One module applies a spatial graph convolution (adjacency-weighted channel
//! mixing per time point) followed by a per-node temporal convolution with
//! bias and ReLU. The feature extractor chains three modules; each head adds
//! one more module, pools over nodes and time, and finishes with a
//! fully-connected layer (sigmoid classifier or raw projector).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamTree, VarTree};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const EXTRACTOR_PREFIX: &str = "extractor/";
pub const SOURCE_HEAD_PREFIX: &str = "source_head/";
pub const TARGET_HEAD_PREFIX: &str = "target_head/";

/// What a head emits after pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// FC to one logit, sigmoid probability.
    Classifier,
    /// FC to an embedding vector, no activation.
    Projector,
}

/// How per-window probabilities are combined into one subject prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VoteKind {
    /// Mean of probabilities (soft voting). The default.
    #[default]
    Mean,
    /// Fraction of windows voting above 0.5.
    Majority,
}

/// Architecture knobs. Defaults follow the desk-scale configuration:
/// channels 1 -> 16 -> 16 -> 16 through the extractor, head module 16 -> 16,
/// projector dimension 64, temporal kernel 11.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StgcnConfig {
    /// Channel widths through the extractor, starting at the input width.
    pub channels: Vec<usize>,
    /// Channel width of each head's module.
    pub head_channels: usize,
    /// Projector output dimension.
    pub embed_dim: usize,
    /// Temporal kernel length (odd).
    pub kernel: usize,
    /// Source head output (projector for the contrastive task, classifier
    /// when the source task is supervised).
    pub source_head: HeadKind,
    #[serde(default)]
    pub vote: VoteKind,
}

impl Default for StgcnConfig {
    fn default() -> Self {
        StgcnConfig {
            channels: vec![1, 16, 16, 16],
            head_channels: 16,
            embed_dim: 64,
            kernel: 11,
            source_head: HeadKind::Projector,
            vote: VoteKind::Mean,
        }
    }
}

impl StgcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(CoreError::Config(
                "stgcn: need at least one extractor module (channels.len() >= 2)".into(),
            ));
        }
        if self.channels.contains(&0) || self.head_channels == 0 || self.embed_dim == 0 {
            return Err(CoreError::Config("stgcn: zero-width layer".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(CoreError::Config(format!(
                "stgcn: temporal kernel {} must be odd",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    fn head_fc_out(&self, kind: HeadKind) -> usize {
        match kind {
            HeadKind::Classifier => 1,
            HeadKind::Projector => self.embed_dim,
        }
    }
}

fn uniform_init(rng: &mut Rng, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor {
    let bound = gain / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::from_raw(shape, data)
}

// Variance-preserving bound for uniform weights feeding a ReLU
// (var = gain^2 / (3 fan_in) must equal 2 / fan_in).
const RELU_GAIN: f64 = 2.449489742783178; // sqrt(6)

fn init_module(
    params: &mut ParamTree,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    rng: &mut Rng,
) -> Result<()> {
    params.insert(
        format!("{prefix}spatial_w"),
        uniform_init(rng, vec![c_in, c_out], c_in, RELU_GAIN),
    )?;
    params.insert(
        format!("{prefix}temporal_k"),
        uniform_init(rng, vec![kernel, c_out, c_out], kernel * c_out, RELU_GAIN),
    )?;
    // Conv biases start at zero so fresh activations carry subject signal
    // rather than a shared offset.
    params.insert(format!("{prefix}bias"), Tensor::zeros(vec![c_out]))?;
    Ok(())
}

fn init_head(params: &mut ParamTree, prefix: &str, cfg: &StgcnConfig, kind: HeadKind, rng: &mut Rng) -> Result<()> {
    let c_in = cfg.feature_channels();
    let c = cfg.head_channels;
    init_module(params, &format!("{prefix}stgcn/"), c_in, c, cfg.kernel, rng)?;
    let out = cfg.head_fc_out(kind);
    params.insert(format!("{prefix}fc/weight"), uniform_init(rng, vec![c, out], c, 1.0))?;
    params.insert(format!("{prefix}fc/bias"), uniform_init(rng, vec![out], c, 1.0))?;
    Ok(())
}

/// All model parameters, freshly initialized with uniform(-1/sqrt(fan_in),
/// +1/sqrt(fan_in)). Leaves are partitioned by prefix into `extractor/`,
/// `source_head/`, and `target_head/`.
pub fn init_params(cfg: &StgcnConfig, rng: &mut Rng) -> Result<ParamTree> {
    cfg.validate()?;
    let mut params = ParamTree::new();
    for m in 0..cfg.channels.len() - 1 {
        init_module(
            &mut params,
            &format!("{EXTRACTOR_PREFIX}m{m}/"),
            cfg.channels[m],
            cfg.channels[m + 1],
            cfg.kernel,
            rng,
        )?;
    }
    init_head(&mut params, SOURCE_HEAD_PREFIX, cfg, cfg.source_head, rng)?;
    init_head(&mut params, TARGET_HEAD_PREFIX, cfg, HeadKind::Classifier, rng)?;
    Ok(params)
}

/// Fresh random parameters for the target head only (re-initialized at every
/// outer iteration).
pub fn init_target_head(cfg: &StgcnConfig, rng: &mut Rng) -> Result<ParamTree> {
    let mut params = ParamTree::new();
    init_head(&mut params, TARGET_HEAD_PREFIX, cfg, HeadKind::Classifier, rng)?;
    Ok(params)
}

/// One ST-GCN module: spatial graph conv, temporal conv, bias, ReLU.
fn module_forward(g: &mut Graph, x: Var, adj: Var, vars: &VarTree, prefix: &str) -> Result<Var> {
    let w = vars.get(&format!("{prefix}spatial_w"))?;
    let k = vars.get(&format!("{prefix}temporal_k"))?;
    let b = vars.get(&format!("{prefix}bias"))?;
    let spatial = g.spatial_conv(x, adj, w)?;
    let temporal = g.temporal_conv(spatial, k)?;
    let shape = g.value(temporal).shape().to_vec();
    let bias = g.broadcast_axes(b, &shape, &[0, 1])?;
    let with_bias = g.add(temporal, bias)?;
    Ok(g.relu(with_bias))
}

/// Three chained ST-GCN modules over a [P, L, C0] window.
pub fn extractor_forward(g: &mut Graph, window: Var, adj: Var, vars: &VarTree, cfg: &StgcnConfig) -> Result<Var> {
    let mut x = window;
    for m in 0..cfg.channels.len() - 1 {
        x = module_forward(g, x, adj, vars, &format!("{EXTRACTOR_PREFIX}m{m}/"))?;
    }
    Ok(x)
}

/// Head output: either the classifier logit/probability or the projector
/// embedding, plus the pooled feature vector.
pub struct HeadOutput {
    /// Mean-pooled features after the head module, shape [C].
    pub pooled: Var,
    /// Classifier: logit [1]. Projector: embedding [embed_dim].
    pub output: Var,
    /// Classifier probability, present for classifier heads.
    pub probability: Option<Var>,
}

/// One ST-GCN module, global mean pool over nodes and time, FC layer; the
/// classifier adds a sigmoid, the projector returns the raw vector.
pub fn head_forward(
    g: &mut Graph,
    features: Var,
    adj: Var,
    vars: &VarTree,
    head_prefix: &str,
    kind: HeadKind,
) -> Result<HeadOutput> {
    let h = module_forward(g, features, adj, vars, &format!("{head_prefix}stgcn/"))?;
    let shape = g.value(h).shape().to_vec();
    let (p, l, c) = (shape[0], shape[1], shape[2]);
    let summed = g.sum_axes(h, &[0, 1])?;
    let pooled = g.scale(summed, 1.0 / (p * l) as f64);

    let w = vars.get(&format!("{head_prefix}fc/weight"))?;
    let b = vars.get(&format!("{head_prefix}fc/bias"))?;
    let row = g.reshape(pooled, vec![1, c])?;
    let fc = g.matmul(row, w)?;
    let out_dim = g.value(fc).shape()[1];
    let fc = g.reshape(fc, vec![out_dim])?;
    let output = g.add(fc, b)?;

    let probability = match kind {
        HeadKind::Classifier => Some(g.sigmoid(output)),
        HeadKind::Projector => None,
    };
    Ok(HeadOutput { pooled, output, probability })
}

/// Combine per-window probabilities into one subject-level probability.
pub fn vote(probabilities: &[f64], kind: VoteKind) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(CoreError::Batch("vote over an empty prediction list".into()));
    }
    if let Some(&bad) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(CoreError::Batch(format!("vote input {} outside [0, 1]", bad)));
    }
    let n = probabilities.len() as f64;
    Ok(match kind {
        VoteKind::Mean => {
            // summed in sorted order so the result is bit-identical under
            // any permutation of the inputs
            let mut sorted = probabilities.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            sorted.iter().sum::<f64>() / n
        }
        VoteKind::Majority => probabilities.iter().filter(|&&p| p > 0.5).count() as f64 / n,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "MTSKCKPT", u32 version, config JSON block, then
// each leaf as (path, shape, f64 data), all little-endian. Bit-exact.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"MTSKCKPT";
const CKPT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, cfg: &StgcnConfig, params: &ParamTree) -> Result<()> {
    if let Some(leaf) = params.first_non_finite() {
        return Err(CoreError::NonFinite {
            path: leaf.to_string(),
            detail: "refusing to checkpoint non-finite parameters".into(),
        });
    }
    let config_json = serde_json::to_string(cfg)
        .map_err(|e| CoreError::Checkpoint(format!("config serialization: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_json.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    file.write_all(&buf).map_err(|e| CoreError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(StgcnConfig, ParamTree)> {
    let mut file = fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > buf.len() {
            return Err(CoreError::Checkpoint(format!(
                "'{}': truncated at byte {}",
                path.display(),
                cursor
            )));
        }
        let slice = &buf[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };
    let read_u32 = |cursor: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(cursor, 4)?.try_into().unwrap()))
    };

    if take(&mut cursor, 8)? != CKPT_MAGIC {
        return Err(CoreError::Checkpoint(format!("'{}': bad magic", path.display())));
    }
    let version = read_u32(&mut cursor)?;
    if version != CKPT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "'{}': unsupported version {}",
            path.display(),
            version
        )));
    }
    let cfg_len = read_u32(&mut cursor)? as usize;
    let cfg_json = std::str::from_utf8(take(&mut cursor, cfg_len)?)
        .map_err(|e| CoreError::Checkpoint(format!("'{}': config block: {e}", path.display())))?
        .to_string();
    let cfg: StgcnConfig = serde_json::from_str(&cfg_json)
        .map_err(|e| CoreError::Checkpoint(format!("'{}': config block: {e}", path.display())))?;

    let leaf_count = read_u32(&mut cursor)? as usize;
    let mut params = ParamTree::new();
    for _ in 0..leaf_count {
        let name_len = read_u32(&mut cursor)? as usize;
        let name = std::str::from_utf8(take(&mut cursor, name_len)?)
            .map_err(|e| CoreError::Checkpoint(format!("'{}': leaf name: {e}", path.display())))?
            .to_string();
        let rank = read_u32(&mut cursor)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut cursor)? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = take(&mut cursor, n * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if cursor != buf.len() {
        return Err(CoreError::Checkpoint(format!(
            "'{}': {} trailing bytes",
            path.display(),
            buf.len() - cursor
        )));
    }
    Ok((cfg, params))
}
