//! Earth mover's distance between feature histograms and the domain
//! similarity score exp(-gamma * EMD).
//!
//! Representatives are scalars, so the balanced 1-D problem has a closed
//! form via cumulative-mass differences; a general transportation simplex is
//! kept alongside as the cross-checking solver (and for any future
//! multi-dimensional ground metric).

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    /// Fraction of the samples in this bin.
    pub mass: f64,
    /// Mean of the member values.
    pub representative: f64,
}

/// Histogram of a feature vector: equal-width bins with empty bins dropped,
/// so every bin carries positive mass and a well-defined representative.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureHistogram {
    pub bins: Vec<HistogramBin>,
}

impl FeatureHistogram {
    pub fn total_mass(&self) -> f64 {
        self.bins.iter().map(|b| b.mass).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins.is_empty() {
            return Err(CoreError::Degenerate("histogram with no bins".into()));
        }
        for b in &self.bins {
            if b.mass < 0.0 {
                return Err(CoreError::Degenerate(format!("negative bin mass {}", b.mass)));
            }
            if !(b.lo <= b.representative && b.representative <= b.hi) {
                return Err(CoreError::Degenerate(format!(
                    "representative {} outside bin [{}, {}]",
                    b.representative, b.lo, b.hi
                )));
            }
        }
        if (self.total_mass() - 1.0).abs() > 1e-9 {
            return Err(CoreError::Degenerate(format!(
                "histogram mass {} is not 1",
                self.total_mass()
            )));
        }
        Ok(())
    }
}

/// Histogram over an explicit [lo, hi] range. A degenerate range (constant
/// features) collapses to a single bin of mass 1.
pub fn histogram_with_range(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<FeatureHistogram> {
    if values.is_empty() {
        return Err(CoreError::Degenerate("histogram of an empty feature vector".into()));
    }
    if bins == 0 {
        return Err(CoreError::Config("histogram needs at least one bin".into()));
    }
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(CoreError::Config(format!("invalid histogram range [{lo}, {hi}]")));
    }
    let n = values.len() as f64;
    if lo == hi {
        return Ok(FeatureHistogram {
            bins: vec![HistogramBin { lo, hi, mass: 1.0, representative: lo }],
        });
    }
    let width = (hi - lo) / bins as f64;
    // Membership is decided against the stored edges, so a representative can
    // never land outside its own bin.
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0usize; bins];
    let mut sums = vec![0.0; bins];
    for &v in values {
        let mut idx = edges[1..bins].partition_point(|&e| e <= v);
        idx = idx.min(bins - 1);
        counts[idx] += 1;
        sums[idx] += v;
    }
    let kept: Vec<HistogramBin> = (0..bins)
        .filter(|&i| counts[i] > 0)
        .map(|i| HistogramBin {
            lo: edges[i],
            hi: edges[i + 1],
            mass: counts[i] as f64 / n,
            representative: (sums[i] / counts[i] as f64).clamp(edges[i], edges[i + 1]),
        })
        .collect();
    let h = FeatureHistogram { bins: kept };
    h.validate()?;
    Ok(h)
}

/// Histogram over the vector's own [min, max] range.
pub fn histogram(values: &[f64], bins: usize) -> Result<FeatureHistogram> {
    if values.is_empty() {
        return Err(CoreError::Degenerate("histogram of an empty feature vector".into()));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    histogram_with_range(values, bins, lo, hi)
}

/// Histograms of two vectors over their joint [min, max] range, so the
/// ground distances are comparable.
pub fn histogram_pair(a: &[f64], b: &[f64], bins: usize) -> Result<(FeatureHistogram, FeatureHistogram)> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::Degenerate("histogram of an empty feature vector".into()));
    }
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((
        histogram_with_range(a, bins, lo, hi)?,
        histogram_with_range(b, bins, lo, hi)?,
    ))
}

/// 1-D closed form: sort all representatives, sweep the signed cumulative
/// mass, and integrate |carry| against the gaps. Exact for the balanced
/// problem with absolute-difference costs.
pub fn emd(hs: &FeatureHistogram, ht: &FeatureHistogram) -> Result<f64> {
    hs.validate()?;
    ht.validate()?;
    let mut points: Vec<(f64, f64)> = hs
        .bins
        .iter()
        .map(|b| (b.representative, b.mass))
        .chain(ht.bins.iter().map(|b| (b.representative, -b.mass)))
        .collect();
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut cost = 0.0;
    let mut carry = 0.0;
    let mut i = 0;
    while i < points.len() {
        let x = points[i].0;
        while i < points.len() && points[i].0 == x {
            carry += points[i].1;
            i += 1;
        }
        if i < points.len() {
            cost += carry.abs() * (points[i].0 - x);
        }
    }
    Ok(cost)
}

/// Transportation simplex on the bipartite bin graph: northwest-corner
/// start, MODI potentials, Bland's entering rule. Kept as the independent
/// cross-check for the closed form.
pub fn emd_simplex(hs: &FeatureHistogram, ht: &FeatureHistogram) -> Result<f64> {
    hs.validate()?;
    ht.validate()?;
    let supplies: Vec<f64> = hs.bins.iter().map(|b| b.mass).collect();
    let demands: Vec<f64> = ht.bins.iter().map(|b| b.mass).collect();
    let m = supplies.len();
    let n = demands.len();
    let cost = |i: usize, j: usize| (hs.bins[i].representative - ht.bins[j].representative).abs();

    // Northwest-corner initial basis; on simultaneous exhaustion advance only
    // the row, leaving a zero-flow basic cell to keep the tree spanning.
    let mut flow = vec![0.0; m * n];
    let mut basic = vec![false; m * n];
    {
        let mut s = supplies.clone();
        let mut d = demands.clone();
        let (mut i, mut j) = (0, 0);
        loop {
            let moved = s[i].min(d[j]);
            flow[i * n + j] = moved;
            basic[i * n + j] = true;
            s[i] -= moved;
            d[j] -= moved;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if s[i] <= d[j] && i < m - 1 {
                i += 1;
            } else if j < n - 1 {
                j += 1;
            } else {
                i += 1;
            }
        }
    }

    for _round in 0..10_000 {
        // potentials from the basis tree (u[0] = 0)
        let mut u = vec![f64::NAN; m];
        let mut v = vec![f64::NAN; n];
        u[0] = 0.0;
        let mut changed = true;
        while changed {
            changed = false;
            for i in 0..m {
                for j in 0..n {
                    if basic[i * n + j] {
                        if !u[i].is_nan() && v[j].is_nan() {
                            v[j] = cost(i, j) - u[i];
                            changed = true;
                        } else if u[i].is_nan() && !v[j].is_nan() {
                            u[i] = cost(i, j) - v[j];
                            changed = true;
                        }
                    }
                }
            }
        }
        // Bland: first cell with clearly negative reduced cost
        let mut entering = None;
        'search: for i in 0..m {
            for j in 0..n {
                if !basic[i * n + j] && cost(i, j) - u[i] - v[j] < -1e-12 {
                    entering = Some((i, j));
                    break 'search;
                }
            }
        }
        let Some((ei, ej)) = entering else { break };

        // cycle: tree path from row ei to column ej through basic cells
        let path = basis_path(&basic, m, n, ei, ej).ok_or_else(|| {
            CoreError::Degenerate("transportation basis lost its spanning tree".into())
        })?;
        // path alternates -,+,-,... starting at the first tree edge
        let minus_cells: Vec<(usize, usize)> = path.iter().copied().step_by(2).collect();
        let delta = minus_cells
            .iter()
            .map(|&(i, j)| flow[i * n + j])
            .fold(f64::INFINITY, f64::min);
        let leaving = *minus_cells
            .iter()
            .find(|&&(i, j)| flow[i * n + j] == delta)
            .expect("minimum exists");
        for (k, &(i, j)) in path.iter().enumerate() {
            if k % 2 == 0 {
                flow[i * n + j] -= delta;
            } else {
                flow[i * n + j] += delta;
            }
        }
        flow[ei * n + ej] += delta;
        basic[ei * n + ej] = true;
        basic[leaving.0 * n + leaving.1] = false;
        flow[leaving.0 * n + leaving.1] = 0.0;
    }

    let mut total = 0.0;
    for i in 0..m {
        for j in 0..n {
            if flow[i * n + j] != 0.0 {
                total += flow[i * n + j] * cost(i, j);
            }
        }
    }
    Ok(total)
}

/// Path of basic cells from row `start_row` to column `target_col` through
/// the basis tree (rows and columns as nodes, basic cells as edges).
fn basis_path(basic: &[bool], m: usize, n: usize, start_row: usize, target_col: usize) -> Option<Vec<(usize, usize)>> {
    // nodes: 0..m rows, m..m+n columns
    let total = m + n;
    let mut parent_edge: Vec<Option<(usize, (usize, usize))>> = vec![None; total];
    let mut visited = vec![false; total];
    let mut queue = std::collections::VecDeque::new();
    visited[start_row] = true;
    queue.push_back(start_row);
    while let Some(node) = queue.pop_front() {
        if node == m + target_col {
            // reconstruct
            let mut path = Vec::new();
            let mut cur = node;
            while let Some((prev, cell)) = parent_edge[cur] {
                path.push(cell);
                cur = prev;
            }
            path.reverse();
            return Some(path);
        }
        if node < m {
            let i = node;
            for j in 0..n {
                if basic[i * n + j] && !visited[m + j] {
                    visited[m + j] = true;
                    parent_edge[m + j] = Some((node, (i, j)));
                    queue.push_back(m + j);
                }
            }
        } else {
            let j = node - m;
            for i in 0..m {
                if basic[i * n + j] && !visited[i] {
                    visited[i] = true;
                    parent_edge[i] = Some((node, (i, j)));
                    queue.push_back(i);
                }
            }
        }
    }
    None
}

/// Domain similarity between two flattened mean-embedding vectors:
/// exp(-gamma * EMD) over joint-range histograms. Defaults: gamma = 0.01,
/// 100 bins.
pub const DEFAULT_GAMMA: f64 = 0.01;
pub const DEFAULT_BINS: usize = 100;

pub fn domain_similarity(xs: &[f64], xt: &[f64], gamma: f64, bins: usize) -> Result<f64> {
    if gamma < 0.0 {
        return Err(CoreError::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    let (hs, ht) = histogram_pair(xs, xt, bins)?;
    Ok((-gamma * emd(&hs, &ht)?).exp())
}
