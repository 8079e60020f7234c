//! Named parameter trees.
//!
//! A `ParamTree` holds all trainable weights as uniquely named tensor leaves
//! (e.g. `extractor/m0/spatial_w`). Name prefixes partition the tree into the
//! feature extractor and the two heads, which is how the training loop
//! freezes one part while updating another.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamTree {
    leaves: BTreeMap<String, Tensor>,
}

impl ParamTree {
    pub fn new() -> Self {
        ParamTree::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.leaves.contains_key(&path) {
            return Err(CoreError::Config(format!("duplicate parameter leaf '{path}'")));
        }
        self.leaves.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.leaves
            .get(path)
            .ok_or_else(|| CoreError::Config(format!("missing parameter leaf '{path}'")))
    }

    pub fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        match self.leaves.get_mut(path) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(CoreError::shape(
                        "ParamTree::set",
                        format!("leaf '{path}': {:?} vs {:?}", slot.shape(), value.shape()),
                    ));
                }
                *slot = value;
                Ok(())
            }
            None => Err(CoreError::Config(format!("missing parameter leaf '{path}'"))),
        }
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// Leaves in deterministic (lexicographic) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.leaves.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.leaves.keys().cloned().collect()
    }

    pub fn total_elements(&self) -> usize {
        self.leaves.values().map(|t| t.len()).sum()
    }

    /// Leaves whose path matches the selector, as a new tree.
    pub fn subset(&self, selector: &Selector) -> ParamTree {
        let leaves = self
            .leaves
            .iter()
            .filter(|(k, _)| selector.matches(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamTree { leaves }
    }

    /// Overwrite matching leaves from `other` (shapes must agree).
    pub fn assign_from(&mut self, other: &ParamTree) -> Result<()> {
        for (k, v) in other.iter() {
            self.set(k, v.clone())?;
        }
        Ok(())
    }

    /// Same leaf names and shapes.
    pub fn same_structure(&self, other: &ParamTree) -> bool {
        self.leaves.len() == other.leaves.len()
            && self
                .leaves
                .iter()
                .zip(other.leaves.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Bit-level equality of all leaf values.
    pub fn bits_equal(&self, other: &ParamTree) -> bool {
        self.same_structure(other)
            && self.leaves.iter().zip(other.leaves.iter()).all(|((_, a), (_, b))| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn zeros_like(&self) -> ParamTree {
        let leaves = self
            .leaves
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        ParamTree { leaves }
    }

    /// Elementwise combine with an identically-structured tree.
    pub fn zip_map(&self, other: &ParamTree, f: impl Fn(f64, f64) -> f64) -> Result<ParamTree> {
        if !self.same_structure(other) {
            return Err(CoreError::shape("ParamTree::zip_map", "structure mismatch"));
        }
        let leaves = self
            .leaves
            .iter()
            .zip(other.leaves.iter())
            .map(|((k, a), (_, b))| {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                (k.clone(), Tensor::from_raw(a.shape().to_vec(), data))
            })
            .collect();
        Ok(ParamTree { leaves })
    }

    pub fn all_finite(&self) -> bool {
        self.leaves.values().all(|t| t.all_finite())
    }

    /// First leaf containing a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.leaves
            .iter()
            .find(|(_, t)| !t.all_finite())
            .map(|(k, _)| k.as_str())
    }
}

/// Selects parameter leaves by path prefix. `Selector::all()` matches
/// everything.
#[derive(Clone, Debug)]
pub struct Selector {
    prefixes: Option<Vec<String>>,
}

impl Selector {
    pub fn all() -> Self {
        Selector { prefixes: None }
    }

    pub fn prefixes<S: Into<String>>(prefixes: impl IntoIterator<Item = S>) -> Self {
        Selector {
            prefixes: Some(prefixes.into_iter().map(Into::into).collect()),
        }
    }

    pub fn matches(&self, path: &str) -> bool {
        match &self.prefixes {
            None => true,
            Some(ps) => ps.iter().any(|p| path.starts_with(p.as_str())),
        }
    }
}

/// Parameter leaves bound into a graph as variables.
#[derive(Clone, Debug)]
pub struct VarTree {
    vars: BTreeMap<String, Var>,
}

impl VarTree {
    pub fn from_map(vars: BTreeMap<String, Var>) -> VarTree {
        VarTree { vars }
    }

    /// This tree's bindings overridden by `other` where names collide.
    pub fn merged_with(&self, other: &VarTree) -> VarTree {
        let mut vars = self.vars.clone();
        for (k, v) in &other.vars {
            vars.insert(k.clone(), *v);
        }
        VarTree { vars }
    }

    /// Bind every leaf of `params` into `graph`; leaves matching `trainable`
    /// become gradient inputs, the rest constants.
    pub fn bind(graph: &mut Graph, params: &ParamTree, trainable: &Selector) -> VarTree {
        let mut vars = BTreeMap::new();
        for (path, tensor) in params.iter() {
            let v = if trainable.matches(path) {
                graph.input(tensor.clone())
            } else {
                graph.constant(tensor.clone())
            };
            vars.insert(path.to_string(), v);
        }
        VarTree { vars }
    }

    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| CoreError::Config(format!("missing bound leaf '{path}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Exact gradients of `loss_fn` with respect to the selected leaves of
/// `params`. Non-selected leaves are constants. Returns the loss value and a
/// tree holding exactly the selected leaves (same shapes as the inputs).
/// Errors name the offending leaf when a gradient is non-finite.
pub fn grad<F>(loss_fn: F, params: &ParamTree, wrt: &Selector) -> Result<(f64, ParamTree)>
where
    F: FnOnce(&mut Graph, &VarTree) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars = VarTree::bind(&mut graph, params, wrt);
    let loss = loss_fn(&mut graph, &vars)?;
    let loss_value = graph.scalar(loss)?;

    let selected: Vec<(&str, Var)> = vars.iter().filter(|(p, _)| wrt.matches(p)).collect();
    let wrt_vars: Vec<Var> = selected.iter().map(|(_, v)| *v).collect();
    let names: Vec<&str> = selected.iter().map(|(p, _)| *p).collect();
    let tensors = graph.grad_tensors(loss, &wrt_vars, &names)?;

    let mut out = ParamTree::new();
    for ((name, _), tensor) in selected.iter().zip(tensors) {
        out.insert(*name, tensor)?;
    }
    Ok((loss_value, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_leaf_tree() -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("head/w", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        t.insert("extractor/w", Tensor::vector(vec![3.0])).unwrap();
        t
    }

    #[test]
    fn duplicate_leaf_rejected() {
        let mut t = ParamTree::new();
        t.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(t.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn grad_selects_only_requested_leaves() {
        let params = two_leaf_tree();
        // loss = sum(head_w^2) + sum(extractor_w^2)
        let sel = Selector::prefixes(["head/"]);
        let (loss, grads) = grad(
            |g, vars| {
                let hw = vars.get("head/w")?;
                let ew = vars.get("extractor/w")?;
                let h2 = g.mul(hw, hw)?;
                let e2 = g.mul(ew, ew)?;
                let hs = g.sum(h2);
                let es = g.sum(e2);
                g.add(hs, es)
            },
            &params,
            &sel,
        )
        .unwrap();
        assert!((loss - (1.0 + 4.0 + 9.0)).abs() < 1e-12);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get("head/w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_tree_matches_structure_and_shapes() {
        let params = two_leaf_tree();
        let (_, grads) = grad(
            |g, vars| {
                let hw = vars.get("head/w")?;
                let ew = vars.get("extractor/w")?;
                let h = g.sum(hw);
                let e = g.sum(ew);
                g.add(h, e)
            },
            &params,
            &Selector::all(),
        )
        .unwrap();
        assert!(grads.same_structure(&params));
    }

    #[test]
    fn frozen_leaves_are_constants() {
        // loss uses both leaves; gradient for the frozen one is not returned,
        // and the loss still evaluates correctly.
        let params = two_leaf_tree();
        let (loss, grads) = grad(
            |g, vars| {
                let hw = vars.get("head/w")?;
                let ew = vars.get("extractor/w")?;
                let prod = g.sum(hw);
                let es = g.sum(ew);
                g.mul(prod, es)
            },
            &params,
            &Selector::prefixes(["extractor/"]),
        )
        .unwrap();
        assert!((loss - 9.0).abs() < 1e-12);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get("extractor/w").unwrap().data(), &[3.0]);
    }

    #[test]
    fn bits_equal_detects_mutation() {
        let a = two_leaf_tree();
        let mut b = a.clone();
        assert!(a.bits_equal(&b));
        b.set("head/w", Tensor::matrix(1, 2, vec![1.0, 2.0 + 1e-16]).unwrap()).unwrap();
        // 2.0 + 1e-16 rounds back to 2.0 in f64, so still equal
        assert!(a.bits_equal(&b));
        b.set("head/w", Tensor::matrix(1, 2, vec![1.0, 2.5]).unwrap()).unwrap();
        assert!(!a.bits_equal(&b));
    }
}
