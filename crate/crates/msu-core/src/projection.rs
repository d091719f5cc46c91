//! Euclidean projections onto the micro-structured constraint sets.
//!
//! A *unified* block keeps the sign of every coefficient and replaces all
//! magnitudes by their mean absolute value `q` (zero coefficients take `+q`).
//! Setting `q = 0` degenerates to *pruning*, which zeroes the whole block.
//! *N:M pruning* keeps the `nm_keep` largest-magnitude coefficients inside
//! every block and zeroes the rest.
//!
//! When only a fraction of blocks is constrained, the selected subset is the
//! one with the smallest total projection distance: blocks are ranked by
//! [`unify_distortion`] (unify) or by L1 norm (prune), ties broken by lower
//! block index. Ragged edge blocks participate with their actual sizes and
//! unnormalized scores, which keeps the selection equal to the global
//! Euclidean projection.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::blocking::{block_values, partition, scatter_block_mut, BlockPartition, BlockShape};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Per-layer constraint method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Layer excluded from compression.
    None,
    /// Blocks share one absolute value, signs preserved.
    Unify,
    /// Blocks zeroed wholesale.
    Prune,
    /// Within every block, only the `nm_keep` largest magnitudes survive.
    NmPrune,
}

/// Score used to rank blocks when `ratio < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Squared distance to the unified block (Euclidean-optimal for unify).
    Distortion,
    /// L1 norm of the block (smallest pruned first).
    L1Norm,
    /// L2 norm; Euclidean-optimal alternative for pruning.
    L2Norm,
}

/// Constraint for a single layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRule {
    pub method: Method,
    pub block_shape: Option<BlockShape>,
    /// Fraction of blocks constrained, in `[0, 1]`.
    pub ratio: f64,
    pub selection: Selection,
    /// Survivors per block for [`Method::NmPrune`].
    pub nm_keep: usize,
}

impl LayerRule {
    pub fn none() -> Self {
        Self {
            method: Method::None,
            block_shape: None,
            ratio: 0.0,
            selection: Selection::Distortion,
            nm_keep: 0,
        }
    }

    pub fn unify(block_shape: BlockShape, ratio: f64) -> Self {
        Self {
            method: Method::Unify,
            block_shape: Some(block_shape),
            ratio,
            selection: Selection::Distortion,
            nm_keep: 0,
        }
    }

    pub fn prune(block_shape: BlockShape, ratio: f64) -> Self {
        Self {
            method: Method::Prune,
            block_shape: Some(block_shape),
            ratio,
            selection: Selection::L1Norm,
            nm_keep: 0,
        }
    }

    pub fn nm_prune(block_shape: BlockShape, nm_keep: usize) -> Self {
        Self {
            method: Method::NmPrune,
            block_shape: Some(block_shape),
            ratio: 1.0,
            selection: Selection::L1Norm,
            nm_keep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::InvalidSpec(format!("ratio {} outside [0, 1]", self.ratio)));
        }
        match self.method {
            Method::None => Ok(()),
            Method::Unify | Method::Prune => {
                if self.block_shape.is_none() {
                    return Err(Error::InvalidSpec("missing block shape".into()));
                }
                Ok(())
            }
            Method::NmPrune => {
                let Some(bs) = &self.block_shape else {
                    return Err(Error::InvalidSpec("missing block shape".into()));
                };
                let row_extent = match bs.dims() {
                    &[_] => 1,
                    &[_, d_out] => d_out,
                    _ => {
                        return Err(Error::InvalidSpec(
                            "nm_prune needs 1-dim blocks along the reduction axis".into(),
                        ))
                    }
                };
                if row_extent != 1 {
                    return Err(Error::InvalidSpec(
                        "nm_prune needs 1-dim blocks along the reduction axis".into(),
                    ));
                }
                if self.nm_keep >= bs.volume() {
                    return Err(Error::InvalidSpec(format!(
                        "nm_keep {} must be smaller than the block size {}",
                        self.nm_keep,
                        bs.volume()
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Per-layer constraint assignment; layers without an entry are unconstrained.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintSpec {
    rules: BTreeMap<usize, LayerRule>,
}

impl ConstraintSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, layer: usize, rule: LayerRule) -> Result<()> {
        rule.validate()?;
        self.rules.insert(layer, rule);
        Ok(())
    }

    pub fn rule(&self, layer: usize) -> LayerRule {
        self.rules.get(&layer).cloned().unwrap_or_else(LayerRule::none)
    }

    pub fn layers(&self) -> impl Iterator<Item = (&usize, &LayerRule)> {
        self.rules.iter()
    }

    /// Layer ids carrying an active (non-`None`) constraint.
    pub fn constrained_layers(&self) -> Vec<usize> {
        self.rules
            .iter()
            .filter(|(_, r)| r.method != Method::None)
            .map(|(&id, _)| id)
            .collect()
    }
}

/// How one block is constrained, as materialized in a projected tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockConstraint {
    Unified {
        block: usize,
        magnitude: f32,
        /// One flag per coefficient in block order; `true` = negative sign.
        negative: Vec<bool>,
    },
    Pruned {
        block: usize,
    },
    NmPruned {
        block: usize,
        /// One flag per coefficient in block order; `true` = kept.
        kept: Vec<bool>,
    },
}

impl BlockConstraint {
    pub fn block(&self) -> usize {
        match *self {
            BlockConstraint::Unified { block, .. }
            | BlockConstraint::Pruned { block }
            | BlockConstraint::NmPruned { block, .. } => block,
        }
    }
}

/// Constraint state of one layer after projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer_shape: Vec<usize>,
    pub method: Method,
    pub block_shape: Option<BlockShape>,
    pub num_blocks: usize,
    /// Constrained blocks in ascending block order.
    pub constrained: Vec<BlockConstraint>,
    /// Constrained blocks that are ragged edge blocks.
    pub ragged_constrained: Vec<usize>,
}

impl LayerReport {
    pub fn unconstrained(layer_shape: &[usize]) -> Self {
        Self {
            layer_shape: layer_shape.to_vec(),
            method: Method::None,
            block_shape: None,
            num_blocks: 0,
            constrained: Vec::new(),
            ragged_constrained: Vec::new(),
        }
    }

    pub fn constrained_indices(&self) -> Vec<usize> {
        self.constrained.iter().map(|c| c.block()).collect()
    }
}

/// Model-level report: one [`LayerReport`] per trainable layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintReport {
    pub layers: BTreeMap<usize, LayerReport>,
}

/// A constraint violation found by [`verify_constraint`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub block: usize,
    pub detail: String,
}

/// Result of checking a tensor against a rule; violations are data, not errors.
#[derive(Debug, Clone, PartialEq)]
pub enum VerifyOutcome {
    Clean(LayerReport),
    Violated(Vec<Violation>),
}

impl VerifyOutcome {
    pub fn is_clean(&self) -> bool {
        matches!(self, VerifyOutcome::Clean(_))
    }
}

/// Unifies one block: `q` is the mean absolute value, every output keeps the
/// input sign (`>= 0` maps to `+q`).
pub fn unify_block(values: &[f32]) -> Result<(f32, Vec<f32>)> {
    if values.is_empty() {
        return Err(Error::EmptyBlock);
    }
    let q = mean_abs(values) as f32;
    let unified = values.iter().map(|&v| if v >= 0.0 { q } else { -q }).collect();
    Ok((q, unified))
}

/// Squared Euclidean distance from `values` to its unified counterpart:
/// `sum((|v| - mean|v|)^2)`.
pub fn unify_distortion(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let q = mean_abs(values);
    values
        .iter()
        .map(|&v| {
            let d = v.abs() as f64 - q;
            d * d
        })
        .sum()
}

fn mean_abs(values: &[f32]) -> f64 {
    let sum: f64 = values.iter().map(|&v| v.abs() as f64).sum();
    sum / values.len() as f64
}

fn l1_norm(values: &[f32]) -> f64 {
    values.iter().map(|&v| v.abs() as f64).sum()
}

fn l2_norm_sq(values: &[f32]) -> f64 {
    crate::tensor::sum_squares(values)
}

/// Number of constrained blocks for a ratio: `ceil(ratio * M)`, with a small
/// epsilon so binary ratios like 0.1 do not over-select.
fn constrained_count(ratio: f64, num_blocks: usize) -> usize {
    let k = libm::ceil(ratio * num_blocks as f64 - 1e-9);
    (k.max(0.0) as usize).min(num_blocks)
}

fn score_block(values: &[f32], selection: Selection) -> f64 {
    match selection {
        Selection::Distortion => unify_distortion(values),
        Selection::L1Norm => l1_norm(values),
        Selection::L2Norm => l2_norm_sq(values),
    }
}

/// The `k` lowest-scoring block indices, ties broken by lower index, returned
/// in ascending order.
pub fn select_blocks(
    t: &DenseTensor,
    p: &BlockPartition,
    ratio: f64,
    selection: Selection,
) -> Result<Vec<usize>> {
    let m = p.num_blocks();
    let k = constrained_count(ratio, m);
    let mut scored: Vec<(f64, usize)> = (0..m)
        .map(|j| Ok((score_block(&block_values(t, p, j)?, selection), j)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = scored[..k].iter().map(|&(_, j)| j).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Unifies the `ceil(ratio * M)` blocks with the smallest score.
pub fn project_unify(
    t: &DenseTensor,
    p: &BlockPartition,
    ratio: f64,
    selection: Selection,
) -> Result<(DenseTensor, LayerReport)> {
    let chosen = select_blocks(t, p, ratio, selection)?;
    project_unify_selected(t, p, &chosen)
}

/// Unifies an explicit set of blocks (selection already made).
pub fn project_unify_selected(
    t: &DenseTensor,
    p: &BlockPartition,
    blocks: &[usize],
) -> Result<(DenseTensor, LayerReport)> {
    let mut out = t.clone();
    let mut constrained = Vec::with_capacity(blocks.len());
    let mut ragged = Vec::new();
    for &j in blocks {
        let values = block_values(t, p, j)?;
        let (q, unified) = unify_block(&values)?;
        let negative: Vec<bool> = values.iter().map(|&v| v < 0.0).collect();
        scatter_block_mut(&mut out, p, j, &unified)?;
        constrained.push(BlockConstraint::Unified { block: j, magnitude: q, negative });
        if p.is_ragged(j)? {
            ragged.push(j);
        }
    }
    Ok((out, report(p, Method::Unify, constrained, ragged)))
}

/// Zeroes the `ceil(ratio * M)` blocks with the smallest score (L1 by default).
pub fn project_prune(
    t: &DenseTensor,
    p: &BlockPartition,
    ratio: f64,
    selection: Selection,
) -> Result<(DenseTensor, LayerReport)> {
    let chosen = select_blocks(t, p, ratio, selection)?;
    project_prune_selected(t, p, &chosen)
}

/// Zeroes an explicit set of blocks.
pub fn project_prune_selected(
    t: &DenseTensor,
    p: &BlockPartition,
    blocks: &[usize],
) -> Result<(DenseTensor, LayerReport)> {
    let mut out = t.clone();
    let mut constrained = Vec::with_capacity(blocks.len());
    let mut ragged = Vec::new();
    for &j in blocks {
        let size = p.block_size(j)?;
        scatter_block_mut(&mut out, p, j, &alloc::vec![0.0; size])?;
        constrained.push(BlockConstraint::Pruned { block: j });
        if p.is_ragged(j)? {
            ragged.push(j);
        }
    }
    Ok((out, report(p, Method::Prune, constrained, ragged)))
}

/// Keeps the `nm_keep` largest-magnitude coefficients of every block, ties by
/// lower within-block index; the rest become zero. Blocks must be 1-dim along
/// the reduction axis.
pub fn project_nm(
    t: &DenseTensor,
    p: &BlockPartition,
    nm_keep: usize,
) -> Result<(DenseTensor, LayerReport)> {
    let bs = p.block_shape();
    let row_extent = match bs.dims() {
        &[_] => 1,
        &[_, d_out] => d_out,
        _ => 0,
    };
    if row_extent != 1 {
        return Err(Error::InvalidSpec(
            "nm_prune needs 1-dim blocks along the reduction axis".into(),
        ));
    }
    if nm_keep >= bs.volume() {
        return Err(Error::InvalidSpec(format!(
            "nm_keep {} must be smaller than the block size {}",
            nm_keep,
            bs.volume()
        )));
    }
    let mut out = t.clone();
    let mut constrained = Vec::with_capacity(p.num_blocks());
    let mut ragged = Vec::new();
    for j in 0..p.num_blocks() {
        let values = block_values(t, p, j)?;
        let kept_flags = nm_keep_flags(&values, nm_keep);
        let masked: Vec<f32> = values
            .iter()
            .zip(&kept_flags)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect();
        scatter_block_mut(&mut out, p, j, &masked)?;
        constrained.push(BlockConstraint::NmPruned { block: j, kept: kept_flags });
        if p.is_ragged(j)? {
            ragged.push(j);
        }
    }
    Ok((out, report(p, Method::NmPrune, constrained, ragged)))
}

/// Keep flags for the `keep` largest magnitudes (all kept if the block is a
/// short edge block).
fn nm_keep_flags(values: &[f32], keep: usize) -> Vec<bool> {
    if values.len() <= keep {
        return alloc::vec![true; values.len()];
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut flags = alloc::vec![false; values.len()];
    for &i in &order[..keep] {
        flags[i] = true;
    }
    flags
}

fn report(
    p: &BlockPartition,
    method: Method,
    constrained: Vec<BlockConstraint>,
    ragged_constrained: Vec<usize>,
) -> LayerReport {
    LayerReport {
        layer_shape: p.layer_shape().to_vec(),
        method,
        block_shape: Some(p.block_shape().clone()),
        num_blocks: p.num_blocks(),
        constrained,
        ragged_constrained,
    }
}

/// Projects one tensor under a rule, building the partition from the rule's
/// block shape.
pub fn project_with_rule(t: &DenseTensor, rule: &LayerRule) -> Result<(DenseTensor, LayerReport)> {
    rule.validate()?;
    match rule.method {
        Method::None => Ok((t.clone(), LayerReport::unconstrained(t.shape()))),
        Method::Unify => {
            let p = partition(t.shape(), rule.block_shape.as_ref().unwrap())?;
            project_unify(t, &p, rule.ratio, rule.selection)
        }
        Method::Prune => {
            let p = partition(t.shape(), rule.block_shape.as_ref().unwrap())?;
            project_prune(t, &p, rule.ratio, rule.selection)
        }
        Method::NmPrune => {
            let p = partition(t.shape(), rule.block_shape.as_ref().unwrap())?;
            project_nm(t, &p, rule.nm_keep)
        }
    }
}

/// Checks that `t` satisfies `rule` exactly: the selected blocks must be
/// bit-level feasible (equal magnitudes for unify, exact zeros for prune,
/// at most `nm_keep` nonzeros for N:M).
pub fn verify_constraint(t: &DenseTensor, rule: &LayerRule) -> Result<VerifyOutcome> {
    rule.validate()?;
    if rule.method == Method::None {
        return Ok(VerifyOutcome::Clean(LayerReport::unconstrained(t.shape())));
    }
    let p = partition(t.shape(), rule.block_shape.as_ref().unwrap())?;
    let blocks: Vec<usize> = match rule.method {
        Method::NmPrune => (0..p.num_blocks()).collect(),
        _ => select_blocks(t, &p, rule.ratio, rule.selection)?,
    };
    let mut violations = Vec::new();
    let mut constrained = Vec::with_capacity(blocks.len());
    let mut ragged = Vec::new();
    for &j in &blocks {
        let values = block_values(t, &p, j)?;
        match rule.method {
            Method::Unify => {
                let magnitude = values[0].abs();
                if let Some(pos) = values.iter().position(|v| v.abs().to_bits() != magnitude.to_bits()) {
                    violations.push(Violation {
                        block: j,
                        detail: format!(
                            "magnitude {} at offset {pos} differs from {magnitude}",
                            values[pos].abs()
                        ),
                    });
                } else {
                    constrained.push(BlockConstraint::Unified {
                        block: j,
                        magnitude,
                        negative: values.iter().map(|&v| v < 0.0).collect(),
                    });
                }
            }
            Method::Prune => {
                if let Some(pos) = values.iter().position(|&v| v != 0.0) {
                    violations.push(Violation {
                        block: j,
                        detail: format!("nonzero {} at offset {pos} in pruned block", values[pos]),
                    });
                } else {
                    constrained.push(BlockConstraint::Pruned { block: j });
                }
            }
            Method::NmPrune => {
                let nonzeros = values.iter().filter(|&&v| v != 0.0).count();
                let allowed = rule.nm_keep.min(values.len());
                if nonzeros > allowed {
                    violations.push(Violation {
                        block: j,
                        detail: format!("{nonzeros} nonzeros exceed nm_keep {allowed}"),
                    });
                } else {
                    constrained.push(BlockConstraint::NmPruned {
                        block: j,
                        kept: values.iter().map(|&v| v != 0.0).collect(),
                    });
                }
            }
            Method::None => unreachable!(),
        }
        if p.is_ragged(j)? {
            ragged.push(j);
        }
    }
    if violations.is_empty() {
        Ok(VerifyOutcome::Clean(report(&p, rule.method, constrained, ragged)))
    } else {
        Ok(VerifyOutcome::Violated(violations))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tensor(shape: &[usize], data: &[f32]) -> DenseTensor {
        DenseTensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn unify_block_mean_abs_and_signs() {
        let (q, unified) = unify_block(&[1.0, -2.0, 3.0, -4.0]).unwrap();
        assert_eq!(q, 2.5);
        assert_eq!(unified, vec![2.5, -2.5, 2.5, -2.5]);

        let (q, unified) = unify_block(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(q, 0.0);
        assert_eq!(unified, vec![0.0; 4]);

        let (_, unified) = unify_block(&[5.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(unified, vec![5.0; 4]);

        assert_eq!(unify_block(&[]), Err(Error::EmptyBlock));
    }

    #[test]
    fn distortion_matches_definition() {
        assert_eq!(unify_distortion(&[3.0, -3.0]), 0.0);
        assert_eq!(unify_distortion(&[1.0, 3.0]), 2.0);
    }

    #[test]
    fn distortion_equals_squared_distance_to_projection() {
        let mut state = 99u64;
        for _ in 0..200 {
            let block: Vec<f32> = (0..4)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                    ((state >> 33) as f32 / (1u64 << 31) as f32) * 4.0 - 2.0
                })
                .collect();
            let (_, unified) = unify_block(&block).unwrap();
            let dist: f64 = block
                .iter()
                .zip(&unified)
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum();
            let got = unify_distortion(&block);
            assert!((got - dist).abs() <= 1e-6 * dist.max(1e-12), "{got} vs {dist}");
        }
    }

    #[test]
    fn project_unify_full_and_zero_ratio() {
        let t = tensor(&[4, 4], &(0..16).map(|i| i as f32 - 7.5).collect::<Vec<_>>());
        let bs = BlockShape::new(&[2, 2]).unwrap();
        let p = partition(&[4, 4], &bs).unwrap();

        let (out, rep) = project_unify(&t, &p, 1.0, Selection::Distortion).unwrap();
        assert_eq!(rep.constrained.len(), 4);
        for j in 0..4 {
            let vals = block_values(&out, &p, j).unwrap();
            let m = vals[0].abs();
            assert!(vals.iter().all(|v| v.abs() == m));
        }

        let (out, rep) = project_unify(&t, &p, 0.0, Selection::Distortion).unwrap();
        assert_eq!(out, t);
        assert!(rep.constrained.is_empty());
    }

    #[test]
    fn unify_selects_lowest_distortion_blocks() {
        // Four [2,1] blocks with distortions 0.0, 2.0, 0.02, 0.5 -> ratio 0.5
        // unifies blocks 0 and 2.
        let t = tensor(&[1, 8], &[1.0, 1.0, 1.0, 3.0, 1.0, 1.2, 1.0, 2.0]);
        let bs = BlockShape::new(&[2, 1]).unwrap();
        let p = partition(&[1, 8], &bs).unwrap();
        let (_, rep) = project_unify(&t, &p, 0.5, Selection::Distortion).unwrap();
        assert_eq!(rep.constrained_indices(), vec![0, 2]);
    }

    #[test]
    fn prune_selects_smallest_l1_blocks() {
        // L1 norms 10, 1, 8, 2 -> ratio 0.5 prunes blocks 1 and 3.
        let t = tensor(&[1, 8], &[5.0, 5.0, 0.5, 0.5, 4.0, 4.0, 1.0, 1.0]);
        let bs = BlockShape::new(&[2, 1]).unwrap();
        let p = partition(&[1, 8], &bs).unwrap();
        let (out, rep) = project_prune(&t, &p, 0.5, Selection::L1Norm).unwrap();
        assert_eq!(rep.constrained_indices(), vec![1, 3]);
        assert_eq!(out.data(), &[5.0, 5.0, 0.0, 0.0, 4.0, 4.0, 0.0, 0.0]);

        let (out, _) = project_prune(&t, &p, 1.0, Selection::L1Norm).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prune_tie_break_takes_lower_index() {
        let t = tensor(&[1, 8], &[2.0, 2.0, 1.0, 1.0, 1.0, 1.0, 3.0, 3.0]);
        let bs = BlockShape::new(&[2, 1]).unwrap();
        let p = partition(&[1, 8], &bs).unwrap();
        let (_, rep) = project_prune(&t, &p, 0.25, Selection::L1Norm).unwrap();
        assert_eq!(rep.constrained_indices(), vec![1]);
    }

    #[test]
    fn nm_keeps_largest_magnitudes() {
        let t = tensor(&[1, 4], &[1.0, -5.0, 2.0, -3.0]);
        let bs = BlockShape::new(&[4, 1]).unwrap();
        let p = partition(&[1, 4], &bs).unwrap();
        let (out, _) = project_nm(&t, &p, 2).unwrap();
        assert_eq!(out.data(), &[0.0, -5.0, 0.0, -3.0]);

        let t = tensor(&[1, 4], &[4.0, 4.0, 4.0, 4.0]);
        let (out, _) = project_nm(&t, &p, 2).unwrap();
        assert_eq!(out.data(), &[4.0, 4.0, 0.0, 0.0]);

        assert!(project_nm(&t, &p, 4).is_err());
        let bs2 = BlockShape::new(&[2, 2]).unwrap();
        let p2 = partition(&[2, 2], &bs2).unwrap();
        assert!(project_nm(&t.reshape(&[2, 2]).unwrap(), &p2, 1).is_err());
    }

    #[test]
    fn nm_layer_is_half_zero() {
        let data: Vec<f32> = (0..32).map(|i| (i as f32 * 0.7).sin()).collect();
        let t = tensor(&[4, 8], &data);
        let bs = BlockShape::new(&[4, 1]).unwrap();
        let p = partition(&[4, 8], &bs).unwrap();
        let (out, _) = project_nm(&t, &p, 2).unwrap();
        let zeros = out.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 16);
    }

    #[test]
    fn verify_clean_and_perturbed() {
        let data: Vec<f32> = (0..16).map(|i| (i as f32 * 1.3).cos() * 2.0).collect();
        let t = tensor(&[4, 4], &data);
        let rule = LayerRule::unify(BlockShape::new(&[2, 2]).unwrap(), 1.0);
        let (projected, _) = project_with_rule(&t, &rule).unwrap();
        assert!(verify_constraint(&projected, &rule).unwrap().is_clean());

        let mut broken = projected.clone();
        broken.data_mut()[3] += 1e-3;
        match verify_constraint(&broken, &rule).unwrap() {
            VerifyOutcome::Violated(v) => {
                // Coefficient 3 lives in block 1 of the 2x2 tiling of a 4x4.
                assert!(v.iter().any(|violation| violation.block == 1));
            }
            VerifyOutcome::Clean(_) => panic!("perturbed tensor verified clean"),
        }

        // A dense random tensor at ratio 1.0 violates everywhere.
        match verify_constraint(&t, &rule).unwrap() {
            VerifyOutcome::Violated(v) => assert_eq!(v.len(), 4),
            VerifyOutcome::Clean(_) => panic!("random tensor verified clean"),
        }
    }

    #[test]
    fn projections_are_idempotent() {
        let data: Vec<f32> = (0..30).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
        let t = tensor(&[5, 6], &data);
        let bs = BlockShape::new(&[2, 2]).unwrap();
        let p = partition(&[5, 6], &bs).unwrap();
        for ratio in [0.3, 0.7, 1.0] {
            let (once, _) = project_unify(&t, &p, ratio, Selection::Distortion).unwrap();
            let (twice, _) = project_unify(&once, &p, ratio, Selection::Distortion).unwrap();
            assert_eq!(once, twice);

            let (once, _) = project_prune(&t, &p, ratio, Selection::L1Norm).unwrap();
            let (twice, _) = project_prune(&once, &p, ratio, Selection::L1Norm).unwrap();
            assert_eq!(once, twice);
        }
        let bs = BlockShape::new(&[3, 1]).unwrap();
        let p = partition(&[5, 6], &bs).unwrap();
        let (once, _) = project_nm(&t, &p, 1).unwrap();
        let (twice, _) = project_nm(&once, &p, 1).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn unified_signs_follow_inputs() {
        let data: Vec<f32> = (0..16).map(|i| (i as f32 * 2.1).sin()).collect();
        let t = tensor(&[4, 4], &data);
        let rule = LayerRule::unify(BlockShape::new(&[2, 2]).unwrap(), 1.0);
        let (projected, _) = project_with_rule(&t, &rule).unwrap();
        for (&before, &after) in t.data().iter().zip(projected.data()) {
            if before != 0.0 && after != 0.0 {
                assert_eq!(before.is_sign_negative(), after.is_sign_negative());
            }
        }
    }
}
