//! Micro-structured GEMM execution and cost model.
//!
//! A compiled weight matrix tags every block as raw, unified or pruned. During
//! GEMM, a unified block shares one multiply per output row per input column:
//! the signed input values are summed first and multiplied by the block
//! magnitude once, turning `size` multiplies into `size / reduction_extent`.
//! Pruned blocks are skipped outright. Multiplies are counted one by one as
//! they execute, and [`count_multiplies`] predicts the same totals in closed
//! form.
//!
//! The executor is a reference implementation tuned for auditability, not
//! throughput; accumulation order is fixed (block-index order within each
//! output column) so results are deterministic.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::blocking::BlockPartition;
use crate::error::{Error, Result};
use crate::projection::{BlockConstraint, ConstraintSpec, LayerReport, Method};
use crate::tensor::DenseTensor;

/// Exact operation counts for one GEMM call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub multiplies: u64,
    pub adds: u64,
}

impl OpCount {
    pub fn merge(&mut self, other: OpCount) {
        self.multiplies += other.multiplies;
        self.adds += other.adds;
    }
}

#[derive(Debug, Clone, PartialEq)]
enum BlockTag {
    Raw,
    Unified { magnitude: f32, negative: Vec<bool> },
    Pruned,
}

/// One shared-multiplier group of a unified block: the input columns feeding
/// one output row through one multiply.
#[derive(Debug, Clone, PartialEq)]
struct Group {
    row: usize,
    /// (reduction column, negative sign) per coefficient.
    terms: Vec<(usize, bool)>,
}

/// A weight matrix compiled for micro-structured execution.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedMatrix {
    partition: BlockPartition,
    tags: Vec<BlockTag>,
    /// Shared-multiplier groups per block; `None` for blocks executed raw
    /// (unconstrained, N:M, or ragged unified blocks whose shape breaks the
    /// sharing pattern).
    groups: Vec<Option<Vec<Group>>>,
    /// Dense backing store, bit-identical to the compiled weights.
    dense: DenseTensor,
}

impl UnifiedMatrix {
    pub fn rows(&self) -> usize {
        self.partition.view().rows()
    }

    pub fn cols(&self) -> usize {
        self.partition.view().cols()
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    /// Dense reconstruction: signs times magnitude for unified blocks, zeros
    /// for pruned blocks, stored coefficients otherwise. Bit-exact.
    pub fn expand(&self) -> DenseTensor {
        let mut out = DenseTensor::zeros(self.dense.shape());
        for (j, tag) in self.tags.iter().enumerate() {
            let coords = self.partition.block_coords(j).unwrap();
            match tag {
                BlockTag::Pruned => {}
                BlockTag::Unified { magnitude, negative } => {
                    for (&c, &neg) in coords.iter().zip(negative) {
                        out.data_mut()[c] = if neg { -*magnitude } else { *magnitude };
                    }
                }
                BlockTag::Raw => {
                    for &c in coords {
                        out.data_mut()[c] = self.dense.data()[c];
                    }
                }
            }
        }
        out
    }
}

/// Compiles weights for micro-structured execution, checking the report
/// against the weights bit-exactly.
pub fn compile(
    weights: &DenseTensor,
    partition: BlockPartition,
    report: &LayerReport,
) -> Result<UnifiedMatrix> {
    if weights.shape() != partition.layer_shape() {
        return Err(Error::ShapeMismatch {
            expected: partition.layer_shape().to_vec(),
            actual: weights.shape().to_vec(),
        });
    }
    let m = partition.num_blocks();
    let mut tags = vec![BlockTag::Raw; m];
    let mut groups: Vec<Option<Vec<Group>>> = vec![None; m];
    let run = partition.block_shape().multiplier_reduction();
    let view_cols = partition.view().cols();

    for constraint in &report.constrained {
        let j = constraint.block();
        let coords = partition.block_coords(j)?;
        match constraint {
            BlockConstraint::Unified { magnitude, negative, .. } => {
                if negative.len() != coords.len() {
                    return Err(Error::ReportMismatch(format!(
                        "block {j}: {} sign bits for {} coefficients",
                        negative.len(),
                        coords.len()
                    )));
                }
                for (&c, &neg) in coords.iter().zip(negative) {
                    let expected = if neg { -*magnitude } else { *magnitude };
                    if weights.data()[c].to_bits() != expected.to_bits() {
                        return Err(Error::ReportMismatch(format!(
                            "block {j}: weight {} differs from unified value {expected}",
                            weights.data()[c]
                        )));
                    }
                }
                if !partition.is_ragged(j)? {
                    let shared: Vec<Group> = coords
                        .chunks(run)
                        .zip(negative.chunks(run))
                        .map(|(chunk, signs)| Group {
                            row: chunk[0] / view_cols,
                            terms: chunk
                                .iter()
                                .zip(signs)
                                .map(|(&c, &neg)| (c % view_cols, neg))
                                .collect(),
                        })
                        .collect();
                    groups[j] = Some(shared);
                }
                tags[j] = BlockTag::Unified { magnitude: *magnitude, negative: negative.clone() };
            }
            BlockConstraint::Pruned { .. } => {
                for &c in coords {
                    if weights.data()[c] != 0.0 {
                        return Err(Error::ReportMismatch(format!(
                            "block {j}: nonzero weight {} in pruned block",
                            weights.data()[c]
                        )));
                    }
                }
                tags[j] = BlockTag::Pruned;
            }
            BlockConstraint::NmPruned { kept, .. } => {
                if kept.len() != coords.len() {
                    return Err(Error::ReportMismatch(format!(
                        "block {j}: {} keep flags for {} coefficients",
                        kept.len(),
                        coords.len()
                    )));
                }
                for (&c, &keep) in coords.iter().zip(kept) {
                    if !keep && weights.data()[c] != 0.0 {
                        return Err(Error::ReportMismatch(format!(
                            "block {j}: dropped coefficient holds {}",
                            weights.data()[c]
                        )));
                    }
                }
                // N:M blocks keep arbitrary surviving values; executed raw.
            }
        }
    }
    Ok(UnifiedMatrix { partition, tags, groups, dense: weights.clone() })
}

/// Plain `C = A * B` with 64-bit accumulation; multiplies are `m * k * n`.
pub fn gemm_naive(a: &DenseTensor, b: &DenseTensor) -> Result<(DenseTensor, OpCount)> {
    let (&[m, k], &[k2, n]) = (shape2(a)?, shape2(b)?);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            expected: vec![k, n],
            actual: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for kk in 0..k {
                acc += a.data()[i * k + kk] as f64 * b.data()[kk * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    let count = OpCount {
        multiplies: (m * k * n) as u64,
        adds: (m * k * n) as u64,
    };
    Ok((DenseTensor::new(&[m, n], out)?, count))
}

/// Micro-structured `C = W * X`: unified blocks share multiplies, pruned
/// blocks are skipped, raw blocks run normally. Multiplies and adds are
/// counted as they happen.
pub fn gemm_micro(w: &UnifiedMatrix, x: &DenseTensor) -> Result<(DenseTensor, OpCount)> {
    let &[k, n] = shape2(x)?;
    if k != w.cols() {
        return Err(Error::ShapeMismatch {
            expected: vec![w.cols(), n],
            actual: x.shape().to_vec(),
        });
    }
    let rows = w.rows();
    let mut out = vec![0.0f32; rows * n];
    let mut count = OpCount::default();
    let xd = x.data();
    let dense = w.dense.data();
    let view_cols = w.cols();
    let mut acc = vec![0.0f64; rows];

    for jx in 0..n {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (j, tag) in w.tags.iter().enumerate() {
            match tag {
                BlockTag::Pruned => {}
                BlockTag::Unified { magnitude, .. } if w.groups[j].is_some() => {
                    for group in w.groups[j].as_ref().unwrap() {
                        let mut s = 0.0f64;
                        for &(col, neg) in &group.terms {
                            let v = xd[col * n + jx] as f64;
                            s += if neg { -v } else { v };
                            count.adds += 1;
                        }
                        acc[group.row] += *magnitude as f64 * s;
                        count.multiplies += 1;
                        count.adds += 1;
                    }
                }
                // Raw blocks, N:M blocks and ragged unified blocks run dense.
                _ => {
                    for &c in w.partition.block_coords(j)? {
                        let (row, col) = (c / view_cols, c % view_cols);
                        acc[row] += dense[c] as f64 * xd[col * n + jx] as f64;
                        count.multiplies += 1;
                        count.adds += 1;
                    }
                }
            }
        }
        for r in 0..rows {
            out[r * n + jx] = acc[r] as f32;
        }
    }
    Ok((DenseTensor::new(&[rows, n], out)?, count))
}

/// Closed-form prediction of [`gemm_micro`]'s operation counts for a weight
/// matrix described by `report`, multiplied against `n_cols` input columns.
pub fn count_multiplies(
    partition: &BlockPartition,
    report: &LayerReport,
    n_cols: usize,
) -> Result<OpCount> {
    let run = partition.block_shape().multiplier_reduction();
    let mut per_col = OpCount::default();
    let mut constrained = vec![None; partition.num_blocks()];
    for c in &report.constrained {
        constrained[c.block()] = Some(c);
    }
    for j in 0..partition.num_blocks() {
        let size = partition.block_size(j)? as u64;
        match constrained[j] {
            Some(BlockConstraint::Pruned { .. }) => {}
            Some(BlockConstraint::Unified { .. }) if !partition.is_ragged(j)? => {
                let groups = size / run as u64;
                per_col.multiplies += groups;
                per_col.adds += size + groups;
            }
            // Ragged unified, N:M and unconstrained blocks execute raw.
            _ => {
                per_col.multiplies += size;
                per_col.adds += size;
            }
        }
    }
    Ok(OpCount {
        multiplies: per_col.multiplies * n_cols as u64,
        adds: per_col.adds * n_cols as u64,
    })
}

/// Per-layer GEMM geometry used for MACs estimation: dense MACs per sample are
/// `out_channels * reduction * output_positions`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerMacs {
    pub layer: usize,
    pub out_channels: usize,
    pub reduction: usize,
    pub output_positions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacsLayer {
    pub layer: usize,
    pub dense: f64,
    pub constrained: f64,
}

/// Analytic MACs under a constraint spec (per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct MacsReport {
    pub layers: Vec<MacsLayer>,
    pub dense_total: f64,
    pub constrained_total: f64,
}

/// Estimates MACs per layer and in total: dense MACs scale by the layer's
/// multiplier-reduction factor weighted by the constrained ratio.
pub fn macs_estimate(layers: &[LayerMacs], spec: &ConstraintSpec) -> MacsReport {
    let mut out = Vec::with_capacity(layers.len());
    let (mut dense_total, mut constrained_total) = (0.0, 0.0);
    for lm in layers {
        let dense = lm.out_channels as f64 * lm.reduction as f64 * lm.output_positions as f64;
        let rule = spec.rule(lm.layer);
        let constrained = match rule.method {
            Method::None => dense,
            Method::Unify => {
                let f = rule.block_shape.as_ref().map(|b| b.multiplier_reduction()).unwrap_or(1);
                dense * ((1.0 - rule.ratio) + rule.ratio / f as f64)
            }
            Method::Prune => dense * (1.0 - rule.ratio),
            Method::NmPrune => {
                let volume = rule.block_shape.as_ref().map(|b| b.volume()).unwrap_or(1);
                dense * (rule.nm_keep as f64 / volume as f64)
            }
        };
        dense_total += dense;
        constrained_total += constrained;
        out.push(MacsLayer { layer: lm.layer, dense, constrained });
    }
    MacsReport { layers: out, dense_total, constrained_total }
}

fn shape2(t: &DenseTensor) -> Result<&[usize; 2]> {
    t.shape().try_into().map_err(|_| Error::UnsupportedRank(t.rank()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocking::{partition, BlockShape};
    use crate::projection::{project_prune, project_unify, LayerReport, Selection};

    fn seq_tensor(shape: &[usize], scale: f32) -> DenseTensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i as f32 * 0.61).sin() * scale)).collect();
        DenseTensor::new(shape, data).unwrap()
    }

    fn dense_report(shape: &[usize], bs: &[usize]) -> (BlockPartition, LayerReport) {
        let bs = BlockShape::new(bs).unwrap();
        let p = partition(shape, &bs).unwrap();
        let rep = LayerReport {
            layer_shape: shape.to_vec(),
            method: Method::Unify,
            block_shape: Some(bs),
            num_blocks: p.num_blocks(),
            constrained: vec![],
            ragged_constrained: vec![],
        };
        (p, rep)
    }

    #[test]
    fn naive_counts_and_identity() {
        let a = DenseTensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = seq_tensor(&[2, 3], 1.0);
        let (c, ops) = gemm_naive(&a, &b).unwrap();
        assert_eq!(c, b);
        assert_eq!(ops.multiplies, 12);

        let a = seq_tensor(&[4, 4], 1.0);
        let b = seq_tensor(&[4, 4], 1.0);
        let (_, ops) = gemm_naive(&a, &b).unwrap();
        assert_eq!(ops.multiplies, 64);
    }

    #[test]
    fn compile_round_trips_dense_and_pruned() {
        let w = seq_tensor(&[4, 4], 2.0);
        let (p, rep) = dense_report(&[4, 4], &[2, 2]);
        let um = compile(&w, p.clone(), &rep).unwrap();
        assert_eq!(um.expand(), w);

        let (pruned, prep) = project_prune(&w, &p, 1.0, Selection::L1Norm).unwrap();
        let um = compile(&pruned, p, &prep).unwrap();
        assert!(um.expand().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compile_rejects_mismatched_report() {
        let w = seq_tensor(&[4, 4], 2.0);
        let bs = BlockShape::new(&[2, 2]).unwrap();
        let p = partition(&[4, 4], &bs).unwrap();
        let (unified, rep) = project_unify(&w, &p, 1.0, Selection::Distortion).unwrap();
        // Report describes the unified tensor, not the raw weights.
        assert!(compile(&w, p.clone(), &rep).is_err());
        assert!(compile(&unified, p, &rep).is_ok());
    }

    #[test]
    fn fig2_kernel_shares_multiplies() {
        // One unified 2x2 block, q = 1, signs [[+,-],[+,+]], column [3,5].
        let w = DenseTensor::new(&[2, 2], vec![1.0, -1.0, 1.0, 1.0]).unwrap();
        let bs = BlockShape::new(&[2, 2]).unwrap();
        let p = partition(&[2, 2], &bs).unwrap();
        let (unified, rep) = project_unify(&w, &p, 1.0, Selection::Distortion).unwrap();
        assert_eq!(unified, w);
        let um = compile(&unified, p.clone(), &rep).unwrap();
        let x = DenseTensor::new(&[2, 1], vec![3.0, 5.0]).unwrap();
        let (c, ops) = gemm_micro(&um, &x).unwrap();
        assert_eq!(c.data(), &[-2.0, 8.0]);
        assert_eq!(ops.multiplies, 2);
        let (_, naive) = gemm_naive(&unified, &x).unwrap();
        assert_eq!(naive.multiplies, 4);
        assert_eq!(count_multiplies(&p, &rep, 1).unwrap().multiplies, 2);
    }

    #[test]
    fn unified_8x1_blocks_give_8x_reduction() {
        let w = seq_tensor(&[8, 8], 1.5);
        let bs = BlockShape::new(&[8, 1]).unwrap();
        let p = partition(&[8, 8], &bs).unwrap();
        let (unified, rep) = project_unify(&w, &p, 1.0, Selection::Distortion).unwrap();
        let um = compile(&unified, p.clone(), &rep).unwrap();
        let x = seq_tensor(&[8, 8], 1.0);
        let (c, ops) = gemm_micro(&um, &x).unwrap();
        assert_eq!(ops.multiplies, 64);
        let (expected, naive) = gemm_naive(&unified, &x).unwrap();
        assert_eq!(naive.multiplies, 512);
        assert_eq!(count_multiplies(&p, &rep, 8).unwrap(), ops);
        for (a, b) in c.data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn pruned_matrix_is_free() {
        let w = seq_tensor(&[4, 4], 1.0);
        let bs = BlockShape::new(&[2, 2]).unwrap();
        let p = partition(&[4, 4], &bs).unwrap();
        let (pruned, rep) = project_prune(&w, &p, 1.0, Selection::L1Norm).unwrap();
        let um = compile(&pruned, p.clone(), &rep).unwrap();
        let x = seq_tensor(&[4, 2], 1.0);
        let (c, ops) = gemm_micro(&um, &x).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert_eq!(ops.multiplies, 0);
        assert_eq!(count_multiplies(&p, &rep, 2).unwrap().multiplies, 0);
    }

    #[test]
    fn three_dim_blocks_share_over_kernel_extent() {
        // [2,2,2] blocks: multiplier reduction x2, storage x8.
        let w = seq_tensor(&[4, 4, 2, 2], 1.0);
        let bs = BlockShape::new(&[2, 2, 2]).unwrap();
        let p = partition(&[4, 4, 2, 2], &bs).unwrap();
        let (unified, rep) = project_unify(&w, &p, 1.0, Selection::Distortion).unwrap();
        let um = compile(&unified, p.clone(), &rep).unwrap();
        let x = seq_tensor(&[16, 4], 1.0);
        let (c, ops) = gemm_micro(&um, &x).unwrap();
        let flat = unified.reshape(&[4, 16]).unwrap();
        let (expected, naive) = gemm_naive(&flat, &x).unwrap();
        assert_eq!(naive.multiplies, 2 * ops.multiplies);
        assert_eq!(count_multiplies(&p, &rep, 4).unwrap(), ops);
        for (a, b) in c.data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn macs_formula() {
        let layers = [
            LayerMacs { layer: 0, out_channels: 32, reduction: 3 * 49, output_positions: 26 * 26 },
            LayerMacs { layer: 1, out_channels: 10, reduction: 64, output_positions: 1 },
        ];
        let spec = ConstraintSpec::new();
        let rep = macs_estimate(&layers, &spec);
        assert_eq!(rep.layers[0].dense, 3_179_904.0);
        assert_eq!(rep.layers[1].dense, 640.0);
        assert_eq!(rep.dense_total, rep.constrained_total);

        let mut spec = ConstraintSpec::new();
        spec.set(
            0,
            crate::projection::LayerRule::unify(BlockShape::new(&[8, 1]).unwrap(), 1.0),
        )
        .unwrap();
        let rep = macs_estimate(&layers, &spec);
        assert_eq!(rep.layers[0].constrained, 3_179_904.0 / 8.0);
        assert_eq!(rep.layers[1].constrained, 640.0);
    }

    #[test]
    fn raising_ratio_never_raises_multiplies() {
        let w = seq_tensor(&[8, 8], 1.0);
        let bs = BlockShape::new(&[2, 2]).unwrap();
        let p = partition(&[8, 8], &bs).unwrap();
        let x = seq_tensor(&[8, 3], 1.0);
        let mut last = u64::MAX;
        for i in 0..=4 {
            let ratio = i as f64 / 4.0;
            let (t, rep) = project_prune(&w, &p, ratio, Selection::L1Norm).unwrap();
            let um = compile(&t, p.clone(), &rep).unwrap();
            let (_, ops) = gemm_micro(&um, &x).unwrap();
            assert!(ops.multiplies <= last);
            last = ops.multiplies;
        }
    }
}
