//! Partitioning weight tensors into micro-structured blocks.
//!
//! Axis conventions:
//! - 1-dim shapes `[d]` and 2-dim shapes `[d_red, d_out]` tile the GEMM view of
//!   the layer; the first extent runs along the reduction axis. Table-style
//!   shapes `[4,1]` / `[8,1]` therefore sit along the reduction axis, which is
//!   what gives them their x4 / x8 multiplier reduction.
//! - 3-dim shapes `[d_oc, d_ic, d_k]` tile conv tensors over
//!   (out-channel, in-channel, flattened kernel).
//!
//! Extents that do not divide the layer leave smaller *ragged* blocks at the
//! edges; those are kept as ordinary blocks (no zero padding), so coefficient
//! counts stay exact.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{as_gemm_view, DenseTensor, GemmView};

/// Block shape `P`: 1 to 3 positive extents, at least one greater than one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockShape {
    dims: Vec<usize>,
}

impl BlockShape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(Error::InvalidBlockShape(format!(
                "expected 1-3 extents, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidBlockShape("zero extent".into()));
        }
        if dims.iter().all(|&d| d == 1) {
            return Err(Error::InvalidBlockShape("all extents are 1".into()));
        }
        Ok(Self { dims: dims.to_vec() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Coefficients per full block.
    pub fn volume(&self) -> usize {
        self.dims.iter().product()
    }

    /// Multiplier-reduction factor of a fully unified block under the shared
    /// multiplier execution: the extent shared per multiply. For 1-/2-dim
    /// blocks that is the reduction extent; for 3-dim blocks sharing runs over
    /// the kernel extent only (the in-channel extent aids storage, not
    /// multiplies).
    pub fn multiplier_reduction(&self) -> usize {
        match self.dims[..] {
            [d] => d,
            [d_red, _] => d_red,
            [_, _, d_k] => d_k,
            _ => unreachable!(),
        }
    }

    /// Storage-reduction factor of a fully unified block (all coefficients
    /// share one magnitude).
    pub fn storage_reduction(&self) -> usize {
        self.volume()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    /// Flat indices into the layer tensor, in row-major coordinate order.
    coords: Vec<usize>,
    ragged: bool,
}

/// An exhaustive, disjoint tiling of one layer's coefficients into blocks,
/// ordered row-major over the block grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    layer_shape: Vec<usize>,
    block_shape: BlockShape,
    view: GemmView,
    blocks: Vec<Block>,
}

impl BlockPartition {
    pub fn layer_shape(&self) -> &[usize] {
        &self.layer_shape
    }

    pub fn block_shape(&self) -> &BlockShape {
        &self.block_shape
    }

    pub fn view(&self) -> &GemmView {
        &self.view
    }

    /// Number of blocks `M`.
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_coefficients(&self) -> usize {
        self.layer_shape.iter().product()
    }

    /// Flat tensor indices of block `j`, in the deterministic within-block order.
    pub fn block_coords(&self, j: usize) -> Result<&[usize]> {
        self.blocks
            .get(j)
            .map(|b| b.coords.as_slice())
            .ok_or(Error::BlockIndexOutOfRange { index: j, num_blocks: self.blocks.len() })
    }

    pub fn block_size(&self, j: usize) -> Result<usize> {
        Ok(self.block_coords(j)?.len())
    }

    /// Whether block `j` is an edge block smaller than the nominal shape.
    pub fn is_ragged(&self, j: usize) -> Result<bool> {
        self.blocks
            .get(j)
            .map(|b| b.ragged)
            .ok_or(Error::BlockIndexOutOfRange { index: j, num_blocks: self.blocks.len() })
    }

    pub fn any_ragged(&self) -> bool {
        self.blocks.iter().any(|b| b.ragged)
    }
}

/// Tiles a layer of the given shape into blocks.
pub fn partition(layer_shape: &[usize], block_shape: &BlockShape) -> Result<BlockPartition> {
    let tensor = DenseTensor::zeros(layer_shape);
    let view = as_gemm_view(&tensor)?;
    let blocks = match block_shape.dims() {
        &[d] => tile_view(&view, d, 1),
        &[d_red, d_out] => tile_view(&view, d_red, d_out),
        &[d_oc, d_ic, d_k] => {
            let &[cout, cin, kh, kw] = &layer_shape[..] else {
                return Err(Error::IncompatibleBlocking(format!(
                    "3-dim blocks need a rank-4 conv layer, got rank {}",
                    layer_shape.len()
                )));
            };
            tile_conv(cout, cin, kh * kw, d_oc, d_ic, d_k)
        }
        _ => unreachable!(),
    };
    Ok(BlockPartition {
        layer_shape: layer_shape.to_vec(),
        block_shape: block_shape.clone(),
        view,
        blocks,
    })
}

/// 1-/2-dim tiling of the GEMM view: `d_out` rows by `d_red` columns per block,
/// block grid walked row-major (row groups outer).
fn tile_view(view: &GemmView, d_red: usize, d_out: usize) -> Vec<Block> {
    let rows = view.rows();
    let cols = view.cols();
    let nominal = d_red * d_out;
    let mut blocks = Vec::with_capacity(rows.div_ceil(d_out) * cols.div_ceil(d_red));
    for r0 in (0..rows).step_by(d_out) {
        for c0 in (0..cols).step_by(d_red) {
            let r1 = (r0 + d_out).min(rows);
            let c1 = (c0 + d_red).min(cols);
            let mut coords = Vec::with_capacity((r1 - r0) * (c1 - c0));
            for r in r0..r1 {
                for c in c0..c1 {
                    coords.push(view.flat(r, c));
                }
            }
            let ragged = coords.len() != nominal;
            blocks.push(Block { coords, ragged });
        }
    }
    blocks
}

/// 3-dim tiling over (out-channel, in-channel, flattened kernel).
fn tile_conv(cout: usize, cin: usize, k: usize, d_oc: usize, d_ic: usize, d_k: usize) -> Vec<Block> {
    let nominal = d_oc * d_ic * d_k;
    let mut blocks = Vec::new();
    for oc0 in (0..cout).step_by(d_oc) {
        for ic0 in (0..cin).step_by(d_ic) {
            for k0 in (0..k).step_by(d_k) {
                let oc1 = (oc0 + d_oc).min(cout);
                let ic1 = (ic0 + d_ic).min(cin);
                let k1 = (k0 + d_k).min(k);
                let mut coords = Vec::with_capacity((oc1 - oc0) * (ic1 - ic0) * (k1 - k0));
                for oc in oc0..oc1 {
                    for ic in ic0..ic1 {
                        for kk in k0..k1 {
                            coords.push((oc * cin + ic) * k + kk);
                        }
                    }
                }
                let ragged = coords.len() != nominal;
                blocks.push(Block { coords, ragged });
            }
        }
    }
    blocks
}

/// Values of block `j` of `t`, in the partition's coordinate order.
pub fn block_values(t: &DenseTensor, p: &BlockPartition, j: usize) -> Result<Vec<f32>> {
    check_layer(t, p)?;
    let coords = p.block_coords(j)?;
    Ok(coords.iter().map(|&i| t.data()[i]).collect())
}

/// Returns a copy of `t` with block `j` replaced by `values`.
pub fn scatter_block(
    t: &DenseTensor,
    p: &BlockPartition,
    j: usize,
    values: &[f32],
) -> Result<DenseTensor> {
    let mut out = t.clone();
    scatter_block_mut(&mut out, p, j, values)?;
    Ok(out)
}

pub(crate) fn scatter_block_mut(
    t: &mut DenseTensor,
    p: &BlockPartition,
    j: usize,
    values: &[f32],
) -> Result<()> {
    check_layer(t, p)?;
    let coords = p.block_coords(j)?;
    if coords.len() != values.len() {
        return Err(Error::LengthMismatch { expected: coords.len(), actual: values.len() });
    }
    for (&i, &v) in coords.iter().zip(values) {
        t.data_mut()[i] = v;
    }
    Ok(())
}

fn check_layer(t: &DenseTensor, p: &BlockPartition) -> Result<()> {
    if t.shape() != p.layer_shape() {
        return Err(Error::ShapeMismatch {
            expected: p.layer_shape().to_vec(),
            actual: t.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rejects_bad_shapes() {
        assert!(BlockShape::new(&[]).is_err());
        assert!(BlockShape::new(&[2, 2, 2, 2]).is_err());
        assert!(BlockShape::new(&[0, 2]).is_err());
        assert!(BlockShape::new(&[1, 1]).is_err());
        assert!(BlockShape::new(&[1, 4]).is_ok());
    }

    #[test]
    fn fc_4x6_with_2x2_blocks_has_6_blocks() {
        let bs = BlockShape::new(&[2, 2]).unwrap();
        let p = partition(&[4, 6], &bs).unwrap();
        assert_eq!(p.num_blocks(), 6);
        assert!(!p.any_ragged());
        // Block 0 covers rows 0-1, cols 0-1 in row-major order.
        assert_eq!(p.block_coords(0).unwrap(), &[0, 1, 6, 7]);
    }

    #[test]
    fn reduction_major_blocks() {
        // [8,1]: 8 along the reduction axis, one output row per block.
        let bs = BlockShape::new(&[8, 1]).unwrap();
        let p = partition(&[8, 8], &bs).unwrap();
        assert_eq!(p.num_blocks(), 8);
        assert_eq!(p.block_coords(1).unwrap(), &[8, 9, 10, 11, 12, 13, 14, 15]);
    }

    #[test]
    fn ragged_5x5_with_2x2_blocks() {
        let bs = BlockShape::new(&[2, 2]).unwrap();
        let p = partition(&[5, 5], &bs).unwrap();
        assert_eq!(p.num_blocks(), 9);
        let sizes: Vec<usize> = (0..9).map(|j| p.block_size(j).unwrap()).collect();
        assert_eq!(sizes, vec![4, 4, 2, 4, 4, 2, 2, 2, 1]);
        let ragged: Vec<bool> = (0..9).map(|j| p.is_ragged(j).unwrap()).collect();
        assert_eq!(ragged, vec![false, false, true, false, false, true, true, true, true]);
    }

    #[test]
    fn conv_3dim_blocks() {
        let bs = BlockShape::new(&[2, 2, 2]).unwrap();
        let p = partition(&[4, 4, 2, 2], &bs).unwrap();
        // 4/2 out-channel groups x 4/2 in-channel groups x 4/2 kernel groups.
        assert_eq!(p.num_blocks(), 8);
        assert!(!p.any_ragged());
        assert_eq!(p.block_size(0).unwrap(), 8);
        // Block 0: oc 0-1, ic 0-1, kernel 0-1; flat = (oc*4 + ic)*4 + k.
        assert_eq!(p.block_coords(0).unwrap(), &[0, 1, 4, 5, 16, 17, 20, 21]);
    }

    #[test]
    fn rejects_3dim_blocks_on_matrices() {
        let bs = BlockShape::new(&[2, 2, 2]).unwrap();
        assert!(partition(&[8, 8], &bs).is_err());
    }

    #[test]
    fn block_values_and_scatter_round_trip() {
        let t = DenseTensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bs = BlockShape::new(&[2, 2]).unwrap();
        let p = partition(&[2, 2], &bs).unwrap();
        assert_eq!(block_values(&t, &p, 0).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);

        let t2 = scatter_block(&t, &p, 0, &[5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(block_values(&t2, &p, 0).unwrap(), vec![5.0, 6.0, 7.0, 8.0]);
        assert!(block_values(&t, &p, 1).is_err());
        assert!(scatter_block(&t, &p, 0, &[1.0]).is_err());
    }

    #[test]
    fn blocks_cover_every_coefficient_once() {
        for (shape, dims) in [
            (vec![4usize, 6], vec![2usize, 2]),
            (vec![5, 5], vec![2, 2]),
            (vec![8, 8], vec![8, 1]),
            (vec![7, 9], vec![4, 1]),
            (vec![3, 4, 3, 3], vec![2, 2, 2]),
        ] {
            let bs = BlockShape::new(&dims).unwrap();
            let p = partition(&shape, &bs).unwrap();
            let total = p.total_coefficients();
            let mut seen = vec![0usize; total];
            for j in 0..p.num_blocks() {
                for &c in p.block_coords(j).unwrap() {
                    seen[c] += 1;
                }
            }
            assert!(seen.iter().all(|&n| n == 1), "cover failed for {shape:?} {dims:?}");
        }
    }
}
