use crate::error::{Error, Result};
use crate::tensor::{batched_matmul, batched_matmul_at, batched_matmul_bt, Element, Tensor};

/// Trainable block-diagonal update `D = diag(D₁, …, D_N)` stored as an
/// `N×d₁×d₂` tensor.
///
/// Shapes that `N` does not divide are handled by zero-padding the input to
/// `N·d₁` columns and dropping the trailing `pad_out` output columns. The
/// base weight is never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagonalAdapter<T> {
    blocks: Tensor<T>,
    in_features: usize,
    out_features: usize,
}

/// Block geometry for an `m₁×m₂` layer split into `N` diagonal blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub num_blocks: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    pub pad_in: usize,
    pub pad_out: usize,
}

impl BlockLayout {
    pub fn new(in_features: usize, out_features: usize, num_blocks: usize) -> Result<Self> {
        if in_features == 0 || out_features == 0 || num_blocks == 0 {
            return Err(Error::Config(format!(
                "block layout needs positive sizes, got m1={in_features} m2={out_features} N={num_blocks}"
            )));
        }
        let block_rows = in_features.div_ceil(num_blocks);
        let block_cols = out_features.div_ceil(num_blocks);
        Ok(Self {
            num_blocks,
            block_rows,
            block_cols,
            pad_in: num_blocks * block_rows - in_features,
            pad_out: num_blocks * block_cols - out_features,
        })
    }

    pub fn num_params(&self) -> usize {
        self.num_blocks * self.block_rows * self.block_cols
    }
}

/// All-zero adapter with `d₁ = ⌈m₁/N⌉`, `d₂ = ⌈m₂/N⌉`.
pub fn init_diablo<T: Element>(
    in_features: usize,
    out_features: usize,
    num_blocks: usize,
) -> Result<BlockDiagonalAdapter<T>> {
    let layout = BlockLayout::new(in_features, out_features, num_blocks)?;
    Ok(BlockDiagonalAdapter {
        blocks: Tensor::zeros(&[layout.num_blocks, layout.block_rows, layout.block_cols]),
        in_features,
        out_features,
    })
}

impl<T: Element> BlockDiagonalAdapter<T> {
    /// Wraps existing blocks; the block shape must equal the layout `init_diablo` would pick.
    pub fn from_blocks(blocks: Tensor<T>, in_features: usize, out_features: usize) -> Result<Self> {
        let (n, d1, d2) = blocks.dims3("BlockDiagonalAdapter::from_blocks")?;
        let layout = BlockLayout::new(in_features, out_features, n)?;
        if (d1, d2) != (layout.block_rows, layout.block_cols) {
            return Err(Error::Shape {
                op: "BlockDiagonalAdapter::from_blocks",
                left: blocks.shape().to_vec(),
                right: vec![n, layout.block_rows, layout.block_cols],
            });
        }
        Ok(Self {
            blocks,
            in_features,
            out_features,
        })
    }

    pub fn layout(&self) -> BlockLayout {
        let s = self.blocks.shape();
        BlockLayout {
            num_blocks: s[0],
            block_rows: s[1],
            block_cols: s[2],
            pad_in: s[0] * s[1] - self.in_features,
            pad_out: s[0] * s[2] - self.out_features,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn blocks(&self) -> &Tensor<T> {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut Tensor<T> {
        &mut self.blocks
    }

    pub fn num_params(&self) -> usize {
        self.blocks.len()
    }

    fn check_input(&self, op: &'static str, x: &Tensor<T>) -> Result<usize> {
        let (b, m1) = x.dims2(op)?;
        if m1 != self.in_features {
            return Err(Error::Shape {
                op,
                left: x.shape().to_vec(),
                right: vec![self.in_features, self.out_features],
            });
        }
        Ok(b)
    }

    fn split_input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let l = self.layout();
        let b = x.shape()[0];
        x.pad_cols(l.num_blocks * l.block_rows)?
            .reshape(&[b, l.num_blocks, l.block_rows])
    }

    fn split_output_grad(&self, g_y: &Tensor<T>) -> Result<Tensor<T>> {
        let l = self.layout();
        let b = g_y.shape()[0];
        g_y.pad_cols(l.num_blocks * l.block_cols)?
            .reshape(&[b, l.num_blocks, l.block_cols])
    }

    /// `X·D` through per-block products, never materializing `D`.
    pub fn delta_output(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_input("diablo_forward", x)?;
        let l = self.layout();
        let xd = batched_matmul(&self.split_input(x)?, &self.blocks)?;
        xd.reshape(&[b, l.num_blocks * l.block_cols])?
            .take_cols(self.out_features)
    }

    /// `w_out + X·D`, where `w_out = X·W` is the frozen base output.
    pub fn forward(&self, x: &Tensor<T>, w_out: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_input("diablo_forward", x)?;
        if w_out.shape() != [b, self.out_features] {
            return Err(Error::Shape {
                op: "diablo_forward",
                left: x.shape().to_vec(),
                right: w_out.shape().to_vec(),
            });
        }
        w_out.add(&self.delta_output(x)?)
    }

    /// Block gradients `g_{Dᵢ} = Xᵢᵀ g_{Yᵢ}`; padded rows and columns come out zero.
    pub fn param_grads(&self, x: &Tensor<T>, g_y: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_input("diablo_backward", x)?;
        if g_y.shape() != [b, self.out_features] {
            return Err(Error::Shape {
                op: "diablo_backward",
                left: x.shape().to_vec(),
                right: g_y.shape().to_vec(),
            });
        }
        batched_matmul_at(&self.split_input(x)?, &self.split_output_grad(g_y)?)
    }

    /// Gradient of the adapter path with respect to the input, `g_Y·Dᵀ`.
    pub fn input_grad(&self, g_y: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, m2) = g_y.dims2("diablo_backward")?;
        if m2 != self.out_features {
            return Err(Error::Shape {
                op: "diablo_backward",
                left: g_y.shape().to_vec(),
                right: vec![self.in_features, self.out_features],
            });
        }
        let l = self.layout();
        batched_matmul_bt(&self.split_output_grad(g_y)?, &self.blocks)?
            .reshape(&[b, l.num_blocks * l.block_rows])?
            .take_cols(self.in_features)
    }

    /// Dense `m₁×m₂` form of `D`; used for merging into a base weight.
    pub fn dense_delta(&self) -> Tensor<T> {
        let l = self.layout();
        let (m1, m2) = (self.in_features, self.out_features);
        let mut out = Tensor::zeros(&[m1, m2]);
        let blocks = self.blocks.data();
        let dense = out.data_mut();
        for n in 0..l.num_blocks {
            for k in 0..l.block_rows {
                let row = n * l.block_rows + k;
                if row >= m1 {
                    break;
                }
                for j in 0..l.block_cols {
                    let col = n * l.block_cols + j;
                    if col >= m2 {
                        break;
                    }
                    dense[row * m2 + col] = blocks[(n * l.block_rows + k) * l.block_cols + j];
                }
            }
        }
        out
    }
}
