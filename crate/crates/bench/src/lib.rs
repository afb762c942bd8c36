//! Fixtures shared by the kernel benchmarks.

use diablo_core::{init_diablo, BlockDiagonalAdapter, LoraAdapter, Rng, Tensor};

/// A square layer with both adapters at parameter parity: `N·d² = 2·m·r`.
pub struct ParityFixture {
    pub x: Tensor<f32>,
    pub g_y: Tensor<f32>,
    pub w: Tensor<f32>,
    pub diablo: BlockDiagonalAdapter<f32>,
    pub lora: LoraAdapter<f32>,
}

impl ParityFixture {
    /// Panics unless `N | m` and `d` is even, so that `r = d/2` gives parity.
    pub fn new(m: usize, batch: usize, num_blocks: usize, seed: u64) -> Self {
        assert!(m.is_multiple_of(num_blocks), "N must divide m");
        let d = m / num_blocks;
        assert!(
            d.is_multiple_of(2),
            "block size must be even for integer rank parity"
        );
        let rank = d / 2;
        let mut rng = Rng::new(seed);
        let mut diablo = init_diablo(m, m, num_blocks).expect("valid layout");
        *diablo.blocks_mut() = rng.normal_tensor(&[num_blocks, d, d], 0.02);
        let mut lora = LoraAdapter::new(m, m, rank, 1.0, &mut rng).expect("valid rank");
        *lora.b_mut() = rng.normal_tensor(&[rank, m], 0.02);
        Self {
            x: rng.normal_tensor(&[batch, m], 1.0),
            g_y: rng.normal_tensor(&[batch, m], 1.0),
            w: rng.normal_tensor(&[m, m], 1.0 / (m as f64).sqrt()),
            diablo,
            lora,
        }
    }

    pub fn rank(&self) -> usize {
        self.lora.rank()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_at_parity() {
        let f = ParityFixture::new(64, 4, 8, 0);
        assert_eq!(f.diablo.num_params(), f.lora.num_params());
        assert_eq!(f.rank(), 4);
    }
}
