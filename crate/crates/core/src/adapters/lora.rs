use crate::error::{Error, Result};
use crate::rng::{rand_kaiming_uniform, Rng};
use crate::tensor::{matmul_nt, matmul_tn, Element, Tensor};

/// Low-rank update `scaling · A·B` with `A: m₁×r`, `B: r×m₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    a: Tensor<T>,
    b: Tensor<T>,
    scaling: T,
}

impl<T: Element> LoraAdapter<T> {
    /// Standard init: Kaiming-uniform `A`, zero `B`, so `A·B = 0`.
    pub fn new(
        in_features: usize,
        out_features: usize,
        rank: usize,
        scaling: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if in_features == 0 || out_features == 0 || rank == 0 {
            return Err(Error::Config(format!(
                "LoRA needs positive sizes, got m1={in_features} m2={out_features} r={rank}"
            )));
        }
        Ok(Self {
            a: rand_kaiming_uniform(rng, in_features, rank),
            b: Tensor::zeros(&[rank, out_features]),
            scaling: T::from_f64(scaling),
        })
    }

    pub fn from_factors(a: Tensor<T>, b: Tensor<T>, scaling: f64) -> Result<Self> {
        let (_, r) = a.dims2("LoraAdapter::from_factors")?;
        let (r2, _) = b.dims2("LoraAdapter::from_factors")?;
        if r != r2 {
            return Err(Error::Shape {
                op: "LoraAdapter::from_factors",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        Ok(Self {
            a,
            b,
            scaling: T::from_f64(scaling),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn in_features(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn scaling(&self) -> T {
        self.scaling
    }

    pub fn a(&self) -> &Tensor<T> {
        &self.a
    }

    pub fn b(&self) -> &Tensor<T> {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor<T> {
        &mut self.a
    }

    /// Both factors at once.
    pub fn factors_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.a, &mut self.b)
    }

    pub fn b_mut(&mut self) -> &mut Tensor<T> {
        &mut self.b
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    fn check(&self, op: &'static str, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
        let (b, m1) = x.dims2(op)?;
        let (b2, m2) = y.dims2(op)?;
        if m1 != self.in_features() || b != b2 || m2 != self.out_features() {
            return Err(Error::Shape {
                op,
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `scaling · (X·A)·B` as two thin products.
    pub fn delta_output(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let xa = x.matmul(&self.a).map_err(|_| Error::Shape {
            op: "lora_forward",
            left: x.shape().to_vec(),
            right: self.a.shape().to_vec(),
        })?;
        Ok(xa.matmul(&self.b)?.scale(self.scaling))
    }

    pub fn forward(&self, x: &Tensor<T>, w_out: &Tensor<T>) -> Result<Tensor<T>> {
        self.check("lora_forward", x, w_out)?;
        w_out.add(&self.delta_output(x)?)
    }

    /// Returns `(g_A, g_B)` with `g_A = s·Xᵀ(g_Y Bᵀ)` and `g_B = s·(XA)ᵀ g_Y`.
    pub fn param_grads(&self, x: &Tensor<T>, g_y: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check("lora_backward", x, g_y)?;
        let gb_t = matmul_nt(g_y, &self.b)?;
        let grad_a = matmul_tn(x, &gb_t)?.scale(self.scaling);
        let xa = x.matmul(&self.a)?;
        let grad_b = matmul_tn(&xa, g_y)?.scale(self.scaling);
        Ok((grad_a, grad_b))
    }

    /// `s · (g_Y Bᵀ) Aᵀ`
    pub fn input_grad(&self, g_y: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, m2) = g_y.dims2("lora_backward")?;
        if m2 != self.out_features() {
            return Err(Error::Shape {
                op: "lora_backward",
                left: g_y.shape().to_vec(),
                right: self.b.shape().to_vec(),
            });
        }
        let gb_t = matmul_nt(g_y, &self.b)?;
        Ok(matmul_nt(&gb_t, &self.a)?.scale(self.scaling))
    }

    pub fn dense_delta(&self) -> Tensor<T> {
        self.a
            .matmul(&self.b)
            .expect("factor shapes validated at construction")
            .scale(self.scaling)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_init_is_transparent() {
        let lora = LoraAdapter::<f32>::new(6, 5, 2, 1.0, &mut Rng::new(1)).unwrap();
        assert!(lora.b().data().iter().all(|&v| v == 0.0));
        assert!(lora.a().data().iter().any(|&v| v != 0.0));
        let x = Tensor::from_fn(&[3, 6], |i| i as f32 * 0.3 - 1.0);
        let w_out = Tensor::from_fn(&[3, 5], |i| i as f32 * 0.7 + 0.1);
        assert!(lora.forward(&x, &w_out).unwrap().bit_eq(&w_out));
    }

    #[test]
    fn identity_factors_add_input() {
        let lora = LoraAdapter::from_factors(Tensor::<f64>::eye(3), Tensor::eye(3), 1.0).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]);
        let w_out = Tensor::from_rows(&[vec![10.0, 20.0, 30.0]]);
        let y = lora.forward(&x, &w_out).unwrap();
        assert_eq!(y.data(), &[11.0, 18.0, 30.5]);
    }

    #[test]
    fn zero_b_gives_zero_grad_a_only() {
        let lora = LoraAdapter::<f64>::new(4, 3, 2, 1.0, &mut Rng::new(2)).unwrap();
        let x = Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.9).sin());
        let g = Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.4).cos());
        let (ga, gb) = lora.param_grads(&x, &g).unwrap();
        assert!(ga.data().iter().all(|&v| v == 0.0));
        assert!(gb.max_abs() > 0.0);

        let (ga, gb) = lora.param_grads(&x, &Tensor::zeros(&[5, 3])).unwrap();
        assert_eq!(ga.max_abs() + gb.max_abs(), 0.0);
    }

    #[test]
    fn rejects_zero_rank_and_bad_shapes() {
        assert!(LoraAdapter::<f32>::new(4, 4, 0, 1.0, &mut Rng::new(0)).is_err());
        let lora = LoraAdapter::<f32>::new(4, 4, 1, 1.0, &mut Rng::new(0)).unwrap();
        assert_eq!(lora.num_params(), 8);
        assert!(lora
            .forward(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 4]))
            .is_err());
    }
}
