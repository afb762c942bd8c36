//! Frozen base weights in 2- or 4-bit symmetric group-absmax form.
//!
//! Groups run along the input dimension: for output column `j` and group
//! `g`, rows `g·G .. min((g+1)·G, m₁)` share one scale
//! `s = max|w| / (2^(bits-1) - 1)`. Each element stores
//! `clamp(round(w/s), -qmax, qmax) + 2^(bits-1)` as an unsigned code, so the
//! zero point is `2^(bits-1)`. The final group is shorter when `G ∤ m₁`.
//!
//! Scales are stored flat with index `g·m₂ + j`. Codes are packed row-major,
//! `8/bits` per byte, lowest bits first.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::tensor::{Element, Tensor};

pub const QUANT_FORMAT: &str = "diablo-quant/1";
pub const DEFAULT_GROUP_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeight {
    bits: u8,
    group_size: usize,
    in_features: usize,
    out_features: usize,
    codes: Vec<u8>,
    scales: Tensor<f32>,
}

fn check_bits(bits: u8) -> Result<()> {
    if bits == 2 || bits == 4 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "quantization bits must be 2 or 4, got {bits}"
        )))
    }
}

/// Quantizes a dense `m₁×m₂` weight.
pub fn quantize<T: Element>(w: &Tensor<T>, bits: u8, group_size: usize) -> Result<QuantizedWeight> {
    check_bits(bits)?;
    if group_size == 0 {
        return Err(Error::Config("group_size must be positive".into()));
    }
    let (m1, m2) = w.dims2("quantize")?;
    let groups = m1.div_ceil(group_size);
    let qmax = ((1u32 << (bits - 1)) - 1) as f64;
    let zero_point = 1i64 << (bits - 1);
    let per_byte = 8 / bits as usize;
    let mut codes = vec![0u8; (m1 * m2).div_ceil(per_byte)];
    let mut scales = Tensor::<f32>::zeros(&[groups * m2]);
    let data = w.data();

    for g in 0..groups {
        let rows = g * group_size..((g + 1) * group_size).min(m1);
        for j in 0..m2 {
            let absmax = rows
                .clone()
                .fold(0.0f64, |m, k| m.max(data[k * m2 + j].as_f64().abs()));
            let scale = (absmax / qmax) as f32;
            scales.data_mut()[g * m2 + j] = scale;
            let s = scale as f64;
            for k in rows.clone() {
                let q = if s > 0.0 {
                    (data[k * m2 + j].as_f64() / s).round().clamp(-qmax, qmax) as i64
                } else {
                    0
                };
                let code = (q + zero_point) as u8;
                let e = k * m2 + j;
                codes[e / per_byte] |= code << ((e % per_byte) * bits as usize);
            }
        }
    }
    Ok(QuantizedWeight {
        bits,
        group_size,
        in_features: m1,
        out_features: m2,
        codes,
        scales,
    })
}

impl QuantizedWeight {
    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn num_groups(&self) -> usize {
        self.scales.len()
    }

    pub fn scales(&self) -> &Tensor<f32> {
        &self.scales
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn zero_point(&self) -> u8 {
        1 << (self.bits - 1)
    }

    /// Scale shared by element `(row, col)`.
    pub fn scale_at(&self, row: usize, col: usize) -> f32 {
        self.scales.data()[(row / self.group_size) * self.out_features + col]
    }

    pub fn code(&self, row: usize, col: usize) -> u8 {
        let per_byte = 8 / self.bits as usize;
        let e = row * self.out_features + col;
        let mask = (1u8 << self.bits) - 1;
        (self.codes[e / per_byte] >> ((e % per_byte) * self.bits as usize)) & mask
    }

    fn dequantize_row_into<T: Element>(&self, row: usize, out: &mut [T]) {
        let zp = self.zero_point() as i32;
        let g = row / self.group_size;
        let scales = &self.scales.data()[g * self.out_features..(g + 1) * self.out_features];
        for (j, (o, &s)) in out.iter_mut().zip(scales).enumerate() {
            let q = self.code(row, j) as i32 - zp;
            *o = T::from_f64(q as f64 * s as f64);
        }
    }

    pub fn dequantize<T: Element>(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(&[self.in_features, self.out_features]);
        let m2 = self.out_features;
        for k in 0..self.in_features {
            self.dequantize_row_into(k, &mut out.data_mut()[k * m2..(k + 1) * m2]);
        }
        out
    }

    /// Dense parameter count of the weight this represents.
    pub fn num_elements(&self) -> usize {
        self.in_features * self.out_features
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("codes.bin"), &self.codes)?;
        write_atomic(&dir.join("scales.dbt"), &self.scales.to_bytes())?;
        let manifest = QuantManifest {
            format: QUANT_FORMAT.to_string(),
            bits: self.bits,
            group_size: self.group_size,
            in_features: self.in_features,
            out_features: self.out_features,
            codes: "codes.bin".into(),
            scales: "scales.dbt".into(),
        };
        let text = toml::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("cannot encode manifest: {e}")))?;
        write_atomic(&dir.join("manifest.toml"), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.toml"))?;
        let m: QuantManifest =
            toml::from_str(&text).map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
        if m.format != QUANT_FORMAT {
            return Err(Error::Format(format!("unsupported format {:?}", m.format)));
        }
        check_bits(m.bits)?;
        let codes = fs::read(dir.join(&m.codes))?;
        let scales = Tensor::<f32>::read_from(&mut fs::read(dir.join(&m.scales))?.as_slice())?;
        let per_byte = 8 / m.bits as usize;
        let groups = m.in_features.div_ceil(m.group_size.max(1));
        if m.group_size == 0
            || codes.len() != (m.in_features * m.out_features).div_ceil(per_byte)
            || scales.shape() != [groups * m.out_features]
        {
            return Err(Error::Format(
                "quantized buffers disagree with manifest".into(),
            ));
        }
        Ok(Self {
            bits: m.bits,
            group_size: m.group_size,
            in_features: m.in_features,
            out_features: m.out_features,
            codes,
            scales,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantManifest {
    format: String,
    bits: u8,
    group_size: usize,
    in_features: usize,
    out_features: usize,
    codes: String,
    scales: String,
}

/// `X · dequantize(W)`, dequantizing one input row of `W` at a time.
///
/// Accumulation order matches [`crate::tensor::matmul`], so the result is
/// bit-identical to the dense dequantize-then-multiply path.
pub fn dequant_matmul<T: Element>(x: &Tensor<T>, qw: &QuantizedWeight) -> Result<Tensor<T>> {
    let (b, m1) = x.dims2("dequant_matmul")?;
    if m1 != qw.in_features {
        return Err(Error::Shape {
            op: "dequant_matmul",
            left: x.shape().to_vec(),
            right: vec![qw.in_features, qw.out_features],
        });
    }
    let m2 = qw.out_features;
    let mut out = Tensor::<T>::zeros(&[b, m2]);
    let mut row = vec![T::zero(); m2];
    let xd = x.data();
    for k in 0..m1 {
        qw.dequantize_row_into(k, &mut row);
        for i in 0..b {
            let xik = xd[i * m1 + k];
            for (o, &w) in out.data_mut()[i * m2..(i + 1) * m2].iter_mut().zip(&row) {
                *o += xik * w;
            }
        }
    }
    Ok(out)
}

/// `G · dequantize(W)ᵀ`, the input gradient through a quantized base.
pub fn dequant_matmul_bt<T: Element>(g: &Tensor<T>, qw: &QuantizedWeight) -> Result<Tensor<T>> {
    let (b, m2) = g.dims2("dequant_matmul_bt")?;
    if m2 != qw.out_features {
        return Err(Error::Shape {
            op: "dequant_matmul_bt",
            left: g.shape().to_vec(),
            right: vec![qw.in_features, qw.out_features],
        });
    }
    let m1 = qw.in_features;
    let mut out = Tensor::<T>::zeros(&[b, m1]);
    let mut row = vec![T::zero(); m2];
    for k in 0..m1 {
        qw.dequantize_row_into(k, &mut row);
        for i in 0..b {
            let grow = &g.data()[i * m2..(i + 1) * m2];
            let mut acc = T::zero();
            for (&gv, &w) in grow.iter().zip(&row) {
                acc += gv * w;
            }
            out.data_mut()[i * m1 + k] = acc;
        }
    }
    Ok(out)
}
