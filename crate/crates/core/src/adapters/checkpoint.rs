//! Adapter checkpoints: a `manifest.toml` plus one `DBT1` tensor file per
//! trainable tensor, all in one directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adapter, BlockDiagonalAdapter, FullDeltaAdapter, LoraAdapter};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::tensor::{Element, Tensor};

pub const ADAPTER_FORMAT: &str = "diablo-adapter/1";
const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterManifest {
    pub format: String,
    pub dtype: String,
    #[serde(default)]
    pub adapters: Vec<AdapterEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterEntry {
    pub name: String,
    pub kind: String,
    pub in_features: usize,
    pub out_features: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_blocks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_rows: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_cols: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pad_in: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pad_out: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaling: Option<f64>,
    /// Parameter name -> tensor file, relative to the manifest.
    pub files: BTreeMap<String, String>,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes every named adapter under `dir`, creating it if needed.
pub fn save_adapters<T: Element>(dir: &Path, adapters: &[(String, &Adapter<T>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(adapters.len());
    for (name, adapter) in adapters {
        let stem = file_stem(name);
        let mut files = BTreeMap::new();
        for (pname, tensor) in adapter.param_names().iter().zip(adapter.params()) {
            let file = format!("{stem}.{pname}.dbt");
            write_atomic(&dir.join(&file), &tensor.to_bytes())?;
            files.insert((*pname).to_string(), file);
        }
        let mut entry = AdapterEntry {
            name: name.clone(),
            kind: adapter.kind().name().to_string(),
            in_features: adapter.in_features(),
            out_features: adapter.out_features(),
            num_blocks: None,
            block_rows: None,
            block_cols: None,
            pad_in: None,
            pad_out: None,
            rank: None,
            scaling: None,
            files,
        };
        match adapter {
            Adapter::BlockDiagonal(a) => {
                let l = a.layout();
                entry.num_blocks = Some(l.num_blocks);
                entry.block_rows = Some(l.block_rows);
                entry.block_cols = Some(l.block_cols);
                entry.pad_in = Some(l.pad_in);
                entry.pad_out = Some(l.pad_out);
            }
            Adapter::Lora(a) => {
                entry.rank = Some(a.rank());
                entry.scaling = Some(a.scaling().as_f64());
            }
            Adapter::Full(_) => {}
        }
        entries.push(entry);
    }
    let manifest = AdapterManifest {
        format: ADAPTER_FORMAT.to_string(),
        dtype: T::DTYPE.name().to_string(),
        adapters: entries,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("cannot encode manifest: {e}")))?;
    write_atomic(&dir.join(MANIFEST), text.as_bytes())
}

fn load_tensor<T: Element>(dir: &Path, entry: &AdapterEntry, pname: &str) -> Result<Tensor<T>> {
    let file = entry
        .files
        .get(pname)
        .ok_or_else(|| Error::Format(format!("adapter {:?} lacks tensor {pname:?}", entry.name)))?;
    let bytes = fs::read(dir.join(file))?;
    Tensor::read_from(&mut bytes.as_slice())
}

pub fn load_adapters<T: Element>(dir: &Path) -> Result<Vec<(String, Adapter<T>)>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: AdapterManifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
    if manifest.format != ADAPTER_FORMAT {
        return Err(Error::Format(format!(
            "unsupported adapter format {:?}",
            manifest.format
        )));
    }
    if manifest.dtype != T::DTYPE.name() {
        return Err(Error::Format(format!(
            "checkpoint dtype {} does not match {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let mut out = Vec::with_capacity(manifest.adapters.len());
    for entry in &manifest.adapters {
        let adapter = match entry.kind.as_str() {
            "diablo" => {
                let blocks = load_tensor(dir, entry, "blocks")?;
                let a = BlockDiagonalAdapter::from_blocks(
                    blocks,
                    entry.in_features,
                    entry.out_features,
                )?;
                let l = a.layout();
                let declared = (entry.num_blocks, entry.pad_in, entry.pad_out);
                if declared != (Some(l.num_blocks), Some(l.pad_in), Some(l.pad_out)) {
                    return Err(Error::Format(format!(
                        "adapter {:?}: manifest geometry disagrees with tensor",
                        entry.name
                    )));
                }
                Adapter::BlockDiagonal(a)
            }
            "lora" => {
                let a = load_tensor(dir, entry, "a")?;
                let b = load_tensor(dir, entry, "b")?;
                let l = LoraAdapter::from_factors(a, b, entry.scaling.unwrap_or(1.0))?;
                if entry.rank != Some(l.rank()) {
                    return Err(Error::Format(format!(
                        "adapter {:?}: manifest rank disagrees with tensor",
                        entry.name
                    )));
                }
                Adapter::Lora(l)
            }
            "full" => Adapter::Full(FullDeltaAdapter::from_delta(load_tensor(
                dir, entry, "delta",
            )?)?),
            other => {
                return Err(Error::Format(format!("unknown adapter kind {other:?}")));
            }
        };
        if (adapter.in_features(), adapter.out_features())
            != (entry.in_features, entry.out_features)
        {
            return Err(Error::Format(format!(
                "adapter {:?}: feature sizes disagree with tensor",
                entry.name
            )));
        }
        out.push((entry.name.clone(), adapter));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterSpec;
    use crate::rng::Rng;

    #[test]
    fn round_trip_all_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(8);
        let mut diablo = AdapterSpec::BlockDiagonal { num_blocks: 4 }
            .build::<f32>(10, 6, &mut rng)
            .unwrap()
            .unwrap();
        diablo.params_mut()[0].data_mut()[3] = 1.5;
        let lora = AdapterSpec::Lora {
            rank: 2,
            scaling: 0.25,
        }
        .build::<f32>(10, 6, &mut rng)
        .unwrap()
        .unwrap();
        let full = AdapterSpec::Full
            .build::<f32>(3, 2, &mut rng)
            .unwrap()
            .unwrap();
        save_adapters(
            dir.path(),
            &[
                ("layer0.Q".to_string(), &diablo),
                ("layer0.K".to_string(), &lora),
                ("head".to_string(), &full),
            ],
        )
        .unwrap();

        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(manifest.contains("pad_in = 2"));
        assert!(manifest.contains("scaling = 0.25"));

        let back = load_adapters::<f32>(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].1, diablo);
        assert_eq!(back[1].1, lora);
        assert_eq!(back[2].1, full);
        assert!(load_adapters::<f64>(dir.path()).is_err());
    }
}
