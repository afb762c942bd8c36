//! Block-diagonal adapters for fine-tuning frozen linear layers, alongside a
//! low-rank baseline, with exact gradients, low-bit frozen bases and
//! closed-form cost accounting.
//!
//! ```
//! use diablo_core::{init_diablo, Tensor};
//!
//! let adapter = init_diablo::<f32>(10, 6, 4).unwrap();
//! let x = Tensor::<f32>::full(&[2, 10], 1.0);
//! let w_out = Tensor::<f32>::zeros(&[2, 6]);
//! // Fresh adapters start at zero, so the output is the base output.
//! assert!(adapter.forward(&x, &w_out).unwrap().bit_eq(&w_out));
//! ```

pub mod accounting;
pub mod adapters;
pub mod error;
pub mod fsio;
pub mod model;
pub mod oracle;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use accounting::{
    count_diablo, count_full, count_lora, parity_check, parity_sweep, CostReport, ParityReport,
};
pub use adapters::{
    init_diablo, load_adapters, merge_adapter, save_adapters, Adapter, AdapterGrads, AdapterKind,
    AdapterSpec, BlockDiagonalAdapter, BlockLayout, LoraAdapter,
};
pub use error::{Error, Result};
pub use model::{
    attach_adapters, AdaptedLinear, AdapterHost, BaseWeight, Mlp, Model, ModelConfig, ModuleTag,
    TinyTransformerBlock,
};
pub use oracle::GradCheckReport;
pub use quant::{dequant_matmul, quantize, QuantizedWeight};
pub use rng::Rng;
pub use tensor::{DType, Element, Tensor};
pub use trainer::{make_task, train, SyntheticTask, TaskKind, TaskSpec, TrainConfig, TrainOutcome};
