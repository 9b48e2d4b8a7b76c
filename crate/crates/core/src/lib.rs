//! Checkpoint bridging between fused-einsum JAX LoRA adapters and
//! HuggingFace-layout safetensors checkpoints, plus the surrounding tooling:
//! partition-spec repair, SFT data preparation, learning-rate schedules and
//! serving benchmark / cost arithmetic.
//!
//! ```
//! use ckpt_bridge::{ArchDescriptor, LoraPair, MergeConfig, SafetensorsFile, Tensor, merge};
//!
//! let arch = ArchDescriptor::from_json(r#"{
//!     "hidden_size": 4, "num_heads": 2, "num_kv_heads": 1, "head_dims": [2],
//!     "num_layers": 1, "intermediate_size": 8,
//!     "key_template": "layers.{layer}.{module}"
//! }"#).unwrap();
//! let base = SafetensorsFile::from_tensors(None, [
//!     ("layers.0.q_proj", Tensor::from_f32(vec![4, 4], &[0.0; 16]).unwrap()),
//! ]).unwrap();
//! let a = Tensor::from_f32(vec![4, 1], &[1.0, 0.0, 0.0, 0.0]).unwrap();
//! let b = Tensor::from_f32(vec![1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
//! let pair = LoraPair::new("layers.0.q_einsum", a, b).unwrap();
//!
//! let merged = merge(&base, &[pair], &MergeConfig::new(1.0, 1), &arch).unwrap();
//! let q = merged.tensor("layers.0.q_proj").unwrap().to_f32();
//! assert_eq!(&q.data()[..4], &[1.0, 0.0, 0.0, 0.0]);
//! assert_eq!(q.data()[12], 4.0);
//! ```

pub mod bench;
pub mod cost;
pub mod error;
pub mod layout;
pub mod merge;
pub mod numeric;
pub mod safetensors;
pub mod schedule;
pub mod sft;
pub mod shard;
pub mod tensor;

pub use error::{Error, Result};
pub use layout::{ArchDescriptor, ModuleKind, ModuleLayout};
pub use merge::{compute_delta, load_lora_factors, merge, LoraPair, MergeConfig};
pub use safetensors::SafetensorsFile;
pub use tensor::{Array, DType, Tensor};

// the guide's code blocks run as doc-tests
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/safetensors.md")]
mod book_safetensors {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/numerics.md")]
mod book_numerics {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/layouts.md")]
mod book_layouts {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/merge.md")]
mod book_merge {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/sharding.md")]
mod book_sharding {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/data-pipeline.md")]
mod book_data_pipeline {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/bench-and-cost.md")]
mod book_bench_and_cost {}
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
