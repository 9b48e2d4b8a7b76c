//! Folding LoRA factors back into HF-layout base weights.
//!
//! Factors arrive in a safetensors container keyed `<module_path>.lora_a` /
//! `<module_path>.lora_b`, where `<module_path>` is the JAX-side path such as
//! `layers.3.kv_einsum`. Each pair yields one delta per HF target key (two for
//! `kv_einsum`), already transposed into `(out, in)` layout, and the merged
//! weight is `W + (alpha / rank) * delta`, rounded once to the output dtype.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layout::{layout_for, lora_target_filter, ArchDescriptor, DeltaRule, ModuleKind, Namespace};
use crate::safetensors::SafetensorsFile;
use crate::tensor::{Array, DType, Scalar, Tensor};

/// Metadata key stamped on every merged checkpoint.
pub const TOOL_VERSION_KEY: &str = "merged_by";

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub module_name: String,
    pub layer: usize,
    pub kind: ModuleKind,
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraPair {
    /// Infers layer and kind from `module_name`.
    pub fn new(module_name: impl Into<String>, a: Tensor, b: Tensor) -> Result<Self> {
        let module_name = module_name.into();
        let (layer, kind) = parse_module_path(&module_name)?;
        let pair = Self {
            module_name,
            layer,
            kind,
            a,
            b,
        };
        pair.rank()?;
        Ok(pair)
    }

    /// Shared rank of the two factors: last axis of `a`, first axis of `b`.
    pub fn rank(&self) -> Result<usize> {
        let ra = self.a.shape().last().copied();
        let rb = self.b.shape().first().copied();
        match (ra, rb) {
            (Some(ra), Some(rb)) if ra == rb => Ok(ra),
            _ => Err(Error::RankMismatch {
                module: self.module_name.clone(),
                detail: format!("lora_a {:?} vs lora_b {:?}", self.a.shape(), self.b.shape()),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeConfig {
    pub alpha: f64,
    pub rank: usize,
    /// `None` keeps each tensor's base dtype.
    pub output_dtype: Option<DType>,
}

impl MergeConfig {
    pub fn new(alpha: f64, rank: usize) -> Self {
        Self {
            alpha,
            rank,
            output_dtype: None,
        }
    }

    pub fn scale(&self) -> Result<f64> {
        let scale = self.alpha / self.rank as f64;
        if self.rank == 0 || !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!(
                "alpha / rank must be finite and positive (alpha={}, rank={})",
                self.alpha, self.rank
            )));
        }
        Ok(scale)
    }
}

/// Splits `layers.3.q_einsum` style paths into (layer, kind). The layer is the
/// last all-digit segment before the module leaf.
pub fn parse_module_path(path: &str) -> Result<(usize, ModuleKind)> {
    let segments: Vec<&str> = path.split('.').collect();
    let leaf = segments.last().copied().unwrap_or_default();
    let kind = ModuleKind::from_tunix_leaf(leaf)
        .filter(|_| lora_target_filter(path, Namespace::Tunix))
        .ok_or_else(|| Error::UnknownModule(path.to_string()))?;
    let layer = segments[..segments.len() - 1]
        .iter()
        .rev()
        .find_map(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::UnknownModule(format!("{path} (no layer index)")))?;
    Ok((layer, kind))
}

/// Element types the delta can be accumulated in.
pub trait DeltaScalar: Scalar + Send + Sync {
    fn widen(t: &Tensor) -> Array<Self>;
}

impl DeltaScalar for f32 {
    fn widen(t: &Tensor) -> Array<f32> {
        t.to_f32()
    }
}

impl DeltaScalar for f64 {
    fn widen(t: &Tensor) -> Array<f64> {
        t.to_f64()
    }
}

/// Unscaled deltas for one pair, keyed by HF target and accumulated in `T`.
pub fn delta_arrays<T: DeltaScalar>(pair: &LoraPair, arch: &ArchDescriptor) -> Result<Vec<(String, Array<T>)>> {
    let rank = pair.rank()?;
    let layout = layout_for(arch, pair.layer, pair.kind, rank);
    if pair.a.shape() != layout.lora_a_shape.as_slice() || pair.b.shape() != layout.lora_b_shape.as_slice() {
        return Err(Error::Shape(format!(
            "{}: factors {:?} x {:?} do not match the architecture ({:?} x {:?})",
            pair.module_name,
            pair.a.shape(),
            pair.b.shape(),
            layout.lora_a_shape,
            layout.lora_b_shape
        )));
    }
    let a = T::widen(&pair.a);
    let b = T::widen(&pair.b);
    let r = rank;

    let deltas = match layout.delta_rule {
        DeltaRule::TransposeAB => {
            let cols = b.shape()[1] * b.shape()[2];
            vec![a.matmul(&b.reshape(&[r, cols])?)?.transpose2d()?]
        }
        DeltaRule::SplitKVThenTransposeAB => (0..2)
            .map(|side| {
                let part = b.slice_axis(1, side)?;
                let cols = part.shape()[1] * part.shape()[2];
                a.matmul(&part.reshape(&[r, cols])?)?.transpose2d()
            })
            .collect::<Result<Vec<_>>>()?,
        DeltaRule::FlattenAThenTransposeAB => {
            let rows = a.shape()[0] * a.shape()[1];
            vec![a.reshape(&[rows, r])?.matmul(&b)?.transpose2d()?]
        }
        DeltaRule::TransposeABMlp => vec![a.matmul(&b)?.transpose2d()?],
    };
    Ok(layout.hf_target_keys.into_iter().zip(deltas).collect())
}

/// Unscaled `f32` deltas in HF `(out, in)` layout.
pub fn compute_delta(pair: &LoraPair, arch: &ArchDescriptor) -> Result<Vec<(String, Tensor)>> {
    delta_arrays::<f32>(pair, arch)?
        .into_iter()
        .map(|(key, d)| Ok((key, Tensor::from_array_f32(&d, DType::F32)?)))
        .collect()
}

/// `(alpha / rank) * delta` in `f64`, keyed by HF target, for every pair.
pub fn scaled_deltas(
    pairs: &[LoraPair],
    cfg: &MergeConfig,
    arch: &ArchDescriptor,
) -> Result<BTreeMap<String, Array<f64>>> {
    let scale = cfg.scale()?;
    let mut seen = HashSet::new();
    for pair in pairs {
        if !seen.insert((pair.layer, pair.kind)) {
            return Err(Error::DuplicatePair(pair.module_name.clone()));
        }
        let rank = pair.rank()?;
        if rank != cfg.rank {
            return Err(Error::RankMismatch {
                module: pair.module_name.clone(),
                detail: format!("factor rank {rank}, configured rank {}", cfg.rank),
            });
        }
    }
    let per_pair: Vec<Vec<(String, Array<f64>)>> = pairs
        .par_iter()
        .map(|pair| delta_arrays::<f64>(pair, arch))
        .collect::<Result<_>>()?;
    Ok(per_pair
        .into_iter()
        .flatten()
        .map(|(key, d)| (key, d.map(|v| v * scale)))
        .collect())
}

/// Applies every pair to `base` and returns the merged checkpoint.
///
/// Targeted tensors become `round(W + scale * delta)` computed in `f64`;
/// elements whose scaled delta is exactly zero keep their original bits.
/// Everything else is copied unchanged.
pub fn merge(
    base: &SafetensorsFile,
    pairs: &[LoraPair],
    cfg: &MergeConfig,
    arch: &ArchDescriptor,
) -> Result<SafetensorsFile> {
    let deltas = scaled_deltas(pairs, cfg, arch)?;
    for (key, delta) in &deltas {
        let entry = base.entry(key).ok_or_else(|| Error::MissingTarget(key.clone()))?;
        if entry.shape != delta.shape() {
            return Err(Error::Shape(format!(
                "{key}: base shape {:?}, delta shape {:?}",
                entry.shape,
                delta.shape()
            )));
        }
    }

    let names: Vec<&str> = base.entries().map(|e| e.name.as_str()).collect();
    let merged: Vec<(String, Tensor)> = names
        .par_iter()
        .map(|&name| {
            let tensor = base.tensor(name)?;
            let out_dtype = cfg.output_dtype.unwrap_or(tensor.dtype());
            let out = match deltas.get(name) {
                Some(delta) => apply_delta(&tensor, delta, out_dtype)?,
                None => crate::tensor::convert(&tensor, out_dtype),
            };
            Ok((name.to_string(), out))
        })
        .collect::<Result<_>>()?;

    let mut metadata = base.metadata().cloned().unwrap_or_default();
    metadata.insert(TOOL_VERSION_KEY.to_string(), TOOL_VERSION.to_string());
    SafetensorsFile::from_tensors(Some(metadata), merged)
}

fn apply_delta(base: &Tensor, delta: &Array<f64>, out_dtype: DType) -> Result<Tensor> {
    let w = base.to_f64();
    let sum: Vec<f64> = w.data().iter().zip(delta.data()).map(|(&w, &d)| w + d).collect();
    let rounded = Tensor::from_array_f64(&Array::new(w.shape().to_vec(), sum)?, out_dtype)?;
    if out_dtype != base.dtype() {
        return Ok(rounded);
    }
    let size = out_dtype.size();
    let mut bytes = rounded.into_bytes();
    for (i, &d) in delta.data().iter().enumerate() {
        if d == 0.0 {
            bytes[i * size..(i + 1) * size].copy_from_slice(&base.bytes()[i * size..(i + 1) * size]);
        }
    }
    Tensor::new(out_dtype, base.shape().to_vec(), bytes)
}

/// Groups `<module_path>.lora_a` / `.lora_b` keys into pairs and checks each
/// against the architecture.
pub fn load_lora_factors(file: &SafetensorsFile, arch: &ArchDescriptor) -> Result<Vec<LoraPair>> {
    let mut halves: BTreeMap<String, (Option<String>, Option<String>)> = BTreeMap::new();
    for entry in file.entries() {
        let name = &entry.name;
        let (module, is_a) = if let Some(m) = name.strip_suffix(".lora_a") {
            (m, true)
        } else if let Some(m) = name.strip_suffix(".lora_b") {
            (m, false)
        } else {
            return Err(Error::Invalid(format!(
                "unexpected key {name:?} in LoRA file (expected <module>.lora_a or <module>.lora_b)"
            )));
        };
        let slot = halves.entry(module.to_string()).or_default();
        if is_a {
            slot.0 = Some(name.clone());
        } else {
            slot.1 = Some(name.clone());
        }
    }

    let mut pairs = Vec::with_capacity(halves.len());
    let mut by_module: HashMap<(usize, ModuleKind), String> = HashMap::new();
    for (module, (a, b)) in halves {
        let (a, b) = match (a, b) {
            (Some(a), Some(b)) => (a, b),
            (Some(one), None) | (None, Some(one)) => return Err(Error::OrphanFactor(one)),
            (None, None) => unreachable!(),
        };
        let pair = LoraPair::new(module.clone(), file.tensor(&a)?, file.tensor(&b)?)?;
        if pair.layer >= arch.num_layers {
            return Err(Error::Invalid(format!(
                "{module}: layer {} is outside the {}-layer architecture",
                pair.layer, arch.num_layers
            )));
        }
        let rank = pair.rank()?;
        let layout = layout_for(arch, pair.layer, pair.kind, rank);
        if pair.a.shape() != layout.lora_a_shape.as_slice() || pair.b.shape() != layout.lora_b_shape.as_slice() {
            return Err(Error::Shape(format!(
                "{module}: factors {:?} x {:?}, expected {:?} x {:?}",
                pair.a.shape(),
                pair.b.shape(),
                layout.lora_a_shape,
                layout.lora_b_shape
            )));
        }
        if let Some(prev) = by_module.insert((pair.layer, pair.kind), module.clone()) {
            return Err(Error::DuplicatePair(format!("{prev} / {module}")));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}
