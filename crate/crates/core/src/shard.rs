//! Device mesh, partition specs, and the two spec repair passes.
//!
//! LoRA factors injected next to a base weight inherit that weight's
//! partition spec even though their rank differs (`lora_a` of a
//! `(in, 2, kv, hd)` weight is `(in, r)`). [`repair_rank`] replaces such specs
//! with a fully replicated one; [`repair_divisibility`] then replicates any
//! dimension whose size the assigned mesh axis does not divide.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::ArchDescriptor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshAxis {
    pub name: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mesh {
    pub axes: Vec<MeshAxis>,
}

impl Mesh {
    pub fn new(axes: Vec<MeshAxis>) -> Result<Self> {
        let mesh = Self { axes };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Two-axis `(fsdp, tp)` mesh.
    pub fn fsdp_tp(fsdp: usize, tp: usize) -> Result<Self> {
        Self::new(vec![
            MeshAxis {
                name: "fsdp".into(),
                size: fsdp,
            },
            MeshAxis {
                name: "tp".into(),
                size: tp,
            },
        ])
    }

    /// Parses `<fsdp>x<tp>`, e.g. `1x4`.
    pub fn parse_fsdp_tp(text: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("mesh must look like <fsdp>x<tp>, got {text:?}"));
        let (fsdp, tp) = text.split_once('x').ok_or_else(bad)?;
        let fsdp = fsdp.trim().parse().map_err(|_| bad())?;
        let tp = tp.trim().parse().map_err(|_| bad())?;
        Self::fsdp_tp(fsdp, tp)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for axis in &self.axes {
            if axis.size == 0 {
                return Err(Error::Invalid(format!("mesh axis {:?} has size 0", axis.name)));
            }
            if !names.insert(axis.name.as_str()) {
                return Err(Error::Invalid(format!("duplicate mesh axis {:?}", axis.name)));
            }
        }
        Ok(())
    }

    pub fn size(&self, axis: &str) -> Option<usize> {
        self.axes.iter().find(|a| a.name == axis).map(|a| a.size)
    }

    pub fn device_count(&self) -> usize {
        self.axes.iter().map(|a| a.size).product()
    }
}

/// Per-dimension axis assignment; `None` is replicated.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartitionSpec(pub Vec<Option<String>>);

impl PartitionSpec {
    pub fn replicated(rank: usize) -> Self {
        Self(vec![None; rank])
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// An axis name may appear at most once in a partition spec.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for axis in self.0.iter().flatten() {
            if !seen.insert(axis) {
                return Err(Error::Invalid(format!(
                    "axis {axis:?} assigned to more than one dimension"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamNode {
    pub path: String,
    pub shape: Vec<usize>,
    pub spec: PartitionSpec,
}

/// The on-disk form consumed and produced by `repair-specs`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardingDoc {
    pub mesh: Mesh,
    pub params: Vec<ParamNode>,
}

pub fn repair_rank(params: &[ParamNode]) -> Vec<ParamNode> {
    params
        .iter()
        .map(|node| {
            if node.spec.rank() == node.shape.len() {
                node.clone()
            } else {
                ParamNode {
                    spec: PartitionSpec::replicated(node.shape.len()),
                    ..node.clone()
                }
            }
        })
        .collect()
}

/// Expects rank-matched specs (see [`repair_rank`]).
pub fn repair_divisibility(params: &[ParamNode], mesh: &Mesh) -> Result<Vec<ParamNode>> {
    params
        .iter()
        .map(|node| {
            if node.spec.rank() != node.shape.len() {
                return Err(Error::Invalid(format!(
                    "{}: spec rank {} does not match tensor rank {}",
                    node.path,
                    node.spec.rank(),
                    node.shape.len()
                )));
            }
            let mut spec = node.spec.clone();
            for (slot, &dim) in spec.0.iter_mut().zip(&node.shape) {
                if let Some(axis) = slot {
                    let size = mesh.size(axis).ok_or_else(|| Error::UnknownAxis(axis.clone()))?;
                    if dim % size != 0 {
                        *slot = None;
                    }
                }
            }
            Ok(ParamNode { spec, ..node.clone() })
        })
        .collect()
}

pub fn repair_tree(params: &[ParamNode], mesh: &Mesh) -> Result<Vec<ParamNode>> {
    repair_divisibility(&repair_rank(params), mesh)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Defect {
    RankMismatch {
        path: String,
        spec_rank: usize,
        tensor_rank: usize,
    },
    Indivisible {
        path: String,
        dim: usize,
        size: usize,
        axis: String,
        axis_size: usize,
    },
    UnknownAxis {
        path: String,
        axis: String,
    },
    RepeatedAxis {
        path: String,
        axis: String,
    },
}

/// Every reason `params` could not be laid out on `mesh` as annotated.
pub fn find_defects(params: &[ParamNode], mesh: &Mesh) -> Vec<Defect> {
    let mut out = Vec::new();
    for node in params {
        if node.spec.rank() != node.shape.len() {
            out.push(Defect::RankMismatch {
                path: node.path.clone(),
                spec_rank: node.spec.rank(),
                tensor_rank: node.shape.len(),
            });
            continue;
        }
        let mut seen = HashSet::new();
        for axis in node.spec.0.iter().flatten() {
            if !seen.insert(axis) {
                out.push(Defect::RepeatedAxis {
                    path: node.path.clone(),
                    axis: axis.clone(),
                });
            }
        }
        for (dim, (slot, &size)) in node.spec.0.iter().zip(&node.shape).enumerate() {
            let Some(axis) = slot else { continue };
            match mesh.size(axis) {
                None => out.push(Defect::UnknownAxis {
                    path: node.path.clone(),
                    axis: axis.clone(),
                }),
                Some(axis_size) if size % axis_size != 0 => out.push(Defect::Indivisible {
                    path: node.path.clone(),
                    dim,
                    size,
                    axis: axis.clone(),
                    axis_size,
                }),
                Some(_) => {}
            }
        }
    }
    out
}

/// A projection dimension that the mesh cannot split evenly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MeshViolation {
    pub projection: String,
    pub dimension: String,
    pub size: usize,
    pub axis: String,
    pub axis_size: usize,
}

impl fmt::Display for MeshViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} = {} is not divisible by {} = {}",
            self.projection, self.dimension, self.size, self.axis, self.axis_size
        )
    }
}

/// Checks every head-sharded projection dimension against the `tp` axis and
/// the hidden dimension against `fsdp`. A mesh without a `tp` axis is itself
/// reported.
pub fn validate_mesh(mesh: &Mesh, arch: &ArchDescriptor) -> Vec<MeshViolation> {
    let mut out = Vec::new();
    let Some(tp) = mesh.size("tp") else {
        out.push(MeshViolation {
            projection: "mesh".into(),
            dimension: "tp axis".into(),
            size: 0,
            axis: "tp".into(),
            axis_size: 0,
        });
        return out;
    };

    let mut check = |projection: &str, dimension: String, size: usize, axis: &str, axis_size: usize| {
        if !size.is_multiple_of(axis_size) {
            out.push(MeshViolation {
                projection: projection.into(),
                dimension,
                size,
                axis: axis.into(),
                axis_size,
            });
        }
    };

    let heads = arch.num_heads;
    let kv = arch.num_kv_heads;
    check("q_einsum", "num_heads".into(), heads, "tp", tp);
    check("kv_einsum", "num_kv_heads".into(), kv, "tp", tp);
    check("kv_einsum", "2 * num_kv_heads (fused K/V)".into(), 2 * kv, "tp", tp);
    check("attn_vec_einsum", "num_heads".into(), heads, "tp", tp);

    let mut head_dims = arch.head_dims.clone();
    head_dims.sort_unstable();
    head_dims.dedup();
    for hd in head_dims {
        check(
            "q_proj",
            format!("num_heads * head_dim ({heads} x {hd})"),
            heads * hd,
            "tp",
            tp,
        );
        check(
            "k_proj/v_proj",
            format!("num_kv_heads * head_dim ({kv} x {hd})"),
            kv * hd,
            "tp",
            tp,
        );
        check(
            "o_proj",
            format!("num_heads * head_dim ({heads} x {hd})"),
            heads * hd,
            "tp",
            tp,
        );
    }
    check(
        "gate_proj/up_proj/down_proj",
        "intermediate_size".into(),
        arch.intermediate_size,
        "tp",
        tp,
    );
    if let Some(fsdp) = mesh.size("fsdp") {
        check("all projections", "hidden_size".into(), arch.hidden_size, "fsdp", fsdp);
    }
    out
}

/// Weight memory per chip in decimal gigabytes.
pub fn memory_per_chip_gb(param_count: f64, mesh: &Mesh, bytes_per_param: f64) -> f64 {
    param_count * bytes_per_param / mesh.device_count() as f64 / 1e9
}
