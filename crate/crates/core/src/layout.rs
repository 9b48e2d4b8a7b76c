//! Module naming and LoRA factor layouts on both sides of the conversion.
//!
//! The JAX model fuses K and V into one `kv_einsum` tensor and names the
//! output projection `attn_vec_einsum`; HuggingFace checkpoints keep seven
//! separate `(out, in)` linear weights per layer. [`ModuleLayout`] records,
//! for one module of one layer, the LoRA factor shapes on the JAX side, the
//! HF keys the resulting delta lands on, and which rule produces it.

use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model dimensions plus the HF key template.
///
/// `head_dims` is cycled over layers: layer `i` uses
/// `head_dims[i % head_dims.len()]`. One entry means uniform attention; a
/// pattern such as `[256, 256, 256, 256, 256, 512]` describes interleaved
/// sliding/global layers.
///
/// `key_template` must contain `{layer}` and `{module}`, and may contain
/// `{block}` (`self_attn` for attention projections, `mlp` otherwise).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub hidden_size: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dims: Vec<usize>,
    pub num_layers: usize,
    pub intermediate_size: usize,
    pub key_template: String,
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("num_layers", self.num_layers),
            ("intermediate_size", self.intermediate_size),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.head_dims.is_empty() || self.head_dims.contains(&0) {
            return Err(Error::Config(
                "head_dims must be a non-empty list of positive sizes".into(),
            ));
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::Config(format!(
                "num_heads ({}) is not a multiple of num_kv_heads ({})",
                self.num_heads, self.num_kv_heads
            )));
        }
        if !self.key_template.contains("{layer}") || !self.key_template.contains("{module}") {
            return Err(Error::Config(
                "key_template must contain {layer} and {module} placeholders".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let arch: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn head_dim(&self, layer: usize) -> usize {
        self.head_dims[layer % self.head_dims.len()]
    }

    /// HF checkpoint key of one projection weight.
    pub fn hf_key(&self, layer: usize, hf_module: &str) -> String {
        let block = if matches!(hf_module, "gate_proj" | "up_proj" | "down_proj") {
            "mlp"
        } else {
            "self_attn"
        };
        self.key_template
            .replace("{layer}", &layer.to_string())
            .replace("{block}", block)
            .replace("{module}", hf_module)
    }

    /// Parameters held by the seven projection weights of every layer.
    pub fn projection_param_count(&self) -> u64 {
        (0..self.num_layers)
            .map(|layer| {
                let hd = self.head_dim(layer) as u64;
                let h = self.hidden_size as u64;
                let attn = h * hd * (2 * self.num_heads as u64 + 2 * self.num_kv_heads as u64);
                let mlp = 3 * h * self.intermediate_size as u64;
                attn + mlp
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleKind {
    QEinsum,
    KVEinsum,
    AttnVecEinsum,
    GateProj,
    UpProj,
    DownProj,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 6] = [
        ModuleKind::QEinsum,
        ModuleKind::KVEinsum,
        ModuleKind::AttnVecEinsum,
        ModuleKind::GateProj,
        ModuleKind::UpProj,
        ModuleKind::DownProj,
    ];

    pub const fn tunix_name(self) -> &'static str {
        match self {
            ModuleKind::QEinsum => "q_einsum",
            ModuleKind::KVEinsum => "kv_einsum",
            ModuleKind::AttnVecEinsum => "attn_vec_einsum",
            ModuleKind::GateProj => "gate_proj",
            ModuleKind::UpProj => "up_proj",
            ModuleKind::DownProj => "down_proj",
        }
    }

    pub const fn hf_names(self) -> &'static [&'static str] {
        match self {
            ModuleKind::QEinsum => &["q_proj"],
            ModuleKind::KVEinsum => &["k_proj", "v_proj"],
            ModuleKind::AttnVecEinsum => &["o_proj"],
            ModuleKind::GateProj => &["gate_proj"],
            ModuleKind::UpProj => &["up_proj"],
            ModuleKind::DownProj => &["down_proj"],
        }
    }

    pub fn from_tunix_leaf(leaf: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tunix_name() == leaf)
    }

    pub fn from_hf_leaf(leaf: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.hf_names().contains(&leaf))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeltaRule {
    /// `(A · reshape(B, (r, heads*hd)))^T`
    TransposeAB,
    /// Split `B` on its size-2 axis, then `TransposeAB` for K and for V.
    SplitKVThenTransposeAB,
    /// `(reshape(A, (heads*hd, r)) · B)^T`
    FlattenAThenTransposeAB,
    /// `(A · B)^T`
    TransposeABMlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModuleLayout {
    pub layer: usize,
    pub kind: ModuleKind,
    pub lora_a_shape: Vec<usize>,
    pub lora_b_shape: Vec<usize>,
    pub hf_target_keys: Vec<String>,
    /// HF `(out, in)` shape of each target key, same order as the keys.
    pub hf_target_shapes: Vec<Vec<usize>>,
    pub delta_rule: DeltaRule,
}

pub fn layout_for(arch: &ArchDescriptor, layer: usize, kind: ModuleKind, rank: usize) -> ModuleLayout {
    let h = arch.hidden_size;
    let hd = arch.head_dim(layer);
    let heads = arch.num_heads;
    let kv = arch.num_kv_heads;
    let inter = arch.intermediate_size;
    let r = rank;
    let (a, b, targets, rule) = match kind {
        ModuleKind::QEinsum => (
            vec![h, r],
            vec![r, heads, hd],
            vec![vec![heads * hd, h]],
            DeltaRule::TransposeAB,
        ),
        ModuleKind::KVEinsum => (
            vec![h, r],
            vec![r, 2, kv, hd],
            vec![vec![kv * hd, h], vec![kv * hd, h]],
            DeltaRule::SplitKVThenTransposeAB,
        ),
        ModuleKind::AttnVecEinsum => (
            vec![heads, hd, r],
            vec![r, h],
            vec![vec![h, heads * hd]],
            DeltaRule::FlattenAThenTransposeAB,
        ),
        ModuleKind::GateProj | ModuleKind::UpProj => (
            vec![h, r],
            vec![r, inter],
            vec![vec![inter, h]],
            DeltaRule::TransposeABMlp,
        ),
        ModuleKind::DownProj => (
            vec![inter, r],
            vec![r, h],
            vec![vec![h, inter]],
            DeltaRule::TransposeABMlp,
        ),
    };
    ModuleLayout {
        layer,
        kind,
        lora_a_shape: a,
        lora_b_shape: b,
        hf_target_keys: kind.hf_names().iter().map(|m| arch.hf_key(layer, m)).collect(),
        hf_target_shapes: targets,
        delta_rule: rule,
    }
}

/// One list of six layouts per layer, in [`ModuleKind::ALL`] order.
pub fn layouts_for(arch: &ArchDescriptor, rank: usize) -> Result<Vec<Vec<ModuleLayout>>> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be positive".into()));
    }
    Ok((0..arch.num_layers)
        .map(|layer| {
            ModuleKind::ALL
                .into_iter()
                .map(|kind| layout_for(arch, layer, kind, rank))
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    HfToTunix,
    TunixToHf,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hf-to-tunix" | "HFToTunix" => Ok(Direction::HfToTunix),
            "tunix-to-hf" | "TunixToHF" => Ok(Direction::TunixToHf),
            other => Err(Error::Invalid(format!(
                "unknown direction {other:?} (expected hf-to-tunix or tunix-to-hf)"
            ))),
        }
    }
}

/// Renames the module segment of a dotted path; everything else, including
/// layer indices, is kept. `kv_einsum` fans out to `k_proj` and `v_proj`.
pub fn map_name(name: &str, direction: Direction) -> Result<Vec<String>> {
    let segments: Vec<&str> = name.split('.').collect();
    let found = segments.iter().enumerate().rev().find_map(|(i, seg)| {
        let kind = match direction {
            Direction::HfToTunix => ModuleKind::from_hf_leaf(seg),
            Direction::TunixToHf => ModuleKind::from_tunix_leaf(seg),
        };
        kind.map(|k| (i, k))
    });
    let Some((pos, kind)) = found else {
        return Err(Error::UnknownModule(name.to_string()));
    };
    let replacements: Vec<&str> = match direction {
        Direction::HfToTunix => vec![kind.tunix_name()],
        Direction::TunixToHf => kind.hf_names().to_vec(),
    };
    Ok(replacements
        .into_iter()
        .map(|leaf| {
            let mut out = segments.clone();
            out[pos] = leaf;
            out.join(".")
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Namespace {
    Tunix,
    Hf,
}

static TUNIX_TARGETS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^.*(q_einsum|kv_einsum|attn_vec_einsum|gate_proj|down_proj|up_proj)").unwrap());

static HF_TARGETS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^.*(q_proj|k_proj|v_proj|o_proj|gate_proj|up_proj|down_proj)").unwrap());

/// Whether `name` is a LoRA target. On the HF side anything under a vision
/// tower is excluded; the JAX model has no vision tower, so no exclusion
/// applies there.
pub fn lora_target_filter(name: &str, namespace: Namespace) -> bool {
    match namespace {
        Namespace::Tunix => TUNIX_TARGETS.is_match(name),
        Namespace::Hf => !name.contains("vision") && HF_TARGETS.is_match(name),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(hidden: usize, heads: usize, kv: usize, hd: usize) -> ArchDescriptor {
        ArchDescriptor {
            hidden_size: hidden,
            num_heads: heads,
            num_kv_heads: kv,
            head_dims: vec![hd],
            num_layers: 2,
            intermediate_size: 3 * hidden,
            key_template: "layers.{layer}.{module}".into(),
        }
    }

    #[test]
    fn kv_layout_has_fused_axis() {
        let a = arch(64, 32, 16, 8);
        let l = layout_for(&a, 0, ModuleKind::KVEinsum, 4);
        assert_eq!(l.lora_b_shape, vec![4, 2, 16, 8]);
        assert_eq!(l.hf_target_keys, vec!["layers.0.k_proj", "layers.0.v_proj"]);
        assert_eq!(l.hf_target_shapes, vec![vec![128, 64], vec![128, 64]]);
    }

    #[test]
    fn mlp_layouts() {
        let a = arch(8, 2, 1, 4);
        let gate = layout_for(&a, 1, ModuleKind::GateProj, 3);
        assert_eq!(
            (gate.lora_a_shape.clone(), gate.lora_b_shape.clone()),
            (vec![8, 3], vec![3, 24])
        );
        assert_eq!(gate.hf_target_shapes, vec![vec![24, 8]]);
        let down = layout_for(&a, 1, ModuleKind::DownProj, 3);
        assert_eq!(
            (down.lora_a_shape.clone(), down.lora_b_shape.clone()),
            (vec![24, 3], vec![3, 8])
        );
        assert_eq!(down.hf_target_shapes, vec![vec![8, 24]]);
    }

    #[test]
    fn minimal_arch_rank_one() {
        let a = ArchDescriptor {
            num_layers: 1,
            intermediate_size: 2,
            ..arch(2, 1, 1, 2)
        };
        let layouts = layouts_for(&a, 1).unwrap();
        assert_eq!(layouts.len(), 1);
        assert_eq!(layouts[0].len(), 6);
        for l in &layouts[0] {
            assert!(l.lora_a_shape.iter().chain(&l.lora_b_shape).all(|&d| d > 0));
            assert_eq!(*l.lora_a_shape.last().unwrap(), 1);
            assert_eq!(l.lora_b_shape[0], 1);
        }
        assert!(layouts_for(&a, 0).is_err());
    }

    #[test]
    fn seven_hf_keys_per_layer() {
        let a = arch(8, 2, 1, 4);
        let layouts = layouts_for(&a, 2).unwrap();
        let keys: Vec<String> = layouts[0].iter().flat_map(|l| l.hf_target_keys.clone()).collect();
        assert_eq!(keys.len(), 7);
        let mut unique = keys.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), 7);
    }

    #[test]
    fn heterogeneous_head_dims_cycle() {
        let a = ArchDescriptor {
            head_dims: vec![4, 4, 8],
            num_layers: 6,
            ..arch(8, 2, 1, 4)
        };
        let dims: Vec<usize> = (0..6).map(|l| a.head_dim(l)).collect();
        assert_eq!(dims, vec![4, 4, 8, 4, 4, 8]);
        assert_eq!(
            layout_for(&a, 2, ModuleKind::QEinsum, 1).hf_target_shapes,
            vec![vec![16, 8]]
        );
    }

    #[test]
    fn key_template_with_block() {
        let a = ArchDescriptor {
            key_template: "model.layers.{layer}.{block}.{module}.weight".into(),
            ..arch(8, 2, 1, 4)
        };
        assert_eq!(a.hf_key(3, "o_proj"), "model.layers.3.self_attn.o_proj.weight");
        assert_eq!(a.hf_key(0, "up_proj"), "model.layers.0.mlp.up_proj.weight");
    }

    #[test]
    fn arch_validation() {
        let mut a = arch(8, 3, 2, 4);
        assert!(a.validate().is_err());
        a.num_heads = 4;
        assert!(a.validate().is_ok());
        a.key_template = "layers.{module}".into();
        assert!(a.validate().is_err());
        assert!(ArchDescriptor::from_json(r#"{"hidden_size": 8}"#).is_err());
    }

    #[test]
    fn name_mapping_examples() {
        assert_eq!(
            map_name("layers.3.q_proj", Direction::HfToTunix).unwrap(),
            vec!["layers.3.q_einsum"]
        );
        assert_eq!(
            map_name("layers.0.kv_einsum", Direction::TunixToHf).unwrap(),
            vec!["layers.0.k_proj", "layers.0.v_proj"]
        );
        for dir in [Direction::HfToTunix, Direction::TunixToHf] {
            assert_eq!(map_name("layers.1.gate_proj", dir).unwrap(), vec!["layers.1.gate_proj"]);
        }
        assert_eq!(
            map_name("layers.2.v_proj", Direction::HfToTunix).unwrap(),
            vec!["layers.2.kv_einsum"]
        );
        assert_eq!(
            map_name("layers.2.attn_vec_einsum", Direction::TunixToHf).unwrap(),
            vec!["layers.2.o_proj"]
        );
        assert!(matches!(
            map_name("embedder", Direction::HfToTunix),
            Err(Error::UnknownModule(_))
        ));
        assert!(map_name("layers.0.q_einsum", Direction::HfToTunix).is_err());
    }

    #[test]
    fn name_mapping_round_trip() {
        for m in [
            "q_proj",
            "k_proj",
            "v_proj",
            "o_proj",
            "gate_proj",
            "up_proj",
            "down_proj",
        ] {
            let name = format!("model.layers.5.{m}.weight");
            let mut back = Vec::new();
            for t in map_name(&name, Direction::HfToTunix).unwrap() {
                back.extend(map_name(&t, Direction::TunixToHf).unwrap());
            }
            assert!(back.contains(&name), "{name} -> {back:?}");
        }
    }

    #[test]
    fn target_filter() {
        assert!(lora_target_filter("layers.2.kv_einsum", Namespace::Tunix));
        assert!(!lora_target_filter("embedder", Namespace::Tunix));
        assert!(!lora_target_filter("vision_tower.q_proj", Namespace::Hf));
        assert!(lora_target_filter(
            "model.layers.0.self_attn.q_proj.weight",
            Namespace::Hf
        ));
        assert!(lora_target_filter("vision_tower.q_einsum", Namespace::Tunix));
        assert!(!lora_target_filter("final_norm", Namespace::Hf));
    }
}
