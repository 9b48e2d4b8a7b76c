use std::collections::BTreeMap;

use ckpt_bridge::layout::{layouts_for, ModuleKind};
use ckpt_bridge::safetensors::{read_file, write_file};
use ckpt_bridge::{load_lora_factors, merge, ArchDescriptor, DType, MergeConfig, SafetensorsFile, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn toy() -> ArchDescriptor {
    ArchDescriptor::from_json(
        r#"{"hidden_size": 8, "num_heads": 2, "num_kv_heads": 1, "head_dims": [4],
            "num_layers": 2, "intermediate_size": 16,
            "key_template": "model.layers.{layer}.{block}.{module}.weight"}"#,
    )
    .unwrap()
}

fn random(rng: &mut StdRng, dtype: DType, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ckpt_bridge::tensor::convert(&Tensor::from_f32(shape.to_vec(), &values).unwrap(), dtype)
}

fn bf16_value(t: &Tensor, i: usize) -> f64 {
    half::bf16::from_le_bytes([t.bytes()[2 * i], t.bytes()[2 * i + 1]]).to_f64()
}

fn f32_value(t: &Tensor, i: usize) -> f64 {
    f32::from_le_bytes(t.bytes()[4 * i..4 * i + 4].try_into().unwrap()) as f64
}

#[test]
fn toy_checkpoint_through_files() {
    let arch = toy();
    let rank = 2;
    let alpha = 16.0;
    let mut rng = StdRng::seed_from_u64(7);
    let dir = tempfile::tempdir().unwrap();

    let mut base = Vec::new();
    let mut lora = Vec::new();
    for layer_layouts in layouts_for(&arch, rank).unwrap() {
        for l in layer_layouts {
            for (key, shape) in l.hf_target_keys.iter().zip(&l.hf_target_shapes) {
                base.push((key.clone(), random(&mut rng, DType::BF16, shape)));
            }
            let module = format!("layers.{}.{}", l.layer, l.kind.tunix_name());
            lora.push((
                format!("{module}.lora_a"),
                random(&mut rng, DType::F32, &l.lora_a_shape),
            ));
            lora.push((
                format!("{module}.lora_b"),
                random(&mut rng, DType::F32, &l.lora_b_shape),
            ));
        }
    }
    let base_path = dir.path().join("base.safetensors");
    let lora_path = dir.path().join("lora.safetensors");
    let mut meta = BTreeMap::new();
    meta.insert("format".to_string(), "pt".to_string());
    write_file(&SafetensorsFile::from_tensors(Some(meta), base).unwrap(), &base_path).unwrap();
    write_file(&SafetensorsFile::from_tensors(None, lora).unwrap(), &lora_path).unwrap();

    let base = read_file(&base_path).unwrap();
    let pairs = load_lora_factors(&read_file(&lora_path).unwrap(), &arch).unwrap();
    assert_eq!(pairs.len(), 12);
    for kind in ModuleKind::ALL {
        assert_eq!(pairs.iter().filter(|p| p.kind == kind).count(), 2, "{kind:?}");
    }

    let merged = merge(&base, &pairs, &MergeConfig::new(alpha, rank), &arch).unwrap();
    let out_path = dir.path().join("merged.safetensors");
    write_file(&merged, &out_path).unwrap();
    let merged = read_file(&out_path).unwrap();
    assert_eq!(merged.metadata().unwrap()["format"], "pt");
    for layer in 0..2 {
        for m in [
            "q_proj",
            "k_proj",
            "v_proj",
            "o_proj",
            "gate_proj",
            "up_proj",
            "down_proj",
        ] {
            assert!(merged.contains(&arch.hf_key(layer, m)), "{m} missing in layer {layer}");
        }
    }

    // W + (alpha/r) * (A B)^T for the layer-1 up projection, by hand
    let pair = pairs
        .iter()
        .find(|p| p.layer == 1 && p.kind == ModuleKind::UpProj)
        .unwrap();
    let key = arch.hf_key(1, "up_proj");
    let w = base.tensor(&key).unwrap();
    let got = merged.tensor(&key).unwrap();
    for j in 0..16 {
        for i in 0..8 {
            let delta: f64 = (0..rank)
                .map(|k| f32_value(&pair.a, i * rank + k) * f32_value(&pair.b, k * 16 + j))
                .sum();
            let exact = bf16_value(&w, j * 8 + i) + alpha / rank as f64 * delta;
            let value = bf16_value(&got, j * 8 + i);
            let spacing = 2f64.powi(exact.abs().log2().floor().max(-126.0) as i32 - 7);
            assert!((value - exact).abs() <= spacing, "[{j},{i}] {value} vs {exact}");
        }
    }
}
