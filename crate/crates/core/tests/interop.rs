//! Files written here are read by the reference `safetensors` crate and vice
//! versa.

use std::collections::HashMap;

use ckpt_bridge::safetensors::SafetensorsFile;
use ckpt_bridge::{DType, Tensor};
use proptest::prelude::*;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

fn their_dtype(d: DType) -> Dtype {
    match d {
        DType::F32 => Dtype::F32,
        DType::F16 => Dtype::F16,
        DType::BF16 => Dtype::BF16,
    }
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    (
        prop_oneof![Just(DType::F32), Just(DType::F16), Just(DType::BF16)],
        prop::collection::vec(0usize..4, 0..3),
    )
        .prop_flat_map(|(dtype, shape)| {
            let bytes = shape.iter().product::<usize>() * dtype.size();
            prop::collection::vec(any::<u8>(), bytes)
                .prop_map(move |data| Tensor::new(dtype, shape.clone(), data).unwrap())
        })
}

fn file_strategy() -> impl Strategy<Value = SafetensorsFile> {
    (
        prop::collection::btree_map("[a-z]{1,6}(\\.[a-z0-9_]{1,6}){0,2}", tensor_strategy(), 0..12),
        prop::option::of(prop::collection::btree_map("[a-z_]{1,8}", ".{0,12}", 0..4)),
    )
        .prop_map(|(tensors, metadata)| SafetensorsFile::from_tensors(metadata, tensors).unwrap())
}

proptest! {
    #[test]
    fn reference_reader_accepts_our_files(file in file_strategy()) {
        let bytes = file.to_bytes().unwrap();
        let theirs = SafeTensors::deserialize(&bytes).unwrap();
        prop_assert_eq!(theirs.len(), file.len());
        for entry in file.entries() {
            let view = theirs.tensor(&entry.name).unwrap();
            prop_assert_eq!(view.dtype(), their_dtype(entry.dtype));
            prop_assert_eq!(view.shape(), entry.shape.as_slice());
            prop_assert_eq!(view.data(), file.tensor_bytes(&entry.name).unwrap());
        }
        let (_, meta) = SafeTensors::read_metadata(&bytes).unwrap();
        let ours: Option<HashMap<String, String>> = file.metadata().map(|m| m.clone().into_iter().collect());
        prop_assert_eq!(meta.metadata(), &ours);
    }

    #[test]
    fn we_read_reference_files(file in file_strategy()) {
        // safetensors 0.8 emits `{},"__metadata__":{...}}` for this case
        prop_assume!(!(file.is_empty() && file.metadata().is_some()));
        let views: Vec<(String, TensorView<'_>)> = file
            .entries()
            .map(|e| {
                let data = file.tensor_bytes(&e.name).unwrap();
                (e.name.clone(), TensorView::new(their_dtype(e.dtype), e.shape.clone(), data).unwrap())
            })
            .collect();
        let meta = file.metadata().map(|m| m.clone().into_iter().collect());
        let bytes = safetensors::serialize(views, meta).unwrap();
        // their layout orders by alignment and pads the header; ours is canonical
        let parsed = SafetensorsFile::parse(bytes).unwrap();
        prop_assert_eq!(parsed.metadata(), file.metadata());
        for entry in file.entries() {
            prop_assert_eq!(parsed.tensor(&entry.name).unwrap(), file.tensor(&entry.name).unwrap());
        }
        prop_assert_eq!(parsed.to_bytes().unwrap(), file.to_bytes().unwrap());
    }
}
