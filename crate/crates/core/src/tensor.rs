//! Dense tensors and the handful of kernels the merge needs.
//!
//! [`Tensor`] is the storage type: a dtype tag, a shape and a little-endian
//! row-major byte payload, i.e. exactly what a safetensors entry holds.
//! [`Array`] is the arithmetic type: a typed row-major buffer that the layout
//! kernels and [`Array::matmul`] operate on. Widening a tensor into an array
//! is always exact; narrowing rounds once, to nearest-even.

use std::fmt;
use std::ops::{Add, Mul};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub const fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F32" | "f32" => Ok(DType::F32),
            "F16" | "f16" => Ok(DType::F16),
            "BF16" | "bf16" => Ok(DType::BF16),
            other => Err(Error::UnsupportedDType(other.to_string())),
        }
    }
}

pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Element types the kernels can accumulate in.
pub trait Scalar: Copy + Default + PartialEq + fmt::Debug + Add<Output = Self> + Mul<Output = Self> {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Typed, row-major n-dimensional buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy> Array<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if element_count(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} elements, buffer has {}",
                element_count(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let data = vec![value; element_count(&shape)];
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U, F: FnMut(T) -> U>(&self, f: F) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Replaces the shape; the buffer is untouched.
    pub fn reshape(self, new_shape: &[usize]) -> Result<Self> {
        check_reshape(&self.shape, new_shape)?;
        Ok(Self {
            shape: new_shape.to_vec(),
            data: self.data,
        })
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let (rows, cols) = rank2(&self.shape)?;
        let data = transpose_order(rows, cols).map(|i| self.data[i]).collect();
        Ok(Self {
            shape: vec![cols, rows],
            data,
        })
    }

    /// Fixes `axis` at `index` and drops that axis.
    pub fn slice_axis(&self, axis: usize, index: usize) -> Result<Self> {
        let plan = SlicePlan::new(&self.shape, axis, index)?;
        let mut data = Vec::with_capacity(plan.outer * plan.inner);
        for start in plan.starts() {
            data.extend_from_slice(&self.data[start..start + plan.inner]);
        }
        Ok(Self {
            shape: plan.out_shape,
            data,
        })
    }
}

impl<T: Scalar> Array<T> {
    /// `(m,k) x (k,n) -> (m,n)`, accumulating in `T` with `k` innermost and
    /// ascending.
    pub fn matmul(&self, rhs: &Array<T>) -> Result<Array<T>> {
        let (m, k) = rank2(&self.shape)?;
        let (k2, n) = rank2(&rhs.shape)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![T::default(); m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let mut acc = T::default();
                for (p, &a) in row.iter().enumerate() {
                    acc = acc + a * rhs.data[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Array {
            shape: vec![m, n],
            data: out,
        })
    }
}

fn rank2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape(format!("expected a rank-2 tensor, got shape {shape:?}"))),
    }
}

fn check_reshape(from: &[usize], to: &[usize]) -> Result<()> {
    if element_count(from) != element_count(to) {
        return Err(Error::Shape(format!(
            "cannot reshape {from:?} ({} elements) into {to:?} ({} elements)",
            element_count(from),
            element_count(to)
        )));
    }
    Ok(())
}

// Source index of each destination element of a (rows, cols) transpose.
fn transpose_order(rows: usize, cols: usize) -> impl Iterator<Item = usize> {
    (0..cols).flat_map(move |j| (0..rows).map(move |i| i * cols + j))
}

struct SlicePlan {
    outer: usize,
    inner: usize,
    dim: usize,
    index: usize,
    out_shape: Vec<usize>,
}

impl SlicePlan {
    fn new(shape: &[usize], axis: usize, index: usize) -> Result<Self> {
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::AxisRange {
                axis,
                index,
                shape: shape.to_vec(),
            });
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok(Self {
            outer: element_count(&shape[..axis]),
            inner: element_count(&shape[axis + 1..]),
            dim: shape[axis],
            index,
            out_shape,
        })
    }

    fn starts(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.outer).map(move |o| (o * self.dim + self.index) * self.inner)
    }
}

/// Dtype-tagged tensor with a raw little-endian payload.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &self.dtype)
            .field("shape", &self.shape)
            .field("bytes", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected = element_count(&shape) * dtype.size();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{dtype} tensor of shape {shape:?} needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Self {
        let data = vec![0u8; element_count(&shape) * dtype.size()];
        Self { dtype, shape, data }
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        Self::from_array_f32(&Array::new(shape, values.to_vec())?, DType::F32)
    }

    /// Rounds each element once to `dtype`.
    pub fn from_array_f32(array: &Array<f32>, dtype: DType) -> Result<Self> {
        let mut data = Vec::with_capacity(array.data.len() * dtype.size());
        for &v in &array.data {
            encode_f32(dtype, v, &mut data);
        }
        Self::new(dtype, array.shape.clone(), data)
    }

    /// Rounds each element once to `dtype`; no intermediate `f32` step.
    pub fn from_array_f64(array: &Array<f64>, dtype: DType) -> Result<Self> {
        let mut data = Vec::with_capacity(array.data.len() * dtype.size());
        for &v in &array.data {
            encode_f64(dtype, v, &mut data);
        }
        Self::new(dtype, array.shape.clone(), data)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    pub fn element_count(&self) -> usize {
        element_count(&self.shape)
    }

    pub fn to_f32(&self) -> Array<f32> {
        let data = (0..self.element_count())
            .map(|i| decode_f32(self.dtype, &self.data, i))
            .collect();
        Array {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn to_f64(&self) -> Array<f64> {
        let data = (0..self.element_count())
            .map(|i| decode_f64(self.dtype, &self.data, i))
            .collect();
        Array {
            shape: self.shape.clone(),
            data,
        }
    }

    fn element_bytes(&self, i: usize) -> &[u8] {
        let size = self.dtype.size();
        &self.data[i * size..(i + 1) * size]
    }
}

fn decode_f32(dtype: DType, bytes: &[u8], i: usize) -> f32 {
    match dtype {
        DType::F32 => f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()),
        DType::BF16 => numeric::bf16_to_f32(u16::from_le_bytes([bytes[i * 2], bytes[i * 2 + 1]])),
        DType::F16 => numeric::f16_to_f64(u16::from_le_bytes([bytes[i * 2], bytes[i * 2 + 1]])) as f32,
    }
}

fn decode_f64(dtype: DType, bytes: &[u8], i: usize) -> f64 {
    match dtype {
        DType::F16 => numeric::f16_to_f64(u16::from_le_bytes([bytes[i * 2], bytes[i * 2 + 1]])),
        _ => decode_f32(dtype, bytes, i) as f64,
    }
}

fn encode_f32(dtype: DType, value: f32, out: &mut Vec<u8>) {
    match dtype {
        DType::F32 => out.extend_from_slice(&value.to_le_bytes()),
        DType::BF16 => out.extend_from_slice(&numeric::f32_to_bf16(value).to_le_bytes()),
        DType::F16 => out.extend_from_slice(&numeric::f32_to_f16(value).to_le_bytes()),
    }
}

fn encode_f64(dtype: DType, value: f64, out: &mut Vec<u8>) {
    match dtype {
        DType::F32 => out.extend_from_slice(&(value as f32).to_le_bytes()),
        DType::BF16 => out.extend_from_slice(&numeric::f64_to_bf16(value).to_le_bytes()),
        DType::F16 => out.extend_from_slice(&numeric::f64_to_f16(value).to_le_bytes()),
    }
}

/// Converts to `target`. Widening is exact; narrowing rounds to nearest-even.
pub fn convert(t: &Tensor, target: DType) -> Tensor {
    if t.dtype == target {
        return t.clone();
    }
    let mut data = Vec::with_capacity(t.element_count() * target.size());
    match (t.dtype, target) {
        (DType::BF16, DType::F32) | (DType::F32, DType::BF16) => {
            for i in 0..t.element_count() {
                encode_f32(target, decode_f32(t.dtype, &t.data, i), &mut data);
            }
        }
        _ => {
            for i in 0..t.element_count() {
                encode_f64(target, decode_f64(t.dtype, &t.data, i), &mut data);
            }
        }
    }
    Tensor {
        dtype: target,
        shape: t.shape.clone(),
        data,
    }
}

/// Rank-2 product of two `F32` tensors with `f32` accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    for t in [a, b] {
        if t.dtype != DType::F32 {
            return Err(Error::DType {
                expected: DType::F32,
                found: t.dtype,
            });
        }
    }
    let product = a.to_f32().matmul(&b.to_f32())?;
    Tensor::from_array_f32(&product, DType::F32)
}

pub fn transpose2d(t: &Tensor) -> Result<Tensor> {
    let (rows, cols) = rank2(&t.shape)?;
    let mut data = Vec::with_capacity(t.data.len());
    for i in transpose_order(rows, cols) {
        data.extend_from_slice(t.element_bytes(i));
    }
    Ok(Tensor {
        dtype: t.dtype,
        shape: vec![cols, rows],
        data,
    })
}

pub fn reshape(t: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
    check_reshape(&t.shape, new_shape)?;
    Ok(Tensor {
        dtype: t.dtype,
        shape: new_shape.to_vec(),
        data: t.data.clone(),
    })
}

pub fn slice_axis(t: &Tensor, axis: usize, index: usize) -> Result<Tensor> {
    let plan = SlicePlan::new(&t.shape, axis, index)?;
    let size = t.dtype.size();
    let mut data = Vec::with_capacity(plan.outer * plan.inner * size);
    for start in plan.starts() {
        data.extend_from_slice(&t.data[start * size..(start + plan.inner) * size]);
    }
    Ok(Tensor {
        dtype: t.dtype,
        shape: plan.out_shape,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_two_by_two() {
        let a = Tensor::from_f32(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_f32(vec![2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.to_f32().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity() {
        let x: Vec<f32> = (0..12).map(|i| (i as f32) * 0.37 - 2.0).collect();
        let eye = Tensor::from_f32(vec![3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let xt = Tensor::from_f32(vec![3, 4], &x).unwrap();
        assert_eq!(matmul(&eye, &xt).unwrap(), xt);
    }

    #[test]
    fn matmul_empty_contraction() {
        let a = Tensor::from_f32(vec![3, 0], &[]).unwrap();
        let b = Tensor::from_f32(vec![0, 2], &[]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert!(c.to_f32().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_bad_shapes_and_dtypes() {
        let a = Tensor::from_f32(vec![2, 3], &[0.0; 6]).unwrap();
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
        let h = convert(&a, DType::BF16);
        assert!(matches!(matmul(&h, &a), Err(Error::DType { .. })));
    }

    #[test]
    fn transpose_small() {
        let t = Tensor::from_f32(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let tt = transpose2d(&t).unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.to_f32().data(), &[1., 4., 2., 5., 3., 6.]);
        let sym = Tensor::from_f32(vec![2, 2], &[1., 7., 7., 3.]).unwrap();
        assert_eq!(transpose2d(&sym).unwrap(), sym);
        assert!(transpose2d(&Tensor::zeros(DType::F32, vec![2, 2, 2])).is_err());
    }

    #[test]
    fn reshape_round_trip_and_mismatch() {
        let t = Tensor::from_f32(vec![6], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let r = reshape(&t, &[2, 3]).unwrap();
        assert_eq!(r.shape(), &[2, 3]);
        assert_eq!(reshape(&r, &[6]).unwrap(), t);
        assert!(matches!(reshape(&t, &[4]), Err(Error::Shape(_))));
    }

    #[test]
    fn reshape_flattens_head_axes() {
        let (r, heads, hd) = (2, 3, 4);
        let t = Tensor::zeros(DType::BF16, vec![r, heads, hd]);
        assert_eq!(reshape(&t, &[r, heads * hd]).unwrap().shape(), &[2, 12]);
    }

    #[test]
    fn slice_kv_factor() {
        let (r, kv, hd) = (2, 3, 2);
        let values: Vec<f32> = (0..(r * 2 * kv * hd)).map(|i| i as f32).collect();
        let b = Tensor::from_f32(vec![r, 2, kv, hd], &values).unwrap();
        let k = slice_axis(&b, 1, 0).unwrap().to_f32();
        let v = slice_axis(&b, 1, 1).unwrap().to_f32();
        assert_eq!(k.shape(), &[r, kv, hd]);
        for ri in 0..r {
            for h in 0..kv {
                for d in 0..hd {
                    let src = |s: usize| values[((ri * 2 + s) * kv + h) * hd + d];
                    assert_eq!(k.data()[(ri * kv + h) * hd + d], src(0));
                    assert_eq!(v.data()[(ri * kv + h) * hd + d], src(1));
                }
            }
        }
    }

    #[test]
    fn slice_rank1_to_scalar() {
        let t = Tensor::from_f32(vec![3], &[4., 5., 6.]).unwrap();
        let s = slice_axis(&t, 0, 2).unwrap();
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.to_f32().data(), &[6.0]);
        assert!(slice_axis(&t, 0, 3).is_err());
        assert!(slice_axis(&t, 1, 0).is_err());
    }

    #[test]
    fn convert_one_through_bf16() {
        let t = Tensor::from_f32(vec![1], &[1.0]).unwrap();
        let h = convert(&t, DType::BF16);
        assert_eq!(h.bytes(), &0x3f80u16.to_le_bytes());
        assert_eq!(convert(&h, DType::F32), t);
    }

    #[test]
    fn bf16_f32_bf16_identity_all_patterns() {
        let data: Vec<u8> = (0..=u16::MAX).flat_map(|b| b.to_le_bytes()).collect();
        let t = Tensor::new(DType::BF16, vec![65536], data).unwrap();
        let back = convert(&convert(&t, DType::F32), DType::BF16);
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn matmul_matches_naive(m in 0usize..16, k in 0usize..16, n in 0usize..16, seed in any::<u64>()) {
            let mut s = seed | 1;
            let mut next = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; ((s >> 40) as f32 / (1u64 << 24) as f32) * 4.0 - 2.0 };
            let a: Vec<f32> = (0..m * k).map(|_| next()).collect();
            let b: Vec<f32> = (0..k * n).map(|_| next()).collect();
            let got = matmul(&Tensor::from_f32(vec![m, k], &a).unwrap(), &Tensor::from_f32(vec![k, n], &b).unwrap()).unwrap();
            let want = naive_matmul(&a, &b, m, k, n);
            prop_assert_eq!(got.to_f32().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            want.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn double_transpose_is_identity(rows in 0usize..9, cols in 0usize..9, seed in any::<u32>()) {
            let values: Vec<f32> = (0..rows * cols).map(|i| f32::from_bits(seed.wrapping_mul(i as u32 + 1) & 0x7f7f_ffff)).collect();
            let t = Tensor::from_f32(vec![rows, cols], &values).unwrap();
            prop_assert_eq!(transpose2d(&transpose2d(&t).unwrap()).unwrap(), t);
        }

        #[test]
        fn slice_keeps_selected_bytes(shape in proptest::collection::vec(1usize..4, 1..4), pick in any::<proptest::sample::Index>()) {
            let n = element_count(&shape);
            let t = Tensor::new(DType::BF16, shape.clone(), (0..n * 2).map(|i| i as u8).collect()).unwrap();
            let axis = pick.index(shape.len());
            let parts: usize = (0..shape[axis]).map(|i| slice_axis(&t, axis, i).unwrap().bytes().len()).sum();
            prop_assert_eq!(parts, t.bytes().len());
        }
    }
}
