//! Dense row-major tensors and named parameter sets.
//!
//! Everything is a flat buffer plus a shape. Shapes are checked loudly on
//! every operation; there is no broadcasting beyond bias-add over rows (which
//! lives in the autodiff graph). Checkpoints are JSON documents of named
//! parameter records that round-trip f64 values bit-exactly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); numel] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Build an `n x d` matrix from row slices; all rows must share a length.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::shape(format!(
                    "row {} has length {}, expected {}",
                    i,
                    r.len(),
                    d
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n, d], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if !self.is_scalar() {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn as_matrix(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn row(&self, i: usize) -> &[F] {
        let cols = *self.shape.last().expect("row() on rank-0 tensor");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = self.as_matrix()?;
        let (k2, n) = other.as_matrix()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: {}x{} . {}x{}",
                m, k, k2, n
            )));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        F::gemm(
            m,
            k,
            n,
            F::one(),
            &self.data,
            k as isize,
            1,
            &other.data,
            n as isize,
            1,
            F::zero(),
            &mut out.data,
        );
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Tensor<F>> {
        let (r, c) = self.as_matrix()?;
        let mut out = Tensor::zeros(vec![c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_with(other, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_with(other, |a, b| a - b, "sub")
    }

    pub fn scale(&self, s: F) -> Tensor<F> {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_with(&self, other: &Tensor<F>, f: impl Fn(F, F) -> F, what: &str) -> Result<Tensor<F>> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{}: {:?} vs {:?}",
                what, self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    /// Mean of each column: `r x c -> vector[c]`. Errors on zero rows.
    pub fn mean_rows(&self) -> Result<Vec<F>> {
        let (r, c) = self.as_matrix()?;
        if r == 0 {
            return Err(Error::contract("mean_rows of an empty matrix"));
        }
        let inv = F::one() / F::from_usize(r).unwrap();
        let mut out = vec![F::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] = out[j] + self.data[i * c + j];
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        Ok(out)
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { step: 0, msg: format!("non-finite value in {}", context) });
        }
        Ok(())
    }
}

/// Named parameter leaves with gradient slots, in a stable order.
///
/// Optimizer state and checkpoints are aligned by this order; names exist for
/// checkpoint readability and load-time validation.
#[derive(Debug, Clone)]
pub struct Params<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Params<F> {
    pub fn new() -> Self {
        Params { names: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<F>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(None);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Tensor<F> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Gradient slot; `None` means no gradient has been written (treated as zero).
    pub fn grad(&self, i: usize) -> Option<&Tensor<F>> {
        self.grads[i].as_ref()
    }

    pub fn set_grad(&mut self, i: usize, g: Tensor<F>) -> Result<()> {
        if g.shape() != self.values[i].shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} for parameter '{}' of shape {:?}",
                g.shape(),
                self.names[i],
                self.values[i].shape()
            )));
        }
        self.grads[i] = Some(g);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }
}

impl<F: Scalar> Default for Params<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Write a checkpoint. The JSON encoder emits shortest round-trip decimal
/// forms, so reloading reproduces every f64 bit-exactly.
pub fn save_params(params: &Params<f64>, path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<ParamRecord> = (0..params.len())
        .map(|i| ParamRecord {
            name: params.name(i).to_string(),
            shape: params.value(i).shape().to_vec(),
            values: params.value(i).data().to_vec(),
        })
        .collect();
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &records)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<Params<f64>> {
    let file = std::fs::File::open(path)?;
    let records: Vec<ParamRecord> = serde_json::from_reader(std::io::BufReader::new(file))?;
    let mut params = Params::new();
    for rec in records {
        let tensor = Tensor::new(rec.shape, rec.values)?;
        params.push(rec.name, tensor);
    }
    Ok(params)
}

/// Load a checkpoint into an existing layout; names and shapes must match.
pub fn load_params_into(params: &mut Params<f64>, path: impl AsRef<Path>) -> Result<()> {
    let loaded = load_params(path)?;
    if loaded.len() != params.len() {
        return Err(Error::config(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            params.len()
        )));
    }
    for i in 0..params.len() {
        if loaded.name(i) != params.name(i) || loaded.value(i).shape() != params.value(i).shape() {
            return Err(Error::config(format!(
                "checkpoint parameter {} is '{}' {:?}, model expects '{}' {:?}",
                i,
                loaded.name(i),
                loaded.value(i).shape(),
                params.name(i),
                params.value(i).shape()
            )));
        }
        *params.value_mut(i) = loaded.value(i).clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_shape() {
        assert!(Tensor::new(vec![2, 3], vec![1.0f64; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![1.0f64; 6]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::<f64>::identity(2);
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = i2.matmul(&a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2]] . [[3],[4]] = [[11]]
        let a = Tensor::matrix(1, 2, vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_f32_instantiation() {
        let a = Tensor::matrix(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::identity(2);
        assert_eq!(a.matmul(&b).unwrap().data(), a.data());
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut params = Params::new();
        // Awkward values: subnormal-ish, tiny, negative zero, long mantissas.
        params.push(
            "w0",
            Tensor::new(vec![2, 2], vec![0.1, -0.0, 1.0 / 3.0, 2.2250738585072014e-308]).unwrap(),
        );
        params.push("b0", Tensor::vector(vec![std::f64::consts::PI, 1e300]));
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.len(), params.len());
        for i in 0..params.len() {
            assert_eq!(loaded.name(i), params.name(i));
            assert_eq!(loaded.value(i).shape(), params.value(i).shape());
            let a: Vec<u64> = params.value(i).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = loaded.value(i).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "bit-exact round trip for {}", params.name(i));
        }
    }

    #[test]
    fn load_into_validates_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut params = Params::new();
        params.push("w", Tensor::<f64>::zeros(vec![2, 2]));
        save_params(&params, &path).unwrap();

        let mut other = Params::new();
        other.push("w", Tensor::<f64>::zeros(vec![3, 2]));
        assert!(load_params_into(&mut other, &path).is_err());
    }
}
