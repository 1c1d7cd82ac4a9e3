//! Dense row-major tensor value type plus the raw-blob serialization shared
//! by datasets and checkpoints.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// n-dimensional real array. `grad`, when present, always matches `data` in
/// length; `requires_grad` marks the tensor as a differentiation leaf when it
/// is placed on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    pub requires_grad: bool,
    pub grad: Option<Vec<E>>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![E::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| E::of_f64(v)).collect())
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Gradient buffer, allocating zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [E] {
        if self.grad.is_none() {
            self.grad = Some(vec![E::zero(); self.data.len()]);
        }
        self.grad.as_mut().unwrap().as_mut_slice()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(E::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

/// Sidecar manifest for a raw tensor blob.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BlobManifest {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

/// Write `tensor` as a little-endian raw value blob at `path` with a JSON
/// sidecar manifest at `path` + ".json".
pub fn write_blob<E: Scalar>(path: &Path, name: &str, tensor: &Tensor<E>) -> Result<()> {
    let mut bytes = Vec::with_capacity(tensor.numel() * E::DTYPE.byte_width());
    for &v in &tensor.data {
        v.write_le(&mut bytes);
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let manifest = BlobManifest {
        name: name.to_string(),
        dtype: E::DTYPE,
        shape: tensor.shape.clone(),
    };
    let sidecar = path.with_extension(format!(
        "{}json",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    fs::write(&sidecar, text).map_err(|e| Error::io(sidecar, e))?;
    Ok(())
}

/// Read a raw blob written by [`write_blob`]. The stored dtype must match `E`.
pub fn read_blob<E: Scalar>(path: &Path) -> Result<(String, Tensor<E>)> {
    let sidecar = path.with_extension(format!(
        "{}json",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let manifest: BlobManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("manifest decode {}: {e}", sidecar.display())))?;
    if manifest.dtype != E::DTYPE {
        return Err(Error::Checkpoint(format!(
            "blob {} holds {} but {} was requested",
            path.display(),
            manifest.dtype,
            E::DTYPE
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let width = E::DTYPE.byte_width();
    let expect = numel(&manifest.shape) * width;
    if bytes.len() != expect {
        return Err(Error::Checkpoint(format!(
            "blob {} holds {} bytes, manifest shape {:?} needs {}",
            path.display(),
            bytes.len(),
            manifest.shape,
            expect
        )));
    }
    let data = bytes.chunks_exact(width).map(E::read_le).collect();
    Ok((manifest.name, Tensor::new(manifest.shape, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn blob_round_trip() {
        let dir = std::env::temp_dir().join(format!("blob_rt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let t = Tensor::<f32>::from_f64(vec![2, 2], &[1.0, -2.5, 3.25, 0.0]).unwrap();
        let path = dir.join("t.bin");
        write_blob(&path, "t", &t).unwrap();
        let (name, back) = read_blob::<f32>(&path).unwrap();
        assert_eq!(name, "t");
        assert_eq!(back.shape, t.shape);
        assert_eq!(back.data, t.data);
        // Requesting the wrong dtype is rejected.
        assert!(read_blob::<f64>(&path).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
