//! Binary parameter checkpoints.
//!
//! Layout: the 8-byte magic `APFTNSR1`, a u32 tensor count, then per
//! tensor a u32 name length, the UTF-8 name, u32 rows, u32 cols, and
//! the row-major f64 little-endian values. Everything is fixed-width
//! and explicit, so a checkpoint written anywhere loads identically
//! everywhere.
//!
//! Models are stored as their named parameter tensors; scalars that
//! must travel with them (the spectral bound an encoder was trained
//! under) ride along as reserved 1x1 tensors under a `meta.` name.

use crate::diff::ParamTensor;
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, FinetuneModel};
use crate::pretrain::{PretrainConfig, PretrainModel};
use crate::scalar::Scalar;
use crate::{Mat, Real};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"APFTNSR1";

/// Reserved tensor name for the spectral bound the encoder was trained
/// with; fine-tuning must rescale the Laplacian identically.
pub const SPECTRAL_BOUND_TENSOR: &str = "meta.spectral_bound";

fn file_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::BundleFormat {
        file: path.display().to_string(),
        line: 0,
        msg: msg.into(),
    }
}

fn push_len(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::InvalidConfig(format!("checkpoint {what} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Writes named tensors in declaration order.
pub fn save_tensors(path: &Path, tensors: &[(&str, &Mat<Real>)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_len(&mut out, tensors.len(), "tensor count")?;
    for (name, mat) in tensors {
        if let Some(v) = mat.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                context: format!("checkpoint tensor `{name}` contains {v}"),
            });
        }
        push_len(&mut out, name.len(), "name length")?;
        out.extend_from_slice(name.as_bytes());
        push_len(&mut out, mat.nrows(), "row count")?;
        push_len(&mut out, mat.ncols(), "column count")?;
        for v in mat.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(file_err(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        };
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

/// Reads every tensor of a checkpoint, in file order.
pub fn load_tensors(path: &Path) -> Result<Vec<(String, Mat<Real>)>> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(file_err(path, "bad magic; not a checkpoint file"));
    }
    let count = r.u32("tensor count")?;
    let mut tensors: Vec<(String, Mat<Real>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| file_err(path, format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(file_err(path, format!("duplicate tensor `{name}`")));
        }
        let rows = r.u32("row count")?;
        let cols = r.u32("column count")?;
        let data = r.take(rows * cols * 8, &format!("values of `{name}`"))?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(file_err(path, format!("tensor `{name}` contains {v}")));
        }
        let mat = Mat::from_shape_vec((rows, cols), values)
            .map_err(|e| file_err(path, format!("tensor `{name}`: {e}")))?;
        tensors.push((name, mat));
    }
    if r.pos != bytes.len() {
        return Err(file_err(
            path,
            format!("{} trailing bytes after the last tensor", bytes.len() - r.pos),
        ));
    }
    Ok(tensors)
}

/// Copies loaded tensors into a model's parameters by name. Every
/// parameter must be present with its exact shape, and every tensor
/// must be consumed; extras and leftovers both fail.
pub fn restore_params<S: Scalar>(
    params: Vec<&mut ParamTensor<S>>,
    tensors: &[(String, Mat<Real>)],
    path: &Path,
) -> Result<()> {
    let mut used = vec![false; tensors.len()];
    for p in params {
        let Some(idx) = tensors.iter().position(|(n, _)| *n == p.name) else {
            return Err(file_err(path, format!("missing tensor `{}`", p.name)));
        };
        used[idx] = true;
        let value = &tensors[idx].1;
        if value.dim() != p.value.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?} for tensor `{}`", p.value.dim(), p.name),
                got: format!("{:?}", value.dim()),
            });
        }
        p.value = value.mapv(S::of);
    }
    if let Some(idx) = used.iter().position(|&u| !u) {
        return Err(file_err(
            path,
            format!("unexpected tensor `{}`", tensors[idx].0),
        ));
    }
    Ok(())
}

/// Saves a pretrained model with the spectral bound it must be applied
/// under.
pub fn save_pretrained<S: Scalar>(
    path: &Path,
    model: &PretrainModel<S>,
    spectral_bound: f64,
) -> Result<()> {
    let bound = Mat::<Real>::from_elem((1, 1), spectral_bound);
    let values: Vec<(String, Mat<Real>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.mapv(|v| v.as_f64())))
        .collect();
    let mut refs: Vec<(&str, &Mat<Real>)> =
        values.iter().map(|(n, m)| (n.as_str(), m)).collect();
    refs.push((SPECTRAL_BOUND_TENSOR, &bound));
    save_tensors(path, &refs)
}

/// Rebuilds a pretrained model from its checkpoint. The configuration
/// must match the one it was trained with, since it fixes every
/// parameter shape.
pub fn load_pretrained<S: Scalar>(
    path: &Path,
    input_dim: usize,
    cfg: &PretrainConfig,
) -> Result<(PretrainModel<S>, f64)> {
    let mut tensors = load_tensors(path)?;
    let Some(idx) = tensors
        .iter()
        .position(|(n, _)| n == SPECTRAL_BOUND_TENSOR)
    else {
        return Err(file_err(path, format!("missing tensor `{SPECTRAL_BOUND_TENSOR}`")));
    };
    let (_, bound_mat) = tensors.remove(idx);
    if bound_mat.dim() != (1, 1) {
        return Err(file_err(
            path,
            format!("`{SPECTRAL_BOUND_TENSOR}` must be 1x1, got {:?}", bound_mat.dim()),
        ));
    }
    let bound = bound_mat[[0, 0]];
    if bound <= 0.0 {
        return Err(Error::NonPositiveSpectralBound(bound));
    }

    let mut model = PretrainModel::<S>::new(input_dim, cfg);
    restore_params(model.params_mut(), &tensors, path)?;
    Ok((model, bound))
}

/// Saves a fine-tuned head (fusion plus classifier).
pub fn save_finetuned<S: Scalar>(path: &Path, model: &FinetuneModel<S>) -> Result<()> {
    let values: Vec<(String, Mat<Real>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.mapv(|v| v.as_f64())))
        .collect();
    let refs: Vec<(&str, &Mat<Real>)> =
        values.iter().map(|(n, m)| (n.as_str(), m)).collect();
    save_tensors(path, &refs)
}

/// Rebuilds a fine-tuned head from its checkpoint under the same
/// configuration and dimensions it was trained with.
pub fn load_finetuned<S: Scalar>(
    path: &Path,
    input_dim: usize,
    embed_dim: usize,
    cfg: &FinetuneConfig,
) -> Result<FinetuneModel<S>> {
    let tensors = load_tensors(path)?;
    let mut model = FinetuneModel::<S>::new(input_dim, embed_dim, cfg);
    restore_params(model.params_mut(), &tensors, path)?;
    Ok(model)
}
