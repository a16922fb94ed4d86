//! Parameter plumbing shared by every trainable network: seeded
//! initialization, snapshots and hashing of named tensors.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor};
use candle_core::Var;
use candle_nn::{Conv2d, Conv2dConfig, Optimizer, VarBuilder, VarMap};
use sha2::{Digest, Sha256};

use crate::rng::{derive_seed, SeededRng};
use crate::{Error, Result};

pub type NamedTensors = HashMap<String, Tensor>;

/// Overwrites every variable with a deterministic draw.
///
/// Biases and parameters whose name contains `zero_init` start at zero;
/// other tensors are uniform in `±1/sqrt(fan_in)`.
pub fn seeded_init(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for (i, name) in names.into_iter().enumerate() {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let n = var.elem_count();
        let values = if name.ends_with("bias") || name.contains("zero_init") {
            vec![0f32; n]
        } else {
            let fan_in: usize = if dims.len() > 1 { dims[1..].iter().product() } else { dims[0] };
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let mut rng = SeededRng::new(derive_seed(seed, i as u64));
            (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect()
        };
        var.set(&Tensor::from_vec(values, dims.as_slice(), var.device())?)?;
    }
    Ok(())
}

/// Detached copies of every variable.
pub fn snapshot(varmap: &VarMap) -> Result<NamedTensors> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    data.iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
        .collect()
}

/// Copies `tensors` into the matching variables; every variable must be covered.
pub fn load_into(varmap: &VarMap, tensors: &NamedTensors) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    for (name, var) in data.iter() {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
        if t.dims() != var.dims() {
            return Err(Error::Config(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(t)?;
    }
    Ok(())
}

pub fn frozen_builder(tensors: &NamedTensors, device: &Device) -> VarBuilder<'static> {
    VarBuilder::from_tensors(tensors.clone(), DType::F32, device)
}

/// Order-independent content hash of named tensors.
pub fn tensor_hash(tensors: &NamedTensors) -> Result<String> {
    let sorted: BTreeMap<_, _> = tensors.iter().collect();
    let mut h = Sha256::new();
    for (name, t) in sorted {
        h.update(name.as_bytes());
        h.update(format!("{:?}", t.dims()).as_bytes());
        for v in t.flatten_all()?.to_vec1::<f32>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn sum_sq(t: &Tensor) -> Result<f64> {
    Ok(t.sqr()?.sum_all()?.to_scalar::<f32>()? as f64)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F32)?.to_scalar::<f32>()? as f64)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a - b)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()? as f64)
}

pub fn conv(vb: VarBuilder, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: k / 2,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(cin, cout, k, cfg, vb)?)
}

/// Backward pass plus optimizer step with the gradient rescaled to a global
/// L2 norm of at most `max_norm`. Returns the pre-clip norm.
pub fn clipped_step<O: Optimizer>(opt: &mut O, vars: &[Var], loss: &Tensor, max_norm: Option<f64>) -> Result<f64> {
    let mut grads = loss.backward()?;
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += sum_sq(g)?;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numerical(format!("gradient norm {norm}")));
    }
    if let Some(m) = max_norm {
        if norm > m {
            let scale = m / norm;
            for v in vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
    }
    opt.step(&grads)?;
    Ok(norm)
}
