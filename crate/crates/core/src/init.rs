//! Seeded parameter initialisation.
//!
//! candle's CPU RNG cannot be seeded, so every variable is overwritten with
//! values drawn from a ChaCha stream keyed on `(seed, variable name)`. The
//! same seed gives the same backbone in every model variant.

use candle_core::Tensor;
use candle_nn::VarMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Result;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic RNG for a named stream under a global seed.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Initial value for a variable, chosen from its name and rank:
/// conv kernels get He-normal, projection matrices `N(0, 1/fan_in)`,
/// batch-norm scales one, biases and running means zero, running
/// variances one.
pub fn initial_value(name: &str, shape: &[usize], seed: u64) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match (leaf, shape.len()) {
        ("running_mean", _) | ("bias", _) => vec![0.0; n],
        ("running_var", _) => vec![1.0; n],
        ("weight", 1) => vec![1.0; n],
        (_, 4) => {
            let fan_in = shape[1] * shape[2] * shape[3];
            normal(shape, (2.0 / fan_in as f64).sqrt(), &mut named_rng(seed, name))
        }
        (_, 2) => {
            let fan_in = shape[1];
            normal(shape, (1.0 / fan_in as f64).sqrt(), &mut named_rng(seed, name))
        }
        _ => normal(shape, 0.02, &mut named_rng(seed, name)),
    }
}

/// Overwrite every variable in `varmap` with its seeded initial value.
pub fn reinitialize(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    for (name, var) in data.iter() {
        let shape = var.dims().to_vec();
        let values = initial_value(name, &shape, seed);
        let t = Tensor::from_vec(values, shape.as_slice(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// Replace one named variable's contents, checking the shape.
pub fn set_named(varmap: &VarMap, name: &str, value: &Tensor) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let var = data
        .get(name)
        .ok_or_else(|| crate::Error::Config(format!("no parameter named `{name}`")))?;
    if var.dims() != value.dims() {
        return Err(crate::Error::Shape(format!(
            "parameter `{name}` has shape {:?}, got {:?}",
            var.dims(),
            value.dims()
        )));
    }
    var.set(&value.to_dtype(var.dtype())?)?;
    Ok(())
}

/// Snapshot of all variables as detached copies, sorted by name.
pub fn snapshot(varmap: &VarMap) -> Result<Vec<(String, Tensor)>> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut out = data
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}
