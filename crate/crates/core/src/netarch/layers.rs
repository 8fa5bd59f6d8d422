use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named trainable arrays of one network, iterated in name order.
#[derive(Clone, Debug, Default)]
pub struct ParamGroup {
    vars: BTreeMap<String, Var>,
}

impl ParamGroup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.vars.insert(name.into(), Var::from_tensor(&value)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::Mismatch(format!("missing parameter {name}")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flattened copies of every array, for comparisons and hashing.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().flatten_all()?.to_vec1::<f32>()?)))
            .collect()
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            if !v
                .flatten_all()?
                .to_vec1::<f32>()?
                .iter()
                .all(|x| x.is_finite())
            {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Replaces the value of an existing array, keeping its shape.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Mismatch(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Mismatch(format!(
                "parameter {name} has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(value)?;
        Ok(())
    }
}

/// Seeded parameter construction.
pub(crate) struct Init<'a, R: Rng + ?Sized> {
    pub rng: &'a mut R,
    pub group: ParamGroup,
}

impl<'a, R: Rng + ?Sized> Init<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self {
            rng,
            group: ParamGroup::new(),
        }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidValue(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(self.rng) as f32).collect();
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    /// Conv weight `[cout, cin, k, k]` with std `gain / sqrt(fan_in)`, zero bias.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Result<()> {
        let std = gain / ((cin * k * k) as f64).sqrt();
        let w = self.normal(&[cout, cin, k, k], std)?;
        self.group.insert(format!("{name}.weight"), w)?;
        self.group.insert(
            format!("{name}.bias"),
            Tensor::zeros(cout, DType::F32, &Device::Cpu)?,
        )?;
        Ok(())
    }

    /// Dense weight `[out, in]` with the given std, zero bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Result<()> {
        let w = self.normal(&[fan_out, fan_in], std)?;
        self.group.insert(format!("{name}.weight"), w)?;
        self.group.insert(
            format!("{name}.bias"),
            Tensor::zeros(fan_out, DType::F32, &Device::Cpu)?,
        )?;
        Ok(())
    }
}

pub(crate) const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

pub(crate) fn conv2d(
    x: &Tensor,
    p: &ParamGroup,
    name: &str,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = super::conv::conv2d(x, w, stride, padding)?;
    Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
}

pub(crate) fn linear(x: &Tensor, p: &ParamGroup, name: &str) -> Result<Tensor> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    Ok(x.matmul(&w.t()?)?.broadcast_add(b)?)
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

pub(crate) fn leaky_relu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.maximum(&(x * 0.2)?)
}

/// Output side of a 3x3/stride-2/pad-1 convolution.
pub(crate) fn halved(n: usize) -> usize {
    n.div_ceil(2)
}
