use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    /// Whether decoupled weight decay applies (weights yes, biases no).
    pub decay: bool,
}

/// Names, shapes and offsets of every parameter tensor in one flat buffer.
/// Gradients and optimizer moments share the same layout.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], decay: bool) -> ParamId {
        let len = shape.iter().product();
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
            len,
            decay,
        });
        self.total += len;
        ParamId(self.specs.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn range(&self, id: ParamId) -> Range<usize> {
        let s = &self.specs[id.0];
        s.offset..s.offset + s.len
    }

    pub fn get<'a, F>(&self, buf: &'a [F], id: ParamId) -> &'a [F] {
        &buf[self.range(id)]
    }

    pub fn get_mut<'a, F>(&self, buf: &'a mut [F], id: ParamId) -> &'a mut [F] {
        &mut buf[self.range(id)]
    }

    pub fn find(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

pub enum Init {
    Zeros,
    /// He/Kaiming normal for ReLU layers.
    HeNormal {
        fan_in: usize,
    },
    /// Uniform in `±1/√fan_in`.
    Uniform {
        fan_in: usize,
    },
    /// Uniform in `±scale/√fan_in`.
    ScaledUniform {
        fan_in: usize,
        scale: f64,
    },
}

pub fn init_slice<F: Real, R: Rng>(buf: &mut [F], init: Init, rng: &mut R) {
    match init {
        Init::Zeros => buf.fill(F::zero()),
        Init::HeNormal { fan_in } => {
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            buf.iter_mut().for_each(|w| *w = F::of(n.sample(rng)));
        }
        Init::Uniform { fan_in } => init_slice(buf, Init::ScaledUniform { fan_in, scale: 1.0 }, rng),
        Init::ScaledUniform { fan_in, scale } => {
            let bound = scale / (fan_in as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
            buf.iter_mut().for_each(|w| *w = F::of(u.sample(rng)));
        }
    }
}
