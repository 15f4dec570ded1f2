//! Named parameter tensors and their binding into a graph.

use gpp_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `1/sqrt(fan_in)`, fan-in taken from the first axis.
    FanIn,
    /// Normal with standard deviation `sqrt(2/fan_in)`, fan-in over all but the first axis (conv kernels).
    ConvFanIn,
    Zeros,
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered list of parameter shapes; positions double as indices into bound vars.
#[derive(Clone, Debug, Default)]
pub struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec { name: name.into(), shape: shape.to_vec(), init });
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut set = ParamSet::default();
        for s in &self.specs {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Const(c) => Tensor::full(s.shape.clone(), T::lit(c)),
                Init::FanIn => {
                    let std = 1.0 / (s.shape[0] as f64).sqrt();
                    Tensor::<T>::randn(s.shape.clone(), rng).scale(T::lit(std))
                }
                Init::ConvFanIn => {
                    let fan: usize = s.shape[1..].iter().product();
                    let std = (2.0 / fan as f64).sqrt();
                    Tensor::<T>::randn(s.shape.clone(), rng).scale(T::lit(std))
                }
            };
            set.push(s.name.clone(), t);
        }
        set
    }

    /// Checks that `set` has exactly these names and shapes, in order.
    pub fn check<T: Scalar>(&self, set: &ParamSet<T>) -> Result<()> {
        if set.len() != self.specs.len() {
            return Err(CoreError::Config(format!(
                "expected {} parameter tensors, found {}",
                self.specs.len(),
                set.len()
            )));
        }
        for (s, (name, t)) in self.specs.iter().zip(set.iter()) {
            if s.name != name || s.shape != t.shape() {
                return Err(CoreError::Config(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Adds every tensor to `g`, tracked for gradients when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    /// Gradients of bound vars, zeros where a parameter did not influence the loss.
    pub fn grads(&self, g: &Graph<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}
