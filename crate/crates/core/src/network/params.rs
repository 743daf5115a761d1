//! Named parameter store and the per-forward binding of names to graph nodes.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::arch::{self, TensorRole};
use super::config::NetworkConfig;
use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{arg_err, shape_err, Result, StageContext};
use crate::ops::{BatchStats, BnMode, RunningStats};
use crate::rng::RngState;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

fn init_std(name: &str, shape: [usize; 4]) -> f64 {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    if name.ends_with(".offset.weight") {
        0.0
    } else if name.ends_with(".select.weight") || name == "head.cls.weight" || name == "attention.out.weight" {
        libm::sqrt(1.0 / fan_in)
    } else {
        libm::sqrt(2.0 / fan_in)
    }
}

impl NetworkParams {
    /// He-normal convolution weights, zero biases, unit batch-norm scale and
    /// zero offset predictors.
    pub fn init(config: NetworkConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for spec in arch::tensor_specs(&config) {
            let t = match spec.role {
                TensorRole::Weight => {
                    let std = init_std(&spec.name, spec.shape);
                    if std == 0.0 {
                        Tensor::zeros(spec.shape)
                    } else {
                        Tensor::randn(spec.shape, std, rng)
                    }
                }
                TensorRole::Gamma | TensorRole::RunningVar => Tensor::full(spec.shape, 1.0),
                TensorRole::Bias | TensorRole::Beta | TensorRole::RunningMean => Tensor::zeros(spec.shape),
            };
            tensors.insert(spec.name, t);
        }
        Ok(Self { config, tensors })
    }

    /// Checks that the tensor set is exactly the one the configuration implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = arch::tensor_specs(&self.config);
        for spec in &specs {
            let t = self.tensors.get(&spec.name).ok_or_else(|| shape_err!("missing parameter `{}`", spec.name))?;
            if t.shape() != spec.shape {
                return Err(shape_err!("parameter `{}` has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape));
            }
            t.ensure_finite(&spec.name)?;
        }
        if self.tensors.len() != specs.len() {
            let extra = self.tensors.keys().find(|k| !specs.iter().any(|s| &s.name == *k));
            return Err(shape_err!("unexpected parameter `{}`", extra.map(String::as_str).unwrap_or("?")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| arg_err!("no parameter named `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| arg_err!("no parameter named `{name}`"))
    }

    pub fn is_trainable(name: &str) -> bool {
        !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().filter(|(k, _)| Self::is_trainable(k)).map(|(_, t)| numel(t.shape())).sum()
    }

    pub fn running_stats(&self, bn: &str) -> Result<RunningStats> {
        let mean = self.get(&alloc::format!("{bn}.running_mean"))?;
        let var = self.get(&alloc::format!("{bn}.running_var"))?;
        Ok(RunningStats { mean: mean.data().to_vec(), var: var.data().to_vec() })
    }

    /// Folds recorded batch moments into the running statistics, in order.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (bn, batch) in updates {
            let mut rs = self.running_stats(bn)?;
            rs.update(batch);
            self.get_mut(&alloc::format!("{bn}.running_mean"))?.data_mut().copy_from_slice(&rs.mean);
            self.get_mut(&alloc::format!("{bn}.running_var"))?.data_mut().copy_from_slice(&rs.var);
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &NetworkParams) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

/// One forward pass over a parameter set: binds names to graph leaves on
/// first use, so every reuse of a name shares one node.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p NetworkParams,
    bound: BTreeMap<String, NodeId>,
    mode: BnMode,
    bn_batches: Vec<(String, BatchStats)>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p NetworkParams, mode: BnMode) -> Self {
        Self { graph: Graph::new(), params, bound: BTreeMap::new(), mode, bn_batches: Vec::new() }
    }

    pub fn params(&self) -> &'p NetworkParams {
        self.params
    }

    pub fn config(&self) -> &'p NetworkConfig {
        &self.params.config
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let t = self.params.get(name)?.clone();
        let id = self.graph.param(t);
        self.bound.insert(name.into(), id);
        Ok(id)
    }

    pub fn bound(&self) -> &BTreeMap<String, NodeId> {
        &self.bound
    }

    /// Batch norm with `{prefix}.gamma`/`.beta`; batch moments in train mode,
    /// running statistics in eval mode.
    pub fn batch_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.param(&alloc::format!("{prefix}.gamma"))?;
        let beta = self.param(&alloc::format!("{prefix}.beta"))?;
        match self.mode {
            BnMode::Train => {
                let (out, stats) = self.graph.batch_norm_train(x, gamma, beta).stage(prefix)?;
                self.bn_batches.push((prefix.into(), stats));
                Ok(out)
            }
            BnMode::Eval => {
                let rs = self.params.running_stats(prefix)?;
                self.graph.batch_norm_eval(x, gamma, beta, &rs).stage(prefix)
            }
        }
    }

    /// Batch moments recorded so far in train mode, in call order.
    pub fn bn_batches(&self) -> &[(String, BatchStats)] {
        &self.bn_batches
    }

    /// Gradients of every bound parameter, by name.
    pub fn named_gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound.iter().map(|(k, &id)| (k.clone(), grads.get(id))).collect()
    }
}
