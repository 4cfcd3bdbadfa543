//! Parameter and FLOP accounting.
//!
//! Parameters: every learnable scalar; batch-norm running statistics are not
//! counted.
//!
//! FLOPs, counted on one eval-mode forward pass:
//!
//! * convolution: `2 * Kh * Kw * (Cin / groups) * Cout * H * W`, plus
//!   `Cout * H * W` when it has a bias
//! * SE dense stage: `2 * C_latent * C`
//! * elementwise ops (activations, batch norm, add, Hadamard, channel
//!   scaling, dropout) and max pooling: 1 per output value
//! * global average pooling: 1 per input value
//! * upsampling, concatenation, slicing and channel permutation: 0

use std::fmt;

use super::Model;
use crate::autodiff::Mode;
use crate::error::Result;
use crate::nn::Session;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSummary {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Summary {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSummary>,
    pub total_params: usize,
    pub total_flops: u64,
}

impl Model {
    pub fn summary(&self, input_shape: &[usize]) -> Result<Summary> {
        self.check_input(input_shape)?;
        let mut s = Session::new(&self.params, Mode::Eval);
        let x = s.input(Tensor::zeros(input_shape));
        self.forward(&mut s, x)?;
        let graph = s.finish().graph;
        let layers: Vec<LayerSummary> = graph
            .flops_by_scope()
            .into_iter()
            .filter(|(name, _)| !name.is_empty())
            .map(|(name, flops)| LayerSummary {
                params: self.params.param_count_with_prefix(&format!("{name}.")),
                name,
                flops,
            })
            .collect();
        Ok(Summary {
            input_shape: input_shape.to_vec(),
            total_params: self.count_params(),
            total_flops: graph.flops(),
            layers,
        })
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {:?}", self.input_shape)?;
        writeln!(f, "{:<10} {:>12} {:>16}", "layer", "params", "flops")?;
        for l in &self.layers {
            writeln!(f, "{:<10} {:>12} {:>16}", l.name, l.params, l.flops)?;
        }
        write!(
            f,
            "{:<10} {:>12} {:>16}",
            "total", self.total_params, self.total_flops
        )
    }
}
