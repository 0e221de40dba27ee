//! Toy dual-head model: a dense `tanh` trunk feeding a disparity head and a
//! segmentation head.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Matrix, Tape, Var};
use super::AutodiffError;

/// One named, freezable parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    /// Logical shape; biases are rank 1 but stored as a `1 x n` row.
    pub shape: Vec<usize>,
    pub value: Matrix,
    pub requires_grad: bool,
    pub grad: Option<Matrix>,
}

/// Position, shape and trainability of one parameter in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub index: usize,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
}

/// Anything exposing an ordered list of freezable parameter tensors.
pub trait ParamStore {
    fn slot_count(&self) -> usize;
    fn slot_value(&self, index: usize) -> &Matrix;
    /// Replace a slot's value. Any gradient buffer on the slot is released.
    fn set_slot_value(&mut self, index: usize, value: Matrix);
    fn slot_requires_grad(&self, index: usize) -> bool;
    fn set_slot_requires_grad(&mut self, index: usize, flag: bool);
    /// Slots currently holding an allocated gradient buffer.
    fn grad_buffer_count(&self) -> usize;
}

/// Ordered parameter list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scalar parameters, each trainable, as `1 x 1` slots.
    pub fn from_scalars(values: &[f64]) -> Self {
        let mut set = Self::new();
        for (i, &v) in values.iter().enumerate() {
            set.push(format!("p{i}"), vec![1], Matrix::from_elem((1, 1), v));
        }
        set
    }

    pub fn push(&mut self, name: String, shape: Vec<usize>, value: Matrix) -> usize {
        self.params.push(Param {
            name,
            shape,
            value,
            requires_grad: true,
            grad: None,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn slots(&self) -> Vec<ParamSlot> {
        self.params
            .iter()
            .enumerate()
            .map(|(index, p)| ParamSlot {
                index,
                shape: p.shape.clone(),
                requires_grad: p.requires_grad,
            })
            .collect()
    }

    pub fn scalar_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        for p in &mut self.params {
            p.requires_grad = flag;
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Put every parameter on `tape`, trainable ones as gradient leaves.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.parameter(p.value.clone(), p.requires_grad))
            .collect()
    }

    /// Copy gradients of the bound variables out of `tape`. Frozen slots
    /// end up with no buffer.
    pub fn absorb_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.grad = if p.requires_grad { tape.grad(v).cloned() } else { None };
        }
    }

    /// Plain SGD on trainable slots: `p <- p - lr * grad`.
    pub fn sgd_step(&mut self, learning_rate: f64) -> Result<(), AutodiffError> {
        if let Some(i) = self.params.iter().position(|p| p.requires_grad && p.grad.is_none()) {
            return Err(AutodiffError::MissingGradients(i));
        }
        for p in self.params.iter_mut().filter(|p| p.requires_grad) {
            if let Some(g) = &p.grad {
                p.value.scaled_add(-learning_rate, g);
            }
        }
        Ok(())
    }
}

impl ParamStore for ParamSet {
    fn slot_count(&self) -> usize {
        self.params.len()
    }

    fn slot_value(&self, index: usize) -> &Matrix {
        &self.params[index].value
    }

    fn set_slot_value(&mut self, index: usize, value: Matrix) {
        let p = &mut self.params[index];
        p.value = value;
        p.grad = None;
    }

    fn slot_requires_grad(&self, index: usize) -> bool {
        self.params[index].requires_grad
    }

    fn set_slot_requires_grad(&mut self, index: usize, flag: bool) {
        self.params[index].requires_grad = flag;
    }

    fn grad_buffer_count(&self) -> usize {
        self.params.iter().filter(|p| p.grad.is_some()).count()
    }
}

/// Architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Separate trunks for the two heads.
    V1,
    /// One shared trunk trained from scratch.
    V2,
    /// Shared trunk whose starting point comes from regression-only pretraining.
    V3,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Some(Variant::V1),
            "v2" => Some(Variant::V2),
            "v3" => Some(Variant::V3),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Dense + tanh layers per trunk.
    pub trunk_layers: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 4,
            hidden_dim: 12,
            trunk_layers: 1,
            variant: Variant::V2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    weight: usize,
    bias: usize,
}

/// Weights of a loss term pair; both default to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ssi: f64,
    pub bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ssi: 1.0, bce: 1.0 }
    }
}

/// Graph handles produced by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub disparity: Var,
    pub seg_logits: Var,
    /// Parameter leaves in canonical slot order.
    pub params: Vec<Var>,
}

/// Toy dual-head network. Canonical slot order: trunk layers (for V1 the
/// disparity trunk, then the segmentation trunk), disparity head,
/// segmentation head; each layer contributes its weight then its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    disparity_trunk: Vec<Dense>,
    seg_trunk: Option<Vec<Dense>>,
    disparity_head: Dense,
    seg_head: Dense,
}

impl ToyModel {
    /// Deterministic initialization: weights uniform in `±1/sqrt(fan_in)`,
    /// biases zero, drawn in canonical slot order.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let dense = |params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
            let weight = params.push(format!("{name}.weight"), vec![fan_in, fan_out], w);
            let bias = params.push(format!("{name}.bias"), vec![fan_out], Matrix::zeros((1, fan_out)));
            Dense { weight, bias }
        };
        let trunk = |params: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng| {
            (0..config.trunk_layers)
                .map(|l| {
                    let fan_in = if l == 0 { config.input_dim } else { config.hidden_dim };
                    dense(params, &format!("{prefix}.{l}"), fan_in, config.hidden_dim, rng)
                })
                .collect::<Vec<_>>()
        };
        let (disparity_trunk, seg_trunk) = match config.variant {
            Variant::V1 => {
                let d = trunk(&mut params, "disparity_trunk", &mut rng);
                let s = trunk(&mut params, "seg_trunk", &mut rng);
                (d, Some(s))
            }
            Variant::V2 | Variant::V3 => (trunk(&mut params, "trunk", &mut rng), None),
        };
        let head_in = if config.trunk_layers == 0 {
            config.input_dim
        } else {
            config.hidden_dim
        };
        let disparity_head = dense(&mut params, "disparity_head", head_in, 1, &mut rng);
        let seg_head = dense(&mut params, "seg_head", head_in, 1, &mut rng);
        Self {
            config,
            params,
            disparity_trunk,
            seg_trunk,
            disparity_head,
            seg_head,
        }
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn slots(&self) -> Vec<ParamSlot> {
        self.params.slots()
    }

    /// Number of leading slots that belong to trunks.
    pub fn trunk_slot_count(&self) -> usize {
        2 * (self.disparity_trunk.len() + self.seg_trunk.as_ref().map_or(0, Vec::len))
    }

    /// Slots of the segmentation head.
    pub fn seg_head_slots(&self) -> [usize; 2] {
        [self.seg_head.weight, self.seg_head.bias]
    }

    pub fn disparity_head_slots(&self) -> [usize; 2] {
        [self.disparity_head.weight, self.disparity_head.bias]
    }

    /// Record the forward pass for a batch of `N x input_dim` inputs; both
    /// heads return `N x 1`.
    pub fn forward(&self, tape: &mut Tape, input: &Matrix) -> Result<ForwardPass, AutodiffError> {
        if input.ncols() != self.config.input_dim {
            return Err(AutodiffError::ShapeMismatch {
                op: "forward",
                left: input.dim(),
                right: (self.config.input_dim, self.config.hidden_dim),
            });
        }
        let params = self.params.bind(tape);
        let x = tape.constant(input.clone());
        let run_trunk = |tape: &mut Tape, layers: &[Dense]| -> Result<Var, AutodiffError> {
            let mut h = x;
            for layer in layers {
                let z = tape.matmul(h, params[layer.weight])?;
                let z = tape.add_row(z, params[layer.bias])?;
                h = tape.tanh(z);
            }
            Ok(h)
        };
        let shared = run_trunk(tape, &self.disparity_trunk)?;
        let seg_features = match &self.seg_trunk {
            Some(layers) => run_trunk(tape, layers)?,
            None => shared,
        };
        let head = |tape: &mut Tape, h: Var, d: Dense| -> Result<Var, AutodiffError> {
            let z = tape.matmul(h, params[d.weight])?;
            tape.add_row(z, params[d.bias])
        };
        let disparity = head(tape, shared, self.disparity_head)?;
        let seg_logits = head(tape, seg_features, self.seg_head)?;
        Ok(ForwardPass {
            disparity,
            seg_logits,
            params,
        })
    }

    pub fn grad_buffer_count(&self) -> usize {
        self.params.grad_buffer_count()
    }

    pub fn sgd_step(&mut self, learning_rate: f64) -> Result<(), AutodiffError> {
        self.params.sgd_step(learning_rate)
    }
}

impl ParamStore for ToyModel {
    fn slot_count(&self) -> usize {
        self.params.slot_count()
    }
    fn slot_value(&self, index: usize) -> &Matrix {
        self.params.slot_value(index)
    }
    fn set_slot_value(&mut self, index: usize, value: Matrix) {
        self.params.set_slot_value(index, value)
    }
    fn slot_requires_grad(&self, index: usize) -> bool {
        self.params.slot_requires_grad(index)
    }
    fn set_slot_requires_grad(&mut self, index: usize, flag: bool) {
        self.params.set_slot_requires_grad(index, flag)
    }
    fn grad_buffer_count(&self) -> usize {
        self.params.grad_buffer_count()
    }
}

/// `w.ssi * SSI(disparity) + w.bce * mean BCE(sigmoid(logits))`.
pub fn joint_loss(
    tape: &mut Tape,
    disparity: Var,
    disparity_gt: &[f64],
    seg_logits: Var,
    seg_gt: &[f64],
    mask: &[bool],
    weights: LossWeights,
) -> Result<Var, AutodiffError> {
    if let Some(&y) = seg_gt.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(AutodiffError::NonBinaryTarget(y));
    }
    let ssi = tape.ssi_loss(disparity, disparity_gt, mask)?;
    let prob = tape.sigmoid(seg_logits);
    let bce = tape.bce(prob, seg_gt)?;
    let a = tape.scale(ssi, weights.ssi);
    let b = tape.scale(bce, weights.bce);
    tape.add(a, b)
}
