//! Networks built from linear layers, a small reverse-mode tape over them,
//! and the two loss heads.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layer::{
    EffectiveWeight, Fp8Config, LayerMode, LinearCache, MvuePlacement, Parameter, Pass, SparseLinearLayer,
};
use super::optim::Optimizer;
use crate::error::{Error, Result};
use crate::rescale::ScaleRegistry;
use crate::sparse::{Mask, PruneConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// tanh approximation
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over all output elements of the squared error.
    Mse,
    /// Mean over the batch of the softmax cross-entropy.
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Tensor),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss value and its gradient with respect to the network output.
pub fn loss_and_grad(kind: LossKind, out: &Tensor, y: &Targets) -> Result<(f64, Tensor)> {
    match (kind, y) {
        (LossKind::Mse, Targets::Values(t)) => {
            if !out.same_shape(t) {
                return Err(Error::Shape(format!("prediction {:?} vs target {:?}", out.shape(), t.shape())));
            }
            let n = out.len() as f64;
            let mut grad = out.clone();
            let mut loss = 0.0;
            for (g, &target) in grad.data_mut().iter_mut().zip(t.data()) {
                let d = *g - target;
                loss += d * d;
                *g = 2.0 * d / n;
            }
            Ok((loss / n, grad))
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
            let (b, c) = (out.rows(), out.cols());
            if labels.len() != b || labels.iter().any(|&l| l >= c) {
                return Err(Error::Shape(format!("{} labels for {b}x{c} logits", labels.len())));
            }
            let mut grad = out.clone();
            let mut loss = 0.0;
            for (row, &label) in grad.data_mut().chunks_mut(c).zip(labels) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                loss += lse - row[label];
                for v in row.iter_mut() {
                    *v = (*v - lse).exp() / b as f64;
                }
                row[label] -= 1.0 / b as f64;
            }
            Ok((loss / b as f64, grad))
        }
        _ => Err(Error::Config("loss head does not match target kind".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// linear → act → … → linear
    Mlp,
    /// embed → `blocks` × (h + ffn2(act(ffn1(h)))) → head
    FfnStack { blocks: usize },
}

/// Settings shared by every designated (FFN) layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseSettings {
    pub mode: LayerMode,
    pub prune: PruneConfig,
    pub dynamic_beta: bool,
    pub mvue: MvuePlacement,
    pub fp8: Option<Fp8Config>,
}

impl Default for SparseSettings {
    fn default() -> Self {
        Self {
            mode: LayerMode::Dense,
            prune: PruneConfig::default(),
            dynamic_beta: false,
            mvue: MvuePlacement::default(),
            fp8: None,
        }
    }
}

type NodeId = usize;

enum Op {
    Input,
    Linear { layer: usize, input: NodeId, cache: LinearCache },
    Bias { layer: usize, input: NodeId },
    Act { input: NodeId },
    Add { a: NodeId, b: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn output(&self) -> &Tensor {
        &self.nodes.last().expect("tape has an output").value
    }

    /// Caches of every linear node, in execution order.
    pub fn linear_caches(&self) -> impl Iterator<Item = (usize, &LinearCache)> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Linear { layer, cache, .. } => Some((*layer, cache)),
            _ => None,
        })
    }
}

/// The result of a training step's forward/backward.
pub struct StepOutput {
    pub loss: f64,
    /// Masks of the effective weights used in the forward, per linear layer.
    pub masks: Vec<Option<Mask>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub linears: Vec<SparseLinearLayer>,
    pub biases: Vec<Parameter>,
    pub topology: Topology,
    pub activation: Activation,
    pub loss: LossKind,
    registry: Arc<ScaleRegistry>,
}

fn init_weight(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let data = (0..fan_out * fan_in).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(fan_out, fan_in, data).expect("matching shape")
}

impl Network {
    fn build(
        specs: &[(String, usize, usize, bool)],
        topology: Topology,
        activation: Activation,
        loss: LossKind,
        settings: &SparseSettings,
        registry: Arc<ScaleRegistry>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut linears = Vec::with_capacity(specs.len());
        let mut biases = Vec::with_capacity(specs.len());
        for (id, fan_in, fan_out, designated) in specs {
            let w = Parameter::new(format!("{id}.weight"), init_weight(&mut rng, *fan_out, *fan_in));
            let mode = if *designated { settings.mode } else { LayerMode::Dense };
            let mut layer = SparseLinearLayer::new(w, mode, settings.prune, *designated, registry.clone())?;
            layer.fp8 = settings.fp8;
            if *designated {
                layer.dynamic_beta = settings.dynamic_beta;
                layer.mvue = settings.mvue;
            }
            linears.push(layer);
            biases.push(Parameter::new(format!("{id}.bias"), Tensor::zeros(vec![*fan_out])));
        }
        Ok(Self { linears, biases, topology, activation, loss, registry })
    }

    /// Multi-layer perceptron over `dims`. Hidden layers are designated; the
    /// output layer only when `sparse_head` is set.
    pub fn mlp(
        dims: &[usize],
        activation: Activation,
        loss: LossKind,
        sparse_head: bool,
        settings: &SparseSettings,
        seed: u64,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output widths".into()));
        }
        let last = dims.len() - 2;
        let specs: Vec<_> =
            dims.windows(2).enumerate().map(|(i, d)| (format!("fc{i}"), d[0], d[1], i < last || sparse_head)).collect();
        Self::build(&specs, Topology::Mlp, activation, loss, settings, Arc::new(ScaleRegistry::new()), seed)
    }

    /// Dense embedding, `blocks` residual FFN blocks with designated layers, dense head.
    #[allow(clippy::too_many_arguments)]
    pub fn ffn_stack(
        input: usize,
        d_model: usize,
        d_ff: usize,
        blocks: usize,
        output: usize,
        activation: Activation,
        loss: LossKind,
        settings: &SparseSettings,
        seed: u64,
    ) -> Result<Self> {
        let mut specs = vec![("embed".to_string(), input, d_model, false)];
        for b in 0..blocks {
            specs.push((format!("block{b}.ffn1"), d_model, d_ff, true));
            specs.push((format!("block{b}.ffn2"), d_ff, d_model, true));
        }
        specs.push(("head".to_string(), d_model, output, false));
        Self::build(
            &specs,
            Topology::FfnStack { blocks },
            activation,
            loss,
            settings,
            Arc::new(ScaleRegistry::new()),
            seed,
        )
    }

    pub fn registry(&self) -> &Arc<ScaleRegistry> {
        &self.registry
    }

    /// Replaces the scale registry (e.g. from a checkpoint).
    pub fn set_registry(&mut self, registry: Arc<ScaleRegistry>) {
        for l in &mut self.linears {
            l.set_registry(registry.clone());
        }
        self.registry = registry;
    }

    pub fn num_params(&self) -> usize {
        self.params().map(|p| p.w.len()).sum()
    }

    /// Weights then biases, in layer order.
    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.linears.iter().map(|l| &l.weight).chain(self.biases.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.linears.iter_mut().map(|l| &mut l.weight).chain(self.biases.iter_mut())
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params().map(|p| p.w.clone()).collect()
    }

    pub fn grads(&self) -> Vec<Tensor> {
        self.params().map(|p| p.grad.clone()).collect()
    }

    pub fn set_param_values(&mut self, values: &[Tensor]) -> Result<()> {
        self.check_param_values(values)?;
        for (p, v) in self.params_mut().zip(values) {
            p.w = v.clone();
        }
        Ok(())
    }

    fn check_param_values(&self, values: &[Tensor]) -> Result<()> {
        let n = self.linears.len() + self.biases.len();
        if values.len() != n || self.params().zip(values).any(|(p, v)| !p.w.same_shape(v)) {
            return Err(Error::Shape("parameter list does not match network".into()));
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Parameter::zero_grad);
    }

    pub fn effective_weights(&self) -> Result<Vec<EffectiveWeight>> {
        self.linears.iter().map(|l| l.effective_weight()).collect()
    }

    /// `mask_of(w)` of every designated layer (`None` elsewhere).
    pub fn tracked_masks(&self) -> Result<Vec<Option<Mask>>> {
        self.linears.iter().map(|l| l.tracked_mask()).collect()
    }

    fn forward_tape(&self, x: &Tensor, effs: Vec<EffectiveWeight>, biases: &[&Tensor]) -> Result<Tape> {
        if effs.len() != self.linears.len() {
            return Err(Error::Shape("effective weight count does not match layers".into()));
        }
        let mut effs: Vec<Option<EffectiveWeight>> = effs.into_iter().map(Some).collect();
        let mut tape = Tape { nodes: Vec::new() };
        let input = tape.push(x.clone(), Op::Input);

        let affine =
            |tape: &mut Tape, effs: &mut Vec<Option<EffectiveWeight>>, layer: usize, from: NodeId| -> Result<NodeId> {
                let eff = effs[layer].take().expect("each layer used once");
                let (z, cache) = self.linears[layer].forward_with(&tape.nodes[from].value, eff)?;
                let z_id = tape.push(z, Op::Linear { layer, input: from, cache });
                let mut zb = tape.nodes[z_id].value.clone();
                let bias = biases[layer];
                for row in zb.data_mut().chunks_mut(bias.len()) {
                    row.iter_mut().zip(bias.data()).for_each(|(v, b)| *v += b);
                }
                Ok(tape.push(zb, Op::Bias { layer, input: z_id }))
            };
        let act = |tape: &mut Tape, from: NodeId| -> NodeId {
            let v = tape.nodes[from].value.map(|x| self.activation.apply(x));
            tape.push(v, Op::Act { input: from })
        };

        match self.topology {
            Topology::Mlp => {
                let mut h = input;
                for i in 0..self.linears.len() {
                    h = affine(&mut tape, &mut effs, i, h)?;
                    if i + 1 < self.linears.len() {
                        h = act(&mut tape, h);
                    }
                }
            }
            Topology::FfnStack { blocks } => {
                let mut h = affine(&mut tape, &mut effs, 0, input)?;
                for b in 0..blocks {
                    let u = affine(&mut tape, &mut effs, 1 + 2 * b, h)?;
                    let a = act(&mut tape, u);
                    let v = affine(&mut tape, &mut effs, 2 + 2 * b, a)?;
                    let mut sum = tape.nodes[h].value.clone();
                    sum.add_assign(&tape.nodes[v].value)?;
                    h = tape.push(sum, Op::Add { a: h, b: v });
                }
                affine(&mut tape, &mut effs, self.linears.len() - 1, h)?;
            }
        }
        Ok(tape)
    }

    fn own_biases(&self) -> Vec<&Tensor> {
        self.biases.iter().map(|b| &b.w).collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tape> {
        self.forward_tape(x, self.effective_weights()?, &self.own_biases())
    }

    /// Deterministic mean loss at the current parameters. Never samples.
    pub fn loss_eval(&self, batch: &Batch) -> Result<f64> {
        let tape = self.forward(&batch.x)?;
        Ok(loss_and_grad(self.loss, tape.output(), &batch.y)?.0)
    }

    /// Loss with explicit effective weights in place of the layers' own projections.
    pub fn loss_with(&self, batch: &Batch, effs: Vec<EffectiveWeight>) -> Result<f64> {
        let tape = self.forward_tape(&batch.x, effs, &self.own_biases())?;
        Ok(loss_and_grad(self.loss, tape.output(), &batch.y)?.0)
    }

    /// Loss of arbitrary parameter values (weights then biases), optionally
    /// with designated layers projected onto fixed masks.
    pub fn loss_at(&self, params: &[Tensor], masks: Option<&[Option<Mask>]>, batch: &Batch) -> Result<f64> {
        self.check_param_values(params)?;
        let nl = self.linears.len();
        let effs = self
            .linears
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mask = masks.and_then(|m| m.get(i)).and_then(|m| m.as_ref());
                l.effective_from(&params[i], if l.mode.is_sparse() { mask } else { None })
            })
            .collect::<Result<Vec<_>>>()?;
        let biases: Vec<&Tensor> = params[nl..].iter().collect();
        let tape = self.forward_tape(&batch.x, effs, &biases)?;
        Ok(loss_and_grad(self.loss, tape.output(), &batch.y)?.0)
    }

    fn backward(&mut self, tape: &Tape, grad_out: Tensor, pass: &Pass) -> Result<()> {
        let mut grads: Vec<Option<Tensor>> = (0..tape.nodes.len()).map(|_| None).collect();
        *grads.last_mut().expect("nonempty tape") = Some(grad_out);
        let accumulate = |grads: &mut Vec<Option<Tensor>>, id: NodeId, g: Tensor| -> Result<()> {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        for id in (0..tape.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &tape.nodes[id].op {
                Op::Input => {}
                Op::Linear { layer, input, cache } => {
                    let gx = self.linears[*layer].backward(cache, &g, pass)?;
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::Bias { layer, input } => {
                    let bias = &mut self.biases[*layer].grad;
                    let width = bias.len();
                    for row in g.data().chunks(width) {
                        bias.data_mut().iter_mut().zip(row).for_each(|(b, v)| *b += v);
                    }
                    accumulate(&mut grads, *input, g)?;
                }
                Op::Act { input } => {
                    let x = &tape.nodes[*input].value;
                    let mut gi = g;
                    gi.data_mut().iter_mut().zip(x.data()).for_each(|(g, &x)| *g *= self.activation.derivative(x));
                    accumulate(&mut grads, *input, gi)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *b, g.clone())?;
                    accumulate(&mut grads, *a, g)?;
                }
            }
        }
        Ok(())
    }

    /// Zeroes gradients, runs forward and backward, and leaves `∇w̃` in every parameter's grad.
    pub fn forward_backward(&mut self, batch: &Batch, pass: &Pass) -> Result<StepOutput> {
        let effs = self.effective_weights()?;
        self.forward_backward_with(batch, effs, pass)
    }

    pub fn forward_backward_with(
        &mut self,
        batch: &Batch,
        effs: Vec<EffectiveWeight>,
        pass: &Pass,
    ) -> Result<StepOutput> {
        self.zero_grad();
        let tape = self.forward_tape(&batch.x, effs, &self.own_biases())?;
        let (loss, grad_out) = loss_and_grad(self.loss, tape.output(), &batch.y)?;
        let mut masks = vec![None; self.linears.len()];
        for (layer, cache) in tape.linear_caches() {
            masks[layer] = cache.mask().cloned();
        }
        self.backward(&tape, grad_out, pass)?;
        Ok(StepOutput { loss, masks })
    }

    /// Applies SR-STE regularization, then the optimizer update, to every parameter.
    pub fn step(&mut self, opt: &mut Optimizer) -> Result<()> {
        for l in &mut self.linears {
            l.apply_regularizer()?;
        }
        opt.update(self.params_mut())
    }
}
