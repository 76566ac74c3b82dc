//! Small feed-forward models whose weight tensors can be gated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{
    bools_to_f64, gate_penalty_term, hard_mask, soft_gate, stochastic_gate, GateMode, GatePenalty,
    GroupMask, Mask, MaskedGroup, StraightThrough,
};
use crate::param::{Param, ParamId, Role};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        maskable: bool,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        maskable: bool,
    },
    Relu,
    MaxPool2,
    Flatten,
}

impl LayerSpec {
    pub fn maskable(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { maskable: true, .. } | LayerSpec::Conv { maskable: true, .. }
        )
    }

    fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvPreset {
    Conv2,
    Conv6Scaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Shape of one sample, e.g. `[2]` or `[1, 16, 16]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Dense layers of the given widths with ReLU in between.
    pub fn mlp(widths: &[usize], maskable: &[bool]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Contract(format!(
                "an MLP needs at least two widths, got {}",
                widths.len()
            )));
        }
        if maskable.len() != widths.len() - 1 {
            return Err(Error::Contract(format!(
                "{} maskable flags for {} dense layers",
                maskable.len(),
                widths.len() - 1
            )));
        }
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Dense {
                inputs: pair[0],
                outputs: pair[1],
                maskable: maskable[i],
            });
        }
        let spec = ModelSpec {
            input_shape: vec![widths[0]],
            layers,
        };
        spec.output_shape()?;
        Ok(spec)
    }

    /// Convolutional presets for `[channels, height, width]` inputs.
    pub fn conv(preset: ConvPreset, input: [usize; 3], classes: usize, mask_head: bool) -> Result<Self> {
        let [c, h, w] = input;
        let (blocks, head): (&[usize], &[usize]) = match preset {
            ConvPreset::Conv2 => (&[8], &[32]),
            ConvPreset::Conv6Scaled => (&[8, 16, 32], &[64, 64]),
        };
        let factor = 1usize << blocks.len();
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Contract(format!(
                "input {h}x{w} is not divisible by the pooling factor {factor}"
            )));
        }
        let conv = |cin, cout| LayerSpec::Conv {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride: 1,
            padding: 1,
            maskable: true,
        };
        let mut layers = Vec::new();
        let mut cin = c;
        for &width in blocks {
            layers.push(conv(cin, width));
            layers.push(LayerSpec::Relu);
            layers.push(conv(width, width));
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool2);
            cin = width;
        }
        layers.push(LayerSpec::Flatten);
        let mut features = cin * (h / factor) * (w / factor);
        for &width in head {
            layers.push(LayerSpec::Dense {
                inputs: features,
                outputs: width,
                maskable: mask_head,
            });
            layers.push(LayerSpec::Relu);
            features = width;
        }
        layers.push(LayerSpec::Dense {
            inputs: features,
            outputs: classes,
            maskable: mask_head,
        });
        let spec = ModelSpec {
            input_shape: input.to_vec(),
            layers,
        };
        spec.output_shape()?;
        Ok(spec)
    }

    /// Per-sample shape after every layer; fails on incompatible neighbours.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |what: String| Error::Dimension(format!("layer {i}: {what}"));
            shape = match layer {
                LayerSpec::Dense { inputs, outputs, .. } => {
                    if shape != [*inputs] {
                        return Err(bad(format!("dense expects [{inputs}], got {shape:?}")));
                    }
                    vec![*outputs]
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if shape.len() != 3 || shape[0] != *in_channels {
                        return Err(bad(format!("conv expects {in_channels} channels, got {shape:?}")));
                    }
                    let (h, w) = (shape[1] + 2 * padding, shape[2] + 2 * padding);
                    if *kernel > h || *kernel > w || *stride == 0 {
                        return Err(bad(format!("kernel {kernel} does not fit {shape:?}")));
                    }
                    vec![*out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool2 => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return Err(bad(format!("cannot pool {shape:?}")));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .layer_shapes()?
            .pop()
            .unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn has_maskable(&self) -> bool {
        self.layers.iter().any(LayerSpec::maskable)
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerParams {
    weight: ParamId,
    bias: ParamId,
    group: Option<usize>,
}

/// Knobs for one forward pass.
pub struct GateCtx<'a> {
    pub beta: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// Record gradients for trainable parameters.
    pub track_grad: bool,
}

impl GateCtx<'_> {
    pub fn inference(beta: f64) -> Self {
        GateCtx {
            beta,
            rng: None,
            track_grad: false,
        }
    }
}

/// Tape handles produced by [`Model::forward`].
pub struct Forward {
    pub logits: Var,
    /// One leaf per parameter, indexed like [`Model::params`].
    pub leaves: Vec<Var>,
    /// Penalised gate values per group (`σ(βs)` or `σ(s)`), if any.
    pub gates: Vec<Option<Var>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Param>,
    pub groups: Vec<MaskedGroup>,
    layer_params: Vec<Option<LayerParams>>,
}

impl Model {
    /// Kaiming-uniform weights (`U(±√(6/fan_in))`) and zero biases, keyed by `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.layer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut groups = Vec::new();
        let mut layer_params = Vec::with_capacity(spec.layers.len());
        for (li, layer) in spec.layers.iter().enumerate() {
            if !layer.has_params() {
                layer_params.push(None);
                continue;
            }
            let (wshape, fan_in, bias_len, kind) = match layer {
                LayerSpec::Dense { inputs, outputs, .. } => (vec![*inputs, *outputs], *inputs, *outputs, "dense"),
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                    in_channels * kernel * kernel,
                    *out_channels,
                    "conv",
                ),
                _ => unreachable!(),
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let numel: usize = wshape.iter().product();
            let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
            let weight = ParamId(params.len());
            params.push(Param::new(
                format!("{kind}{li}.weight"),
                Role::Weight,
                Tensor::new(wshape, data)?,
            ));
            let bias = ParamId(params.len());
            params.push(Param::new(
                format!("{kind}{li}.bias"),
                Role::Bias,
                Tensor::zeros(&[bias_len]),
            ));
            let group = layer.maskable().then(|| {
                groups.push(MaskedGroup {
                    name: format!("{kind}{li}"),
                    layer: li,
                    weight,
                    scores: None,
                    s_init: 0.0,
                    mode: GateMode::None,
                    alive: vec![true; numel],
                    frozen_mask: None,
                    straight_through: StraightThrough::Identity,
                });
                groups.len() - 1
            });
            layer_params.push(Some(LayerParams { weight, bias, group }));
        }
        Ok(Model {
            spec,
            params,
            groups,
            layer_params,
        })
    }

    /// Reassembles a model from stored parameters and groups, checking that
    /// they fit the architecture.
    pub fn from_parts(spec: ModelSpec, params: Vec<Param>, groups: Vec<MaskedGroup>) -> Result<Self> {
        let mut model = Model::build(spec, 0)?;
        let base = model.params.len();
        let fits = params.len() >= base
            && model
                .params
                .iter()
                .zip(&params)
                .all(|(a, b)| a.role == b.role && a.value.shape() == b.value.shape())
            && params[base..].iter().all(|p| p.role == Role::Score)
            && groups.len() == model.groups.len()
            && groups.iter().zip(&model.groups).all(|(a, b)| {
                a.weight == b.weight
                    && a.layer == b.layer
                    && a.alive.len() == b.numel()
                    && a.frozen_mask.as_ref().is_none_or(|f| f.len() == b.numel())
                    && a.scores.is_none_or(|id| id.0 < params.len() && params[id.0].value.numel() == b.numel())
            });
        if !fits {
            return Err(Error::Contract("stored parameters do not fit the model architecture".into()));
        }
        model.params = params;
        model.groups = groups;
        Ok(model)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    /// Number of weights that carry a mask.
    pub fn maskable_count(&self) -> usize {
        self.groups.iter().map(MaskedGroup::numel).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role != Role::Score)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Puts every maskable group into `mode`, allocating mask parameters
    /// filled with `s_init` for soft and stochastic gates.
    pub fn configure_masks(&mut self, mode: GateMode, s_init: f64) {
        for gi in 0..self.groups.len() {
            let numel = self.groups[gi].numel();
            let needs_scores = matches!(mode, GateMode::SoftDeterministic | GateMode::StochasticBernoulli);
            let scores = match (needs_scores, self.groups[gi].scores) {
                (true, Some(id)) => {
                    let shape = self.params[self.groups[gi].weight.0].value.shape().to_vec();
                    self.params[id.0].value = Tensor::full(&shape, s_init);
                    self.params[id.0].trainable = true;
                    Some(id)
                }
                (true, None) => {
                    let shape = self.params[self.groups[gi].weight.0].value.shape().to_vec();
                    let id = ParamId(self.params.len());
                    self.params.push(Param::new(
                        format!("{}.scores", self.groups[gi].name),
                        Role::Score,
                        Tensor::full(&shape, s_init),
                    ));
                    Some(id)
                }
                (false, existing) => {
                    if let Some(id) = existing {
                        self.params[id.0].trainable = false;
                    }
                    existing
                }
            };
            let g = &mut self.groups[gi];
            g.scores = if needs_scores { scores } else { g.scores };
            g.mode = mode;
            g.s_init = s_init;
            g.alive = vec![true; numel];
            g.frozen_mask = None;
        }
    }

    pub fn set_straight_through(&mut self, variant: StraightThrough) {
        for g in &mut self.groups {
            g.straight_through = variant;
        }
    }

    /// Freezes (or unfreezes) weights and biases, leaving mask parameters alone.
    pub fn set_weights_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            if p.role != Role::Score {
                p.trainable = trainable;
            }
        }
    }

    pub fn scores(&self, group: usize) -> Option<&Tensor> {
        self.groups[group].scores.map(|id| &self.params[id.0].value)
    }

    /// The binary mask the network currently applies (or would commit to):
    /// `H(s) ∧ alive` for soft gates, `alive` otherwise.
    pub fn current_mask(&self) -> Mask {
        let groups = self
            .groups
            .iter()
            .map(|g| {
                let bits = if let Some(frozen) = &g.frozen_mask {
                    frozen.clone()
                } else {
                    match (g.mode, g.scores) {
                        (GateMode::SoftDeterministic, Some(id)) => hard_mask(self.params[id.0].value.data())
                            .into_iter()
                            .zip(&g.alive)
                            .map(|(h, &a)| h && a)
                            .collect(),
                        _ => g.alive.clone(),
                    }
                };
                GroupMask {
                    name: g.name.clone(),
                    shape: self.params[g.weight.0].value.shape().to_vec(),
                    bits,
                }
            })
            .collect();
        Mask { groups }
    }

    /// Switches to hard gating with the given mask as the fixed pattern.
    pub fn apply_hard_mask(&mut self, mask: &Mask) -> Result<()> {
        self.check_mask(mask)?;
        for (g, gm) in self.groups.iter_mut().zip(&mask.groups) {
            g.mode = GateMode::Hard;
            g.alive = gm.bits.clone();
            g.frozen_mask = None;
            if let Some(id) = g.scores {
                self.params[id.0].trainable = false;
            }
        }
        Ok(())
    }

    pub fn check_mask(&self, mask: &Mask) -> Result<()> {
        if mask.groups.len() != self.groups.len()
            || mask
                .groups
                .iter()
                .zip(&self.groups)
                .any(|(m, g)| m.bits.len() != g.numel())
        {
            return Err(Error::Contract(format!(
                "mask with {} groups does not fit a model with {} maskable groups",
                mask.groups.len(),
                self.groups.len()
            )));
        }
        Ok(())
    }

    fn effective_weight(
        &self,
        tape: &mut Tape,
        g: &MaskedGroup,
        leaves: &[Var],
        ctx: &mut GateCtx,
    ) -> Result<(Var, Option<Var>)> {
        let w = leaves[g.weight.0];
        if let Some(frozen) = &g.frozen_mask {
            return Ok((tape.const_mul(w, bools_to_f64(frozen))?, None));
        }
        let scores = || {
            g.scores
                .map(|id| leaves[id.0])
                .ok_or_else(|| Error::Contract(format!("group {} has no mask parameters", g.name)))
        };
        match g.mode {
            GateMode::None => Ok((w, None)),
            GateMode::Hard => {
                if g.all_alive() {
                    Ok((w, None))
                } else {
                    Ok((tape.const_mul(w, g.alive_factor())?, None))
                }
            }
            GateMode::SoftDeterministic => {
                let s = scores()?;
                let alive = (!g.all_alive()).then_some(g.alive.as_slice());
                let (gated, gate) = soft_gate(tape, w, s, ctx.beta, alive)?;
                Ok((gated, Some(gate)))
            }
            GateMode::StochasticBernoulli => {
                let s = scores()?;
                let gated = stochastic_gate(tape, w, s, &g.alive, g.straight_through, ctx.rng.as_deref_mut())?;
                let mut gate = tape.sigmoid(s)?;
                if !g.all_alive() {
                    gate = tape.const_mul(gate, g.alive_factor())?;
                }
                Ok((gated, Some(gate)))
            }
        }
    }

    /// Records the network on `tape` for a batch `x` of shape `[n, ..input_shape]`.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, ctx: &mut GateCtx) -> Result<Forward> {
        if x.shape().len() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::Dimension(format!(
                "input batch {:?} does not match sample shape {:?}",
                x.shape(),
                self.spec.input_shape
            )));
        }
        let n = x.shape()[0];
        let mut leaves = Vec::with_capacity(self.params.len());
        for p in &self.params {
            leaves.push(tape.leaf(p.value.clone(), ctx.track_grad && p.trainable)?);
        }
        let mut gates = vec![None; self.groups.len()];
        let mut h = tape.constant(x.clone())?;
        for (li, layer) in self.spec.layers.iter().enumerate() {
            h = match layer {
                LayerSpec::Relu => tape.relu(h)?,
                LayerSpec::MaxPool2 => tape.max_pool2(h)?,
                LayerSpec::Flatten => {
                    let features = tape.value(h).numel() / n;
                    tape.reshape(h, &[n, features])?
                }
                LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => {
                    let lp = self.layer_params[li].expect("parameterised layer");
                    let w = match lp.group {
                        Some(gi) => {
                            let (w, gate) = self.effective_weight(tape, &self.groups[gi], &leaves, ctx)?;
                            gates[gi] = gate;
                            w
                        }
                        None => leaves[lp.weight.0],
                    };
                    let z = match layer {
                        LayerSpec::Dense { .. } => tape.matmul(h, w)?,
                        LayerSpec::Conv { stride, padding, .. } => tape.conv2d(h, w, *stride, *padding)?,
                        _ => unreachable!(),
                    };
                    tape.add_bias(z, leaves[lp.bias.0])?
                }
            };
        }
        Ok(Forward {
            logits: h,
            leaves,
            gates,
        })
    }

    /// Cross-entropy plus `λ Σ gate` over every gated group.
    pub fn objective(&self, tape: &mut Tape, fwd: &Forward, labels: &[usize], penalty: GatePenalty) -> Result<Var> {
        let mut loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
        if penalty.lambda != 0.0 {
            for gate in fwd.gates.iter().flatten() {
                let term = gate_penalty_term(tape, *gate, penalty)?;
                loss = tape.add(loss, term)?;
            }
        }
        Ok(loss)
    }

    /// Copies gradients from the tape into every trainable parameter.
    pub fn collect_grads(&mut self, tape: &Tape, fwd: &Forward) {
        for (p, &leaf) in self.params.iter_mut().zip(&fwd.leaves) {
            if p.trainable {
                p.grad = Some(match tape.grad(leaf) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; p.value.numel()],
                });
            } else {
                p.grad = None;
            }
        }
    }

    /// Class predictions for a batch.
    pub fn predict(&self, x: &Tensor, beta: f64) -> Result<Vec<usize>> {
        let mut tape = Tape::default();
        let fwd = self.forward(&mut tape, x, &mut GateCtx::inference(beta))?;
        Ok(argmax_rows(tape.value(fwd.logits)))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
