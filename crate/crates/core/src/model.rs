//! Small networks with quantized inner layers: an MLP, a three-layer CNN and
//! a ResNet-20-shaped network. First and last layers stay full precision.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::quant::{init_scale, quantize_on_tape, quantized_param_on_tape, QuantizedParam, QuantizerSpec};
use crate::tensor::{BatchNormMode, NodeId, Scalar, Tape, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
const MLP_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    CnnSmall,
    Resnet20,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "cnn_small" => Ok(Self::CnnSmall),
            "resnet20" => Ok(Self::Resnet20),
            other => Err(Error::invalid(format!("unknown model `{other}`"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::CnnSmall => "cnn_small",
            Self::Resnet20 => "resnet20",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Full-precision conv/linear weight.
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    /// Scale of a weight quantizer; mirrored into the quantizer spec.
    WeightScale,
    ActScale,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub role: ParamRole,
    pub trainable: bool,
}

/// Latent weights of one quantized layer.
#[derive(Clone, Debug)]
pub struct QuantLayer<T> {
    pub name: String,
    pub param: QuantizedParam<T>,
    /// Index of the scale in `Network::params`.
    pub scale_param: usize,
}

#[derive(Clone, Debug)]
pub struct ActQuant {
    pub name: String,
    pub spec: QuantizerSpec,
    pub scale_param: usize,
    pub calibrated: bool,
}

#[derive(Clone, Debug)]
pub struct BnState<T> {
    pub name: String,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSlot {
    Plain(usize),
    Quantized(usize),
}

#[derive(Clone, Debug)]
enum Stage {
    Conv { weight: WeightSlot, stride: usize, padding: usize },
    Linear { weight: WeightSlot, bias: Option<usize> },
    Bn(usize),
    Relu,
    ActQuant(usize),
    Flatten,
    GlobalAvgPool,
    /// `relu(body(x) + shortcut(x))` with a zero-padded, subsampled shortcut.
    Residual { body: Vec<Stage>, stride: usize, out_channels: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    /// `[C, H, W]` of one input sample.
    pub input: [usize; 3],
    pub num_classes: usize,
    /// 32 disables weight quantization.
    pub bits_w: u32,
    /// 32 disables activation quantization.
    pub bits_a: u32,
    pub weight_scale_trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pass {
    Train,
    Eval,
    Calibrate,
}

/// Node handles of one forward pass.
pub struct ForwardPass {
    pub logits: NodeId,
    /// Per entry of `Network::params`; `None` for parameters not recorded.
    pub param_nodes: Vec<Option<NodeId>>,
    /// Latent-weight leaves, per quantized layer.
    pub latent_nodes: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Network<T: Scalar> {
    pub spec: ModelSpec,
    pub params: Vec<Param<T>>,
    pub quant_layers: Vec<QuantLayer<T>>,
    pub act_quants: Vec<ActQuant>,
    pub bns: Vec<BnState<T>>,
    stages: Vec<Stage>,
}

fn quantizes(bits: u32) -> bool {
    bits < 32
}

struct Builder<'a, T: Scalar> {
    net: Network<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn push_param(&mut self, name: String, tensor: Tensor<T>, role: ParamRole, trainable: bool) -> usize {
        self.net.params.push(Param {
            name,
            tensor,
            role,
            trainable,
        });
        self.net.params.len() - 1
    }

    fn he_init(&mut self, shape: Vec<usize>, fan_in: usize) -> Result<Tensor<T>> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(self.rng))).collect();
        Tensor::new(shape, data)
    }

    fn weight(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, quantized: bool) -> Result<WeightSlot> {
        let w = self.he_init(shape, fan_in)?;
        if !quantized {
            let idx = self.push_param(format!("{name}.weight"), w, ParamRole::Weight, true);
            return Ok(WeightSlot::Plain(idx));
        }
        let bits = self.net.spec.bits_w;
        let trainable = self.net.spec.weight_scale_trainable;
        let probe = QuantizerSpec::weight(bits, 1.0)?;
        let s = init_scale(&w, &probe)?;
        let spec = QuantizerSpec::weight(bits, s)?.with_trainable_scale(trainable);
        let scale_param = self.push_param(
            format!("{name}.weight_scale"),
            Tensor::from_vec(vec![T::from_f64_lossy(s)]),
            ParamRole::WeightScale,
            trainable,
        );
        self.net.quant_layers.push(QuantLayer {
            name: format!("{name}.weight"),
            param: QuantizedParam::new(w, spec)?,
            scale_param,
        });
        Ok(WeightSlot::Quantized(self.net.quant_layers.len() - 1))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize, quantized: bool) -> Result<Stage> {
        let weight = self.weight(name, vec![cout, cin, 3, 3], cin * 9, quantized)?;
        Ok(Stage::Conv {
            weight,
            stride,
            padding: 1,
        })
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize, quantized: bool, bias: bool) -> Result<Stage> {
        let weight = self.weight(name, vec![fout, fin], fin, quantized)?;
        let bias = bias.then(|| self.push_param(format!("{name}.bias"), Tensor::zeros([fout]), ParamRole::Bias, true));
        Ok(Stage::Linear { weight, bias })
    }

    fn bn(&mut self, name: &str, c: usize) -> Stage {
        let gamma = self.push_param(format!("{name}.gamma"), Tensor::full([c], T::one()), ParamRole::BnGamma, true);
        let beta = self.push_param(format!("{name}.beta"), Tensor::zeros([c]), ParamRole::BnBeta, true);
        self.net.bns.push(BnState {
            name: name.to_string(),
            gamma,
            beta,
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
        });
        Stage::Bn(self.net.bns.len() - 1)
    }

    /// Activation quantizer feeding a quantized layer (no-op at 32 bits).
    fn act_quant(&mut self, name: &str, stages: &mut Vec<Stage>) -> Result<()> {
        let bits = self.net.spec.bits_a;
        if !quantizes(bits) {
            return Ok(());
        }
        let scale_param = self.push_param(
            format!("{name}.act_scale"),
            Tensor::from_vec(vec![T::one()]),
            ParamRole::ActScale,
            true,
        );
        self.net.act_quants.push(ActQuant {
            name: format!("{name}.act"),
            spec: QuantizerSpec::activation(bits, 1.0)?.with_trainable_scale(true),
            scale_param,
            calibrated: false,
        });
        stages.push(Stage::ActQuant(self.net.act_quants.len() - 1));
        Ok(())
    }
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.num_classes < 2 || spec.input.contains(&0) {
            return Err(Error::invalid(format!("model spec {spec:?}")));
        }
        for bits in [spec.bits_w, spec.bits_a] {
            if !(1..=8).contains(&bits) && bits != 32 {
                return Err(Error::invalid(format!("bit-width {bits} (use 1-8 or 32)")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            net: Network {
                spec,
                params: vec![],
                quant_layers: vec![],
                act_quants: vec![],
                bns: vec![],
                stages: vec![],
            },
            rng: &mut rng,
        };
        let q = quantizes(spec.bits_w);
        let [c, h, w] = spec.input;
        let k = spec.num_classes;
        let mut st = Vec::new();
        match spec.arch {
            Arch::Mlp => {
                let d = MLP_HIDDEN;
                st.push(Stage::Flatten);
                st.push(b.linear("fc1", c * h * w, d, false, true)?);
                st.push(b.bn("bn1", d));
                st.push(Stage::Relu);
                b.act_quant("fc2", &mut st)?;
                st.push(b.linear("fc2", d, d, q, false)?);
                st.push(b.bn("bn2", d));
                st.push(Stage::Relu);
                b.act_quant("fc3", &mut st)?;
                st.push(b.linear("fc3", d, d, q, false)?);
                st.push(b.bn("bn3", d));
                st.push(Stage::Relu);
                st.push(b.linear("fc4", d, k, false, true)?);
            }
            Arch::CnnSmall => {
                st.push(b.conv("conv1", c, 8, 1, false)?);
                st.push(b.bn("bn1", 8));
                st.push(Stage::Relu);
                b.act_quant("conv2", &mut st)?;
                st.push(b.conv("conv2", 8, 16, 2, q)?);
                st.push(b.bn("bn2", 16));
                st.push(Stage::Relu);
                b.act_quant("conv3", &mut st)?;
                st.push(b.conv("conv3", 16, 32, 2, q)?);
                st.push(b.bn("bn3", 32));
                st.push(Stage::Relu);
                // 3x3 convs with padding 1: n -> (n - 1) / stride + 1
                let down = |n: usize| ((n - 1) / 2 + 1 - 1) / 2 + 1;
                st.push(Stage::Flatten);
                st.push(b.linear("fc", 32 * down(h) * down(w), k, false, true)?);
            }
            Arch::Resnet20 => {
                st.push(b.conv("conv1", c, 16, 1, false)?);
                st.push(b.bn("bn1", 16));
                st.push(Stage::Relu);
                let mut cin = 16;
                for (si, cout) in [16usize, 32, 64].into_iter().enumerate() {
                    for bi in 0..3 {
                        let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                        let name = format!("layer{}.{}", si + 1, bi);
                        let mut body = Vec::new();
                        b.act_quant(&format!("{name}.conv1"), &mut body)?;
                        body.push(b.conv(&format!("{name}.conv1"), cin, cout, stride, q)?);
                        body.push(b.bn(&format!("{name}.bn1"), cout));
                        body.push(Stage::Relu);
                        b.act_quant(&format!("{name}.conv2"), &mut body)?;
                        body.push(b.conv(&format!("{name}.conv2"), cout, cout, 1, q)?);
                        body.push(b.bn(&format!("{name}.bn2"), cout));
                        st.push(Stage::Residual {
                            body,
                            stride,
                            out_channels: cout,
                        });
                        cin = cout;
                    }
                }
                st.push(Stage::GlobalAvgPool);
                st.push(b.linear("fc", 64, k, false, true)?);
            }
        }
        let mut net = b.net;
        net.stages = st;
        Ok(net)
    }

    pub fn num_parameters(&self) -> usize {
        let plain: usize = self
            .params
            .iter()
            .filter(|p| matches!(p.role, ParamRole::Weight | ParamRole::Bias | ParamRole::BnGamma | ParamRole::BnBeta))
            .map(|p| p.tensor.numel())
            .sum();
        plain + self.quant_layers.iter().map(|l| l.param.len()).sum::<usize>()
    }

    /// Copies scale parameters into the quantizer specs and re-quantizes
    /// every latent tensor. Returns the transitions per quantized layer.
    pub fn requantize(&mut self) -> Result<Vec<usize>> {
        for a in &mut self.act_quants {
            let v = self.params[a.scale_param].tensor.data()[0].as_f64();
            a.spec.set_scale(v.max(f64::MIN_POSITIVE))?;
        }
        let mut out = Vec::with_capacity(self.quant_layers.len());
        for l in &mut self.quant_layers {
            let v = self.params[l.scale_param].tensor.data()[0].as_f64();
            if v != l.param.spec.scale() {
                l.param.spec.set_scale(v.max(f64::MIN_POSITIVE))?;
            }
            out.push(l.param.refresh()?);
        }
        Ok(out)
    }

    /// Keeps scale parameters strictly positive after an optimizer step.
    pub fn clamp_scales(&mut self) {
        for p in &mut self.params {
            if matches!(p.role, ParamRole::WeightScale | ParamRole::ActScale) {
                let v = &mut p.tensor.data_mut()[0];
                let floor = T::from_f64_lossy(1e-8);
                if !(*v > floor) {
                    *v = floor;
                }
            }
        }
    }

    /// Runs the network on `x` (`[N, C, H, W]`). In train mode batch-norm
    /// running statistics are updated and uncalibrated activation scales are
    /// initialized from the batch.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Tensor<T>, mode: Mode) -> Result<ForwardPass> {
        let train = mode == Mode::Train;
        if train && self.act_quants.iter().any(|a| !a.calibrated) {
            self.calibrate(x.clone())?;
        }
        let mut param_nodes = vec![None; self.params.len()];
        for (i, p) in self.params.iter().enumerate() {
            param_nodes[i] = Some(tape.leaf(p.tensor.clone(), train && p.trainable));
        }
        let mut latent_nodes = Vec::with_capacity(self.quant_layers.len());
        let mut weight_nodes = Vec::with_capacity(self.quant_layers.len());
        for l in &self.quant_layers {
            let latent = tape.leaf(l.param.latent.clone(), train);
            let scale = param_nodes[l.scale_param].expect("recorded");
            weight_nodes.push(quantized_param_on_tape(tape, &l.param, latent, scale)?);
            latent_nodes.push(latent);
        }
        let input = tape.leaf(x, false);
        let stages = std::mem::take(&mut self.stages);
        let pass = if train { Pass::Train } else { Pass::Eval };
        let result = self.run(tape, &stages, input, &param_nodes, &weight_nodes, pass);
        self.stages = stages;
        Ok(ForwardPass {
            logits: result?,
            param_nodes,
            latent_nodes,
        })
    }

    /// Sets every uncalibrated activation scale from one batch, in layer
    /// order, using batch statistics without touching running statistics.
    fn calibrate(&mut self, x: Tensor<T>) -> Result<()> {
        let mut tape = Tape::new();
        let params: Vec<Option<NodeId>> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let is_act_scale = self.act_quants.iter().any(|a| a.scale_param == i);
                (!is_act_scale).then(|| tape.leaf(p.tensor.clone(), false))
            })
            .collect();
        let mut weights = Vec::with_capacity(self.quant_layers.len());
        for l in &self.quant_layers {
            let latent = tape.leaf(l.param.latent.clone(), false);
            let scale = params[l.scale_param].expect("recorded");
            weights.push(quantized_param_on_tape(&mut tape, &l.param, latent, scale)?);
        }
        let input = tape.leaf(x, false);
        let stages = std::mem::take(&mut self.stages);
        let result = self.run(&mut tape, &stages, input, &params, &weights, Pass::Calibrate);
        self.stages = stages;
        result.map(|_| ())
    }

    fn run(
        &mut self,
        tape: &mut Tape<T>,
        stages: &[Stage],
        mut x: NodeId,
        params: &[Option<NodeId>],
        weights: &[NodeId],
        pass: Pass,
    ) -> Result<NodeId> {
        let node = |slot: WeightSlot| match slot {
            WeightSlot::Plain(i) => params[i].expect("recorded"),
            WeightSlot::Quantized(i) => weights[i],
        };
        for stage in stages {
            x = match stage {
                Stage::Conv { weight, stride, padding } => tape.conv2d(x, node(*weight), *stride, *padding)?,
                Stage::Linear { weight, bias } => {
                    let y = tape.linear(x, node(*weight))?;
                    match bias {
                        Some(b) => tape.add_bias(y, params[*b].expect("recorded"))?,
                        None => y,
                    }
                }
                Stage::Bn(i) => self.batch_norm(tape, *i, x, params, pass)?,
                Stage::Relu => tape.relu(x),
                Stage::ActQuant(i) => {
                    let a = &mut self.act_quants[*i];
                    if pass == Pass::Calibrate && !a.calibrated {
                        let s = init_scale(tape.value(x), &a.spec)?;
                        a.spec.set_scale(s)?;
                        self.params[a.scale_param].tensor.data_mut()[0] = T::from_f64_lossy(s);
                        a.calibrated = true;
                    }
                    let scale = match params[a.scale_param] {
                        Some(id) => id,
                        None => tape.leaf(self.params[a.scale_param].tensor.clone(), false),
                    };
                    quantize_on_tape(tape, x, scale, &a.spec)?.0
                }
                Stage::Flatten => tape.flatten(x)?,
                Stage::GlobalAvgPool => tape.global_avg_pool(x)?,
                Stage::Residual {
                    body,
                    stride,
                    out_channels,
                } => {
                    let y = self.run(tape, body, x, params, weights, pass)?;
                    let short = if *stride == 1 && tape.shape(x)[1] == *out_channels {
                        x
                    } else {
                        tape.shortcut_pad(x, *stride, *out_channels)?
                    };
                    let sum = tape.add(y, short)?;
                    tape.relu(sum)
                }
            };
        }
        Ok(x)
    }

    fn batch_norm(
        &mut self,
        tape: &mut Tape<T>,
        i: usize,
        x: NodeId,
        params: &[Option<NodeId>],
        pass: Pass,
    ) -> Result<NodeId> {
        let bn = &mut self.bns[i];
        let (gamma, beta) = (params[bn.gamma].expect("recorded"), params[bn.beta].expect("recorded"));
        let eps = T::from_f64_lossy(BN_EPS);
        let mode = if pass != Pass::Eval {
            BatchNormMode::Train { eps }
        } else {
            BatchNormMode::Eval {
                mean: bn.running_mean.clone(),
                var: bn.running_var.clone(),
                eps,
            }
        };
        let count = tape.value(x).numel() / tape.shape(x)[1];
        let (y, stats) = tape.batch_norm(x, gamma, beta, mode)?;
        if let (Pass::Train, Some((mean, var))) = (pass, stats) {
            let m = T::from_f64_lossy(BN_MOMENTUM);
            let one = T::one();
            let unbias = if count > 1 {
                T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
            } else {
                one
            };
            for (r, v) in bn.running_mean.iter_mut().zip(&mean) {
                *r = m * *r + (one - m) * *v;
            }
            for (r, v) in bn.running_var.iter_mut().zip(&var) {
                *r = m * *r + (one - m) * *v * unbias;
            }
        }
        Ok(y)
    }

    /// Batched inference in eval mode; returns predicted classes.
    pub fn predict(&mut self, x: Tensor<T>) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, x, Mode::Eval)?;
        let logits = tape.value(fp.logits);
        let k = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect())
    }
}
