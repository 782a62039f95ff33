//! Binary checkpoints: named tensors, quantizer specs and controller states.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "QATCKPT\0"
//! version  u32      1
//! count    u32      number of tensors, then per tensor:
//!   name   u32 length + UTF-8 bytes
//!   dtype  u8       0 = f32, 1 = f64
//!   ndim   u32, then ndim x u64 extents
//!   data   product(extents) values of dtype
//! count    u32      number of quantizer specs, then per spec:
//!   name   u32 length + UTF-8 bytes
//!   bits   u32
//!   role   u8       0 = weight, 1 = activation
//!   disc   u8       0 = round, 1 = signum
//!   alpha, beta, gamma, scale  f64
//!   scale_trainable  u8
//! count    u32      number of controllers, then per controller:
//!   name   u32 length + UTF-8 bytes
//!   rule   u8       0 = additive, 1 = multiplicative, 2 = momentum
//!   rule_momentum, talr, gain, tr_momentum, running_tr  f64
//!   skipped_updates  u64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Network, ParamRole};
use crate::quant::{init_scale, Discretization, QuantRole, QuantizerSpec};
use crate::schedule::{TrController, UpdateRule};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"QATCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    /// 32 or 64; values are held in f64 either way.
    pub bits: u32,
    pub tensor: Tensor<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub specs: Vec<(String, QuantizerSpec)>,
    pub controllers: Vec<TrController>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt(format!("bad UTF-8 name near byte {}", self.pos)))
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut buf, &t.name);
            buf.push(u8::from(t.bits == 64));
            buf.extend_from_slice(&(t.tensor.shape().len() as u32).to_le_bytes());
            for &d in t.tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.tensor.data() {
                if t.bits == 64 {
                    buf.extend_from_slice(&v.to_le_bytes());
                } else {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        buf.extend_from_slice(&(self.specs.len() as u32).to_le_bytes());
        for (name, s) in &self.specs {
            put_str(&mut buf, name);
            buf.extend_from_slice(&s.bits.to_le_bytes());
            buf.push(u8::from(s.role == QuantRole::Activation));
            buf.push(u8::from(s.discretization == Discretization::Signum));
            for v in [s.alpha, s.beta, s.gamma, s.scale()] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.push(u8::from(s.scale_trainable));
        }
        buf.extend_from_slice(&(self.controllers.len() as u32).to_le_bytes());
        for c in &self.controllers {
            put_str(&mut buf, &c.layer_id);
            let (tag, m) = match c.rule {
                UpdateRule::Additive => (0u8, 0.0),
                UpdateRule::Multiplicative => (1, 0.0),
                UpdateRule::Momentum(m) => (2, m),
            };
            buf.push(tag);
            for v in [m, c.talr, c.gain, c.tr_momentum, c.running_tr] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&(c.skipped_updates as u64).to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let bits = match r.u8()? {
                0 => 32,
                1 => 64,
                other => return Err(corrupt(format!("tensor `{name}`: unknown dtype {other}"))),
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| if bits == 64 { r.f64() } else { r.f32().map(f64::from) })
                .collect::<Result<Vec<_>>>()?;
            ck.tensors.push(NamedTensor {
                name,
                bits,
                tensor: Tensor::new(shape, data)?,
            });
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let bits = r.u32()?;
            let role = if r.u8()? == 1 { QuantRole::Activation } else { QuantRole::Weight };
            let _disc = r.u8()?;
            let (_a, _b, _g, scale) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let trainable = r.u8()? == 1;
            let spec = QuantizerSpec::new(bits, role, scale)
                .map_err(|e| corrupt(format!("spec `{name}`: {e}")))?
                .with_trainable_scale(trainable);
            ck.specs.push((name, spec));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let tag = r.u8()?;
            let (m, talr, gain, tr_m, running) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let skipped = r.u64()? as usize;
            let rule = match tag {
                0 => UpdateRule::Additive,
                1 => UpdateRule::Multiplicative,
                2 => UpdateRule::Momentum(m),
                other => return Err(corrupt(format!("controller `{name}`: unknown rule {other}"))),
            };
            let mut c = TrController::new(name, talr, gain, rule, tr_m)?;
            c.running_tr = running;
            c.skipped_updates = skipped;
            ck.controllers.push(c);
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Captures every tensor, quantizer spec and controller of a run.
    pub fn capture<T: Scalar>(net: &Network<T>, controllers: &[TrController]) -> Self {
        let bits = T::BITS;
        let mut ck = Checkpoint::default();
        let mut push = |name: String, t: Tensor<f64>| ck.tensors.push(NamedTensor { name, bits, tensor: t });
        for p in &net.params {
            push(p.name.clone(), p.tensor.cast());
        }
        for l in &net.quant_layers {
            push(l.name.clone(), l.param.latent.cast());
        }
        for bn in &net.bns {
            let c = bn.running_mean.len();
            let mean = bn.running_mean.iter().map(|v| v.as_f64()).collect();
            let var = bn.running_var.iter().map(|v| v.as_f64()).collect();
            push(format!("{}.running_mean", bn.name), Tensor::new([c], mean).expect("1-d"));
            push(format!("{}.running_var", bn.name), Tensor::new([c], var).expect("1-d"));
        }
        for l in &net.quant_layers {
            ck.specs.push((l.name.clone(), l.param.spec.clone()));
        }
        for a in &net.act_quants {
            ck.specs.push((a.name.clone(), a.spec.clone()));
        }
        ck.controllers = controllers.to_vec();
        ck
    }
}

/// Copies weights, biases, batch-norm parameters and running statistics
/// from a checkpoint (typically a full-precision run) into `net`, then
/// re-initializes weight-quantizer scales from the loaded latents and
/// resets the transition baseline. Activation scales are recalibrated on
/// the next training batch.
pub fn init_from_pretrained<T: Scalar>(net: &mut Network<T>, ck: &Checkpoint) -> Result<()> {
    let mut problems = Vec::new();
    let mut fetch = |name: &str, shape: &[usize]| -> Option<Tensor<T>> {
        match ck.tensor(name) {
            None => {
                problems.push(format!("{name}: missing"));
                None
            }
            Some(t) if t.tensor.shape() != shape => {
                problems.push(format!("{name}: expected {:?}, found {:?}", shape, t.tensor.shape()));
                None
            }
            Some(t) => Some(t.tensor.cast()),
        }
    };
    let mut params = Vec::new();
    for (i, p) in net.params.iter().enumerate() {
        if matches!(p.role, ParamRole::Weight | ParamRole::Bias | ParamRole::BnGamma | ParamRole::BnBeta) {
            if let Some(t) = fetch(&p.name, p.tensor.shape()) {
                params.push((i, t));
            }
        }
    }
    let mut latents = Vec::new();
    for (i, l) in net.quant_layers.iter().enumerate() {
        if let Some(t) = fetch(&l.name, l.param.latent.shape()) {
            latents.push((i, t));
        }
    }
    let mut stats = Vec::new();
    for (i, bn) in net.bns.iter().enumerate() {
        let c = bn.running_mean.len();
        let mean = fetch(&format!("{}.running_mean", bn.name), &[c]);
        let var = fetch(&format!("{}.running_var", bn.name), &[c]);
        if let (Some(m), Some(v)) = (mean, var) {
            stats.push((i, m, v));
        }
    }
    if !problems.is_empty() {
        return Err(corrupt(format!("incompatible checkpoint: {}", problems.join("; "))));
    }
    for (i, t) in params {
        net.params[i].tensor = t;
    }
    for (i, t) in latents {
        let layer = &mut net.quant_layers[i];
        layer.param.latent = t;
        let s = init_scale(&layer.param.latent, &layer.param.spec)?;
        layer.param.spec.set_scale(s)?;
        net.params[layer.scale_param].tensor.data_mut()[0] = T::from_f64_lossy(s);
        layer.param.rebase()?;
    }
    for (i, m, v) in stats {
        net.bns[i].running_mean = m.into_data();
        net.bns[i].running_var = v.into_data();
    }
    for a in &mut net.act_quants {
        a.calibrated = false;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelSpec};

    fn spec(bits: u32) -> ModelSpec {
        ModelSpec {
            arch: Arch::CnnSmall,
            input: [1, 8, 8],
            num_classes: 4,
            bits_w: bits,
            bits_a: bits,
            weight_scale_trainable: false,
        }
    }

    #[test]
    fn bytes_roundtrip() {
        let net = Network::<f32>::new(spec(2), 3).unwrap();
        let c = TrController::new("conv2.weight", 0.1, 0.1, UpdateRule::Momentum(0.9), 0.99).unwrap();
        let ck = Checkpoint::capture(&net, &[c]);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut bytes = ck.to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(&ck.to_bytes()[..40]).is_err());
    }

    #[test]
    fn pretrained_fp_into_quantized() {
        let fp = Network::<f32>::new(spec(32), 5).unwrap();
        let ck = Checkpoint::capture(&fp, &[]);
        let mut q = Network::<f32>::new(spec(2), 9).unwrap();
        init_from_pretrained(&mut q, &ck).unwrap();
        let fp_w = ck.tensor("conv2.weight").unwrap().tensor.cast::<f32>();
        assert_eq!(q.quant_layers[0].param.latent, fp_w);
        assert_eq!(q.quant_layers[0].param.codes(), q.quant_layers[0].param.prev_codes());
    }

    #[test]
    fn mismatched_layers_are_listed() {
        let other = ModelSpec {
            num_classes: 7,
            ..spec(32)
        };
        let ck = Checkpoint::capture(&Network::<f32>::new(other, 1).unwrap(), &[]);
        let mut q = Network::<f32>::new(spec(2), 1).unwrap();
        let err = init_from_pretrained(&mut q, &ck).unwrap_err().to_string();
        assert!(err.contains("fc.weight") && err.contains("fc.bias"), "{err}");
        assert!(Checkpoint::load(Path::new("/nonexistent/ckpt.bin")).is_err());
    }
}
