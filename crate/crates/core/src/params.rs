//! Trainable parameters, their gradients, and the checkpoint format.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Module {
    Encoder,
    Classifier,
    Projector,
    Discriminator,
    MiStatistic,
}

impl Module {
    pub const ALL: [Module; 5] = [
        Module::Encoder,
        Module::Classifier,
        Module::Projector,
        Module::Discriminator,
        Module::MiStatistic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::Encoder => "encoder",
            Module::Classifier => "classifier",
            Module::Projector => "projector",
            Module::Discriminator => "discriminator",
            Module::MiStatistic => "mi_statistic",
        }
    }

    fn from_name(s: &str) -> Option<Module> {
        Module::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub module: Module,
    pub layer: usize,
    pub bias: bool,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = if self.bias { "bias" } else { "weight" };
        write!(f, "{}.{}.{}", self.module.name(), self.layer, kind)
    }
}

/// Affine layer `x W + b` with `W: in×out` and `b: 1×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DMatrix<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: DMatrix::zeros(input, output),
            bias: DMatrix::zeros(1, output),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Dense {
            weight: DMatrix::from_fn(input, output, |_, _| rng.random_range(-limit..limit)),
            bias: DMatrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Layer widths of every sub-network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    /// Encoder output widths, one per graph-convolution layer.
    pub encoder_dims: Vec<usize>,
    pub num_classes: usize,
    pub classifier_hidden: usize,
    pub projector_hidden: usize,
    pub projector_dim: usize,
    pub discriminator_hidden: usize,
    pub mi_hidden: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Architecture {
            input_dim,
            encoder_dims: vec![128, 16],
            num_classes,
            classifier_hidden: 16,
            projector_hidden: 64,
            projector_dim: 16,
            discriminator_hidden: 32,
            mi_hidden: 32,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.encoder_dims.last().expect("at least one encoder layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Dense>,
    pub classifier: Vec<Dense>,
    pub projector: Vec<Dense>,
    pub discriminator: Vec<Dense>,
    pub mi_statistic: Vec<Dense>,
}

fn chain(dims: &[usize], rng: &mut ChaCha8Rng) -> Vec<Dense> {
    dims.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect()
}

impl ModelParams {
    /// Seeded Glorot initialization of every sub-network.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.encoder_dims.is_empty() {
            return Err(Error::InvalidArgument("encoder needs at least one layer".into()));
        }
        let d = arch.embedding_dim();
        let c = arch.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc_dims = vec![arch.input_dim];
        enc_dims.extend(&arch.encoder_dims);
        Ok(ModelParams {
            encoder: chain(&enc_dims, &mut rng),
            classifier: chain(&[d, arch.classifier_hidden, c], &mut rng),
            projector: chain(&[d, arch.projector_hidden, arch.projector_dim], &mut rng),
            discriminator: chain(&[d + c, arch.discriminator_hidden, 1], &mut rng),
            mi_statistic: chain(&[arch.projector_dim + c, arch.mi_hidden, 1], &mut rng),
        })
    }

    pub fn module(&self, m: Module) -> &[Dense] {
        match m {
            Module::Encoder => &self.encoder,
            Module::Classifier => &self.classifier,
            Module::Projector => &self.projector,
            Module::Discriminator => &self.discriminator,
            Module::MiStatistic => &self.mi_statistic,
        }
    }

    pub fn module_mut(&mut self, m: Module) -> &mut Vec<Dense> {
        match m {
            Module::Encoder => &mut self.encoder,
            Module::Classifier => &mut self.classifier,
            Module::Projector => &mut self.projector,
            Module::Discriminator => &mut self.discriminator,
            Module::MiStatistic => &mut self.mi_statistic,
        }
    }

    pub fn get(&self, id: ParamId) -> &DMatrix<f64> {
        let layer = &self.module(id.module)[id.layer];
        if id.bias {
            &layer.bias
        } else {
            &layer.weight
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DMatrix<f64> {
        let layer = &mut self.module_mut(id.module)[id.layer];
        if id.bias {
            &mut layer.bias
        } else {
            &mut layer.weight
        }
    }

    /// Every parameter tensor, in checkpoint order.
    pub fn ids(&self) -> Vec<ParamId> {
        Module::ALL
            .into_iter()
            .flat_map(|module| {
                (0..self.module(module).len()).flat_map(move |layer| {
                    [false, true].map(|bias| ParamId { module, layer, bias })
                })
            })
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |layers: &[Dense]| -> Vec<Dense> {
            layers.iter().map(|l| Dense::zeros(l.input_dim(), l.output_dim())).collect()
        };
        ModelParams {
            encoder: z(&self.encoder),
            classifier: z(&self.classifier),
            projector: z(&self.projector),
            discriminator: z(&self.discriminator),
            mi_statistic: z(&self.mi_statistic),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ids().into_iter().all(|id| self.get(id).iter().all(|v| v.is_finite()))
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.last().map_or(0, Dense::output_dim)
    }

    /// Binary checkpoint: magic, tensor count, then per tensor its name,
    /// shape and row-major little-endian f64 values.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let ids = self.ids();
        out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
        for id in ids {
            let name = id.to_string();
            let t = self.get(id);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    out.extend_from_slice(&t[(r, c)].to_le_bytes());
                }
            }
        }
        out
    }

    /// Rebuilds parameters from a checkpoint, inferring layer shapes.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let tensors = read_tensors(bytes)?;
        let mut params = ModelParams {
            encoder: Vec::new(),
            classifier: Vec::new(),
            projector: Vec::new(),
            discriminator: Vec::new(),
            mi_statistic: Vec::new(),
        };
        for (id, t) in tensors {
            let layers = params.module_mut(id.module);
            if id.layer == layers.len() && !id.bias {
                layers.push(Dense { weight: t, bias: DMatrix::zeros(0, 0) });
            } else if id.layer + 1 == layers.len() && id.bias {
                let layer = &mut layers[id.layer];
                if t.shape() != (1, layer.output_dim()) {
                    return Err(Error::Data(format!("checkpoint tensor {id} has shape {:?}", t.shape())));
                }
                layer.bias = t;
            } else {
                return Err(Error::Data(format!("checkpoint tensor {id} out of order")));
            }
        }
        for m in Module::ALL {
            let layers = params.module(m);
            if layers.iter().any(|l| l.bias.nrows() != 1) {
                return Err(Error::Data(format!("checkpoint {} layer missing bias", m.name())));
            }
            if layers.windows(2).any(|w| w[0].output_dim() != w[1].input_dim()) {
                return Err(Error::Data(format!("checkpoint {} layer dimensions do not chain", m.name())));
            }
        }
        if params.encoder.is_empty() {
            return Err(Error::Data("checkpoint has no encoder layers".into()));
        }
        Ok(params)
    }

    /// Overwrites `self` from a checkpoint whose shapes must match exactly.
    pub fn load_checkpoint_into(&mut self, bytes: &[u8]) -> Result<()> {
        let loaded = ModelParams::from_checkpoint_bytes(bytes)?;
        if loaded.ids() != self.ids() {
            return Err(Error::Data("checkpoint tensor names differ from model".into()));
        }
        for id in self.ids() {
            if loaded.get(id).shape() != self.get(id).shape() {
                return Err(Error::Data(format!(
                    "shape mismatch for {id}: checkpoint {:?}, model {:?}",
                    loaded.get(id).shape(),
                    self.get(id).shape()
                )));
            }
        }
        *self = loaded;
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ModelParams::from_checkpoint_bytes(&bytes)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GTCKPT01";

fn read_tensors(bytes: &[u8]) -> Result<Vec<(ParamId, DMatrix<f64>)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint file".into()));
    }
    let count = cur.u64()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Data("checkpoint name is not utf-8".into()))?
            .to_string();
        let id = parse_param_name(&name)?;
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let len = rows.checked_mul(cols).ok_or_else(|| Error::Data("tensor too large".into()))?;
        let raw = cur.take(len.checked_mul(8).ok_or_else(|| Error::Data("tensor too large".into()))?)?;
        let vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        out.push((id, DMatrix::from_row_iterator(rows, cols, vals)));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Data("trailing bytes in checkpoint".into()));
    }
    Ok(out)
}

fn parse_param_name(name: &str) -> Result<ParamId> {
    let bad = || Error::Data(format!("bad tensor name `{name}`"));
    let mut parts = name.split('.');
    let module = parts.next().and_then(Module::from_name).ok_or_else(bad)?;
    let layer = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let bias = match parts.next() {
        Some("weight") => false,
        Some("bias") => true,
        _ => return Err(bad()),
    };
    if parts.next().is_some() {
        return Err(bad());
    }
    Ok(ParamId { module, layer, bias })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// One gradient tensor per parameter tensor, shape-congruent with [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    grads: ModelParams,
}

impl GradientBundle {
    pub fn zeros_for(params: &ModelParams) -> Self {
        GradientBundle { grads: params.zeros_like() }
    }

    pub fn get(&self, id: ParamId) -> &DMatrix<f64> {
        self.grads.get(id)
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &DMatrix<f64>) {
        *self.grads.get_mut(id) += g;
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.grads.ids()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.is_finite()
    }

    pub fn module_norm(&self, m: Module) -> f64 {
        self.grads
            .module(m)
            .iter()
            .map(|l| l.weight.norm_squared() + l.bias.norm_squared())
            .sum::<f64>()
            .sqrt()
    }
}
