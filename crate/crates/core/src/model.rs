//! Stacked state-space sequence classifier.
//!
//! Architecture: a per-timestep linear encoder from the input channels to
//! `n_filters`, then `n_layers` blocks of {independent SSM filter over time,
//! GELU, linear mix across filters, dropout, residual add}, then a linear
//! projection to `n_classes` followed by mean pooling over time. The binary
//! head trains with 2-class softmax cross-entropy; the multilabel head with
//! independent per-attribute sigmoids, because attributes co-occur.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::ssm::{RawDiagSsm, STABILITY_MARGIN};
use crate::tensor::{Tape, TensorError, TensorId};

/// Below this sequence length the causal convolution stays on the direct
/// path; above it the FFT path wins.
const FFT_LEN_THRESHOLD: usize = 64;

const CHECKPOINT_MAGIC: &[u8; 8] = b"ONSETKP1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input length {got} does not match batch {batch} x clip_len {len} x channels {ch}")]
    InputShape {
        got: usize,
        batch: usize,
        len: usize,
        ch: usize,
    },
    #[error("non-finite value in model input")]
    NonFiniteInput,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Output head of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Two-class softmax; class 1 is seizure.
    SoftmaxBinary,
    /// Independent per-attribute sigmoids.
    MultilabelSigmoid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_filters: usize,
    pub state_dim: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub input_channels: usize,
    pub clip_len: usize,
    pub head_mode: HeadMode,
    /// One name per class. Binary: `["non-seizure", "seizure"]`. Multilabel:
    /// the attribute names being classified, which must include `seizure`.
    pub class_names: Vec<String>,
}

impl ModelConfig {
    /// Paper-scale defaults for the binary head.
    pub fn paper_binary() -> Self {
        ModelConfig {
            n_layers: 4,
            n_filters: 128,
            state_dim: 64,
            n_classes: 2,
            dropout: 0.1,
            input_channels: 19,
            clip_len: 12_000,
            head_mode: HeadMode::SoftmaxBinary,
            class_names: vec!["non-seizure".into(), "seizure".into()],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0
            || self.n_filters == 0
            || self.input_channels == 0
            || self.clip_len == 0
        {
            return bad("all counts must be positive".into());
        }
        if self.state_dim == 0 || self.state_dim % 2 != 0 {
            return bad(format!(
                "state_dim must be positive and even, got {}",
                self.state_dim
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        if self.class_names.len() != self.n_classes {
            return bad(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.n_classes
            ));
        }
        match self.head_mode {
            HeadMode::SoftmaxBinary => {
                if self.n_classes != 2 {
                    return bad(format!(
                        "binary head needs 2 classes, got {}",
                        self.n_classes
                    ));
                }
            }
            HeadMode::MultilabelSigmoid => {
                // A single-attribute subset (just seizure) is allowed; it is
                // the degenerate case that reduces to binary training.
                if self.n_classes == 0 {
                    return bad("multilabel head needs at least one class".into());
                }
                if self.seizure_class_index().is_none() {
                    return bad("multilabel class names must include 'seizure'".into());
                }
            }
        }
        Ok(())
    }

    /// Index of the seizure class in the logit vector.
    pub fn seizure_class_index(&self) -> Option<usize> {
        match self.head_mode {
            HeadMode::SoftmaxBinary => Some(1),
            HeadMode::MultilabelSigmoid => self.class_names.iter().position(|n| n == "seizure"),
        }
    }

    /// Parameter names and shapes, derivable from the config alone.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (c, f, m, k) = (
            self.input_channels,
            self.n_filters,
            self.state_dim / 2,
            self.n_classes,
        );
        let mut specs = vec![
            ("encoder.weight".to_string(), vec![c, f]),
            ("encoder.bias".to_string(), vec![f]),
        ];
        for l in 0..self.n_layers {
            for field in ["a_raw", "theta", "b_re", "b_im", "c_re", "c_im"] {
                specs.push((format!("layers.{l}.ssm.{field}"), vec![f, m]));
            }
            specs.push((format!("layers.{l}.ssm.d"), vec![f]));
            specs.push((format!("layers.{l}.mix.weight"), vec![f, f]));
            specs.push((format!("layers.{l}.mix.bias"), vec![f]));
        }
        specs.push(("head.weight".to_string(), vec![f, k]));
        specs.push(("head.bias".to_string(), vec![k]));
        specs
    }

    /// Total learnable parameter count implied by the config.
    pub fn parameter_count(&self) -> usize {
        self.parameter_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct NamedParam<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// The classifier: config plus its parameters, owned outside any tape.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: Vec<NamedParam<T>>,
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    /// `[batch, n_classes]` class logits (projection then temporal mean).
    pub logits: TensorId,
    /// `[batch, n_filters]` mean-pooled penultimate features.
    pub pooled: TensorId,
    /// Leaf ids of the parameters, in `Model::params` order.
    pub param_ids: Vec<TensorId>,
}

/// Deterministically initialize a model from a seed.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>, ModelError> {
    cfg.validate()?;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // Draws stay in f64 so a given seed yields the same parameters at both
    // precisions.
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let mut params: Vec<NamedParam<T>> = Vec::new();
    let push_gauss = |name: String,
                          shape: Vec<usize>,
                          scale: f64,
                          rng: &mut rand_chacha::ChaCha8Rng,
                          params: &mut Vec<NamedParam<T>>| {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of_f64(gauss(rng) * scale)).collect();
        params.push(NamedParam { name, shape, data });
    };
    let push_zeros = |name: String, shape: Vec<usize>, params: &mut Vec<NamedParam<T>>| {
        let n: usize = shape.iter().product();
        params.push(NamedParam {
            name,
            shape,
            data: vec![T::zero(); n],
        });
    };

    let (c, f, half) = (cfg.input_channels, cfg.n_filters, cfg.state_dim / 2);
    push_gauss(
        "encoder.weight".into(),
        vec![c, f],
        1.0 / (c as f64).sqrt(),
        &mut rng,
        &mut params,
    );
    push_zeros("encoder.bias".into(), vec![f], &mut params);
    for l in 0..cfg.n_layers {
        let mut a_raw = Vec::with_capacity(f * half);
        let mut theta = Vec::with_capacity(f * half);
        let mut b_re = Vec::with_capacity(f * half);
        let mut b_im = Vec::with_capacity(f * half);
        let mut c_re = Vec::with_capacity(f * half);
        let mut c_im = Vec::with_capacity(f * half);
        let mut d_skip = Vec::with_capacity(f);
        for _ in 0..f {
            let raw: RawDiagSsm<T> = RawDiagSsm::init(cfg.state_dim, &mut rng)
                .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
            a_raw.extend_from_slice(&raw.a_raw);
            theta.extend_from_slice(&raw.theta);
            b_re.extend_from_slice(&raw.b_re);
            b_im.extend_from_slice(&raw.b_im);
            c_re.extend_from_slice(&raw.c_re);
            c_im.extend_from_slice(&raw.c_im);
            d_skip.push(raw.d);
        }
        for (field, data) in [
            ("a_raw", a_raw),
            ("theta", theta),
            ("b_re", b_re),
            ("b_im", b_im),
            ("c_re", c_re),
            ("c_im", c_im),
        ] {
            params.push(NamedParam {
                name: format!("layers.{l}.ssm.{field}"),
                shape: vec![f, half],
                data,
            });
        }
        params.push(NamedParam {
            name: format!("layers.{l}.ssm.d"),
            shape: vec![f],
            data: d_skip,
        });
        push_gauss(
            format!("layers.{l}.mix.weight"),
            vec![f, f],
            1.0 / (f as f64).sqrt(),
            &mut rng,
            &mut params,
        );
        push_zeros(format!("layers.{l}.mix.bias"), vec![f], &mut params);
    }
    push_gauss(
        "head.weight".into(),
        vec![f, cfg.n_classes],
        1.0 / (f as f64).sqrt(),
        &mut rng,
        &mut params,
    );
    push_zeros("head.bias".into(), vec![cfg.n_classes], &mut params);

    let model = Model {
        cfg: cfg.clone(),
        params,
    };
    debug_assert_eq!(
        model
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect::<Vec<_>>(),
        cfg.parameter_specs()
    );
    Ok(model)
}

impl<T: Scalar> Model<T> {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&NamedParam<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Flatten all parameters into one vector (finite-difference probes).
    pub fn flatten_params(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| p.data.iter().copied())
            .collect()
    }

    /// Overwrite all parameters from one flat vector.
    pub fn set_flat_params(&mut self, flat: &[T]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
    }

    /// Run the forward pass on a tape. `input` is `[batch, clip_len,
    /// input_channels]` row-major. Train mode applies dropout and marks the
    /// parameters for gradients; eval mode is deterministic.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        input: &[T],
        batch: usize,
        train_mode: bool,
        rng: &mut R,
    ) -> Result<Forward, ModelError> {
        let (len, ch, f) = (
            self.cfg.clip_len,
            self.cfg.input_channels,
            self.cfg.n_filters,
        );
        if input.len() != batch * len * ch || batch == 0 {
            return Err(ModelError::InputShape {
                got: input.len(),
                batch,
                len,
                ch,
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput);
        }
        let use_fft = len >= FFT_LEN_THRESHOLD;
        let margin = T::of_f64(STABILITY_MARGIN);

        let mut ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            ids.push(tape.leaf(p.data.clone(), p.shape.clone(), train_mode)?);
        }
        let find = |name: String| -> TensorId {
            let idx = self
                .params
                .iter()
                .position(|p| p.name == name)
                .unwrap_or_else(|| panic!("parameter {name} missing"));
            ids[idx]
        };

        let x = tape.leaf(input.to_vec(), vec![batch * len, ch], false)?;
        let enc = tape.matmul(x, find("encoder.weight".into()))?;
        let enc = tape.add(enc, find("encoder.bias".into()))?;
        let mut u = tape.reshape(enc, vec![batch, len, f])?;

        for l in 0..self.cfg.n_layers {
            let kernel = tape.ssm_kernel(
                find(format!("layers.{l}.ssm.a_raw")),
                find(format!("layers.{l}.ssm.theta")),
                find(format!("layers.{l}.ssm.b_re")),
                find(format!("layers.{l}.ssm.b_im")),
                find(format!("layers.{l}.ssm.c_re")),
                find(format!("layers.{l}.ssm.c_im")),
                len,
                margin,
            )?;
            let y = tape.causal_conv(u, kernel, find(format!("layers.{l}.ssm.d")), use_fft)?;
            let g = tape.gelu(y)?;
            let flat = tape.reshape(g, vec![batch * len, f])?;
            let mixed = tape.matmul(flat, find(format!("layers.{l}.mix.weight")))?;
            let mixed = tape.add(mixed, find(format!("layers.{l}.mix.bias")))?;
            let dropped = tape.dropout(mixed, self.cfg.dropout, train_mode, rng)?;
            let back = tape.reshape(dropped, vec![batch, len, f])?;
            u = tape.add(u, back)?;
        }

        let pooled = tape.mean_pool_time(u)?;
        let flat = tape.reshape(u, vec![batch * len, f])?;
        let proj = tape.matmul(flat, find("head.weight".into()))?;
        let proj = tape.add(proj, find("head.bias".into()))?;
        let proj3 = tape.reshape(proj, vec![batch, len, self.cfg.n_classes])?;
        let logits = tape.mean_pool_time(proj3)?;

        Ok(Forward {
            logits,
            pooled,
            param_ids: ids,
        })
    }

    /// Eval-mode logits for a batch.
    pub fn logits(&self, input: &[T], batch: usize) -> Result<Vec<T>, ModelError> {
        use rand::SeedableRng;
        let mut tape = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut tape, input, batch, false, &mut rng)?;
        Ok(tape.value(fwd.logits).to_vec())
    }

    /// Seizure probability per clip, in [0,1]. Binary head: softmax class-1
    /// probability; multilabel head: sigmoid of the seizure logit.
    pub fn predict_seizure_prob(&self, input: &[T], batch: usize) -> Result<Vec<T>, ModelError> {
        let logits = self.logits(input, batch)?;
        let k = self.cfg.n_classes;
        let idx = self
            .cfg
            .seizure_class_index()
            .ok_or_else(|| ModelError::InvalidConfig("no seizure class".into()))?;
        let mut probs = Vec::with_capacity(batch);
        for b in 0..batch {
            let row = &logits[b * k..(b + 1) * k];
            let p = match self.cfg.head_mode {
                HeadMode::SoftmaxBinary => (row[1] - row[0]).sigmoid(),
                HeadMode::MultilabelSigmoid => row[idx].sigmoid(),
            };
            probs.push(p);
        }
        Ok(probs)
    }

    /// Mean-pooled penultimate features, one row of width `n_filters` per
    /// clip (eval mode).
    pub fn export_embeddings(&self, input: &[T], batch: usize) -> Result<Vec<T>, ModelError> {
        use rand::SeedableRng;
        let mut tape = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut tape, input, batch, false, &mut rng)?;
        Ok(tape.value(fwd.pooled).to_vec())
    }
}

/// Checkpoint metadata: where the model came from and how good it was.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_auroc: f64,
    /// Digest of the training manifest, binding the checkpoint to its data.
    pub manifest_digest: String,
}

/// Adam moment vectors, stored alongside the parameters they belong to.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// Versioned on-disk container: header, config, metadata, named f32
/// little-endian parameter blobs, optional optimizer moments.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Vec<NamedParam<f32>>,
    pub meta: CheckpointMeta,
    pub opt: Option<OptimizerState>,
}

impl ModelCheckpoint {
    pub fn from_model(
        model: &Model<f32>,
        meta: CheckpointMeta,
        opt: Option<OptimizerState>,
    ) -> Self {
        ModelCheckpoint {
            config: model.cfg.clone(),
            params: model.params.clone(),
            meta,
            opt,
        }
    }

    pub fn into_model(&self) -> Result<Model<f32>, ModelError> {
        self.config.validate()?;
        let specs = self.config.parameter_specs();
        if specs.len() != self.params.len() {
            return Err(ModelError::BadCheckpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for ((name, shape), p) in specs.iter().zip(&self.params) {
            if *name != p.name || *shape != p.shape {
                return Err(ModelError::BadCheckpoint(format!(
                    "parameter {} with shape {:?} does not match config-derived {name} {shape:?}",
                    p.name, p.shape
                )));
            }
        }
        Ok(Model {
            cfg: self.config.clone(),
            params: self.params.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = toml::to_string(&self.config)
            .map_err(|e| ModelError::BadCheckpoint(format!("config serialize: {e}")))?;
        let meta = toml::to_string(&self.meta)
            .map_err(|e| ModelError::BadCheckpoint(format!("meta serialize: {e}")))?;
        write_blob(&mut w, cfg.as_bytes())?;
        write_blob(&mut w, meta.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            write_blob(&mut w, p.name.as_bytes())?;
            w.write_all(&(p.shape.len() as u8).to_le_bytes())?;
            for &d in &p.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &p.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        match &self.opt {
            None => w.write_all(&[0u8])?,
            Some(opt) => {
                w.write_all(&[1u8])?;
                w.write_all(&opt.step.to_le_bytes())?;
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    for &x in m {
                        w.write_all(&x.to_le_bytes())?;
                    }
                    for &x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadCheckpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::BadCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let cfg_text = String::from_utf8(read_blob(&mut r)?)
            .map_err(|_| ModelError::BadCheckpoint("config not utf-8".into()))?;
        let config: ModelConfig = toml::from_str(&cfg_text)
            .map_err(|e| ModelError::BadCheckpoint(format!("config parse: {e}")))?;
        let meta_text = String::from_utf8(read_blob(&mut r)?)
            .map_err(|_| ModelError::BadCheckpoint("meta not utf-8".into()))?;
        let meta: CheckpointMeta = toml::from_str(&meta_text)
            .map_err(|e| ModelError::BadCheckpoint(format!("meta parse: {e}")))?;
        let n_params = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = String::from_utf8(read_blob(&mut r)?)
                .map_err(|_| ModelError::BadCheckpoint("param name not utf-8".into()))?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf));
            }
            params.push(NamedParam { name, shape, data });
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let opt = if flag[0] == 1 {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let step = u64::from_le_bytes(b);
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            let mut buf = [0u8; 4];
            for p in &params {
                let mut mv = Vec::with_capacity(p.data.len());
                for _ in 0..p.data.len() {
                    r.read_exact(&mut buf)?;
                    mv.push(f32::from_le_bytes(buf));
                }
                let mut vv = Vec::with_capacity(p.data.len());
                for _ in 0..p.data.len() {
                    r.read_exact(&mut buf)?;
                    vv.push(f32::from_le_bytes(buf));
                }
                m.push(mv);
                v.push(vv);
            }
            Some(OptimizerState { step, m, v })
        } else {
            None
        };
        Ok(ModelCheckpoint {
            config,
            params,
            meta,
            opt,
        })
    }
}

fn write_blob<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_blob<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
