//! Optimization loop and checkpoint persistence.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dataio::{DatasetSplit, SampleRecord};
use crate::error::{Error, Result};
use crate::fusion::{ForwardTrace, ModelConfig, ModelParams, SampleFeatures};
use crate::numerics::{Binder, Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eta0: f64,
    pub gamma: f64,
    pub step_s: usize,
    pub seed: u64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            eta0: 1e-3,
            gamma: 0.1,
            step_s: 3,
            seed: 0,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.step_s == 0 {
            return bad("batch_size, max_epochs, patience and step_s must be positive".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs));
        }
        if !(self.eta0 > 0.0 && self.gamma > 0.0) {
            return bad("eta0 and gamma must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(
            "mse_loss",
            format!("pred has {} values, target {}", pred.len(), target.len()),
        ));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// `eta0 * gamma^floor(t / s)`.
pub fn lr_at_epoch(t: usize, cfg: &TrainConfig) -> f64 {
    cfg.eta0 * cfg.gamma.powi((t / cfg.step_s) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every trainable tensor. Tensors absent
/// from `grads` are treated as having zero gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        match params.trainable.get(name) {
            Some(t) if t.numel() == g.len() => {}
            Some(t) => {
                return Err(Error::NameMismatch(format!(
                    "gradient for `{name}` has {} values, tensor {}",
                    g.len(),
                    t.numel()
                )))
            }
            None => return Err(Error::NameMismatch(format!("gradient for unknown tensor `{name}`"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (name, tensor) in params.trainable.iter_mut() {
        let n = tensor.numel();
        let g = grads.get(name);
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let data = tensor.data_mut();
        for i in 0..n {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
            data[i] = (data[i] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over validation losses; improvement means strictly lower.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Drives the epoch loop: `epoch_fn(epoch, lr)` trains one epoch and returns
/// `(train_loss, val_loss)`; `on_improved` runs whenever validation improves.
/// Returns the history and the best epoch.
pub fn run_epochs<F, G>(cfg: &TrainConfig, mut epoch_fn: F, mut on_improved: G) -> Result<(Vec<EpochRecord>, usize)>
where
    F: FnMut(usize, f64) -> Result<(f64, f64)>,
    G: FnMut(usize),
{
    cfg.validate()?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let lr = lr_at_epoch(epoch, cfg);
        let (train_loss, val_loss) = epoch_fn(epoch, lr)?;
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => on_improved(epoch),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    let best = stopper
        .best_epoch
        .ok_or_else(|| Error::InvalidArgument("validation loss never finite".into()))?;
    Ok((history, best))
}

/// Precomputes the parameter-independent inputs of every sample.
pub fn precompute(model: &ModelParams, samples: &[SampleRecord]) -> Result<Vec<SampleFeatures>> {
    let mut trace = ForwardTrace::default();
    samples.iter().map(|s| model.features(s, &mut trace)).collect()
}

/// Normalized-space loss and parameter gradients for one sample.
pub fn sample_gradients(model: &ModelParams, feats: &SampleFeatures) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut g = Graph::new();
    let mut b = Binder::new(&model.store);
    let y = model.forward_graph(&mut g, &mut b, feats, &mut ForwardTrace::default())?;
    let loss = g.mse(y, &feats.target_norm)?;
    let value = g.value(loss)[0];
    let grads = g.backward(loss)?;
    Ok((value, b.collect_grads(&grads)))
}

/// Mean normalized-space MSE over `feats`.
pub fn mean_loss(model: &ModelParams, feats: &[SampleFeatures]) -> Result<f64> {
    if feats.is_empty() {
        return Err(Error::InvalidArgument("cannot average a loss over zero samples".into()));
    }
    let mut total = 0.0;
    for f in feats {
        let mut g = Graph::new();
        let mut b = Binder::new(&model.store);
        let y = model.forward_graph(&mut g, &mut b, f, &mut ForwardTrace::default())?;
        total += mse_loss(g.value(y), &f.target_norm)?;
    }
    Ok(total / feats.len() as f64)
}

/// One optimizer step on the samples `batch` (indices into `feats`).
/// Returns the mean batch loss.
pub fn train_batch(
    model: &mut ModelParams,
    feats: &[SampleFeatures],
    batch: &[usize],
    state: &mut AdamState,
    lr: f64,
    clip: Option<f64>,
) -> Result<f64> {
    let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut loss = 0.0;
    for &i in batch {
        let (l, grads) = sample_gradients(model, &feats[i])?;
        loss += l;
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    let n = batch.len() as f64;
    sum.values_mut().flatten().for_each(|g| *g /= n);
    if let Some(c) = clip {
        clip_global_norm(&mut sum, c);
    }
    adam_step(&mut model.store, &sum, state, lr)?;
    Ok(loss / n)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Trains `model` on `data.train`, selecting the epoch with the lowest
/// validation loss. The returned checkpoint holds the best weights.
pub fn train(data: &DatasetSplit, model: ModelParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InvalidArgument("training needs nonempty train and val sets".into()));
    }
    let train_feats = precompute(&model, &data.train)?;
    let val_feats = precompute(&model, &data.val)?;
    train_features(&train_feats, &val_feats, model, cfg)
}

/// [`train`] on precomputed features.
pub fn train_features(
    train_feats: &[SampleFeatures],
    val_feats: &[SampleFeatures],
    mut model: ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::default();
    let mut order: Vec<usize> = (0..train_feats.len()).collect();
    let mut best = model.store.trainable.clone();
    let mut best_val = f64::INFINITY;

    // the epoch closure stores each epoch's weights; the improvement hook keeps them
    let snapshot: RefCell<Option<(BTreeMap<String, Tensor>, f64)>> = RefCell::new(None);
    let (history, best_epoch) = run_epochs(
        cfg,
        |epoch, lr| {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
                let loss = train_batch(&mut model, train_feats, batch, &mut state, lr, cfg.clip_norm)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: bi });
                }
                total += loss * batch.len() as f64;
            }
            let train_loss = total / order.len() as f64;
            let val = mean_loss(&model, val_feats)?;
            if !val.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX });
            }
            *snapshot.borrow_mut() = Some((model.store.trainable.clone(), val));
            log::info!("epoch {epoch}: lr {lr:.1e} train {train_loss:.5} val {val:.5}");
            Ok((train_loss, val))
        },
        |_| {
            if let Some((weights, val)) = snapshot.borrow_mut().take() {
                best = weights;
                best_val = val;
            }
        },
    )?;
    model.store.trainable = best;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            seed: cfg.seed,
            epoch: best_epoch as u32,
            best_val,
        },
        history,
    })
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_loss\n");
    for r in history {
        out.push_str(&format!("{},{:e},{},{}\n", r.epoch, r.lr, r.train_loss, r.val_loss));
    }
    out
}

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"PVVLM1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub seed: u64,
    pub epoch: u32,
    pub best_val: f64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn write_tensors(out: &mut Vec<u8>, store: &ParamStore) -> Result<()> {
    put_u32(out, store.trainable.len() + store.frozen.len())?;
    for (partition, map) in [(0u8, &store.trainable), (1u8, &store.frozen)] {
        for (name, t) in map {
            put_u32(out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            out.push(partition);
            out.push(DTYPE_F32);
            put_u32(out, t.rank())?;
            for &d in t.shape() {
                put_u32(out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(())
}

/// SHA-256 over every tensor's name, partition, shape and bytes.
pub fn param_hash(store: &ParamStore) -> String {
    let mut bytes = Vec::new();
    write_tensors(&mut bytes, store).expect("tensor sizes fit in u32");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let manifest: String = self
            .model
            .config
            .to_manifest()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_u32(&mut out, manifest.len())?;
        out.extend_from_slice(manifest.as_bytes());
        write_tensors(&mut out, &self.model.store)?;
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.best_val.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6, "magic").ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::BadMagic);
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let mlen = r.u32("manifest length")? as usize;
        let text = std::str::from_utf8(r.take(mlen, "manifest")?)
            .map_err(|_| Error::MalformedCheckpoint("manifest is not UTF-8".into()))?;
        let mut manifest = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::MalformedCheckpoint(format!("manifest line {line:?}")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let config = ModelConfig::from_manifest(&manifest)?;

        let count = r.u32("tensor count")?;
        let mut store = ParamStore::new();
        for i in 0..count {
            let nlen = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(nlen, "tensor name")?.to_vec())
                .map_err(|_| Error::MalformedCheckpoint(format!("tensor {i} name is not UTF-8")))?;
            let partition = r.take(1, "partition")?[0];
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::MalformedCheckpoint(format!("tensor `{name}` has dtype tag {dtype}")));
            }
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("shape")? as usize);
            }
            let numel: usize = shape.iter().product();
            let what = format!("payload of `{name}`");
            let raw = r.take(numel.checked_mul(4).unwrap_or(usize::MAX), &what)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
            match partition {
                0 => store.insert_trainable(name, t),
                1 => store.insert_frozen(name, t),
                p => return Err(Error::MalformedCheckpoint(format!("tensor `{name}` has partition tag {p}"))),
            }
        }
        let seed = u64::from_le_bytes(r.take(8, "seed")?.try_into().expect("8 bytes"));
        let epoch = r.u32("epoch")?;
        let best_val = f64::from_le_bytes(r.take(8, "best val loss")?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            model: ModelParams { config, store },
            seed,
            epoch,
            best_val,
        })
    }

    /// Errors with the first manifest field whose value differs from `expected`.
    pub fn check_manifest(&self, expected: &BTreeMap<String, String>) -> Result<()> {
        let have = self.model.config.to_manifest();
        for (k, v) in expected {
            let found = have.get(k).cloned().unwrap_or_default();
            if &found != v {
                return Err(Error::ManifestMismatch {
                    field: k.clone(),
                    expected: v.clone(),
                    found,
                });
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::TruncatedCheckpoint(what.to_string())),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads and verifies the given manifest fields.
pub fn load_checkpoint_expecting(path: &Path, expected: &BTreeMap<String, String>) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_manifest(expected)?;
    Ok(ckpt)
}
