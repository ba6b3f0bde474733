//! Training loop: AdamW with global-norm clipping, phase specifications
//! with weighted task mixtures, stateless per-step data generation (so a
//! resumed run replays the exact byte stream), probe-based warmup
//! completion, and bitwise-resumable optimizer state.

use crate::datagen::{self, Sample};
use crate::error::{HsaError, Result};
use crate::evalharness::{derive_seed, eval_niah, EvalTask, NiahSpec};
use crate::model::{forward, save_checkpoint, ForwardOptions, ModelConfig};
use crate::numerics::{Element, Graph, ParamSet, Tensor};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

// ---- optimizer ----

/// AdamW hyperparameters. Weight decay is decoupled and applied to matrix
/// parameters only, never to norm gains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; gradients above it are rescaled.
    pub clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01, clip: 1.0 }
    }
}

/// AdamW state: first/second moments aligned with the `ParamSet` entry
/// order plus the bias-correction step counter.
pub struct AdamW<F: Element> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

fn decays(name: &str) -> bool {
    !name.ends_with(".gain")
}

impl<F: Element> AdamW<F> {
    pub fn new(ps: &ParamSet<F>, cfg: AdamWConfig) -> Self {
        let m = ps.iter().map(|(_, e)| Tensor::zeros(e.value.shape().to_vec())).collect();
        let v = ps.iter().map(|(_, e)| Tensor::zeros(e.value.shape().to_vec())).collect();
        AdamW { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Clip the accumulated gradients to the global-norm ceiling, then apply
    /// one AdamW update. Returns (pre-clip, post-clip) gradient norms.
    pub fn step(&mut self, ps: &mut ParamSet<F>, lr: f64) -> Result<(f64, f64)> {
        if self.m.len() != ps.len() {
            return Err(HsaError::InvalidArgument {
                op: "adamw_step",
                msg: format!("optimizer tracks {} params, set has {}", self.m.len(), ps.len()),
            });
        }
        let pre = ps.grad_global_norm();
        if !pre.is_finite() {
            return Err(HsaError::Numeric(format!("non-finite gradient norm {pre}")));
        }
        let scale = if pre > self.cfg.clip { self.cfg.clip / pre } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let (b1, b2) = (F::from_f64(self.cfg.beta1), F::from_f64(self.cfg.beta2));
        let (nb1, nb2) = (F::from_f64(1.0 - self.cfg.beta1), F::from_f64(1.0 - self.cfg.beta2));
        let eps = F::from_f64(self.cfg.eps);
        let lr_f = F::from_f64(lr);
        let sc = F::from_f64(scale);
        let ids: Vec<_> = ps.ids().collect();
        for (idx, id) in ids.into_iter().enumerate() {
            let wd = if decays(&ps.entry(id).name) {
                F::from_f64(lr * self.cfg.weight_decay)
            } else {
                F::zero()
            };
            let grad: Vec<F> = ps.grad(id).data().iter().map(|&g| g * sc).collect();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let w = ps.value_mut(id).data_mut();
            for j in 0..grad.len() {
                m[j] = b1 * m[j] + nb1 * grad[j];
                v[j] = b2 * v[j] + nb2 * grad[j] * grad[j];
                // mhat / (sqrt(vhat) + eps) with mhat = m/bc1, vhat = v/bc2
                let mhat = m[j] / F::from_f64(bc1);
                let vhat = v[j] / F::from_f64(bc2);
                w[j] = w[j] - lr_f * mhat / (vhat.sqrt() + eps) - wd * w[j];
            }
        }
        Ok((pre, pre * scale))
    }
}

// ---- batches and loss ----

/// Per-step training statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStats {
    pub loss: f64,
    pub pre_clip_norm: f64,
    pub post_clip_norm: f64,
    pub lr: f64,
}

/// One gradient step over a batch: each sequence gets its own graph, the
/// per-sequence mean NLL is back-propagated with seed `1/B`, and gradients
/// accumulate into the registry before a single optimizer update.
pub fn train_step<F: Element>(
    cfg: &ModelConfig,
    ps: &mut ParamSet<F>,
    opt: &mut AdamW<F>,
    opts: &ForwardOptions,
    batch: &[Sample],
    lr: f64,
) -> Result<TrainStats> {
    if batch.is_empty() {
        return Err(HsaError::InvalidArgument { op: "train_step", msg: "empty batch".into() });
    }
    ps.zero_grads();
    let seed = F::from_f64(1.0 / batch.len() as f64);
    let mut total = 0.0f64;
    for sample in batch {
        let n = sample.tokens.len();
        if n < 2 {
            return Err(HsaError::InvalidArgument {
                op: "train_step",
                msg: "sample shorter than 2 tokens".into(),
            });
        }
        let mut g = Graph::<F>::new();
        let out = forward(&mut g, ps, &sample.tokens[..n - 1], cfg, opts)?;
        let mask_bools = sample.mask_bools();
        let loss = g.cross_entropy(out.logits, &sample.tokens[1..], &mask_bools[1..])?;
        let loss_val = g.value(loss).item().as_f64();
        if !loss_val.is_finite() {
            return Err(HsaError::Numeric(format!(
                "non-finite loss {loss_val} on sample {}",
                serde_json::to_string(&sample.meta)?
            )));
        }
        total += loss_val;
        g.backward_seeded(loss, seed)?;
        g.accumulate_param_grads(ps);
    }
    let loss = total / batch.len() as f64;
    let (pre, post) = opt.step(ps, lr)?;
    Ok(TrainStats { loss, pre_clip_norm: pre, post_clip_norm: post, lr })
}

// ---- phase specification ----

/// One weighted component of a training mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixtureEntry {
    /// Single needle-in-a-haystack retrieval.
    Sniah { weight: f64 },
    /// Multi-query NIAH.
    Mqniah { weight: f64, n_queries: usize, n_kv: usize },
    /// Variable-tracking chains.
    Vartrack { weight: f64, chain_length: usize },
    /// Copy task: random prefix, separator, verbatim copy.
    SelfCopy { weight: f64 },
    /// Plain filler-text language modeling.
    Lm { weight: f64 },
    /// Filler text with long-range restated facts.
    LmEffective { weight: f64, min_gap: usize },
}

impl MixtureEntry {
    pub fn weight(&self) -> f64 {
        match self {
            MixtureEntry::Sniah { weight }
            | MixtureEntry::Mqniah { weight, .. }
            | MixtureEntry::Vartrack { weight, .. }
            | MixtureEntry::SelfCopy { weight }
            | MixtureEntry::Lm { weight }
            | MixtureEntry::LmEffective { weight, .. } => *weight,
        }
    }

    fn is_corpus(&self) -> bool {
        matches!(self, MixtureEntry::Lm { .. } | MixtureEntry::LmEffective { .. })
    }
}

/// Early-exit rule: the phase completes once the probe accuracy reaches
/// `threshold` on `consecutive` successive evaluations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionRule {
    pub probe_length: usize,
    pub threshold: f64,
    pub consecutive: usize,
}

/// One curriculum phase: structural attention settings, data mixture, and
/// schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub name: String,
    pub context_length: usize,
    pub swa_window: usize,
    pub hsa_top_k: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_warmup_steps: usize,
    /// Probability that a corpus (lm) sample is replaced by a retrieval
    /// probe of the same length.
    #[serde(default)]
    pub probe_injection: f64,
    /// Probe-evaluation cadence in steps; 0 disables probes.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub probe_samples: Option<usize>,
    pub mixture: Vec<MixtureEntry>,
    #[serde(default)]
    pub completion: Option<CompletionRule>,
}

impl PhaseSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HsaError::InvalidArgument { op: "phase_spec", msg });
        if self.mixture.is_empty() {
            return bad(format!("phase {:?}: empty mixture", self.name));
        }
        if self.mixture.iter().any(|m| m.weight() <= 0.0) {
            return bad(format!("phase {:?}: mixture weights must be positive", self.name));
        }
        if !(0.0..=1.0).contains(&self.probe_injection) {
            return bad(format!("phase {:?}: probe_injection outside [0,1]", self.name));
        }
        if self.batch_size == 0 || self.context_length < 8 {
            return bad(format!("phase {:?}: degenerate batch or context", self.name));
        }
        Ok(())
    }

    /// Learning rate at a step: linear warmup to `lr`, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.lr_warmup_steps == 0 || step >= self.lr_warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.lr_warmup_steps as f64
        }
    }

    fn options(&self) -> ForwardOptions {
        ForwardOptions { swa_window: self.swa_window, top_k: self.hsa_top_k }
    }
}

fn gen_mixture_sample(
    entry: &MixtureEntry,
    length: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    match entry {
        MixtureEntry::Sniah { .. } => {
            let depth = rand::Rng::gen_range(rng, 0.0..=1.0);
            datagen::gen_sniah(length, depth, rng)
        }
        MixtureEntry::Mqniah { n_queries, n_kv, .. } => {
            datagen::gen_mqniah(length, *n_queries, *n_kv, rng)
        }
        MixtureEntry::Vartrack { chain_length, .. } => {
            datagen::gen_vartrack(length, *chain_length, rng)
        }
        MixtureEntry::SelfCopy { .. } => {
            // prefix + SEP + copy must fit in the context length
            let half = (length - 1) / 2;
            let seq: Vec<u32> =
                (0..half).map(|_| rand::Rng::gen_range(rng, 0u32..256)).collect();
            datagen::gen_selfcopy(&seq)
        }
        MixtureEntry::Lm { .. } => datagen::gen_lm(length, rng),
        MixtureEntry::LmEffective { min_gap, .. } => {
            datagen::gen_lm_effective(length, *min_gap, rng)
        }
    }
}

/// Deterministic batch for `(run_seed, phase_idx, step)`; resuming a run at
/// any step regenerates the identical batch.
pub fn gen_batch(
    spec: &PhaseSpec,
    run_seed: u64,
    phase_idx: usize,
    step: usize,
) -> Result<Vec<Sample>> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(&[run_seed, phase_idx as u64, step as u64]));
    let weights: Vec<f64> = spec.mixture.iter().map(|m| m.weight()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| HsaError::InvalidArgument {
        op: "gen_batch",
        msg: format!("bad mixture weights: {e}"),
    })?;
    let mut out = Vec::with_capacity(spec.batch_size);
    for _ in 0..spec.batch_size {
        let entry = &spec.mixture[dist.sample(&mut rng)];
        let mut sample = gen_mixture_sample(entry, spec.context_length, &mut rng)?;
        if entry.is_corpus() && spec.probe_injection > 0.0 {
            let len = sample.tokens.len();
            if rand::Rng::gen_bool(&mut rng, spec.probe_injection) {
                let depth = rand::Rng::gen_range(&mut rng, 0.0..=1.0);
                sample = datagen::gen_sniah(len, depth, &mut rng)?;
            }
        }
        out.push(sample);
    }
    Ok(out)
}

/// True once some window of `consecutive` successive probe accuracies all
/// meet the threshold.
pub fn detect_warmup_done(history: &[f64], threshold: f64, consecutive: usize) -> bool {
    consecutive > 0
        && history.windows(consecutive).any(|w| w.iter().all(|&a| a >= threshold))
}

// ---- optimizer state persistence ----

const OPT_MAGIC: &[u8; 8] = b"HSALOPT\0";
const OPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct OptHeader {
    version: u32,
    step: u64,
    cfg: AdamWConfig,
    params: Vec<(String, Vec<usize>)>,
    blob_sha256: String,
}

/// Persist AdamW moments and step counter next to a model checkpoint.
/// Layout: magic, version, header length, JSON header, then the first and
/// second moments as little-endian f32 in parameter order.
pub fn save_optimizer(path: &Path, opt: &AdamW<f32>, ps: &ParamSet<f32>) -> Result<()> {
    let mut blob = Vec::new();
    for t in opt.m.iter().chain(opt.v.iter()) {
        for &x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = OptHeader {
        version: OPT_VERSION,
        step: opt.step,
        cfg: opt.cfg.clone(),
        params: ps.iter().map(|(_, e)| (e.name.clone(), e.value.shape().to_vec())).collect(),
        blob_sha256: hex_sha(&blob),
    };
    let hj = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(OPT_MAGIC)?;
        f.write_all(&OPT_VERSION.to_le_bytes())?;
        f.write_all(&(hj.len() as u64).to_le_bytes())?;
        f.write_all(&hj)?;
        f.write_all(&blob)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Restore AdamW state saved by `save_optimizer`; the parameter manifest
/// must match the given set exactly.
pub fn load_optimizer(path: &Path, ps: &ParamSet<f32>) -> Result<AdamW<f32>> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != OPT_MAGIC {
        return Err(HsaError::Checkpoint("bad optimizer-state magic".into()));
    }
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != OPT_VERSION {
        return Err(HsaError::Checkpoint(format!(
            "unsupported optimizer-state version {}",
            u32::from_le_bytes(b4)
        )));
    }
    let mut b8 = [0u8; 8];
    f.read_exact(&mut b8)?;
    let mut hj = vec![0u8; u64::from_le_bytes(b8) as usize];
    f.read_exact(&mut hj)?;
    let header: OptHeader = serde_json::from_slice(&hj)?;
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    if hex_sha(&blob) != header.blob_sha256 {
        return Err(HsaError::Checkpoint("optimizer blob checksum mismatch".into()));
    }
    let manifest: Vec<(String, Vec<usize>)> =
        ps.iter().map(|(_, e)| (e.name.clone(), e.value.shape().to_vec())).collect();
    if manifest != header.params {
        return Err(HsaError::Checkpoint(
            "optimizer state does not match the parameter set".into(),
        ));
    }
    let numel: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if blob.len() != numel * 2 * 4 {
        return Err(HsaError::Checkpoint(format!(
            "optimizer blob holds {} bytes, expected {}",
            blob.len(),
            numel * 2 * 4
        )));
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut opt = AdamW::new(ps, header.cfg);
    opt.step = header.step;
    let mut off = 0;
    for half in [&mut opt.m, &mut opt.v] {
        for t in half.iter_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&floats[off..off + n]);
            off += n;
        }
    }
    Ok(opt)
}

fn hex_sha(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

// ---- phase runner ----

/// One JSONL metrics record per step (probe fields only on eval steps).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub phase_idx: usize,
    pub step: usize,
    pub loss: f64,
    pub pre_clip_norm: f64,
    pub post_clip_norm: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_accuracy: Option<f64>,
}

/// Result of running one phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub steps_run: usize,
    pub completed_early: bool,
    /// True when the phase had a completion rule that never fired.
    pub completion_warning: bool,
    pub probe_history: Vec<f64>,
    pub final_loss: f64,
}

/// Quick retrieval probe: S-NIAH accuracy at one length, depths {0.25, 0.75}.
pub fn probe_accuracy(
    cfg: &ModelConfig,
    ps: &ParamSet<f32>,
    opts: &ForwardOptions,
    length: usize,
    samples_per_cell: usize,
    seed: u64,
) -> Result<f64> {
    let spec = NiahSpec {
        task: EvalTask::Sniah,
        lengths: vec![length],
        depths: vec![0.25, 0.75],
        samples_per_cell,
        seed,
        in_domain_boundary: length,
        max_cell_bytes: usize::MAX,
    };
    let (grid, _) = eval_niah(cfg, ps, opts, &spec)?;
    grid.accuracy_at_length(length).ok_or_else(|| HsaError::Numeric("empty probe grid".into()))
}

/// Run one curriculum phase, streaming a metrics record per step into
/// `sink` and optionally checkpointing into `out_dir` after every probe
/// evaluation and at the end.
#[allow(clippy::too_many_arguments)]
pub fn run_phase(
    cfg: &ModelConfig,
    ps: &mut ParamSet<f32>,
    opt: &mut AdamW<f32>,
    spec: &PhaseSpec,
    phase_idx: usize,
    run_seed: u64,
    start_step: usize,
    out_dir: Option<&Path>,
    sink: &mut dyn Write,
) -> Result<PhaseOutcome> {
    spec.validate()?;
    let opts = spec.options();
    let mut probe_history = Vec::new();
    let mut final_loss = f64::NAN;
    let mut completed_early = false;
    let mut steps_run = 0;
    for step in start_step..spec.steps {
        let batch = gen_batch(spec, run_seed, phase_idx, step)?;
        let stats = train_step(cfg, ps, opt, &opts, &batch, spec.lr_at(step))?;
        final_loss = stats.loss;
        steps_run += 1;
        let mut probe = None;
        let at_probe = spec.eval_every > 0 && (step + 1) % spec.eval_every == 0;
        if at_probe {
            let length = spec
                .completion
                .as_ref()
                .map(|c| c.probe_length)
                .unwrap_or(spec.context_length);
            let acc = probe_accuracy(
                cfg,
                ps,
                &opts,
                length,
                spec.probe_samples.unwrap_or(8),
                derive_seed(&[run_seed, phase_idx as u64, 0xe7a1, step as u64]),
            )?;
            probe_history.push(acc);
            probe = Some(acc);
        }
        let rec = MetricsRecord {
            phase: spec.name.clone(),
            phase_idx,
            step,
            loss: stats.loss,
            pre_clip_norm: stats.pre_clip_norm,
            post_clip_norm: stats.post_clip_norm,
            lr: stats.lr,
            probe_accuracy: probe,
        };
        serde_json::to_writer(&mut *sink, &rec)?;
        sink.write_all(b"\n")?;
        sink.flush()?;
        if at_probe {
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join(format!("phase{phase_idx}.ckpt")), cfg, ps)?;
                save_optimizer(&dir.join(format!("phase{phase_idx}.opt")), opt, ps)?;
                std::fs::write(
                    dir.join(format!("phase{phase_idx}.progress.json")),
                    serde_json::to_vec(&serde_json::json!({
                        "phase_idx": phase_idx,
                        "next_step": step + 1,
                    }))?,
                )?;
            }
            if let Some(rule) = &spec.completion {
                if detect_warmup_done(&probe_history, rule.threshold, rule.consecutive) {
                    completed_early = true;
                    break;
                }
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(format!("phase{phase_idx}.ckpt")), cfg, ps)?;
        save_optimizer(&dir.join(format!("phase{phase_idx}.opt")), opt, ps)?;
    }
    let completion_warning = spec.completion.is_some() && !completed_early;
    Ok(PhaseOutcome {
        steps_run,
        completed_early,
        completion_warning,
        probe_history,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SampleMeta;
    use crate::model::init_params;
    use rand::Rng;

    #[test]
    fn adamw_matches_closed_form_single_step() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.insert("w", Tensor::new(vec![1, 1], vec![0.5]).unwrap()).unwrap();
        let cfg = AdamWConfig { clip: 1e9, ..AdamWConfig::default() };
        let mut opt = AdamW::new(&ps, cfg.clone());
        let g = 0.3f64;
        ps.grad_mut(id).data_mut()[0] = g;
        let lr = 1e-2;
        opt.step(&mut ps, lr).unwrap();
        // bias-corrected first step: mhat = g, vhat = g^2
        let expected = 0.5 - lr * g / (g.abs() + cfg.eps) - lr * cfg.weight_decay * 0.5;
        let got = ps.value(id).data()[0];
        assert!((got - expected).abs() <= 1e-14, "{got} vs {expected}");

        // second step with a different gradient, still closed-form
        let g2 = -0.1f64;
        ps.zero_grads();
        ps.grad_mut(id).data_mut()[0] = g2;
        let w1 = got;
        opt.step(&mut ps, lr).unwrap();
        let m2 = cfg.beta1 * (1.0 - cfg.beta1) * g + (1.0 - cfg.beta1) * g2;
        let v2 = cfg.beta2 * (1.0 - cfg.beta2) * g * g + (1.0 - cfg.beta2) * g2 * g2;
        let mhat = m2 / (1.0 - cfg.beta1.powi(2));
        let vhat = v2 / (1.0 - cfg.beta2.powi(2));
        let expected2 = w1 - lr * mhat / (vhat.sqrt() + cfg.eps) - lr * cfg.weight_decay * w1;
        let got2 = ps.value(id).data()[0];
        assert!((got2 - expected2).abs() <= 1e-14, "{got2} vs {expected2}");
    }

    #[test]
    fn gain_parameters_skip_weight_decay() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.insert("layer.0.attn_norm.gain", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        // zero gradient: the only possible movement would come from decay
        opt.step(&mut ps, 0.1).unwrap();
        assert_eq!(ps.value(id).data(), &[1.0, 1.0]);
    }

    #[test]
    fn clipping_rescales_to_the_ceiling_and_zero_lr_is_a_noop() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&ps, AdamWConfig { clip: 1.0, ..Default::default() });
        ps.grad_mut(id).data_mut().copy_from_slice(&[6.0, 8.0]);
        let before = ps.value(id).data().to_vec();
        let (pre, post) = opt.step(&mut ps, 0.0).unwrap();
        assert_eq!(pre, 10.0);
        assert!((post - 1.0).abs() <= 1e-12);
        // lr = 0 and wd*lr = 0: weights must be bitwise untouched
        assert_eq!(ps.value(id).data(), &before[..]);
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        ps.grad_mut(id).data_mut()[0] = f64::NAN;
        assert!(matches!(opt.step(&mut ps, 0.1), Err(HsaError::Numeric(_))));
    }

    fn toy_phase() -> PhaseSpec {
        PhaseSpec {
            name: "toy".into(),
            context_length: 64,
            swa_window: 16,
            hsa_top_k: 2,
            steps: 4,
            batch_size: 2,
            lr: 1e-3,
            lr_warmup_steps: 2,
            probe_injection: 0.0,
            eval_every: 0,
            probe_samples: None,
            mixture: vec![
                MixtureEntry::SelfCopy { weight: 1.0 },
                MixtureEntry::Lm { weight: 1.0 },
            ],
            completion: None,
        }
    }

    #[test]
    fn batches_are_deterministic_and_step_dependent() {
        let spec = toy_phase();
        let a = gen_batch(&spec, 7, 0, 3).unwrap();
        let b = gen_batch(&spec, 7, 0, 3).unwrap();
        assert_eq!(
            a.iter().map(|s| &s.tokens).collect::<Vec<_>>(),
            b.iter().map(|s| &s.tokens).collect::<Vec<_>>()
        );
        let c = gen_batch(&spec, 7, 0, 4).unwrap();
        assert_ne!(
            a.iter().map(|s| &s.tokens).collect::<Vec<_>>(),
            c.iter().map(|s| &s.tokens).collect::<Vec<_>>()
        );
    }

    #[test]
    fn probe_injection_extremes() {
        let mut spec = toy_phase();
        spec.context_length = 160; // retrieval probes need room for the needle
        spec.mixture = vec![MixtureEntry::Lm { weight: 1.0 }];
        spec.probe_injection = 1.0;
        spec.batch_size = 6;
        let batch = gen_batch(&spec, 11, 0, 0).unwrap();
        assert!(batch.iter().all(|s| matches!(s.meta, SampleMeta::Sniah { .. })));
        spec.probe_injection = 0.0;
        let batch = gen_batch(&spec, 11, 0, 0).unwrap();
        assert!(batch.iter().all(|s| matches!(s.meta, SampleMeta::Lm { .. })));
    }

    #[test]
    fn lr_schedule_warms_up_linearly() {
        let mut spec = toy_phase();
        spec.lr = 1.0;
        spec.lr_warmup_steps = 4;
        let lrs: Vec<f64> = (0..6).map(|s| spec.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn warmup_detection_needs_consecutive_hits() {
        assert!(!detect_warmup_done(&[0.2, 0.3], 0.95, 2));
        assert!(!detect_warmup_done(&[0.96, 0.5, 0.97], 0.95, 2));
        assert!(detect_warmup_done(&[0.5, 0.96, 0.97], 0.95, 2));
        assert!(detect_warmup_done(&[0.96, 0.97, 0.2], 0.95, 2));
        assert!(!detect_warmup_done(&[0.96], 0.95, 2));
        assert!(!detect_warmup_done(&[1.0, 1.0], 0.95, 0));
    }

    #[test]
    fn phase_spec_round_trips_and_rejects_unknown_fields() {
        let spec = toy_phase();
        let json = serde_json::to_string(&spec).unwrap();
        let back: PhaseSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.name, "toy");
        assert_eq!(back.mixture.len(), 2);
        let bad = json.replacen("\"name\"", "\"typo_field\":1,\"name\"", 1);
        assert!(serde_json::from_str::<PhaseSpec>(&bad).is_err());
        let bad_entry = r#"{"task":"sniah","weight":1.0,"bogus":2}"#;
        assert!(serde_json::from_str::<MixtureEntry>(bad_entry).is_err());
    }

    fn micro_byte_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::micro();
        cfg.vocab_size = datagen::VOCAB_SIZE;
        cfg
    }

    #[test]
    fn fixed_batch_overfits_to_near_zero_loss() {
        let cfg = micro_byte_cfg();
        let mut ps = init_params(&cfg, 22).unwrap();
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        let mut spec = toy_phase();
        spec.mixture = vec![MixtureEntry::SelfCopy { weight: 1.0 }];
        spec.context_length = 33;
        let batch = gen_batch(&spec, 5, 0, 0).unwrap();
        let opts = spec.options();
        let first = train_step(&cfg, &mut ps, &mut opt, &opts, &batch, 5e-3).unwrap().loss;
        let mut last = first;
        for _ in 0..399 {
            last = train_step(&cfg, &mut ps, &mut opt, &opts, &batch, 5e-3).unwrap().loss;
            if last < 0.1 {
                break;
            }
        }
        assert!(last < 0.1, "copy batch failed to overfit: {first} -> {last}");
    }

    #[test]
    fn run_phase_streams_one_metrics_record_per_step() {
        let cfg = micro_byte_cfg();
        let mut ps = init_params(&cfg, 26).unwrap();
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        let spec = toy_phase();
        let mut sink = Vec::new();
        let out = run_phase(&cfg, &mut ps, &mut opt, &spec, 0, 5, 0, None, &mut sink).unwrap();
        assert_eq!(out.steps_run, spec.steps);
        assert!(!out.completed_early && !out.completion_warning);
        let lines: Vec<&str> = std::str::from_utf8(&sink).unwrap().lines().collect();
        assert_eq!(lines.len(), out.steps_run);
        for (i, line) in lines.iter().enumerate() {
            let rec: MetricsRecord = serde_json::from_str(line).unwrap();
            assert_eq!(rec.step, i);
            assert!(rec.loss.is_finite());
            assert!(rec.post_clip_norm <= opt.cfg.clip + 1e-9);
        }
    }

    #[test]
    fn optimizer_state_round_trips_and_validates() {
        let cfg = micro_byte_cfg();
        let ps = init_params(&cfg, 23).unwrap();
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        let mut r = ChaCha8Rng::seed_from_u64(24);
        for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            for v in t.data_mut() {
                *v = r.gen_range(-1.0..1.0);
            }
        }
        opt.step = 17;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.opt");
        save_optimizer(&path, &opt, &ps).unwrap();
        let back = load_optimizer(&path, &ps).unwrap();
        assert_eq!(back.step, 17);
        for (a, b) in opt.m.iter().zip(back.m.iter()) {
            assert_eq!(a.data(), b.data());
        }
        for (a, b) in opt.v.iter().zip(back.v.iter()) {
            assert_eq!(a.data(), b.data());
        }
        // wrong parameter set must be rejected
        let other = init_params(&ModelConfig::micro(), 23).unwrap();
        assert!(load_optimizer(&path, &other).is_err());
        // flipped blob byte must be caught by the checksum
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_optimizer(&path, &ps), Err(HsaError::Checkpoint(_))));
    }

    #[test]
    fn resume_is_bitwise_identical() {
        let cfg = micro_byte_cfg();
        let spec = toy_phase();
        let run_seed = 99;

        // uninterrupted: 4 steps
        let mut ps_a = init_params(&cfg, 25).unwrap();
        let mut opt_a = AdamW::new(&ps_a, AdamWConfig::default());
        let mut sink = Vec::new();
        run_phase(&cfg, &mut ps_a, &mut opt_a, &spec, 0, run_seed, 0, None, &mut sink).unwrap();

        // interrupted after 2 steps, persisted, reloaded, resumed at step 2
        let mut ps_b = init_params(&cfg, 25).unwrap();
        let mut opt_b = AdamW::new(&ps_b, AdamWConfig::default());
        let mut short = spec.clone();
        short.steps = 2;
        run_phase(&cfg, &mut ps_b, &mut opt_b, &short, 0, run_seed, 0, None, &mut sink).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&dir.path().join("m.ckpt"), &cfg, &ps_b).unwrap();
        save_optimizer(&dir.path().join("m.opt"), &opt_b, &ps_b).unwrap();
        let (cfg2, mut ps_c) = crate::model::load_checkpoint(&dir.path().join("m.ckpt")).unwrap();
        let mut opt_c = load_optimizer(&dir.path().join("m.opt"), &ps_c).unwrap();
        run_phase(&cfg2, &mut ps_c, &mut opt_c, &spec, 0, run_seed, 2, None, &mut sink).unwrap();

        for (id_a, id_c) in ps_a.ids().zip(ps_c.ids()) {
            assert_eq!(ps_a.entry(id_a).name, ps_c.entry(id_c).name);
            assert_eq!(
                ps_a.value(id_a).data(),
                ps_c.value(id_c).data(),
                "parameter {} diverged after resume",
                ps_a.entry(id_a).name
            );
        }
        assert_eq!(opt_a.step, opt_c.step);
    }
}
