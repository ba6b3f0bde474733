//! Length-generalization evaluation: incremental greedy decoding, accuracy
//! grids over context length × needle depth, perplexity (one-pass and
//! chunk-incremental), the analytic attention cost model, and plot-ready
//! CSV / JSONL / SVG emission.

use crate::attention::{fusion_weights, score_chunks, select_topk, ChunkStore, HsaGains};
use crate::datagen::{self, Sample, EOS};
use crate::error::{HsaError, Result};
use crate::model::{encode_chunks, ffn_block, forward, BoundParams, ForwardOptions, ModelConfig};
use crate::numerics::{Element, Graph, NodeId, ParamSet, RopeTable, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;

/// Derive an independent RNG seed from a root seed and a path of indices;
/// used so every (phase, step) or (cell, sample) pair gets its own stream.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]])
}

// ---- incremental inference ----

/// Token-at-a-time decoder state: rolling SWA key/value caches per layer,
/// the growing chunk store (encoded every `chunk_size` tokens from the
/// mid-layer hidden states), and the logits of the last processed token.
///
/// A prefix is processed with one batched forward pass (`prefill`); each
/// generated token then costs one tiny graph (`step`).
pub struct InferenceSession<'a, F: Element> {
    cfg: &'a ModelConfig,
    ps: &'a ParamSet<F>,
    opts: ForwardOptions,
    rope: Arc<RopeTable<F>>,
    /// Number of tokens processed so far (= position of the next token).
    pos: usize,
    /// Per layer: raw (pre-RoPE) K rows of the most recent tokens.
    k_cache: Vec<Vec<F>>,
    v_cache: Vec<Vec<F>>,
    /// Absolute positions of the cached rows, shared across layers.
    cache_pos: Vec<usize>,
    /// Mid-layer rows of the current incomplete chunk.
    mid_pending: Vec<F>,
    landmarks: Arc<Tensor<F>>,
    keys: Arc<Tensor<F>>,
    values: Arc<Tensor<F>>,
    num_chunks: usize,
    last_logits: Vec<F>,
}

impl<'a, F: Element> InferenceSession<'a, F> {
    /// Process a prompt with one batched forward pass and capture the caches
    /// needed to continue token by token.
    pub fn prefill(
        cfg: &'a ModelConfig,
        ps: &'a ParamSet<F>,
        opts: ForwardOptions,
        prompt: &[u32],
    ) -> Result<Self> {
        cfg.validate()?;
        let mut g = Graph::<F>::new_inference();
        let out = forward(&mut g, ps, prompt, cfg, &opts)?;
        let n = prompt.len();
        let s = cfg.chunk_size;
        let kv_w = cfg.kv_heads * cfg.d_h;
        // a future token at position n attends to the last window-1 cached rows
        let keep = n.min(opts.swa_window.saturating_sub(1));
        let mut k_cache = Vec::with_capacity(cfg.layers);
        let mut v_cache = Vec::with_capacity(cfg.layers);
        for (kn, vn) in &out.kv_nodes {
            k_cache.push(g.value(*kn).data()[(n - keep) * kv_w..].to_vec());
            v_cache.push(g.value(*vn).data()[(n - keep) * kv_w..].to_vec());
        }
        let cache_pos: Vec<usize> = (n - keep..n).collect();
        let mid = g.value(out.mid_hidden);
        let mid_pending = mid.data()[(n - n % s) * cfg.d..].to_vec();
        let (landmarks, keys, values, num_chunks) = match &out.store {
            Some(st) => (
                Arc::new(g.value(st.landmarks).clone()),
                Arc::new(g.value(st.keys).clone()),
                Arc::new(g.value(st.values).clone()),
                st.num_chunks,
            ),
            None => (
                Arc::new(Tensor::zeros(vec![0, cfg.d_r])),
                Arc::new(Tensor::zeros(vec![0, kv_w])),
                Arc::new(Tensor::zeros(vec![0, kv_w])),
                0,
            ),
        };
        let logits = g.value(out.logits);
        let last_logits = logits.row(n - 1).to_vec();
        let rope = Arc::new(RopeTable::<F>::new(cfg.d_h, cfg.rope_base, n + 1));
        Ok(InferenceSession {
            cfg,
            ps,
            opts,
            rope,
            pos: n,
            k_cache,
            v_cache,
            cache_pos,
            mid_pending,
            landmarks,
            keys,
            values,
            num_chunks,
            last_logits,
        })
    }

    /// Logits over the vocabulary for the token following everything
    /// processed so far.
    pub fn logits(&self) -> &[F] {
        &self.last_logits
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Greedy next token (ties break toward the lower id).
    pub fn argmax(&self) -> u32 {
        let mut best = 0usize;
        for (i, &v) in self.last_logits.iter().enumerate() {
            if v > self.last_logits[best] {
                best = i;
            }
        }
        best as u32
    }

    /// Encode the completed pending chunk and append it to the store.
    fn encode_pending_chunk(&mut self) -> Result<()> {
        let s = self.cfg.chunk_size;
        debug_assert_eq!(self.mid_pending.len(), s * self.cfg.d);
        let mut g = Graph::<F>::new_inference();
        let bound = BoundParams::bind(&mut g, self.ps);
        let mid = g.leaf(Tensor::new(vec![s, self.cfg.d], std::mem::take(&mut self.mid_pending))?);
        let st = encode_chunks(&mut g, self.ps, &bound, mid, self.cfg)?
            .expect("exactly one complete chunk");
        let append = |dst: &Arc<Tensor<F>>, src: &Tensor<F>| -> Arc<Tensor<F>> {
            let mut data = dst.data().to_vec();
            data.extend_from_slice(src.data());
            Arc::new(Tensor::new(vec![dst.rows() + src.rows(), src.cols()], data).expect("rows"))
        };
        self.landmarks = append(&self.landmarks, g.value(st.landmarks));
        self.keys = append(&self.keys, g.value(st.keys));
        self.values = append(&self.values, g.value(st.values));
        self.num_chunks += 1;
        Ok(())
    }

    /// Process one token and refresh `logits()`.
    pub fn step(&mut self, token: u32) -> Result<()> {
        let cfg = self.cfg;
        let (h, hkv, dh) = (cfg.heads, cfg.kv_heads, cfg.d_h);
        let eps = F::from_f64(cfg.norm_eps);
        if self.pos + 1 >= self.rope.max_pos() {
            self.rope = Arc::new(RopeTable::<F>::new(dh, cfg.rope_base, (self.pos + 1) * 2));
        }
        let mut g = Graph::<F>::new_inference();
        let bound = BoundParams::bind(&mut g, self.ps);
        let ps = self.ps;
        let embed = bound.node(ps, "embed.tok")?;
        let mut x = g.embedding(embed, &[token])?;
        let q_pos: Arc<Vec<usize>> = Arc::new(vec![self.pos]);
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());

        for i in 0..cfg.layers {
            if i == cfg.layers / 2 {
                self.mid_pending.extend_from_slice(g.value(x).row(0));
                if self.mid_pending.len() == cfg.chunk_size * cfg.d {
                    self.encode_pending_chunk()?;
                }
            }
            let p = |s: &str| format!("layer.{i}.{s}");
            let gain = bound.node(ps, &p("attn_norm.gain"))?;
            let xn = g.rms_norm(x, gain, eps)?;
            let q = g.matmul(xn, bound.node(ps, &p("swa.wq"))?)?;
            let k_new = g.matmul(xn, bound.node(ps, &p("swa.wk"))?)?;
            let v_new = g.matmul(xn, bound.node(ps, &p("swa.wv"))?)?;
            // current token joins the attended set
            self.k_cache[i].extend_from_slice(g.value(k_new).row(0));
            self.v_cache[i].extend_from_slice(g.value(v_new).row(0));
            let rows = self.cache_pos.len() + 1;
            let mut att_pos = self.cache_pos.clone();
            att_pos.push(self.pos);
            let att_pos: Arc<Vec<usize>> = Arc::new(att_pos);
            let k_all =
                g.leaf(Tensor::new(vec![rows, hkv * dh], self.k_cache[i].clone())?);
            let v_all =
                g.leaf(Tensor::new(vec![rows, hkv * dh], self.v_cache[i].clone())?);
            let mut kv_done: Vec<Option<(NodeId, NodeId)>> = vec![None; hkv];
            let mut head_outs = Vec::with_capacity(h);
            for head in 0..h {
                let kv_head = head / (h / hkv);
                let q_h = g.slice_cols(q, head * dh, dh)?;
                let q_h = g.rope(q_h, Arc::clone(&q_pos), Arc::clone(&self.rope))?;
                let (k_h, v_h) = match kv_done[kv_head] {
                    Some(pair) => pair,
                    None => {
                        let k_h = g.slice_cols(k_all, kv_head * dh, dh)?;
                        let k_h = g.rope(k_h, Arc::clone(&att_pos), Arc::clone(&self.rope))?;
                        let v_h = g.slice_cols(v_all, kv_head * dh, dh)?;
                        kv_done[kv_head] = Some((k_h, v_h));
                        (k_h, v_h)
                    }
                };
                let sc = g.matmul_nt(q_h, k_h)?;
                let sc = g.scale(sc, scale);
                let pr = g.softmax(sc, 1)?;
                head_outs.push(g.matmul(pr, v_h)?);
            }
            let att = g.concat_cols(&head_outs)?;
            let att = g.matmul(att, bound.node(ps, &p("swa.wo"))?)?;
            let mut res = g.add(x, att)?;
            if cfg.is_hsa_layer(i) && self.num_chunks > 0 {
                let q_slc = g.matmul(xn, bound.node(ps, &p("hsa.q_slc"))?)?;
                let landmarks = g.leaf_shared(Arc::clone(&self.landmarks));
                let (scores, masked) =
                    score_chunks(&mut g, q_slc, landmarks, &[self.pos], cfg.chunk_size)?;
                let sel = select_topk(&masked, self.opts.top_k)?;
                let weights = fusion_weights(&mut g, scores, &sel)?;
                let store = ChunkStore {
                    chunk_size: cfg.chunk_size,
                    num_chunks: self.num_chunks,
                    landmarks,
                    keys: g.leaf_shared(Arc::clone(&self.keys)),
                    values: g.leaf_shared(Arc::clone(&self.values)),
                };
                let q_attn = g.matmul(xn, bound.node(ps, &p("hsa.wq"))?)?;
                let gains = HsaGains {
                    q: (0..h)
                        .map(|j| bound.node(ps, &p(&format!("hsa.q_norm.{j}.gain"))))
                        .collect::<Result<_>>()?,
                    k: (0..hkv)
                        .map(|j| bound.node(ps, &p(&format!("hsa.k_norm.{j}.gain"))))
                        .collect::<Result<_>>()?,
                };
                let hsa = crate::attention::hsa_attend(
                    &mut g, q_attn, &store, &sel, weights, &gains, h, hkv, dh, eps,
                )?;
                let hsa = g.matmul(hsa, bound.node(ps, &p("hsa.wo"))?)?;
                res = g.add(res, hsa)?;
            }
            x = ffn_block(&mut g, ps, &bound, res, &format!("layer.{i}"), eps)?;
        }
        let final_gain = bound.node(ps, "final_norm.gain")?;
        let xn = g.rms_norm(x, final_gain, eps)?;
        let logits = g.matmul(xn, bound.node(ps, "lm_head")?)?;
        self.last_logits = g.value(logits).row(0).to_vec();

        // roll the SWA caches to the last window-1 rows
        self.cache_pos.push(self.pos);
        let keep = self.cache_pos.len().min(self.opts.swa_window.saturating_sub(1));
        let drop = self.cache_pos.len() - keep;
        if drop > 0 {
            self.cache_pos.drain(..drop);
            let kv_w = hkv * dh;
            for i in 0..cfg.layers {
                self.k_cache[i].drain(..drop * kv_w);
                self.v_cache[i].drain(..drop * kv_w);
            }
        }
        self.pos += 1;
        Ok(())
    }
}

/// Greedy-decode up to `max_tokens` continuation tokens after a prompt,
/// stopping at EOS.
pub fn greedy_decode<F: Element>(
    cfg: &ModelConfig,
    ps: &ParamSet<F>,
    opts: ForwardOptions,
    prompt: &[u32],
    max_tokens: usize,
) -> Result<Vec<u32>> {
    let mut sess = InferenceSession::prefill(cfg, ps, opts, prompt)?;
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let next = sess.argmax();
        if next == EOS {
            break;
        }
        out.push(next);
        if out.len() < max_tokens {
            sess.step(next)?;
        }
    }
    Ok(out)
}

// ---- NIAH grids ----

/// Task evaluated over the length × depth grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalTask {
    Sniah,
    Mqniah { n_queries: usize, n_kv: usize },
    Vartrack { chain_length: usize },
}

impl EvalTask {
    pub fn name(&self) -> &'static str {
        match self {
            EvalTask::Sniah => "sniah",
            EvalTask::Mqniah { .. } => "mqniah",
            EvalTask::Vartrack { .. } => "vartrack",
        }
    }
}

/// Grid specification for `eval_niah`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NiahSpec {
    pub task: EvalTask,
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    pub samples_per_cell: usize,
    pub seed: u64,
    /// Training context length; longer cells are out-of-domain.
    pub in_domain_boundary: usize,
    /// Cells whose estimated working set exceeds this are marked skipped.
    pub max_cell_bytes: usize,
}

/// Accuracy per (length, depth) cell; `None` marks a skipped cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyGrid {
    pub task: String,
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    /// Row-major `[lengths.len() * depths.len()]`.
    pub accuracy: Vec<Option<f64>>,
    pub samples_per_cell: usize,
    pub in_domain_boundary: usize,
}

impl AccuracyGrid {
    pub fn cell(&self, li: usize, di: usize) -> Option<f64> {
        self.accuracy[li * self.depths.len() + di]
    }

    /// Mean accuracy across depths at one length (skipped cells excluded).
    pub fn accuracy_at_length(&self, length: usize) -> Option<f64> {
        let li = self.lengths.iter().position(|&l| l == length)?;
        let vals: Vec<f64> = (0..self.depths.len()).filter_map(|di| self.cell(li, di)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// CSV with schema `task,length,depth,accuracy,n_samples`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,length,depth,accuracy,n_samples\n");
        for (li, &len) in self.lengths.iter().enumerate() {
            for (di, &depth) in self.depths.iter().enumerate() {
                let acc = match self.cell(li, di) {
                    Some(a) => format!("{a}"),
                    None => "skipped".to_string(),
                };
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    self.task, len, depth, acc, self.samples_per_cell
                ));
            }
        }
        out
    }
}

/// One evaluated sample, emitted as a JSONL record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub task: String,
    pub length: usize,
    pub depth: f64,
    pub index: usize,
    pub correct: bool,
    pub expected: String,
    pub predicted: String,
}

fn gen_eval_sample(task: &EvalTask, length: usize, depth: f64, rng: &mut ChaCha8Rng) -> Result<Sample> {
    match task {
        EvalTask::Sniah => datagen::gen_sniah(length, depth, rng),
        EvalTask::Mqniah { n_queries, n_kv } => {
            datagen::gen_mqniah(length, *n_queries, *n_kv, rng)
        }
        EvalTask::Vartrack { chain_length } => {
            datagen::gen_vartrack(length, *chain_length, rng)
        }
    }
}

/// Stored answer re-derived by the independent solver; errors when the two
/// disagree (generator/scorer cross-validation).
fn expected_answer(task: &EvalTask, sample: &Sample) -> Result<String> {
    let (start, len) = sample
        .answer_span()
        .ok_or_else(|| HsaError::InvalidArgument { op: "eval_niah", msg: "no answer span".into() })?;
    let stored = datagen::decode_text(&sample.tokens[start..start + len]);
    let solved = match task {
        EvalTask::Sniah => datagen::solve_sniah(sample),
        EvalTask::Mqniah { .. } => datagen::solve_mqniah(sample),
        EvalTask::Vartrack { .. } => datagen::solve_vartrack(sample).map(|mut v| {
            v.sort();
            v.join(" ")
        }),
    }
    .ok_or_else(|| HsaError::Numeric("independent solver failed on generated sample".into()))?;
    let canonical = |s: &str| {
        let mut parts: Vec<&str> = s.split_whitespace().collect();
        if matches!(task, EvalTask::Vartrack { .. }) {
            parts.sort_unstable();
        }
        parts.join(" ")
    };
    if canonical(&stored) != canonical(&solved) {
        return Err(HsaError::Numeric(format!(
            "scoring oracle mismatch: stored '{stored}' vs solved '{solved}'"
        )));
    }
    Ok(stored)
}

fn answers_match(task: &EvalTask, expected: &str, predicted: &str) -> bool {
    match task {
        EvalTask::Vartrack { .. } => {
            let mut a: Vec<&str> = expected.split_whitespace().collect();
            let mut b: Vec<&str> = predicted.split_whitespace().collect();
            a.sort_unstable();
            b.sort_unstable();
            a == b
        }
        _ => expected == predicted.trim(),
    }
}

/// Rough peak working-set estimate for a prefill of length `n`.
pub fn estimate_prefill_bytes(cfg: &ModelConfig, n: usize) -> usize {
    let f = 4; // f32
    let x_history = (cfg.layers + 2) * n * cfg.d * f;
    let kv = cfg.layers * 2 * n * cfg.kv_heads * cfg.d_h * f;
    let logits = n * cfg.vocab_size * f;
    let store = (n / cfg.chunk_size.max(1))
        * (cfg.chunk_size * 2 * cfg.kv_heads * cfg.d_h + cfg.d_r)
        * f;
    2 * (x_history + kv + logits + store)
}

/// Evaluate a NIAH-style task over the length × depth grid with greedy
/// decoding and exact-match scoring.
pub fn eval_niah<F: Element>(
    cfg: &ModelConfig,
    ps: &ParamSet<F>,
    opts: &ForwardOptions,
    spec: &NiahSpec,
) -> Result<(AccuracyGrid, Vec<SampleRecord>)> {
    let mut accuracy = Vec::with_capacity(spec.lengths.len() * spec.depths.len());
    let mut records = Vec::new();
    for (li, &length) in spec.lengths.iter().enumerate() {
        for (di, &depth) in spec.depths.iter().enumerate() {
            if estimate_prefill_bytes(cfg, length) > spec.max_cell_bytes {
                accuracy.push(None);
                continue;
            }
            let mut correct = 0usize;
            for idx in 0..spec.samples_per_cell {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                    spec.seed, li as u64, di as u64, idx as u64,
                ]));
                let sample = gen_eval_sample(&spec.task, length, depth, &mut rng)?;
                let expected = expected_answer(&spec.task, &sample)?;
                let (start, _) = sample.answer_span().expect("validated above");
                let generated = greedy_decode(
                    cfg,
                    ps,
                    opts.clone(),
                    &sample.tokens[..start],
                    expected.len() + 2,
                )?;
                let predicted = datagen::decode_text(&generated);
                let ok = answers_match(&spec.task, &expected, &predicted);
                correct += ok as usize;
                records.push(SampleRecord {
                    task: spec.task.name().to_string(),
                    length,
                    depth,
                    index: idx,
                    correct: ok,
                    expected,
                    predicted,
                });
            }
            accuracy.push(Some(correct as f64 / spec.samples_per_cell as f64));
        }
    }
    Ok((
        AccuracyGrid {
            task: spec.task.name().to_string(),
            lengths: spec.lengths.clone(),
            depths: spec.depths.clone(),
            accuracy,
            samples_per_cell: spec.samples_per_cell,
            in_domain_boundary: spec.in_domain_boundary,
        },
        records,
    ))
}

// ---- perplexity ----

fn nll_of_row<F: Element>(logits: &[F], target: u32) -> f64 {
    let mx = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = (logits.iter().map(|v| (v.as_f64() - mx).exp()).sum::<f64>()).ln() + mx;
    lse - logits[target as usize].as_f64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PplMode {
    /// One batched forward pass over the whole stream.
    OnePass,
    /// Token-incremental processing with on-line chunk-store growth.
    Incremental,
}

/// Perplexity `exp(mean NLL)` of the final `last_n` tokens given the full
/// preceding stream as context.
pub fn eval_ppl<F: Element>(
    cfg: &ModelConfig,
    ps: &ParamSet<F>,
    opts: &ForwardOptions,
    tokens: &[u32],
    last_n: usize,
    mode: PplMode,
) -> Result<f64> {
    if tokens.len() < 2 || last_n == 0 || last_n > tokens.len() - 1 {
        return Err(HsaError::InvalidArgument {
            op: "eval_ppl",
            msg: format!("need 1 <= last_n ({last_n}) <= len-1 ({})", tokens.len() - 1),
        });
    }
    let first_target = tokens.len() - last_n;
    let mut nll = 0.0f64;
    match mode {
        PplMode::OnePass => {
            let mut g = Graph::<F>::new_inference();
            let out = forward(&mut g, ps, tokens, cfg, opts)?;
            let logits = g.value(out.logits);
            for t in first_target..tokens.len() {
                nll += nll_of_row(logits.row(t - 1), tokens[t]);
            }
        }
        PplMode::Incremental => {
            let mut sess = InferenceSession::prefill(cfg, ps, opts.clone(), &tokens[..1])?;
            for t in 1..tokens.len() {
                if t >= first_target {
                    nll += nll_of_row(sess.logits(), tokens[t]);
                }
                if t + 1 < tokens.len() {
                    sess.step(tokens[t])?;
                }
            }
        }
    }
    Ok((nll / last_n as f64).exp())
}

// ---- analytic cost model ----

/// Closed-form FLOP and KV-memory figures for one context length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostRow {
    pub n: u64,
    /// Full-attention score+value FLOPs: layers · 2 n² d.
    pub full_attn_flops: u128,
    /// SWA FLOPs: layers · 2 n min(n, W) d.
    pub swa_flops: u128,
    /// HSA intra-chunk attention FLOPs: hsa_layers · 2 n K S d. Linear in n.
    pub hsa_attend_flops: u128,
    /// Landmark retrieval scoring FLOPs: hsa_layers · n (n/S) d_r.
    pub hsa_retrieval_flops: u128,
    pub kv_full_bytes: u128,
    pub kv_swa_bytes: u128,
    pub kv_hsa_bytes: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// Smallest n where the hybrid total undercuts full attention.
    pub crossover: Option<u64>,
}

fn cost_row(cfg: &ModelConfig, window: usize, top_k: usize, n: u64) -> CostRow {
    let (l, d, s) = (cfg.layers as u128, cfg.d as u128, cfg.chunk_size as u128);
    let hs = cfg.hsa_layer_indices.len() as u128;
    let (k, w, d_r) = (top_k as u128, window as u128, cfg.d_r as u128);
    let kv_row = (2 * cfg.kv_heads * cfg.d_h * 4) as u128;
    let n = n as u128;
    CostRow {
        n: n as u64,
        full_attn_flops: l * 2 * n * n * d,
        swa_flops: l * 2 * n * n.min(w) * d,
        hsa_attend_flops: hs * 2 * n * k * s * d,
        hsa_retrieval_flops: hs * n * (n / s) * d_r,
        kv_full_bytes: n * l * kv_row,
        kv_swa_bytes: n.min(w) * l * kv_row,
        kv_hsa_bytes: n.min(w) * l * kv_row + (n / s) * (s * kv_row + d_r * 4),
    }
}

/// Evaluate the cost model at the requested lengths and locate the
/// full-vs-hybrid crossover by exact integer arithmetic.
pub fn cost_model(
    cfg: &ModelConfig,
    window: usize,
    top_k: usize,
    lengths: &[u64],
) -> Result<CostReport> {
    if lengths.iter().any(|&n| n == 0) {
        return Err(HsaError::InvalidArgument { op: "cost_model", msg: "lengths must be positive".into() });
    }
    let rows = lengths.iter().map(|&n| cost_row(cfg, window, top_k, n)).collect();
    let hybrid_beats_full = |n: u64| {
        let r = cost_row(cfg, window, top_k, n);
        r.swa_flops + r.hsa_attend_flops + r.hsa_retrieval_flops < r.full_attn_flops
    };
    // scan doublings for an upper bound, then binary-search the boundary
    let mut crossover = None;
    let mut hi = 1u64;
    while hi <= (1 << 40) {
        if hybrid_beats_full(hi) {
            let mut lo = hi / 2;
            let mut hi2 = hi;
            while lo + 1 < hi2 {
                let mid = lo + (hi2 - lo) / 2;
                if hybrid_beats_full(mid) {
                    hi2 = mid;
                } else {
                    lo = mid;
                }
            }
            crossover = Some(hi2);
            break;
        }
        hi *= 2;
    }
    Ok(CostReport { rows, crossover })
}

// ---- plot emission ----

fn accuracy_color(a: f64) -> String {
    // simple red→yellow→green ramp
    let a = a.clamp(0.0, 1.0);
    let (r, g) = if a < 0.5 { (255.0, 510.0 * a) } else { (510.0 * (1.0 - a), 255.0) };
    format!("rgb({},{},64)", r as u32, g as u32)
}

/// Self-contained SVG heatmap of an accuracy grid, with the in-domain
/// boundary drawn as a dashed red line.
pub fn svg_heatmap(grid: &AccuracyGrid, title: &str) -> String {
    let cell = 56.0;
    let (ml, mt, mb) = (90.0, 48.0, 46.0);
    let w = ml + cell * grid.lengths.len() as f64 + 20.0;
    let h = mt + cell * grid.depths.len() as f64 + mb;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        w / 2.0
    );
    for (li, &len) in grid.lengths.iter().enumerate() {
        for (di, _) in grid.depths.iter().enumerate() {
            let x = ml + li as f64 * cell;
            let y = mt + di as f64 * cell;
            let (fill, label) = match grid.cell(li, di) {
                Some(a) => (accuracy_color(a), format!("{:.2}", a)),
                None => ("rgb(210,210,210)".into(), "skip".into()),
            };
            s.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\" stroke=\"white\"/>\n\
                 <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            ));
            if di == grid.depths.len() - 1 {
                s.push_str(&format!(
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{len}</text>\n",
                    x + cell / 2.0,
                    y + cell + 18.0
                ));
            }
        }
        // dashed boundary after the last in-domain column
        if li + 1 < grid.lengths.len()
            && grid.lengths[li] <= grid.in_domain_boundary
            && grid.lengths[li + 1] > grid.in_domain_boundary
        {
            let x = ml + (li + 1) as f64 * cell;
            s.push_str(&format!(
                "<line x1=\"{x}\" y1=\"{mt}\" x2=\"{x}\" y2=\"{}\" stroke=\"red\" \
                 stroke-width=\"2\" stroke-dasharray=\"6,4\"/>\n",
                mt + cell * grid.depths.len() as f64
            ));
        }
    }
    for (di, &depth) in grid.depths.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">depth {depth:.2}</text>\n",
            ml - 8.0,
            mt + di as f64 * cell + cell / 2.0 + 4.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">context length</text>\n</svg>\n",
        ml + cell * grid.lengths.len() as f64 / 2.0,
        h - 8.0
    ));
    s
}

/// Self-contained SVG line chart; one polyline per named series.
pub fn svg_lines(
    series: &[(String, Vec<(f64, f64)>)],
    title: &str,
    x_label: &str,
    y_label: &str,
) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 420.0, 70.0, 130.0, 48.0, 56.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let xs: Vec<f64> = series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.1)).collect();
    let (x0, x1) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = (
        ys.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(1e-12),
    );
    let sx = |x: f64| ml + (x - x0) / (x1 - x0).max(1e-12) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0).max(1e-12) * ph;
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n\
         <rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#888\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{y_label}</text>\n",
        w / 2.0,
        ml + pw / 2.0,
        h - 12.0,
        mt + ph / 2.0,
        mt + ph / 2.0
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = palette[i % palette.len()];
        let path: Vec<String> =
            pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            path.join(" ")
        ));
        for &(x, y) in pts {
            s.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>\n",
            w - mr + 8.0,
            mt + 16.0 + 16.0 * i as f64
        ));
    }
    // min/max tick labels
    s.push_str(&format!(
        "<text x=\"{ml}\" y=\"{}\" text-anchor=\"middle\">{x0:.0}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x1:.0}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y0:.2}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.2}</text>\n</svg>\n",
        h - mb + 18.0,
        ml + pw,
        h - mb + 18.0,
        ml - 6.0,
        mt + ph + 4.0,
        ml - 6.0,
        mt + 10.0
    ));
    s
}
