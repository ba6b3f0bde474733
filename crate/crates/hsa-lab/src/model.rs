//! The hybrid decoder: a lower stack of SWA-only transformer blocks, a
//! bidirectional [CLS] chunk encoder over the mid-layer hidden states, and
//! an upper stack where designated layers add an HSA read of the shared
//! chunk store into the residual stream alongside their SWA output.
//!
//! Also home to parameter initialization and the single-file checkpoint
//! format (canonical JSON header + raw little-endian f32 blobs + checksum).

use crate::attention::{
    fusion_weights, hsa_attend, score_chunks, select_topk, swa_attend, ChunkStore, HsaGains,
};
use crate::error::{HsaError, Result};
use crate::numerics::{Element, Graph, NodeId, ParamId, ParamSet, RopeTable, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Architecture hyperparameters. `swa_window` and `top_k` are defaults that
/// training phases and evaluation may override at runtime; they never affect
/// parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Model width; must equal `heads * d_h`.
    pub d: usize,
    /// Total decoder layers; even, split half lower / half upper.
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub d_h: usize,
    pub ffn_width: usize,
    /// Chunk length S for the retrieval memory.
    pub chunk_size: usize,
    /// Default number of chunks each token retrieves.
    pub top_k: usize,
    /// Default sliding-window width for the SWA path.
    pub swa_window: usize,
    /// 0-based indices of the upper-decoder layers that carry an HSA module;
    /// each must be strictly above layers/2 so the shared memory exists.
    pub hsa_layer_indices: Vec<usize>,
    /// Bidirectional blocks in the chunk encoder.
    pub encoder_depth: usize,
    /// Retrieval dimension of Q_slc / landmarks (the paper keeps this at d).
    pub d_r: usize,
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(HsaError::Config(msg));
        if self.vocab_size == 0 {
            return fail("vocab_size must be >= 1".into());
        }
        if self.layers == 0 || self.layers % 2 != 0 {
            return fail(format!("layers must be even and positive, got {}", self.layers));
        }
        if self.heads == 0 || self.kv_heads == 0 || self.heads % self.kv_heads != 0 {
            return fail(format!(
                "heads ({}) must be a positive multiple of kv_heads ({})",
                self.heads, self.kv_heads
            ));
        }
        if self.heads * self.d_h != self.d {
            return fail(format!(
                "heads * d_h must equal d: {} * {} != {}",
                self.heads, self.d_h, self.d
            ));
        }
        if self.ffn_width == 0 || self.d_r == 0 || self.chunk_size == 0 {
            return fail("ffn_width, d_r and chunk_size must be >= 1".into());
        }
        if self.top_k == 0 || self.swa_window == 0 {
            return fail("top_k and swa_window must be >= 1".into());
        }
        if self.encoder_depth == 0 {
            return fail("encoder_depth must be >= 1".into());
        }
        for &i in &self.hsa_layer_indices {
            if i <= self.layers / 2 || i >= self.layers {
                return fail(format!(
                    "hsa_layer_indices entry {i} outside ({}, {})",
                    self.layers / 2,
                    self.layers
                ));
            }
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Micro configuration used by gradient and causality checks.
    pub fn micro() -> Self {
        ModelConfig {
            vocab_size: 17,
            d: 16,
            layers: 4,
            heads: 2,
            kv_heads: 2,
            d_h: 8,
            ffn_width: 32,
            chunk_size: 16,
            top_k: 2,
            swa_window: 16,
            hsa_layer_indices: vec![3],
            encoder_depth: 1,
            d_r: 16,
            rope_base: 10000.0,
            norm_eps: 1e-6,
        }
    }

    /// Desk-scale configuration (~6M parameters): context 2048, S=32, K=8.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: crate::datagen::VOCAB_SIZE,
            d: 192,
            layers: 8,
            heads: 4,
            kv_heads: 4,
            d_h: 48,
            ffn_width: 768,
            chunk_size: 32,
            top_k: 8,
            swa_window: 512,
            hsa_layer_indices: vec![5, 7],
            encoder_depth: 2,
            d_r: 192,
            rope_base: 10000.0,
            norm_eps: 1e-6,
        }
    }

    pub fn is_hsa_layer(&self, layer: usize) -> bool {
        self.hsa_layer_indices.contains(&layer)
    }
}

/// Runtime knobs for a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub swa_window: usize,
    pub top_k: usize,
}

impl ForwardOptions {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        ForwardOptions { swa_window: cfg.swa_window, top_k: cfg.top_k }
    }
}

/// Handles into the graph produced by one forward pass.
pub struct ForwardOutput {
    /// `[n, vocab]` logits.
    pub logits: NodeId,
    /// Hidden states after the lower decoder (input to the chunk encoder).
    pub mid_hidden: NodeId,
    /// The shared retrieval memory, absent when the sequence holds no
    /// complete chunk.
    pub store: Option<ChunkStore>,
    /// Per-layer raw (pre-RoPE) SWA key/value projection nodes, for callers
    /// that build incremental caches.
    pub kv_nodes: Vec<(NodeId, NodeId)>,
    /// Unmasked landmark score nodes per HSA layer, `(layer, [n, C])`.
    pub retrieval_scores: Vec<(usize, NodeId)>,
}

/// Parameter nodes bound into one graph, addressed by name.
pub struct BoundParams {
    nodes: HashMap<ParamId, NodeId>,
}

impl BoundParams {
    /// Register every parameter of the set as a shared leaf of the graph.
    pub fn bind<F: Element>(g: &mut Graph<F>, ps: &ParamSet<F>) -> Self {
        let nodes = ps.ids().map(|id| (id, g.param(ps, id))).collect();
        BoundParams { nodes }
    }

    pub fn node<F: Element>(&self, ps: &ParamSet<F>, name: &str) -> Result<NodeId> {
        Ok(self.nodes[&ps.id(name)?])
    }
}

/// Initialize all parameters: normal(0, 0.02) projections with output
/// projections shrunk by 1/sqrt(2·layers), embeddings normal(0, 0.02),
/// all norm gains exactly 1.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Normal::new(0.0f64, 0.02).expect("valid std");
    let out_scale = 1.0 / ((2 * cfg.layers) as f64).sqrt();
    let mut ps = ParamSet::new();

    let sample = |rng: &mut ChaCha8Rng, shape: Vec<usize>, std_scale: f64| -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| (base.sample(rng) * std_scale) as f32).collect();
        Tensor::new(shape, data).expect("shape/data agree")
    };

    let (d, dh, h, hkv, ffn) = (cfg.d, cfg.d_h, cfg.heads, cfg.kv_heads, cfg.ffn_width);
    ps.insert("embed.tok", sample(&mut rng, vec![cfg.vocab_size, d], 1.0))?;
    for i in 0..cfg.layers {
        let p = |s: &str| format!("layer.{i}.{s}");
        ps.insert(p("attn_norm.gain"), Tensor::full(vec![d], 1.0))?;
        ps.insert(p("swa.wq"), sample(&mut rng, vec![d, h * dh], 1.0))?;
        ps.insert(p("swa.wk"), sample(&mut rng, vec![d, hkv * dh], 1.0))?;
        ps.insert(p("swa.wv"), sample(&mut rng, vec![d, hkv * dh], 1.0))?;
        ps.insert(p("swa.wo"), sample(&mut rng, vec![h * dh, d], out_scale))?;
        if cfg.is_hsa_layer(i) {
            ps.insert(p("hsa.q_slc"), sample(&mut rng, vec![d, cfg.d_r], 1.0))?;
            ps.insert(p("hsa.wq"), sample(&mut rng, vec![d, h * dh], 1.0))?;
            ps.insert(p("hsa.wo"), sample(&mut rng, vec![h * dh, d], out_scale))?;
            for j in 0..h {
                ps.insert(p(&format!("hsa.q_norm.{j}.gain")), Tensor::full(vec![dh], 1.0))?;
            }
            for j in 0..hkv {
                ps.insert(p(&format!("hsa.k_norm.{j}.gain")), Tensor::full(vec![dh], 1.0))?;
            }
        }
        ps.insert(p("ffn_norm.gain"), Tensor::full(vec![d], 1.0))?;
        ps.insert(p("ffn.w_gate"), sample(&mut rng, vec![d, ffn], 1.0))?;
        ps.insert(p("ffn.w_up"), sample(&mut rng, vec![d, ffn], 1.0))?;
        ps.insert(p("ffn.w_down"), sample(&mut rng, vec![ffn, d], out_scale))?;
    }
    ps.insert("encoder.cls", sample(&mut rng, vec![1, d], 1.0))?;
    ps.insert("encoder.pos", sample(&mut rng, vec![cfg.chunk_size + 1, d], 1.0))?;
    for e in 0..cfg.encoder_depth {
        let p = |s: &str| format!("encoder.{e}.{s}");
        ps.insert(p("attn_norm.gain"), Tensor::full(vec![d], 1.0))?;
        ps.insert(p("attn.wq"), sample(&mut rng, vec![d, h * dh], 1.0))?;
        ps.insert(p("attn.wk"), sample(&mut rng, vec![d, h * dh], 1.0))?;
        ps.insert(p("attn.wv"), sample(&mut rng, vec![d, h * dh], 1.0))?;
        ps.insert(p("attn.wo"), sample(&mut rng, vec![h * dh, d], out_scale))?;
        ps.insert(p("ffn_norm.gain"), Tensor::full(vec![d], 1.0))?;
        ps.insert(p("ffn.w_gate"), sample(&mut rng, vec![d, ffn], 1.0))?;
        ps.insert(p("ffn.w_up"), sample(&mut rng, vec![d, ffn], 1.0))?;
        ps.insert(p("ffn.w_down"), sample(&mut rng, vec![ffn, d], out_scale))?;
    }
    ps.insert("encoder.out_norm.gain", Tensor::full(vec![d], 1.0))?;
    ps.insert("encoder.landmark_proj", sample(&mut rng, vec![d, cfg.d_r], 1.0))?;
    ps.insert("encoder.k_proj", sample(&mut rng, vec![d, hkv * dh], 1.0))?;
    ps.insert("encoder.v_proj", sample(&mut rng, vec![d, hkv * dh], 1.0))?;
    ps.insert("final_norm.gain", Tensor::full(vec![d], 1.0))?;
    ps.insert("lm_head", sample(&mut rng, vec![d, cfg.vocab_size], 1.0))?;
    Ok(ps)
}

/// SiLU-gated feed-forward sublayer with pre-norm, added to the residual.
pub(crate) fn ffn_block<F: Element>(
    g: &mut Graph<F>,
    ps: &ParamSet<F>,
    bound: &BoundParams,
    x: NodeId,
    prefix: &str,
    eps: F,
) -> Result<NodeId> {
    let gain = bound.node(ps, &format!("{prefix}.ffn_norm.gain"))?;
    let w_gate = bound.node(ps, &format!("{prefix}.ffn.w_gate"))?;
    let w_up = bound.node(ps, &format!("{prefix}.ffn.w_up"))?;
    let w_down = bound.node(ps, &format!("{prefix}.ffn.w_down"))?;
    let xn = g.rms_norm(x, gain, eps)?;
    let gate = g.matmul(xn, w_gate)?;
    let gate = g.silu(gate);
    let up = g.matmul(xn, w_up)?;
    let prod = g.mul(gate, up)?;
    let down = g.matmul(prod, w_down)?;
    g.add(x, down)
}

/// Encode every complete chunk of the mid-layer hidden states through the
/// bidirectional [CLS] encoder and project landmarks / shared K / shared V.
/// Returns `None` when the sequence holds no complete chunk.
pub fn encode_chunks<F: Element>(
    g: &mut Graph<F>,
    ps: &ParamSet<F>,
    bound: &BoundParams,
    mid_hidden: NodeId,
    cfg: &ModelConfig,
) -> Result<Option<ChunkStore>> {
    let n = g.value(mid_hidden).rows();
    let s = cfg.chunk_size;
    let c = n / s;
    if c == 0 {
        return Ok(None);
    }
    let eps = F::from_f64(cfg.norm_eps);
    let width = s + 1; // [CLS] + S tokens per encoded chunk
    let cls = bound.node(ps, "encoder.cls")?;
    let pos = bound.node(ps, "encoder.pos")?;

    // interleave [CLS] with each chunk's rows: [c*(S+1), d]
    let mut parts = Vec::with_capacity(2 * c);
    for j in 0..c {
        parts.push(cls);
        let rows: Arc<Vec<u32>> = Arc::new(((j * s) as u32..((j + 1) * s) as u32).collect());
        parts.push(g.gather_rows(mid_hidden, rows)?);
    }
    let stacked = g.concat_rows(&parts)?;
    let pos_idx: Arc<Vec<u32>> =
        Arc::new((0..c).flat_map(|_| 0..width as u32).collect());
    let pos_rows = g.gather_rows(pos, pos_idx)?;
    let mut x = g.add(stacked, pos_rows)?;

    let (h, dh) = (cfg.heads, cfg.d_h);
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    for e in 0..cfg.encoder_depth {
        let p = |s: &str| format!("encoder.{e}.{s}");
        let gain = bound.node(ps, &p("attn_norm.gain"))?;
        let xn = g.rms_norm(x, gain, eps)?;
        let q = g.matmul(xn, bound.node(ps, &p("attn.wq"))?)?;
        let k = g.matmul(xn, bound.node(ps, &p("attn.wk"))?)?;
        let v = g.matmul(xn, bound.node(ps, &p("attn.wv"))?)?;
        let mut head_outs = Vec::with_capacity(h);
        for head in 0..h {
            let q_h = g.slice_cols(q, head * dh, dh)?;
            let k_h = g.slice_cols(k, head * dh, dh)?;
            let v_h = g.slice_cols(v, head * dh, dh)?;
            // full bidirectional attention within each chunk independently
            let mut chunk_outs = Vec::with_capacity(c);
            for j in 0..c {
                let rows: Arc<Vec<u32>> =
                    Arc::new(((j * width) as u32..((j + 1) * width) as u32).collect());
                let qj = g.gather_rows(q_h, Arc::clone(&rows))?;
                let kj = g.gather_rows(k_h, Arc::clone(&rows))?;
                let vj = g.gather_rows(v_h, rows)?;
                let sc = g.matmul_nt(qj, kj)?;
                let sc = g.scale(sc, scale);
                let pr = g.softmax(sc, 1)?;
                chunk_outs.push(g.matmul(pr, vj)?);
            }
            head_outs.push(g.concat_rows(&chunk_outs)?);
        }
        let att = g.concat_cols(&head_outs)?;
        let att = g.matmul(att, bound.node(ps, &p("attn.wo"))?)?;
        x = g.add(x, att)?;
        x = ffn_block(g, ps, bound, x, &format!("encoder.{e}"), eps)?;
    }
    let out_gain = bound.node(ps, "encoder.out_norm.gain")?;
    let out = g.rms_norm(x, out_gain, eps)?;

    let cls_idx: Arc<Vec<u32>> = Arc::new((0..c).map(|j| (j * width) as u32).collect());
    let tok_idx: Arc<Vec<u32>> = Arc::new(
        (0..c).flat_map(|j| (j * width + 1) as u32..((j + 1) * width) as u32).collect(),
    );
    let cls_out = g.gather_rows(out, cls_idx)?;
    let tok_out = g.gather_rows(out, tok_idx)?;
    let landmarks = g.matmul(cls_out, bound.node(ps, "encoder.landmark_proj")?)?;
    let keys = g.matmul(tok_out, bound.node(ps, "encoder.k_proj")?)?;
    let values = g.matmul(tok_out, bound.node(ps, "encoder.v_proj")?)?;
    Ok(Some(ChunkStore { chunk_size: s, num_chunks: c, landmarks, keys, values }))
}

/// Full forward pass: embedding, lower SWA decoder, chunk encoding, upper
/// decoder with HSA reads of the shared store, final norm and logits.
pub fn forward<F: Element>(
    g: &mut Graph<F>,
    ps: &ParamSet<F>,
    tokens: &[u32],
    cfg: &ModelConfig,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    if tokens.is_empty() {
        return Err(HsaError::InvalidArgument { op: "forward", msg: "empty sequence".into() });
    }
    let n = tokens.len();
    let eps = F::from_f64(cfg.norm_eps);
    let bound = BoundParams::bind(g, ps);
    let rope = Arc::new(RopeTable::<F>::new(cfg.d_h, cfg.rope_base, n));
    let positions: Arc<Vec<usize>> = Arc::new((0..n).collect());

    let embed = bound.node(ps, "embed.tok")?;
    let mut x = g.embedding(embed, tokens)?;
    let mut mid_hidden = None;
    let mut store = None;
    let mut kv_nodes = Vec::with_capacity(cfg.layers);
    let mut retrieval_scores = Vec::new();

    for i in 0..cfg.layers {
        if i == cfg.layers / 2 {
            mid_hidden = Some(x);
            let mark = g.watermark();
            store = encode_chunks(g, ps, &bound, x, cfg)?;
            if !g.is_recording() {
                let keep: Vec<NodeId> = store
                    .iter()
                    .flat_map(|st| [st.landmarks, st.keys, st.values])
                    .collect();
                g.free_values(mark, &keep);
            }
        }
        let mark = g.watermark();
        let p = |s: &str| format!("layer.{i}.{s}");
        let gain = bound.node(ps, &p("attn_norm.gain"))?;
        let xn = g.rms_norm(x, gain, eps)?;
        let q = g.matmul(xn, bound.node(ps, &p("swa.wq"))?)?;
        let k = g.matmul(xn, bound.node(ps, &p("swa.wk"))?)?;
        let v = g.matmul(xn, bound.node(ps, &p("swa.wv"))?)?;
        kv_nodes.push((k, v));
        let att = swa_attend(
            g, q, k, v, opts.swa_window, &rope, &positions, cfg.heads, cfg.kv_heads, cfg.d_h,
        )?;
        let att = g.matmul(att, bound.node(ps, &p("swa.wo"))?)?;
        let mut res = g.add(x, att)?;
        if cfg.is_hsa_layer(i) {
            if let Some(st) = &store {
                let q_slc = g.matmul(xn, bound.node(ps, &p("hsa.q_slc"))?)?;
                let (scores, masked) =
                    score_chunks(g, q_slc, st.landmarks, &positions, cfg.chunk_size)?;
                retrieval_scores.push((i, scores));
                let sel = select_topk(&masked, opts.top_k)?;
                let weights = fusion_weights(g, scores, &sel)?;
                let q_attn = g.matmul(xn, bound.node(ps, &p("hsa.wq"))?)?;
                let gains = HsaGains {
                    q: (0..cfg.heads)
                        .map(|j| bound.node(ps, &p(&format!("hsa.q_norm.{j}.gain"))))
                        .collect::<Result<_>>()?,
                    k: (0..cfg.kv_heads)
                        .map(|j| bound.node(ps, &p(&format!("hsa.k_norm.{j}.gain"))))
                        .collect::<Result<_>>()?,
                };
                let hsa = hsa_attend(
                    g, q_attn, st, &sel, weights, &gains, cfg.heads, cfg.kv_heads, cfg.d_h, eps,
                )?;
                let hsa = g.matmul(hsa, bound.node(ps, &p("hsa.wo"))?)?;
                res = g.add(res, hsa)?;
            }
        }
        x = ffn_block(g, ps, &bound, res, &format!("layer.{i}"), eps)?;
        if !g.is_recording() {
            let mut keep = vec![x, kv_nodes[i].0, kv_nodes[i].1];
            keep.extend(retrieval_scores.iter().map(|&(_, s)| s));
            g.free_values(mark, &keep);
        }
    }
    let final_gain = bound.node(ps, "final_norm.gain")?;
    let xn = g.rms_norm(x, final_gain, eps)?;
    let logits = g.matmul(xn, bound.node(ps, "lm_head")?)?;
    Ok(ForwardOutput {
        logits,
        mid_hidden: mid_hidden.expect("layers >= 2"),
        store,
        kv_nodes,
        retrieval_scores,
    })
}

// ---- checkpoint format ----

const CKPT_MAGIC: &[u8; 8] = b"HSALCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: u32,
    config: ModelConfig,
    params: Vec<CkptParam>,
    blob_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct CkptParam {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    numel: usize,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write config + all parameters (as little-endian f32) to a single file.
/// The write goes through a sibling temp file and an atomic rename.
pub fn save_checkpoint<F: Element>(
    path: &Path,
    cfg: &ModelConfig,
    ps: &ParamSet<F>,
) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut manifest = Vec::new();
    for (_, entry) in ps.iter() {
        let offset = blob.len() / 4;
        for &v in entry.value.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        manifest.push(CkptParam {
            name: entry.name.clone(),
            shape: entry.value.shape().to_vec(),
            offset,
            numel: entry.value.numel(),
        });
    }
    let header = CkptHeader {
        version: CKPT_VERSION,
        config: cfg.clone(),
        params: manifest,
        blob_sha256: sha256_hex(&blob),
    };
    let header_json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&CKPT_VERSION.to_le_bytes())?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&blob)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint, verifying magic, version, checksum and shapes.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet<f32>)> {
    let bad = |msg: String| HsaError::Checkpoint(format!("{}: {msg}", path.display()));
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: CkptHeader = serde_json::from_slice(&header_json)?;
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    if sha256_hex(&blob) != header.blob_sha256 {
        return Err(bad("parameter blob checksum mismatch".into()));
    }
    header.config.validate()?;
    let mut ps = ParamSet::new();
    for p in &header.params {
        let start = p.offset * 4;
        let end = start + p.numel * 4;
        if end > blob.len() || p.shape.iter().product::<usize>() != p.numel {
            return Err(bad(format!("corrupt manifest entry for '{}'", p.name)));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(p.shape.clone(), data)
            .map_err(|e| bad(format!("'{}': {e}", p.name)))?;
        ps.insert(p.name.clone(), t)?;
    }
    Ok((header.config, ps))
}
