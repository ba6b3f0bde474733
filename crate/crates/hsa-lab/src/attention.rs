//! Attention mechanisms: sliding-window attention with rotary embeddings,
//! and hierarchical sparse attention (HSA) — landmark scoring, top-K chunk
//! selection, per-chunk attention, and score-weighted fusion.
//!
//! The HSA path carries no positional encoding anywhere; queries and keys
//! are RMS-normalized per head before the intra-chunk dot product. A naive
//! token-by-token reference (`hsa_reference`) serves as the ground-truth
//! oracle for the batched implementation.

use crate::error::{HsaError, Result};
use crate::numerics::{Element, Graph, NodeId, RopeTable, Tensor};
use std::sync::Arc;

/// Per-chunk context memory the HSA layers read: keys/values projected from
/// the shared mid-layer chunk encodings plus one landmark vector per chunk.
/// Only complete chunks are stored; a trailing partial chunk is never indexed.
#[derive(Debug, Clone, Copy)]
pub struct ChunkStore {
    pub chunk_size: usize,
    pub num_chunks: usize,
    /// `[num_chunks, d_r]` landmark matrix.
    pub landmarks: NodeId,
    /// `[num_chunks * chunk_size, h_kv * d_h]` keys, chunk-major.
    pub keys: NodeId,
    /// `[num_chunks * chunk_size, h_kv * d_h]` values, chunk-major.
    pub values: NodeId,
}

/// Plain-tensor view of a chunk store, used by the reference oracle and the
/// incremental decoder.
#[derive(Debug, Clone)]
pub struct PlainChunkStore<F: Element> {
    pub chunk_size: usize,
    pub landmarks: Tensor<F>,
    pub keys: Tensor<F>,
    pub values: Tensor<F>,
}

impl<F: Element> PlainChunkStore<F> {
    pub fn num_chunks(&self) -> usize {
        self.landmarks.rows()
    }
}

/// Result of top-K chunk retrieval for every token of a sequence.
///
/// Invariants: each index is strictly below `floor(pos/S)`; indices are
/// stored ascending; `|indices[t]| = min(K, eligible)`.
#[derive(Debug, Clone)]
pub struct RetrievalSelection<F: Element> {
    /// Selected chunk ids per token, ascending.
    pub indices: Arc<Vec<Vec<u32>>>,
    /// `[n, num_chunks]` raw scores with the ineligible entries at the
    /// most-negative finite value of the element type.
    pub raw_scores: Tensor<F>,
}

/// Number of chunks a token at absolute position `pos` may retrieve.
#[inline]
pub fn eligible_chunks(pos: usize, chunk_size: usize) -> usize {
    pos / chunk_size
}

/// Landmark relevance scores `s_{t,i} = (q_slc · K_i^slc)/sqrt(d_r)`.
///
/// Returns the differentiable score node plus a sentinel-masked copy for
/// selection: entries for chunks `i >= floor(pos/S)` (and `i >= num_chunks`)
/// hold the most-negative finite value.
pub fn score_chunks<F: Element>(
    g: &mut Graph<F>,
    q_slc: NodeId,
    landmarks: NodeId,
    positions: &[usize],
    chunk_size: usize,
) -> Result<(NodeId, Tensor<F>)> {
    let n = g.value(q_slc).rows();
    if positions.len() != n {
        return Err(HsaError::InvalidArgument {
            op: "score_chunks",
            msg: format!("{} positions for {n} query rows", positions.len()),
        });
    }
    let d_r = g.value(q_slc).cols();
    let num_chunks = g.value(landmarks).rows();
    let raw = g.matmul_nt(q_slc, landmarks)?;
    let scores = g.scale(raw, F::from_f64(1.0 / (d_r as f64).sqrt()));
    let sentinel = F::min_value();
    let mut masked = g.value(scores).clone();
    for (t, &pos) in positions.iter().enumerate() {
        let eligible = eligible_chunks(pos, chunk_size).min(num_chunks);
        for i in eligible..num_chunks {
            masked.data_mut()[t * num_chunks + i] = sentinel;
        }
    }
    Ok((scores, masked))
}

/// Indices of the K highest-scoring eligible chunks per token; ties break
/// toward the lower chunk index, and fewer than K eligible chunks yields
/// all of them. Returned ascending.
pub fn select_topk<F: Element>(masked_scores: &Tensor<F>, k: usize) -> Result<Arc<Vec<Vec<u32>>>> {
    if k == 0 {
        return Err(HsaError::InvalidArgument { op: "select_topk", msg: "K must be >= 1".into() });
    }
    let sentinel = F::min_value();
    let c = masked_scores.cols();
    let mut out = Vec::with_capacity(masked_scores.rows());
    for t in 0..masked_scores.rows() {
        let row = masked_scores.row(t);
        let mut order: Vec<u32> = (0..c as u32).filter(|&i| row[i as usize] > sentinel).collect();
        // descending score, ties toward lower index (stable sort preserves
        // the ascending index order of equal scores)
        order.sort_by(|&a, &b| {
            row[b as usize].partial_cmp(&row[a as usize]).expect("finite scores")
        });
        order.truncate(k);
        order.sort_unstable();
        out.push(order);
    }
    Ok(Arc::new(out))
}

/// Fusion weights `w = exp(s)/Σ exp(s)` over the selected set only.
/// Tokens with an empty selection get an all-zero weight row, so the HSA
/// contribution degenerates to a zero vector.
pub fn fusion_weights<F: Element>(
    g: &mut Graph<F>,
    scores: NodeId,
    selection: &Arc<Vec<Vec<u32>>>,
) -> Result<NodeId> {
    g.selected_softmax(scores, Arc::clone(selection))
}

/// Per-head QK-norm gains for the HSA attention path.
pub struct HsaGains {
    /// One `[d_h]` gain node per query head.
    pub q: Vec<NodeId>,
    /// One `[d_h]` gain node per KV head.
    pub k: Vec<NodeId>,
}

/// Batched HSA: intra-chunk attention per selected chunk, then inter-chunk
/// fusion by the softmax-normalized retrieval weights. No positional
/// encoding anywhere on this path.
///
/// `q_attn: [n, h*d_h]`, output `[n, h*d_h]`. Tokens are grouped by selected
/// chunk so each (chunk, head) pair costs one batched attention.
#[allow(clippy::too_many_arguments)]
pub fn hsa_attend<F: Element>(
    g: &mut Graph<F>,
    q_attn: NodeId,
    store: &ChunkStore,
    selection: &Arc<Vec<Vec<u32>>>,
    weights: NodeId,
    gains: &HsaGains,
    heads: usize,
    kv_heads: usize,
    d_h: usize,
    eps: F,
) -> Result<NodeId> {
    let n = g.value(q_attn).rows();
    let s = store.chunk_size;
    let scale = F::from_f64(1.0 / (d_h as f64).sqrt());

    // group tokens by selected chunk
    let mut tokens_of_chunk: Vec<Vec<u32>> = vec![Vec::new(); store.num_chunks];
    for (t, sel) in selection.iter().enumerate() {
        for &i in sel.iter() {
            tokens_of_chunk[i as usize].push(t as u32);
        }
    }
    let chunk_rows: Vec<Arc<Vec<u32>>> = (0..store.num_chunks)
        .map(|i| Arc::new(((i * s) as u32..((i + 1) * s) as u32).collect()))
        .collect();

    let mut head_outputs = Vec::with_capacity(heads);
    for head in 0..heads {
        let kv_head = head / (heads / kv_heads);
        let q_h = g.slice_cols(q_attn, head * d_h, d_h)?;
        let q_h = g.rms_norm(q_h, gains.q[head], eps)?;
        let k_h = g.slice_cols(store.keys, kv_head * d_h, d_h)?;
        let k_h = g.rms_norm(k_h, gains.k[kv_head], eps)?;
        let v_h = g.slice_cols(store.values, kv_head * d_h, d_h)?;

        let mut accum = g.leaf(Tensor::zeros(vec![n, d_h]));
        for (i, toks) in tokens_of_chunk.iter().enumerate() {
            if toks.is_empty() {
                continue;
            }
            let mark = g.watermark();
            let toks = Arc::new(toks.clone());
            let q_g = g.gather_rows(q_h, Arc::clone(&toks))?;
            let k_c = g.gather_rows(k_h, Arc::clone(&chunk_rows[i]))?;
            let v_c = g.gather_rows(v_h, Arc::clone(&chunk_rows[i]))?;
            let raw = g.matmul_nt(q_g, k_c)?;
            let raw = g.scale(raw, scale);
            let probs = g.softmax(raw, 1)?;
            let o = g.matmul(probs, v_c)?;
            let w_col = g.gather_elems(
                weights,
                Arc::new(toks.iter().map(|&t| (t, i as u32)).collect()),
            )?;
            let o = g.mul_col_broadcast(o, w_col)?;
            let scattered = g.scatter_add_rows(o, toks, n)?;
            let new_accum = g.add(accum, scattered)?;
            if !g.is_recording() {
                g.free_values(mark, &[new_accum]);
            }
            accum = new_accum;
        }
        head_outputs.push(accum);
    }
    g.concat_cols(&head_outputs)
}

/// Token-by-token, chunk-by-chunk HSA oracle on plain tensors. Fusion
/// weights are recomputed directly from raw scores over the selected set.
#[allow(clippy::too_many_arguments)]
pub fn hsa_reference<F: Element>(
    q_attn: &Tensor<F>,
    store: &PlainChunkStore<F>,
    selection: &RetrievalSelection<F>,
    q_gains: &[Vec<F>],
    k_gains: &[Vec<F>],
    heads: usize,
    kv_heads: usize,
    d_h: usize,
    eps: F,
) -> Tensor<F> {
    let n = q_attn.rows();
    let s = store.chunk_size;
    let c = store.num_chunks();
    let scale = F::from_f64(1.0 / (d_h as f64).sqrt());
    let mut out = Tensor::zeros(vec![n, heads * d_h]);

    for t in 0..n {
        let sel = &selection.indices[t];
        if sel.is_empty() {
            continue;
        }
        // Eq. 2 weights over the selected set
        let raw: Vec<F> =
            sel.iter().map(|&i| selection.raw_scores.row(t)[i as usize]).collect();
        let mx = raw.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<F> = raw.iter().map(|&x| (x - mx).exp()).collect();
        let denom = exps.iter().fold(F::zero(), |a, &b| a + b);
        let w: Vec<F> = exps.iter().map(|&e| e / denom).collect();

        for head in 0..heads {
            let kv_head = head / (heads / kv_heads);
            let q_head = &q_attn.row(t)[head * d_h..(head + 1) * d_h];
            let q_n = rms_normed(q_head, &q_gains[head], eps);
            for (si, &chunk) in sel.iter().enumerate() {
                debug_assert!((chunk as usize) < c);
                // intra-chunk attention over this chunk alone
                let mut scores = Vec::with_capacity(s);
                for r in 0..s {
                    let row = store.keys.row(chunk as usize * s + r);
                    let k_n =
                        rms_normed(&row[kv_head * d_h..(kv_head + 1) * d_h], &k_gains[kv_head], eps);
                    let mut dot = F::zero();
                    for e in 0..d_h {
                        dot = dot + q_n[e] * k_n[e];
                    }
                    scores.push(dot * scale);
                }
                let mx = scores.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                let mut denom = F::zero();
                for x in scores.iter_mut() {
                    *x = (*x - mx).exp();
                    denom = denom + *x;
                }
                for r in 0..s {
                    let p = scores[r] / denom * w[si];
                    let vrow = store.values.row(chunk as usize * s + r);
                    let dst = &mut out.data_mut()[t * heads * d_h + head * d_h..];
                    for e in 0..d_h {
                        dst[e] = dst[e] + p * vrow[kv_head * d_h + e];
                    }
                }
            }
        }
    }
    out
}

fn rms_normed<F: Element>(x: &[F], gain: &[F], eps: F) -> Vec<F> {
    let ms = x.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b)
        / F::from_f64(x.len() as f64);
    let r = (ms + eps).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v / r * g).collect()
}

/// Multi-head causal sliding-window attention with RoPE applied to queries
/// and keys before scoring. `q: [n, h*d_h]`, `k/v: [n, h_kv*d_h]`.
#[allow(clippy::too_many_arguments)]
pub fn swa_attend<F: Element>(
    g: &mut Graph<F>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    window: usize,
    rope: &Arc<RopeTable<F>>,
    positions: &Arc<Vec<usize>>,
    heads: usize,
    kv_heads: usize,
    d_h: usize,
) -> Result<NodeId> {
    if window == 0 {
        return Err(HsaError::InvalidArgument { op: "swa_attend", msg: "window >= 1".into() });
    }
    let scale = F::from_f64(1.0 / (d_h as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(heads);
    let mut k_cache: Vec<Option<(NodeId, NodeId)>> = vec![None; kv_heads];
    for head in 0..heads {
        let kv_head = head / (heads / kv_heads);
        let q_h = g.slice_cols(q, head * d_h, d_h)?;
        let q_h = g.rope(q_h, Arc::clone(positions), Arc::clone(rope))?;
        let (k_h, v_h) = match k_cache[kv_head] {
            Some(pair) => pair,
            None => {
                let k_h = g.slice_cols(k, kv_head * d_h, d_h)?;
                let k_h = g.rope(k_h, Arc::clone(positions), Arc::clone(rope))?;
                let v_h = g.slice_cols(v, kv_head * d_h, d_h)?;
                k_cache[kv_head] = Some((k_h, v_h));
                (k_h, v_h)
            }
        };
        head_outputs.push(g.windowed_attention(q_h, k_h, v_h, window, scale)?);
    }
    g.concat_cols(&head_outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::random_tensor;
    use crate::numerics::ParamSet;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    struct Instance {
        n: usize,
        s: usize,
        k: usize,
        heads: usize,
        kv_heads: usize,
        d_h: usize,
        d_r: usize,
        q_attn: Tensor<f64>,
        q_slc: Tensor<f64>,
        landmarks: Tensor<f64>,
        keys: Tensor<f64>,
        values: Tensor<f64>,
        q_gains: Vec<Vec<f64>>,
        k_gains: Vec<Vec<f64>>,
    }

    fn random_instance(
        n: usize,
        s: usize,
        k: usize,
        heads: usize,
        kv_heads: usize,
        d_h: usize,
        r: &mut ChaCha8Rng,
    ) -> Instance {
        let c = n / s;
        let d_r = 16;
        Instance {
            n,
            s,
            k,
            heads,
            kv_heads,
            d_h,
            d_r,
            q_attn: random_tensor(vec![n, heads * d_h], r),
            q_slc: random_tensor(vec![n, d_r], r),
            landmarks: random_tensor(vec![c.max(1), d_r], r),
            keys: random_tensor(vec![c.max(1) * s, kv_heads * d_h], r),
            values: random_tensor(vec![c.max(1) * s, kv_heads * d_h], r),
            q_gains: (0..heads).map(|_| (0..d_h).map(|_| r.gen_range(0.5..1.5)).collect()).collect(),
            k_gains: (0..kv_heads)
                .map(|_| (0..d_h).map(|_| r.gen_range(0.5..1.5)).collect())
                .collect(),
        }
    }

    /// Run the full batched pipeline; returns (output, selection).
    fn run_batched(inst: &Instance, k_override: Option<usize>) -> (Tensor<f64>, RetrievalSelection<f64>) {
        let mut g = Graph::<f64>::new();
        let q_attn = g.leaf(inst.q_attn.clone());
        let q_slc = g.leaf(inst.q_slc.clone());
        let landmarks = g.leaf(inst.landmarks.clone());
        let keys = g.leaf(inst.keys.clone());
        let values = g.leaf(inst.values.clone());
        let positions: Vec<usize> = (0..inst.n).collect();
        let (scores, masked) = score_chunks(&mut g, q_slc, landmarks, &positions, inst.s).unwrap();
        let sel = select_topk(&masked, k_override.unwrap_or(inst.k)).unwrap();
        let weights = fusion_weights(&mut g, scores, &sel).unwrap();
        let store = ChunkStore {
            chunk_size: inst.s,
            num_chunks: inst.landmarks.rows(),
            landmarks,
            keys,
            values,
        };
        let gains = HsaGains {
            q: inst.q_gains.iter().map(|gv| g.leaf(Tensor::new(vec![inst.d_h], gv.clone()).unwrap())).collect(),
            k: inst.k_gains.iter().map(|gv| g.leaf(Tensor::new(vec![inst.d_h], gv.clone()).unwrap())).collect(),
        };
        let out = hsa_attend(
            &mut g, q_attn, &store, &sel, weights, &gains, inst.heads, inst.kv_heads, inst.d_h,
            1e-6,
        )
        .unwrap();
        let selection = RetrievalSelection { indices: sel, raw_scores: masked };
        (g.value(out).clone(), selection)
    }

    fn run_reference(inst: &Instance, selection: &RetrievalSelection<f64>) -> Tensor<f64> {
        let store = PlainChunkStore {
            chunk_size: inst.s,
            landmarks: inst.landmarks.clone(),
            keys: inst.keys.clone(),
            values: inst.values.clone(),
        };
        hsa_reference(
            &inst.q_attn,
            &store,
            selection,
            &inst.q_gains,
            &inst.k_gains,
            inst.heads,
            inst.kv_heads,
            inst.d_h,
            1e-6,
        )
    }

    #[test]
    fn causality_forces_empty_selection_in_chunk_zero() {
        // t=10, S=64: floor(10/64)=0 eligible chunks
        assert_eq!(eligible_chunks(10, 64), 0);
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Tensor::zeros(vec![1, 16]));
        let lm = g.leaf(Tensor::zeros(vec![3, 16]));
        let (_, masked) = score_chunks(&mut g, q, lm, &[10], 64).unwrap();
        assert!(masked.data().iter().all(|&v| v == f64::MIN));
        let sel = select_topk(&masked, 4).unwrap();
        assert!(sel[0].is_empty());
    }

    #[test]
    fn unit_vector_score_is_inverse_sqrt_d() {
        // q = K_0^slc = unit vector, d=16 -> s = 1/4
        let mut g = Graph::<f64>::new();
        let mut q = Tensor::zeros(vec![1, 16]);
        q.data_mut()[0] = 1.0;
        let qid = g.leaf(q.clone());
        let lm = g.leaf(q);
        let (scores, masked) = score_chunks(&mut g, qid, lm, &[70], 64).unwrap();
        assert!((g.value(scores).data()[0] - 0.25).abs() < 1e-12);
        assert!((masked.data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn score_chunks_matches_naive_dot_loop() {
        let mut r = rng(11);
        let q = random_tensor(vec![4, 32], &mut r);
        let lm = random_tensor(vec![8, 32], &mut r);
        let mut g = Graph::<f64>::new();
        let qid = g.leaf(q.clone());
        let lmid = g.leaf(lm.clone());
        let positions = [512, 513, 600, 700];
        let (scores, _) = score_chunks(&mut g, qid, lmid, &positions, 64).unwrap();
        for t in 0..4 {
            for i in 0..8 {
                let mut dot = 0.0;
                for e in 0..32 {
                    dot += q.row(t)[e] * lm.row(i)[e];
                }
                let expect = dot / 32f64.sqrt();
                assert!((g.value(scores).row(t)[i] - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn topk_ordering_and_ties() {
        let scores = Tensor::new(vec![1, 4], vec![2.0, 1.0, 0.5, 0.7]).unwrap();
        let sel = select_topk(&scores, 2).unwrap();
        assert_eq!(sel[0], vec![0, 1]);

        let scores = Tensor::new(vec![1, 3], vec![1.0, 1.0, 0.2]).unwrap();
        let sel = select_topk(&scores, 1).unwrap();
        assert_eq!(sel[0], vec![0], "tie must break toward the lower chunk index");
    }

    #[test]
    fn topk_matches_sort_oracle() {
        let mut r = rng(12);
        for _ in 0..50 {
            let c = r.gen_range(9..40);
            let row: Vec<f64> = (0..c).map(|_| r.gen_range(-3.0..3.0)).collect();
            let t = Tensor::new(vec![1, c], row.clone()).unwrap();
            let sel = select_topk(&t, 8).unwrap();
            // oracle: full stable sort by descending score
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
            let mut expect: Vec<u32> = order[..8].iter().map(|&i| i as u32).collect();
            expect.sort_unstable();
            assert_eq!(sel[0], expect);
        }
    }

    #[test]
    fn fusion_weight_values() {
        let mut g = Graph::<f64>::new();
        let s = g.leaf(Tensor::new(vec![2, 3], vec![0.4, 0.4, -9.0, 2.0f64.ln(), 0.0, 5.0]).unwrap());
        let sel = Arc::new(vec![vec![0u32, 1], vec![0, 1]]);
        let w = fusion_weights(&mut g, s, &sel).unwrap();
        let v = g.value(w);
        assert!((v.row(0)[0] - 0.5).abs() < 1e-12 && (v.row(0)[1] - 0.5).abs() < 1e-12);
        assert!((v.row(1)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v.row(1)[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(v.row(0)[2], 0.0, "unselected chunks carry zero weight");
    }

    #[test]
    fn fusion_weights_sum_to_one_over_selection() {
        let mut r = rng(13);
        for _ in 0..100 {
            let c = 12;
            let scores = random_tensor(vec![1, c], &mut r);
            let mut g = Graph::<f64>::new();
            let s = g.leaf(scores);
            let sel = Arc::new(vec![(0..8u32).collect::<Vec<_>>()]);
            let w = fusion_weights(&mut g, s, &sel).unwrap();
            let sum: f64 = g.value(w).data()[..8].iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn single_chunk_constant_values_pass_through() {
        let mut r = rng(14);
        let mut inst = random_instance(64, 16, 1, 2, 2, 8, &mut r);
        // all V rows equal v per column
        for row in 0..inst.values.rows() {
            for c in 0..16 {
                inst.values.data_mut()[row * 16 + c] = (c as f64) * 0.5 - 2.0;
            }
        }
        let (out, sel) = run_batched(&inst, None);
        for t in 0..inst.n {
            if sel.indices[t].is_empty() {
                assert!(out.row(t).iter().all(|&v| v == 0.0));
            } else {
                for c in 0..16 {
                    assert!((out.row(t)[c] - ((c as f64) * 0.5 - 2.0)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn fusion_linearity_with_two_constant_chunks() {
        // two selected chunks with constant values v1, v2 and weights (.25,.75)
        let s = 4;
        let d_h = 4;
        let mut g = Graph::<f64>::new();
        let q_attn = g.leaf(Tensor::full(vec![1, d_h], 0.3));
        let keys = g.leaf(Tensor::full(vec![2 * s, d_h], 0.1));
        let mut vals = Tensor::zeros(vec![2 * s, d_h]);
        for r in 0..s {
            for c in 0..d_h {
                vals.data_mut()[r * d_h + c] = 1.0; // v1
                vals.data_mut()[(s + r) * d_h + c] = 5.0; // v2
            }
        }
        let values = g.leaf(vals);
        // raw scores chosen so softmax over {0,1} = (0.25, 0.75)
        let scores = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let sel = Arc::new(vec![vec![0u32, 1]]);
        let weights = fusion_weights(&mut g, scores, &sel).unwrap();
        let landmarks = g.leaf(Tensor::zeros(vec![2, 4]));
        let store = ChunkStore { chunk_size: s, num_chunks: 2, landmarks, keys, values };
        let gains = HsaGains {
            q: vec![g.leaf(Tensor::full(vec![d_h], 1.0))],
            k: vec![g.leaf(Tensor::full(vec![d_h], 1.0))],
        };
        let out = hsa_attend(&mut g, q_attn, &store, &sel, weights, &gains, 1, 1, d_h, 1e-6).unwrap();
        let expect = 0.25 * 1.0 + 0.75 * 5.0;
        for &v in g.value(out).data() {
            assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
        }
    }

    #[test]
    fn batched_matches_reference_on_random_instances() {
        let mut r = rng(15);
        for trial in 0..20 {
            let s = if trial % 2 == 0 { 16 } else { 32 };
            let n = s * r.gen_range(2..8) + r.gen_range(0..s);
            let inst = random_instance(n, s, r.gen_range(1..5), 2, 2, 8, &mut r);
            let (out, sel) = run_batched(&inst, None);
            let expect = run_reference(&inst, &sel);
            let err = crate::numerics::max_rel_err(&out, &expect, 1e-8);
            assert!(err <= 1e-10, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn reference_zero_values_give_zero_output() {
        let mut r = rng(16);
        let mut inst = random_instance(96, 16, 3, 2, 2, 8, &mut r);
        inst.values = Tensor::zeros(vec![inst.values.rows(), inst.values.cols()]);
        let (out, sel) = run_batched(&inst, None);
        let expect = run_reference(&inst, &sel);
        assert!(out.data().iter().all(|&v| v.abs() < 1e-12));
        assert!(expect.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn k_saturation_gives_identical_outputs() {
        let mut r = rng(17);
        let inst = random_instance(128, 16, 8, 2, 2, 8, &mut r);
        // K = 8 covers all eligible chunks (max floor(127/16) = 7)
        let (out_a, _) = run_batched(&inst, Some(8));
        let (out_b, _) = run_batched(&inst, Some(9));
        assert_eq!(out_a.data(), out_b.data(), "selection saturation must be K-independent");
    }

    #[test]
    fn fusion_is_permutation_invariant() {
        // process selected chunks in a permuted order via a relabeled store
        let mut r = rng(18);
        let inst = random_instance(96, 16, 4, 2, 2, 8, &mut r);
        let (out, sel) = run_batched(&inst, None);

        // relabel chunks: reverse their order, remap selection accordingly
        let c = inst.landmarks.rows();
        let perm: Vec<usize> = (0..c).rev().collect();
        let mut landmarks2 = Tensor::zeros(vec![c, inst.d_r]);
        let mut keys2 = Tensor::zeros(vec![c * inst.s, inst.kv_heads * inst.d_h]);
        let mut values2 = Tensor::zeros(vec![c * inst.s, inst.kv_heads * inst.d_h]);
        for (new, &old) in perm.iter().enumerate() {
            landmarks2.data_mut()[new * inst.d_r..(new + 1) * inst.d_r]
                .copy_from_slice(inst.landmarks.row(old));
            for rr in 0..inst.s {
                let w = inst.kv_heads * inst.d_h;
                keys2.data_mut()[(new * inst.s + rr) * w..(new * inst.s + rr + 1) * w]
                    .copy_from_slice(inst.keys.row(old * inst.s + rr));
                values2.data_mut()[(new * inst.s + rr) * w..(new * inst.s + rr + 1) * w]
                    .copy_from_slice(inst.values.row(old * inst.s + rr));
            }
        }
        // run reference against the relabeled store with remapped indices
        let remapped: Vec<Vec<u32>> = sel
            .indices
            .iter()
            .map(|row| row.iter().map(|&i| (c - 1 - i as usize) as u32).collect())
            .collect();
        let mut raw2 = Tensor::zeros(vec![inst.n, c]);
        for t in 0..inst.n {
            for i in 0..c {
                raw2.data_mut()[t * c + (c - 1 - i)] = sel.raw_scores.row(t)[i];
            }
        }
        let sel2 = RetrievalSelection { indices: Arc::new(remapped), raw_scores: raw2 };
        let store2 = PlainChunkStore {
            chunk_size: inst.s,
            landmarks: landmarks2,
            keys: keys2,
            values: values2,
        };
        let out2 = hsa_reference(
            &inst.q_attn, &store2, &sel2, &inst.q_gains, &inst.k_gains, inst.heads,
            inst.kv_heads, inst.d_h, 1e-6,
        );
        let err = crate::numerics::max_rel_err(&out, &out2, 1e-8);
        assert!(err <= 1e-6, "relabeling chunks changed the fused output: {err}");
    }

    #[test]
    fn retrieval_projections_receive_gradient() {
        // gradient flows through fusion weights into q_slc/landmark projections
        let mut r = rng(19);
        let n = 96;
        let s = 16;
        let d = 24;
        let d_h = 8;
        let x = random_tensor(vec![n, d], &mut r);
        let mid = random_tensor(vec![(n / s) * s, d], &mut r);
        let mut params = ParamSet::<f64>::new();
        let wq = params.insert("q_slc_proj", random_tensor(vec![d, d], &mut r)).unwrap();
        let wl = params.insert("landmark_proj", random_tensor(vec![d, d], &mut r)).unwrap();

        let mut g = Graph::<f64>::new();
        let xid = g.leaf(x);
        let midid = g.leaf(mid);
        let wqid = g.param(&params, wq);
        let wlid = g.param(&params, wl);
        let q_slc = g.matmul(xid, wqid).unwrap();
        // landmarks: mean of each chunk's rows through a projection
        let mut lm_rows = Vec::new();
        for i in 0..n / s {
            let rows = g
                .gather_rows(midid, Arc::new(((i * s) as u32..((i + 1) * s) as u32).collect()))
                .unwrap();
            let ones = g.leaf(Tensor::full(vec![1, s], 1.0 / s as f64));
            lm_rows.push(g.matmul(ones, rows).unwrap());
        }
        let lm_raw = g.concat_rows(&lm_rows).unwrap();
        let landmarks = g.matmul(lm_raw, wlid).unwrap();
        let positions: Vec<usize> = (0..n).collect();
        let (scores, masked) = score_chunks(&mut g, q_slc, landmarks, &positions, s).unwrap();
        // K strictly below eligible count for late tokens
        let sel = select_topk(&masked, 2).unwrap();
        let weights = fusion_weights(&mut g, scores, &sel).unwrap();
        let q_attn = g.leaf(random_tensor(vec![n, 3 * d_h], &mut r));
        let keys = g.leaf(random_tensor(vec![(n / s) * s, 3 * d_h], &mut r));
        let values = g.leaf(random_tensor(vec![(n / s) * s, 3 * d_h], &mut r));
        let store = ChunkStore { chunk_size: s, num_chunks: n / s, landmarks, keys, values };
        let gains = HsaGains {
            q: (0..3).map(|_| g.leaf(Tensor::full(vec![d_h], 1.0))).collect(),
            k: (0..3).map(|_| g.leaf(Tensor::full(vec![d_h], 1.0))).collect(),
        };
        let out = hsa_attend(&mut g, q_attn, &store, &sel, weights, &gains, 3, 3, d_h, 1e-6).unwrap();
        let probe = g.leaf(random_tensor(vec![n, 3 * d_h], &mut r));
        let prod = g.mul(out, probe).unwrap();
        let ones = g.leaf(Tensor::full(vec![3 * d_h, 1], 1.0));
        let rs = g.matmul(prod, ones).unwrap();
        let or = g.leaf(Tensor::full(vec![1, n], 1.0));
        let loss = g.matmul(or, rs).unwrap();
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut params);
        assert!(params.grad(wq).l2_norm() > 0.0, "q_slc projection got no gradient");
        assert!(params.grad(wl).l2_norm() > 0.0, "landmark projection got no gradient");
    }

    #[test]
    fn swa_single_token_returns_v0() {
        let mut r = rng(20);
        let q = random_tensor(vec![1, 8], &mut r);
        let k = random_tensor(vec![1, 8], &mut r);
        let v = random_tensor(vec![1, 8], &mut r);
        let mut g = Graph::<f64>::new();
        let (qid, kid, vid) = (g.leaf(q), g.leaf(k), g.leaf(v.clone()));
        let rope = Arc::new(RopeTable::<f64>::new(8, 10000.0, 4));
        let positions = Arc::new(vec![0usize]);
        let out = swa_attend(&mut g, qid, kid, vid, 5, &rope, &positions, 1, 1, 8).unwrap();
        for e in 0..8 {
            assert!((g.value(out).data()[e] - v.data()[e]).abs() < 1e-12);
        }
    }

    #[test]
    fn swa_full_window_matches_full_causal_attention_oracle() {
        let mut r = rng(21);
        let n = 24;
        let d_h = 8;
        let heads = 2;
        let q = random_tensor(vec![n, heads * d_h], &mut r);
        let k = random_tensor(vec![n, heads * d_h], &mut r);
        let v = random_tensor(vec![n, heads * d_h], &mut r);
        let rope = Arc::new(RopeTable::<f64>::new(d_h, 10000.0, n));
        let positions = Arc::new((0..n).collect::<Vec<_>>());

        let mut g = Graph::<f64>::new();
        let (qid, kid, vid) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
        let out = swa_attend(&mut g, qid, kid, vid, n + 10, &rope, &positions, heads, heads, d_h)
            .unwrap();
        let out = g.value(out).clone();

        // naive full causal oracle with the same rope
        let rot = |t: &Tensor<f64>, head: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|row| {
                    let mut v: Vec<f64> = t.row(row)[head * d_h..(head + 1) * d_h].to_vec();
                    let mut g2 = Graph::<f64>::new();
                    let x = g2.leaf(Tensor::new(vec![1, d_h], v.clone()).unwrap());
                    let y = g2.rope(x, Arc::new(vec![row]), Arc::clone(&rope)).unwrap();
                    v.copy_from_slice(g2.value(y).data());
                    v
                })
                .collect()
        };
        for head in 0..heads {
            let qr = rot(&q, head);
            let kr = rot(&k, head);
            for t in 0..n {
                let mut scores: Vec<f64> = (0..=t)
                    .map(|j| {
                        qr[t].iter().zip(&kr[j]).map(|(a, b)| a * b).sum::<f64>()
                            / (d_h as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = scores.iter_mut().map(|s| { *s = (*s - mx).exp(); *s }).sum();
                let mut expect = vec![0.0; d_h];
                for j in 0..=t {
                    for e in 0..d_h {
                        expect[e] += scores[j] / denom * v.row(j)[head * d_h + e];
                    }
                }
                for e in 0..d_h {
                    let got = out.row(t)[head * d_h + e];
                    let rel = (got - expect[e]).abs() / expect[e].abs().max(1e-8);
                    assert!(rel <= 1e-5, "t={t} head={head} e={e}: {got} vs {}", expect[e]);
                }
            }
        }
    }

    #[test]
    fn swa_ignores_tokens_beyond_window() {
        let mut r = rng(22);
        let n = 20;
        let w = 4;
        let q = random_tensor(vec![n, 8], &mut r);
        let mut k = random_tensor(vec![n, 8], &mut r);
        let mut v = random_tensor(vec![n, 8], &mut r);
        let rope = Arc::new(RopeTable::<f64>::new(8, 10000.0, n));
        let positions = Arc::new((0..n).collect::<Vec<_>>());
        let run = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let (qid, kid, vid) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
            let out = swa_attend(&mut g, qid, kid, vid, w, &rope, &positions, 1, 1, 8).unwrap();
            g.value(out).clone()
        };
        let base = run(&q, &k, &v);
        // perturb token 2, which is at distance > W from token 19
        for e in 0..8 {
            k.data_mut()[2 * 8 + e] += 13.0;
            v.data_mut()[2 * 8 + e] -= 7.0;
        }
        let pert = run(&q, &k, &v);
        assert_eq!(base.row(19), pert.row(19), "outside-window perturbation leaked in");
        assert_ne!(base.row(3), pert.row(3), "inside-window perturbation must matter");
    }
}
