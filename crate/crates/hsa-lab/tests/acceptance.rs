//! Acceptance suite: one pass/fail line per criterion, all asserted at the
//! end so a single failure never hides the rest.
//!
//! Criteria 5 and 6 (length-generalization trend, seesaw probe) consume the
//! evaluation grids committed under `artifacts/` (or the directory named by
//! `HSA_LAB_RUNS_DIR`). When neither exists, the suite runs the full
//! training pipeline through the CLI binary — a multi-hour fallback.

use hsa_lab::attention::{
    fusion_weights, hsa_attend, hsa_reference, score_chunks, select_topk, ChunkStore, HsaGains,
    PlainChunkStore, RetrievalSelection,
};
use hsa_lab::datagen;
use hsa_lab::evalharness::cost_model;
use hsa_lab::model::{forward, init_params, ForwardOptions, ModelConfig};
use hsa_lab::numerics::{gradcheck, Element, Graph, ParamSet, Tensor};
use hsa_lab::trainer::{
    gen_batch, run_phase, AdamW, AdamWConfig, CompletionRule, MixtureEntry, PhaseSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

fn random_tensor<F: Element>(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64(r.gen_range(-1.0..1.0))).collect();
    Tensor::new(shape, data).unwrap()
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.gen_range(0..vocab as u32)).collect()
}

// ---- shared randomized HSA instance ----

struct Instance<F: Element> {
    n: usize,
    s: usize,
    k: usize,
    heads: usize,
    kv_heads: usize,
    d_h: usize,
    q_attn: Tensor<F>,
    q_slc: Tensor<F>,
    landmarks: Tensor<F>,
    keys: Tensor<F>,
    values: Tensor<F>,
    q_gains: Vec<Vec<F>>,
    k_gains: Vec<Vec<F>>,
}

fn random_instance<F: Element>(r: &mut ChaCha8Rng) -> Instance<F> {
    let s = if r.gen_bool(0.5) { 16 } else { 32 };
    let n = r.gen_range(s..=512);
    let k = r.gen_range(1..=8);
    let heads = r.gen_range(1..=4);
    let kv_heads = (1..=heads).filter(|kv| heads % kv == 0).nth(r.gen_range(0..2) % 2).unwrap_or(heads);
    let d_h = 8 * r.gen_range(1..=4);
    let d_r = 16;
    let c = (n / s).max(1);
    let gain = |r: &mut ChaCha8Rng| (0..d_h).map(|_| F::from_f64(r.gen_range(0.5..1.5))).collect();
    Instance {
        n,
        s,
        k,
        heads,
        kv_heads,
        d_h,
        q_attn: random_tensor(vec![n, heads * d_h], r),
        q_slc: random_tensor(vec![n, d_r], r),
        landmarks: random_tensor(vec![c, d_r], r),
        keys: random_tensor(vec![c * s, kv_heads * d_h], r),
        values: random_tensor(vec![c * s, kv_heads * d_h], r),
        q_gains: (0..heads).map(|_| gain(r)).collect(),
        k_gains: (0..kv_heads).map(|_| gain(r)).collect(),
    }
}

/// Batched pipeline output next to the plain-math oracle; returns the worst
/// elementwise difference relative to the oracle's max magnitude.
fn batched_vs_reference<F: Element>(inst: &Instance<F>, k: usize) -> f64 {
    let mut g = Graph::<F>::new();
    let q_attn = g.leaf(inst.q_attn.clone());
    let q_slc = g.leaf(inst.q_slc.clone());
    let landmarks = g.leaf(inst.landmarks.clone());
    let keys = g.leaf(inst.keys.clone());
    let values = g.leaf(inst.values.clone());
    let positions: Vec<usize> = (0..inst.n).collect();
    let (scores, masked) = score_chunks(&mut g, q_slc, landmarks, &positions, inst.s).unwrap();
    let sel = select_topk(&masked, k).unwrap();
    let weights = fusion_weights(&mut g, scores, &sel).unwrap();
    let store = ChunkStore {
        chunk_size: inst.s,
        num_chunks: inst.landmarks.rows(),
        landmarks,
        keys,
        values,
    };
    let gains = HsaGains {
        q: inst
            .q_gains
            .iter()
            .map(|v| g.leaf(Tensor::new(vec![inst.d_h], v.clone()).unwrap()))
            .collect(),
        k: inst
            .k_gains
            .iter()
            .map(|v| g.leaf(Tensor::new(vec![inst.d_h], v.clone()).unwrap()))
            .collect(),
    };
    let out = hsa_attend(
        &mut g,
        q_attn,
        &store,
        &sel,
        weights,
        &gains,
        inst.heads,
        inst.kv_heads,
        inst.d_h,
        F::from_f64(1e-6),
    )
    .unwrap();
    let batched = g.value(out).clone();
    let plain = PlainChunkStore {
        chunk_size: inst.s,
        landmarks: inst.landmarks.clone(),
        keys: inst.keys.clone(),
        values: inst.values.clone(),
    };
    let selection = RetrievalSelection { indices: sel, raw_scores: masked };
    let reference = hsa_reference(
        &inst.q_attn,
        &plain,
        &selection,
        &inst.q_gains,
        &inst.k_gains,
        inst.heads,
        inst.kv_heads,
        inst.d_h,
        F::from_f64(1e-6),
    );
    let scale = reference.data().iter().fold(0.0f64, |a, v| a.max(v.as_f64().abs())).max(1e-30);
    batched
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs() / scale)
        .fold(0.0f64, f64::max)
}

// ---- criterion 1 ----

fn criterion_oracle_equivalence() {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(1001);
    for case in 0..200 {
        let inst64: Instance<f64> = random_instance(&mut r);
        let err64 = batched_vs_reference(&inst64, inst64.k);
        assert!(err64 <= 1e-10, "case {case}: f64 err {err64}");
        let inst32 = Instance::<f32> {
            n: inst64.n,
            s: inst64.s,
            k: inst64.k,
            heads: inst64.heads,
            kv_heads: inst64.kv_heads,
            d_h: inst64.d_h,
            q_attn: inst64.q_attn.cast(),
            q_slc: inst64.q_slc.cast(),
            landmarks: inst64.landmarks.cast(),
            keys: inst64.keys.cast(),
            values: inst64.values.cast(),
            q_gains: inst64.q_gains.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect(),
            k_gains: inst64.k_gains.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect(),
        };
        let err32 = batched_vs_reference(&inst32, inst32.k);
        assert!(err32 <= 1e-5, "case {case}: f32 err {err32}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "oracle suite took {elapsed:?}, budget is 2 min");
}

// ---- criterion 2 ----

fn criterion_gradient_suite() {
    let start = Instant::now();
    let cfg = ModelConfig::micro();
    let mut ps: ParamSet<f64> = init_params(&cfg, 21).unwrap().cast();
    let tokens = random_tokens(96, cfg.vocab_size, 22);
    let targets: Vec<u32> = tokens[1..].to_vec();
    let mask: Vec<bool> = (0..targets.len()).map(|i| i % 3 != 0).collect();
    let opts = ForwardOptions::from_config(&cfg);
    let loss_node = |g: &mut Graph<f64>, ps: &ParamSet<f64>| {
        let out = forward(g, ps, &tokens, &cfg, &opts).unwrap();
        let idx: Arc<Vec<u32>> = Arc::new((0..(tokens.len() - 1) as u32).collect());
        let head = g.gather_rows(out.logits, idx).unwrap();
        g.cross_entropy(head, &targets, &mask).unwrap()
    };
    let mut g = Graph::<f64>::new();
    let loss = loss_node(&mut g, &ps);
    g.backward(loss).unwrap();
    g.accumulate_param_grads(&mut ps);
    let mut r = ChaCha8Rng::seed_from_u64(23);
    let (worst, name) = gradcheck::check_param_gradients(
        &mut ps,
        |ps| {
            let mut g = Graph::<f64>::new();
            let loss = loss_node(&mut g, ps);
            Ok(g.value(loss).item())
        },
        2,
        &mut r,
    )
    .unwrap();
    assert!(worst <= 1e-4, "worst rel err {worst} at parameter group '{name}'");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "gradient suite took {elapsed:?}, budget is 5 min");
}

// ---- criterion 3 ----

fn criterion_causality() {
    let cfg = ModelConfig::micro();
    let ps: ParamSet<f64> = init_params(&cfg, 31).unwrap().cast();
    let opts = ForwardOptions::from_config(&cfg);
    let n = 96;
    let mut r = ChaCha8Rng::seed_from_u64(32);
    for input in 0..50 {
        let tokens = random_tokens(n, cfg.vocab_size, 3000 + input);
        let mut g = Graph::<f64>::new_inference();
        let base = forward(&mut g, &ps, &tokens, &cfg, &opts).unwrap();
        let base_logits = g.value(base.logits).clone();
        for _ in 0..10 {
            let t = r.gen_range(0..n - 1);
            let mut pert = tokens.clone();
            for tok in pert.iter_mut().skip(t + 1) {
                *tok = r.gen_range(0..cfg.vocab_size as u32);
            }
            let mut g2 = Graph::<f64>::new_inference();
            let out = forward(&mut g2, &ps, &pert, &cfg, &opts).unwrap();
            let pert_logits = g2.value(out.logits);
            for row in 0..=t {
                assert_eq!(
                    base_logits.row(row),
                    pert_logits.row(row),
                    "input {input}: future perturbation leaked into position {row} (t={t})"
                );
            }
        }
    }
}

// ---- criterion 4 ----

fn criterion_fusion_selection_properties() {
    let mut r = ChaCha8Rng::seed_from_u64(41);

    // fusion weights sum to 1 over every nonempty selection
    for _ in 0..1000 {
        let (n, c) = (r.gen_range(1..8), r.gen_range(1..12));
        let scores: Tensor<f64> = random_tensor(vec![n, c], &mut r);
        let sel: Arc<Vec<Vec<u32>>> = Arc::new(
            (0..n)
                .map(|_| {
                    let mut idx: Vec<u32> = (0..c as u32).collect();
                    for i in (1..idx.len()).rev() {
                        idx.swap(i, r.gen_range(0..=i));
                    }
                    idx.truncate(r.gen_range(0..=c));
                    idx.sort_unstable();
                    idx
                })
                .collect(),
        );
        let mut g = Graph::<f64>::new();
        let s = g.leaf(scores);
        let w = fusion_weights(&mut g, s, &sel).unwrap();
        for t in 0..n {
            let sum: f64 = sel[t].iter().map(|&i| g.value(w).row(t)[i as usize]).sum();
            if sel[t].is_empty() {
                assert_eq!(sum, 0.0);
            } else {
                assert!((sum - 1.0).abs() <= 1e-6, "weight row sums to {sum}");
            }
        }
    }

    // K-saturation invariance: once K covers all eligible chunks, raising it
    // further changes nothing, bit for bit
    for _ in 0..1000 {
        let c = r.gen_range(1..12);
        let scores: Tensor<f64> = random_tensor(vec![3, c], &mut r);
        let exact = select_topk(&scores, c).unwrap();
        let oversized = select_topk(&scores, c + r.gen_range(1..5)).unwrap();
        assert_eq!(exact, oversized);
    }

    // tie-break determinism: equal scores resolve to the lowest indices,
    // and repeated runs agree exactly
    for _ in 0..1000 {
        let c = r.gen_range(2..10);
        let k = r.gen_range(1..=c);
        let tied = Tensor::new(vec![1, c], vec![0.25f64; c]).unwrap();
        let sel = select_topk(&tied, k).unwrap();
        assert_eq!(sel[0], (0..k as u32).collect::<Vec<_>>());
        let scores: Tensor<f64> = random_tensor(vec![1, c], &mut r);
        assert_eq!(select_topk(&scores, k).unwrap(), select_topk(&scores, k).unwrap());
    }

    // permutation invariance: relabeling chunks (and the selection indices
    // with them) leaves the fused output unchanged
    let mut cases = 0;
    while cases < 1000 {
        let inst: Instance<f64> = random_instance(&mut r);
        let c = inst.landmarks.rows();
        if c < 2 {
            continue;
        }
        cases += 1;
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let mut permuted = Instance::<f64> {
            landmarks: Tensor::zeros(vec![c, inst.landmarks.cols()]),
            keys: Tensor::zeros(vec![c * inst.s, inst.keys.cols()]),
            values: Tensor::zeros(vec![c * inst.s, inst.values.cols()]),
            q_attn: inst.q_attn.clone(),
            q_slc: inst.q_slc.clone(),
            q_gains: inst.q_gains.clone(),
            k_gains: inst.k_gains.clone(),
            ..inst
        };
        for (old, &new) in perm.iter().enumerate() {
            permuted
                .landmarks
                .data_mut()[new * inst.landmarks.cols()..(new + 1) * inst.landmarks.cols()]
                .copy_from_slice(inst.landmarks.row(old));
            for j in 0..inst.s {
                let w = inst.keys.cols();
                permuted.keys.data_mut()[(new * inst.s + j) * w..(new * inst.s + j + 1) * w]
                    .copy_from_slice(inst.keys.row(old * inst.s + j));
                permuted.values.data_mut()[(new * inst.s + j) * w..(new * inst.s + j + 1) * w]
                    .copy_from_slice(inst.values.row(old * inst.s + j));
            }
        }
        // fuse with explicit selections mapped through the permutation;
        // positions are held past every chunk so eligibility can't differ
        let run = |inst: &Instance<f64>, sel: Arc<Vec<Vec<u32>>>| -> Tensor<f64> {
            let mut g = Graph::<f64>::new();
            let q_attn = g.leaf(inst.q_attn.clone());
            let q_slc = g.leaf(inst.q_slc.clone());
            let landmarks = g.leaf(inst.landmarks.clone());
            let positions = vec![c * inst.s + inst.s; inst.n];
            let (scores, _) = score_chunks(&mut g, q_slc, landmarks, &positions, inst.s).unwrap();
            let weights = fusion_weights(&mut g, scores, &sel).unwrap();
            let store = ChunkStore {
                chunk_size: inst.s,
                num_chunks: c,
                landmarks,
                keys: g.leaf(inst.keys.clone()),
                values: g.leaf(inst.values.clone()),
            };
            let gains = HsaGains {
                q: inst.q_gains.iter().map(|v| g.leaf(Tensor::new(vec![inst.d_h], v.clone()).unwrap())).collect(),
                k: inst.k_gains.iter().map(|v| g.leaf(Tensor::new(vec![inst.d_h], v.clone()).unwrap())).collect(),
            };
            let out = hsa_attend(
                &mut g, q_attn, &store, &sel, weights, &gains, inst.heads, inst.kv_heads,
                inst.d_h, 1e-6,
            )
            .unwrap();
            g.value(out).clone()
        };
        let sel: Arc<Vec<Vec<u32>>> = Arc::new(
            (0..inst.n)
                .map(|_| {
                    let mut idx: Vec<u32> = (0..c as u32).collect();
                    for i in (1..idx.len()).rev() {
                        idx.swap(i, r.gen_range(0..=i));
                    }
                    idx.truncate(inst.k.min(c));
                    idx.sort_unstable();
                    idx
                })
                .collect(),
        );
        let mapped: Arc<Vec<Vec<u32>>> = Arc::new(
            sel.iter()
                .map(|row| {
                    let mut m: Vec<u32> = row.iter().map(|&i| perm[i as usize] as u32).collect();
                    m.sort_unstable();
                    m
                })
                .collect(),
        );
        let a = run(&inst, sel);
        let b = run(&permuted, mapped);
        let worst = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-12, "permutation changed fused output by {worst}");
    }
}

// ---- criteria 5 and 6: trained-run artifacts ----

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn artifacts_dir() -> Option<PathBuf> {
    if let Ok(dir) = std::env::var("HSA_LAB_RUNS_DIR") {
        let p = PathBuf::from(dir);
        if p.exists() {
            return Some(p);
        }
    }
    let p = repo_root().join("artifacts");
    if p.exists() {
        Some(p)
    } else {
        None
    }
}

/// Mean accuracy across depths at one context length from a grid CSV
/// (schema `task,length,depth,accuracy,n_samples`).
fn csv_accuracy_at(csv: &str, length: usize) -> f64 {
    let mut vals = Vec::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() == 5 && cols[1] == length.to_string() && cols[3] != "skipped" {
            vals.push(cols[3].parse::<f64>().unwrap());
        }
    }
    assert!(!vals.is_empty(), "no rows for length {length}");
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn read_grid(dir: &Path, run: &str) -> String {
    let path = dir.join(run).join("eval").join("sniah.csv");
    std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing eval grid {}: {e}", path.display()))
}

/// Run the whole training pipeline through the CLI binary when no
/// precomputed artifacts exist. Multi-hour on a desktop CPU.
fn run_pipeline_fallback() -> PathBuf {
    let root = repo_root();
    let out = root.join("target/acceptance-runs");
    std::fs::create_dir_all(&out).unwrap();
    let bin = env!("CARGO_BIN_EXE_hsa-lab");
    let eval_args: Vec<String> = [
        "--task", "sniah", "--lengths", "2048,8192,16384", "--depths", "0,0.5,1",
        "--samples-per-cell", "8", "--seed", "7", "--train-context", "2048",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let runs = [
        ("ladder", "ladder.json", None, None),
        ("no_warmup", "no_warmup.json", None, None),
        ("seesaw_small", "seesaw_small.json", Some("ladder"), Some("512")),
        ("seesaw_large", "seesaw_large.json", Some("ladder"), Some("1024")),
    ];
    for (name, config, init_from, eval_window) in runs {
        let dir = out.join(name);
        if dir.join("final.ckpt").exists() {
            continue;
        }
        let mut cmd = std::process::Command::new(bin);
        cmd.arg("train")
            .arg("--config")
            .arg(root.join("configs").join(config))
            .arg("--out-dir")
            .arg(&dir);
        if dir.join("state.json").exists() {
            cmd.arg("--resume");
        } else if let Some(src) = init_from {
            cmd.arg("--init-checkpoint").arg(out.join(src).join("final.ckpt"));
        }
        let status = cmd.status().unwrap();
        assert!(status.success(), "training run {name} failed");
        let mut cmd = std::process::Command::new(bin);
        cmd.arg("eval")
            .arg("--checkpoint")
            .arg(dir.join("final.ckpt"))
            .args(&eval_args)
            .arg("--out-dir")
            .arg(dir.join("eval"));
        if let Some(w) = eval_window {
            cmd.arg("--window").arg(w);
        }
        let status = cmd.status().unwrap();
        assert!(status.success(), "eval of run {name} failed");
    }
    out
}

fn criterion_length_generalization() {
    let dir = artifacts_dir().unwrap_or_else(|| {
        eprintln!("no precomputed artifacts; running the training pipeline (hours)");
        run_pipeline_fallback()
    });
    let ladder = read_grid(&dir, "ladder");
    let ladder_4x = csv_accuracy_at(&ladder, 8192);
    let ladder_8x = csv_accuracy_at(&ladder, 16384);
    let ablation = read_grid(&dir, "no_warmup");
    let ablation_4x = csv_accuracy_at(&ablation, 8192);
    println!(
        "  ladder S-NIAH: {:.3} @4x (>= 0.90), {:.3} @8x (>= 0.75); no-warmup: {:.3} @4x (<= 0.5)",
        ladder_4x, ladder_8x, ablation_4x
    );
    assert!(ladder_4x >= 0.90, "ladder accuracy at 4x context is {ladder_4x}, need >= 0.90");
    assert!(ladder_8x >= 0.75, "ladder accuracy at 8x context is {ladder_8x}, need >= 0.75");
    assert!(ablation_4x <= 0.5, "no-warmup accuracy at 4x context is {ablation_4x}, need <= 0.5");
}

fn criterion_seesaw_probe() {
    // exploratory: report the comparison, never gate on it
    let Some(dir) = artifacts_dir() else {
        println!("  seesaw grids not present; see criterion 5 for the fallback path");
        return;
    };
    let small = read_grid(&dir, "seesaw_small");
    let large = read_grid(&dir, "seesaw_large");
    for length in [8192usize, 16384] {
        let s = csv_accuracy_at(&small, length);
        let l = csv_accuracy_at(&large, length);
        let verdict = if l <= s { "consistent with the seesaw effect" } else { "NOT observed here" };
        println!(
            "  window 1024 vs 512 at {length}: {l:.3} vs {s:.3} ({verdict})"
        );
    }
}

// ---- criterion 7 ----

fn criterion_cost_model() {
    let cfg = ModelConfig::desk();
    let lengths: Vec<u64> = (10..=24).map(|e| 1u64 << e).collect();
    let report = cost_model(&cfg, cfg.swa_window, cfg.top_k, &lengths).unwrap();
    for pair in report.rows.windows(2) {
        assert_eq!(pair[1].hsa_attend_flops, 2 * pair[0].hsa_attend_flops, "HSA-attend not linear");
        assert_eq!(pair[1].full_attn_flops, 4 * pair[0].full_attn_flops, "full attention not quadratic");
    }
    let crossover = report.crossover.expect("no full-vs-hybrid crossover found");
    let check = |n: u64| {
        let r = cost_model(&cfg, cfg.swa_window, cfg.top_k, &[n]).unwrap().rows.remove(0);
        r.swa_flops + r.hsa_attend_flops + r.hsa_retrieval_flops < r.full_attn_flops
    };
    assert!(check(crossover));
    assert!(!check(crossover - 1));
}

// ---- criterion 8 ----

fn criterion_reproducibility() {
    // generators: bitwise determinism under a fixed seed for every task
    for seed in [0u64, 7, 999] {
        let gen_all = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut out: Vec<Vec<u32>> = Vec::new();
            out.push(datagen::gen_sniah(256, 0.4, &mut r).unwrap().tokens);
            out.push(datagen::gen_mqniah(400, 2, 3, &mut r).unwrap().tokens);
            out.push(datagen::gen_vartrack(300, 3, &mut r).unwrap().tokens);
            out.push(datagen::gen_lm(128, &mut r).unwrap().tokens);
            out.push(datagen::gen_lm_effective(600, 128, &mut r).unwrap().tokens);
            out
        };
        assert_eq!(gen_all(seed), gen_all(seed));
    }

    // resume vs uninterrupted: bitwise parameter equality on the micro model
    let mut cfg = ModelConfig::micro();
    cfg.vocab_size = datagen::VOCAB_SIZE;
    let spec = PhaseSpec {
        name: "resume-check".into(),
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
        mixture: vec![MixtureEntry::SelfCopy { weight: 1.0 }, MixtureEntry::Lm { weight: 1.0 }],
        completion: None,
    };
    let run_seed = 88;
    let mut sink = Vec::new();

    let mut ps_full = init_params(&cfg, 50).unwrap();
    let mut opt_full = AdamW::new(&ps_full, AdamWConfig::default());
    run_phase(&cfg, &mut ps_full, &mut opt_full, &spec, 0, run_seed, 0, None, &mut sink).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut ps_part = init_params(&cfg, 50).unwrap();
    let mut opt_part = AdamW::new(&ps_part, AdamWConfig::default());
    let mut short = spec.clone();
    short.steps = 2;
    run_phase(&cfg, &mut ps_part, &mut opt_part, &short, 0, run_seed, 0, None, &mut sink).unwrap();
    hsa_lab::model::save_checkpoint(&dir.path().join("m.ckpt"), &cfg, &ps_part).unwrap();
    hsa_lab::trainer::save_optimizer(&dir.path().join("m.opt"), &opt_part, &ps_part).unwrap();
    let (cfg2, mut ps_res) = hsa_lab::model::load_checkpoint(&dir.path().join("m.ckpt")).unwrap();
    let mut opt_res = hsa_lab::trainer::load_optimizer(&dir.path().join("m.opt"), &ps_res).unwrap();
    run_phase(&cfg2, &mut ps_res, &mut opt_res, &spec, 0, run_seed, 2, None, &mut sink).unwrap();

    for (a, b) in ps_full.ids().zip(ps_res.ids()) {
        assert_eq!(
            ps_full.value(a).data(),
            ps_res.value(b).data(),
            "parameter {} diverged after resume",
            ps_full.entry(a).name
        );
    }

    // the completion rule used by the warm-up phase
    assert!(hsa_lab::trainer::detect_warmup_done(&[0.5, 0.96, 0.97], 0.95, 2));
    assert!(!hsa_lab::trainer::detect_warmup_done(&[0.96, 0.5, 0.97], 0.95, 2));
    let _ = CompletionRule { probe_length: 2048, threshold: 0.95, consecutive: 2 };
    // batches regenerate identically at any step
    assert_eq!(
        gen_batch(&spec, run_seed, 0, 3).unwrap().iter().map(|s| &s.tokens).collect::<Vec<_>>(),
        gen_batch(&spec, run_seed, 0, 3).unwrap().iter().map(|s| &s.tokens).collect::<Vec<_>>()
    );
}

#[test]
fn acceptance() {
    let criteria: Vec<(&str, fn())> = vec![
        ("1 oracle equivalence (batched vs reference, 200 instances)", criterion_oracle_equivalence),
        ("2 gradient suite (micro model end-to-end finite differences)", criterion_gradient_suite),
        ("3 causality (50 inputs x 10 positions, exact at 64-bit)", criterion_causality),
        ("4 fusion/selection properties (1000+ cases each)", criterion_fusion_selection_properties),
        ("5 length-generalization trend (warm-up ladder vs no-warm-up)", criterion_length_generalization),
        ("6 seesaw probe (report only)", criterion_seesaw_probe),
        ("7 cost model (exact scaling and crossover)", criterion_cost_model),
        ("8 reproducibility (bitwise resume, deterministic generators)", criterion_reproducibility),
    ];
    let mut failures = Vec::new();
    for (name, f) in criteria {
        let result = std::panic::catch_unwind(f);
        match &result {
            Ok(()) => println!("criterion {name}: PASS"),
            Err(_) => println!("criterion {name}: FAIL"),
        }
        if result.is_err() {
            failures.push(name);
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
