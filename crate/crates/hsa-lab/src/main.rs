//! Command-line entry point: generate synthetic data, run the phased
//! training ladder, evaluate length-generalization grids, print the
//! analytic cost model, and inspect checkpoints.
//!
//! Exit codes: 0 success, 1 validation error, 2 numeric failure, 3 I/O.

use clap::{Parser, Subcommand, ValueEnum};
use hsa_lab::datagen::{self, Sample};
use hsa_lab::error::{HsaError, Result};
use hsa_lab::evalharness::{
    cost_model, derive_seed, eval_niah, eval_ppl, svg_heatmap, svg_lines, EvalTask, NiahSpec,
    PplMode,
};
use hsa_lab::model::{
    forward, init_params, load_checkpoint, save_checkpoint, ForwardOptions, ModelConfig,
};
use hsa_lab::numerics::{Graph, ParamSet};
use hsa_lab::trainer::{
    load_optimizer, run_phase, save_optimizer, AdamW, AdamWConfig, PhaseSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "hsa-lab", version, about = "Hierarchical sparse attention lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GenTask {
    Sniah,
    Mqniah,
    Vartrack,
    Selfcopy,
    Lm,
    LmEffective,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalTaskArg {
    Sniah,
    Mqniah,
    Vartrack,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Emit synthetic task samples as JSONL.
    Gen {
        #[arg(long, value_enum)]
        task: GenTask,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Needle depth in [0,1]; sampled uniformly when omitted.
        #[arg(long)]
        depth: Option<f64>,
        #[arg(long, default_value_t = 2)]
        n_queries: usize,
        #[arg(long, default_value_t = 4)]
        n_kv: usize,
        #[arg(long, default_value_t = 3)]
        chain_length: usize,
        #[arg(long, default_value_t = 256)]
        min_gap: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the phased training ladder described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the seed stored in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue an interrupted run from its latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Initialize parameters from an existing checkpoint instead of a
        /// fresh init (fresh optimizer state; incompatible with --resume).
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a context-length × needle-depth grid.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "sniah")]
        task: EvalTaskArg,
        /// Comma-separated context lengths.
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
        lengths: Vec<usize>,
        /// Comma-separated needle depths in [0,1].
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
        depths: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        samples_per_cell: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training context length; longer cells are marked out-of-domain.
        #[arg(long, default_value_t = 2048)]
        train_context: usize,
        /// SWA window at eval time; defaults to the model config value.
        #[arg(long)]
        window: Option<usize>,
        /// Retrieval top-k at eval time; defaults to the model config value.
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, value_enum, default_value = "32")]
        precision: Precision,
        #[arg(long, default_value_t = 2)]
        n_queries: usize,
        #[arg(long, default_value_t = 4)]
        n_kv: usize,
        #[arg(long, default_value_t = 3)]
        chain_length: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the analytic FLOP/memory cost model.
    Cost {
        /// Model config JSON; the built-in desk preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192,16384,65536")]
        lengths: Vec<u64>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump checkpoint manifest, parameter statistics, and retrieval-score
    /// entropy from a probe batch.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probe sequence length for the retrieval-entropy dump.
        #[arg(long, default_value_t = 512)]
        probe_length: usize,
    },
}

// ---- run config / manifest ----

/// Top-level training configuration: model, seed, phase ladder.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    version: u32,
    model: ModelConfig,
    seed: u64,
    phases: Vec<PhaseSpec>,
}

/// Written into the output directory; every artifact the run produced is
/// reachable from here.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    tool_version: String,
    config_sha256: String,
    seed: u64,
    phases: Vec<String>,
    checkpoints: Vec<String>,
    optimizer_states: Vec<String>,
    metrics: String,
    completed_phases: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    /// Phases fully finished.
    completed_phases: usize,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| HsaError::InvalidArgument {
        op: "config",
        msg: format!("{}: {e}", path.display()),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---- subcommands ----

fn cmd_gen(
    task: GenTask,
    length: usize,
    count: usize,
    seed: u64,
    depth: Option<f64>,
    n_queries: usize,
    n_kv: usize,
    chain_length: usize,
    min_gap: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut lines = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
        let sample: Sample = match task {
            GenTask::Sniah => {
                let d = depth.unwrap_or_else(|| rng.gen_range(0.0..=1.0));
                datagen::gen_sniah(length, d, &mut rng)?
            }
            GenTask::Mqniah => datagen::gen_mqniah(length, n_queries, n_kv, &mut rng)?,
            GenTask::Vartrack => datagen::gen_vartrack(length, chain_length, &mut rng)?,
            GenTask::Selfcopy => {
                let half = (length - 1) / 2;
                let seq: Vec<u32> = (0..half).map(|_| rng.gen_range(0u32..256)).collect();
                datagen::gen_selfcopy(&seq)?
            }
            GenTask::Lm => datagen::gen_lm(length, &mut rng)?,
            GenTask::LmEffective => datagen::gen_lm_effective(length, min_gap, &mut rng)?,
        };
        lines.push(sample.to_json_line()?);
    }
    let body = lines.join("\n") + "\n";
    match out {
        Some(path) => std::fs::write(path, body)?,
        None => print!("{body}"),
    }
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    resume: bool,
    init_checkpoint: Option<&Path>,
) -> Result<()> {
    if resume && init_checkpoint.is_some() {
        return Err(HsaError::InvalidArgument {
            op: "train",
            msg: "--resume and --init-checkpoint are mutually exclusive".into(),
        });
    }
    let config_bytes = std::fs::read(config_path)?;
    let config: RunConfig = serde_json::from_slice(&config_bytes).map_err(|e| {
        HsaError::InvalidArgument {
            op: "config",
            msg: format!("{}: {e}", config_path.display()),
        }
    })?;
    config.model.validate()?;
    for p in &config.phases {
        p.validate()?;
    }
    let seed = seed.unwrap_or(config.seed);
    std::fs::create_dir_all(out_dir)?;
    let state_path = out_dir.join("state.json");

    let mut completed = 0usize;
    let mut ps: ParamSet<f32>;
    let mut opt: AdamW<f32>;
    let mut start_step = 0usize;
    if resume {
        if !state_path.exists() {
            return Err(HsaError::InvalidArgument {
                op: "train",
                msg: format!("no checkpoint found in {}", out_dir.display()),
            });
        }
        let state: TrainState = read_json(&state_path)?;
        completed = state.completed_phases;
        if completed >= config.phases.len() {
            println!("run already complete ({completed} phases)");
            return Ok(());
        }
        // prefer mid-phase progress for the current phase, else the previous
        // phase's final checkpoint, else a fresh init (phase 0, step 0)
        let progress = out_dir.join(format!("phase{completed}.progress.json"));
        let (ckpt, opt_path) = if progress.exists() {
            let p: serde_json::Value = read_json(&progress)?;
            start_step = p["next_step"].as_u64().unwrap_or(0) as usize;
            (
                out_dir.join(format!("phase{completed}.ckpt")),
                out_dir.join(format!("phase{completed}.opt")),
            )
        } else if completed > 0 {
            (
                out_dir.join(format!("phase{}.ckpt", completed - 1)),
                out_dir.join(format!("phase{}.opt", completed - 1)),
            )
        } else {
            (PathBuf::new(), PathBuf::new())
        };
        if ckpt.as_os_str().is_empty() {
            ps = init_params(&config.model, seed)?;
            opt = AdamW::new(&ps, AdamWConfig::default());
        } else {
            let (ckpt_cfg, loaded) = load_checkpoint(&ckpt)?;
            if serde_json::to_string(&ckpt_cfg)? != serde_json::to_string(&config.model)? {
                return Err(HsaError::InvalidArgument {
                    op: "train",
                    msg: "checkpoint model config does not match the run config".into(),
                });
            }
            ps = loaded;
            opt = load_optimizer(&opt_path, &ps)?;
        }
    } else {
        if state_path.exists() {
            return Err(HsaError::InvalidArgument {
                op: "train",
                msg: format!(
                    "{} already contains a run; pass --resume to continue it",
                    out_dir.display()
                ),
            });
        }
        ps = match init_checkpoint {
            Some(path) => {
                let (ckpt_cfg, loaded) = load_checkpoint(path)?;
                if serde_json::to_string(&ckpt_cfg)? != serde_json::to_string(&config.model)? {
                    return Err(HsaError::InvalidArgument {
                        op: "train",
                        msg: "init checkpoint model config does not match the run config".into(),
                    });
                }
                loaded
            }
            None => init_params(&config.model, seed)?,
        };
        opt = AdamW::new(&ps, AdamWConfig::default());
        write_json(&state_path, &TrainState { completed_phases: 0 })?;
    }

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics =
        std::fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    for (idx, phase) in config.phases.iter().enumerate().skip(completed) {
        let from = if idx == completed { start_step } else { 0 };
        println!(
            "phase {idx} {:?}: steps {}..{} (batch {}, lr {}, window {}, top-k {})",
            phase.name, from, phase.steps, phase.batch_size, phase.lr, phase.swa_window,
            phase.hsa_top_k
        );
        let outcome = run_phase(
            &config.model,
            &mut ps,
            &mut opt,
            phase,
            idx,
            seed,
            from,
            Some(out_dir),
            &mut metrics,
        )?;
        if outcome.completion_warning {
            eprintln!(
                "warning: phase {idx} {:?} finished all {} steps without meeting its \
                 completion rule (probe history: {:?})",
                phase.name, phase.steps, outcome.probe_history
            );
        }
        println!(
            "phase {idx} done: {} steps, final loss {:.4}, early completion: {}",
            outcome.steps_run, outcome.final_loss, outcome.completed_early
        );
        let _ = std::fs::remove_file(out_dir.join(format!("phase{idx}.progress.json")));
        write_json(&state_path, &TrainState { completed_phases: idx + 1 })?;
        write_manifest(out_dir, &config_bytes, seed, &config, idx + 1)?;
    }
    save_checkpoint(&out_dir.join("final.ckpt"), &config.model, &ps)?;
    save_optimizer(&out_dir.join("final.opt"), &opt, &ps)?;
    write_manifest(out_dir, &config_bytes, seed, &config, config.phases.len())?;
    println!("run complete; manifest at {}", out_dir.join("manifest.json").display());
    Ok(())
}

fn write_manifest(
    out_dir: &Path,
    config_bytes: &[u8],
    seed: u64,
    config: &RunConfig,
    completed: usize,
) -> Result<()> {
    let digest = Sha256::digest(config_bytes);
    let mut checkpoints: Vec<String> =
        (0..completed).map(|i| format!("phase{i}.ckpt")).collect();
    let mut opts: Vec<String> = (0..completed).map(|i| format!("phase{i}.opt")).collect();
    if completed == config.phases.len() {
        checkpoints.push("final.ckpt".into());
        opts.push("final.opt".into());
    }
    write_json(
        &out_dir.join("manifest.json"),
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seed,
            phases: config.phases.iter().map(|p| p.name.clone()).collect(),
            checkpoints,
            optimizer_states: opts,
            metrics: "metrics.jsonl".into(),
            completed_phases: completed,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    task: EvalTaskArg,
    lengths: Vec<usize>,
    depths: Vec<f64>,
    samples_per_cell: usize,
    seed: u64,
    train_context: usize,
    window: Option<usize>,
    top_k: Option<usize>,
    precision: Precision,
    n_queries: usize,
    n_kv: usize,
    chain_length: usize,
    out_dir: &Path,
) -> Result<()> {
    let (cfg, ps) = load_checkpoint(checkpoint)?;
    let opts = ForwardOptions {
        swa_window: window.unwrap_or(cfg.swa_window),
        top_k: top_k.unwrap_or(cfg.top_k),
    };
    let task = match task {
        EvalTaskArg::Sniah => EvalTask::Sniah,
        EvalTaskArg::Mqniah => EvalTask::Mqniah { n_queries, n_kv },
        EvalTaskArg::Vartrack => EvalTask::Vartrack { chain_length },
    };
    let spec = NiahSpec {
        task,
        lengths,
        depths,
        samples_per_cell,
        seed,
        in_domain_boundary: train_context,
        max_cell_bytes: 4 << 30,
    };
    let (grid, records) = match precision {
        Precision::F32 => eval_niah(&cfg, &ps, &opts, &spec)?,
        Precision::F64 => eval_niah(&cfg, &ps.cast::<f64>(), &opts, &spec)?,
    };
    std::fs::create_dir_all(out_dir)?;
    let base = grid.task.clone();
    std::fs::write(out_dir.join(format!("{base}.csv")), grid.to_csv())?;
    std::fs::write(
        out_dir.join(format!("{base}.svg")),
        svg_heatmap(&grid, &format!("{base} accuracy (window {})", opts.swa_window)),
    )?;
    let trend: Vec<(f64, f64)> = grid
        .lengths
        .iter()
        .filter_map(|&l| grid.accuracy_at_length(l).map(|a| (l as f64, a)))
        .collect();
    std::fs::write(
        out_dir.join(format!("{base}_trend.svg")),
        svg_lines(&[(base.clone(), trend)], &format!("{base} vs context length"), "context length", "accuracy"),
    )?;
    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    std::fs::write(out_dir.join(format!("{base}_records.jsonl")), jsonl)?;

    println!("task={base} samples_per_cell={samples_per_cell} seed={seed}");
    println!("{:>10} {:>8} {:>10} {:>12}", "length", "depth", "accuracy", "domain");
    for (li, &len) in grid.lengths.iter().enumerate() {
        for (di, &depth) in grid.depths.iter().enumerate() {
            let acc = match grid.cell(li, di) {
                Some(a) => format!("{a:.3}"),
                None => "skipped".into(),
            };
            let domain = if len <= train_context { "in-domain" } else { "out-of-domain" };
            println!("{len:>10} {depth:>8.2} {acc:>10} {domain:>12}");
        }
    }
    Ok(())
}

fn cmd_cost(
    config: Option<PathBuf>,
    lengths: Vec<u64>,
    window: Option<usize>,
    top_k: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg: ModelConfig = match config {
        Some(p) => {
            let c: ModelConfig = read_json(&p)?;
            c.validate()?;
            c
        }
        None => ModelConfig::desk(),
    };
    let report = cost_model(
        &cfg,
        window.unwrap_or(cfg.swa_window),
        top_k.unwrap_or(cfg.top_k),
        &lengths,
    )?;
    println!(
        "{:>10} {:>16} {:>14} {:>14} {:>14} {:>12} {:>12}",
        "n", "full_attn", "swa", "hsa_attend", "hsa_retrieval", "kv_full", "kv_hsa"
    );
    for r in &report.rows {
        println!(
            "{:>10} {:>16} {:>14} {:>14} {:>14} {:>12} {:>12}",
            r.n,
            r.full_attn_flops,
            r.swa_flops,
            r.hsa_attend_flops,
            r.hsa_retrieval_flops,
            r.kv_full_bytes,
            r.kv_hsa_bytes
        );
    }
    match report.crossover {
        Some(n) => println!("hybrid undercuts full attention from n = {n}"),
        None => println!("no crossover within the scanned range"),
    }
    if let Some(path) = out {
        write_json(&path, &report)?;
    }
    Ok(())
}

fn cmd_inspect(checkpoint: &Path, seed: u64, probe_length: usize) -> Result<()> {
    let (cfg, ps) = load_checkpoint(checkpoint)?;
    println!("config: {}", serde_json::to_string_pretty(&cfg)?);
    let mut total = 0usize;
    println!("{:>34} {:>12} {:>12} {:>12} {:>12}", "parameter", "numel", "mean", "std", "max|.|");
    for (_, e) in ps.iter() {
        let d = e.value.data();
        let n = d.len();
        total += n;
        let mean = d.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let mx = d.iter().fold(0.0f64, |a, &v| a.max((v as f64).abs()));
        println!(
            "{:>34} {:>12} {:>12.5} {:>12.5} {:>12.5}",
            e.name,
            n,
            mean,
            var.sqrt(),
            mx
        );
    }
    println!("total parameters: {total}");

    // retrieval-score entropy over a random probe batch
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<u32> =
        (0..probe_length).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
    let mut g = Graph::<f32>::new_inference();
    let out = forward(&mut g, &ps, &tokens, &cfg, &ForwardOptions::from_config(&cfg))?;
    if out.retrieval_scores.is_empty() {
        println!("no retrieval layers active at probe length {probe_length}");
    }
    for (layer, node) in &out.retrieval_scores {
        let scores = g.value(*node);
        let c = scores.cols();
        let mut sum_h = 0.0f64;
        let mut rows = 0usize;
        for t in 0..scores.rows() {
            let eligible = (t / cfg.chunk_size).min(c);
            if eligible < 2 {
                continue;
            }
            let row = &scores.row(t)[..eligible];
            let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            sum_h -= exps.iter().map(|e| e / z).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            rows += 1;
        }
        if rows > 0 {
            println!(
                "layer {layer}: mean retrieval-score entropy {:.4} nats over {rows} tokens",
                sum_h / rows as f64
            );
        }
    }
    let ppl = eval_ppl(
        &cfg,
        &ps,
        &ForwardOptions::from_config(&cfg),
        &tokens,
        (probe_length / 4).max(1),
        PplMode::OnePass,
    )?;
    println!("random-token probe perplexity: {ppl:.2}");
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Gen {
            task,
            length,
            count,
            seed,
            depth,
            n_queries,
            n_kv,
            chain_length,
            min_gap,
            out,
        } => cmd_gen(task, length, count, seed, depth, n_queries, n_kv, chain_length, min_gap, out),
        Cmd::Train { config, out_dir, seed, resume, init_checkpoint } => {
            cmd_train(&config, &out_dir, seed, resume, init_checkpoint.as_deref())
        }
        Cmd::Eval {
            checkpoint,
            task,
            lengths,
            depths,
            samples_per_cell,
            seed,
            train_context,
            window,
            top_k,
            precision,
            n_queries,
            n_kv,
            chain_length,
            out_dir,
        } => cmd_eval(
            &checkpoint,
            task,
            lengths,
            depths,
            samples_per_cell,
            seed,
            train_context,
            window,
            top_k,
            precision,
            n_queries,
            n_kv,
            chain_length,
            &out_dir,
        ),
        Cmd::Cost { config, lengths, window, top_k, out } => {
            cmd_cost(config, lengths, window, top_k, out)
        }
        Cmd::Inspect { checkpoint, seed, probe_length } => {
            cmd_inspect(&checkpoint, seed, probe_length)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        let _ = writeln!(std::io::stderr(), "error: {e}");
        std::process::exit(e.exit_code());
    }
}
