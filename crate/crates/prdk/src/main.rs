//! Command-line entry point: data generation, architecture search, pruning
//! and the convergence-analysis harness, all writing deterministic artifacts.

use clap::{Parser, Subcommand};
use prdk::artifacts::{fmt_f64, sha256_hex, write_atomic, RunManifest};
use prdk::dataio::{generate_synthetic, save_binary, Dataset, LabelModel};
use prdk::prune::{export_dot, prune, skip_fraction, ScoreMode};
use prdk::schema::{
    cell_to_json, doc_to_state, state_from_json, state_to_doc, state_to_json, CellDoc,
};
use prdk::search::{run_search, trace_to_csv, SearchConfig, SearchError, SearchMode, TraceRecord};
use prdk::supernet::{Batch, CellGraph, SuperNetParams};
use prdk::theory::{
    compare_shallow_deep, gate_sensitivity_sweep, gram_matrix, lambda_bound,
    lambda_contraction_sweep, lambda_min_k, loss_descent_warmup, skip_fraction_experiment,
    ArchWeights, TheoryConfig, TheoryReport,
};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::{Path, PathBuf};

const EXIT_CONFIG: i32 = 2;
const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
enum CliError {
    /// Bad configuration, missing files, schema mismatches: exit 2.
    Config(String),
    /// Numeric divergence during a run: exit 3.
    Numeric(String),
    /// Anything else: exit 1.
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::Other(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match &e {
            SearchError::Config(_) => CliError::Config(e.to_string()),
            SearchError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<prdk::theory::TheoryError> for CliError {
    fn from(e: prdk::theory::TheoryError) -> Self {
        match &e {
            prdk::theory::TheoryError::Config(_) | prdk::theory::TheoryError::OddNodeCount(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "prdk",
    version,
    about = "Differentiable cell search with stochastic gates and a convergence-analysis harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it in the binary format.
    GenData {
        /// Output file path.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Channel rows per sample.
        #[arg(long, default_value_t = 3)]
        rows: usize,
        /// Spatial columns per sample.
        #[arg(long, default_value_t = 8)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the alternating architecture search.
    Search {
        /// JSON config file with the search settings.
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config mode (darts | prdarts).
        #[arg(long)]
        mode: Option<String>,
        /// Run this many independent seeded trials (seed, seed+1, ...).
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Override the dataset file.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Discretize a search state into a pruned cell.
    Prune {
        /// state.json produced by the search subcommand.
        #[arg(long)]
        state: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Convergence-analysis modes.
    Theory {
        /// One of: lambda, gram, contraction, shallow-deep, sensitivity,
        /// skipfrac, lambda-sweep.
        #[arg(long)]
        mode: String,
        /// Optional JSON config; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            out,
            n,
            rows,
            cols,
            seed,
        } => cmd_gen_data(&out, n, rows, cols, seed),
        Command::Search {
            config,
            out,
            seed,
            mode,
            trials,
            data,
        } => cmd_search(&config, &out, seed, mode.as_deref(), trials, data.as_deref()),
        Command::Prune { state, out } => cmd_prune(&state, &out),
        Command::Theory {
            mode,
            config,
            out,
            seed,
            trials,
        } => cmd_theory(&mode, config.as_deref(), &out, seed, trials),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}

fn cmd_gen_data(out: &Path, n: usize, rows: usize, cols: usize, seed: u64) -> Result<(), CliError> {
    let dataset = generate_synthetic(n, rows, cols, &LabelModel::LinearTeacher, seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    save_binary(&dataset, out).map_err(|e| CliError::Other(e.to_string()))?;
    println!("wrote {} samples to {}", dataset.len(), out.display());
    Ok(())
}

fn read_config_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))
}

fn resolve_dataset(config: &SearchConfig) -> Result<(Dataset, String), CliError> {
    match &config.dataset_path {
        Some(path) => {
            let bytes = std::fs::read(path)
                .map_err(|e| CliError::Config(format!("cannot read dataset {path}: {e}")))?;
            let hash = sha256_hex(&bytes);
            let ds = prdk::dataio::from_bytes(&bytes, config.normalize_data)
                .map_err(|e| CliError::Config(format!("bad dataset {path}: {e}")))?;
            Ok((ds, hash))
        }
        None => {
            let spec = &config.synthetic;
            let seed = spec.seed.unwrap_or(config.seed);
            let ds = generate_synthetic(spec.n, spec.rows, spec.cols, &LabelModel::LinearTeacher, seed)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let hash = sha256_hex(
                format!("synthetic:{}:{}:{}:{}", spec.n, spec.rows, spec.cols, seed).as_bytes(),
            );
            Ok((ds, hash))
        }
    }
}

fn thread_cap() -> usize {
    std::env::var("PRDK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|v| v.get())
                .unwrap_or(1)
        })
}

fn cmd_search(
    config_path: &Path,
    out: &Path,
    seed_override: Option<u64>,
    mode_override: Option<&str>,
    trials: usize,
    data_override: Option<&Path>,
) -> Result<(), CliError> {
    let mut config: SearchConfig = read_config_file(config_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    if let Some(mode) = mode_override {
        config.mode = match mode {
            "darts" => SearchMode::Darts,
            "prdarts" => SearchMode::Prdarts,
            other => {
                return Err(CliError::Config(format!(
                    "unknown mode {other:?}; expected darts or prdarts"
                )))
            }
        };
    }
    if let Some(p) = data_override {
        config.dataset_path = Some(p.display().to_string());
    }
    config.validate().map_err(CliError::from)?;
    if trials == 0 {
        return Err(CliError::Config("trials must be >= 1".into()));
    }

    let seeds: Vec<u64> = (0..trials as u64).map(|i| config.seed + i).collect();
    let mut results: Vec<(u64, Result<Vec<TraceRecord>, CliError>)> = Vec::new();
    let cap = thread_cap().max(1);
    for chunk in seeds.chunks(cap) {
        let chunk_results: Vec<(u64, Result<Vec<TraceRecord>, CliError>)> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&seed| {
                        let config = config.clone();
                        let out = out.to_path_buf();
                        scope.spawn(move || (seed, run_one_search(config, seed, &out, trials > 1)))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("search threads do not panic"))
                    .collect()
            });
        results.extend(chunk_results);
    }
    results.sort_by_key(|(seed, _)| *seed);

    let mut sweep_rows: Vec<(u64, Vec<TraceRecord>)> = Vec::new();
    for (seed, result) in results {
        sweep_rows.push((seed, result?));
    }
    if trials > 1 {
        // Aggregate across trials, sorted by (seed, step).
        let mut body = String::from("seed,");
        body.push_str(TraceRecord::CSV_HEADER);
        body.push('\n');
        for (seed, trace) in &sweep_rows {
            for row in trace {
                body.push_str(&format!("{seed},{}\n", row.to_csv_row()));
            }
        }
        write_atomic(&out.join("sweep.csv"), body.as_bytes())?;
    }
    println!("search finished: {} trial(s) under {}", trials, out.display());
    Ok(())
}

fn run_one_search(
    mut config: SearchConfig,
    seed: u64,
    out_root: &Path,
    nested: bool,
) -> Result<Vec<TraceRecord>, CliError> {
    config.seed = seed;
    let dir = if nested {
        out_root.join(format!("run-{seed}"))
    } else {
        out_root.to_path_buf()
    };
    let (dataset, input_hash) = resolve_dataset(&config)?;
    let (state, trace) = run_search(&config, &dataset).map_err(CliError::from)?;

    write_atomic(&dir.join("trace.csv"), trace_to_csv(&trace).as_bytes())?;
    let doc = state_to_doc(&state, &config);
    write_atomic(&dir.join("state.json"), state_to_json(&doc).as_bytes())?;
    let manifest = RunManifest::new(
        serde_json::to_value(&config).expect("config serializes"),
        input_hash,
        vec!["trace.csv".into(), "state.json".into()],
    );
    manifest.write(&dir)?;
    Ok(trace)
}

fn cmd_prune(state_path: &Path, out: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(state_path).map_err(|e| {
        CliError::Config(format!("cannot read state {}: {e}", state_path.display()))
    })?;
    let doc = state_from_json(&text)
        .map_err(|e| CliError::Config(format!("bad state {}: {e}", state_path.display())))?;
    let state = doc_to_state(&doc).map_err(|e| CliError::Config(format!("invalid state: {e}")))?;

    let mode = match doc.mode {
        SearchMode::Darts => ScoreMode::Softmax,
        SearchMode::Prdarts => ScoreMode::Gates {
            tau: doc.gate.tau,
            a: doc.gate.a,
            b: doc.gate.b,
        },
    };
    let mut outputs = Vec::new();
    let mut write_cell = |betas: &Vec<Vec<f64>>, stem_name: &str| -> Result<(), CliError> {
        let cell = prune(&state.network.cell, betas, mode)
            .map_err(|e| CliError::Config(format!("cannot prune: {e}")))?;
        let frac = skip_fraction(&cell);
        let doc = CellDoc::new(cell.clone());
        write_atomic(
            &out.join(format!("{stem_name}.json")),
            cell_to_json(&doc).as_bytes(),
        )?;
        write_atomic(
            &out.join(format!("{stem_name}.dot")),
            export_dot(&cell).as_bytes(),
        )?;
        outputs.push(format!("{stem_name}.json"));
        outputs.push(format!("{stem_name}.dot"));
        println!("{stem_name}: skip fraction {}", fmt_f64(frac));
        Ok(())
    };
    write_cell(&state.betas_normal, "cell")?;
    if let Some(red) = &state.betas_reduction {
        write_cell(red, "cell_reduction")?;
    }
    let manifest = RunManifest::new(
        serde_json::json!({"command": "prune"}),
        sha256_hex(text.as_bytes()),
        outputs,
    );
    manifest.write(out)?;
    Ok(())
}

fn cmd_theory(
    mode: &str,
    config_path: Option<&Path>,
    out: &Path,
    seed_override: Option<u64>,
    trials_override: Option<usize>,
) -> Result<(), CliError> {
    let mut config: TheoryConfig = match config_path {
        Some(p) => read_config_file(p)?,
        None => TheoryConfig::default(),
    };
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    if let Some(trials) = trials_override {
        config.trials = trials;
    }
    let mut report = TheoryReport::new(mode, &config);
    let csv_name: String;
    let csv_body: String;

    match mode {
        "lambda" => {
            let weights = fixed_or_random_weights(&config);
            let dataset = config.dataset().map_err(CliError::from)?;
            let k = lambda_min_k(&dataset.inputs());
            let lambda = lambda_bound(
                &weights,
                k.symmetric.max(0.0),
                config.c_sigma,
                config.lambda_sum_upper,
            );
            report.lambda_formula = Some(lambda);
            report.lambda_min_k_as_printed = Some(k.as_printed);
            report.lambda_min_k_symmetric = Some(k.symmetric);
            if k.near_parallel {
                report.notes.push("near-parallel samples detected".into());
            }
            csv_name = "lambda.csv".into();
            csv_body = format!("lambda\n{}\n", fmt_f64(lambda));
        }
        "gram" => {
            let (cell, params, values, batch) = toy_instance(&config)?;
            let gram = gram_matrix(&cell, &params, &values, &batch, config.activation)
                .map_err(CliError::from)?;
            report.gram_min_eigenvalue = Some(gram.min_eigenvalue);
            let n = batch.inputs.len();
            let mut asym = 0.0f64;
            let mut body = String::from("i,j,value\n");
            for i in 0..n {
                for j in 0..n {
                    asym = asym.max((gram.matrix.at(i, j) - gram.matrix.at(j, i)).abs());
                    body.push_str(&format!("{i},{j},{}\n", fmt_f64(gram.matrix.at(i, j))));
                }
            }
            let trace: f64 = (0..n).map(|i| gram.matrix.at(i, i)).sum();
            report
                .verdicts
                .insert("symmetric".into(), asym < 1e-10 * trace.max(1.0));
            report.verdicts.insert(
                "positive_semidefinite".into(),
                gram.min_eigenvalue >= -1e-8 * trace / n as f64,
            );
            csv_name = "gram.csv".into();
            csv_body = body;
        }
        "contraction" => {
            let (cell, params, values, batch) = toy_instance(&config)?;
            let eta = config.eta.unwrap_or(0.05);
            let result = prdk::theory::measure_contraction(
                &cell,
                &params,
                &values,
                &batch,
                config.activation,
                eta,
                config.steps,
            )
            .map_err(CliError::from)?;
            report.geo_mean_contraction_ratio = Some(result.geo_mean_ratio);
            report.max_contraction_ratio = Some(result.max_ratio);
            report.verdicts.insert("diverged".into(), result.diverged);
            if result.diverged {
                report.notes.push("loss grew on most steps; reduce eta".into());
            }
            let mut body = String::from("step,loss,ratio\n");
            for (k, loss) in result.losses.iter().enumerate() {
                let ratio = if k == 0 {
                    String::new()
                } else {
                    fmt_f64(result.ratios[k - 1])
                };
                body.push_str(&format!("{k},{},{ratio}\n", fmt_f64(*loss)));
            }
            csv_name = "contraction.csv".into();
            csv_body = body;
        }
        "shallow-deep" => {
            if config.h % 2 != 0 {
                return Err(CliError::Config(format!(
                    "shallow-deep needs an even node count, got {}",
                    config.h
                )));
            }
            let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
            rng.set_stream(0x40);
            let mut body = String::from("draw,lambda_a,lambda_b,verdict\n");
            let mut all_hold = true;
            let mut last = (0.0, 0.0);
            for draw in 0..config.trials.max(1) {
                let weights = ArchWeights::random(config.h, 0.0, 1.0, &mut rng);
                let (a, b, verdict) =
                    compare_shallow_deep(&weights, config.c_sigma, 1.0).map_err(CliError::from)?;
                all_hold &= verdict;
                last = (a, b);
                body.push_str(&format!("{draw},{},{},{verdict}\n", fmt_f64(a), fmt_f64(b)));
            }
            report.lambda_a = Some(last.0);
            report.lambda_b = Some(last.1);
            report.verdicts.insert("ordering_holds".into(), all_hold);
            csv_name = "shallow_deep.csv".into();
            csv_body = body;
        }
        "sensitivity" => {
            let (cell, params, values, batch) = toy_instance(&config)?;
            let params = loss_descent_warmup(
                &cell,
                &params,
                &values,
                &batch,
                config.activation,
                config.warmup_steps,
            )
            .map_err(CliError::from)?;
            let sweep = gate_sensitivity_sweep(
                &cell,
                &params,
                &values,
                &batch,
                config.activation,
                config.epsilon,
            )
            .map_err(CliError::from)?;
            let mut body = String::from("edge,source,target,op_index,op,finite_diff,analytic\n");
            let mut by_kind: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
            for s in &sweep {
                let edge = &cell.edges[s.edge];
                body.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    s.edge,
                    edge.from,
                    edge.to,
                    s.op_index,
                    s.op.label(),
                    fmt_f64(s.finite_difference),
                    fmt_f64(s.analytic)
                ));
                let entry = by_kind.entry(s.op.label()).or_insert((0.0, 0));
                entry.0 += s.analytic;
                entry.1 += 1;
            }
            for (kind, (sum, count)) in &by_kind {
                report.notes.push(format!(
                    "mean analytic derivative for {kind}: {}",
                    fmt_f64(sum / *count as f64)
                ));
            }
            csv_name = "sensitivity.csv".into();
            csv_body = body;
        }
        "skipfrac" => {
            let table = skip_fraction_experiment(&config).map_err(CliError::from)?;
            // Curves start at architecture-dependent loss scales; the decay
            // comparison normalizes each curve by its starting loss.
            let rel_finals = table.mean_relative_final_losses();
            let monotone = rel_finals.windows(2).all(|w| w[1] < w[0]);
            report
                .verdicts
                .insert("final_loss_decreases_with_skip_fraction".into(), monotone);
            let raw_finals = table.mean_final_losses();
            for ((f, rel), raw) in table.fractions.iter().zip(&rel_finals).zip(&raw_finals) {
                report.notes.push(format!(
                    "fraction {}: mean final loss {} (relative to start: {})",
                    fmt_f64(*f),
                    fmt_f64(*raw),
                    fmt_f64(*rel)
                ));
            }
            write_atomic(&out.join("skipfrac_mean.csv"), table.to_mean_csv().as_bytes())?;
            csv_name = "skipfrac.csv".into();
            csv_body = table.to_csv();
        }
        "lambda-sweep" => {
            let sweep = lambda_contraction_sweep(&config).map_err(CliError::from)?;
            report.spearman = Some(sweep.spearman);
            let mut body = String::from("arch,lambda,geo_mean_ratio\n");
            for (i, (l, r)) in sweep.lambdas.iter().zip(&sweep.geo_mean_ratios).enumerate() {
                body.push_str(&format!("{i},{},{}\n", fmt_f64(*l), fmt_f64(*r)));
            }
            csv_name = "lambda_sweep.csv".into();
            csv_body = body;
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown theory mode {other:?}; expected one of lambda, gram, contraction, \
                 shallow-deep, sensitivity, skipfrac, lambda-sweep"
            )))
        }
    }

    write_atomic(&out.join(&csv_name), csv_body.as_bytes())?;
    write_atomic(&out.join("report.json"), report.to_json().as_bytes())?;
    let manifest = RunManifest::new(
        serde_json::json!({
            "command": "theory",
            "mode": mode,
            "config": serde_json::to_value(&config).expect("config serializes"),
        }),
        String::new(),
        vec![csv_name, "report.json".to_string()],
    );
    manifest.write(out)?;
    println!("theory mode {mode} finished under {}", out.display());
    Ok(())
}

fn fixed_or_random_weights(config: &TheoryConfig) -> ArchWeights {
    match (config.weight_skip, config.weight_conv) {
        (Some(s), Some(c)) => ArchWeights::constant(config.h, s, c),
        _ => {
            let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
            rng.set_stream(0x41);
            let mut w = ArchWeights::random(config.h, 0.1, 1.0, &mut rng);
            if let Some(s) = config.weight_skip {
                w.skip = vec![vec![s; config.h]; config.h];
            }
            if let Some(c) = config.weight_conv {
                w.conv = vec![vec![c; config.h]; config.h];
            }
            w
        }
    }
}

type ToyInstance = (CellGraph, SuperNetParams, Vec<Vec<f64>>, Batch);

fn toy_instance(config: &TheoryConfig) -> Result<ToyInstance, CliError> {
    let cell = CellGraph::analysis(config.h).map_err(|e| CliError::Config(e.to_string()))?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(0x42);
    let params = SuperNetParams::init_gaussian(&cell, &config.dims(), &mut rng)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let weights = fixed_or_random_weights(config);
    let values = weights.to_edge_values(&cell);
    let dataset = config.dataset().map_err(CliError::from)?;
    let batch = Batch {
        inputs: dataset.inputs(),
        targets: dataset.targets(),
    };
    Ok((cell, params, values, batch))
}
