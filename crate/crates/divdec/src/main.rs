use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use divdec::beam::{beam_search, BeamConfig};
use divdec::cluster::{pdc_filter, PrecomputedEmbedder, SequenceEmbedder};
use divdec::error::{Error, Result};
use divdec::harness::{
    candidates_from_records, compare_strategies, decode_prompt, parse_candidate_file,
    run_experiment, write_run_files, CandidateGroup, Experiment, ExperimentConfig, RunReport,
    RunRow,
};
use divdec::metrics::compute_report;
use divdec::oracle::{exhaustive_topk, random_table_model};
use divdec::rng::mix_seed;

#[derive(Parser)]
#[command(name = "divdec", version, about = "Diverse sequence decoding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode one prompt with one strategy and print the candidates.
    Decode {
        /// Sweep config providing the model, prompts and strategies.
        #[arg(long)]
        config: PathBuf,
        /// Strategy name from the config (default: the first one).
        #[arg(long)]
        strategy: Option<String>,
        /// Prompt text (default: the first line of the prompts file).
        #[arg(long)]
        prompt: Option<String>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every strategy over every prompt and write the report files.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir` from the config).
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute metrics from a persisted candidate file.
    Metrics {
        /// Sweep config providing the model and prompts.
        #[arg(long)]
        config: PathBuf,
        /// A candidates.txt / pool.txt style file.
        #[arg(long)]
        candidates: PathBuf,
        /// Summary sort column.
        #[arg(long, default_value = "strategy")]
        sort: String,
        /// Sort descending.
        #[arg(long)]
        desc: bool,
    },
    /// Cross-validate beam search against exhaustive enumeration.
    OracleCheck {
        /// Number of random table models to check.
        #[arg(long, default_value_t = 20)]
        models: usize,
        #[arg(long, default_value_t = 27)]
        beam_width: usize,
        #[arg(long, default_value_t = 3)]
        max_len: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Filter a persisted candidate set with post-decoding clustering.
    Pdc {
        /// Sweep config providing the model vocabulary and word vectors.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        /// Number of candidates to keep per prompt/strategy group.
        #[arg(long)]
        target: usize,
        /// Cluster count (default: same as target).
        #[arg(long)]
        clusters: Option<usize>,
        /// Precomputed per-candidate embeddings (`index v1 .. vd` lines)
        /// from an external encoder; requires a single-group file.
        #[arg(long)]
        candidate_embeddings: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_experiment(config: &PathBuf, seed: Option<u64>) -> Result<Experiment> {
    let mut config = ExperimentConfig::from_file(config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Experiment::load(config)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Decode { config, strategy, prompt, seed } => {
            let experiment = load_experiment(&config, seed)?;
            let strategy = match strategy {
                Some(name) => experiment
                    .config
                    .strategies
                    .iter()
                    .find(|s| s.name == name)
                    .ok_or_else(|| Error::config(format!("no strategy named {name:?}")))?,
                None => &experiment.config.strategies[0],
            };
            let prompt_text =
                prompt.unwrap_or_else(|| experiment.prompts[0].clone());
            let prompt_ids = experiment.encode_prompt(&prompt_text);
            let outcome = decode_prompt(
                experiment.model.as_dyn(),
                &prompt_ids,
                strategy,
                experiment.config.max_len,
                mix_seed(experiment.config.seed, 0),
                experiment.embedder.as_ref(),
            )?;
            println!("# prompt: {prompt_text}");
            println!("# strategy: {}", strategy.name);
            if let Some(pool) = &outcome.pool {
                println!("# filtered from a pool of {}", pool.len());
            }
            let vocab = experiment.model.vocabulary();
            for (i, h) in outcome.outputs.iter().enumerate() {
                println!(
                    "{} {} {} {}",
                    i + 1,
                    h.base_score,
                    h.finished,
                    vocab.decode(&h.tokens)?
                );
            }
            Ok(())
        }

        Command::Sweep { config, output, seed } => {
            let mut experiment = load_experiment(&config, seed)?;
            if let Some(dir) = output {
                experiment.config.output_dir = Some(dir);
            }
            let dir = experiment.config.output_dir.clone().ok_or_else(|| {
                Error::config("no output directory: set output_dir or pass --output")
            })?;
            let report = run_experiment(&experiment)?;
            write_run_files(&report, &dir)?;
            print!("{}", compare_strategies(&report, "strategy", false)?);
            eprintln!("wrote {}", dir.display());
            Ok(())
        }

        Command::Metrics { config, candidates, sort, desc } => {
            let experiment = load_experiment(&config, None)?;
            let text = std::fs::read_to_string(&candidates)?;
            let groups = parse_candidate_file(&text)?;
            let report = report_from_groups(&experiment, &groups)?;
            print!("{}", compare_strategies(&report, &sort, desc)?);
            Ok(())
        }

        Command::OracleCheck { models, beam_width, max_len, seed } => {
            let mut failures = 0usize;
            for i in 0..models {
                let model = random_table_model(mix_seed(seed, i as u64), &["a", "b", "c"], max_len);
                let beam =
                    beam_search(&model, &[], &BeamConfig::standard(beam_width, max_len))?;
                let oracle = exhaustive_topk(&model, &[], max_len, beam_width)?;
                let ok = beam.len() == oracle.len()
                    && beam.iter().zip(oracle.iter()).all(|(b, o)| {
                        b.tokens == o.tokens
                            && b.finished == o.finished
                            && (b.base_score - o.base_score).abs() <= 1e-9
                    });
                println!(
                    "model {i:02} {}",
                    if ok { "PASS" } else { "FAIL" }
                );
                if !ok {
                    failures += 1;
                }
            }
            if failures > 0 {
                return Err(Error::Io(std::io::Error::other(format!(
                    "{failures} of {models} oracle checks failed"
                ))));
            }
            println!("all {models} oracle checks passed");
            Ok(())
        }

        Command::Pdc { config, candidates, target, clusters, candidate_embeddings, seed } => {
            let experiment = load_experiment(&config, seed)?;
            let text = std::fs::read_to_string(&candidates)?;
            let groups = parse_candidate_file(&text)?;
            let external: Option<Arc<dyn SequenceEmbedder>> = match candidate_embeddings {
                Some(path) => {
                    if groups.len() != 1 {
                        return Err(Error::validation(
                            "--candidate-embeddings requires a candidate file with a single \
                             prompt/strategy group (indices are per-group)",
                        ));
                    }
                    Some(Arc::new(PrecomputedEmbedder::from_file(path)?))
                }
                None => None,
            };
            let embedder: Arc<dyn SequenceEmbedder> = match external {
                Some(e) => e,
                None => experiment.embedder.clone().ok_or_else(|| {
                    Error::config(
                        "pdc needs [embeddings].word_vectors in the config or \
                         --candidate-embeddings",
                    )
                })?,
            };
            let vocab = experiment.model.vocabulary();
            let k = clusters.unwrap_or(target);
            let base_seed = experiment.config.seed;
            for group in &groups {
                let set = candidates_from_records(vocab, &group.records);
                let filtered = pdc_filter(
                    &set,
                    target,
                    k,
                    embedder.as_ref(),
                    mix_seed(base_seed, group.prompt_index as u64),
                )?;
                for (i, h) in filtered.iter().enumerate() {
                    println!(
                        "{} {} {} {} {} {}",
                        group.prompt_index,
                        group.strategy,
                        i + 1,
                        h.base_score,
                        h.finished,
                        vocab.decode(&h.tokens)?
                    );
                }
            }
            Ok(())
        }
    }
}

/// Rebuild a report (rows + aggregates) from persisted candidate groups.
fn report_from_groups(experiment: &Experiment, groups: &[CandidateGroup]) -> Result<RunReport> {
    let model = experiment.model.as_dyn();
    let vocab = model.vocabulary();
    let mut rows = Vec::new();
    for group in groups {
        let prompt_text = experiment
            .prompts
            .get(group.prompt_index)
            .ok_or_else(|| {
                Error::validation(format!(
                    "prompt_id {} not present in the prompts file",
                    group.prompt_index
                ))
            })?
            .clone();
        let prompt_ids = experiment.encode_prompt(&prompt_text);
        let set = candidates_from_records(vocab, &group.records);
        let report = compute_report(model, &prompt_ids, &set, &experiment.config.metrics)?;
        rows.push(RunRow {
            prompt_index: group.prompt_index,
            prompt: prompt_text,
            strategy: group.strategy.clone(),
            metrics: report.to_flat(),
            candidates: group.records.clone(),
            pool: None,
        });
    }

    let mut names: Vec<String> = Vec::new();
    for row in &rows {
        if !names.contains(&row.strategy) {
            names.push(row.strategy.clone());
        }
    }
    let mut aggregates = Vec::new();
    for name in names {
        let strategy_rows: Vec<&RunRow> = rows.iter().filter(|r| r.strategy == name).collect();
        let mut sums = std::collections::BTreeMap::new();
        for row in &strategy_rows {
            for (k, v) in &row.metrics {
                *sums.entry(k.clone()).or_insert(0.0) += v;
            }
        }
        let n = strategy_rows.len() as f64;
        aggregates.push(divdec::harness::StrategyAggregate {
            strategy: name,
            metrics: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
        });
    }

    Ok(RunReport {
        provenance: divdec::harness::Provenance {
            config_hash: experiment.config.fingerprint.clone(),
            seed: experiment.config.seed,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        rows,
        aggregates,
    })
}
