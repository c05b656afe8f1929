use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use card::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use card::counterfactual::PerRecord;
use card::data::{
    generate_synthetic, ingest, labels_to_string, load_dataset, parse_labels, read_to_string, save_dataset,
    split_leave_one_out, write_string, Dataset, PositionLabel, SyntheticSpec, LABELS_FILE,
};
use card::dts::dts_simplify;
use card::evaluator::{aggregate, csv_rows, evaluate_model, EvalSettings, MetricsReport, CSV_HEADER};
use card::rng::seeded_rng;
use card::stability::Verdict;
use card::trainer::{run_ablation, train_and_evaluate, Counters, EpochLog, TrainOptions};
use card::{CardModel, Variant};

use crate::plot::{histogram, line_chart, strip_chart, Series};
use crate::{Command, SynthArgs};

pub const CKPT_FILE: &str = "best.ckpt";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Preprocess { input, out } => preprocess(&input, &out),
        Command::Synth(args) => synth(&args),
        Command::Train {
            data,
            variant,
            out,
            config,
        } => {
            let config = config.load()?;
            train(&data, parse_variant(&variant)?, out, config)
        }
        Command::Evaluate {
            ckpt,
            data,
            seeds,
            variant,
            split,
            out,
        } => evaluate(&ckpt, &data, &seeds, variant.as_deref(), &split, out),
        Command::Ablate {
            data,
            variants,
            seeds,
            out,
            config,
        } => {
            let variants = variants.iter().map(|v| parse_variant(v)).collect::<Result<Vec<_>>>()?;
            ablate(&data, &variants, &seeds, out, config.load()?)
        }
        Command::Inspect {
            ckpt,
            data,
            users,
            limit,
            out,
            plot,
            log,
        } => inspect(&ckpt, &data, &users, limit, out.as_deref(), plot.as_deref(), log),
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    Variant::parse(s).ok_or_else(|| anyhow!("unknown variant `{s}` (expected full, no_routing or no_attention)"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_string(path, &text)?;
    Ok(())
}

fn preprocess(input: &Path, out: &Path) -> Result<()> {
    let data = ingest(input)?;
    save_dataset(&data, out)?;
    let interactions: usize = data.sequences.iter().map(|s| s.items.len()).sum();
    println!(
        "{} users, {} items, {interactions} interactions -> {}",
        data.sequences.len(),
        data.vocab.len(),
        out.display()
    );
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_users: args.users,
        n_items: args.items,
        n_clusters: args.clusters,
        shift_prob: args.shift_prob,
        noise_rate: args.noise_rate,
        min_len: args.min_len,
        max_len: args.max_len,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic(&spec, &mut seeded_rng(args.seed, "synth"))?;
    save_dataset(&corpus.dataset(), &args.out)?;
    write_string(&args.out.join(LABELS_FILE), &labels_to_string(&corpus.sequences, &corpus.labels))?;
    let shifted = corpus.bridges.iter().filter(|b| b.is_some()).count();
    println!(
        "{} sequences ({shifted} shifted) over {} items -> {}",
        corpus.sequences.len(),
        args.items,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    variant: Variant,
    seed: u64,
    best_epoch: usize,
    best_val_hr: Option<f64>,
    best_val_ndcg: Option<f64>,
    test_hr: f64,
    test_ndcg: f64,
    epoch_seconds: Vec<f64>,
    mean_epoch_seconds: f64,
    eval_seconds_per_batch: f64,
    counters: Counters,
}

fn train(data_dir: &Path, variant: Variant, out: Option<PathBuf>, config: card::ModelConfig) -> Result<()> {
    let data = load_dataset(data_dir)?;
    let split = split_leave_one_out(&data.sequences);
    let out = out.unwrap_or_else(|| data_dir.join("runs").join(format!("{}-seed{}", variant.name(), config.seed)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join(EPOCH_LOG_FILE);
    let outcome = train_and_evaluate(
        &config,
        &data,
        &split,
        TrainOptions {
            variant,
            log_path: Some(&log_path),
            skip_validation: false,
        },
    )?;
    let meta = CheckpointMeta {
        config: config.clone(),
        vocab_hash: data.vocab.hash(),
        n_items: data.vocab.len(),
        epoch: outcome.train.best_epoch,
        val_hr: outcome.train.best_val_hr,
        val_ndcg: outcome.train.best_val_ndcg,
        seed: config.seed,
        variant,
    };
    let ckpt = out.join(CKPT_FILE);
    save_checkpoint(&outcome.model, &meta, &ckpt)?;
    let summary = TrainSummary {
        variant,
        seed: config.seed,
        best_epoch: outcome.train.best_epoch,
        best_val_hr: outcome.train.best_val_hr,
        best_val_ndcg: outcome.train.best_val_ndcg,
        test_hr: outcome.test.hr,
        test_ndcg: outcome.test.ndcg,
        epoch_seconds: outcome.train.epoch_seconds.clone(),
        mean_epoch_seconds: outcome.train.mean_epoch_seconds(),
        eval_seconds_per_batch: outcome.test.seconds_per_batch,
        counters: outcome.train.counters,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    println!(
        "trained {} epochs (best {}); test HR@{k} {:.2}% NDCG@{k} {:.2}%; {:.3}s/epoch; checkpoint {}",
        outcome.train.epochs.len(),
        outcome.train.best_epoch,
        100.0 * outcome.test.hr,
        100.0 * outcome.test.ndcg,
        outcome.train.mean_epoch_seconds(),
        ckpt.display(),
        k = config.top_k
    );
    Ok(())
}

/// Loads data and a checkpoint, refusing a checkpoint built on another vocabulary.
fn load_pair(ckpt: &Path, data_dir: &Path) -> Result<(Dataset, CardModel, CheckpointMeta)> {
    let data = load_dataset(data_dir)?;
    let (model, meta) = load_checkpoint(ckpt, Some(&data.vocab.hash()))?;
    Ok((data, model, meta))
}

#[derive(Serialize)]
struct EvalReport {
    variant: Variant,
    split: String,
    seeds: Vec<u64>,
    metrics: MetricsReport,
    seconds_per_batch: Vec<f64>,
}

fn evaluate(ckpt: &Path, data_dir: &Path, seeds: &[u64], variant: Option<&str>, split_name: &str, out: Option<PathBuf>) -> Result<()> {
    if seeds.is_empty() {
        bail!("--seeds needs at least one seed");
    }
    let (data, model, meta) = load_pair(ckpt, data_dir)?;
    let variant = variant.map(parse_variant).transpose()?.unwrap_or(meta.variant);
    let split = split_leave_one_out(&data.sequences);
    let samples = if split_name == "valid" { &split.valid } else { &split.test };
    let settings = EvalSettings::from_config(&model.config);
    let mut runs = Vec::new();
    let mut timing = Vec::new();
    for &seed in seeds {
        let run = evaluate_model(&model, samples, &data.sequences, variant, &settings, seed)?;
        runs.push((run.hr, run.ndcg));
        timing.push(run.seconds_per_batch);
    }
    let report = EvalReport {
        variant,
        split: split_name.to_string(),
        seeds: seeds.to_vec(),
        metrics: aggregate(&runs, settings.k),
        seconds_per_batch: timing,
    };
    let out = out.unwrap_or_else(|| {
        let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
        name.push(".eval.json");
        ckpt.with_file_name(name)
    });
    write_json(&out, &report.metrics)?;
    let csv = format!("{CSV_HEADER}\n{}", csv_rows(variant.name(), seeds, &runs));
    write_string(&out.with_extension("csv"), &csv)?;
    for (name, m) in &report.metrics {
        println!("{name} {}", m.display());
    }
    log::info!("mean seconds per batch {:?}", report.seconds_per_batch);
    Ok(())
}

fn ablate(data_dir: &Path, variants: &[Variant], seeds: &[u64], out: Option<PathBuf>, config: card::ModelConfig) -> Result<()> {
    if variants.is_empty() || seeds.is_empty() {
        bail!("--variants and --seeds must be non-empty");
    }
    let data = load_dataset(data_dir)?;
    let split = split_leave_one_out(&data.sequences);
    let report = run_ablation(&config, &data, &split, variants, seeds)?;
    let out = out.unwrap_or_else(|| data_dir.join("ablation"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("ablation.json"), &report)?;
    let mut csv = format!("{CSV_HEADER}\n");
    for (name, v) in &report.variants {
        csv.push_str(&csv_rows(name, &v.seeds, &v.runs));
        let metrics: Vec<String> = v.metrics.iter().map(|(k, m)| format!("{k} {}", m.display())).collect();
        println!(
            "{name}: {} | {:.3}s/epoch, {:.4}s/eval batch, per_passes {}, dts_calls {}",
            metrics.join(", "),
            v.mean_epoch_seconds,
            v.mean_eval_seconds_per_batch,
            v.counters.per_passes,
            v.counters.dts_calls
        );
    }
    write_string(&out.join("ablation.csv"), &csv)?;
    for (name, delta) in &report.hr_delta_vs_full {
        println!("delta HR@{} full - {name}: {delta:+.2} points", config.top_k);
    }
    Ok(())
}

#[derive(Serialize)]
struct InspectRecord<'a> {
    user_id: &'a str,
    con: Vec<f64>,
    s_k: f64,
    verdict: Verdict,
    /// Training-time redundancy-removal mask; absent when the history is not
    /// eligible for removal.
    removal_mask: Option<Vec<bool>>,
    per_records: Vec<PerRecord>,
}

fn inspect(
    ckpt: &Path,
    data_dir: &Path,
    users: &[String],
    limit: Option<usize>,
    out: Option<&Path>,
    plot: Option<&Path>,
    log: Option<PathBuf>,
) -> Result<()> {
    let (data, model, meta) = load_pair(ckpt, data_dir)?;
    let known: BTreeMap<&str, usize> = data
        .sequences
        .iter()
        .enumerate()
        .map(|(i, s)| (s.user_id.as_str(), i))
        .collect();
    let chosen: Vec<usize> = if users.is_empty() {
        (0..data.sequences.len()).take(limit.unwrap_or(usize::MAX)).collect()
    } else {
        users
            .iter()
            .map(|u| known.get(u.as_str()).copied().ok_or_else(|| anyhow!("unknown user `{u}`")))
            .collect::<Result<_>>()?
    };

    let mut dts_rng = seeded_rng(meta.seed, "inspect-dts");
    let dts_params = model.config.dts_params();
    let mut lines = String::new();
    let mut weights = Vec::new();
    let mut records_by_user = Vec::new();
    for &i in &chosen {
        let seq = &data.sequences[i];
        let history = model.truncate(seq.history());
        let report = model.stability(history);
        let eligible = meta.variant != Variant::NoRouting
            && (meta.variant == Variant::NoAttention || report.verdict == Verdict::HighStability)
            && history.len() > model.config.dts_min_history;
        let removal_mask = eligible.then(|| dts_simplify(&report.con, &dts_params, &mut dts_rng).removed);
        let per_records = model.per_records(history);
        weights.extend(per_records.iter().map(|r| r.weight));
        let record = InspectRecord {
            user_id: &seq.user_id,
            con: report.con,
            s_k: report.s_k,
            verdict: report.verdict,
            removal_mask,
            per_records,
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
        records_by_user.push((i, record.per_records));
    }
    match out {
        Some(p) => write_string(p, &lines)?,
        None => std::io::stdout().write_all(lines.as_bytes())?,
    }

    if let Some(dir) = plot {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let log = log.unwrap_or_else(|| ckpt.with_file_name(EPOCH_LOG_FILE));
        if log.exists() {
            write_string(&dir.join("loss_curves.svg"), &loss_chart(&log)?)?;
        } else {
            log::warn!("no epoch log at {}; skipping loss curves", log.display());
        }
        let hist = histogram("Counterfactual weights", "weight", &weights, 0.0, 2.0, 40);
        write_string(&dir.join("weight_histogram.svg"), &hist)?;
        let labels_path = data_dir.join(LABELS_FILE);
        if labels_path.exists() {
            let labels = parse_labels(&read_to_string(&labels_path)?)?;
            let mut groups: BTreeMap<char, (String, Vec<f64>)> = BTreeMap::new();
            for label in [PositionLabel::Regular, PositionLabel::Bridge, PositionLabel::Noise] {
                groups.insert(label.letter(), (format!("{label:?}").to_lowercase(), Vec::new()));
            }
            for (i, records) in &records_by_user {
                let seq = &data.sequences[*i];
                let Some(user_labels) = labels.get(&seq.user_id) else { continue };
                // records index the truncated history; shift back to sequence positions
                let offset = seq.history().len() - model.truncate(seq.history()).len();
                for r in records {
                    if let Some(l) = user_labels.get(r.position + offset) {
                        if let Some(g) = groups.get_mut(&l.letter()) {
                            g.1.push(r.per);
                        }
                    }
                }
            }
            let groups: Vec<_> = groups.into_values().collect();
            write_string(&dir.join("per_vs_label.svg"), &strip_chart("PER by position label", "PER", &groups))?;
        }
    }
    Ok(())
}

fn loss_chart(log: &Path) -> Result<String> {
    let text = read_to_string(log)?;
    let epochs = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<EpochLog>(l).with_context(|| format!("parsing {}", log.display())))
        .collect::<Result<Vec<_>>>()?;
    let series = vec![
        Series {
            label: "diffusion".into(),
            points: epochs.iter().map(|e| (e.epoch as f64, e.loss_diffusion)).collect(),
        },
        Series {
            label: "aux".into(),
            points: epochs.iter().map(|e| (e.epoch as f64, e.loss_aux)).collect(),
        },
    ];
    Ok(line_chart("Training losses", "epoch", "loss", &series))
}
