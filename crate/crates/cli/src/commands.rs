use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use quiltsurv::evaluation::{
    baseline_hazard_report, cohort_effect_summary, evaluate, predict, read_predictions, write_baseline_csv,
    write_json, write_predictions, Prediction,
};
use quiltsurv::history::{encode_history, CountMatrix, HistoryEncoder};
use quiltsurv::inference::{train, write_log, StopReason, TrainConfig, VariationalPosterior};
use quiltsurv::ingest::{
    build_episode_records, compute_wait, group_claims, parse_day, read_claims, read_jsonl, temporal_split,
    write_jsonl, Day, EpisodeAttributes, EpisodeRecord, Rejection,
};
use quiltsurv::model::{FittedModel, JointModel, ModelLayout};
use quiltsurv::quantize::{fit_map, transform_table, NumericTable, QuantizationMap};
use quiltsurv::synth::{generate, GeneratorSpec, TrueParameters};

use crate::config::RunConfig;
use crate::{
    Cli, CliError, Command, EffectsArgs, EvaluateArgs, HistoryCommand, IngestArgs, PredictArgs, QuantizeCommand,
    SimulateArgs, TrainArgs,
};

/// File stem of the checkpoint inside a model directory.
const CHECKPOINT: &str = "model";

type Outcome = Result<(), CliError>;

pub fn run(cli: Cli) -> Outcome {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.factorization.seed = seed;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(h) = cli.horizons {
        cfg.horizons = h;
    }
    cfg.validate()?;
    match cli.command {
        Command::Simulate(a) => simulate(&cfg, a),
        Command::Ingest(a) => ingest(a),
        Command::Quantize(c) => quantize(&cfg, c),
        Command::History(c) => history(&cfg, c),
        Command::Train(a) => train_cmd(cfg, a),
        Command::Predict(a) => predict_cmd(&cfg, a),
        Command::Evaluate(a) => evaluate_cmd(&cfg, a),
        Command::Effects(a) => effects(&cfg, a),
    }
}

fn simulate(cfg: &RunConfig, a: SimulateArgs) -> Outcome {
    let p = a.features.or(cfg.model.as_ref().map(|m| m.n_features)).unwrap_or(cfg.n_features);
    let model = cfg.model_for(p)?;
    let s = &cfg.simulate;
    let spec = GeneratorSpec {
        truth: TrueParameters::random(&model, &s.truth, cfg.seed)?,
        model,
        n: a.n.unwrap_or(s.n),
        feature_prob: s.feature_prob,
        severity_weights: s.severity_weights.clone(),
        severity_sd: s.severity_sd,
        confounding: a.confounding.unwrap_or(s.confounding),
        severity_hazard: s.severity_hazard,
        censor_window: s.censor_window,
        admit_span: s.admit_span,
        seed: cfg.seed.wrapping_add(1),
    };
    let data = generate(&spec)?;
    write_jsonl(&a.out, &data.episodes)?;
    data.manifest.save(&a.truth)?;
    log::info!(
        "simulated {} episodes, {:.1}% censored",
        data.episodes.len(),
        100.0 * data.manifest.censored_fraction
    );
    Ok(())
}

#[derive(Deserialize)]
struct DeathRow {
    person_id: String,
    death_date: String,
}

#[derive(Serialize)]
struct StagedRejection<'a> {
    stage: &'a str,
    #[serde(flatten)]
    rejection: Rejection,
}

fn ingest(a: IngestArgs) -> Outcome {
    let (claims, read_rejects) = read_claims(&a.claims)?;
    let grouping = group_claims(&claims);
    let mut deaths: HashMap<String, Day> = HashMap::new();
    if let Some(path) = &a.deaths {
        for row in csv::Reader::from_path(path)?.deserialize::<DeathRow>() {
            let row = row?;
            let day = parse_day(&row.death_date)?;
            let slot = deaths.entry(row.person_id).or_insert(day);
            *slot = (*slot).min(day);
        }
    }
    let unplanned: Vec<bool> = grouping.episodes.iter().map(|e| e.unplanned).collect();
    let outcomes = compute_wait(&grouping.episodes, &unplanned, &deaths, parse_day(&a.observation_end)?)?;
    let attributes: Vec<EpisodeAttributes> = read_jsonl(&a.attributes)?;
    let (records, join_rejects) = build_episode_records(&grouping.episodes, &outcomes, &attributes)?;

    if let Some(path) = &a.rejections {
        let staged: Vec<StagedRejection> = [("read", read_rejects), ("group", grouping.rejected), ("join", join_rejects)]
            .into_iter()
            .flat_map(|(stage, rs)| rs.into_iter().map(move |rejection| StagedRejection { stage, rejection }))
            .collect();
        write_jsonl(path, &staged)?;
    }
    match (&a.split_date, &a.out_test) {
        (Some(date), Some(test_path)) => {
            let (train_set, test_set) = temporal_split(records, parse_day(date)?);
            write_jsonl(&a.out, &train_set)?;
            write_jsonl(test_path, &test_set)?;
            log::info!("wrote {} training and {} test episodes", train_set.len(), test_set.len());
        }
        _ => {
            write_jsonl(&a.out, &records)?;
            log::info!("wrote {} episodes", records.len());
        }
    }
    Ok(())
}

fn quantize(cfg: &RunConfig, c: QuantizeCommand) -> Outcome {
    match c {
        QuantizeCommand::Fit { input, out, percentiles } => {
            let table = NumericTable::read_csv(&input)?;
            let (map, report) = fit_map(&table, percentiles.as_deref().unwrap_or(&cfg.percentiles))?;
            for name in &report.dropped_constant {
                log::warn!("feature `{name}` is constant and was dropped");
            }
            map.save(&out)?;
            log::info!("{} features mapped to {} columns", map.features.len(), map.n_columns());
        }
        QuantizeCommand::Apply { input, map, out } => {
            let table = NumericTable::read_csv(&input)?;
            transform_table(&table, &QuantizationMap::load(&map)?)?.write_csv(&out)?;
        }
    }
    Ok(())
}

fn history(cfg: &RunConfig, c: HistoryCommand) -> Outcome {
    match c {
        HistoryCommand::Fit { counts, out, latent_dim, sparsity, report } => {
            let (_, counts) = CountMatrix::read_csv(&counts)?;
            let mut fc = cfg.factorization.clone();
            fc.latent_dim = latent_dim.unwrap_or(fc.latent_dim);
            fc.sparsity_weight = sparsity.unwrap_or(fc.sparsity_weight);
            let encoder = HistoryEncoder::fit(&counts, &fc)?;
            encoder.save(&out)?;
            if let Some(path) = report {
                write_json(&encoder.sparsity_report(1e-3), &path)?;
            }
        }
        HistoryCommand::Encode { counts, encoder, out } => {
            let encoder = HistoryEncoder::load(&encoder)?;
            let (ids, counts) = CountMatrix::read_csv(&counts)?;
            if counts.names != encoder.feature_names {
                return Err(CliError::Data("count columns differ from the encoder's features".into()));
            }
            let mut w = csv::Writer::from_path(&out)?;
            let mut header: Vec<String> = Vec::new();
            if ids.is_some() {
                header.push("episode_id".into());
            }
            header.extend((0..encoder.model.latent_dim).map(|k| format!("z{k}")));
            header.push("history_group".into());
            w.write_record(&header)?;
            for (i, row) in counts.rows.iter().enumerate() {
                let z = encode_history(row, &encoder.model)?;
                let mut rec: Vec<String> = Vec::new();
                if let Some(ids) = &ids {
                    rec.push(ids[i].to_string());
                }
                rec.extend(z.iter().map(f64::to_string));
                rec.push(encoder.rule.assign(&z).to_string());
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>, CliError> {
    let episodes: Vec<EpisodeRecord> = read_jsonl(path)?;
    if episodes.is_empty() {
        return Err(CliError::Data(format!("{}: no episodes", path.display())));
    }
    Ok(episodes)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    epochs: usize,
    best_epoch: usize,
    best_loss: f64,
    stop: StopReason,
    skipped_steps: usize,
    config: &'a TrainConfig,
}

fn train_cmd(mut cfg: RunConfig, a: TrainArgs) -> Outcome {
    let episodes = read_episodes(&a.episodes)?;
    let model = cfg.model_for(episodes[0].covariates.len())?;
    let t = &mut cfg.train;
    t.max_epochs = a.epochs.unwrap_or(t.max_epochs);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.initial_lr = a.lr.unwrap_or(t.initial_lr);
    t.param_sample_size = a.samples.unwrap_or(t.param_sample_size);
    t.threads = cfg.threads;
    t.validate()?;

    let layout = ModelLayout::new(&model)?;
    let mut posterior = VariationalPosterior::new(layout.blocks(), t.init())?;
    if a.warm_start || cfg.warm_start {
        layout.warm_start(&model, &episodes, &mut posterior.mean)?;
    }
    let joint = JointModel::with_threads(model.clone(), &episodes, t.threads)?;
    log::info!("training {} parameters on {} episodes", layout.dim, episodes.len());
    let outcome = train(&joint, posterior, t)?;

    std::fs::create_dir_all(&a.out_dir)?;
    FittedModel::new(model, outcome.posterior)?.save(&a.out_dir, CHECKPOINT)?;
    write_log(&outcome.log, BufWriter::new(File::create(a.out_dir.join("train_log.csv"))?))?;
    let summary = TrainSummary {
        epochs: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        best_loss: outcome.log[outcome.best_epoch - 1].mean_loss,
        stop: outcome.stop,
        skipped_steps: outcome.skipped_steps,
        config: t,
    };
    write_json(&summary, &a.out_dir.join("train_summary.json"))?;
    Ok(())
}

fn predict_cmd(cfg: &RunConfig, a: PredictArgs) -> Outcome {
    let fitted = FittedModel::load(&a.checkpoint, CHECKPOINT)?;
    let episodes = read_episodes(&a.episodes)?;
    let preds = predict(&fitted.mean_parameters(), &episodes, &cfg.horizons)?;
    write_predictions(&preds, &cfg.horizons, BufWriter::new(File::create(&a.out)?))?;
    Ok(())
}

fn evaluate_cmd(cfg: &RunConfig, a: EvaluateArgs) -> Outcome {
    let episodes = read_episodes(&a.episodes)?;
    let (horizons, preds) = read_predictions(File::open(&a.predictions)?)?;
    let mut by_id: HashMap<u64, Prediction> = preds.into_iter().map(|p| (p.episode_id, p)).collect();
    let aligned = episodes
        .iter()
        .map(|e| {
            by_id
                .remove(&e.episode_id)
                .ok_or_else(|| CliError::Data(format!("no prediction for episode {}", e.episode_id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let resamples = a.resamples.unwrap_or(cfg.bootstrap_resamples);
    let report = evaluate(&episodes, &aligned, &horizons, resamples, cfg.seed)?;
    write_json(&report, &a.out)?;
    Ok(())
}

fn effects(cfg: &RunConfig, a: EffectsArgs) -> Outcome {
    let fitted = FittedModel::load(&a.checkpoint, CHECKPOINT)?;
    let summary = cohort_effect_summary(&fitted, a.draws.unwrap_or(cfg.draws), cfg.seed)?;
    let out = BufWriter::new(File::create(&a.out)?);
    if a.long {
        summary.write_long_csv(out)?;
    } else {
        summary.write_wide_csv(out)?;
    }
    if let Some(path) = &a.baseline {
        let rows = baseline_hazard_report(&fitted);
        write_baseline_csv(&fitted.spec, &rows, BufWriter::new(File::create(path)?))?;
    }
    Ok(())
}
