use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use region_extract::acoustic_sim::ManifestEntry;
use region_extract::geometry::{MicArray, PairSelection};
use region_extract::network::{AdamW, ConicalScheme, Model};
use region_extract::region_features::{AggregationMethod, SamplingStrategy};
use serde::Serialize;

use super::evaluate::{evaluate_entries, with_extension, System};
use super::extract::Models;
use super::train::{train_loop, write_atomic, DataSource};
use crate::config::Config;
use crate::data::{derive_seed, resolve_corpus, scene_id, SceneSource, STREAM_EVAL, STREAM_INIT};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Sampling,
    Aggregation,
    Mics,
    Diameter,
}

impl std::str::FromStr for Dimension {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampling" => Ok(Self::Sampling),
            "aggregation" => Ok(Self::Aggregation),
            "mics" => Ok(Self::Mics),
            "diameter" => Ok(Self::Diameter),
            other => Err(CliError::Config(format!("unknown ablation dimension '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayFamily {
    Linear,
    Circular,
}

impl std::str::FromStr for ArrayFamily {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "circular" => Ok(Self::Circular),
            other => Err(CliError::Config(format!("unknown array family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub label: String,
    pub sampling: Option<SamplingStrategy>,
    pub aggregation: Option<AggregationMethod>,
    pub array: Option<MicArray>,
}

impl GridRow {
    fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            sampling: None,
            aggregation: None,
            array: None,
        }
    }
}

/// Indices of `n` microphones spread evenly over `0..total`.
pub fn spread_subset(total: usize, n: usize, circular: bool) -> Vec<usize> {
    let span = if circular { total as f64 } else { (total - 1) as f64 };
    let denom = if circular { n as f64 } else { (n - 1).max(1) as f64 };
    (0..n)
        .map(|i| ((i as f64 * span / denom).round() as usize).min(total - 1))
        .collect()
}

pub fn grid(dimension: Dimension, family: ArrayFamily) -> Result<Vec<GridRow>> {
    Ok(match dimension {
        Dimension::Sampling => {
            let mut rows: Vec<GridRow> = [10.0, 15.0, 20.0]
                .iter()
                .map(|&step| GridRow {
                    sampling: Some(SamplingStrategy::FixedInterval { step }),
                    ..GridRow::new(format!("Interval / {step}°"))
                })
                .collect();
            rows.extend([3, 4, 6, 8].iter().map(|&count| GridRow {
                sampling: Some(SamplingStrategy::FixedNumber { count }),
                ..GridRow::new(format!("Number / {count}"))
            }));
            rows
        }
        Dimension::Aggregation => AggregationMethod::ALL
            .iter()
            .map(|&m| GridRow {
                aggregation: Some(m),
                ..GridRow::new(m.name())
            })
            .collect(),
        Dimension::Mics => {
            let (base, counts, circular) = match family {
                ArrayFamily::Linear => (MicArray::preset("lin8_22.5cm")?, vec![2, 4, 8], false),
                ArrayFamily::Circular => (MicArray::preset("circ8_5cm")?, vec![3, 4, 6, 8], true),
            };
            counts
                .into_iter()
                .map(|n| {
                    Ok(GridRow {
                        array: Some(base.subset(&spread_subset(8, n, circular))?),
                        ..GridRow::new(format!("{n} mic"))
                    })
                })
                .collect::<Result<_>>()?
        }
        Dimension::Diameter => [15.0, 10.0, 7.0, 5.0]
            .iter()
            .map(|&cm| {
                Ok(GridRow {
                    array: Some(MicArray::circular(8, cm / 100.0)?),
                    ..GridRow::new(format!("d={cm} cm"))
                })
            })
            .collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone)]
pub struct AblateArgs {
    pub config: Option<PathBuf>,
    pub dimension: Dimension,
    pub family: ArrayFamily,
    pub seed: u64,
    pub steps: Option<usize>,
    pub repeats: Option<usize>,
    pub eval_scenes: Option<usize>,
    /// Writes `<out>.md`, `<out>.csv` and `<out>.json`.
    pub out: PathBuf,
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Self {
            mean,
            std: var.sqrt(),
            n,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RowResult {
    pub label: String,
    pub parameters: usize,
    pub decay_q0: Option<Stat>,
    pub sdr_q1: Option<Stat>,
    pub sdr_q2: Option<Stat>,
}

struct RunMetrics {
    parameters: usize,
    decay_q0: Option<f64>,
    sdr_q1: Option<f64>,
    sdr_q2: Option<f64>,
}

fn run_one(
    cfg: &Config,
    row: &GridRow,
    steps: usize,
    eval_scenes: usize,
    seed: u64,
    repeat: usize,
    corpus: Option<&region_extract::acoustic_sim::Corpus>,
) -> Result<RunMetrics> {
    let mut sim = cfg.simulation.sim_config()?;
    let array = row.array.clone().unwrap_or_else(|| sim.array.clone());
    sim.array = array.clone();
    let mut model_cfg = cfg.model.model_config(array)?;
    if row.array.is_some() {
        model_cfg.pairs = PairSelection::All;
    }
    if let Some(s) = row.sampling {
        model_cfg.sampling = s;
    }
    if let Some(a) = row.aggregation {
        model_cfg.aggregation = a;
    }
    model_cfg.validate()?;
    let repeat_seed = derive_seed(seed, STREAM_INIT, repeat as u64);
    let mut model = Model::new(model_cfg, repeat_seed)?;
    let mut section = cfg.training.clone();
    section.steps = steps;
    section.log_every = 0;
    let mut opt = AdamW::new(section.optimizer()?, &model.params);
    let source = SceneSource {
        section: cfg.simulation.clone(),
        config: sim,
        corpus: corpus.cloned(),
    };
    let data = DataSource::OnTheFly(Box::new(source));
    train_loop(
        &mut model,
        &mut opt,
        &data,
        &section,
        repeat_seed,
        0,
        steps as u64,
        |_, _, _| Ok(()),
    )?;
    let DataSource::OnTheFly(source) = data else {
        unreachable!()
    };
    let entries: Vec<ManifestEntry> = (0..eval_scenes)
        .map(|i| {
            Ok(ManifestEntry {
                id: scene_id(i),
                scene: source.scene(derive_seed(seed, STREAM_EVAL, i as u64))?,
                mixture: None,
                target: None,
            })
        })
        .collect::<Result<_>>()?;
    let parameters = model.num_parameters();
    let models = Models::single(model);
    let report = evaluate_entries(
        &entries,
        System::Model,
        Some(&models),
        ConicalScheme::Intersection,
        "model",
    )?;
    let summary = report.summary();
    let group = |q: usize| summary.get(&format!("Q={q}"));
    Ok(RunMetrics {
        parameters,
        decay_q0: group(0).and_then(|g| g.mean_decay),
        sdr_q1: group(1).and_then(|g| g.mean_sdr),
        sdr_q2: group(2).and_then(|g| g.mean_sdr),
    })
}

pub fn markdown(rows: &[RowResult]) -> String {
    let fmt = |s: &Option<Stat>| s.map_or("n/a".to_string(), |s| format!("{:.2}±{:.2}", s.mean, s.std));
    let mut out =
        String::from("| config | params | Decay Q=0 (dB) | SDR Q=1 (dB) | SDR Q=2 (dB) |\n|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            r.label,
            r.parameters,
            fmt(&r.decay_q0),
            fmt(&r.sdr_q1),
            fmt(&r.sdr_q2)
        );
    }
    out
}

pub fn csv(rows: &[RowResult]) -> String {
    let fmt = |s: &Option<Stat>| s.map_or(",".to_string(), |s| format!("{},{}", s.mean, s.std));
    let mut out =
        String::from("config,params,decay_q0_mean,decay_q0_std,sdr_q1_mean,sdr_q1_std,sdr_q2_mean,sdr_q2_std\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.label,
            r.parameters,
            fmt(&r.decay_q0),
            fmt(&r.sdr_q1),
            fmt(&r.sdr_q2)
        );
    }
    out
}

pub fn run(args: &AblateArgs) -> Result<Vec<RowResult>> {
    let cfg = Config::load(args.config.as_deref())?;
    let steps = args.steps.unwrap_or(cfg.training.steps);
    let repeats = args.repeats.unwrap_or(cfg.evaluation.repeats).max(1);
    let eval_scenes = args.eval_scenes.unwrap_or(cfg.evaluation.scenes);
    let corpus = resolve_corpus(args.corpus.as_deref())?;
    let rows = grid(args.dimension, args.family)?;
    let jobs: Vec<(usize, usize)> = (0..rows.len())
        .flat_map(|r| (0..repeats).map(move |k| (r, k)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(r, k)| run_one(&cfg, &rows[r], steps, eval_scenes, args.seed, k, corpus.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<RowResult> = rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let mine: Vec<&RunMetrics> = runs.iter().skip(r * repeats).take(repeats).collect();
            let collect =
                |f: fn(&RunMetrics) -> Option<f64>| Stat::of(&mine.iter().filter_map(|m| f(m)).collect::<Vec<_>>());
            RowResult {
                label: row.label.clone(),
                parameters: mine[0].parameters,
                decay_q0: collect(|m| m.decay_q0),
                sdr_q1: collect(|m| m.sdr_q1),
                sdr_q2: collect(|m| m.sdr_q2),
            }
        })
        .collect();
    write_atomic(&with_extension(&args.out, "md"), markdown(&results).as_bytes())?;
    write_atomic(&with_extension(&args.out, "csv"), csv(&results).as_bytes())?;
    let json = serde_json::to_vec_pretty(&results).map_err(region_extract::error::Error::from)?;
    write_atomic(&with_extension(&args.out, "json"), &json)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_grid_has_seven_rows() {
        let rows = grid(Dimension::Sampling, ArrayFamily::Linear).unwrap();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0].label, "Interval / 10°");
        assert_eq!(rows[6].label, "Number / 8");
    }

    #[test]
    fn mic_grids() {
        let linear = grid(Dimension::Mics, ArrayFamily::Linear).unwrap();
        let counts: Vec<usize> = linear.iter().map(|r| r.array.as_ref().unwrap().num_mics()).collect();
        assert_eq!(counts, vec![2, 4, 8]);
        for r in &linear {
            let a = r.array.as_ref().unwrap();
            assert!((a.max_pairwise_distance() - 0.225).abs() < 1e-9);
        }
        let circular = grid(Dimension::Mics, ArrayFamily::Circular).unwrap();
        assert_eq!(
            circular
                .iter()
                .map(|r| r.array.as_ref().unwrap().num_mics())
                .collect::<Vec<_>>(),
            vec![3, 4, 6, 8]
        );
        assert_eq!(spread_subset(8, 4, true), vec![0, 2, 4, 6]);
        assert_eq!(spread_subset(8, 2, false), vec![0, 7]);
        let d = grid(Dimension::Diameter, ArrayFamily::Circular).unwrap();
        assert!((d[0].array.as_ref().unwrap().max_pairwise_distance() - 0.15).abs() < 1e-9);
    }

    #[test]
    fn stat_uses_sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-12);
        assert_eq!(Stat::of(&[4.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }
}
