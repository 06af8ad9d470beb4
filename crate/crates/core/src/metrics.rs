//! Evaluation metrics and per-utterance reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SDR_CAP_DB: f64 = 60.0;
pub const DECAY_CAP_DB: f64 = 80.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_lengths(reference: &[f64], estimate: &[f64]) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::Shape(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    Ok(())
}

fn ratio_db(num: f64, den: f64, cap: f64) -> f64 {
    if den <= 0.0 {
        return cap;
    }
    if num <= 0.0 {
        return -cap;
    }
    (10.0 * (num / den).log10()).clamp(-cap, cap)
}

/// Scale-invariant SDR in dB, clamped to ±60.
pub fn sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_lengths(reference, estimate)?;
    let energy = dot(reference, reference);
    if energy <= 0.0 {
        return Err(Error::Input("SDR needs a non-zero reference".into()));
    }
    let alpha = dot(estimate, reference) / energy;
    let target_energy = alpha * alpha * energy;
    let residual: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, e)| (alpha * s - e).powi(2))
        .sum();
    Ok(ratio_db(target_energy, residual, SDR_CAP_DB))
}

/// Plain SNR `10·log10(‖s‖² / ‖s − ŝ‖²)`, clamped to ±60 dB.
pub fn snr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_lengths(reference, estimate)?;
    let energy = dot(reference, reference);
    if energy <= 0.0 {
        return Err(Error::Input("SNR needs a non-zero reference".into()));
    }
    let residual: f64 = reference.iter().zip(estimate).map(|(s, e)| (s - e).powi(2)).sum();
    Ok(ratio_db(energy, residual, SDR_CAP_DB))
}

/// Energy decay of `estimate` relative to the reference-channel mixture, capped at 80 dB.
pub fn energy_decay(mixture_ref: &[f64], estimate: &[f64]) -> Result<f64> {
    check_lengths(mixture_ref, estimate)?;
    let mix = dot(mixture_ref, mixture_ref);
    if mix <= 0.0 {
        return Err(Error::Input("energy decay needs a non-zero mixture".into()));
    }
    let out = dot(estimate, estimate);
    Ok(ratio_db(mix, out, DECAY_CAP_DB).min(DECAY_CAP_DB))
}

/// One evaluated utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub scene_id: String,
    pub q: usize,
    pub sdr: Option<f64>,
    pub decay: Option<f64>,
}

impl UtteranceScore {
    /// Scores by the metric that applies to `q`: decay for silence targets, SDR otherwise.
    pub fn evaluate(
        scene_id: impl Into<String>,
        q: usize,
        mixture_ref: &[f64],
        target: &[f64],
        estimate: &[f64],
    ) -> Result<Self> {
        let (sdr, decay) = if q == 0 {
            (None, Some(energy_decay(mixture_ref, estimate)?))
        } else {
            (Some(sdr(target, estimate)?), None)
        };
        Ok(Self {
            scene_id: scene_id.into(),
            q,
            sdr,
            decay,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub count: usize,
    pub mean_sdr: Option<f64>,
    pub mean_decay: Option<f64>,
    pub stoi: String,
    pub pesq: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub system: String,
    pub rows: Vec<UtteranceScore>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Report {
    pub fn new(system: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            rows: Vec::new(),
        }
    }

    /// Aggregates by `Q`, keyed `"Q=0"`, `"Q=1"`, ...
    pub fn summary(&self) -> BTreeMap<String, GroupSummary> {
        let mut groups: BTreeMap<usize, Vec<&UtteranceScore>> = BTreeMap::new();
        for row in &self.rows {
            groups.entry(row.q).or_default().push(row);
        }
        groups
            .into_iter()
            .map(|(q, rows)| {
                (
                    format!("Q={q}"),
                    GroupSummary {
                        count: rows.len(),
                        mean_sdr: mean(rows.iter().filter_map(|r| r.sdr)),
                        mean_decay: mean(rows.iter().filter_map(|r| r.decay)),
                        stoi: "n/a".into(),
                        pesq: "n/a".into(),
                    },
                )
            })
            .collect()
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({ "system": self.system, "groups": self.summary() })
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        let mut out = String::from("scene_id,q,sdr_db,decay_db,stoi,pesq\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},n/a,n/a", r.scene_id, r.q, fmt(r.sdr), fmt(r.decay));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn sdr_caps_and_scale_invariance() {
        let s = noise(1000, 1);
        assert_eq!(sdr(&s, &s).unwrap(), 60.0);
        let doubled: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert_eq!(sdr(&s, &doubled).unwrap(), 60.0);
        assert!(sdr(&[0.0; 10], &[1.0; 10]).is_err());
        assert!(sdr(&s, &s[..10]).is_err());
    }

    #[test]
    fn sdr_orthogonal_perturbation() {
        let s = noise(4000, 2);
        let mut e = noise(4000, 3);
        // Gram-Schmidt against s, then scale to ‖s‖²/10.
        let proj = dot(&e, &s) / dot(&s, &s);
        e.iter_mut().zip(&s).for_each(|(x, y)| *x -= proj * y);
        let scale = (dot(&s, &s) / 10.0 / dot(&e, &e)).sqrt();
        let est: Vec<f64> = s.iter().zip(&e).map(|(a, b)| a + scale * b).collect();
        assert!((sdr(&s, &est).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn decay_examples() {
        let y = noise(1000, 4);
        assert!(energy_decay(&y, &y).unwrap().abs() < 1e-12);
        let tenth: Vec<f64> = y.iter().map(|v| 0.1 * v).collect();
        assert!((energy_decay(&y, &tenth).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(energy_decay(&y, &vec![0.0; 1000]).unwrap(), 80.0);
    }

    #[test]
    fn snr_definition() {
        let s = noise(2000, 5);
        let e = noise(2000, 6);
        let scale = (dot(&s, &s) / 100.0 / dot(&e, &e)).sqrt();
        let est: Vec<f64> = s.iter().zip(&e).map(|(a, b)| a + scale * b).collect();
        assert!((snr(&s, &est).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn report_groups_by_q() {
        let mut report = Report::new("mixture");
        report.rows.push(UtteranceScore {
            scene_id: "a".into(),
            q: 0,
            sdr: None,
            decay: Some(10.0),
        });
        report.rows.push(UtteranceScore {
            scene_id: "b".into(),
            q: 1,
            sdr: Some(2.0),
            decay: None,
        });
        report.rows.push(UtteranceScore {
            scene_id: "c".into(),
            q: 1,
            sdr: Some(4.0),
            decay: None,
        });
        let s = report.summary();
        assert_eq!(s["Q=0"].mean_decay, Some(10.0));
        assert_eq!(s["Q=1"].mean_sdr, Some(3.0));
        assert_eq!(s["Q=1"].count, 2);
        assert_eq!(s["Q=1"].stoi, "n/a");
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().starts_with("b,1,2.0000,"));
    }

    proptest! {
        #[test]
        fn sdr_positive_scale_invariant(seed in 0u64..1000, g in 0.01f64..100.0) {
            let s = noise(500, seed);
            let e = noise(500, seed + 7);
            let est: Vec<f64> = s.iter().zip(&e).map(|(a, b)| a + 0.3 * b).collect();
            let scaled: Vec<f64> = est.iter().map(|v| g * v).collect();
            prop_assert!((sdr(&s, &est).unwrap() - sdr(&s, &scaled).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn decay_shifts_with_gain(seed in 0u64..1000, g in 0.05f64..20.0) {
            let y = noise(500, seed);
            let est: Vec<f64> = noise(500, seed + 1).iter().map(|v| 0.3 * v).collect();
            let scaled: Vec<f64> = est.iter().map(|v| g * v).collect();
            let a = energy_decay(&y, &est).unwrap();
            let b = energy_decay(&y, &scaled).unwrap();
            prop_assert!((a - b - 20.0 * g.log10()).abs() < 1e-9);
        }
    }
}
