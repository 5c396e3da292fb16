//! Four-variant ablation: baseline, +SU, +SC and the full method, each
//! trained on every seed and summarized by mean and standard deviation.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::mpsc;
use std::thread;

use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::{ensure_arg, Error, Result};
use crate::metrics::MetricsSummary;
use crate::synth::Dataset;
use crate::train::run_training;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    Baseline,
    Su,
    Sc,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Su, Variant::Sc, Variant::Full];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Su => "+SU",
            Variant::Sc => "+SC",
            Variant::Full => "+SU+SC",
        }
    }

    pub fn flags(&self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::Su => (true, false),
            Variant::Sc => (false, true),
            Variant::Full => (true, true),
        }
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let (su, sc) = self.flags();
        TrainConfig {
            enable_su: su,
            enable_sc: sc,
            ..cfg.clone()
        }
    }
}

/// Final held-out metrics of one (variant, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub summary: MetricsSummary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub dsc: MeanStd,
    pub jaccard: MeanStd,
    pub asd: Option<MeanStd>,
    pub hd: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub rows: Vec<VariantRow>,
}

impl AblationTable {
    pub fn from_runs(seeds: Vec<u64>, runs: Vec<AblationRun>) -> AblationTable {
        let rows = Variant::ALL
            .iter()
            .filter_map(|&v| {
                let mine: Vec<&MetricsSummary> = runs.iter().filter(|r| r.variant == v).map(|r| &r.summary).collect();
                let col = |f: fn(&MetricsSummary) -> Option<f64>| -> Vec<f64> { mine.iter().filter_map(|s| f(s)).collect() };
                Some(VariantRow {
                    variant: v,
                    dsc: MeanStd::of(&col(|s| Some(s.dsc)))?,
                    jaccard: MeanStd::of(&col(|s| Some(s.jaccard)))?,
                    asd: MeanStd::of(&col(|s| s.asd)),
                    hd: MeanStd::of(&col(|s| s.hd)),
                })
            })
            .collect();
        AblationTable { seeds, runs, rows }
    }

    pub fn row(&self, v: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Final DSC of one run.
    pub fn dsc(&self, v: Variant, seed: u64) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.variant == v && r.seed == seed)
            .map(|r| r.summary.dsc)
    }

    pub const CSV_HEADER: &'static str =
        "variant,dsc_mean,dsc_std,jaccard_mean,jaccard_std,asd_mean,asd_std,hd_mean,hd_std";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        let opt = |m: Option<MeanStd>| match m {
            Some(m) => format!("{:.6},{:.6}", m.mean, m.std),
            None => "NA,NA".to_string(),
        };
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{},{}",
                r.variant.name(),
                r.dsc.mean,
                r.dsc.std,
                r.jaccard.mean,
                r.jaccard.std,
                opt(r.asd),
                opt(r.hd)
            );
        }
        out
    }

    pub const RUNS_CSV_HEADER: &'static str = "variant,seed,dsc,jaccard,asd,hd";

    pub fn runs_csv(&self) -> String {
        let mut out = format!("{}\n", Self::RUNS_CSV_HEADER);
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"));
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{},{}",
                r.variant.name(),
                r.seed,
                r.summary.dsc,
                r.summary.jaccard,
                opt(r.summary.asd),
                opt(r.summary.hd)
            );
        }
        out
    }

    /// Fixed-width table, percentages for the overlap metrics.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>16} {:>16} {:>14} {:>14}",
            "variant", "DSC(%)", "Jaccard(%)", "ASD(voxel)", "HD(voxel)"
        );
        let pct = |m: MeanStd| format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std);
        let vox = |m: Option<MeanStd>| m.map_or_else(|| "n/a".into(), |m| format!("{:.2} ± {:.2}", m.mean, m.std));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>16} {:>16} {:>14} {:>14}",
                r.variant.name(),
                pct(r.dsc),
                pct(r.jaccard),
                vox(r.asd),
                vox(r.hd)
            );
        }
        let _ = write!(
            out,
            "seeds: {}",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")
        );
        out
    }
}

/// Trains every variant on every seed; `progress` sees each finished run.
///
/// Runs are independent, so up to `threads` of them train concurrently;
/// the table is identical for every thread count.
pub fn run_ablation(
    cfg: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    threads: usize,
    mut progress: impl FnMut(&AblationRun),
) -> Result<AblationTable> {
    ensure_arg!(seeds.len() >= 3, "an ablation needs at least 3 seeds, got {}", seeds.len());
    ensure_arg!(cfg.iterations > 0, "an ablation needs at least one iteration");
    let jobs: Vec<(u64, Variant)> = seeds
        .iter()
        .flat_map(|&seed| Variant::ALL.map(|v| (seed, v)))
        .collect();
    let one = |&(seed, v): &(u64, Variant)| -> Result<AblationRun> {
        let out = run_training(&v.apply(cfg), data, seed, None)?;
        let summary = out
            .final_summary
            .ok_or_else(|| Error::State("run finished without a final evaluation".into()))?;
        Ok(AblationRun {
            variant: v,
            seed,
            summary,
        })
    };

    let mut slots: Vec<Option<AblationRun>> = vec![None; jobs.len()];
    let workers = threads.clamp(1, jobs.len());
    if workers == 1 {
        for (slot, job) in slots.iter_mut().zip(&jobs) {
            let run = one(job)?;
            progress(&run);
            *slot = Some(run);
        }
    } else {
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<(usize, Result<AblationRun>)>();
        let outcome = thread::scope(|scope| -> Result<()> {
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, jobs, one) = (&next, &jobs, &one);
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, AtomicOrdering::Relaxed);
                    let Some(job) = jobs.get(i) else { break };
                    let res = one(job);
                    let failed = res.is_err();
                    if tx.send((i, res)).is_err() || failed {
                        // stop handing out work after a failure
                        next.store(jobs.len(), AtomicOrdering::Relaxed);
                        break;
                    }
                });
            }
            drop(tx);
            for (i, res) in rx {
                let run = res?;
                progress(&run);
                slots[i] = Some(run);
            }
            Ok(())
        });
        outcome?;
    }
    let runs = slots
        .into_iter()
        .map(|r| r.ok_or_else(|| Error::State("ablation run missing".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable::from_runs(seeds.to_vec(), runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(dsc: f64) -> MetricsSummary {
        MetricsSummary {
            dsc,
            jaccard: dsc / (2.0 - dsc),
            asd: Some(1.0),
            hd: None,
            cases: 1,
        }
    }

    #[test]
    fn table_aggregates_per_variant() {
        let runs: Vec<AblationRun> = [0.5, 0.7]
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| {
                Variant::ALL.iter().map(move |&v| AblationRun {
                    variant: v,
                    seed: i as u64,
                    summary: summary(d),
                })
            })
            .collect();
        let t = AblationTable::from_runs(vec![0, 1], runs);
        let row = t.row(Variant::Full).unwrap();
        assert!((row.dsc.mean - 0.6).abs() < 1e-12);
        assert!((row.dsc.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(row.hd.is_none());
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("baseline,0.600000,"));
        assert!(csv.contains("NA,NA"));
        assert!(t.to_text().contains("60.00 ± 14.14"));
    }

    #[test]
    fn thread_count_does_not_change_the_table() {
        let data = crate::synth::generate_dataset(
            &crate::synth::GeneratorConfig {
                height: 8,
                width: 8,
                depth: 4,
                n_labeled: 2,
                n_unlabeled: 2,
                n_eval: 1,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let cfg = TrainConfig {
            iterations: 3,
            decay_period: 3,
            k_neg: 4,
            ..TrainConfig::default()
        };
        let mut seen = 0;
        let serial = run_ablation(&cfg, &data, &[0, 1, 2], 1, |_| seen += 1).unwrap();
        let parallel = run_ablation(&cfg, &data, &[0, 1, 2], 3, |_| {}).unwrap();
        assert_eq!(seen, 12);
        assert_eq!(serial, parallel);
        assert_eq!(serial.to_csv(), parallel.to_csv());
        for r in &serial.runs {
            assert!((0.0..=1.0).contains(&r.summary.dsc));
        }
    }

    #[test]
    fn too_few_seeds_rejected() {
        let data = crate::synth::generate_dataset(
            &crate::synth::GeneratorConfig {
                height: 4,
                width: 4,
                depth: 2,
                n_labeled: 1,
                n_unlabeled: 1,
                n_eval: 1,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert!(run_ablation(&TrainConfig::default(), &data, &[1, 2], 1, |_| {}).is_err());
    }
}
