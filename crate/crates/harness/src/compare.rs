//! Paired baseline comparison on random MDPs.
//!
//! Every method sees the same MDP instance and the same seed for each run and
//! the same step budget; rankings are by mean return at the end of the budget
//! and by area under the learning curve.

use std::collections::BTreeMap;

use decmarl::tabular::{self, TabularConfig};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExperimentKind, Method};
use crate::experiments::{self, Check, CurveStats, ExperimentOutput};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    #[serde(flatten)]
    pub stats: CurveStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSeed {
    pub seed: u64,
    pub random_policy_return: f64,
    pub methods: Vec<MethodResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub final_return_mean: f64,
    pub final_return_std: f64,
    pub auc_mean: f64,
    /// Seeds on which the final return exceeds the random-policy return.
    pub beats_random: usize,
}

/// Ranking report of [`compare_baselines`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub budget: u64,
    pub seeds: Vec<PairedSeed>,
    pub aggregate: BTreeMap<String, MethodAggregate>,
    /// For each other method, the seeds on which the first method's AUC is
    /// strictly higher.
    pub auc_wins: BTreeMap<String, usize>,
}

impl CompareReport {
    /// Plain-text table, one row per method.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>14} {:>12} {:>12} {:>8}\n",
            "method", "final_return", "std", "auc", ">random"
        );
        for (name, a) in &self.aggregate {
            out += &format!(
                "{:<14} {:>14.4} {:>12.4} {:>12.4} {:>5}/{}\n",
                name,
                a.final_return_mean,
                a.final_return_std,
                a.auc_mean,
                a.beats_random,
                self.seeds.len()
            );
        }
        out
    }
}

pub fn compare_report(config: &ExperimentConfig) -> Result<(CompareReport, Vec<(String, Vec<u8>)>), HarnessError> {
    config.validate()?;
    let exp = &config.tabular;
    let cmp = &config.compare;
    let budget = cmp.methods[0].steps;
    let mut seeds = Vec::new();
    let mut files = Vec::new();
    for &seed in &config.seeds {
        let mdp = experiments::build_mdp(exp, seed)?;
        let random = tabular::random_policy_return(&mdp, exp.train.episode_length)?;
        let threshold = exp.return_threshold.unwrap_or(random);
        let train = TabularConfig {
            seed,
            steps: budget,
            ..exp.train.clone()
        };
        let mut methods = Vec::new();
        for entry in &cmp.methods {
            let log = experiments::run_method(entry.method, &mdp, &train, cmp.epsilon, cmp.max_joint_actions)?;
            let rows: Vec<(u64, f64)> = log.curve.iter().map(|p| (p.step, p.mean_return)).collect();
            methods.push(MethodResult {
                method: entry.method,
                stats: CurveStats::from_rows(&rows, threshold),
            });
            files.push((
                format!("{}_seed_{seed}.csv", entry.method.name()),
                experiments::tabular_curve_csv(&log)?,
            ));
        }
        seeds.push(PairedSeed {
            seed,
            random_policy_return: random,
            methods,
        });
    }

    let mut aggregate = BTreeMap::new();
    for (k, entry) in cmp.methods.iter().enumerate() {
        let finals: Vec<f64> = seeds.iter().map(|s| s.methods[k].stats.final_return).collect();
        let aucs: Vec<f64> = seeds.iter().map(|s| s.methods[k].stats.auc).collect();
        aggregate.insert(
            entry.method.name().to_string(),
            MethodAggregate {
                final_return_mean: finals.iter().sum::<f64>() / finals.len() as f64,
                final_return_std: experiments::std_dev(&finals),
                auc_mean: aucs.iter().sum::<f64>() / aucs.len() as f64,
                beats_random: seeds
                    .iter()
                    .filter(|s| s.methods[k].stats.final_return > s.random_policy_return)
                    .count(),
            },
        );
    }
    let mut auc_wins = BTreeMap::new();
    for (k, entry) in cmp.methods.iter().enumerate().skip(1) {
        let wins = seeds
            .iter()
            .filter(|s| s.methods[0].stats.auc > s.methods[k].stats.auc)
            .count();
        auc_wins.insert(entry.method.name().to_string(), wins);
    }
    Ok((
        CompareReport {
            budget,
            seeds,
            aggregate,
            auc_wins,
        },
        files,
    ))
}

/// Runs every configured method on identical instances and checks that the
/// first one beats the random policy on every seed and out-ranks each method
/// in `must_beat` by AUC on a majority of seeds.
pub fn compare_baselines(config: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    let (report, files) = compare_report(config)?;
    let n = report.seeds.len();
    let lead = config.compare.methods[0].method;
    let lead_beats = report.aggregate[lead.name()].beats_random;
    let mut checks = vec![Check::new(
        "beats-random-policy",
        lead_beats == n,
        format!("{} ends above the random policy on {lead_beats}/{n} seeds", lead.name()),
    )];
    for other in &config.compare.must_beat {
        if *other == lead {
            continue;
        }
        let wins = report.auc_wins.get(other.name()).copied();
        checks.push(Check::new(
            &format!("auc-over-{}", other.name()),
            wins.is_some_and(|w| 2 * w > n),
            match wins {
                Some(w) => format!("higher AUC than {} on {w}/{n} seeds", other.name()),
                None => format!("{} was not run", other.name()),
            },
        ));
    }
    Ok(ExperimentOutput {
        kind: ExperimentKind::Compare,
        summary: serde_json::to_value(&report)?,
        checks,
        files,
    })
}
