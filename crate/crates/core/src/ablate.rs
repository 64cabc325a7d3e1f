//! Multi-seed ablation sweeps.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Stage;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::stylize::StyleMethod;
use crate::trainer::{fit, TrainConfig, TrainMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// baseline, aug + ISG, IL + ISG.
    Components,
    /// Every stylizer under aug and under IL.
    Stylizers,
    /// IL against the forward-forward-backward ordering.
    Order,
    /// ISG after each backbone stage, plus the baseline.
    Position,
    /// Activation probability sweep under aug and under IL.
    Prob,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Components, Suite::Stylizers, Suite::Order, Suite::Position, Suite::Prob];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Components => "components",
            Suite::Stylizers => "stylizers",
            Suite::Order => "order",
            Suite::Position => "position",
            Suite::Prob => "prob",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config(format!("unknown suite {s:?}")))
    }
}

pub const PROBABILITIES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// A named training configuration inside a suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

fn variant(name: impl Into<String>, base: &TrainConfig, mode: TrainMode, f: impl FnOnce(&mut TrainConfig)) -> Variant {
    let mut config = TrainConfig { mode, ..base.clone() };
    config.stylizer.method = StyleMethod::Isg;
    config.stylizer.p = mode.default_probability();
    f(&mut config);
    Variant { name: name.into(), config }
}

/// Variants of `suite` derived from `base` (whose mode and stylizer are
/// overridden per variant).
pub fn variants(suite: Suite, base: &TrainConfig) -> Vec<Variant> {
    let keep = |_: &mut TrainConfig| {};
    match suite {
        Suite::Components => vec![
            variant("baseline", base, TrainMode::Baseline, keep),
            variant("aug+isg", base, TrainMode::Aug, keep),
            variant("il+isg", base, TrainMode::Il, keep),
        ],
        Suite::Stylizers => [TrainMode::Aug, TrainMode::Il]
            .into_iter()
            .flat_map(|mode| {
                StyleMethod::ALL.into_iter().map(move |m| {
                    variant(format!("{}+{}", mode.name(), m.name()), base, mode, |c| c.stylizer.method = m)
                })
            })
            .collect(),
        Suite::Order => vec![
            variant("il", base, TrainMode::Il, keep),
            variant("il_ffb", base, TrainMode::IlFfb, keep),
        ],
        Suite::Position => std::iter::once(variant("baseline", base, TrainMode::Baseline, keep))
            .chain(Stage::ALL.into_iter().map(|s| variant(format!("il@{}", s.name()), base, TrainMode::Il, |c| c.insertion = s)))
            .collect(),
        Suite::Prob => [TrainMode::Aug, TrainMode::Il]
            .into_iter()
            .flat_map(|mode| {
                PROBABILITIES
                    .into_iter()
                    .map(move |p| variant(format!("{}@p={p}", mode.name()), base, mode, |c| c.stylizer.p = p))
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mode: TrainMode,
    pub method: StyleMethod,
    pub insertion: Stage,
    pub p: f64,
    pub seed: u64,
    pub map_target: f64,
    pub rank1_target: f64,
    pub final_loss: Option<f64>,
}

/// Trains every variant once per seed. Runs are independent and spread
/// over the rayon pool; rows come back in (variant, seed) order.
pub fn run(variants: &[Variant], seeds: &[u64], data: &Dataset) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(&Variant, u64)> = variants.iter().flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    jobs.par_iter()
        .map(|&(v, seed)| {
            let config = TrainConfig { seed, ..v.config.clone() };
            let out = fit(&config, data, |_| Ok(()))?;
            let last = out.metrics.last().expect("fit emits at least one record");
            Ok(AblationRow {
                variant: v.name.clone(),
                mode: config.mode,
                method: config.stylizer.method,
                insertion: config.insertion,
                p: config.stylizer.p,
                seed,
                map_target: last.map_target,
                rank1_target: last.rank1_target,
                final_loss: last.mean_loss,
            })
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: usize,
    pub median_map: f64,
    pub median_rank1: f64,
}

/// Per-variant medians, in first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<VariantSummary> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&AblationRow>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(r.variant.as_str()) {
            order.push(&r.variant);
        }
        groups.entry(&r.variant).or_default().push(r);
    }
    order
        .into_iter()
        .map(|name| {
            let g = &groups[name];
            VariantSummary {
                variant: name.to_string(),
                seeds: g.len(),
                median_map: median(&mut g.iter().map(|r| r.map_target).collect::<Vec<_>>()),
                median_rank1: median(&mut g.iter().map(|r| r.rank1_target).collect::<Vec<_>>()),
            }
        })
        .collect()
}

pub fn write_rows_csv(rows: &[AblationRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "variant,mode,method,insertion,p,seed,map_target,rank1_target,final_loss")?;
    for r in rows {
        let loss = r.final_loss.map(|l| format!("{l:.6}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{:.6},{:.6},{loss}",
            r.variant,
            r.mode.name(),
            r.method.name(),
            r.insertion.name(),
            r.p,
            r.seed,
            r.map_target,
            r.rank1_target
        )?;
    }
    Ok(())
}

pub fn write_summary_csv(summary: &[VariantSummary], w: &mut impl Write) -> Result<()> {
    writeln!(w, "variant,seeds,median_map,median_rank1")?;
    for s in summary {
        writeln!(w, "{},{},{:.6},{:.6}", s.variant, s.seeds, s.median_map, s.median_rank1)?;
    }
    Ok(())
}
