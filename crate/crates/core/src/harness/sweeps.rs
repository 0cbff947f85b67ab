//! Data quantity and quality sweeps over the general preferences.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apeft::PreferenceRecord;
use crate::prefgen::{group_by_quality, subsample_quantity, DatasetGroup};
use crate::preflosses::LossKind;
use crate::tinylm::PolicyModel;

use super::{evaluate, tune_arm, EvalReport, ExperimentConfig, Result, World};

/// One metric of one tuned model in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep: String,
    pub group: String,
    pub size: usize,
    pub loss: LossKind,
    pub metric: String,
    pub value: f64,
}

fn run_groups(
    name: &str,
    cfg: &ExperimentConfig,
    world: &World,
    base: &PolicyModel,
    groups: &[DatasetGroup<PreferenceRecord>],
) -> Result<Vec<SweepRow>> {
    let jobs: Vec<(&DatasetGroup<PreferenceRecord>, LossKind)> = groups
        .iter()
        .flat_map(|g| cfg.sweeps.losses.iter().map(move |&l| (g, l)))
        .collect();
    let reports: Vec<EvalReport> = jobs
        .par_iter()
        .map(|(g, l)| {
            let out = tune_arm(cfg, &world.vocab, base, &g.items, *l)?;
            evaluate(&out.model, &world.vocab, &world.kb, &world.queries, &cfg.eval_spec())
        })
        .collect::<Result<_>>()?;
    Ok(jobs
        .iter()
        .zip(&reports)
        .flat_map(|((g, l), r)| {
            EvalReport::COLUMNS.iter().zip(r.values()).map(move |(m, v)| SweepRow {
                sweep: name.to_string(),
                group: g.label.clone(),
                size: g.items.len(),
                loss: *l,
                metric: m.to_string(),
                value: v,
            })
        })
        .collect())
}

/// Nested random subsets of the configured sizes; sizes larger than the
/// dataset are skipped.
pub fn sweep_quantity(cfg: &ExperimentConfig, world: &World, base: &PolicyModel, general: &[PreferenceRecord]) -> Result<Vec<SweepRow>> {
    let sizes: Vec<usize> = cfg.sweeps.quantity_sizes.iter().copied().filter(|&s| s <= general.len()).collect();
    let groups = subsample_quantity(general, &sizes, cfg.stream("sweep-quantity").key())?;
    run_groups("quantity", cfg, world, base, &groups)
}

/// Equal-size quality levels plus the mixed group.
pub fn sweep_quality(cfg: &ExperimentConfig, world: &World, base: &PolicyModel, general: &[PreferenceRecord]) -> Result<Vec<SweepRow>> {
    let groups = group_by_quality(general, cfg.stream("sweep-quality").key())?;
    run_groups("quality", cfg, world, base, &groups)
}

/// `<dir>/<name>.csv` with every row, and `<dir>/<name>/<metric>_<loss>.csv`
/// with one row per group.
pub fn write_sweep_csvs(rows: &[SweepRow], dir: &Path, name: &str) -> Result<()> {
    let mut wr = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    let sub = dir.join(name);
    std::fs::create_dir_all(&sub)?;
    let mut keys: Vec<(String, LossKind)> = rows.iter().map(|r| (r.metric.clone(), r.loss)).collect();
    keys.dedup();
    keys.sort_by(|a, b| (&a.0, a.1 as u8).cmp(&(&b.0, b.1 as u8)));
    keys.dedup();
    for (metric, loss) in keys {
        let mut wr = csv::Writer::from_path(sub.join(format!("{metric}_{loss}.csv")))?;
        wr.write_record(["group", "size", "value"])?;
        for r in rows.iter().filter(|r| r.metric == metric && r.loss == loss) {
            wr.serialize((&r.group, r.size, r.value))?;
        }
        wr.flush()?;
    }
    Ok(())
}
