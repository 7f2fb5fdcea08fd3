//! Cartesian sweeps over adaptor options, one training run per cell.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use super::config::{apply_axis, normalize_block, Axis, RunConfig};
use super::report::{fmt_f, RunReport, Table};
use super::train::{train, Phase};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Cell {
    /// `(axis, value)` in axis order.
    pub setting: Vec<(String, String)>,
    pub config: RunConfig,
    pub trainable: usize,
    pub phase: Phase,
}

fn show(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        o => o.to_string(),
    }
}

/// Every combination of axis values, first axis slowest.
pub fn cartesian(axes: &[Axis]) -> Vec<Vec<(String, toml::Value)>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((axis.name.clone(), v.clone()));
                    p
                })
            })
            .collect();
    }
    out
}

pub fn cell_config(base: &RunConfig, setting: &[(String, toml::Value)]) -> Result<RunConfig> {
    let mut cfg = base.clone();
    for (name, v) in setting {
        apply_axis(&mut cfg, name, v)?;
    }
    normalize_block(&mut cfg.block);
    cfg.validate()?;
    Ok(cfg)
}

pub fn ablate(base: &RunConfig, out: Option<&Path>) -> Result<(RunReport, Vec<Cell>)> {
    let axes = &base.ablate.axes;
    if axes.iter().any(|a| a.values.is_empty()) {
        return Err(Error::Config("every ablation axis needs at least one value".into()));
    }
    let settings = cartesian(axes);
    // Fail on a bad cell before spending time on the others.
    let configs = settings
        .iter()
        .map(|s| cell_config(base, s))
        .collect::<Result<Vec<_>>>()?;
    let mut r = RunReport::new("ablate", base.seed);
    let mut cells = Vec::with_capacity(configs.len());
    for (setting, cfg) in settings.into_iter().zip(configs) {
        let t = Instant::now();
        let run = train(&cfg, out)?;
        let label: Vec<(String, String)> = setting.iter().map(|(k, v)| (k.clone(), show(v))).collect();
        let tag: Vec<String> = label.iter().map(|(k, v)| format!("{k}={v}")).collect();
        r.time(&tag.join(","), t.elapsed());
        cells.push(Cell {
            setting: label,
            trainable: run.model.store.trainable_count(),
            config: cfg,
            phase: run.phase,
        });
    }

    let names: Vec<&str> = axes.iter().map(|a| a.name.as_str()).collect();
    let mut header = names.clone();
    header.extend(["params", "final loss", "train acc", "test acc"]);
    let mut t = Table::new("ablation", &header);
    for c in &cells {
        let mut row: Vec<String> = c.setting.iter().map(|(_, v)| v.clone()).collect();
        row.extend([
            c.trainable.to_string(),
            fmt_f(c.phase.final_loss),
            fmt_f(c.phase.train_accuracy),
            fmt_f(c.phase.test_accuracy),
        ]);
        t.push(row);
    }
    r.kv("cells", cells.len());
    r.tables.push(t);

    if names.contains(&"seed") && names.len() > 1 {
        let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
        let mut order = Vec::new();
        for c in &cells {
            let key: Vec<String> = c
                .setting
                .iter()
                .filter(|(k, _)| k != "seed")
                .map(|(_, v)| v.clone())
                .collect();
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(c.phase.test_accuracy);
        }
        let mut header: Vec<&str> = names.iter().copied().filter(|n| *n != "seed").collect();
        header.extend(["seeds", "mean test acc"]);
        let mut m = Table::new("mean over seeds", &header);
        for key in order {
            let accs = &groups[&key];
            let mut row = key.clone();
            row.push(accs.len().to_string());
            row.push(fmt_f(accs.iter().sum::<f64>() / accs.len() as f64));
            m.push(row);
        }
        r.tables.push(m);
    }
    r.kv("config", base.to_toml());
    Ok((r, cells))
}
