//! Ablation sweeps over the prior depth, the fusion blocks and the prior
//! itself, each trained and evaluated on the same data.

use std::path::Path;

use anyhow::{bail, Result};
use handgcat_core::cat::CatVariant;
use handgcat_core::model::PriorKind;
use handgcat_core::DType;
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::evaluate::{evaluate, EvalReport};
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Table {
    /// Graph convolution depth 1 to 5, plus the MLP prior.
    Depth,
    /// Cross-attention blocks 1 to 3, plus the plain transformer.
    Blocks,
    /// Full model against the image-only network.
    Prior,
}

impl Table {
    pub fn name(self) -> &'static str {
        match self {
            Table::Depth => "gcn_depth",
            Table::Blocks => "cat_blocks",
            Table::Prior => "prior",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gcn_depth" | "depth" => Ok(Table::Depth),
            "cat_blocks" | "blocks" => Ok(Table::Blocks),
            "prior" => Ok(Table::Prior),
            other => bail!("unknown ablation table {other:?} (expected gcn_depth, cat_blocks or prior)"),
        }
    }

    /// The configurations of this table, derived from `base`.
    pub fn grid(self, base: &RunConfig) -> Vec<RunConfig> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Table::Depth => {
                let mut v: Vec<RunConfig> = (1..=5)
                    .map(|d| {
                        with(&|c| {
                            c.model.prior = PriorKind::Graph;
                            c.model.kgc.depth = d;
                            c.model.kgc.widths.clear();
                        })
                    })
                    .collect();
                v.push(with(&|c| c.model.prior = PriorKind::Mlp));
                v
            }
            Table::Blocks => {
                let mut v: Vec<RunConfig> = (1..=3)
                    .map(|b| {
                        with(&|c| {
                            c.model.cat.variant = CatVariant::Cat;
                            c.model.cat.blocks = b;
                        })
                    })
                    .collect();
                v.push(with(&|c| c.model.cat.variant = CatVariant::PlainTransformer));
                v
            }
            Table::Prior => vec![with(&|c| c.model.prior = PriorKind::Graph), with(&|c| c.model.prior = PriorKind::None)],
        }
    }
}

/// One ablation result.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub table: String,
    pub label: String,
    pub prior: String,
    /// 0 when the prior is not a graph convolution stack.
    pub gcn_depth: usize,
    pub cat_variant: String,
    pub cat_blocks: usize,
    pub seed: u64,
    pub steps: usize,
    pub final_train_loss: f64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub mpvpe_mm: f64,
    pub pa_mpvpe_mm: f64,
    pub auc_pck: f64,
    pub auc_pcv: f64,
    pub f_at_5: f64,
    pub f_at_15: f64,
    pub test_samples: usize,
}

impl AblationRow {
    fn new(table: Table, cfg: &RunConfig, steps: usize, final_loss: f64, r: &EvalReport) -> Self {
        let m = &cfg.model;
        let o = &r.overall;
        Self {
            table: table.name().into(),
            label: m.label(),
            prior: m.prior.name().into(),
            gcn_depth: if m.prior == PriorKind::Graph { m.kgc.depth } else { 0 },
            cat_variant: m.cat.variant.name().into(),
            cat_blocks: m.cat.blocks,
            seed: cfg.seed,
            steps,
            final_train_loss: final_loss,
            mpjpe_mm: o.mpjpe_mm,
            pa_mpjpe_mm: o.pa_mpjpe_mm,
            mpvpe_mm: o.mpvpe_mm,
            pa_mpvpe_mm: o.pa_mpvpe_mm,
            auc_pck: o.auc_pck,
            auc_pcv: o.auc_pcv,
            f_at_5: o.f_at_5,
            f_at_15: o.f_at_15,
            test_samples: o.sample_count,
        }
    }

    /// Every numeric field is finite.
    pub fn is_populated(&self) -> bool {
        [
            self.final_train_loss,
            self.mpjpe_mm,
            self.pa_mpjpe_mm,
            self.mpvpe_mm,
            self.pa_mpvpe_mm,
            self.auc_pck,
            self.auc_pcv,
            self.f_at_5,
            self.f_at_15,
        ]
        .iter()
        .all(|v| v.is_finite())
            && self.test_samples > 0
            && !self.label.is_empty()
    }
}

/// Trains and evaluates one configuration.
pub fn run_one(table: Table, cfg: &RunConfig, data: &Dataset, log: &mut dyn FnMut(&str)) -> Result<AblationRow> {
    if data.test.is_empty() {
        bail!("ablation needs a non-empty test split");
    }
    macro_rules! go {
        ($s:ty) => {{
            let t = train::<$s>(cfg, &data.train, None, log)?;
            let r = evaluate(cfg, &t.model, &t.params, &data.test)?;
            AblationRow::new(table, cfg, t.report.steps, t.report.final_loss, &r)
        }};
    }
    Ok(match cfg.precision {
        DType::F32 => go!(f32),
        DType::F64 => go!(f64),
    })
}

/// Runs every configuration of every table for every seed.
pub fn run(tables: &[Table], base: &RunConfig, seeds: &[u64], data: &Dataset, log: &mut dyn FnMut(&str)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &table in tables {
        for &seed in seeds {
            let base = RunConfig { seed, ..base.clone() };
            for cfg in table.grid(&base) {
                log(&format!("[{}] {} seed {seed}", table.name(), cfg.model.label()));
                rows.push(run_one(table, &cfg, data, log)?);
            }
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
