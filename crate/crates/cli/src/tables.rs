//! CSV tables emitted by `ablate` and `robustness`, and their parsers.
//! Metric columns are fractions in `[0, 1]`; drops are `full − degraded`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use symfuse::train::{AblationVariant, RobustnessReport};
use symfuse::MetricsReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub cpia: bool,
    pub dgfm: bool,
    pub mcrm: bool,
    pub trainable_params: usize,
    pub oa: f64,
    pub mf1: f64,
    pub miou: f64,
}

impl AblationRow {
    pub fn new(variant: AblationVariant, trainable_params: usize, test: &MetricsReport) -> Self {
        let cfg = variant.configure(&symfuse::RunConfig::default());
        Self {
            variant: variant.label().to_string(),
            cpia: cfg.cpia.enabled,
            dgfm: cfg.dgfm.enabled,
            mcrm: cfg.mcrm.enabled,
            trainable_params,
            oa: test.oa,
            mf1: test.mf1,
            miou: test.miou,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    /// `checkpoint`, `mcrm_on` or `mcrm_off`.
    pub model: String,
    pub seed: u64,
    /// `full`, `rgb_only`, `aux_only`, `drop_rgb_only` or `drop_aux_only`.
    pub setting: String,
    pub oa: f64,
    pub mf1: f64,
    pub miou: f64,
}

/// The five rows describing one robustness report.
pub fn robustness_rows(model: &str, seed: u64, r: &RobustnessReport) -> Vec<RobustnessRow> {
    let row = |setting: &str, oa: f64, mf1: f64, miou: f64| RobustnessRow {
        model: model.to_string(),
        seed,
        setting: setting.to_string(),
        oa,
        mf1,
        miou,
    };
    vec![
        row("full", r.full.oa, r.full.mf1, r.full.miou),
        row("rgb_only", r.rgb_only.oa, r.rgb_only.mf1, r.rgb_only.miou),
        row("aux_only", r.aux_only.oa, r.aux_only.mf1, r.aux_only.miou),
        row("drop_rgb_only", r.rgb_only_drop.oa, r.rgb_only_drop.mf1, r.rgb_only_drop.miou),
        row("drop_aux_only", r.aux_only_drop.oa, r.aux_only_drop.mf1, r.aux_only_drop.miou),
    ]
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

pub fn parse_csv<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

/// Fixed-width rendering for the terminal, metrics in percent.
pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<12} {:>5} {:>5} {:>5} {:>12} {:>7} {:>7} {:>7}\n",
        "variant", "cpia", "dgfm", "mcrm", "params(M)", "OA", "mF1", "mIoU"
    );
    let mark = |b: bool| if b { "x" } else { "-" };
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>5} {:>5} {:>12.4} {:>7.2} {:>7.2} {:>7.2}",
            r.variant,
            mark(r.cpia),
            mark(r.dgfm),
            mark(r.mcrm),
            r.trainable_params as f64 / 1e6,
            100.0 * r.oa,
            100.0 * r.mf1,
            100.0 * r.miou
        );
    }
    s
}

pub fn render_robustness(rows: &[RobustnessRow]) -> String {
    let mut s = format!(
        "{:<10} {:>6} {:<14} {:>7} {:>7} {:>7}\n",
        "model", "seed", "setting", "OA", "mF1", "mIoU"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:<14} {:>7.2} {:>7.2} {:>7.2}",
            r.model,
            r.seed,
            r.setting,
            100.0 * r.oa,
            100.0 * r.mf1,
            100.0 * r.miou
        );
    }
    s
}
