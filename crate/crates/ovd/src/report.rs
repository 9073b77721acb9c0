//! Metrics report: JSON with APs in percent, and a plain-text table.

use std::fmt::Write as _;

use ovd_core::eval::{CategorySplit, GroundTruthSet, MetricsReport, Protocol};
use ovd_core::ClassId;
use serde::Serialize;

/// Name and base/novel role of each category.
#[derive(Debug, Clone, Copy)]
pub struct CategoryNames<'a> {
    pub gt: &'a GroundTruthSet,
    pub split: &'a CategorySplit,
}

impl CategoryNames<'_> {
    pub fn name(&self, id: ClassId) -> &str {
        self.gt.categories().get(&id).map_or("?", String::as_str)
    }

    pub fn role(&self, id: ClassId) -> &'static str {
        if self.split.novel().contains(&id) {
            "novel"
        } else {
            "base"
        }
    }
}

fn pct(v: Option<f64>) -> Option<f64> {
    v.map(|x| x * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRow {
    pub id: ClassId,
    pub name: String,
    pub split: &'static str,
    /// `null` for classes without ground truth.
    pub ap50: Option<f64>,
    pub num_gt: usize,
    pub num_dets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub apr: Option<f64>,
    pub apc: Option<f64>,
    pub apf: Option<f64>,
    pub map_mean_of_groups: Option<f64>,
    pub map_mean_over_classes: Option<f64>,
}

/// APs in percent; `null` where undefined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportJson {
    pub protocol: Protocol,
    pub novel_ap50: Option<f64>,
    pub base_ap50: Option<f64>,
    pub overall_ap50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lvis: Option<GroupRow>,
    pub per_class: Vec<ClassRow>,
}

impl ReportJson {
    pub fn new(report: &MetricsReport, protocol: Protocol, names: &CategoryNames<'_>) -> Self {
        ReportJson {
            protocol,
            novel_ap50: pct(report.novel),
            base_ap50: pct(report.base),
            overall_ap50: pct(report.overall),
            lvis: report.groups.as_ref().map(|g| GroupRow {
                apr: pct(g.rare),
                apc: pct(g.common),
                apf: pct(g.frequent),
                map_mean_of_groups: pct(g.mean_of_groups),
                map_mean_over_classes: pct(g.mean_over_classes),
            }),
            per_class: report
                .per_class
                .iter()
                .map(|(&id, c)| ClassRow {
                    id,
                    name: names.name(id).to_string(),
                    split: names.role(id),
                    ap50: (c.num_gt > 0).then_some(c.ap * 100.0),
                    num_gt: c.num_gt,
                    num_dets: c.num_dets,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"))
        }
        let mut rows: Vec<(String, String)> = vec![
            ("Novel AP50".into(), cell(self.novel_ap50)),
            ("Base AP50".into(), cell(self.base_ap50)),
            ("Overall AP50".into(), cell(self.overall_ap50)),
        ];
        if let Some(g) = &self.lvis {
            rows.push(("APr".into(), cell(g.apr)));
            rows.push(("APc".into(), cell(g.apc)));
            rows.push(("APf".into(), cell(g.apf)));
            rows.push(("mAP (mean of groups)".into(), cell(g.map_mean_of_groups)));
            rows.push(("mAP (mean over classes)".into(), cell(g.map_mean_over_classes)));
        }
        for c in &self.per_class {
            rows.push((format!("  {} [{}] ({})", c.name, c.id, c.split), cell(c.ap50)));
        }
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>6}");
        }
        out
    }
}
