//! Grouped bar charts (SVG) and merged result tables.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::EmotionLabel;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

/// Grouped bar data. Every group holds one bar per series; missing values
/// leave a gap.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub groups: Vec<String>,
    pub series: Vec<(String, Vec<Option<f64>>)>,
}

impl ChartSpec {
    /// Per-class sensitivities of each named report, followed by summary
    /// groups for accuracy and mean sensitivity.
    pub fn from_reports(title: &str, reports: &[(String, MetricsReport)]) -> Self {
        let mut groups: Vec<String> = EmotionLabel::CLASSES
            .iter()
            .filter(|c| {
                reports
                    .iter()
                    .any(|(_, r)| r.per_class_sensitivity.contains_key(c))
            })
            .map(|c| c.name().to_string())
            .collect();
        let classes: Vec<EmotionLabel> = groups
            .iter()
            .map(|g| g.parse().expect("class name"))
            .collect();
        groups.push("accuracy".into());
        groups.push("mean sens.".into());
        let series = reports
            .iter()
            .map(|(name, r)| {
                let mut values: Vec<Option<f64>> = classes
                    .iter()
                    .map(|c| r.per_class_sensitivity.get(c).copied())
                    .collect();
                values.push(Some(r.accuracy));
                values.push(Some(r.mean_sensitivity));
                (name.clone(), values)
            })
            .collect();
        Self {
            title: title.to_string(),
            x_label: "class".into(),
            y_label: "sensitivity".into(),
            groups,
            series,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, values) in &self.series {
            if values.len() != self.groups.len() {
                return Err(Error::InvalidConfig(format!(
                    "series {name:?} has {} values for {} groups",
                    values.len(),
                    self.groups.len()
                )));
            }
            if values.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidConfig(format!(
                    "series {name:?} has values outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 6] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860",
];

/// Renders a self-contained SVG document. Each group is a `<g class="group">`
/// element holding its bars.
pub fn render_svg(spec: &ChartSpec) -> Result<String> {
    spec.validate()?;
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 70.0);
    let bar_w = 14.0;
    let gap = 18.0;
    let n_series = spec.series.len().max(1) as f64;
    let group_w = bar_w * n_series + gap;
    let plot_w = group_w * spec.groups.len().max(1) as f64;
    let plot_h = 240.0;
    let width = left + plot_w + right;
    let legend_h = 16.0 * spec.series.len() as f64;
    let height = top + plot_h + bottom + legend_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(&spec.title)
    );
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            left + plot_w,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">{}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        escape(&spec.y_label)
    );
    for (gi, group) in spec.groups.iter().enumerate() {
        let gx = left + gi as f64 * group_w + gap / 2.0;
        let _ = writeln!(s, r#"<g class="group" data-name="{}">"#, escape(group));
        for (si, (name, values)) in spec.series.iter().enumerate() {
            if let Some(v) = values[gi] {
                let h = plot_h * v;
                let _ = writeln!(
                    s,
                    r#"<rect class="bar" x="{:.1}" y="{:.1}" width="{bar_w}" height="{h:.1}" fill="{}"><title>{}: {v:.3}</title></rect>"#,
                    gx + si as f64 * bar_w,
                    top + plot_h - h,
                    PALETTE[si % PALETTE.len()],
                    escape(name)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + bar_w * n_series / 2.0,
            top + plot_h + 16.0,
            escape(group)
        );
        s.push_str("</g>\n");
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + plot_w / 2.0,
        top + plot_h + 36.0,
        escape(&spec.x_label)
    );
    for (si, (name, _)) in spec.series.iter().enumerate() {
        let y = top + plot_h + 50.0 + 16.0 * si as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{y:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            PALETTE[si % PALETTE.len()],
            left + 16.0,
            y + 9.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_svg(spec: &ChartSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_svg(spec)?).map_err(|e| Error::io(path, e))
}
