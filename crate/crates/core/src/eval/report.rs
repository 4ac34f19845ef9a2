use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{DescriptionPolarity, EvalError, EvalReport, Prediction};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(EvalError::Input(format!("unknown report format {other:?}"))),
        }
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Markdown => {
            let mut s = String::new();
            let _ = writeln!(s, "# Evaluation ({} protocol)\n", report.protocol);
            let _ = writeln!(s, "| Protocol | Full | Presence | Absence |");
            let _ = writeln!(s, "|---|---|---|---|");
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |\n",
                report.protocol,
                pct(report.map_full),
                pct(report.map_presence),
                pct(report.map_absence)
            );
            let th: Vec<String> = report.iou_thresholds.iter().map(|t| format!("{t:.2}")).collect();
            let _ = writeln!(
                s,
                "mAP x 100 over IoU thresholds {}; scored descriptions: {} full, {} presence, {} absence.\n",
                th.join(", "),
                report.scored_full,
                report.scored_presence,
                report.scored_absence
            );
            let _ = writeln!(s, "| Description | Polarity | GT | Predictions | AP |");
            let _ = writeln!(s, "|---|---|---|---|---|");
            for d in &report.per_description {
                let pol = match d.polarity {
                    DescriptionPolarity::Presence => "Presence",
                    DescriptionPolarity::Absence => "Absence",
                };
                let ap = d.ap.map(pct).unwrap_or_else(|| "-".into());
                let _ = writeln!(
                    s,
                    "| {} | {pol} | {} | {} | {ap} |",
                    d.description_id, d.num_gt, d.num_predictions
                );
            }
            s
        }
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, render_report(report, format)).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<(), EvalError> {
    let mut s = String::new();
    for p in predictions {
        s.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let p: Prediction =
                serde_json::from_str(l).map_err(|e| EvalError::InvalidPrediction(format!("line {}: {e}", n + 1)))?;
            p.validate()?;
            Ok(p)
        })
        .collect()
}
