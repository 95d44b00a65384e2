//! Evaluation report rows, the fixed-header CSV format, and markdown
//! rendering shaped like the classification/detection summary tables.

use super::HarnessError;

pub const REPORT_HEADER: &str =
    "model,loss,method,eps,clean_acc,attacked_acc,detect_acc,guarded_acc,attack_kind";

/// One report row; `attack_kind` is "all" for the pooled mixed set or a
/// single attack name for the per-attack breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub loss: String,
    pub method: String,
    pub eps: String,
    pub clean_acc: f32,
    pub attacked_acc: f32,
    pub detect_acc: f32,
    pub guarded_acc: f32,
    pub attack_kind: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.model,
                r.loss,
                r.method,
                r.eps,
                r.clean_acc,
                r.attacked_acc,
                r.detect_acc,
                r.guarded_acc,
                r.attack_kind
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| HarnessError::Data("empty report file".to_string()))?;
        if header != REPORT_HEADER {
            return Err(HarnessError::Data(format!(
                "unexpected report header: {header}"
            )));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 {
                return Err(HarnessError::Data(format!(
                    "report line {}: expected 9 fields, got {}",
                    i + 2,
                    fields.len()
                )));
            }
            let parse = |v: &str| {
                v.parse::<f32>().map_err(|_| {
                    HarnessError::Data(format!("report line {}: bad number '{v}'", i + 2))
                })
            };
            rows.push(ReportRow {
                model: fields[0].to_string(),
                loss: fields[1].to_string(),
                method: fields[2].to_string(),
                eps: fields[3].to_string(),
                clean_acc: parse(fields[4])?,
                attacked_acc: parse(fields[5])?,
                detect_acc: parse(fields[6])?,
                guarded_acc: parse(fields[7])?,
                attack_kind: fields[8].to_string(),
            });
        }
        Ok(Self { rows })
    }

    /// Pooled rows only (attack_kind == "all").
    pub fn pooled(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.attack_kind == "all")
    }

    /// Three markdown tables: classification accuracy, detection accuracy,
    /// and guarded accuracy, with epsilon columns.
    pub fn to_markdown(&self) -> String {
        let mut eps_values: Vec<String> = Vec::new();
        for r in self.pooled() {
            if !eps_values.contains(&r.eps) {
                eps_values.push(r.eps.clone());
            }
        }
        let mut out = String::new();

        out.push_str("## Classification accuracy\n\n");
        out.push_str(&markdown_header(
            &["model"],
            &eps_values
                .iter()
                .map(|e| format!("attacked ({e})"))
                .chain(std::iter::once("clean".to_string()))
                .collect::<Vec<_>>(),
        ));
        let mut models: Vec<(String, String)> = Vec::new();
        for r in self.pooled() {
            let key = (r.model.clone(), r.loss.clone());
            if !models.contains(&key) {
                models.push(key);
            }
        }
        for (model, loss) in &models {
            let mut cells = vec![format!("{model} ({loss})")];
            for eps in &eps_values {
                let v = self
                    .pooled()
                    .find(|r| &r.model == model && &r.loss == loss && &r.eps == eps)
                    .map(|r| r.attacked_acc);
                cells.push(fmt_cell(v));
            }
            let clean = self
                .pooled()
                .find(|r| &r.model == model && &r.loss == loss)
                .map(|r| r.clean_acc);
            cells.push(fmt_cell(clean));
            out.push_str(&markdown_row(&cells));
        }
        out.push('\n');

        for (title, pick) in [
            (
                "Detection accuracy",
                (|r: &ReportRow| r.detect_acc) as fn(&ReportRow) -> f32,
            ),
            ("Guarded accuracy", |r: &ReportRow| r.guarded_acc),
        ] {
            out.push_str(&format!("## {title}\n\n"));
            let mut methods: Vec<String> = Vec::new();
            for r in self.pooled() {
                if !methods.contains(&r.method) {
                    methods.push(r.method.clone());
                }
            }
            let columns: Vec<String> = methods
                .iter()
                .flat_map(|m| eps_values.iter().map(move |e| format!("{m} ({e})")))
                .collect();
            out.push_str(&markdown_header(&["model", "loss"], &columns));
            for (model, loss) in &models {
                let mut cells = vec![model.clone(), loss.clone()];
                for m in &methods {
                    for eps in &eps_values {
                        let v = self
                            .pooled()
                            .find(|r| {
                                &r.model == model
                                    && &r.loss == loss
                                    && &r.method == m
                                    && &r.eps == eps
                            })
                            .map(&pick);
                        cells.push(fmt_cell(v));
                    }
                }
                out.push_str(&markdown_row(&cells));
            }
            out.push('\n');
        }
        out
    }
}

fn fmt_cell(v: Option<f32>) -> String {
    match v {
        Some(v) => format!("{v:.2}"),
        None => "-".to_string(),
    }
}

fn markdown_header(fixed: &[&str], rest: &[String]) -> String {
    let mut cells: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
    cells.extend(rest.iter().cloned());
    let head = markdown_row(&cells);
    let sep = markdown_row(&vec!["---".to_string(); cells.len()]);
    format!("{head}{sep}")
}

fn markdown_row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row(method: &str, eps: &str, kind: &str) -> ReportRow {
        ReportRow {
            model: "simple_cnn".into(),
            loss: "mse".into(),
            method: method.into(),
            eps: eps.into(),
            clean_acc: 0.9375,
            attacked_acc: 0.4218,
            detect_acc: 0.71,
            guarded_acc: 0.68,
            attack_kind: kind.into(),
        }
    }

    #[test]
    fn csv_round_trips() {
        let report = EvalReport {
            rows: vec![
                sample_row("loss", "4/255", "all"),
                sample_row("loss", "8/255", "all"),
                sample_row("loss", "8/255", "fgsm"),
            ],
        };
        let csv = report.to_csv();
        assert!(csv.starts_with(REPORT_HEADER));
        let parsed = EvalReport::from_csv(&csv).unwrap();
        assert_eq!(parsed, report);
        assert_eq!(parsed.pooled().count(), 2);
    }

    #[test]
    fn empty_report_renders_headers_only() {
        let report = EvalReport::default();
        let md = report.to_markdown();
        assert!(md.contains("## Classification accuracy"));
        assert!(md.contains("## Detection accuracy"));
        // Header + separator per table; no data rows.
        let data_rows = md
            .lines()
            .filter(|l| l.starts_with('|') && !l.contains("---") && !l.contains("model"))
            .count();
        assert_eq!(data_rows, 0);
    }

    #[test]
    fn markdown_cells_round_trip_at_two_decimals() {
        let report = EvalReport {
            rows: vec![sample_row("loss", "8/255", "all")],
        };
        let md = report.to_markdown();
        let line = md
            .lines()
            .find(|l| l.starts_with("| simple_cnn (mse)"))
            .unwrap();
        let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
        let attacked: f32 = cells[1].parse().unwrap();
        assert!((attacked - 0.4218).abs() < 0.01);
        let clean: f32 = cells[2].parse().unwrap();
        assert!((clean - 0.9375).abs() < 0.01);
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(EvalReport::from_csv("nope\n1,2,3\n").is_err());
    }
}
