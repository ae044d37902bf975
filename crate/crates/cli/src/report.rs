//! Aggregates `results.csv` and `per_class_ap.csv` files from run
//! directories into one markdown report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use geopretrain_core::checkpoint::save_bytes_atomic;

use crate::{Failure, Outcome};

/// Rows of one results table, keyed by model name.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: BTreeMap<String, Vec<String>>,
}

impl Table {
    fn merge(&mut self, path: &Path, text: &str) -> Outcome {
        let mut lines = text.lines().filter(|l| !l.is_empty());
        let Some(header) = lines.next() else { return Ok(()) };
        let header: Vec<String> = header.split(',').map(String::from).collect();
        if self.header.is_empty() {
            self.header = header;
        } else if self.header != header {
            return Err(Failure::Validation(anyhow!(
                "{} has columns {:?}, expected {:?}",
                path.display(),
                header,
                self.header
            )));
        }
        for line in lines {
            let cells: Vec<String> = line.split(',').map(String::from).collect();
            if cells.len() != self.header.len() {
                return Err(Failure::Validation(anyhow!("{}: malformed row `{line}`", path.display())));
            }
            self.rows.insert(cells[0].clone(), cells[1..].to_vec());
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for (model, cells) in &self.rows {
            out.push_str(model);
            for c in cells {
                out.push(',');
                out.push_str(c);
            }
            out.push('\n');
        }
        out
    }

    /// Markdown table with the largest value of each column in bold.
    pub fn to_markdown(&self) -> String {
        let cols = self.header.len().saturating_sub(1);
        let best: Vec<Option<f64>> = (0..cols)
            .map(|j| {
                self.rows
                    .values()
                    .filter_map(|r| r[j].parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
            })
            .collect();
        let mut out = format!("| {} |\n|{}\n", self.header.join(" | "), "---|".repeat(self.header.len()));
        for (model, cells) in &self.rows {
            out.push_str(&format!("| {model} |"));
            for (j, c) in cells.iter().enumerate() {
                let v = c.parse::<f64>().ok();
                if v.is_some() && v == best[j] {
                    out.push_str(&format!(" **{c}** |"));
                } else {
                    out.push_str(&format!(" {c} |"));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn collect(dir: &Path, found: &mut Vec<PathBuf>) -> Outcome {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect(&p, found)?;
        } else if matches!(p.file_name().and_then(|n| n.to_str()), Some("results.csv" | "per_class_ap.csv")) {
            found.push(p);
        }
    }
    Ok(())
}

/// Tables found under `dirs`, keyed by `<kind>` where kind is the file stem
/// plus the first header column after the model name.
pub fn gather(dirs: &[PathBuf]) -> Outcome<BTreeMap<String, Table>> {
    let mut files = Vec::new();
    for d in dirs {
        if !d.is_dir() {
            return Err(Failure::Validation(anyhow!("results directory not found: {}", d.display())));
        }
        collect(d, &mut files)?;
    }
    let mut tables: BTreeMap<String, Table> = BTreeMap::new();
    for f in files {
        let text = std::fs::read_to_string(&f)?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let key = match (stem, text.lines().next()) {
            ("results", Some(h)) => match crate::commands::results_kind(h) {
                Some(crate::config::Task::Seg) => "segmentation".to_string(),
                Some(crate::config::Task::Det) => "detection".to_string(),
                None => return Err(Failure::Validation(anyhow!("{}: unknown results header", f.display()))),
            },
            ("per_class_ap", Some(_)) => "per_class_ap".to_string(),
            _ => continue,
        };
        tables.entry(key).or_default().merge(&f, &text)?;
    }
    Ok(tables)
}

/// Writes `report.md` and one aggregated CSV per table kind to `out`.
pub fn report(dirs: &[PathBuf], out: &Path) -> Outcome {
    let tables = gather(dirs)?;
    if tables.values().all(|t| t.rows.is_empty()) {
        println!("no results");
        return Ok(());
    }
    std::fs::create_dir_all(out)?;
    let mut md = String::from("# Results\n\nValues in percent; best per column in bold.\n");
    for (kind, t) in &tables {
        md.push_str(&format!("\n## {kind}\n\n{}", t.to_markdown()));
        save_bytes_atomic(&out.join(format!("{kind}.csv")), t.to_csv().as_bytes())?;
    }
    save_bytes_atomic(&out.join("report.md"), md.as_bytes())?;
    print!("{md}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_value_is_bold() {
        let mut t = Table::default();
        t.merge(Path::new("a"), "model,AP,AP50\nB,1.00,nan\nA,2.00,3.00\n").unwrap();
        let md = t.to_markdown();
        assert!(md.contains("| A | **2.00** | **3.00** |"));
        assert!(md.contains("| B | 1.00 | nan |"));
        assert_eq!(t.to_csv(), "model,AP,AP50\nA,2.00,3.00\nB,1.00,nan\n");
        assert!(t.merge(Path::new("b"), "model,x\n").is_err());
    }
}
