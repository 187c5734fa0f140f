//! Label files: `prompt_id,arm,label` lines with arm `baseline` or
//! `suppressed` and label `restricted` or `non-restricted`. A header line
//! with exactly those column names is allowed; `#` starts a comment line.

use std::fs;
use std::path::Path;

use routelens_core::intervention::{Arm, Label, LabelTable};

use crate::error::{CliError, CliResult};

pub fn parse_label_file(text: &str, origin: &str) -> CliResult<LabelTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut table = LabelTable::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Validation(format!("{origin}: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        let at = |m: String| CliError::Validation(format!("{origin}:{line}: {m}"));
        if rec.len() != 3 {
            return Err(at(format!("expected 3 fields, found {}", rec.len())));
        }
        if i == 0 && &rec[0] == "prompt_id" && &rec[1] == "arm" && &rec[2] == "label" {
            continue;
        }
        let arm = Arm::parse(&rec[1]).ok_or_else(|| at(format!("unknown arm `{}`", &rec[1])))?;
        let label = Label::parse(&rec[2]).ok_or_else(|| at(format!("unknown label `{}`", &rec[2])))?;
        if rec[0].is_empty() {
            return Err(at("empty prompt id".into()));
        }
        table.insert(&rec[0], arm, label).map_err(|e| at(e.to_string()))?;
    }
    if table.is_empty() {
        return Err(CliError::Validation(format!("{origin}: no labels")));
    }
    Ok(table)
}

pub fn load_label_file(path: &Path) -> CliResult<LabelTable> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_label_file(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_comments_and_whitespace() {
        let t = parse_label_file(
            "prompt_id,arm,label\n# judged by hand\np1, baseline, restricted\np1,suppressed,non-restricted\n",
            "l.csv",
        )
        .unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("p1", Arm::Baseline), Some(Label::Restricted));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_label_file("p1,baseline,restricted\np1,baseline,restricted\n", "l.csv").unwrap_err();
        assert!(err.to_string().contains("l.csv:2"), "{err}");
        let err = parse_label_file("p1,base,restricted\n", "l.csv").unwrap_err();
        assert!(err.to_string().contains("unknown arm"), "{err}");
        assert!(parse_label_file("p1,baseline\n", "l.csv").is_err());
    }
}
