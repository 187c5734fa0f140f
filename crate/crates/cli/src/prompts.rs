//! Prompt files: UTF-8 text, one prompt per line, blank lines ignored.
//!
//! Prompts are tokenized byte by byte. Ids are `<group>-<NNN>`, numbering
//! the nonblank lines of the group's file from 0.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use routelens_core::model::encode_bytes;

use crate::error::{CliError, CliResult};

/// `name=path` as given on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    pub name: String,
    pub path: PathBuf,
}

impl FromStr for GroupSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, path) = s
            .split_once('=')
            .ok_or_else(|| format!("expected NAME=PATH, got `{s}`"))?;
        let name = name.trim();
        if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == ',') {
            return Err(format!(
                "group name `{name}` must be nonempty without spaces or commas"
            ));
        }
        if path.is_empty() {
            return Err(format!("group `{name}` has an empty path"));
        }
        Ok(GroupSpec {
            name: name.to_string(),
            path: PathBuf::from(path),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub id: String,
    pub group: String,
    pub text: String,
    pub tokens: Vec<usize>,
}

pub fn parse_prompts(group: &str, text: &str, vocab_size: usize, origin: &str) -> CliResult<Vec<Prompt>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let tokens = encode_bytes(line.as_bytes(), vocab_size)
            .map_err(|e| CliError::invalid(format_args!("{origin}:{}", lineno + 1), e))?;
        out.push(Prompt {
            id: format!("{group}-{:03}", out.len()),
            group: group.to_string(),
            text: line.to_string(),
            tokens,
        });
    }
    if out.is_empty() {
        return Err(CliError::Validation(format!("{origin}: no prompts in file")));
    }
    Ok(out)
}

pub fn read_prompt_file(group: &str, path: &Path, vocab_size: usize) -> CliResult<Vec<Prompt>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_prompts(group, &text, vocab_size, &path.display().to_string())
}

/// All groups in command-line order. Group names must be distinct.
pub fn read_groups(specs: &[GroupSpec], vocab_size: usize) -> CliResult<Vec<Prompt>> {
    if specs.is_empty() {
        return Err(CliError::Usage(
            "at least one --group NAME=PATH is required".into(),
        ));
    }
    let mut all = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        if specs[..i].iter().any(|s| s.name == spec.name) {
            return Err(CliError::Usage(format!("group `{}` given twice", spec.name)));
        }
        all.extend(read_prompt_file(&spec.name, &spec.path, vocab_size)?);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_skip_blank_lines() {
        let p = parse_prompts("benign", "hi\n\n  \nthere\r\n", 256, "t").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[1].id, "benign-001");
        assert_eq!(p[1].text, "there");
        assert_eq!(p[0].tokens, [104, 105]);
    }

    #[test]
    fn out_of_vocab_byte_names_line() {
        let err = parse_prompts("g", "ok\nzz", 120, "f.txt").unwrap_err();
        assert!(err.to_string().contains("f.txt:2"), "{err}");
        assert!(parse_prompts("g", "\n\n", 256, "f").is_err());
    }

    #[test]
    fn group_spec_parsing() {
        let g: GroupSpec = "harmful=data/h.txt".parse().unwrap();
        assert_eq!(g.name, "harmful");
        assert!("nopath".parse::<GroupSpec>().is_err());
        assert!("a b=x".parse::<GroupSpec>().is_err());
    }
}
