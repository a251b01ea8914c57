//! Line-delimited dataset records: `instance_id<TAB>prompt ids<TAB>answer ids`,
//! ids in decimal separated by single spaces.

use std::io::{BufRead, Write};

use super::{PromptInstance, TaskError};
use crate::TokenId;

pub fn write_dataset<W: Write>(instances: &[PromptInstance], mut w: W) -> Result<(), TaskError> {
    for inst in instances {
        writeln!(
            w,
            "{}\t{}\t{}",
            inst.instance_id,
            join(&inst.prompt_tokens),
            join(&inst.answer_tokens)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<PromptInstance>, TaskError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| TaskError::Format { line: i + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let instance_id = fields[0].trim().parse().map_err(|e| err(format!("instance id: {e}")))?;
        let prompt_tokens = parse_ids(fields[1]).map_err(err)?;
        let answer_tokens = parse_ids(fields[2]).map_err(err)?;
        if prompt_tokens.is_empty() {
            return Err(err("empty prompt".into()));
        }
        out.push(PromptInstance {
            instance_id,
            prompt_tokens,
            answer_tokens,
        });
    }
    Ok(out)
}

fn join(ids: &[TokenId]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_ids(s: &str) -> Result<Vec<TokenId>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<TokenId>().map_err(|e| format!("token {t:?}: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_dataset, TaskKind, TaskSpec};

    #[test]
    fn export_then_import() {
        let spec = TaskSpec::new(TaskKind::ReverseCopy, 2, 4, 8);
        let data = generate_dataset(&spec, 25).unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().starts_with("0\t10 "));
        assert_eq!(read_dataset(&buf[..]).unwrap(), data);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(matches!(
            read_dataset("0\t10 1\n".as_bytes()),
            Err(TaskError::Format { line: 1, .. })
        ));
        assert!(read_dataset("x\t10 1\t2\n".as_bytes()).is_err());
        assert!(read_dataset("0\t10 a\t2\n".as_bytes()).is_err());
        assert!(read_dataset("0\t\t2\n".as_bytes()).is_err());
    }
}
